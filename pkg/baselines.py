"""
Shallow Baselines
PCA reduction of flattened stacks, One-Class SVM (SMO dual solver), Gaussian KDE and Isolation Forest,
with grid search over the published parameter grids
"""

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from sklearn.decomposition import PCA
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.neighbors import KernelDensity

import settings
from evaluation import confusion_matrix_pct, macro_f1, macro_precision_recall, roc_auc
from exceptions import ConfigError, DataError, NumericalError, ShapeError
from models import (
    BaselineResult,
    DatasetSplit,
    EvalReport,
    GridPointResult,
    IsoForest,
    IsolationTreeNode,
    OcSvmModel,
    PcaModel,
    ScoredSet,
)

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329

BASELINE_METHODS = ("ocsvm", "kde", "iforest")

OCSVM_GRID: List[Dict[str, float]] = [
    {"gamma": 2.0 ** exponent, "nu": nu} for exponent in range(-10, 0) for nu in (0.01, 0.05, 0.1)
]
KDE_GRID: List[Dict[str, float]] = [{"bandwidth": 2.0 ** (0.5 * step)} for step in range(1, 11)]
IFOREST_GRID: List[Dict[str, float]] = [{"n_trees": 100, "subsample": 256}]

DEFAULT_GRIDS = {"ocsvm": OCSVM_GRID, "kde": KDE_GRID, "iforest": IFOREST_GRID}


# PCA


def pca_fit(X: np.ndarray, min_variance: float = 0.95) -> PcaModel:
    """Keep the smallest number of components whose cumulative explained variance reaches min_variance"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"PCA needs at least 2 samples in a 2-d matrix, got shape {X.shape}")
    if not 0.0 < min_variance <= 1.0:
        raise ConfigError(f"min_variance must lie in (0, 1], got {min_variance}")
    if float(np.sum(np.var(X, axis=0))) == 0.0:
        raise DataError("all samples are identical; PCA keeps no component")
    pca = PCA(svd_solver="full").fit(X)
    cumulative = np.cumsum(pca.explained_variance_ratio_)
    q = min(int(np.searchsorted(cumulative, min_variance - 1e-12)) + 1, len(cumulative))
    logger.info("PCA keeps %d of %d components (%.4f of the variance)", q, X.shape[1], cumulative[q - 1])
    return PcaModel(
        mean=pca.mean_.copy(),
        components=pca.components_[:q].copy(),
        explained_variance_ratio=pca.explained_variance_ratio_[:q].copy(),
    )


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise ShapeError(f"PCA was fitted on {model.mean.shape[0]} features, got shape {X.shape}")
    return (X - model.mean) @ model.components.T


# One-Class SVM


def ocsvm_fit(X: np.ndarray, gamma: float, nu: float, tol: float = 1e-4, max_iter: int = 100000) -> OcSvmModel:
    """Solve min 1/2 a'Qa s.t. 0 <= a_i <= 1/(nu n), sum a = 1 by maximal-violating-pair SMO"""
    X = np.asarray(X, dtype=np.float64)
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if not 0.0 < nu <= 1.0:
        raise ConfigError(f"nu must lie in (0, 1], got {nu}")
    n = X.shape[0]
    if n == 0:
        raise DataError("OC-SVM needs training data")
    C = 1.0 / (nu * n)
    Q = rbf_kernel(X, X, gamma=gamma)

    alpha = np.zeros(n)
    full = min(int(math.floor(nu * n)), n)
    alpha[:full] = C
    if full < n:
        alpha[full] = 1.0 - full * C
    grad = Q @ alpha

    n_iter = 0
    while True:
        up = np.flatnonzero(alpha < C)
        low = np.flatnonzero(alpha > 0)
        if up.size == 0 or low.size == 0:
            break
        i = up[np.argmin(grad[up])]
        j = low[np.argmax(grad[low])]
        gap = grad[j] - grad[i]
        if gap < tol:
            break
        if n_iter >= max_iter:
            raise NumericalError(f"OC-SVM solver did not converge in {max_iter} iterations (KKT gap {gap:.3e})")
        curvature = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if curvature <= 0:
            curvature = 1e-12
        delta = gap / curvature
        room = min(C - alpha[i], alpha[j])
        if delta >= room:
            delta = room
            if room == C - alpha[i]:
                alpha[j] -= delta
                alpha[i] = C
            else:
                alpha[i] += delta
                alpha[j] = 0.0
        else:
            alpha[i] += delta
            alpha[j] -= delta
        grad += delta * (Q[:, i] - Q[:, j])
        n_iter += 1

    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        rho = float(np.mean(grad[free]))
    else:
        at_bound = grad[alpha >= C]
        at_zero = grad[alpha <= 0]
        lower = at_bound.max() if at_bound.size else at_zero.min()
        upper = at_zero.min() if at_zero.size else at_bound.max()
        rho = float((lower + upper) / 2.0)
    support = alpha > 0
    logger.debug("OC-SVM gamma=%g nu=%g: %d iterations, %d support vectors", gamma, nu, n_iter, int(support.sum()))
    return OcSvmModel(
        alphas=alpha[support], support_vectors=X[support], gamma=gamma, nu=nu, rho=rho, n_iter=n_iter
    )


def ocsvm_score(model: OcSvmModel, X: np.ndarray) -> np.ndarray:
    """rho - sum_i a_i k(x_i, x); positive means outside the learned region"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return model.rho - rbf_kernel(X, model.support_vectors, gamma=model.gamma) @ model.alphas


# Kernel density estimation


def kde_fit(X: np.ndarray, bandwidth: float) -> KernelDensity:
    X = np.asarray(X, dtype=np.float64)
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("KDE needs a non-empty training matrix")
    return KernelDensity(kernel="gaussian", bandwidth=bandwidth).fit(X)


def kde_scores(model: KernelDensity, X: np.ndarray) -> np.ndarray:
    """Negative log density; larger is more anomalous"""
    return -model.score_samples(np.atleast_2d(np.asarray(X, dtype=np.float64)))


def kde_score(train: np.ndarray, bandwidth: float, x: np.ndarray) -> float:
    return float(kde_scores(kde_fit(train, bandwidth), x)[0])


# Isolation forest


def harmonic_number(i: float) -> float:
    """Exact below 32, asymptotic expansion from 32 on"""
    if i < 1:
        return 0.0
    if i < 32:
        return float(np.sum(1.0 / np.arange(1, int(i) + 1)))
    return math.log(i) + EULER_GAMMA + 1.0 / (2.0 * i) - 1.0 / (12.0 * i * i)


def average_path_length(n: int) -> float:
    """c(n): mean unsuccessful-search path length of a binary search tree on n points"""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic_number(n - 1) - 2.0 * (n - 1) / n


def _grow_tree(X: np.ndarray, depth: int, limit: int, rng: np.random.Generator) -> IsolationTreeNode:
    n = X.shape[0]
    if depth >= limit or n <= 1:
        return IsolationTreeNode(size=n)
    feature = int(rng.integers(X.shape[1]))
    low, high = X[:, feature].min(), X[:, feature].max()
    if low == high:
        return IsolationTreeNode(size=n)
    value = float(rng.uniform(low, high))
    mask = X[:, feature] < value
    return IsolationTreeNode(
        size=n,
        split_feature=feature,
        split_value=value,
        left=_grow_tree(X[mask], depth + 1, limit, rng),
        right=_grow_tree(X[~mask], depth + 1, limit, rng),
    )


def iforest_fit(
    X: np.ndarray, rng: np.random.Generator, n_trees: int = 100, subsample: int = 256
) -> IsoForest:
    """Isolation trees on random subsamples; a subsample larger than n is clamped to n"""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if X.ndim != 2 or n < 2:
        raise DataError(f"Isolation Forest needs at least 2 samples, got shape {X.shape}")
    if n_trees < 1 or subsample < 2:
        raise ConfigError(f"invalid forest size {n_trees} / subsample {subsample}")
    psi = min(int(subsample), n)
    if psi < subsample:
        logger.info("Isolation Forest subsample clamped from %d to %d", subsample, psi)
    limit = int(math.ceil(math.log2(psi)))
    trees = []
    for seed in rng.integers(2**32, size=n_trees):
        tree_rng = np.random.default_rng(int(seed))
        sample = X[tree_rng.choice(n, size=psi, replace=False)]
        trees.append(_grow_tree(sample, 0, limit, tree_rng))
    return IsoForest(trees=trees, subsample_size=psi, height_limit=limit)


def _path_lengths(node: IsolationTreeNode, X: np.ndarray, depth: int) -> np.ndarray:
    if node.is_leaf:
        return np.full(X.shape[0], depth + average_path_length(node.size))
    out = np.empty(X.shape[0])
    mask = X[:, node.split_feature] < node.split_value
    out[mask] = _path_lengths(node.left, X[mask], depth + 1)
    out[~mask] = _path_lengths(node.right, X[~mask], depth + 1)
    return out


def iforest_score(forest: IsoForest, X: np.ndarray) -> np.ndarray:
    """2^(-E[h(x)] / c(psi)), in (0, 1]; near 1 for isolated points"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mean_path = np.mean([_path_lengths(tree, X, 0) for tree in forest.trees], axis=0)
    return np.power(2.0, -mean_path / average_path_length(forest.subsample_size))


# Grid search


def _scorer(method: str, model: Any) -> Callable[[np.ndarray], np.ndarray]:
    if method == "ocsvm":
        return lambda Z: ocsvm_score(model, Z)
    if method == "kde":
        return lambda Z: kde_scores(model, Z)
    return lambda Z: iforest_score(model, Z)


def _fit(method: str, params: Dict[str, float], X: np.ndarray, seed: int) -> Tuple[Any, Callable]:
    if method == "ocsvm":
        model = ocsvm_fit(X, params["gamma"], params["nu"])
    elif method == "kde":
        model = kde_fit(X, params["bandwidth"])
    elif method == "iforest":
        model = iforest_fit(X, np.random.default_rng(seed), int(params["n_trees"]), int(params["subsample"]))
    else:
        raise ConfigError(f"unknown baseline method {method!r}; choose one of {', '.join(BASELINE_METHODS)}")
    return model, _scorer(method, model)


def _holdout_statistic(method: str, params: Dict[str, float], holdout_scores: np.ndarray) -> float:
    """Lower is better: distance of the false-alarm rate to nu (OC-SVM), mean score otherwise"""
    if method == "ocsvm":
        return abs(float(np.mean(holdout_scores > 0)) - params["nu"])
    return float(np.mean(holdout_scores))


def _evaluate_point(
    method: str,
    params: Dict[str, float],
    fit_X: np.ndarray,
    holdout_X: Optional[np.ndarray],
    test_X: np.ndarray,
    test_labels: np.ndarray,
    seed: int,
) -> Tuple[GridPointResult, Any, np.ndarray]:
    model, score = _fit(method, params, fit_X, seed)
    test_scores = score(test_X)
    statistic = None if holdout_X is None else _holdout_statistic(method, params, score(holdout_X))
    auc = roc_auc(ScoredSet(test_scores, test_labels))
    logger.debug("%s %s: ROC AUC %.4f", method, params, auc)
    return GridPointResult(dict(params), auc, statistic), model, test_scores


def grid_search_baseline(
    method: str,
    param_grid: List[Dict[str, float]],
    train_X: np.ndarray,
    test_X: np.ndarray,
    test_labels: np.ndarray,
    rng: np.random.Generator,
    select_on: str = "test",
    holdout_frac: float = 0.2,
    n_jobs: Optional[int] = None,
) -> BaselineResult:
    """Fit every grid point and keep the best one

    select_on="test" picks the best test ROC AUC (optimistic, as published);
    select_on="holdout" picks on a held-out part of the training data only.
    """
    if not param_grid:
        raise ConfigError("empty parameter grid")
    if select_on not in ("test", "holdout"):
        raise ConfigError(f"select_on must be 'test' or 'holdout', got {select_on!r}")
    train_X = np.asarray(train_X, dtype=np.float64)
    fit_X, holdout_X = train_X, None
    if select_on == "holdout":
        order = rng.permutation(train_X.shape[0])
        n_holdout = max(1, int(round(holdout_frac * train_X.shape[0])))
        holdout_X, fit_X = train_X[order[:n_holdout]], train_X[order[n_holdout:]]
    seeds = rng.integers(2**32, size=len(param_grid))
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate_point)(method, params, fit_X, holdout_X, test_X, test_labels, int(seed))
        for params, seed in zip(param_grid, seeds)
    )
    points = [point for point, _, _ in outcomes]
    if select_on == "test":
        best = int(np.argmax([p.roc_auc for p in points]))
    else:
        best = int(np.argmin([p.holdout_statistic for p in points]))
    point, model, _ = outcomes[best]
    logger.info("%s grid (%d points, selected on %s): best %s, ROC AUC %.4f", method, len(points), select_on, point.params, point.roc_auc)
    return BaselineResult(
        method=method, best_params=point.params, model=model, roc_auc=point.roc_auc, grid=points, select_on=select_on
    )


def _labels_for(method: str, scores: np.ndarray, train_scores: np.ndarray) -> np.ndarray:
    """Hard decisions: OC-SVM sign, iForest score above 0.5, KDE above the 95th train percentile"""
    if method == "ocsvm":
        return (scores > 0).astype(np.int64)
    if method == "iforest":
        return (scores > 0.5).astype(np.int64)
    return (scores > np.quantile(train_scores, 0.95)).astype(np.int64)


def flatten_stacks(split: DatasetSplit) -> np.ndarray:
    stacks = split.stacks()
    return stacks.reshape(stacks.shape[0], -1)


def run_baseline(
    method: str,
    train: DatasetSplit,
    test: DatasetSplit,
    rng: np.random.Generator,
    select_on: str = "test",
    min_variance: float = 0.95,
    param_grid: Optional[List[Dict[str, float]]] = None,
    n_jobs: Optional[int] = None,
) -> BaselineResult:
    """Flatten stacks, reduce with PCA fitted on train, grid-search the method, report"""
    if method not in BASELINE_METHODS:
        raise ConfigError(f"unknown baseline method {method!r}; choose one of {', '.join(BASELINE_METHODS)}")
    pca = pca_fit(flatten_stacks(train), min_variance)
    train_X = pca_transform(pca, flatten_stacks(train))
    test_X = pca_transform(pca, flatten_stacks(test))
    labels = test.labels()
    result = grid_search_baseline(
        method, param_grid or DEFAULT_GRIDS[method], train_X, test_X, labels, rng, select_on, n_jobs=n_jobs
    )
    score = _scorer(method, result.model)
    test_scores = score(test_X)
    pred = _labels_for(method, test_scores, score(train_X))
    precision, recall = macro_precision_recall(pred, labels)
    result.n_components = pca.n_components
    result.report = EvalReport(
        roc_auc=result.roc_auc,
        precision_macro=precision,
        recall_macro=recall,
        f1_macro=macro_f1(pred, labels),
        confusion=confusion_matrix_pct(pred, labels),
    )
    return result
