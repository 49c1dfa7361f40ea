"""
Deep SVDD
Soft-boundary second stage: center initialization, objective, warm-up radius schedule, scoring and the sign rule
"""

import logging
from typing import Callable, List, Union

import numpy as np

from exceptions import ConfigError, DataError, NumericalError, ShapeError
from models import FusionStrategy, Hypersphere, NetSpec, NetworkParams, SvddHyperParams, SvddModel
from ndgrad import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    no_grad,
    positive_part,
    scale,
    shift,
    sq_distance,
    total,
)

logger = logging.getLogger(__name__)

# (encoder, sample indices) -> (b, p) embeddings recorded on the graph
EmbedFn = Callable[[NetworkParams, np.ndarray], Tensor]


def init_center(train_embeddings: np.ndarray, eps: float = 0.1) -> np.ndarray:
    """Mean of the initial forward pass; components closer than eps to zero are pushed to +-eps"""
    embeddings = np.asarray(train_embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise DataError(f"need a non-empty (n, p) embedding matrix, got shape {embeddings.shape}")
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    center = embeddings.mean(axis=0)
    small = np.abs(center) < eps
    center[small & (center < 0)] = -eps
    center[small & (center >= 0)] = eps
    return center


def svdd_loss(embeddings: Tensor, sphere: Hypersphere, hp: SvddHyperParams) -> Tensor:
    """R^2 + 1/(nu*b) * sum(max(0, |phi - c|^2 - R^2)); weight decay lives in the optimizer"""
    if embeddings.ndim != 2 or embeddings.shape[1] != sphere.center.shape[0]:
        raise ShapeError(f"embeddings {embeddings.shape} do not match center of length {sphere.center.shape[0]}")
    batch = embeddings.shape[0]
    if batch == 0:
        raise DataError("empty batch")
    radius_sq = sphere.radius ** 2
    hinge = positive_part(shift(sq_distance(embeddings, sphere.center), -radius_sq))
    return shift(scale(total(hinge), 1.0 / (hp.nu * batch)), radius_sq)


def update_radius(distances_sq: np.ndarray, nu: float) -> float:
    """sqrt of the (1 - nu)-quantile of the squared distances (linear interpolation)"""
    distances_sq = np.asarray(distances_sq, dtype=np.float64).reshape(-1)
    if distances_sq.size == 0:
        raise DataError("cannot update the radius from an empty distance set")
    if np.any(distances_sq < 0):
        raise NumericalError(f"negative squared distance {distances_sq.min()}")
    return float(np.sqrt(np.quantile(distances_sq, 1.0 - nu)))


def embed_all(encoder: NetworkParams, embed: EmbedFn, n_samples: int, batch_size: int) -> np.ndarray:
    with no_grad():
        parts = [
            embed(encoder, np.arange(start, min(start + batch_size, n_samples))).data.astype(np.float64)
            for start in range(0, n_samples, batch_size)
        ]
    return np.concatenate(parts, axis=0)


def _sq_distances(embeddings: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = embeddings - center
    return np.sum(diff * diff, axis=1)


def train_svdd(
    encoder: NetworkParams,
    embed: EmbedFn,
    n_samples: int,
    hp: SvddHyperParams,
    rng: np.random.Generator,
    fusion_tag: FusionStrategy,
    net_spec: NetSpec,
) -> SvddModel:
    """Train W with R frozen for the first warmup_epochs, then re-fit R after every epoch"""
    hp.validate()
    if n_samples < 1:
        raise DataError("no training samples")

    embeddings = embed_all(encoder, embed, n_samples, hp.batch_size)
    center = init_center(embeddings, hp.center_eps)
    sphere = Hypersphere(center, update_radius(_sq_distances(embeddings, center), hp.nu))
    logger.info("SVDD init - center norm %.4f, radius %.6f", np.linalg.norm(center), sphere.radius)

    state = AdamState(lr=hp.lr)
    loss_history: List[float] = []
    radius_history: List[float] = [sphere.radius]
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n_samples)
        running = 0.0
        batches = 0
        for start in range(0, n_samples, hp.batch_size):
            index = np.sort(order[start : start + hp.batch_size])
            encoder.zero_grad()
            loss = svdd_loss(embed(encoder, index), sphere, hp)
            backward(loss)
            adam_step(encoder, state, hp.weight_decay)
            running += loss.item()
            batches += 1
        epoch_loss = running / batches
        if not np.isfinite(epoch_loss):
            raise NumericalError(
                f"SVDD loss diverged at epoch {epoch} (mean loss {epoch_loss}, radius {sphere.radius:.6f}); "
                "lower the learning rate"
            )
        if epoch > hp.warmup_epochs:
            distances = _sq_distances(embed_all(encoder, embed, n_samples, hp.batch_size), center)
            sphere.radius = update_radius(distances, hp.nu)
        loss_history.append(epoch_loss)
        radius_history.append(sphere.radius)
        logger.info("SVDD epoch %d/%d - loss %.6f, radius %.6f", epoch, hp.epochs, epoch_loss, sphere.radius)

    return SvddModel(
        encoder=encoder,
        sphere=sphere,
        hp=hp,
        fusion_tag=FusionStrategy(fusion_tag),
        net_spec=net_spec,
        loss_history=loss_history,
        radius_history=radius_history,
    )


def anomaly_score(model: SvddModel, embedding: np.ndarray) -> float:
    """|phi - c|^2 - R^2"""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != model.sphere.center.shape:
        raise ShapeError(f"embedding of shape {embedding.shape} vs center {model.sphere.center.shape}")
    diff = embedding - model.sphere.center
    return float(diff @ diff - model.sphere.radius ** 2)


def anomaly_scores(model: SvddModel, embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != model.sphere.center.shape[0]:
        raise ShapeError(f"embeddings {embeddings.shape} vs center {model.sphere.center.shape}")
    return _sq_distances(embeddings, model.sphere.center) - model.sphere.radius ** 2


def classify(score: Union[float, np.ndarray]) -> Union[int, np.ndarray]:
    """1 (anomalous) when the score is positive; a score of exactly 0 counts as normal"""
    scores = np.asarray(score, dtype=np.float64)
    if np.any(np.isnan(scores)):
        raise NumericalError("cannot classify a NaN anomaly score")
    labels = (scores > 0).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels
