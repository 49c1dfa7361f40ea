"""
Evaluation
ROC AUC from raw scores, sign-rule labels, macro precision/recall/F1, normalized confusion matrices,
multi-seed aggregation and report tables
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from exceptions import ConfigError, DataError, NumericalError, SeedRunError, ShapeError
from models import EvalReport, ScoredSet
from svdd import classify

logger = logging.getLogger(__name__)


def roc_auc(scored: ScoredSet) -> float:
    """Mann-Whitney estimate with average ranks, so tied pairs count one half"""
    if np.any(np.isnan(scored.scores)):
        raise NumericalError("NaN anomaly score")
    positives = scored.labels == 1
    n_pos = int(positives.sum())
    n_neg = scored.labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"ROC AUC needs both classes, got {n_neg} normal and {n_pos} anomalous")
    ranks = rankdata(scored.scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def labels_from_scores(scores: np.ndarray) -> np.ndarray:
    return np.atleast_1d(classify(np.asarray(scores, dtype=np.float64)))


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeError(f"{pred.shape[0]} predictions but {truth.shape[0]} true labels")
    return pred, truth


def macro_precision_recall(pred: np.ndarray, truth: np.ndarray) -> Tuple[float, float]:
    """Per-class precision and recall averaged with equal weight; an undefined class metric counts as 0"""
    pred, truth = _check_pair(pred, truth)
    precision, recall, _, _ = precision_recall_fscore_support(
        truth, pred, labels=[0, 1], average="macro", zero_division=0
    )
    return float(precision), float(recall)


def macro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_pair(pred, truth)
    _, _, f1, _ = precision_recall_fscore_support(truth, pred, labels=[0, 1], average="macro", zero_division=0)
    return float(f1)


def confusion_matrix_pct(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """(TN FP; FN TP) in percent of each true class; a missing true class gives a NaN row"""
    pred, truth = _check_pair(pred, truth)
    counts = confusion_matrix(truth, pred, labels=[0, 1]).astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / totals * 100.0, np.nan)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, seed: Optional[int] = None) -> EvalReport:
    scored = ScoredSet(scores, labels)
    pred = labels_from_scores(scored.scores)
    precision, recall = macro_precision_recall(pred, scored.labels)
    auc = roc_auc(scored)
    return EvalReport(
        roc_auc=auc,
        precision_macro=precision,
        recall_macro=recall,
        f1_macro=macro_f1(pred, scored.labels),
        confusion=confusion_matrix_pct(pred, scored.labels),
        seed=seed,
        seeds=[] if seed is None else [seed],
        roc_auc_per_seed=[auc],
    )


def objective_value(report: EvalReport, imbalance: bool = False) -> float:
    """ROC AUC, or the mean of ROC AUC and macro F1 for imbalanced digit experiments"""
    if imbalance:
        return 0.5 * (report.roc_auc + report.f1_macro)
    return report.roc_auc


def multi_seed_report(run: Callable[[int], EvalReport], seeds: Sequence[int]) -> EvalReport:
    """Mean ROC AUC over seeds; precision, recall and confusion come from the best run"""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("multi_seed_report needs at least one seed")
    reports: List[EvalReport] = []
    for seed in seeds:
        try:
            report = run(seed)
        except Exception as e:
            raise SeedRunError(seed, e) from e
        logger.info("Seed %d - ROC AUC %.4f", seed, report.roc_auc)
        reports.append(report)
    aucs = [r.roc_auc for r in reports]
    best_index = int(np.argmax(aucs))
    best = reports[best_index]
    return EvalReport(
        roc_auc=float(np.mean(aucs)),
        precision_macro=best.precision_macro,
        recall_macro=best.recall_macro,
        f1_macro=best.f1_macro,
        confusion=best.confusion.copy(),
        seed=seeds[best_index],
        seeds=seeds,
        roc_auc_per_seed=aucs,
    )


def per_anomaly_type_reports(
    scores: np.ndarray, labels: np.ndarray, anomaly_types: Sequence[str], seed: Optional[int] = None
) -> Dict[str, EvalReport]:
    """One report per defect type, evaluated on all normal samples plus that type only"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    types = np.asarray(list(anomaly_types), dtype=object)
    if not (scores.shape[0] == labels.shape[0] == types.shape[0]):
        raise ShapeError("scores, labels and anomaly types differ in length")
    reports = {}
    for anomaly in sorted({t for t, label in zip(types, labels) if label == 1 and t}):
        mask = (labels == 0) | (types == anomaly)
        reports[anomaly] = evaluate_scores(scores[mask], labels[mask], seed)
    return reports


# Report tables


def _fmt(value: float, digits: int = 3) -> str:
    return "n/a" if value is None or np.isnan(value) else f"{value:.{digits}f}"


def _fmt_confusion(confusion: np.ndarray) -> str:
    cells = ["n/a" if np.isnan(v) else str(int(round(v))) for v in confusion.reshape(-1)]
    return f"({cells[0]} {cells[1]}; {cells[2]} {cells[3]})"


def reports_frame(reports: Dict[str, EvalReport]) -> pd.DataFrame:
    frame = pd.DataFrame([report.as_row() for report in reports.values()], index=list(reports.keys()))
    frame.index.name = "experiment"
    return frame


def reports_table(reports: Dict[str, EvalReport]) -> str:
    """Aligned text table: ROC AUC (+- std over seeds), precision, recall, confusion (TN FP; FN TP) %"""
    rows = []
    for name, report in reports.items():
        auc = _fmt(report.roc_auc)
        if len(report.roc_auc_per_seed) > 1:
            auc += f" ± {_fmt(report.auc_std)}"
        rows.append(
            {
                "Experiment": name,
                "ROC AUC": auc,
                "Precision": _fmt(report.precision_macro),
                "Recall": _fmt(report.recall_macro),
                "Confusion Matrix (TN FP; FN TP) (%)": _fmt_confusion(report.confusion),
            }
        )
    return pd.DataFrame(rows).to_string(index=False)


def write_reports(reports: Dict[str, EvalReport], directory: str, name: str = "report") -> Tuple[str, str]:
    """Write <name>.csv and <name>.txt; contents depend only on the reports"""
    if not reports:
        raise DataError("no reports to write")
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{name}.csv")
    txt_path = os.path.join(directory, f"{name}.txt")
    reports_frame(reports).to_csv(csv_path, float_format="%.6f")
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write(reports_table(reports) + "\n")
    logger.info("Wrote report %s", csv_path)
    return csv_path, txt_path
