"""
Dataset Loader
IDX digit ingestion, multi-perspective MNIST construction, dices manifest loading,
procedural dice rendering and export to the manifest + PNG layout
"""

import gzip
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from exceptions import ConfigError, DataError
from models import AnomalyType, DatasetSplit, ViewStack

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MANIFEST_COLUMNS = ["experiment_id", "view_a_path", "view_b_path", "label", "anomaly_type"]

# Defect shares of the real dices test set
DEFAULT_ANOMALY_MIX: Dict[str, float] = {
    AnomalyType.DRILLING.value: 1 / 6,
    AnomalyType.MISSING_DOTS.value: 1 / 3,
    AnomalyType.SAWING.value: 1 / 6,
    AnomalyType.SCRATCHING.value: 1 / 3,
}
DEFAULT_ANOMALOUS_FRACTION = 60 / 133


# IDX files


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, path: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX file ({len(raw)} bytes, no header)")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    n_dims = raw[3]
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=n_dims, offset=4))
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated IDX data, expected {count} bytes after the header, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """(images in [0, 1] with shape (n, H, W), integer labels (n,)); gzip files are accepted"""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    logger.info("Loaded %d IDX images of size %s", images.shape[0], images.shape[1:])
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path: str, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (magic 0x08nn, nn = number of dimensions)"""
    array = np.asarray(array, dtype=np.uint8)
    header = (0x0800 | array.ndim).to_bytes(4, "big") + np.asarray(array.shape, dtype=">u4").tobytes()
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


# Multi-perspective MNIST


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a [0, 1] image to size x size"""
    image = np.asarray(image, dtype=np.float32)
    if image.shape == (size, size):
        return image.astype(np.float64)
    resized = Image.fromarray(image).resize((size, size), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float64), 0.0, 1.0)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def synth_multiview_mnist(
    images: np.ndarray,
    labels: np.ndarray,
    normal_digit: int,
    n_train_stacks: int,
    n_test: int,
    rng: np.random.Generator,
    normal_frac: float = 0.1,
    target_size: int = 28,
    n_views: int = 2,
) -> Tuple[DatasetSplit, DatasetSplit]:
    """Stacks of distinct images of one digit as normal objects, stacks of other digits as anomalies

    Every source image is used at most once. The test split holds
    round(normal_frac * n_test) normal stacks; the rest pair randomly drawn
    images of the other digits.
    """
    if not 0 <= normal_digit <= 9:
        raise ConfigError(f"normal_digit must be 0-9, got {normal_digit}")
    if not 0.0 <= normal_frac <= 1.0:
        raise ConfigError(f"normal_frac must lie in [0, 1], got {normal_frac}")
    if n_views < 2:
        raise ConfigError(f"need at least 2 views, got {n_views}")
    n_test_normal = _round_half_up(normal_frac * n_test)
    n_test_anomalous = n_test - n_test_normal

    normal_pool = rng.permutation(np.flatnonzero(labels == normal_digit))
    other_pool = rng.permutation(np.flatnonzero(labels != normal_digit))
    need_normal = n_views * (n_train_stacks + n_test_normal)
    need_other = n_views * n_test_anomalous
    if need_normal > len(normal_pool):
        raise DataError(f"requested {need_normal} images of digit {normal_digit}, only {len(normal_pool)} available")
    if need_other > len(other_pool):
        raise DataError(f"requested {need_other} images of non-normal digits, only {len(other_pool)} available")

    def _stack(indices: np.ndarray, label: int, sample_id: str) -> ViewStack:
        return ViewStack([resize_image(images[i], target_size) for i in indices], label=label, sample_id=sample_id)

    train_indices = normal_pool[: n_views * n_train_stacks].reshape(n_train_stacks, n_views)
    test_normal = normal_pool[n_views * n_train_stacks : need_normal].reshape(n_test_normal, n_views)
    test_anomalous = other_pool[:need_other].reshape(n_test_anomalous, n_views)

    train = [_stack(idx, 0, f"train-{i:05d}") for i, idx in enumerate(train_indices)]
    test = [(idx, 0) for idx in test_normal] + [(idx, 1) for idx in test_anomalous]
    order = rng.permutation(len(test))
    test_samples = [_stack(test[j][0], test[j][1], f"test-{i:05d}") for i, j in enumerate(order)]

    desc = f"digit {normal_digit}"
    logger.info(
        "Built multi-perspective MNIST for %s: %d train stacks, %d test (%d normal, %d anomalous), %dx%d",
        desc,
        len(train),
        len(test_samples),
        n_test_normal,
        n_test_anomalous,
        target_size,
        target_size,
    )
    return DatasetSplit(train, "train", desc), DatasetSplit(test_samples, "test", desc)


# Dices manifest


def _load_png(path: str, image_size: Optional[int]) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return resize_image(pixels, image_size) if image_size else pixels


def _read_manifest(path: str, role: str, image_size: Optional[int]) -> DatasetSplit:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(frame.columns)}")
    duplicated = frame["experiment_id"][frame["experiment_id"].duplicated()].tolist()
    if duplicated:
        raise DataError(f"{path}: duplicate experiment id(s) {duplicated}")
    known_types = {t.value for t in AnomalyType}
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for row in frame.itertuples(index=False):
        if row.label not in ("0", "1"):
            raise DataError(f"{path}: experiment {row.experiment_id} has label {row.label!r}, expected 0 or 1")
        label = int(row.label)
        if role == "train" and label != 0:
            raise DataError(f"{path}: training manifest contains anomalous experiment {row.experiment_id}")
        anomaly = row.anomaly_type.strip()
        if not anomaly:
            raise DataError(f"{path}: experiment {row.experiment_id} has no anomaly_type, use 'none' for good dice")
        if anomaly not in known_types:
            raise DataError(f"{path}: experiment {row.experiment_id} has unknown anomaly_type {anomaly!r}")
        views = [_load_png(os.path.join(base, p), image_size) for p in (row.view_a_path, row.view_b_path)]
        samples.append(
            ViewStack(views, label=label, anomaly_type=AnomalyType(anomaly), sample_id=row.experiment_id)
        )
    return DatasetSplit(samples, role, "good dice")


def load_dices(directory: str, image_size: Optional[int] = None) -> Tuple[DatasetSplit, DatasetSplit]:
    """Read `train.csv` and `test.csv` from a dataset directory; image paths are relative to it"""
    train = _read_manifest(os.path.join(directory, "train.csv"), "train", image_size)
    test = _read_manifest(os.path.join(directory, "test.csv"), "test", image_size)
    logger.info("Loaded dices data from %s: %d train, %d test stacks", directory, len(train), len(test))
    return train, test


def export_dataset(train: DatasetSplit, test: DatasetSplit, directory: str) -> None:
    """Write 8-bit PNGs plus train.csv/test.csv in the dices manifest layout"""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    for split in (train, test):
        rows = []
        for i, sample in enumerate(split):
            if sample.n_views != 2:
                raise DataError(f"the manifest layout holds two views, sample {sample.sample_id!r} has {sample.n_views}")
            sample_id = sample.sample_id or f"{split.role}-{i:05d}"
            paths = []
            for suffix, view in zip("ab", sample.views):
                relative = os.path.join("images", f"{sample_id}_{suffix}.png")
                pixels = np.round(np.clip(view[0], 0.0, 1.0) * 255.0).astype(np.uint8)
                Image.fromarray(pixels).save(os.path.join(directory, relative))
                paths.append(relative)
            if sample.anomaly_type is not None:
                anomaly = sample.anomaly_type.value
            elif sample.label == 0:
                anomaly = AnomalyType.NONE.value
            else:
                raise DataError(f"anomalous sample {sample_id!r} has no anomaly_type; the manifest layout requires one")
            rows.append([sample_id, paths[0], paths[1], sample.label, anomaly])
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(os.path.join(directory, f"{split.role}.csv"), index=False)
    logger.info("Exported %d train and %d test stacks to %s", len(train), len(test), directory)


# Synthetic dices

PIP_LAYOUT: Dict[int, List[Tuple[float, float]]] = {
    1: [(0.0, 0.0)],
    2: [(-1.0, -1.0), (1.0, 1.0)],
    3: [(-1.0, -1.0), (0.0, 0.0), (1.0, 1.0)],
    4: [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)],
    5: [(-1.0, -1.0), (-1.0, 1.0), (0.0, 0.0), (1.0, -1.0), (1.0, 1.0)],
    6: [(-1.0, -1.0), (-1.0, 0.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 0.0), (1.0, 1.0)],
}


class DiceRenderer:
    """Draws one face of a bright cube on a dark background, seen from above at a random pose"""

    def __init__(self, image_size: int = 64, noise_sigma: float = 0.02):
        if image_size < 16:
            raise ConfigError(f"dice images need at least 16x16 pixels, got {image_size}")
        self.image_size = image_size
        self.noise_sigma = noise_sigma
        self.half_side = 0.3 * image_size
        self.pip_radius = max(0.13 * self.half_side, 0.75)
        self.drill_radius = max(0.12 * self.half_side, 0.75)
        self.line_half_width = max(0.06 * self.half_side, 0.75)

    def render(
        self, face: int, rng: np.random.Generator, defect: Optional[AnomalyType] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(image in [0, 1], boolean defect mask)"""
        size = self.image_size
        s = self.half_side
        angle = rng.uniform(0.0, 2.0 * np.pi)
        center = size / 2.0 + rng.uniform(-0.05 * size, 0.05 * size, size=2)
        brightness = rng.uniform(0.6, 0.9)
        background = rng.uniform(0.02, 0.1)

        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        dx, dy = xs - center[0], ys - center[1]
        u = np.cos(angle) * dx + np.sin(angle) * dy
        v = -np.sin(angle) * dx + np.cos(angle) * dy
        on_face = (np.abs(u) <= s) & (np.abs(v) <= s)

        image = np.full((size, size), background)
        image[on_face] = brightness
        pips = [self._disc(u, v, pu * 0.5 * s, pv * 0.5 * s, self.pip_radius) for pu, pv in PIP_LAYOUT[face]]
        mask = np.zeros((size, size), dtype=bool)

        if defect == AnomalyType.MISSING_DOTS:
            removed = int(rng.integers(len(pips)))
            mask = pips.pop(removed) & on_face
        for pip in pips:
            image[pip & on_face] = 0.15

        if defect == AnomalyType.DRILLING:
            pu, pv = rng.uniform(-0.7 * s, 0.7 * s, size=2)
            mask = self._disc(u, v, pu, pv, self.drill_radius) & on_face
            image[mask] = 0.0
        elif defect == AnomalyType.SAWING:
            # short cut perpendicular to one edge, crossing it
            edge_sign = rng.choice([-1.0, 1.0])
            offset = rng.uniform(-0.7 * s, 0.7 * s)
            along = edge_sign * u
            mask = (np.abs(v - offset) <= self.line_half_width) & (along >= 0.6 * s) & (along <= 1.1 * s)
            image[mask] = 0.1
        elif defect == AnomalyType.SCRATCHING:
            theta = rng.uniform(0.0, np.pi)
            offset = rng.uniform(-0.4 * s, 0.4 * s)
            distance = np.abs(np.cos(theta) * u + np.sin(theta) * v - offset)
            mask = (distance <= self.line_half_width) & on_face & (np.abs(u) <= 0.8 * s) & (np.abs(v) <= 0.8 * s)
            image[mask] = brightness - 0.15
        elif defect not in (None, AnomalyType.NONE, AnomalyType.MISSING_DOTS):
            raise ConfigError(f"unknown defect {defect}")

        if defect not in (None, AnomalyType.NONE) and not mask.any():
            raise DataError(f"{defect.value} defect left no visible pixels at image size {size}")
        image = image + rng.normal(0.0, self.noise_sigma, size=image.shape)
        return np.clip(image, 0.0, 1.0), mask

    @staticmethod
    def _disc(u: np.ndarray, v: np.ndarray, cu: float, cv: float, radius: float) -> np.ndarray:
        return (u - cu) ** 2 + (v - cv) ** 2 <= radius ** 2


def render_dice_sample(
    face: int,
    rng: np.random.Generator,
    image_size: int = 64,
    defect: Optional[AnomalyType] = None,
    defect_view: int = 0,
    n_views: int = 2,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Views of one die and their defect masks; odd views show the opposite face (7 - face)"""
    if face not in PIP_LAYOUT:
        raise ConfigError(f"face must be 1-6, got {face}")
    renderer = DiceRenderer(image_size)
    views, masks = [], []
    for view in range(n_views):
        shown = face if view % 2 == 0 else 7 - face
        image, mask = renderer.render(shown, rng, defect if view == defect_view else None)
        views.append(image)
        masks.append(mask)
    return views, masks


def largest_remainder(total: int, proportions: Sequence[float]) -> List[int]:
    """Integer counts summing to total, closest to total * proportions"""
    quotas = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    for i in np.argsort(-remainders, kind="stable")[: total - int(counts.sum())]:
        counts[i] += 1
    return counts.tolist()


def synth_dices(
    n_train: int,
    n_test: int,
    rng: np.random.Generator,
    anomaly_mix: Optional[Dict[str, float]] = None,
    image_size: int = 64,
    anomalous_frac: float = DEFAULT_ANOMALOUS_FRACTION,
    n_views: int = 2,
) -> Tuple[DatasetSplit, DatasetSplit]:
    """Procedural dices data; each anomalous test stack shows one defect in exactly one random view"""
    mix = dict(DEFAULT_ANOMALY_MIX if anomaly_mix is None else anomaly_mix)
    types = [AnomalyType(name) for name in mix]
    if AnomalyType.NONE in types:
        raise ConfigError("anomaly_mix cannot contain 'none'")
    if any(p < 0 for p in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ConfigError(f"anomaly_mix proportions must be non-negative and sum to 1, got {mix}")
    if not 0.0 <= anomalous_frac <= 1.0:
        raise ConfigError(f"anomalous_frac must lie in [0, 1], got {anomalous_frac}")

    n_anomalous = _round_half_up(anomalous_frac * n_test)
    per_type = largest_remainder(n_anomalous, list(mix.values()))
    plan: List[Optional[AnomalyType]] = [None] * (n_test - n_anomalous)
    for anomaly, count in zip(types, per_type):
        plan.extend([anomaly] * count)
    plan = [plan[i] for i in rng.permutation(len(plan))]

    def _sample(defect: Optional[AnomalyType], sample_id: str) -> ViewStack:
        face = int(rng.integers(1, 7))
        defect_view = int(rng.integers(n_views))
        views, _ = render_dice_sample(face, rng, image_size, defect, defect_view, n_views)
        label = 0 if defect is None else 1
        return ViewStack(views, label=label, anomaly_type=defect or AnomalyType.NONE, sample_id=sample_id)

    train = [_sample(None, f"dice-train-{i:05d}") for i in range(n_train)]
    test = [_sample(defect, f"dice-test-{i:05d}") for i, defect in enumerate(plan)]
    logger.info(
        "Synthesized dices: %d train, %d test (%s)",
        n_train,
        n_test,
        ", ".join(f"{t.value}={c}" for t, c in zip(types, per_type)),
    )
    return DatasetSplit(train, "train", "good dice"), DatasetSplit(test, "test", "good dice")
