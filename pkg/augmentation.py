"""
Augmentation
Random erasing, image-constituent changes and geometric transforms, and the augmented training sets of the ablation study
"""

import logging
from typing import List, Optional, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage

import settings
from exceptions import DataError
from models import AugmentationPolicy, AugmentationSet, DatasetSplit, ViewStack
from ndgrad import Tensor

logger = logging.getLogger(__name__)

CONSTITUENT_OPS = ("brightness", "contrast", "saturation", "noise")
GEOMETRY_OPS = ("hflip", "vflip", "rotate")


def random_erase(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero a rectangle whose area fraction and aspect ratio are drawn from the policy ranges"""
    height, width = image.shape
    area = rng.uniform(*policy.erase_area_frac) * height * width
    log_low, log_high = np.log(policy.erase_aspect[0]), np.log(policy.erase_aspect[1])
    for _ in range(10):
        aspect = np.exp(rng.uniform(log_low, log_high))
        rows = int(round(np.sqrt(area * aspect)))
        cols = int(round(np.sqrt(area / aspect)))
        if 0 < rows <= height and 0 < cols <= width:
            top = int(rng.integers(0, height - rows + 1))
            left = int(rng.integers(0, width - cols + 1))
            erased = image.copy()
            erased[top : top + rows, left : left + cols] = 0.0
            return erased
    return image


def change_constituents(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """One of brightness, contrast, saturation (no-op on one channel) or additive Gaussian noise"""
    op = CONSTITUENT_OPS[int(rng.integers(len(CONSTITUENT_OPS)))]
    if op == "brightness":
        return image * rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    if op == "contrast":
        mean = image.mean()
        return mean + (image - mean) * rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    if op == "saturation":
        return image
    return image + rng.normal(0.0, policy.gaussian_sigma, size=image.shape)


def change_geometry(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip, vertical flip or a bilinear rotation with zero fill"""
    op = GEOMETRY_OPS[int(rng.integers(len(GEOMETRY_OPS)))]
    if op == "hflip":
        return image[:, ::-1].copy()
    if op == "vflip":
        return image[::-1, :].copy()
    angle = rng.uniform(*policy.rotation_degrees)
    return ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)


def augment(
    image: Union[np.ndarray, Tensor], policy: AugmentationPolicy, rng: np.random.Generator
) -> Union[np.ndarray, Tensor]:
    """Apply one random transform per enabled category; output clipped to [0, 1]

    Accepts (H, W) or (1, H, W) images, as arrays or tensors, and returns the same kind.
    """
    values = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    plane = values.reshape(values.shape[-2:]).astype(np.float64)
    if policy.enable_geometry:
        plane = change_geometry(plane, policy, rng)
    if policy.enable_constituents:
        plane = change_constituents(plane, policy, rng)
    if policy.enable_erase:
        plane = random_erase(plane, policy, rng)
    out = np.clip(plane, 0.0, 1.0).reshape(values.shape)
    return Tensor(out) if isinstance(image, Tensor) else out


def _augment_sample(sample: ViewStack, policy: AugmentationPolicy, master_seed: int, index: int) -> ViewStack:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, index]))
    views = [augment(view, policy, rng) for view in sample.views]
    return ViewStack(views, label=sample.label, anomaly_type=sample.anomaly_type, sample_id=f"{sample.sample_id}+aug")


def build_augmented_set(
    train: DatasetSplit,
    set_id: AugmentationSet,
    rng: np.random.Generator,
    policy: Optional[AugmentationPolicy] = None,
    n_jobs: Optional[int] = None,
) -> DatasetSplit:
    """Originals plus one augmented copy per sample (2n samples)

    Each copy draws from its own generator seeded by (master seed, sample index),
    so results do not depend on n_jobs. The views of a stack get independent parameters.
    """
    if train.role != "train":
        raise DataError("augmented sets are built from training data only")
    set_id = AugmentationSet(set_id)
    policy = policy or AugmentationPolicy.for_set(set_id)
    master_seed = int(rng.integers(2**32))
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    copies: List[ViewStack] = Parallel(n_jobs=n_jobs)(
        delayed(_augment_sample)(sample, policy, master_seed, i) for i, sample in enumerate(train.samples)
    )
    logger.info("Built augmented set %s: %d originals + %d copies", set_id.value, len(train), len(copies))
    return DatasetSplit(list(train.samples) + copies, "train", train.normal_class_desc)
