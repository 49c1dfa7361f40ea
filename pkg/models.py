"""
Multi-Perspective Anomaly Detection
Data models: samples, network specifications, hyperparameters, fitted models and reports
"""

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigError, DataError, NumericalError, ShapeError

if TYPE_CHECKING:
    from ndgrad import Tensor


class FusionStrategy(str, Enum):
    """Where the perspectives are merged"""

    EARLY = "early"
    LATE = "late"
    LATE_DUAL = "late_dual"


class AnomalyType(str, Enum):
    """Defect taxonomy of the dices data"""

    NONE = "none"
    DRILLING = "drilling"
    MISSING_DOTS = "missing_dots"
    SAWING = "sawing"
    SCRATCHING = "scratching"


class AugmentationSet(str, Enum):
    """The four augmented training sets of the ablation"""

    ALL = "all"
    NO_ERASE = "no_erase"
    NO_CONSTITUENTS = "no_constituents"
    NO_GEOMETRY = "no_geometry"


@dataclass
class ViewStack:
    """One object seen from K perspectives"""

    views: List[np.ndarray]  # each (1, H, W), pixels in [0, 1]
    label: int = 0  # 0 non-anomalous, 1 anomalous
    anomaly_type: Optional[AnomalyType] = None  # None when the source has no defect taxonomy
    sample_id: str = ""

    def __post_init__(self):
        if len(self.views) == 0:
            raise DataError("a ViewStack needs at least one view")
        views = []
        for view in self.views:
            view = np.asarray(view, dtype=np.float64)
            if view.ndim == 2:
                view = view[None, :, :]
            if view.ndim != 3 or view.shape[0] != 1:
                raise DataError(f"each view must be a single-channel image (1, H, W), got {view.shape}")
            views.append(view)
        if len({v.shape for v in views}) != 1:
            raise DataError(f"views of one sample must share H and W, got {[v.shape for v in views]}")
        self.views = views
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")
        if self.anomaly_type is not None:
            self.anomaly_type = AnomalyType(self.anomaly_type)
            if (self.anomaly_type == AnomalyType.NONE) != (self.label == 0):
                raise DataError(
                    f"sample {self.sample_id!r}: anomaly_type {self.anomaly_type.value} contradicts label {self.label}"
                )

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.views[0].shape[1], self.views[0].shape[2]


@dataclass
class DatasetSplit:
    """A list of samples forming the train or the test part of a dataset"""

    samples: List[ViewStack]
    role: str  # "train" or "test"
    normal_class_desc: str = ""

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise DataError(f"role must be 'train' or 'test', got {self.role!r}")
        if self.role == "train":
            anomalous = [s.sample_id or str(i) for i, s in enumerate(self.samples) if s.label != 0]
            if anomalous:
                raise DataError(
                    f"training data must be one-class (label 0 only); anomalous samples: {anomalous[:5]}"
                )
        for sample in self.samples:
            for view in sample.views:
                if view.min() < 0.0 or view.max() > 1.0:
                    raise DataError(f"sample {sample.sample_id!r} has pixels outside [0, 1]")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ViewStack]:
        return iter(self.samples)

    @property
    def n_views(self) -> int:
        return self.samples[0].n_views if self.samples else 0

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def anomaly_types(self) -> List[str]:
        return [s.anomaly_type.value if s.anomaly_type is not None else "" for s in self.samples]

    def stacks(self, dtype=np.float64) -> np.ndarray:
        """All samples as one (n, K, H, W) array"""
        if not self.samples:
            raise DataError(f"{self.role} split is empty")
        return np.stack([np.concatenate(s.views, axis=0) for s in self.samples]).astype(dtype, copy=False)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for sample in self.samples:
            for view in sample.views:
                digest.update(np.ascontiguousarray(view, dtype="<f8").tobytes())
            digest.update(bytes([sample.label]))
        return digest.hexdigest()


@dataclass
class AugmentationPolicy:
    """Which augmentation categories run and with which parameter ranges"""

    enable_erase: bool = True
    enable_constituents: bool = True
    enable_geometry: bool = True
    erase_area_frac: Tuple[float, float] = (0.02, 0.2)
    erase_aspect: Tuple[float, float] = (0.3, 3.3)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    gaussian_sigma: float = 0.05
    rotation_degrees: Tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        low, high = self.erase_area_frac
        if not (0.0 < low <= high < 1.0):
            raise ConfigError(f"erase_area_frac must lie inside (0, 1) with min <= max, got {self.erase_area_frac}")
        if self.erase_aspect[0] <= 0 or self.erase_aspect[0] > self.erase_aspect[1]:
            raise ConfigError(f"invalid erase_aspect {self.erase_aspect}")
        if min(self.brightness, self.contrast, self.saturation, self.gaussian_sigma) < 0:
            raise ConfigError("jitter ranges and gaussian_sigma must be non-negative")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ConfigError(f"invalid rotation_degrees {self.rotation_degrees}")

    @property
    def active(self) -> bool:
        return self.enable_erase or self.enable_constituents or self.enable_geometry

    @classmethod
    def for_set(cls, set_id: AugmentationSet, **overrides) -> "AugmentationPolicy":
        set_id = AugmentationSet(set_id)
        flags = {
            "enable_erase": set_id != AugmentationSet.NO_ERASE,
            "enable_constituents": set_id != AugmentationSet.NO_CONSTITUENTS,
            "enable_geometry": set_id != AugmentationSet.NO_GEOMETRY,
        }
        flags.update(overrides)
        return cls(**flags)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """floor((H + 2p - K) / s) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class NetSpec:
    """Topology of the bias-free convolutional autoencoder"""

    input_shape: Tuple[int, int, int] = (2, 28, 28)
    conv_channels: List[int] = field(default_factory=lambda: [8, 16, 32])
    kernel: int = 5
    stride: int = 2
    padding: int = 2
    latent_dim: int = 32
    leaky_slope: float = 0.1
    use_bias: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = [int(c) for c in self.conv_channels]

    def validate(self) -> "NetSpec":
        if self.use_bias:
            raise ConfigError(
                "bias terms are not allowed: with biases the encoder can map every input to one constant "
                "point, the hypersphere collapses onto the center and the anomaly score stops depending on the input"
            )
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, H, W) with positive entries, got {self.input_shape}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be a non-empty list of positive ints, got {self.conv_channels}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid kernel/stride/padding {self.kernel}/{self.stride}/{self.padding}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        self.spatial_sizes()
        return self

    def spatial_sizes(self) -> List[Tuple[int, int]]:
        """(H, W) entering each conv layer, followed by the size leaving the last one"""
        h, w = self.input_shape[1], self.input_shape[2]
        sizes = [(h, w)]
        for layer in range(len(self.conv_channels)):
            h = conv_output_size(h, self.kernel, self.stride, self.padding)
            w = conv_output_size(w, self.kernel, self.stride, self.padding)
            if h < 1 or w < 1:
                raise ConfigError(
                    f"spatial size collapses below 1x1 after conv layer {layer + 1} "
                    f"(input {self.input_shape[1:]}, kernel {self.kernel}, stride {self.stride}, padding {self.padding})"
                )
            sizes.append((h, w))
        return sizes

    @property
    def flat_dim(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return self.conv_channels[-1] * h * w

    def with_channels(self, channels: int) -> "NetSpec":
        return replace(self, input_shape=(channels, self.input_shape[1], self.input_shape[2]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "latent_dim": self.latent_dim,
            "leaky_slope": self.leaky_slope,
            "use_bias": self.use_bias,
        }


def _reject_bias(name: str, weight: "Tensor") -> None:
    if "bias" in name.lower() or weight.data.ndim < 2:
        raise ConfigError(
            f"parameter {name!r} with shape {tuple(weight.data.shape)} looks like a bias; "
            "networks must stay bias-free to avoid hypersphere collapse"
        )


@dataclass
class NetworkParams:
    """Ordered, named, bias-free weights of one network"""

    layers: List[Tuple[str, "Tensor"]] = field(default_factory=list)

    def __post_init__(self):
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        for name, weight in self.layers:
            _reject_bias(name, weight)

    def add(self, name: str, weight: "Tensor") -> None:
        if name in self:
            raise ConfigError(f"layer {name!r} already exists")
        _reject_bias(name, weight)
        self.layers.append((name, weight))

    def names(self) -> List[str]:
        return [name for name, _ in self.layers]

    def __getitem__(self, name: str) -> "Tensor":
        for layer_name, weight in self.layers:
            if layer_name == name:
                return weight
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(layer_name == name for layer_name, _ in self.layers)

    def __iter__(self) -> Iterator[Tuple[str, "Tensor"]]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def n_weights(self) -> int:
        return int(sum(weight.data.size for _, weight in self.layers))

    def zero_grad(self) -> None:
        for _, weight in self.layers:
            weight.zero_grad()

    def copy(self, names: Optional[Sequence[str]] = None) -> "NetworkParams":
        """Deep copy, optionally restricted to the given layer names"""
        from ndgrad import Tensor

        selected = self.names() if names is None else list(names)
        return NetworkParams(
            [(name, Tensor(self[name].data.copy(), requires_grad=True, name=name)) for name in selected]
        )


@dataclass
class AutoencoderHyperParams:
    """Pretraining stage settings"""

    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-6
    epochs: int = 15

    def validate(self) -> "AutoencoderHyperParams":
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid autoencoder hyperparameters {asdict(self)}")
        return self


@dataclass
class SvddHyperParams:
    """Soft-boundary SVDD stage settings"""

    nu: float = 0.4
    weight_decay: float = 1e-6
    warmup_epochs: int = 10
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 32
    center_eps: float = 0.1

    def validate(self) -> "SvddHyperParams":
        if not 0.0 < self.nu <= 1.0:
            raise ConfigError(f"nu must lie in (0, 1], got {self.nu}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs <= epochs and epochs > 0, got {self.warmup_epochs}/{self.epochs}")
        if self.lr <= 0 or self.batch_size < 1 or self.center_eps <= 0:
            raise ConfigError(f"invalid SVDD hyperparameters {asdict(self)}")
        return self


@dataclass
class Hypersphere:
    """Center c and radius R in feature space"""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        self.radius = float(self.radius)
        if not np.all(np.isfinite(self.center)) or not math.isfinite(self.radius):
            raise NumericalError("hypersphere center and radius must be finite")
        if self.radius < 0:
            raise NumericalError(f"radius must be >= 0, got {self.radius}")
        if not np.any(self.center):
            raise NumericalError("hypersphere center is identically zero (collapse guard)")


@dataclass
class SvddModel:
    """Trained encoder with its hypersphere"""

    encoder: NetworkParams
    sphere: Hypersphere
    hp: SvddHyperParams
    fusion_tag: FusionStrategy
    net_spec: NetSpec
    loss_history: List[float] = field(default_factory=list)
    radius_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.fusion_tag = FusionStrategy(self.fusion_tag)
        if self.net_spec.latent_dim != self.sphere.center.shape[0]:
            raise ShapeError(
                f"encoder output dim {self.net_spec.latent_dim} != center length {self.sphere.center.shape[0]}"
            )


@dataclass
class PretrainedNetworks:
    """Result of the reconstruction stage"""

    encoder: NetworkParams
    decoders: List[NetworkParams]
    net_spec: NetSpec
    strategy: FusionStrategy
    loss_history: List[float] = field(default_factory=list)


@dataclass
class FusedEmbedding:
    phi_bar: np.ndarray

    def __post_init__(self):
        self.phi_bar = np.asarray(self.phi_bar, dtype=np.float64)
        if not np.all(np.isfinite(self.phi_bar)):
            raise NumericalError("fused embedding contains non-finite values")


@dataclass
class ScoredSet:
    """Anomaly scores with their true labels"""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(f"{self.scores.shape[0]} scores but {self.labels.shape[0]} labels")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise DataError("labels must be 0 or 1")


@dataclass
class EvalReport:
    """Metrics of one run, or of several seeds aggregated"""

    roc_auc: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    confusion: np.ndarray  # (TN FP; FN TP) in percent of each true class
    seed: Optional[int] = None
    seeds: List[int] = field(default_factory=list)
    roc_auc_per_seed: List[float] = field(default_factory=list)

    @property
    def auc_std(self) -> float:
        return float(np.std(self.roc_auc_per_seed)) if self.roc_auc_per_seed else 0.0

    @property
    def auc_min(self) -> float:
        return float(min(self.roc_auc_per_seed)) if self.roc_auc_per_seed else self.roc_auc

    @property
    def auc_max(self) -> float:
        return float(max(self.roc_auc_per_seed)) if self.roc_auc_per_seed else self.roc_auc

    def as_row(self) -> Dict[str, Any]:
        return {
            "roc_auc": self.roc_auc,
            "roc_auc_std": self.auc_std,
            "precision": self.precision_macro,
            "recall": self.recall_macro,
            "f1": self.f1_macro,
            "tn_pct": self.confusion[0, 0],
            "fp_pct": self.confusion[0, 1],
            "fn_pct": self.confusion[1, 0],
            "tp_pct": self.confusion[1, 1],
            "best_seed": self.seed,
            "seeds": " ".join(str(s) for s in self.seeds),
        }


# Shallow baselines


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (q, d), orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])


@dataclass
class OcSvmModel:
    alphas: np.ndarray
    support_vectors: np.ndarray
    gamma: float
    nu: float
    rho: float
    n_iter: int = 0


@dataclass
class IsolationTreeNode:
    size: int
    split_feature: Optional[int] = None
    split_value: Optional[float] = None
    left: Optional["IsolationTreeNode"] = None
    right: Optional["IsolationTreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class IsoForest:
    trees: List[IsolationTreeNode]
    subsample_size: int
    height_limit: int


@dataclass
class GridPointResult:
    params: Dict[str, float]
    roc_auc: float
    holdout_statistic: Optional[float] = None


@dataclass
class BaselineResult:
    """Grid search outcome of one shallow method"""

    method: str
    best_params: Dict[str, float]
    model: Any
    roc_auc: float
    grid: List[GridPointResult]
    select_on: str
    n_components: int = 0
    report: Optional[EvalReport] = None


# Hyperparameter search


@dataclass
class SearchDimension:
    """One searched hyperparameter"""

    kind: str  # "log_uniform", "uniform", "int" or "choice"
    low: float = 0.0
    high: float = 0.0
    choices: Tuple[Any, ...] = ()

    def __post_init__(self):
        if self.kind not in ("log_uniform", "uniform", "int", "choice"):
            raise ConfigError(f"unknown search dimension kind {self.kind!r}")
        if self.kind == "choice":
            self.choices = tuple(self.choices)
            if not self.choices:
                raise ConfigError("choice dimension needs at least one choice")
        elif self.low > self.high or (self.kind == "log_uniform" and self.low <= 0):
            raise ConfigError(f"invalid range [{self.low}, {self.high}] for {self.kind}")


@dataclass
class SearchSpace:
    dimensions: Dict[str, SearchDimension]

    def __post_init__(self):
        if not self.dimensions:
            raise ConfigError("search space is empty")

    @classmethod
    def default(cls) -> "SearchSpace":
        """Parameters that were tuned per fusion technique"""
        return cls(
            {
                "ae_lr": SearchDimension("log_uniform", 1e-4, 1e-2),
                "ae_batch_size": SearchDimension("int", 8, 64),
                "ae_weight_decay": SearchDimension("log_uniform", 1e-9, 1e-5),
                "lr": SearchDimension("log_uniform", 1e-6, 1e-3),
                "batch_size": SearchDimension("int", 8, 64),
                "weight_decay": SearchDimension("log_uniform", 1e-10, 1e-6),
                "latent_dim": SearchDimension("choice", choices=(16, 32, 64)),
                "nu": SearchDimension("choice", choices=(0.05, 0.1, 0.2, 0.4)),
            }
        )


@dataclass
class Trial:
    trial_id: int
    config: Dict[str, Any]
    budget: int
    seed: int
    rung: int = 0
    objective: float = float("nan")
    status: str = "pending"  # "ok" or "failed" once run
    wall_time: float = 0.0
    error: str = ""

    def to_record(self) -> Dict[str, Any]:
        record = {
            "trial_id": self.trial_id,
            "rung": self.rung,
            "config": copy.deepcopy(self.config),
            "budget": self.budget,
            "objective": None if math.isnan(self.objective) else self.objective,
            "seed": self.seed,
            "status": self.status,
            "wall_time": self.wall_time,
        }
        if self.error:
            record["error"] = self.error
        return record


@dataclass
class SearchResult:
    best: Trial
    trials: List[Trial]


def dataclass_from_dict(cls, data: Dict[str, Any], where: str = ""):
    """Build a flat dataclass from a dict, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or cls.__name__}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid {where or cls.__name__}: {e}") from e
