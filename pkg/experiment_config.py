"""
Experiment Configuration
JSON schema for experiments, canonical hashing and the named presets that mirror the published result tables
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional

import settings
from baselines import BASELINE_METHODS
from exceptions import ConfigError
from models import (
    AugmentationSet,
    AutoencoderHyperParams,
    FusionStrategy,
    NetSpec,
    SvddHyperParams,
    dataclass_from_dict,
)

logger = logging.getLogger(__name__)

DATA_SOURCES = ("synth_dices", "dices_manifest", "idx")
SCALES = ("desk", "paper")
DTYPES = ("float32", "float64")


@dataclass
class DatasetConfig:
    """Where samples come from and how many"""

    source: str = "synth_dices"
    directory: str = ""  # dices manifest directory
    images_path: str = ""  # IDX images (MNIST)
    labels_path: str = ""  # IDX labels (MNIST)
    normal_digit: int = 0
    n_train: int = 500
    n_test: int = 133
    normal_frac: float = 0.1
    anomalous_frac: float = 60 / 133
    anomaly_mix: Optional[Dict[str, float]] = None
    image_size: int = 28
    n_views: int = 2

    def validate(self) -> "DatasetConfig":
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"dataset.source must be one of {', '.join(DATA_SOURCES)}, got {self.source!r}")
        if self.source == "dices_manifest" and not self.directory:
            raise ConfigError("dataset.directory is required for source 'dices_manifest'")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("dataset.images_path and dataset.labels_path are required for source 'idx'")
        if self.n_train < 1 or self.n_test < 2 or self.image_size < 1 or self.n_views < 1:
            raise ConfigError(f"invalid dataset sizes {asdict(self)}")
        return self


@dataclass
class SearchConfig:
    """Budgets of the hyperparameter search, in SVDD training epochs"""

    min_budget: int = 10
    max_budget: int = 90
    eta: int = 3
    imbalance: bool = False  # objective = mean of ROC AUC and macro F1

    def validate(self) -> "SearchConfig":
        if not 0 < self.min_budget < self.max_budget or self.eta < 2:
            raise ConfigError(f"invalid search budgets {asdict(self)}")
        return self


@dataclass
class BaselineConfig:
    methods: List[str] = field(default_factory=lambda: list(BASELINE_METHODS))
    select_on: str = "test"
    min_variance: float = 0.95
    n_trees: int = 100
    subsample: int = 256

    def validate(self) -> "BaselineConfig":
        unknown = sorted(set(self.methods) - set(BASELINE_METHODS))
        if unknown or not self.methods:
            raise ConfigError(f"baseline.methods must be a non-empty subset of {BASELINE_METHODS}, got {self.methods}")
        if self.select_on not in ("test", "holdout"):
            raise ConfigError(f"baseline.select_on must be 'test' or 'holdout', got {self.select_on!r}")
        return self


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; all randomness derives from seed"""

    name: str = "custom"
    scale: str = "desk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fusion: str = "early"
    denoise: bool = False
    noise_sigma: float = 0.1
    augmentation: Optional[str] = None
    single_view: Optional[int] = None  # score one perspective with a late-fusion model
    net: NetSpec = field(default_factory=NetSpec)
    autoencoder: AutoencoderHyperParams = field(default_factory=AutoencoderHyperParams)
    svdd: SvddHyperParams = field(default_factory=SvddHyperParams)
    search: SearchConfig = field(default_factory=SearchConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 0
    n_seeds: int = 3
    dtype: str = "float32"
    output_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {', '.join(SCALES)}, got {self.scale!r}")
        try:
            strategy = FusionStrategy(self.fusion)
            if self.augmentation is not None:
                AugmentationSet(self.augmentation)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.single_view is not None:
            if strategy != FusionStrategy.LATE:
                raise ConfigError("single_view scoring needs a late-fusion model")
            if not 0 <= self.single_view < self.dataset.n_views:
                raise ConfigError(f"single_view {self.single_view} outside 0..{self.dataset.n_views - 1}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be positive, got {self.n_seeds}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {', '.join(DTYPES)}, got {self.dtype!r}")
        if self.net.input_shape[1:] != (self.dataset.image_size, self.dataset.image_size):
            raise ConfigError(
                f"net.input_shape {self.net.input_shape} does not match dataset.image_size {self.dataset.image_size}"
            )
        self.dataset.validate()
        self.net.validate()
        self.autoencoder.validate()
        self.svdd.validate()
        self.search.validate()
        self.baseline.validate()
        return self

    @property
    def strategy(self) -> FusionStrategy:
        return FusionStrategy(self.fusion)

    @property
    def effective_noise_sigma(self) -> float:
        return self.noise_sigma if self.denoise else 0.0

    @property
    def out_dir(self) -> str:
        return self.output_dir or os.path.join(settings.OUTPUT_DIR, self.name)

    def run_seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["net"] = self.net.to_dict()
        return json.loads(json.dumps(data))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; output_dir does not change results and is left out"""
        data = self.to_dict()
        data.pop("output_dir")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        data = copy.deepcopy(data)
        nested = {
            "dataset": DatasetConfig,
            "net": NetSpec,
            "autoencoder": AutoencoderHyperParams,
            "svdd": SvddHyperParams,
            "search": SearchConfig,
            "baseline": BaselineConfig,
        }
        for key, sub_cls in nested.items():
            if key in data:
                data[key] = dataclass_from_dict(sub_cls, data[key], key)
        return dataclass_from_dict(cls, data, "experiment config").validate()


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    config = ExperimentConfig.from_dict(data)
    logger.info("Loaded config %s (%s)", path, config.config_hash()[:12])
    return config


def save_config(config: ExperimentConfig, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# Presets

# Tuned values per fusion strategy (autoencoder stage, SVDD stage)
TUNED_HYPERPARAMS = {
    FusionStrategy.EARLY: (
        AutoencoderHyperParams(lr=0.00657, batch_size=23, weight_decay=3.346e-08, epochs=127),
        SvddHyperParams(nu=0.4, lr=7.706e-06, batch_size=11, weight_decay=1.3025e-09, epochs=80),
    ),
    FusionStrategy.LATE: (
        AutoencoderHyperParams(lr=0.000178, batch_size=21, weight_decay=4.8869e-07, epochs=28),
        SvddHyperParams(nu=0.4, lr=2.339e-05, batch_size=28, weight_decay=4.95e-08, epochs=84),
    ),
    FusionStrategy.LATE_DUAL: (
        AutoencoderHyperParams(lr=0.000627, batch_size=24, weight_decay=4.88e-08, epochs=127),
        SvddHyperParams(nu=0.4, lr=7.706e-05, batch_size=11, weight_decay=1.3025e-09, epochs=80),
    ),
}
FULL_SCALE_LATENT = {FusionStrategy.EARLY: 640, FusionStrategy.LATE: 392, FusionStrategy.LATE_DUAL: 392}
FULL_SCALE_IMAGE_SIZE = 400


def _base(name: str, scale: str, fusion: FusionStrategy, dataset: DatasetConfig) -> ExperimentConfig:
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {', '.join(SCALES)}, got {scale!r}")
    config = ExperimentConfig(name=name, scale=scale, dataset=dataset, fusion=fusion.value)
    if scale == "paper":
        ae_hp, svdd_hp = TUNED_HYPERPARAMS[fusion]
        config.autoencoder = replace(ae_hp)
        config.svdd = replace(svdd_hp)
        config.net = NetSpec(
            input_shape=(2, FULL_SCALE_IMAGE_SIZE, FULL_SCALE_IMAGE_SIZE),
            conv_channels=[8, 16, 32, 32],
            latent_dim=FULL_SCALE_LATENT[fusion],
        )
        config.dataset.image_size = FULL_SCALE_IMAGE_SIZE
    else:
        config.net = NetSpec(input_shape=(2, dataset.image_size, dataset.image_size))
    return config


def _dices(scale: str) -> DatasetConfig:
    if scale == "paper":
        return DatasetConfig(source="synth_dices", n_train=2000, n_test=133)
    return DatasetConfig(source="synth_dices", n_train=500, n_test=133)


def _mnist(scale: str, digit: int) -> DatasetConfig:
    mnist = DatasetConfig(
        source="idx",
        images_path=os.path.join(settings.MNIST_DIR, "train-images-idx3-ubyte.gz"),
        labels_path=os.path.join(settings.MNIST_DIR, "train-labels-idx1-ubyte.gz"),
        normal_digit=digit,
        normal_frac=0.1,
    )
    if scale == "paper":
        mnist.n_train, mnist.n_test = 2000, 400
    else:
        mnist.n_train, mnist.n_test = 500, 100
    return mnist


_FUSION_SLUGS = {"early": FusionStrategy.EARLY, "late": FusionStrategy.LATE, "late-dual": FusionStrategy.LATE_DUAL}
_AUGMENTATION_SLUGS = {
    "all": AugmentationSet.ALL,
    "no-erase": AugmentationSet.NO_ERASE,
    "no-constituents": AugmentationSet.NO_CONSTITUENTS,
    "no-geometry": AugmentationSet.NO_GEOMETRY,
}


def _fusion_preset(slug: str, fusion: FusionStrategy, denoise: bool) -> Callable[[str], ExperimentConfig]:
    def build(scale: str) -> ExperimentConfig:
        config = _base(slug, scale, fusion, _dices(scale))
        config.denoise = denoise
        return config

    return build


def _single_perspective(scale: str) -> ExperimentConfig:
    config = _base("table3-single-perspective", scale, FusionStrategy.LATE, _dices(scale))
    config.denoise = True
    config.single_view = 0
    return config


def _baselines_dices(scale: str) -> ExperimentConfig:
    return _base("table4-baselines", scale, FusionStrategy.EARLY, _dices(scale))


def _mnist_preset(slug: str, digit: int, baseline: bool) -> Callable[[str], ExperimentConfig]:
    def build(scale: str) -> ExperimentConfig:
        config = _base(slug, scale, FusionStrategy.EARLY, _mnist(scale, digit))
        config.denoise = not baseline
        config.search.imbalance = True
        return config

    return build


def _augmentation_preset(slug: str, set_id: AugmentationSet, fusion: FusionStrategy) -> Callable[[str], ExperimentConfig]:
    def build(scale: str) -> ExperimentConfig:
        config = _base(slug, scale, fusion, _dices(scale))
        config.denoise = True
        config.augmentation = set_id.value
        return config

    return build


def _build_presets() -> Dict[str, Callable[[str], ExperimentConfig]]:
    presets: Dict[str, Callable[[str], ExperimentConfig]] = {}
    for slug, fusion in _FUSION_SLUGS.items():
        presets[f"table2-{slug}"] = _fusion_preset(f"table2-{slug}", fusion, denoise=False)
        presets[f"table3-{slug}-denoise"] = _fusion_preset(f"table3-{slug}-denoise", fusion, denoise=True)
    presets["table3-single-perspective"] = _single_perspective
    presets["table4-baselines"] = _baselines_dices
    for digit in range(10):
        presets[f"table5-digit{digit}"] = _mnist_preset(f"table5-digit{digit}", digit, baseline=False)
    for digit in (2, 3):
        presets[f"table6-baselines-digit{digit}"] = _mnist_preset(f"table6-baselines-digit{digit}", digit, baseline=True)
    for set_slug, set_id in _AUGMENTATION_SLUGS.items():
        for slug, fusion in _FUSION_SLUGS.items():
            name = f"table7-{set_slug}-{slug}"
            presets[name] = _augmentation_preset(name, set_id, fusion)
    return presets


PRESETS = _build_presets()


def is_baseline_preset(name: str) -> bool:
    return "baselines" in name


def preset(name: str, scale: str = "desk") -> ExperimentConfig:
    """Named configuration at "desk" (reduced, CPU minutes) or "paper" (full-size) scale"""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return PRESETS[name](scale).validate()
