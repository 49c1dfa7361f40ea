"""
Experiment Runner
Ties data, pretraining, SVDD training, evaluation, baselines and hyperparameter search together for one configuration
"""

import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import replace
from importlib import metadata
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from augmentation import build_augmented_set
from baselines import run_baseline
from checkpoint import save_checkpoint, save_pretrained
from data_loader import export_dataset, load_dices, load_idx, synth_dices, synth_multiview_mnist
from evaluation import evaluate_scores, multi_seed_report, objective_value, per_anomaly_type_reports, write_reports
from exceptions import ConfigError
from experiment_config import ExperimentConfig
from fusion import fit_fusion_model, pretrain, score_samples, single_view, strategy_net_spec
from hyperband import finalize, hyperband
from models import (
    AugmentationSet,
    AutoencoderHyperParams,
    DatasetSplit,
    EvalReport,
    NetSpec,
    PretrainedNetworks,
    SearchResult,
    SearchSpace,
    SvddHyperParams,
    SvddModel,
)

logger = logging.getLogger(__name__)

RECORDED_PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "networkx", "Pillow", "joblib", "python-dotenv")


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in RECORDED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def apply_search_config(
    config: ExperimentConfig, values: Dict[str, Any], budget: Optional[int] = None
) -> Tuple[NetSpec, AutoencoderHyperParams, SvddHyperParams]:
    """Overlay sampled hyperparameters on the configured ones; budget sets the SVDD epochs"""
    net = replace(config.net, latent_dim=int(values.get("latent_dim", config.net.latent_dim)))
    ae_hp = replace(
        config.autoencoder,
        lr=float(values.get("ae_lr", config.autoencoder.lr)),
        batch_size=int(values.get("ae_batch_size", config.autoencoder.batch_size)),
        weight_decay=float(values.get("ae_weight_decay", config.autoencoder.weight_decay)),
    )
    epochs = config.svdd.epochs if budget is None else int(budget)
    svdd_hp = replace(
        config.svdd,
        lr=float(values.get("lr", config.svdd.lr)),
        batch_size=int(values.get("batch_size", config.svdd.batch_size)),
        weight_decay=float(values.get("weight_decay", config.svdd.weight_decay)),
        nu=float(values.get("nu", config.svdd.nu)),
        epochs=epochs,
        warmup_epochs=min(config.svdd.warmup_epochs, epochs),
    )
    return net.validate(), ae_hp.validate(), svdd_hp.validate()


class ExperimentRunner:
    """Runs the commands of one experiment configuration and records what it produced"""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.out_dir = config.out_dir
        self.timings: Dict[str, float] = {}
        self.artifacts: List[str] = []
        self._data: Optional[Tuple[DatasetSplit, DatasetSplit]] = None
        self._train: Optional[DatasetSplit] = None
        self._scores: Dict[int, np.ndarray] = {}
        self._models: Dict[int, SvddModel] = {}

    @property
    def dtype(self):
        return np.float32 if self.config.dtype == "float32" else np.float64

    @contextmanager
    def timed(self, step: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[step] = self.timings.get(step, 0.0) + time.perf_counter() - start

    def _path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    # Data

    def load_data(self) -> Tuple[DatasetSplit, DatasetSplit]:
        """Train and test split of the configured source, built once per runner"""
        if self._data is not None:
            return self._data
        ds = self.config.dataset
        rng = np.random.default_rng(self.config.seed)
        with self.timed("data"):
            if ds.source == "synth_dices":
                data = synth_dices(
                    ds.n_train, ds.n_test, rng, ds.anomaly_mix, ds.image_size, ds.anomalous_frac, ds.n_views
                )
            elif ds.source == "dices_manifest":
                data = load_dices(ds.directory, ds.image_size)
            else:
                images, labels = load_idx(ds.images_path, ds.labels_path)
                data = synth_multiview_mnist(
                    images, labels, ds.normal_digit, ds.n_train, ds.n_test, rng, ds.normal_frac, ds.image_size, ds.n_views
                )
        train, test = data
        logger.info("Data ready: %d train / %d test stacks of %d views (%s)", len(train), len(test), train.n_views, train.normal_class_desc)
        self._data = (train, test)
        return self._data

    def training_split(self) -> DatasetSplit:
        """Training data after augmentation and single-perspective reduction"""
        if self._train is not None:
            return self._train
        train, _ = self.load_data()
        if self.config.augmentation is not None:
            rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 1]))
            with self.timed("augmentation"):
                train = build_augmented_set(train, AugmentationSet(self.config.augmentation), rng)
        self._train = self._reduce(train)
        return self._train

    def test_split(self) -> DatasetSplit:
        return self._reduce(self.load_data()[1])

    def _reduce(self, split: DatasetSplit) -> DatasetSplit:
        if self.config.single_view is None:
            return split
        view = self.config.single_view
        return DatasetSplit([single_view(s, view) for s in split], split.role, split.normal_class_desc)

    def synth(self) -> str:
        train, test = self.load_data()
        directory = self._path("data")
        with self.timed("export"):
            export_dataset(train, test, directory)
        self.artifacts.append(directory)
        return directory

    # Deep pipeline

    def pretrain(self, seed: int, net: Optional[NetSpec] = None, ae_hp: Optional[AutoencoderHyperParams] = None) -> PretrainedNetworks:
        rng = np.random.default_rng(seed)
        with self.timed("pretrain"):
            return pretrain(
                self.config.strategy,
                self.training_split(),
                net or self.config.net,
                ae_hp or self.config.autoencoder,
                rng,
                self.config.effective_noise_sigma,
                self.dtype,
            )

    def train(
        self,
        seed: int,
        pretrained: Optional[PretrainedNetworks] = None,
        net: Optional[NetSpec] = None,
        ae_hp: Optional[AutoencoderHyperParams] = None,
        svdd_hp: Optional[SvddHyperParams] = None,
    ) -> SvddModel:
        """Both stages for one seed; the reconstruction stage is skipped when pretrained networks are given"""
        rng = np.random.default_rng(seed)
        net = net or self.config.net
        if pretrained is not None:
            expected = strategy_net_spec(net, self.config.strategy, self.training_split().n_views)
            if pretrained.net_spec.to_dict() != expected.to_dict():
                raise ConfigError(
                    f"pretrained networks have spec {pretrained.net_spec.to_dict()}, configuration expects {expected.to_dict()}"
                )
        with self.timed("train"):
            return fit_fusion_model(
                self.config.strategy,
                self.training_split(),
                net,
                ae_hp or self.config.autoencoder,
                svdd_hp or self.config.svdd,
                rng,
                self.config.effective_noise_sigma,
                self.dtype,
                pretrained,
            )

    def check_model_shape(self, model: SvddModel) -> None:
        """Refuse a model whose network spec disagrees with the configured evaluation shape"""
        expected = strategy_net_spec(self.config.net, model.fusion_tag, self.test_split().n_views)
        if model.net_spec.to_dict() != expected.to_dict():
            raise ConfigError(
                f"checkpoint network spec {model.net_spec.to_dict()} does not match the requested "
                f"evaluation spec {expected.to_dict()}"
            )

    def evaluate(self, model: SvddModel, seed: Optional[int] = None) -> EvalReport:
        test = self.test_split()
        with self.timed("eval"):
            scores = score_samples(model, test)
        if seed is not None:
            self._scores[seed] = scores
        return evaluate_scores(scores, test.labels(), seed)

    def run_seed(self, seed: int) -> EvalReport:
        model = self.train(seed)
        self._models[seed] = model
        return self.evaluate(model, seed)

    def reproduce(self) -> Dict[str, EvalReport]:
        """Train and evaluate once per seed; write the aggregate report and one checkpoint per seed"""
        report = multi_seed_report(self.run_seed, self.config.run_seeds())
        reports = {self.config.name: report}
        self.artifacts.extend(write_reports(reports, self.out_dir))

        test = self.test_split()
        by_type = per_anomaly_type_reports(self._scores[report.seed], test.labels(), test.anomaly_types(), report.seed)
        if by_type:
            self.artifacts.extend(write_reports(by_type, self.out_dir, "report_by_anomaly"))
        fingerprint = self.training_split().fingerprint()
        for seed, model in sorted(self._models.items()):
            path = self._path("checkpoints", f"seed-{seed}")
            save_checkpoint(model, path, seed, fingerprint, self.config.config_hash())
            self.artifacts.append(path)
        return reports

    # Baselines

    def run_baselines(self) -> Dict[str, EvalReport]:
        baseline = self.config.baseline
        train, test = self.training_split(), self.test_split()
        reports: Dict[str, EvalReport] = {}
        for method in baseline.methods:
            grid = None
            if method == "iforest":
                grid = [{"n_trees": baseline.n_trees, "subsample": baseline.subsample}]
            rng = np.random.default_rng(np.random.SeedSequence([self.config.seed, 2]))
            with self.timed(f"baseline_{method}"):
                result = run_baseline(method, train, test, rng, baseline.select_on, baseline.min_variance, grid)
            logger.info("%s: best %s, ROC AUC %.4f (%d PCA components)", method, result.best_params, result.roc_auc, result.n_components)
            reports[method] = result.report
        self.artifacts.extend(write_reports(reports, self.out_dir, "baselines"))
        return reports

    # Search

    def objective(self, values: Dict[str, Any], budget: int, seed: int) -> float:
        net, ae_hp, svdd_hp = apply_search_config(self.config, values, budget)
        model = self.train(seed, net=net, ae_hp=ae_hp, svdd_hp=svdd_hp)
        return objective_value(self.evaluate(model), self.config.search.imbalance)

    def search(self, space: Optional[SearchSpace] = None) -> Tuple[SearchResult, EvalReport]:
        """Hyperband over the search space, then the winner re-run at full budget on every seed"""
        search = self.config.search
        self.training_split()
        log_path = self._path("trials.jsonl")
        with self.timed("search"):
            result = hyperband(
                space or SearchSpace.default(),
                search.min_budget,
                search.max_budget,
                self.objective,
                np.random.default_rng(np.random.SeedSequence([self.config.seed, 3])),
                search.eta,
                self.config.seed,
                log_path=log_path,
            )
        self.artifacts.append(log_path)

        def run(values: Dict[str, Any], seed: int) -> EvalReport:
            net, ae_hp, svdd_hp = apply_search_config(self.config, values, search.max_budget)
            model = self.train(seed, net=net, ae_hp=ae_hp, svdd_hp=svdd_hp)
            self._models[seed] = model
            return self.evaluate(model, seed)

        report = finalize(result.best.config, run, self.config.run_seeds())
        self.artifacts.extend(write_reports({f"{self.config.name}-search": report}, self.out_dir, "search_report"))
        best_path = self._path("checkpoints", "best")
        save_checkpoint(
            self._models[report.seed], best_path, report.seed, self.training_split().fingerprint(), self.config.config_hash()
        )
        self.artifacts.append(best_path)
        with open(self._path("best_config.json"), "w", encoding="utf-8") as f:
            json.dump(result.best.to_record(), f, indent=2, sort_keys=True)
        return result, report

    # Stage checkpoints

    def save_pretrained(self, pretrained: PretrainedNetworks, seed: int) -> str:
        path = self._path("pretrained")
        save_pretrained(pretrained, path, seed, self.training_split().fingerprint(), self.config.config_hash())
        self.artifacts.append(path)
        return path

    def save_model(self, model: SvddModel, seed: int, name: str = "model") -> str:
        path = self._path(name)
        save_checkpoint(model, path, seed, self.training_split().fingerprint(), self.config.config_hash())
        self.artifacts.append(path)
        return path

    def write_run_manifest(self, command: str) -> str:
        """run.json: command, config and its hash, package versions, step timings, artifacts"""
        os.makedirs(self.out_dir, exist_ok=True)
        path = self._path("run.json")
        manifest = {
            "command": command,
            "config_hash": self.config.config_hash(),
            "config": self.config.to_dict(),
            "versions": package_versions(),
            "timings": {step: round(seconds, 3) for step, seconds in sorted(self.timings.items())},
            "artifacts": sorted(os.path.relpath(a, self.out_dir) for a in set(self.artifacts)),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        return path
