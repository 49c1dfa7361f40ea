"""
Hyperband Search
Random configurations evaluated by successive halving over training-epoch budgets,
with a JSON-lines trial log and multi-seed re-evaluation of the winner
"""

import json
import logging
import math
import os
import time
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

import settings
from evaluation import multi_seed_report
from exceptions import AnomalyDetectionError, ConfigError
from models import EvalReport, SearchResult, SearchSpace, Trial

logger = logging.getLogger(__name__)

# (config, budget in epochs, seed) -> objective, larger is better
ObjectiveFn = Callable[[Dict[str, Any], int, int], float]
Sampler = Callable[[SearchSpace, np.random.Generator], Dict[str, Any]]


def sample_config(space: SearchSpace, rng: np.random.Generator) -> Dict[str, Any]:
    """One independent draw per dimension, in sorted name order"""
    config: Dict[str, Any] = {}
    for name in sorted(space.dimensions):
        dim = space.dimensions[name]
        if dim.kind == "choice":
            config[name] = dim.choices[int(rng.integers(len(dim.choices)))]
        elif dim.low == dim.high:
            config[name] = int(dim.low) if dim.kind == "int" else float(dim.low)
        elif dim.kind == "log_uniform":
            config[name] = float(np.exp(rng.uniform(np.log(dim.low), np.log(dim.high))))
        elif dim.kind == "uniform":
            config[name] = float(rng.uniform(dim.low, dim.high))
        else:
            config[name] = int(rng.integers(int(dim.low), int(dim.high) + 1))
    return config


def max_bracket(min_budget: int, max_budget: int, eta: int) -> int:
    """Largest s with min_budget * eta**s <= max_budget"""
    if eta < 2:
        raise ConfigError(f"eta must be at least 2, got {eta}")
    if not 0 < min_budget < max_budget:
        raise ConfigError(f"need 0 < min_budget < max_budget, got {min_budget} and {max_budget}")
    s = 0
    while min_budget * eta ** (s + 1) <= max_budget:
        s += 1
    return s


def rung_budgets(max_budget: int, eta: int, s: int) -> List[int]:
    """Budgets of the s + 1 rungs of a bracket, ending at max_budget"""
    return [max(1, int(round(max_budget / eta ** (s - i)))) for i in range(s + 1)]


class TrialLog:
    """Append-only JSON-lines log of finished trials"""

    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            open(path, "w", encoding="utf-8").close()

    def write(self, trial: Trial) -> None:
        if not self.path:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(trial.to_record(), sort_keys=True) + "\n")


def _run_trial(objective: ObjectiveFn, trial: Trial) -> Tuple[float, str, str, float]:
    start = time.perf_counter()
    try:
        value = float(objective(trial.config, trial.budget, trial.seed))
        if math.isnan(value):
            return value, "failed", "objective is NaN", time.perf_counter() - start
        return value, "ok", "", time.perf_counter() - start
    except Exception as e:
        return float("nan"), "failed", f"{type(e).__name__}: {e}", time.perf_counter() - start


def _run_rung(objective: ObjectiveFn, trials: List[Trial], n_jobs: int, log: TrialLog) -> None:
    outcomes = Parallel(n_jobs=n_jobs)(delayed(_run_trial)(objective, trial) for trial in trials)
    # merged in trial order, never completion order
    for trial, (value, status, error, wall_time) in zip(trials, outcomes):
        trial.objective, trial.status, trial.error, trial.wall_time = value, status, error, wall_time
        if status == "ok":
            logger.info("Trial %d (rung %d, %d epochs) - objective %.4f", trial.trial_id, trial.rung, trial.budget, value)
        else:
            logger.warning("Trial %d (rung %d, %d epochs) failed: %s", trial.trial_id, trial.rung, trial.budget, error)
        log.write(trial)


def _best(trials: Sequence[Trial]) -> Trial:
    """Best finished trial among those at the largest budget any trial finished at"""
    finished = [t for t in trials if t.status == "ok"]
    if not finished:
        raise AnomalyDetectionError(f"all {len(trials)} search trials failed")
    top_budget = max(t.budget for t in finished)
    # ties go to the earliest trial
    return max((t for t in finished if t.budget == top_budget), key=lambda t: (t.objective, -t.trial_id))


def successive_halving(
    space: SearchSpace,
    min_budget: int,
    max_budget: int,
    objective: ObjectiveFn,
    rng: np.random.Generator,
    eta: int = 3,
    n_configs: Optional[int] = None,
    seed: int = 0,
    s: Optional[int] = None,
    n_jobs: Optional[int] = None,
    log: Optional[TrialLog] = None,
    sampler: Sampler = sample_config,
    first_trial_id: int = 0,
) -> SearchResult:
    """One Hyperband bracket

    Starts n_configs random configurations at the lowest budget of the bracket, keeps the best
    ceil(n / eta) after every rung and multiplies the budget by eta up to max_budget. Failed trials
    are logged and never promoted. Every trial runs with the same fixed search seed.
    """
    s_max = max_bracket(min_budget, max_budget, eta)
    s = s_max if s is None else s
    if not 0 <= s <= s_max:
        raise ConfigError(f"bracket {s} outside 0..{s_max}")
    n_configs = eta**s if n_configs is None else n_configs
    if n_configs < 1:
        raise ConfigError(f"n_configs must be positive, got {n_configs}")
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    log = log or TrialLog(None)

    trials = _run_bracket(space, max_budget, objective, rng, eta, n_configs, seed, s, n_jobs, log, sampler, first_trial_id)
    return SearchResult(best=_best(trials), trials=trials)


def _run_bracket(
    space: SearchSpace,
    max_budget: int,
    objective: ObjectiveFn,
    rng: np.random.Generator,
    eta: int,
    n_configs: int,
    seed: int,
    s: int,
    n_jobs: int,
    log: TrialLog,
    sampler: Sampler,
    first_trial_id: int,
) -> List[Trial]:
    configs = [sampler(space, rng) for _ in range(n_configs)]
    trials: List[Trial] = []
    next_id = first_trial_id
    for rung, budget in enumerate(rung_budgets(max_budget, eta, s)):
        rung_trials = []
        for config in configs:
            rung_trials.append(Trial(trial_id=next_id, config=config, budget=budget, seed=seed, rung=rung))
            next_id += 1
        _run_rung(objective, rung_trials, n_jobs, log)
        trials.extend(rung_trials)
        finished = [t for t in rung_trials if t.status == "ok"]
        if not finished:
            logger.warning("Bracket %d: every trial of rung %d failed", s, rung)
            break
        keep = math.ceil(len(rung_trials) / eta)
        ranked = sorted(finished, key=lambda t: (-t.objective, t.trial_id))
        configs = [t.config for t in ranked[:keep]]
    return trials


def hyperband(
    space: SearchSpace,
    min_budget: int,
    max_budget: int,
    objective: ObjectiveFn,
    rng: np.random.Generator,
    eta: int = 3,
    seed: int = 0,
    n_jobs: Optional[int] = None,
    log_path: Optional[str] = None,
    sampler: Sampler = sample_config,
) -> SearchResult:
    """All brackets s = s_max .. 0; the best trial at the full budget wins"""
    s_max = max_bracket(min_budget, max_budget, eta)
    log = TrialLog(log_path)
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    trials: List[Trial] = []
    for s in range(s_max, -1, -1):
        n_configs = int(math.ceil((s_max + 1) / (s + 1) * eta**s))
        logger.info("Hyperband bracket %d: %d configurations from %d epochs", s, n_configs, rung_budgets(max_budget, eta, s)[0])
        trials.extend(
            _run_bracket(space, max_budget, objective, rng, eta, n_configs, seed, s, n_jobs, log, sampler, len(trials))
        )
    best = _best(trials)
    logger.info("Best trial %d: objective %.4f with %s", best.trial_id, best.objective, best.config)
    return SearchResult(best=best, trials=trials)


def finalize(config: Dict[str, Any], run: Callable[[Dict[str, Any], int], EvalReport], seeds: Sequence[int]) -> EvalReport:
    """Re-run the winning configuration at full budget once per seed and aggregate"""
    return multi_seed_report(lambda seed: run(config, seed), seeds)
