"""Monte Carlo study of estimator accuracy, precision, coverage and robustness.

Each replicate draws a synthetic population of ``n_total`` studies:

    participants   t ~ Poisson(mean_participants)      (redrawn while 0)
    period         O ~ lognormal(log_mean_period, log_sd_period)
    person-years   tau = t * O
    events         y ~ Binomial(round(tau), event_rate)
    covariates     x1 ~ Beta(beta_a, beta_b), x2 ~ Bernoulli(bernoulli_p)

A fraction ``outlier_proportion`` of the studies is replaced by outliers
whose counts are ``round(tau * r)`` with ``r ~ Uniform(outlier_rate_lower,
outlier_rate_upper)``; they are placed last. Zero counts are then removed
and the three estimators applied.

Replicate ``s`` draws from ``SeedSequence(seed, spawn_key=(s,))``, so every
replicate is reproducible on its own and results do not depend on how
replicates are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .dataset import (
    DataError,
    Dataset,
    StudyRecord,
    append_outlier_records,
    zero_truncate,
)
from .estimators import (
    EstimatorError,
    PopulationEstimate,
    generalised_chao,
    generalised_zelterman,
    horvitz_thompson,
    wald_ci,
)
from .glm import FitError, fit, select_ht_model

log = logging.getLogger(__name__)

ESTIMATOR_KEYS = ("ht", "gc", "gz")
REPLICATE_COLUMNS = (
    "replicate",
    "estimator",
    "n_hat",
    "variance",
    "ci_lower",
    "ci_upper",
    "converged",
    "n_observed",
    "outlier_proportion",
    "n_total",
)
UNRELIABLE_FAILURE_RATE = 0.10
THREADS_ENV = "TRUNCOUNT_THREADS"


class ConfigError(ValueError):
    """Invalid simulation configuration."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


@dataclass(frozen=True)
class SimConfig:
    """Generator and study parameters; defaults reproduce the N = 1000 study."""

    n_total: int = 1000
    replicates: int = 1000
    mean_participants: float = 900.0
    log_mean_period: float = 1.5
    log_sd_period: float = 0.8
    event_rate: float = 0.0004
    outlier_rate_lower: float = 0.007
    outlier_rate_upper: float = 0.009
    beta_a: float = 36.0
    beta_b: float = 8.5
    bernoulli_p: float = 0.4
    outlier_proportion: float = 0.0
    seed: int = 20240601
    ci_level: float = 0.95
    predictor: int = 1
    ht_family: str = "auto"

    def __post_init__(self):
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key)

        if self.n_total < 1:
            bad("n_total", "must be positive")
        if self.replicates < 1:
            bad("replicates", "must be positive")
        if self.mean_participants <= 0:
            bad("mean_participants", "must be positive")
        if self.log_sd_period <= 0:
            bad("log_sd_period", "must be positive")
        if not 0.0 <= self.event_rate < 1.0:
            bad("event_rate", "must lie in [0, 1)")
        if self.outlier_rate_lower <= 0:
            bad("outlier_rate_lower", "must be positive")
        if self.outlier_rate_upper < self.outlier_rate_lower:
            bad("outlier_rate_upper", "must be at least outlier_rate_lower")
        if self.beta_a <= 0 or self.beta_b <= 0:
            bad("beta_a" if self.beta_a <= 0 else "beta_b", "must be positive")
        if not 0.0 < self.bernoulli_p < 1.0:
            bad("bernoulli_p", "must lie in (0, 1)")
        if not 0.0 <= self.outlier_proportion < 1.0:
            bad("outlier_proportion", "must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            bad("seed", "must be an unsigned 64-bit integer")
        if not 0.0 < self.ci_level < 1.0:
            bad("ci_level", "must lie in (0, 1)")
        if self.predictor not in (1, 2, 3, 4, 5):
            bad("predictor", "must be in 1..5")
        if self.ht_family not in ("auto", "zt-poisson", "zt-negbin", "poisson", "negbin"):
            bad("ht_family", "must be auto, poisson or negbin")

    @property
    def outliers_are_integer(self) -> bool:
        k = self.outlier_proportion * self.n_total
        return abs(k - round(k)) < 1e-9

    @property
    def n_outliers(self) -> int:
        if not self.outliers_are_integer:
            raise ConfigError(
                f"outlier_proportion {self.outlier_proportion} x n_total {self.n_total} is not an integer",
                "outlier_proportion",
            )
        return int(round(self.outlier_proportion * self.n_total))

    @property
    def mean_exposure(self) -> float:
        return self.mean_participants * math.exp(self.log_mean_period + self.log_sd_period**2 / 2)


_CONFIG_TYPES = {f.name: f.type for f in fields(SimConfig)}


def config_from_mapping(values: dict, base: SimConfig | None = None) -> SimConfig:
    base = base or SimConfig()
    kwargs = {}
    for key, value in values.items():
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        default = getattr(base, key)
        try:
            if isinstance(default, bool) or isinstance(default, str):
                kwargs[key] = str(value)
            elif isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: cannot use {value!r}", key)
    return replace(base, **kwargs)


def load_config(path: str | Path) -> SimConfig:
    """Read a YAML or JSON mapping of :class:`SimConfig` keys."""
    with open(path, encoding="utf-8") as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ConfigError("configuration must be a key-value mapping")
    values = dict(values)
    # sweep-only keys are handled by the caller
    values.pop("proportions", None)
    return config_from_mapping(values)


def load_sweep_proportions(path: str | Path) -> list[float] | None:
    with open(path, encoding="utf-8") as fh:
        values = yaml.safe_load(fh) or {}
    props = values.get("proportions") if isinstance(values, dict) else None
    return None if props is None else [float(p) for p in props]


def replicate_rng(seed: int, s: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(s,)))


def _person_years(cfg: SimConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    t = rng.poisson(cfg.mean_participants, size=count)
    while np.any(t == 0):
        zero = t == 0
        t[zero] = rng.poisson(cfg.mean_participants, size=int(zero.sum()))
    period = rng.lognormal(cfg.log_mean_period, cfg.log_sd_period, size=count)
    return t * period


def _records(prefix, counts, tau, x1, x2) -> list[StudyRecord]:
    return [
        StudyRecord(f"{prefix}{i + 1}", int(c), float(e), float(p), int(f))
        for i, (c, e, p, f) in enumerate(zip(counts, tau, x1, x2))
    ]


def generate_population(cfg: SimConfig, rng: np.random.Generator) -> Dataset:
    """The ``n_total - n_outliers`` regular studies, zero counts included."""
    count = cfg.n_total - cfg.n_outliers
    tau = _person_years(cfg, count, rng)
    y = rng.binomial(np.rint(tau).astype(np.int64), cfg.event_rate)
    x1 = rng.beta(cfg.beta_a, cfg.beta_b, size=count)
    x2 = rng.binomial(1, cfg.bernoulli_p, size=count)
    return Dataset(tuple(_records("s", y, tau, x1, x2)))


def generate_outliers(cfg: SimConfig, count: int, rng: np.random.Generator) -> list[StudyRecord]:
    """Outlier studies with rates drawn uniformly between the outlier bounds."""
    if count < 0:
        raise ValueError("outlier count must be nonnegative")
    if count == 0:
        return []
    tau = _person_years(cfg, count, rng)
    rate = rng.uniform(cfg.outlier_rate_lower, cfg.outlier_rate_upper, size=count)
    y = np.maximum(np.rint(tau * rate).astype(np.int64), 1)
    x1 = rng.beta(cfg.beta_a, cfg.beta_b, size=count)
    x2 = rng.binomial(1, cfg.bernoulli_p, size=count)
    return _records("o", y, tau, x1, x2)


def simulate_dataset(cfg: SimConfig, s: int) -> Dataset:
    """Full (untruncated) population for replicate ``s``."""
    rng = replicate_rng(cfg.seed, s)
    population = generate_population(cfg, rng)
    return append_outlier_records(population, generate_outliers(cfg, cfg.n_outliers, rng))


@dataclass(frozen=True)
class EstimateOutcome:
    n_hat: float = math.nan
    variance: float = math.nan
    ci_lower: float = math.nan
    ci_upper: float = math.nan
    converged: bool = False

    @classmethod
    def from_estimate(cls, est: PopulationEstimate) -> "EstimateOutcome":
        ok = all(math.isfinite(v) for v in (est.n_hat, est.variance, est.ci_lower, est.ci_upper))
        return cls(est.n_hat, est.variance, est.ci_lower, est.ci_upper, ok)


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    n_observed: int
    estimates: dict[str, EstimateOutcome]


_FAILURES = (FitError, DataError, EstimatorError, OverflowError, FloatingPointError,
             np.linalg.LinAlgError, ValueError)


def estimate_replicate(observed: Dataset, cfg: SimConfig) -> dict[str, EstimateOutcome]:
    out = {k: EstimateOutcome() for k in ESTIMATOR_KEYS}
    try:
        if cfg.ht_family == "auto":
            ht_model = select_ht_model(observed, cfg.predictor)
        else:
            ht_model = fit(observed, cfg.ht_family, cfg.predictor)
        if ht_model.converged:
            est = wald_ci(horvitz_thompson(observed, ht_model), cfg.ci_level)
            out["ht"] = EstimateOutcome.from_estimate(est)
    except _FAILURES as exc:
        log.debug("Horvitz-Thompson failed: %s", exc)
    try:
        bin_model = fit(observed, "trunc-binomial", cfg.predictor)
        if bin_model.converged:
            for key, fn in (("gc", generalised_chao), ("gz", generalised_zelterman)):
                try:
                    out[key] = EstimateOutcome.from_estimate(wald_ci(fn(observed, bin_model), cfg.ci_level))
                except _FAILURES as exc:
                    log.debug("%s failed: %s", key, exc)
    except _FAILURES as exc:
        log.debug("truncated binomial fit failed: %s", exc)
    return out


def run_replicate(cfg: SimConfig, s: int) -> ReplicateResult:
    """Generate, truncate and estimate for replicate ``s``; failures are recorded, not raised."""
    if not 0 <= s < cfg.replicates:
        raise ValueError(f"replicate index {s} outside [0, {cfg.replicates})")
    observed = zero_truncate(simulate_dataset(cfg, s))
    return ReplicateResult(s, len(observed), estimate_replicate(observed, cfg))


@dataclass(frozen=True)
class EstimatorPerformance:
    accuracy: float
    precision: float
    coverage: float
    failures: int
    used: int
    unreliable: bool


@dataclass(frozen=True)
class PerformanceReport:
    config: SimConfig
    metrics: dict[str, EstimatorPerformance]
    replicates: tuple[ReplicateResult, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "outlier_proportion": self.config.outlier_proportion,
            "n_total": self.config.n_total,
            "replicates": self.config.replicates,
            "seed": self.config.seed,
            "metrics": {k: asdict(v) for k, v in self.metrics.items()},
        }


def summarise(results: Sequence[ReplicateResult], n_true: int) -> dict[str, EstimatorPerformance]:
    """Median absolute error, median interval width and coverage (percent).

    Only converged replicates enter; failures are counted.
    """
    metrics = {}
    total = len(results)
    for key in ESTIMATOR_KEYS:
        ok = [r.estimates[key] for r in results if r.estimates[key].converged]
        failures = total - len(ok)
        if ok:
            n_hat = np.array([o.n_hat for o in ok])
            lo = np.array([o.ci_lower for o in ok])
            hi = np.array([o.ci_upper for o in ok])
            accuracy = float(np.median(np.abs(n_hat - n_true)))
            precision = float(np.median(hi - lo))
            coverage = float(100.0 * np.mean((lo <= n_true) & (n_true <= hi)))
        else:
            accuracy = precision = coverage = math.nan
        metrics[key] = EstimatorPerformance(
            accuracy, precision, coverage, failures, len(ok),
            unreliable=total == 0 or failures > UNRELIABLE_FAILURE_RATE * total,
        )
    return metrics


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        raw = os.environ.get(THREADS_ENV, "0")
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def _run_chunk(args) -> list[ReplicateResult]:
    cfg, indices = args
    return [run_replicate(cfg, s) for s in indices]


def run_replicates(cfg: SimConfig, workers: int | None = None) -> list[ReplicateResult]:
    workers = resolve_workers(workers)
    indices = list(range(cfg.replicates))
    if workers == 1 or cfg.replicates < 2:
        return [run_replicate(cfg, s) for s in indices]
    size = max(1, math.ceil(len(indices) / (workers * 4)))
    chunks = [(cfg, indices[i:i + size]) for i in range(0, len(indices), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, chunks))
    return [r for part in parts for r in part]


def run_study(cfg: SimConfig, workers: int | None = None) -> PerformanceReport:
    """Run all replicates of ``cfg`` and aggregate the performance measures."""
    results = run_replicates(cfg, workers)
    return PerformanceReport(cfg, summarise(results, cfg.n_total), tuple(results))


def robustness_sweep(
    base: SimConfig,
    proportions: Iterable[float],
    workers: int | None = None,
) -> dict[float, PerformanceReport | None]:
    """One study per outlier proportion, all from the same seed.

    Proportions that do not give a whole number of outliers map to ``None``.
    """
    out: dict[float, PerformanceReport | None] = {}
    for p in proportions:
        cfg = replace(base, outlier_proportion=float(p))
        if not cfg.outliers_are_integer:
            log.warning("skipping outlier proportion %s: %s outliers is not an integer",
                        p, p * base.n_total)
            out[float(p)] = None
            continue
        out[float(p)] = run_study(cfg, workers)
    return out


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def replicate_rows(report: PerformanceReport) -> list[list]:
    rows = []
    for r in report.replicates:
        for key in ESTIMATOR_KEYS:
            o = r.estimates[key]
            rows.append([
                r.replicate, key, _num(o.n_hat), _num(o.variance), _num(o.ci_lower),
                _num(o.ci_upper), int(o.converged), r.n_observed,
                repr(report.config.outlier_proportion), report.config.n_total,
            ])
    return rows


def write_replicates_csv(reports: Iterable[PerformanceReport], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPLICATE_COLUMNS)
    for rep in reports:
        w.writerows(replicate_rows(rep))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
