"""Population size estimators for zero-truncated counts.

Horvitz-Thompson, generalised Chao and generalised Zelterman estimates with
their conditional (delta-method plus binomial-term) variances, Wald
intervals, and the covariate-free Chao and Zelterman estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .dataset import Dataset, FrequencyTable
from .glm import (
    FittedModel,
    FitError,
    build_design,
    fit,
    mu_hat,
    select_ht_model,
    select_model,
)

ESTIMATORS = (
    "horvitz-thompson",
    "generalised-chao",
    "generalised-zelterman",
    "conventional-chao",
    "conventional-zelterman",
)
SHORT_NAMES = {
    "ht": "horvitz-thompson",
    "gc": "generalised-chao",
    "gz": "generalised-zelterman",
}

P0_LIMIT = 1.0 - 1e-12


class EstimatorError(ValueError):
    """An estimator is undefined for the given input."""


@dataclass(frozen=True)
class PopulationEstimate:
    estimator: str
    n_hat: float
    n_observed: int
    variance: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None
    level: float | None = None
    model: FittedModel | None = None

    @property
    def ci_width(self) -> float | None:
        if self.ci_lower is None:
            return None
        return self.ci_upper - self.ci_lower

    def covers(self, n_true: float) -> bool:
        return self.ci_lower is not None and self.ci_lower <= n_true <= self.ci_upper


def _require(model: FittedModel, *families: str) -> None:
    if model.family not in families:
        raise ValueError(f"expected a {' or '.join(families)} model, got {model.family}")


# -- Horvitz-Thompson ---------------------------------------------------------

def _zero_probability(model: FittedModel, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``P(Y=0)`` and its log for each expected count."""
    if model.family == "zt-poisson":
        log_p0 = -mu
    else:
        a = model.dispersion
        log_p0 = -a * np.log1p(mu / a)
    p0 = np.exp(log_p0)
    bad = np.flatnonzero(p0 >= P0_LIMIT)
    if bad.size:
        raise OverflowError(f"zero probability numerically 1 at row {int(bad[0])}")
    return p0, log_p0


def ht_gradient(d: Dataset, model: FittedModel) -> np.ndarray:
    """Per-study gradient of ``1 / (1 - P(Y=0))`` (rows = studies).

    Columns follow ``beta``; a negative-binomial model adds a final column
    for ``log alpha``.
    """
    _require(model, "zt-poisson", "zt-negbin")
    design = build_design(d, model.spec)
    mu = mu_hat(model, design)
    p0, _ = _zero_probability(model, mu)
    weight = p0 / (1.0 - p0) ** 2
    if model.family == "zt-poisson":
        # -exp(log mu - mu) / (1 - exp(-mu))^2 * h(x)
        return -(np.exp(np.log(mu) - mu) / (-np.expm1(-mu)) ** 2)[:, None] * design.X
    a = model.dispersion
    d_eta = -a * mu / (mu + a)
    d_theta = a * (-np.log1p(mu / a) + mu / (mu + a))
    return np.column_stack([(weight * d_eta)[:, None] * design.X, weight * d_theta])


def ht_variance(d: Dataset, model: FittedModel) -> float:
    """Conditional variance of the Horvitz-Thompson estimate.

    ``g' Cov g + sum p0 / (1 - p0)^2`` with ``g`` the summed gradient of the
    inverse inclusion probabilities. For a negative-binomial model the
    gradient and covariance include ``log alpha``.
    """
    _require(model, "zt-poisson", "zt-negbin")
    design = build_design(d, model.spec)
    mu = mu_hat(model, design)
    p0, _ = _zero_probability(model, mu)
    g = ht_gradient(d, model).sum(axis=0)
    cov = model.cov_beta if model.family == "zt-poisson" else model.cov_params
    return float(g @ cov @ g + np.sum(p0 / (1.0 - p0) ** 2))


def horvitz_thompson(d: Dataset, model: FittedModel, with_variance: bool = True) -> PopulationEstimate:
    """``sum 1 / (1 - P(Y=0 | mu_i))`` over the observed studies."""
    _require(model, "zt-poisson", "zt-negbin")
    mu = mu_hat(model, build_design(d, model.spec))
    p0, _ = _zero_probability(model, mu)
    n_hat = float(np.sum(1.0 / (1.0 - p0)))
    var = ht_variance(d, model) if with_variance else None
    return PopulationEstimate("horvitz-thompson", n_hat, len(d), variance=var, model=model)


# -- generalised Chao -----------------------------------------------------------

def _binomial_subset(d: Dataset, model: FittedModel):
    _require(model, "trunc-binomial")
    sub = d.ones_and_twos()
    if len(sub) == 0:
        raise EstimatorError("no studies with one or two events")
    design = build_design(sub, model.spec)
    q = expit(design.X @ model.beta + design.offset)
    mu = mu_hat(model, design)
    return sub, design, q, mu


def gc_gradient(d: Dataset, model: FittedModel) -> np.ndarray:
    """Per-study ``(mu + mu^2) / (mu + mu^2/2)^2 * h(x)`` over ones and twos.

    This is the magnitude of the derivative of ``1 / (mu + mu^2/2)``; the
    sign is irrelevant inside the quadratic form.
    """
    _, design, _, mu = _binomial_subset(d, model)
    return ((mu + mu**2) / (mu + mu**2 / 2) ** 2)[:, None] * design.X


def gc_variance(d: Dataset, model: FittedModel, binomial_term: str = "conditional") -> float:
    """Variance of the generalised Chao estimate.

    The first term is the delta-method part ``g' Cov g``. The second is
    ``sum G (1 + G)`` with ``G = 1 / (mu + mu^2/2)``, the variance of the
    inverse inclusion weights. ``binomial_term="printed"`` uses
    ``sum (1 - q)(1 + exp(-mu)/q)^2`` instead.
    """
    _, _, q, mu = _binomial_subset(d, model)
    if np.any(q <= 0.0):
        raise OverflowError("fitted probability is zero")
    g = gc_gradient(d, model).sum(axis=0)
    if binomial_term == "conditional":
        G = 1.0 / (mu + mu**2 / 2)
        second = np.sum(G * (1.0 + G))
    elif binomial_term == "printed":
        second = np.sum((1 - q) * (1 + np.exp(-mu) / q) ** 2)
    else:
        raise ValueError(f"unknown binomial_term {binomial_term!r}")
    return float(g @ model.cov_beta @ g + second)


def generalised_chao(d: Dataset, model: FittedModel, with_variance: bool = True) -> PopulationEstimate:
    """``n + sum 1 / (mu + mu^2/2)`` over studies with one or two events."""
    _, _, _, mu = _binomial_subset(d, model)
    n_hat = len(d) + float(np.sum(1.0 / (mu + mu**2 / 2)))
    var = gc_variance(d, model) if with_variance else None
    return PopulationEstimate("generalised-chao", n_hat, len(d), variance=var, model=model)


# -- generalised Zelterman ------------------------------------------------------

def zelterman_mu(d: Dataset, model: FittedModel) -> np.ndarray:
    """``2 e_i exp(h(x_i)' beta)`` for every observed study."""
    _require(model, "trunc-binomial")
    design = build_design(d, model.spec)
    return 2.0 * np.exp(design.X @ model.beta + design.offset)


def gz_gradient(d: Dataset, model: FittedModel) -> np.ndarray:
    design = build_design(d, model.spec)
    mu = zelterman_mu(d, model)
    return -(np.exp(np.log(mu) - mu) / (-np.expm1(-mu)) ** 2)[:, None] * design.X


def gz_variance(d: Dataset, model: FittedModel) -> float:
    mu = zelterman_mu(d, model)
    p0 = np.exp(-mu)
    if np.any(p0 >= P0_LIMIT):
        raise OverflowError("zero probability numerically 1")
    g = gz_gradient(d, model).sum(axis=0)
    return float(g @ model.cov_beta @ g + np.sum(p0 / (1.0 - p0) ** 2))


def generalised_zelterman(d: Dataset, model: FittedModel, with_variance: bool = True) -> PopulationEstimate:
    """``sum 1 / (1 - exp(-mu_i))`` over all observed studies.

    ``model`` is the truncated binomial fit to the ones and twos; ``d`` is
    the full observed data.
    """
    mu = zelterman_mu(d, model)
    p0 = np.exp(-mu)
    bad = np.flatnonzero(p0 >= P0_LIMIT)
    if bad.size:
        raise OverflowError(f"zero probability numerically 1 at row {int(bad[0])}")
    n_hat = float(np.sum(1.0 / -np.expm1(-mu)))
    var = gz_variance(d, model) if with_variance else None
    return PopulationEstimate("generalised-zelterman", n_hat, len(d), variance=var, model=model)


# -- intervals and conventional estimators --------------------------------------

def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf((1.0 + level) / 2.0))


def wald_ci(est: PopulationEstimate, level: float = 0.95, floor_at_observed: bool = True) -> PopulationEstimate:
    """``N ± z sqrt(Var)``; the lower end is raised to ``n`` if it falls below it."""
    if est.variance is None:
        raise ValueError(f"{est.estimator} estimate has no variance")
    half = z_value(level) * math.sqrt(max(est.variance, 0.0))
    lower = est.n_hat - half
    if floor_at_observed:
        lower = max(lower, float(est.n_observed))
    return replace(est, ci_lower=lower, ci_upper=est.n_hat + half, level=level)


def conventional_chao(ft: FrequencyTable) -> PopulationEstimate:
    if ft.f2 == 0:
        raise EstimatorError("Chao estimator undefined when f2 = 0")
    return PopulationEstimate("conventional-chao", ft.n + ft.f1**2 / (2.0 * ft.f2), ft.n)


def conventional_zelterman(ft: FrequencyTable, n: int | None = None) -> PopulationEstimate:
    if ft.f1 == 0 or ft.f2 == 0:
        raise EstimatorError("Zelterman estimator needs f1 > 0 and f2 > 0")
    n = ft.n if n is None else n
    mu = 2.0 * ft.f2 / ft.f1
    return PopulationEstimate("conventional-zelterman", n / -math.expm1(-mu), n)


# -- whole-pipeline convenience ---------------------------------------------------

def estimate_all(
    d: Dataset,
    level: float = 0.95,
    ht_family: str = "auto",
    predictor: int | None = None,
    floor_at_observed: bool = True,
) -> dict[str, PopulationEstimate]:
    """Fit the models and return all three estimates with Wald intervals.

    Models are chosen by BIC over the five predictors unless ``predictor``
    fixes one. ``ht_family="auto"`` lets BIC pick between Poisson and
    negative binomial for Horvitz-Thompson.
    """
    if ht_family == "auto":
        ht_model = select_ht_model(d, predictor)
    elif predictor is None:
        ht_model = select_model(d, ht_family)
    else:
        ht_model = fit(d, ht_family, predictor)
    if predictor is None:
        bin_model = select_model(d, "trunc-binomial")
    else:
        bin_model = fit(d, "trunc-binomial", predictor)
    for m in (ht_model, bin_model):
        if not m.converged:
            raise FitError(f"{m.family} model with predictor {m.spec.index} did not converge")
    out = {
        "ht": horvitz_thompson(d, ht_model),
        "gc": generalised_chao(d, bin_model),
        "gz": generalised_zelterman(d, bin_model),
    }
    return {k: wald_ci(v, level, floor_at_observed) for k, v in out.items()}

