"""Count regression with log-exposure offsets.

Three likelihoods are fitted here, all by damped Newton iteration with
analytic derivatives:

* ``zt-poisson``: zero-truncated Poisson,
* ``zt-negbin``: zero-truncated negative binomial with dispersion ``alpha``
  (``P(Y=0) = (alpha / (mu + alpha)) ** alpha``),
* ``trunc-binomial``: the logistic model for "two events versus one event"
  obtained by truncating a Poisson count to the values 1 and 2.

Linear predictors come from a fixed family of five (intercept, proportion
of women, origin flag, both, both plus their interaction).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.special import expit, gammaln, log_expit

from .dataset import DataError, Dataset

FAMILIES = ("zt-poisson", "zt-negbin", "trunc-binomial")
FAMILY_ALIASES = {
    "poisson": "zt-poisson",
    "zt-poisson": "zt-poisson",
    "negbin": "zt-negbin",
    "zt-negbin": "zt-negbin",
    "binomial": "trunc-binomial",
    "trunc-binomial": "trunc-binomial",
}

TOL = 1e-8
MAX_ITER = 100
RANK_TOL = 1e-10
ALPHA_MAX = 1e8
ALPHA_MIN = 1e-4
LOG_HALF = math.log(0.5)

_TERMS = {
    1: ("intercept",),
    2: ("intercept", "prop_women"),
    3: ("intercept", "origin_flag"),
    4: ("intercept", "prop_women", "origin_flag"),
    5: ("intercept", "prop_women", "origin_flag", "prop_women:origin_flag"),
}


class FitError(RuntimeError):
    """A model could not be fitted."""


class SingularDesignError(FitError):
    """The design matrix does not have full column rank."""


class SelectionError(FitError):
    """No candidate model converged."""


def canonical_family(family: str) -> str:
    try:
        return FAMILY_ALIASES[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; expected one of {sorted(FAMILY_ALIASES)}")


@dataclass(frozen=True)
class PredictorSpec:
    """Index 1..5 into the linear-predictor family."""

    index: int = 1

    def __post_init__(self):
        if self.index not in _TERMS:
            raise ValueError(f"predictor index must be in 1..5, got {self.index}")

    @property
    def terms(self) -> tuple[str, ...]:
        return _TERMS[self.index]

    @property
    def n_columns(self) -> int:
        return len(self.terms)

    @property
    def needs_prop_women(self) -> bool:
        return self.index in (2, 4, 5)


def as_spec(spec: PredictorSpec | int) -> PredictorSpec:
    return spec if isinstance(spec, PredictorSpec) else PredictorSpec(int(spec))


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    offset: np.ndarray
    spec: PredictorSpec

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def rows(self, mask) -> "DesignMatrix":
        mask = np.asarray(mask)
        return DesignMatrix(self.X[mask], self.offset[mask], self.spec)


def build_design(d: Dataset, spec: PredictorSpec | int) -> DesignMatrix:
    """Design matrix for ``spec`` with offset ``log(exposure)``."""
    spec = as_spec(spec)
    x1 = d.prop_women
    x2 = d.origin_flags
    if spec.needs_prop_women and np.isnan(x1).any():
        missing = [r.id for r in d.records if r.prop_women is None]
        raise DataError(
            f"prop_women absent for {missing}; run impute_missing_proportion first"
        )
    one = np.ones(len(d))
    cols = {
        "intercept": one,
        "prop_women": x1,
        "origin_flag": x2,
        "prop_women:origin_flag": x1 * x2 if spec.index == 5 else None,
    }
    X = np.column_stack([cols[t] for t in spec.terms]) if len(d) else np.zeros((0, spec.n_columns))
    return DesignMatrix(X, np.log(d.exposures), spec)


def check_rank(X: np.ndarray, tol: float = RANK_TOL) -> None:
    n, p = X.shape
    if n < p:
        raise SingularDesignError(f"design has {n} rows for {p} columns")
    _, R, _ = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0 or np.any(diag < tol * diag[0]):
        raise SingularDesignError("design matrix is rank deficient")


@dataclass(frozen=True)
class FittedModel:
    """Result of one maximum-likelihood fit.

    For ``zt-negbin``, ``cov_params`` covers ``(beta, log alpha)``; when the
    dispersion sits at the Poisson-limit boundary it is treated as known and
    its row and column are zero. ``boundary`` is ``"upper"`` or ``"lower"``
    when the dispersion hit ``ALPHA_MAX`` or ``ALPHA_MIN``.
    """

    family: str
    spec: PredictorSpec
    beta: np.ndarray
    cov_beta: np.ndarray
    loglik: float
    bic: float
    n_used: int
    converged: bool
    iterations: int
    dispersion: float | None = None
    boundary: str | None = None
    cov_params: np.ndarray | None = None
    score: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_params(self) -> int:
        return len(self.beta) + (1 if self.family == "zt-negbin" else 0)

    @property
    def poisson_intercept(self) -> float:
        """Intercept on the Poisson scale.

        For the truncated binomial fit the logistic intercept absorbs
        ``log(1/2)``; this undoes it.
        """
        if self.family == "trunc-binomial":
            return float(self.beta[0] - LOG_HALF)
        return float(self.beta[0])

    @property
    def params(self) -> np.ndarray:
        if self.family == "zt-negbin":
            return np.append(self.beta, math.log(self.dispersion))
        return self.beta


# -- log-likelihoods ----------------------------------------------------------

def _curvature_factor(mu):
    """``1 - mu / expm1(mu)``, accurate for small and large ``mu``."""
    mu = np.asarray(mu, dtype=float)
    out = np.empty_like(mu)
    small = mu < 1e-4
    large = mu > 30.0
    mid = ~(small | large)
    m = mu[small]
    out[small] = (m / 2 + m**2 / 6 + m**3 / 24) / (1 + m / 2 + m**2 / 6)
    out[large] = 1.0 - mu[large] * np.exp(-mu[large])
    em1 = np.expm1(mu[mid])
    out[mid] = (em1 - mu[mid]) / em1
    return out


def zt_poisson_derivs(beta, design: DesignMatrix, y):
    """Log-likelihood, score and Hessian of the zero-truncated Poisson model."""
    y = np.asarray(y, dtype=float)
    eta = design.X @ beta + design.offset
    mu = np.exp(eta)
    log1m_p0 = np.log(-np.expm1(-mu))
    ll = float(np.sum(y * eta - mu - gammaln(y + 1) - log1m_p0))
    # d/deta = y - mu / (1 - exp(-mu))
    inc = mu / -np.expm1(-mu)
    grad = design.X.T @ (y - inc)
    curv = inc * _curvature_factor(mu)
    hess = -(design.X.T * curv) @ design.X
    return ll, grad, hess


def zt_poisson_loglik(beta, design: DesignMatrix, y) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.exp(design.X @ beta + design.offset)
    return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1) - np.log(-np.expm1(-mu))))


def _nb_sums(y, mu, a):
    """Sums over k < y of log((a+k)/(mu+a)), 1/(a+k) and 1/(a+k)^2.

    Partial sums over ``k`` avoid differencing log-gamma values, which loses
    all precision once ``a`` is large.
    """
    y = np.asarray(y, dtype=np.int64)
    k = np.arange(int(y.max()) if y.size else 0, dtype=float)
    inv = 1.0 / (a + k)
    cum_log = np.concatenate(([0.0], np.cumsum(np.log(a + k))))
    cum_inv = np.concatenate(([0.0], np.cumsum(inv)))
    cum_inv2 = np.concatenate(([0.0], np.cumsum(inv * inv)))
    A = cum_log[y] - y * np.log(mu + a)
    return A, cum_inv[y], cum_inv2[y]


def zt_negbin_derivs(params, design: DesignMatrix, y, fixed_alpha: float | None = None):
    """Zero-truncated negative-binomial log-likelihood with derivatives.

    ``params`` is ``(beta, log alpha)``, or just ``beta`` when
    ``fixed_alpha`` is given. Derivatives are with respect to ``params``.
    """
    params = np.asarray(params, dtype=float)
    if fixed_alpha is None:
        beta, theta = params[:-1], params[-1]
        a = math.exp(theta)
    else:
        beta, a = params, float(fixed_alpha)
    y = np.asarray(y, dtype=float)
    X = design.X
    # Trial points far from the optimum can overflow; the optimiser rejects
    # the non-finite values that result.
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        eta = X @ beta + design.offset
        mu = np.exp(eta)
        s = mu + a
        l1p = np.log1p(mu / a)
        A, B, C = _nb_sums(y, mu, a)

        L0 = -a * l1p
        log1m_p0 = np.log(-np.expm1(L0))
        ll = float(np.sum(A - gammaln(y + 1) - a * l1p + y * eta - log1m_p0))

        w = 1.0 / np.expm1(-L0)
        w2 = w * (1.0 + w)

        L0_e = -a * mu / s
        L0_a = -l1p + mu / s
        L0_ee = -a * a * mu / s**2
        L0_ea = -mu**2 / s**2
        L0_aa = mu**2 / (a * s**2)

        g_e = a * (y - mu) / s + w * L0_e
        g_a = B - l1p + (mu - y) / s + w * L0_a
        h_ee = -(a + y) * mu * a / s**2 + (w * L0_ee + w2 * L0_e**2)
        h_ea = mu * (y - mu) / s**2 + (w * L0_ea + w2 * L0_e * L0_a)
        h_aa = (mu**2 + a * y) / (a * s**2) - C + (w * L0_aa + w2 * L0_a**2)

    grad_b = X.T @ g_e
    hess_bb = (X.T * h_ee) @ X
    if fixed_alpha is not None:
        return ll, grad_b, hess_bb
    g_t = a * np.sum(g_a)
    h_tt = a * a * np.sum(h_aa) + g_t
    h_bt = X.T @ (a * h_ea)
    p = len(beta)
    grad = np.append(grad_b, g_t)
    hess = np.empty((p + 1, p + 1))
    hess[:p, :p] = hess_bb
    hess[:p, p] = hess[p, :p] = h_bt
    hess[p, p] = h_tt
    return ll, grad, hess


def zt_negbin_loglik(beta, alpha: float, design: DesignMatrix, y) -> float:
    return zt_negbin_derivs(np.asarray(beta, dtype=float), design, y, fixed_alpha=alpha)[0]


def trunc_binomial_derivs(beta, design: DesignMatrix, y):
    """Logistic log-likelihood of ``y == 2`` with offset ``log(exposure)``."""
    z = (np.asarray(y) == 2).astype(float)
    eta = design.X @ beta + design.offset
    ll = float(np.sum(z * log_expit(eta) + (1 - z) * log_expit(-eta)))
    q = expit(eta)
    grad = design.X.T @ (z - q)
    hess = -(design.X.T * (q * (1 - q))) @ design.X
    return ll, grad, hess


def trunc_binomial_loglik(beta, design: DesignMatrix, y) -> float:
    return trunc_binomial_derivs(beta, design, y)[0]


# -- optimisation -------------------------------------------------------------

@dataclass
class _NewtonResult:
    x: np.ndarray
    ll: float
    grad: np.ndarray
    hess: np.ndarray
    converged: bool
    iterations: int
    active: np.ndarray


def _newton(
    f: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    x0: np.ndarray,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> _NewtonResult:
    """Maximise ``f`` by damped Newton steps with box constraints.

    Coordinates pinned at a bound with the gradient pointing outward are
    held fixed for the step (projected Newton).
    """
    x = np.array(x0, dtype=float)
    n = len(x)
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    x = np.clip(x, lo, hi)
    ll, g, H = f(x)
    if not np.isfinite(ll):
        raise FitError("log-likelihood is not finite at the starting values")

    def active_set(x, g):
        return ((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0))

    it = 0
    converged = False
    while True:
        act = active_set(x, g)
        free = ~act
        if np.max(np.abs(g[free]), initial=0.0) < tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        gf = g[free]
        Hf = H[np.ix_(free, free)]
        step = None
        lam = 0.0
        scale = max(1.0, float(np.max(np.abs(np.diag(Hf)), initial=1.0)))
        for _ in range(30):
            try:
                c = scipy.linalg.cho_factor(-Hf + lam * np.eye(len(gf)))
                step = scipy.linalg.cho_solve(c, gf)
                break
            except (np.linalg.LinAlgError, ValueError):
                lam = scale * 1e-8 if lam == 0.0 else lam * 10.0
        if step is None or not np.all(np.isfinite(step)):
            step = gf / scale
        full = np.zeros(n)
        full[free] = step
        t = 1.0
        improved = False
        for _ in range(60):
            cand = np.clip(x + t * full, lo, hi)
            try:
                ll_c, g_c, H_c = f(cand)
            except (FloatingPointError, OverflowError, ValueError):
                ll_c = -np.inf
            if np.isfinite(ll_c) and np.all(np.isfinite(g_c)) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        moved = np.max(np.abs(cand - x))
        x, ll, g, H = cand, ll_c, g_c, H_c
        if moved == 0.0:
            break
    if converged:
        x, ll, g, H = _polish(f, x, ll, g, H, ~active_set(x, g), lo, hi)
    return _NewtonResult(x, ll, g, H, converged, it, active_set(x, g))


def _polish(f, x, ll, g, H, free, lo, hi, steps: int = 2):
    """Extra full Newton steps past the stopping rule.

    The score tolerance leaves relative errors near 1e-9 in the estimates;
    a step is kept only if it shrinks the free score.
    """
    for _ in range(steps):
        size = np.max(np.abs(g[free]), initial=0.0)
        if size == 0.0:
            break
        try:
            step = np.linalg.solve(-H[np.ix_(free, free)], g[free])
        except np.linalg.LinAlgError:
            break
        cand = x.copy()
        cand[free] += step
        cand = np.clip(cand, lo, hi)
        try:
            ll_c, g_c, H_c = f(cand)
        except (FloatingPointError, OverflowError, ValueError):
            break
        if not (np.isfinite(ll_c) and np.max(np.abs(g_c[free]), initial=0.0) < size):
            break
        x, ll, g, H = cand, ll_c, g_c, H_c
    return x, ll, g, H


def _inverse_information(H: np.ndarray) -> np.ndarray:
    cov = np.linalg.inv(-H)
    return 0.5 * (cov + cov.T)


def _bic(ll: float, k: int, n: int) -> float:
    return -2.0 * ll + k * math.log(n)


def _prepare(design: DesignMatrix, counts) -> np.ndarray:
    y = np.asarray(counts)
    if y.shape[0] != design.n:
        raise ValueError("counts and design have different lengths")
    if y.size == 0:
        raise FitError("no records to fit")
    check_rank(design.X)
    return y


def fit_zt_poisson(design: DesignMatrix, counts) -> FittedModel:
    """Zero-truncated Poisson regression by Newton iteration."""
    y = _prepare(design, counts)
    if np.any(y < 1):
        raise DataError("zero-truncated fit requires every count >= 1")
    x0 = np.zeros(design.p)
    x0[0] = math.log(y.sum() / np.exp(design.offset).sum())
    res = _newton(lambda b: zt_poisson_derivs(b, design, y), x0)
    return FittedModel(
        family="zt-poisson",
        spec=design.spec,
        beta=res.x,
        cov_beta=_inverse_information(res.hess),
        loglik=res.ll,
        bic=_bic(res.ll, design.p, design.n),
        n_used=design.n,
        converged=res.converged,
        iterations=res.iterations,
        score=res.grad,
    )


def fit_zt_negbin(
    design: DesignMatrix,
    counts,
    alpha_min: float = ALPHA_MIN,
    alpha_max: float = ALPHA_MAX,
) -> FittedModel:
    """Zero-truncated negative-binomial regression over ``(beta, log alpha)``.

    The dispersion is confined to ``[alpha_min, alpha_max]``; a fit that
    ends on either end is flagged in ``boundary``. ``alpha_max`` is the
    Poisson limit.
    """
    y = _prepare(design, counts)
    if np.any(y < 1):
        raise DataError("zero-truncated fit requires every count >= 1")
    pois = fit_zt_poisson(design, y)
    p = design.p
    lo = np.full(p + 1, -np.inf)
    hi = np.full(p + 1, np.inf)
    lo[p], hi[p] = math.log(alpha_min), math.log(alpha_max)

    def f(x):
        return zt_negbin_derivs(x, design, y)

    best = None
    iters = 0
    for theta0 in (0.0, hi[p]):
        res = _newton(f, np.append(pois.beta, theta0), lo, hi)
        iters += res.iterations
        if best is None or res.ll > best.ll + 1e-10:
            best = res
    theta = best.x[p]
    boundary = None
    if theta >= hi[p] - 1e-12:
        boundary = "upper"
    elif theta <= lo[p] + 1e-12:
        boundary = "lower"

    H = best.hess
    cov_params = np.zeros((p + 1, p + 1))
    if boundary == "upper":
        cov_params[:p, :p] = _inverse_information(H[:p, :p])
    else:
        try:
            cov_params = _inverse_information(H)
            if np.any(np.linalg.eigvalsh(cov_params) < 0):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            cov_params = np.zeros((p + 1, p + 1))
            cov_params[:p, :p] = _inverse_information(H[:p, :p])
    return FittedModel(
        family="zt-negbin",
        spec=design.spec,
        beta=best.x[:p],
        cov_beta=cov_params[:p, :p],
        loglik=best.ll,
        bic=_bic(best.ll, p + 1, design.n),
        n_used=design.n,
        converged=best.converged,
        iterations=iters,
        dispersion=math.exp(theta),
        boundary=boundary,
        cov_params=cov_params,
        score=best.grad,
    )


def fit_truncated_binomial(design: DesignMatrix, counts) -> FittedModel:
    """Logistic fit of "two events" versus "one event" with exposure offset.

    Every count must be 1 or 2 (use :meth:`Dataset.ones_and_twos`).
    """
    y = np.asarray(counts)
    if np.any((y != 1) & (y != 2)):
        raise DataError("truncated binomial fit needs counts restricted to 1 and 2")
    y = _prepare(design, y)
    z = (y == 2)
    x0 = np.zeros(design.p)
    k = z.sum()
    x0[0] = math.log((k + 0.5) / (len(z) - k + 0.5)) - float(np.mean(design.offset))
    res = _newton(lambda b: trunc_binomial_derivs(b, design, y), x0)
    try:
        cov = _inverse_information(res.hess)
    except np.linalg.LinAlgError:
        cov = np.full((design.p, design.p), np.nan)
    return FittedModel(
        family="trunc-binomial",
        spec=design.spec,
        beta=res.x,
        cov_beta=cov,
        loglik=res.ll,
        bic=_bic(res.ll, design.p, design.n),
        n_used=design.n,
        converged=res.converged and bool(np.all(np.isfinite(cov))),
        iterations=res.iterations,
        score=res.grad,
    )


def fitted_probabilities(model: FittedModel, design: DesignMatrix) -> np.ndarray:
    """Fitted probability of a count of two (truncated binomial model)."""
    if model.family != "trunc-binomial":
        raise ValueError("fitted probabilities only exist for the truncated binomial model")
    return expit(design.X @ model.beta + design.offset)


def mu_hat(model: FittedModel, design: DesignMatrix) -> np.ndarray:
    """Expected counts for each row of ``design``.

    For the truncated binomial model this is ``2 q / (1 - q)``.
    """
    if design.spec != model.spec:
        raise ValueError("design predictor does not match the model")
    eta = design.X @ model.beta + design.offset
    if model.family != "trunc-binomial":
        return np.exp(eta)
    q = expit(eta)
    bad = np.flatnonzero(q >= 1.0)
    if bad.size:
        raise OverflowError(f"fitted probability equals 1 at row {int(bad[0])}")
    return 2.0 * q / (1.0 - q)


def fit(d: Dataset, family: str, spec: PredictorSpec | int = 1) -> FittedModel:
    """Fit ``family`` to a dataset, restricting to ones and twos for the binomial.

    At least one more observation than parameters is required.
    """
    family = canonical_family(family)
    if family == "trunc-binomial":
        d = d.ones_and_twos()
        if len(d) == 0:
            raise FitError("no studies with one or two events")
    design = build_design(d, spec)
    n_params = design.X.shape[1] + (1 if family == "zt-negbin" else 0)
    if len(d) <= n_params:
        raise FitError(
            f"{family} with predictor {design.spec.index} is under-determined: "
            f"{len(d)} observations for {n_params} parameters"
        )
    fitter = {
        "zt-poisson": fit_zt_poisson,
        "zt-negbin": fit_zt_negbin,
        "trunc-binomial": fit_truncated_binomial,
    }[family]
    return fitter(design, d.counts)


def fit_all_specs(d: Dataset, family: str) -> list[FittedModel | Exception]:
    out: list[FittedModel | Exception] = []
    for index in _TERMS:
        try:
            out.append(fit(d, family, index))
        except (FitError, DataError) as exc:
            out.append(exc)
    return out


def select_model(d: Dataset, family: str) -> FittedModel:
    """Minimum-BIC converged fit over the five linear predictors."""
    fits = [m for m in fit_all_specs(d, family) if isinstance(m, FittedModel) and m.converged]
    if not fits:
        raise SelectionError(f"no {canonical_family(family)} model converged")
    return min(fits, key=lambda m: (m.bic, m.spec.index))


def select_ht_model(d: Dataset, spec: PredictorSpec | int | None = None) -> FittedModel:
    """Choose between zero-truncated Poisson and negative binomial by BIC.

    With ``spec`` given only that predictor is considered; otherwise all
    five are. Ties go to the Poisson model.
    """
    fits = []
    for family in ("zt-poisson", "zt-negbin"):
        if spec is None:
            cands = fit_all_specs(d, family)
        else:
            try:
                cands = [fit(d, family, spec)]
            except (FitError, DataError) as exc:
                cands = [exc]
        fits.extend(m for m in cands if isinstance(m, FittedModel) and m.converged)
    if not fits:
        raise SelectionError("no Horvitz-Thompson model converged")
    return min(fits, key=lambda m: (m.bic, m.family != "zt-poisson", m.spec.index))
