"""EMOS with a left-censored GEV predictive distribution.

Location is affine in (HRES, CNT, ENS mean, fraction of dry members), scale is
affine in the ensemble mean absolute difference, and the shape is a free
parameter. Coefficients are estimated by minimizing the mean CRPS over a
training set, using the closed-form CRPS of the zero-censored GEV.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .core import POP_THRESHOLD, EnsembleForecast, MemberTag, PredictiveDistribution
from .errors import ConvergenceWarning, DataError, DegenerateTrainingError, InfiniteMeanError

log = logging.getLogger(__name__)

XI_BOUNDS = (-0.278, 0.999)
SIGMA_MIN = 0.01
GUMBEL_EPS = 1e-7
EULER_GAMMA = 0.5772156649015329


# --------------------------------------------------------------------------- GEV


def _gev_t(z, xi):
    """t(z) = (1 + xi z)^(-1/xi), so that G = exp(-t).

    Below the lower endpoint (xi > 0) t is +inf; above the upper endpoint
    (xi < 0) t is 0.
    """
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if np.ndim(xi) == 0:
            xi = float(xi)
            if abs(xi) < GUMBEL_EPS:
                return np.exp(-z)
            base = 1.0 + xi * z
            return np.where(base > 0, np.abs(base) ** (-1.0 / xi), np.inf if xi > 0 else 0.0)
        xi = np.broadcast_to(np.asarray(xi, dtype=float), z.shape)
        out = np.empty(z.shape)
        gumbel = np.abs(xi) < GUMBEL_EPS
        out[gumbel] = np.exp(-z[gumbel])
        xg, zg = xi[~gumbel], z[~gumbel]
        base = 1.0 + xg * zg
        out[~gumbel] = np.where(base > 0, np.abs(base) ** (-1.0 / xg), np.where(xg > 0, np.inf, 0.0))
    return out


def gev_cdf(x, mu, sigma, xi):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-_gev_t(z, xi))


def gev_pdf(x, mu, sigma, xi):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    t = _gev_t(z, xi)
    xi = np.broadcast_to(np.asarray(xi, dtype=float), t.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dens = t ** (xi + 1.0) * np.exp(-t) / sigma
    return np.where(np.isfinite(t) & (t > 0), dens, 0.0)


def _upper_gamma_neg(xi, s, s_pow=None):
    """Upper incomplete gamma Gamma(-xi, s) for xi != 0, xi < 1, s >= 0.

    ``s_pow`` may supply s^(-xi) directly, which stays finite when s itself
    underflows to zero.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if s_pow is None:
            s_pow = np.where(s > 0, s ** (-xi), np.where(xi < 0, 0.0, np.inf))
        head = s_pow * np.exp(-s)
        return (head - special.gamma(1.0 - xi) * special.gammaincc(1.0 - xi, s)) / xi


def _crps_gumbel(m, s, yy, ty, t0):
    # E1(t) = -gamma - log t + O(t) once t = exp(-z) underflows
    zy = (yy - m) / s
    int_g = s * np.where(ty > 1e-300, special.exp1(np.maximum(ty, 1e-300)), zy - EULER_GAMMA)
    with np.errstate(over="ignore"):
        cens = s * special.exp1(2.0 * t0)
    return m + s * EULER_GAMMA - yy + 2.0 * int_g - s * np.log(2.0) - cens


def _crps_gev(m, s, x, yy, ty, t0):
    g1 = special.gamma(1.0 - x)
    mean = m + s * (g1 - 1.0) / x
    # t^(-xi) = 1 + xi z inside the support; zero outside, where t is 0 or inf
    base_y = 1.0 + x * (yy - m) / s
    base_0 = 1.0 - x * m / s
    int_g = s * _upper_gamma_neg(x, ty, np.maximum(base_y, 0.0))
    # above the upper endpoint of a bounded GEV the CDF is 1
    upper = m - s / x
    int_g = int_g + np.where((x < 0) & (base_y <= 0), yy - upper, 0.0)
    cens = s * 2.0**x * _upper_gamma_neg(x, 2.0 * t0, 2.0 ** (-x) * np.maximum(base_0, 0.0))
    val = mean - yy + 2.0 * int_g - s * g1 * (2.0**x - 1.0) / x - cens
    # all mass at zero: the forecast is the point 0
    return np.where(t0 == 0.0, yy, val)


def crps_censored_gev(mu, sigma, xi, y):
    """CRPS of the GEV(mu, sigma, xi) left-censored at zero, against y >= 0.

    Vectorized over all arguments. Uses
    ``CRPS_cens(y) = CRPS_GEV(y) - int_{-inf}^0 G(x)^2 dx``, valid for
    ``y >= 0``, with the uncensored part written through the mean, the Gini
    half mean difference and the incomplete-gamma integral of the CDF.
    """
    if np.ndim(xi) == 0:
        # common case in fitting: one shape for all cases
        xi = float(xi)
        mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, y)))
        if xi >= 1.0:
            raise InfiniteMeanError("shape parameter must be < 1 for a finite CRPS")
        if np.any(sigma <= 0):
            raise ValueError("scale must be positive")
        ty = _gev_t((y - mu) / sigma, xi)
        t0 = _gev_t(-mu / sigma, xi)
        if abs(xi) < GUMBEL_EPS:
            out = _crps_gumbel(mu, sigma, y, ty, t0)
        else:
            out = _crps_gev(mu, sigma, xi, y, ty, t0)
        out = np.maximum(out, 0.0)
        return float(out) if out.ndim == 0 else out

    mu, sigma, xi, y = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (mu, sigma, xi, y))
    )
    if np.any(xi >= 1.0):
        raise InfiniteMeanError("shape parameter must be < 1 for a finite CRPS")
    if np.any(sigma <= 0):
        raise ValueError("scale must be positive")
    ty = _gev_t((y - mu) / sigma, xi)
    t0 = _gev_t(-mu / sigma, xi)
    out = np.empty(mu.shape)
    gumbel = np.abs(xi) < GUMBEL_EPS
    if np.any(gumbel):
        out[gumbel] = _crps_gumbel(mu[gumbel], sigma[gumbel], y[gumbel], ty[gumbel], t0[gumbel])
    gen = ~gumbel
    if np.any(gen):
        out[gen] = _crps_gev(mu[gen], sigma[gen], xi[gen], y[gen], ty[gen], t0[gen])
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


class CensoredGev(PredictiveDistribution):
    """GEV left-censored at zero: P(Y = 0) = G(0), density g on (0, inf)."""

    def __init__(self, mu: float, sigma: float, xi: float, pop_threshold: float = POP_THRESHOLD):
        if not sigma > 0:
            raise ValueError("scale must be positive")
        self.mu, self.sigma, self.xi = float(mu), float(sigma), float(xi)
        self.pop_threshold = pop_threshold

    def __repr__(self):
        return f"CensoredGev(mu={self.mu:.4g}, sigma={self.sigma:.4g}, xi={self.xi:.4g})"

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x < 0, 0.0, gev_cdf(x, self.mu, self.sigma, self.xi))
        return float(out) if out.ndim == 0 else out

    def pdf(self, x):
        """Density of the continuous part (x > 0)."""
        x = np.asarray(x, dtype=float)
        out = np.where(x > 0, gev_pdf(x, self.mu, self.sigma, self.xi), 0.0)
        return float(out) if out.ndim == 0 else out

    def cdf_left(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x <= 0, 0.0, gev_cdf(x, self.mu, self.sigma, self.xi))
        return float(out) if out.ndim == 0 else out

    def _positive_quantile(self, p):
        ll = -np.log(p)
        if abs(self.xi) < GUMBEL_EPS:
            q = self.mu - self.sigma * np.log(ll)
        else:
            q = self.mu + self.sigma * (ll ** (-self.xi) - 1.0) / self.xi
        q = max(float(q), 0.0)
        while self.cdf(q) < p:
            q = np.nextafter(q, np.inf) if q > 0 else np.nextafter(0.0, 1.0)
        return float(q)

    def crps(self, y):
        return crps_censored_gev(self.mu, self.sigma, self.xi, y)


# ----------------------------------------------------------------- predictors


@dataclass(frozen=True)
class EmosPredictors:
    ens_mean: float
    frac_zero: float
    mean_diff: float
    hres: Optional[float] = None
    cnt: Optional[float] = None
    single_member: bool = False


def mean_abs_difference(values) -> float:
    """(1/m^2) sum_ij |x_i - x_j|, computed in O(m log m)."""
    x = np.sort(np.asarray(values, dtype=float))
    m = x.size
    if m == 0:
        return 0.0
    i = np.arange(1, m + 1)
    return float(2.0 * np.sum((2 * i - m - 1) * x) / m**2)


def compute_predictors(f: EnsembleForecast, zero_cutoff: float = POP_THRESHOLD) -> EmosPredictors:
    values = f.values
    ens = f.tagged(MemberTag.ENS)
    if ens.size == 0:
        ens = f.tagged(MemberTag.MEAN)
    if ens.size == 0:
        ens = values
    hres = f.tagged(MemberTag.HRES)
    cnt = f.tagged(MemberTag.CNT)
    single = values.size < 2
    if single:
        warnings.warn("single-member ensemble: mean difference set to 0", stacklevel=2)
    return EmosPredictors(
        ens_mean=float(ens.mean()),
        frac_zero=float(np.mean(values < zero_cutoff)),
        mean_diff=0.0 if single else mean_abs_difference(values),
        hres=float(hres[0]) if hres.size == 1 else None,
        cnt=float(cnt[0]) if cnt.size == 1 else None,
        single_member=single,
    )


# --------------------------------------------------------------------- params


@dataclass(frozen=True)
class EmosParams:
    a0: float
    a_hres: float
    a_cnt: float
    a_ens: float
    a_frac: float
    b0: float
    b1: float
    xi: float
    use_hres: bool = False
    use_cnt: bool = False
    mean_crps: float = float("nan")
    n_train: int = 0

    def __post_init__(self):
        if not XI_BOUNDS[0] <= self.xi <= XI_BOUNDS[1]:
            raise ValueError(f"shape {self.xi} outside {XI_BOUNDS}")

    def to_json(self) -> str:
        return json.dumps({"method": "emos", **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EmosParams":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: d[k] for k in keys if k in d})


def _design(preds: Sequence[EmosPredictors], use_hres: bool, use_cnt: bool):
    n = len(preds)
    X = np.zeros((n, 5))
    X[:, 0] = 1.0
    for i, p in enumerate(preds):
        if use_hres and p.hres is not None:
            X[i, 1] = p.hres
        if use_cnt and p.cnt is not None:
            X[i, 2] = p.cnt
        X[i, 3] = p.ens_mean
        X[i, 4] = p.frac_zero
    md = np.array([p.mean_diff for p in preds], dtype=float)
    return X, md


def predict_emos(params: EmosParams, preds: EmosPredictors) -> CensoredGev:
    mu = params.a0 + params.a_ens * preds.ens_mean + params.a_frac * preds.frac_zero
    if params.use_hres and preds.hres is not None:
        mu += params.a_hres * preds.hres
    if params.use_cnt and preds.cnt is not None:
        mu += params.a_cnt * preds.cnt
    sigma = params.b0 + params.b1 * preds.mean_diff
    if sigma < SIGMA_MIN:
        log.debug("scale %.3g floored at %.3g", sigma, SIGMA_MIN)
        sigma = SIGMA_MIN
    return CensoredGev(mu, sigma, params.xi)


# -------------------------------------------------------------------- fitting


@dataclass
class EmosFit:
    params: EmosParams
    trace: list = field(default_factory=list)
    initial_crps: float = float("nan")
    converged: bool = True


class _Objective:
    def __init__(self, X, md, y, active):
        self.X, self.md, self.y = X, md, y
        self.active = active  # indices of location columns being fitted

    def unpack(self, theta):
        k = len(self.active)
        a = np.zeros(5)
        a[self.active] = theta[:k]
        b0, b1, xi = theta[k:]
        return a, b0, b1, xi

    def __call__(self, theta):
        a, b0, b1, xi = self.unpack(theta)
        mu = self.X @ a
        sigma = np.maximum(b0 + b1 * self.md, SIGMA_MIN)
        return float(np.mean(crps_censored_gev(mu, sigma, xi, self.y)))

    def value_and_grad(self, theta, dxi=1e-5):
        a, b0, b1, xi = self.unpack(theta)
        y = self.y
        n = y.size
        mu = self.X @ a
        raw_sigma = b0 + b1 * self.md
        sigma = np.maximum(raw_sigma, SIGMA_MIN)
        crps = crps_censored_gev(mu, sigma, xi, y)
        # one-sided difference in xi, stepping toward the interior of its bounds
        step = dxi if xi + dxi < XI_BOUNDS[1] else -dxi
        hi = crps_censored_gev(mu, sigma, xi + step, y)
        gy = gev_cdf(y, mu, sigma, xi)
        g0 = gev_cdf(0.0, mu, sigma, xi)
        d_mu = 1.0 - 2.0 * gy + g0**2
        # Euler: mu d_mu + sigma d_sigma + y d_y = CRPS, with d_y = 2 G(y) - 1
        d_sigma = (crps - mu * d_mu - y * (2.0 * gy - 1.0)) / sigma
        d_sigma = np.where(raw_sigma > SIGMA_MIN, d_sigma, 0.0)
        grad = np.concatenate([
            self.X[:, self.active].T @ d_mu / n,
            [d_sigma.sum() / n, d_sigma @ self.md / n, (np.mean(hi) - np.mean(crps)) / step],
        ])
        value = float(np.mean(crps))
        self.last = (np.array(theta, copy=True), value)
        return value, grad

    def traced(self, theta):
        """Objective at an accepted iterate, reusing the last evaluation when it matches."""
        last = getattr(self, "last", None)
        if last is not None and np.array_equal(last[0], theta):
            return last[1]
        return self(theta)


def _starts(X, md, y, active, previous: Optional[EmosParams]):
    k = len(active)
    spread = max(float(np.std(y)), 0.1)
    clim = np.zeros(k + 3)
    clim[0] = float(np.mean(y)) - 0.5 * spread
    clim[k:] = [0.5 * spread, 0.0, 0.1]
    starts = [clim]
    coef, *_ = np.linalg.lstsq(X[:, active], y, rcond=None)
    resid = np.abs(y - X[:, active] @ coef)
    A = np.column_stack([np.ones_like(md), md])
    bc, *_ = np.linalg.lstsq(A, resid, rcond=None)
    reg = np.concatenate([coef, [max(bc[0], 0.1), max(bc[1], 0.0), 0.1]])
    starts.append(reg)
    if previous is not None:
        full = np.array([previous.a0, previous.a_hres, previous.a_cnt, previous.a_ens, previous.a_frac])
        starts.append(np.concatenate([full[active], [previous.b0, previous.b1, previous.xi]]))
    return starts


def fit_emos(
    predictors: Sequence[EmosPredictors],
    observations: Sequence[float],
    previous: Optional[EmosParams] = None,
    min_pairs: int = 30,
    maxiter: int = 200,
    ftol: float = 1e-6,
    n_starts: int = 3,
) -> EmosFit:
    """Minimum-CRPS estimation of the EMOS coefficients.

    Ranks the candidate starts (climatological, ensemble regression, and the
    previous optimum when given) by objective value, runs a bounded
    quasi-Newton search from the ``n_starts`` best ones and keeps the best
    result. HRES/CNT terms are fitted only if every training forecast has them.
    """
    y = np.asarray(observations, dtype=float)
    if len(predictors) != y.size:
        raise DataError("predictors and observations differ in length")
    if y.size < min_pairs:
        raise DataError(f"need at least {min_pairs} training pairs, got {y.size}")
    if np.all(y == 0):
        raise DegenerateTrainingError("all training observations are zero")
    use_hres = all(p.hres is not None for p in predictors)
    use_cnt = all(p.cnt is not None for p in predictors)
    X, md = _design(predictors, use_hres, use_cnt)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(md))):
        raise DataError("non-finite predictors")
    active = [0] + ([1] if use_hres else []) + ([2] if use_cnt else []) + [3, 4]
    obj = _Objective(X, md, y, active)
    k = len(active)
    bounds = [(None, None)] * k + [(SIGMA_MIN, None), (0.0, None), (XI_BOUNDS[0] + 1e-3, XI_BOUNDS[1] - 1e-3)]

    # diagonal rescaling so every coordinate moves the objective on a similar scale
    ys = max(float(np.std(y)), 0.1)
    col_sd = [max(float(np.std(X[:, j])), 1e-3) if j else 1.0 for j in active]
    scale = np.array([ys / sd for sd in col_sd] + [ys, ys / max(float(np.std(md)), 1e-3), 1.0])
    sbounds = [(None if lo is None else lo / c, None if hi is None else hi / c) for (lo, hi), c in zip(bounds, scale)]

    def scaled(u):
        f, g = obj.value_and_grad(u * scale)
        return f, g * scale

    best = None
    cands = []
    for x0 in _starts(X, md, y, active, previous):
        x0 = np.array([np.clip(v, lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
                       for v, (lo, hi) in zip(x0, bounds)])
        cands.append((obj(x0), x0))
    cands.sort(key=lambda c: c[0])
    for f0, x0 in cands[:n_starts]:
        trace = [f0]
        res = optimize.minimize(
            scaled, x0 / scale, jac=True, method="L-BFGS-B", bounds=sbounds,
            callback=lambda uk: trace.append(obj.traced(uk * scale)),
            options={"maxiter": maxiter, "ftol": ftol, "gtol": 1e-8},
        )
        x_opt = res.x * scale
        x_best, f_best = (x_opt, res.fun) if res.fun <= f0 else (x0, f0)
        if best is None or f_best < best[1]:
            best = (x_best, f_best, trace, f0, bool(res.success))
    x_best, f_best, trace, f0, ok = best
    if not ok:
        warnings.warn("EMOS optimizer hit the iteration cap; returning best iterate", ConvergenceWarning, stacklevel=2)
    a, b0, b1, xi = obj.unpack(x_best)
    params = EmosParams(
        a0=float(a[0]), a_hres=float(a[1]), a_cnt=float(a[2]), a_ens=float(a[3]), a_frac=float(a[4]),
        b0=float(b0), b1=float(b1), xi=float(xi), use_hres=use_hres, use_cnt=use_cnt,
        mean_crps=float(f_best), n_train=int(y.size),
    )
    return EmosFit(params=params, trace=trace, initial_crps=f0, converged=ok)
