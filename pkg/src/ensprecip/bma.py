"""Bayesian model averaging with discrete-continuous Gamma components.

Each member x contributes a component with a point mass at zero,
``P(Y = 0 | x) = logistic(a0 + a1 x^(1/3) + a2 [x < 0.2])``, and a Gamma
density for ``Y^(1/3)`` with mean ``b0 + b1 x^(1/3)`` and variance
``c0 + c1 x``. Mean coefficients are per group, variance coefficients are
shared. Exchangeable members (ENS) share one group and split its weight.

Estimation is two-stage: the logistic part by IRLS per group, then EM for
the weights, Gamma mean and shared variance coefficients.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .core import POP_THRESHOLD, EnsembleForecast, Member, MemberTag, PredictiveDistribution
from .errors import ComponentDomainError, ConvergenceError, DataError, GroupMismatchError, RmmInputError

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-4
EM_TOL = 1e-6
EM_MAXITER = 500


@dataclass(frozen=True)
class BmaComponentParams:
    group: str
    a0: float = 0.0
    a1: float = 0.0
    a2: float = 0.0
    b0: float = 1.0
    b1: float = 0.0


@dataclass(frozen=True)
class BmaParams:
    components: dict  # group -> BmaComponentParams
    weights: dict  # group -> weight, summing to 1
    c0: float = 1.0
    c1: float = 0.0
    loglik: float = float("nan")
    n_iter: int = 0
    n_train: int = 0

    def __post_init__(self):
        w = np.array(list(self.weights.values()), dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("BMA weights must be nonnegative and sum to 1")
        if set(self.weights) != set(self.components):
            raise ValueError("weights and components must cover the same groups")

    @property
    def groups(self) -> list[str]:
        return list(self.components)

    def to_json(self) -> str:
        payload = {
            "method": "bma",
            "c0": self.c0,
            "c1": self.c1,
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "n_train": self.n_train,
            "weights": self.weights,
            "components": {g: vars(c) for g, c in self.components.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BmaParams":
        comps = {g: BmaComponentParams(**c) for g, c in d["components"].items()}
        return cls(
            components=comps, weights={g: float(w) for g, w in d["weights"].items()},
            c0=d["c0"], c1=d["c1"], loglik=d.get("loglik", float("nan")),
            n_iter=d.get("n_iter", 0), n_train=d.get("n_train", 0),
        )


# ----------------------------------------------------------------- components


def _logistic(z):
    return special.expit(z)


def component_pop(params: BmaComponentParams, x, zero_cutoff: float = POP_THRESHOLD):
    """Probability of *no* precipitation implied by one member value ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("member values must be nonnegative")
    return _logistic(params.a0 + params.a1 * np.cbrt(x) + params.a2 * (x < zero_cutoff))


def _gamma_moments(b0, b1, c0, c1, x):
    mean = b0 + b1 * np.cbrt(x)
    var = c0 + c1 * x
    return mean, var


def component_amount_density(params: BmaComponentParams, c0: float, c1: float, x, y):
    """Density in y of the positive part, ``Gamma(Y^(1/3)) * (1/3) y^(-2/3)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("amount density is defined for y > 0")
    mean, var = _gamma_moments(params.b0, params.b1, c0, c1, x)
    if np.any(mean <= 0) or np.any(var <= 0):
        raise ComponentDomainError("Gamma mean and variance must be positive")
    shape, scale = mean**2 / var, var / mean
    r = np.cbrt(y)
    logf = (shape - 1) * np.log(r) - r / scale - shape * np.log(scale) - special.gammaln(shape)
    return np.exp(logf) * (1.0 / 3.0) * y ** (-2.0 / 3.0)


class BmaMixture(PredictiveDistribution):
    """Finite mixture of point-mass + cube-root-Gamma components."""

    def __init__(self, weights, prob_zero, shape, scale, pop_threshold: float = POP_THRESHOLD):
        self.weights = np.asarray(weights, dtype=float)
        self.p0 = np.asarray(prob_zero, dtype=float)
        self.shape = np.asarray(shape, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be on the simplex")
        self.pop_threshold = pop_threshold

    def __repr__(self):
        return f"BmaMixture(k={self.weights.size}, p0={self.prob_zero:.3f})"

    @property
    def prob_zero(self) -> float:
        return float(self.weights @ self.p0)

    def component_cdfs(self, x):
        x = np.asarray(x, dtype=float)
        r = np.cbrt(np.maximum(x, 0.0))[..., None]
        pos = special.gammainc(self.shape, r / self.scale)
        out = self.p0 + (1.0 - self.p0) * pos
        return np.where(x[..., None] < 0, 0.0, out)

    def cdf(self, x):
        out = self.component_cdfs(x) @ self.weights
        return float(out) if np.ndim(out) == 0 else out

    def cdf_left(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(x <= 0, 0.0, self.cdf(x))
        return float(out) if out.ndim == 0 else out

    def pdf(self, y):
        """Density of the continuous part in mm (y > 0)."""
        y = np.asarray(y, dtype=float)
        r = np.cbrt(y)[..., None]
        with np.errstate(divide="ignore"):
            logf = (self.shape - 1) * np.log(r) - r / self.scale - self.shape * np.log(self.scale) - special.gammaln(self.shape)
        dens = (1.0 - self.p0) * np.exp(logf) * (1.0 / 3.0) * y[..., None] ** (-2.0 / 3.0)
        out = np.where(y > 0, dens @ self.weights, 0.0)
        return float(out) if out.ndim == 0 else out

    def crps(self, y: float, epsabs: float = 1e-4) -> float:
        """CRPS by adaptive quadrature on the cube-root scale."""
        ry = np.cbrt(y)

        def below(r):
            return self.cdf(r**3) ** 2 * 3 * r**2

        def above(r):
            return (1.0 - self.cdf(r**3)) ** 2 * 3 * r**2

        lo = integrate.quad(below, 0.0, ry, epsabs=epsabs / 2, limit=200)[0] if ry > 0 else 0.0
        hi = integrate.quad(above, ry, np.inf, epsabs=epsabs / 2, limit=200)[0]
        return lo + hi


# ------------------------------------------------------------------- logistic


@dataclass
class LogisticFit:
    coef: np.ndarray
    stderr: np.ndarray
    n_iter: int


def fit_logistic(X: np.ndarray, z: np.ndarray, ridge: float = 1e-6, maxiter: int = 100, tol: float = 1e-10) -> LogisticFit:
    """Logistic regression by iteratively reweighted least squares.

    Columns that are constant (other than the intercept) are dropped and get a
    zero coefficient. A tiny ridge keeps separated designs finite.
    """
    X = np.asarray(X, dtype=float)
    z = np.asarray(z, dtype=float)
    keep = [0] + [j for j in range(1, X.shape[1]) if np.ptp(X[:, j]) > 0]
    Xk = X[:, keep]
    beta = np.zeros(len(keep))
    pen = ridge * np.eye(len(keep))
    pen[0, 0] = 0.0
    it = 0
    for it in range(1, maxiter + 1):
        p = _logistic(Xk @ beta)
        w = np.clip(p * (1 - p), 1e-12, None)
        H = Xk.T @ (Xk * w[:, None]) + pen
        step = np.linalg.solve(H, Xk.T @ (z - p) - pen @ beta)
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            break
    p = _logistic(Xk @ beta)
    H = Xk.T @ (Xk * np.clip(p * (1 - p), 1e-12, None)[:, None]) + pen
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    coef = np.zeros(X.shape[1])
    stderr = np.full(X.shape[1], np.nan)
    coef[keep] = beta
    stderr[keep] = se
    return LogisticFit(coef, stderr, it)


def logistic_design(x, zero_cutoff: float = POP_THRESHOLD):
    x = np.asarray(x, dtype=float).ravel()
    return np.column_stack([np.ones_like(x), np.cbrt(x), (x < zero_cutoff).astype(float)])


# ------------------------------------------------------------------------- EM


def _member_layout(forecasts: Sequence[EnsembleForecast]):
    """Column layout shared by all training forecasts: (groups, column group index, X)."""
    keys0 = [m.group for m in forecasts[0].members]
    groups = list(dict.fromkeys(keys0))
    rank = {g: i for i, g in enumerate(groups)}
    order0 = np.argsort([rank[k] for k in keys0], kind="stable")
    col_group = np.array([rank[keys0[i]] for i in order0])
    sorted0 = sorted(keys0)
    X = np.empty((len(forecasts), len(keys0)))
    for i, f in enumerate(forecasts):
        keys = [m.group for m in f.members]
        if keys == keys0:
            X[i] = f.values[order0]
            continue
        if sorted(keys) != sorted0:
            raise GroupMismatchError("training forecasts have inconsistent member structure")
        X[i] = f.values[np.argsort([rank[k] for k in keys], kind="stable")]
    return groups, col_group, X


def _project_simplex_floor(s: np.ndarray, floor: float) -> np.ndarray:
    """argmax sum s_g log w_g over {w_g >= floor, sum w = 1}."""
    n = s.size
    if floor * n >= 1:
        return np.full(n, 1.0 / n)
    fixed = np.zeros(n, dtype=bool)
    while True:
        free = ~fixed
        budget = 1.0 - floor * fixed.sum()
        w = np.where(fixed, floor, 0.0)
        tot = s[free].sum()
        w[free] = budget * s[free] / tot if tot > 0 else budget / free.sum()
        low = free & (w < floor)
        if not low.any():
            return w
        fixed |= low


@dataclass
class BmaFit:
    params: BmaParams
    loglik_trace: list = field(default_factory=list)
    logistic: dict = field(default_factory=dict)
    converged: bool = True
    point_mass_only: bool = False


class _EmState:
    def __init__(self, X, y, col_group, n_groups, p0):
        self.X = X
        self.y = y
        self.pos = y > 0
        self.col_group = col_group
        self.n_groups = n_groups
        self.gsize = np.bincount(col_group, minlength=n_groups).astype(float)
        self.p0 = p0  # (n, K) point masses, fixed during EM
        # the Gamma part only involves cases with positive observations
        self.Xp = X[self.pos]
        self.cxp = np.cbrt(self.Xp)
        self.rp = np.cbrt(y[self.pos])[:, None]
        self.logrp = np.log(self.rp)
        with np.errstate(divide="ignore"):
            self.log_p0 = np.log(p0)
        self.log_wet = np.log1p(-p0[self.pos])

    def moments(self, b, c):
        """Gamma mean and variance on the cube-root scale, positive cases only."""
        mean = b[self.col_group, 0] + b[self.col_group, 1] * self.cxp
        var = c[0] + c[1] * self.Xp
        return mean, var

    def feasible(self, b, c):
        mean, var = self.moments(b, c)
        return bool(np.all(mean > 0) and np.all(var > 0))

    def log_gamma(self, b, c):
        """log Gamma density of r_t under each component, positive cases only."""
        mean, var = self.moments(b, c)
        shape, scale = mean**2 / var, var / mean
        log_scale = np.log(scale)
        return (shape - 1) * self.logrp - self.rp / scale - shape * log_scale - special.gammaln(shape)

    def log_component(self, b, c):
        """log of component likelihood for every case (cube-root scale)."""
        out = self.log_p0.copy()
        out[self.pos] = self.log_wet + self.log_gamma(b, c)
        return out

    def e_step(self, w_member, b, c):
        lc = self.log_component(b, c) + np.log(w_member)[None, :]
        mx = lc.max(axis=1, keepdims=True)
        tot = mx[:, 0] + np.log(np.exp(lc - mx).sum(axis=1))
        z = np.exp(lc - tot[:, None])
        return z, float(tot.sum())

    def q_gamma(self, zp, b, c):
        if not self.feasible(b, c):
            return -np.inf
        return float(np.sum(zp * self.log_gamma(b, c)))

    def neg_q_and_grad(self, zp, theta):
        """Negative Gamma part of Q and its gradient in (b.ravel(), c0, c1)."""
        G = self.n_groups
        b, c = theta[: 2 * G].reshape(G, 2), theta[2 * G:]
        mean, var = self.moments(b, c)
        if np.any(mean <= 0) or np.any(var <= 0):
            return 1e100, np.zeros_like(theta)
        shape, scale = mean**2 / var, var / mean
        r, logr = self.rp, self.logrp
        log_scale = np.log(scale)
        logf = (shape - 1) * logr - r / scale - shape * log_scale - special.gammaln(shape)
        d_shape = logr - log_scale - special.digamma(shape)
        d_scale = r / scale**2 - shape / scale
        d_mean = zp * (d_shape * 2 * mean / var - d_scale * var / mean**2)
        d_var = zp * (-d_shape * mean**2 / var**2 + d_scale / mean)
        grad_b = np.column_stack([
            np.bincount(self.col_group, weights=d_mean.sum(axis=0), minlength=G),
            np.bincount(self.col_group, weights=(d_mean * self.cxp).sum(axis=0), minlength=G),
        ])
        grad_c = np.array([d_var.sum(), (d_var * self.Xp).sum()])
        return -float(np.sum(zp * logf)), -np.concatenate([grad_b.ravel(), grad_c])

    def refine(self, zp, b, c, maxiter=10):
        theta0 = np.concatenate([b.ravel(), c])
        res = optimize.minimize(lambda th: self.neg_q_and_grad(zp, th), theta0, jac=True,
                                method="L-BFGS-B", options={"maxiter": maxiter})
        G = self.n_groups
        return res.x[: 2 * G].reshape(G, 2), res.x[2 * G:]

    def _wls(self, w, x, t, cols=None):
        """Weighted least squares of t on (1, x) from column sums; None if singular."""
        if cols is not None:
            w, x = w[:, cols], x[:, cols]
        sw, swx, swxx = w.sum(), (w * x).sum(), (w * x * x).sum()
        swt, swxt = (w * t).sum(), (w * x * t).sum()
        det = sw * swxx - swx**2
        if sw <= 0 or det <= 1e-12 * max(sw * swxx, 1e-300):
            return None
        return np.array([(swxx * swt - swx * swxt) / det, (sw * swxt - swx * swt) / det])

    def propose(self, zp, b, c):
        """Weighted regression for the mean, weighted moment matching for the variance."""
        b_new = b.copy()
        for g in range(self.n_groups):
            coef = self._wls(zp, self.cxp, self.rp, self.col_group == g)
            if coef is not None:
                b_new[g] = coef
        mean, _ = self.moments(b_new, c)
        c_new = self._wls(zp, self.Xp, (self.rp - mean) ** 2)
        return b_new, (c if c_new is None else c_new)


def fit_bma_em(
    forecasts: Sequence[EnsembleForecast],
    observations: Sequence[float],
    min_pairs: int = 30,
    tol: float = EM_TOL,
    maxiter: int = EM_MAXITER,
    weight_floor: float = WEIGHT_FLOOR,
    zero_cutoff: float = POP_THRESHOLD,
    init: Optional[BmaParams] = None,
) -> BmaFit:
    """Fit BMA by per-group logistic regression followed by EM.

    ``init`` (typically the previous training window's fit) seeds the EM
    weights and Gamma coefficients when its groups match and it is feasible
    on the new training data.

    The EM is a generalized EM: the closed-form weight update is exact, and
    the Gamma update (weighted regression and moment matching, then a few
    quasi-Newton steps on the expected complete log-likelihood) is accepted
    only if it increases that expectation. The observed
    log-likelihood is therefore nondecreasing; a decrease beyond 1e-10 raises
    ``ConvergenceError``.
    """
    y = np.asarray(observations, dtype=float)
    if len(forecasts) != y.size:
        raise DataError("forecasts and observations differ in length")
    if y.size < min_pairs:
        raise DataError(f"need at least {min_pairs} training pairs, got {y.size}")
    groups, col_group, X = _member_layout(forecasts)
    G = len(groups)
    n, K = X.shape

    # stage 1: logistic point mass per group, members pooled
    zero_obs = (y <= 0).astype(float)
    logit = {}
    p0 = np.empty_like(X)
    for g in range(G):
        cols = col_group == g
        xs = X[:, cols]
        fit = fit_logistic(logistic_design(xs, zero_cutoff), np.repeat(zero_obs, cols.sum()))
        logit[groups[g]] = fit
        a0, a1, a2 = fit.coef
        p0[:, cols] = _logistic(a0 + a1 * np.cbrt(xs) + a2 * (xs < zero_cutoff))
    p0 = np.clip(p0, 1e-12, 1 - 1e-12)

    state = _EmState(X, y, col_group, G, p0)
    w = np.full(G, 1.0 / G)
    point_mass_only = not state.pos.any()
    if point_mass_only:
        warnings.warn("no positive observations: fitting point-mass-only BMA", stacklevel=2)
        b = np.tile([1.0, 0.0], (G, 1))
        c = np.array([1.0, 0.0])
    else:
        z0 = np.full((int(state.pos.sum()), K), 1.0 / K)
        b, c = state.propose(z0, np.tile([1.0, 0.0], (G, 1)), np.array([1.0, 0.0]))
        if not state.feasible(b, c):
            r = state.rp[:, 0]
            b = np.tile([r.mean(), 0.0], (G, 1))
            c = np.array([max(r.var(), 1e-3), 0.0])

    if init is not None and not point_mass_only and list(init.weights) == groups:
        b_i = np.array([[init.components[g].b0, init.components[g].b1] for g in groups])
        c_i = np.array([init.c0, init.c1])
        if state.feasible(b_i, c_i):
            w = _project_simplex_floor(np.array([init.weights[g] for g in groups]), weight_floor)
            b, c = b_i, c_i

    trace = []
    converged = False
    it = 0
    for it in range(1, maxiter + 1):
        w_member = w[col_group] / state.gsize[col_group]
        z, ll = state.e_step(w_member, b, c)
        if trace and ll < trace[-1] - 1e-10 * max(1.0, abs(trace[-1])):
            raise ConvergenceError(f"EM log-likelihood decreased: {trace[-1]} -> {ll}")
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        s = np.bincount(col_group, weights=z.sum(axis=0), minlength=G)
        w = _project_simplex_floor(s, weight_floor) if G > 1 else np.ones(1)
        if not point_mass_only:
            zp = z[state.pos]
            q_old = state.q_gamma(zp, b, c)
            b_new, c_new = state.propose(zp, b, c)
            q_new = state.q_gamma(zp, b_new, c_new)
            if q_new > q_old:
                b, c, q_old = b_new, c_new, q_new
            b_ref, c_ref = state.refine(zp, b, c)
            if state.q_gamma(zp, b_ref, c_ref) > q_old:
                b, c = b_ref, c_ref
    if not converged:
        log.warning("BMA EM stopped after %d iterations without meeting tolerance", it)

    comps = {
        groups[g]: BmaComponentParams(
            group=groups[g], a0=float(logit[groups[g]].coef[0]), a1=float(logit[groups[g]].coef[1]),
            a2=float(logit[groups[g]].coef[2]), b0=float(b[g, 0]), b1=float(b[g, 1]),
        )
        for g in range(G)
    }
    wsum = w.sum()
    params = BmaParams(
        components=comps, weights={groups[g]: float(w[g] / wsum) for g in range(G)},
        c0=float(c[0]), c1=float(c[1]), loglik=trace[-1], n_iter=len(trace), n_train=n,
    )
    return BmaFit(params=params, loglik_trace=trace, logistic=logit, converged=converged,
                  point_mass_only=point_mass_only)


def predict_bma(params: BmaParams, f: EnsembleForecast, zero_cutoff: float = POP_THRESHOLD) -> BmaMixture:
    counts: dict = {}
    for m in f.members:
        if m.group not in params.components:
            raise GroupMismatchError(f"member group {m.group!r} not in fitted groups {params.groups}")
        counts[m.group] = counts.get(m.group, 0) + 1
    x = f.values
    weights = np.array([params.weights[m.group] / counts[m.group] for m in f.members])
    present = weights.sum()
    if present <= 0:
        raise GroupMismatchError("forecast members carry no BMA weight")
    weights = weights / present
    p0 = np.empty(x.size)
    mean = np.empty(x.size)
    for i, m in enumerate(f.members):
        comp = params.components[m.group]
        p0[i] = component_pop(comp, m.value, zero_cutoff)
        mean[i] = comp.b0 + comp.b1 * np.cbrt(m.value)
    var = params.c0 + params.c1 * x
    # outside the training range the linear models can leave the domain
    mean = np.maximum(mean, 1e-3)
    var = np.maximum(var, 1e-6)
    return BmaMixture(weights, p0, mean**2 / var, var / mean)


# ------------------------------------------------------------------------ RMM


def build_rmm(sub_ensembles: Sequence[EnsembleForecast], hres_source: str = "ECMWF") -> EnsembleForecast:
    """Reduced multi-model ensemble.

    One MEAN member (mean of the perturbed members) and the control run per
    sub-ensemble, plus the HRES run of ``hres_source``. Members are labelled
    ``<source>:<tag>`` so each contributor forms its own BMA group.
    """
    if not sub_ensembles:
        raise RmmInputError("no sub-ensembles given")
    first = sub_ensembles[0]
    members: list[Member] = []
    for sub in sub_ensembles:
        if sub.site.id != first.site.id or sub.window != first.window:
            raise RmmInputError("sub-ensembles must share site and window")
        ens = sub.tagged(MemberTag.ENS)
        cnt = sub.tagged(MemberTag.CNT)
        if ens.size == 0:
            raise RmmInputError(f"{sub.source}: no perturbed members")
        if cnt.size != 1:
            raise RmmInputError(f"{sub.source}: missing control run")
        members.append(Member(MemberTag.MEAN, float(ens.mean()), f"{sub.source}:MEAN"))
        members.append(Member(MemberTag.CNT, float(cnt[0]), f"{sub.source}:CNT"))
        hres = sub.tagged(MemberTag.HRES)
        if sub.source == hres_source and hres.size == 1:
            members.append(Member(MemberTag.HRES, float(hres[0]), f"{sub.source}:HRES"))
    return EnsembleForecast(first.site, first.window, tuple(members), source="RMM")
