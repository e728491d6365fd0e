"""
ML / REML fitting of per-coefficient linear mixed models.

y = X b + sum_h Z_h u_h + e with u_h ~ N(0, q_h I), e ~ N(0, s I). Variance
components are optimized on the log scale (simplex start, quasi-Newton refinement with
analytic gradients), and every level is also tried at the q = 0 boundary.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from .config import logger
from .design import DesignBundle
from .errors import NumericalError, ValidationError
from .splinekit import df_from_gram
from .woodbury import GramCache, MarginalEval

LOG2PI = np.log(2.0 * np.pi)
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 500
# log-variance floor standing in for an exact zero during optimization
_LOG_FLOOR = -40.0


@dataclass
class LmmFit:
    beta_hat: np.ndarray
    vc_hat: np.ndarray
    s_hat: float
    loglik_ml: float
    loglik_reml: float
    converged: bool
    n_obs: int
    method: str = "reml"
    beta_cov: Optional[np.ndarray] = None
    vc_se: Optional[np.ndarray] = None
    n_iter: int = 0
    message: str = ""

    @property
    def variances(self) -> np.ndarray:
        """Random-level variances followed by the residual variance."""
        return np.append(self.vc_hat, self.s_hat)

    def to_dict(self) -> Dict[str, object]:
        return {
            "beta_hat": self.beta_hat,
            "vc_hat": self.vc_hat,
            "s_hat": self.s_hat,
            "loglik_ml": self.loglik_ml,
            "loglik_reml": self.loglik_reml,
            "converged": self.converged,
            "n_obs": self.n_obs,
            "method": self.method,
            "vc_se": self.vc_se,
        }


@dataclass
class _Profile:
    loglik: float
    beta: np.ndarray
    beta_cov: np.ndarray
    ev: MarginalEval
    XtSX: np.ndarray


class MixedModel:
    """One response vector against a fixed design; all evaluations go through Grams of [Z, X, y]."""

    def __init__(self, y: np.ndarray, X: np.ndarray, blocks: Sequence[np.ndarray]):
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValidationError(f"X is {X.shape}, y has {y.size} rows", code="dimension_mismatch")
        for block in blocks:
            if block.shape[0] != y.size:
                raise ValidationError("random block rows do not match y", code="dimension_mismatch")
        if X.shape[1] >= y.size:
            raise ValidationError(f"need N > A, got N={y.size}, A={X.shape[1]}", code="underdetermined")
        self.y = y
        self.X = X
        self.widths = [b.shape[1] for b in blocks]
        Z = np.hstack(blocks) if blocks else np.zeros((y.size, 0))
        self.cache = GramCache(Z, np.column_stack([X, y]))
        self.n_obs = y.size
        self.n_fixed = X.shape[1]
        self.n_levels = len(blocks)
        edges = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)
        self._slices = [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]

    @classmethod
    def from_bundle(cls, y: np.ndarray, bundle: DesignBundle, exclude: Sequence[int] = ()) -> "MixedModel":
        skip = set(exclude)
        return cls(y, bundle.X, [b.design for i, b in enumerate(bundle.blocks) if i not in skip])

    def column_variances(self, vc: np.ndarray) -> np.ndarray:
        return np.repeat(np.asarray(vc, dtype=float), self.widths) if self.widths else np.zeros(0)

    def evaluate(self, vc: np.ndarray, s: float) -> MarginalEval:
        return self.cache.evaluate(self.column_variances(vc), s)

    def profile(self, vc: np.ndarray, s: float, reml: bool) -> _Profile:
        ev = self.evaluate(vc, s)
        Q = ev.quad()
        A = self.n_fixed
        XtSX, XtSy, ytSy = Q[:A, :A], Q[:A, A], Q[A, A]
        if A:
            try:
                factor = linalg.cho_factor(XtSX, lower=True)
            except linalg.LinAlgError:
                raise NumericalError("X' Sigma^{-1} X is singular", code="singular_fixed")
            beta = linalg.cho_solve(factor, XtSy)
            beta_cov = linalg.cho_solve(factor, np.eye(A))
            logdet_x = 2.0 * np.sum(np.log(np.diag(factor[0])))
        else:
            beta, beta_cov, logdet_x = np.zeros(0), np.zeros((0, 0)), 0.0
        rss = max(ytSy - XtSy @ beta, 0.0)
        if reml:
            loglik = -0.5 * ((self.n_obs - A) * LOG2PI + ev.logdet + logdet_x + rss)
        else:
            loglik = -0.5 * (self.n_obs * LOG2PI + ev.logdet + rss)
        return _Profile(loglik, beta, beta_cov, ev, XtSX)

    def loglik(self, vc: np.ndarray, s: float, beta: Optional[np.ndarray] = None, reml: bool = False) -> float:
        """Gaussian log density at given variances; beta profiled by GLS when None."""
        if beta is None:
            return self.profile(vc, s, reml).loglik
        ev = self.evaluate(vc, s)
        c = np.append(-np.asarray(beta, dtype=float), 1.0)
        return -0.5 * (self.n_obs * LOG2PI + ev.logdet + c @ ev.quad() @ c)

    def gradient(self, vc: np.ndarray, s: float, reml: bool) -> np.ndarray:
        """d loglik / d log(theta) for theta = (q_1..q_H, s)."""
        prof = self.profile(vc, s, reml)
        ev = prof.ev
        A = self.n_fixed
        c = np.append(-prof.beta, 1.0)
        cross = ev.cross()
        z_res = cross @ c
        z_diag = ev.z_inner_diag()
        grads = np.empty(self.n_levels + 1)
        for h, part in enumerate(self._slices):
            trace = z_diag[part].sum()
            quad = float(z_res[part] @ z_res[part])
            if reml and A:
                ZX = cross[part, :A]
                trace -= float(np.sum((ZX @ prof.beta_cov) * ZX))
            grads[h] = vc[h] * (-0.5 * trace + 0.5 * quad)
        Q2 = ev.quad2()
        trace_s = ev.trace_inverse()
        if reml and A:
            trace_s -= float(np.sum(prof.beta_cov * Q2[:A, :A]))
        grads[-1] = s * (-0.5 * trace_s + 0.5 * float(c @ Q2 @ c))
        return grads


def marginal_loglik(
    y: np.ndarray,
    X: np.ndarray,
    Z_blocks: Sequence[np.ndarray],
    vc: Sequence[float],
    s: float,
    beta: Optional[np.ndarray] = None,
    *,
    reml: bool = False,
) -> float:
    """log N(y; X beta, sum_h q_h Z_h Z_h' + s I); REML adds the -1/2 log|X' Sigma^{-1} X| term."""
    vc = np.asarray(vc, dtype=float)
    if np.any(vc < 0) or not s > 0:
        raise ValidationError("variance components must be >= 0 with s > 0", code="negative_variance")
    model = MixedModel(y, X, list(Z_blocks))
    if reml and beta is not None:
        raise ValidationError("REML profiles beta out; do not pass beta")
    return model.loglik(vc, s, beta=beta, reml=reml)


def _unpack(theta: np.ndarray, fixed_zero: Sequence[int]):
    values = np.exp(np.clip(theta, _LOG_FLOOR, 50.0))
    vc = values[:-1].copy()
    vc[list(fixed_zero)] = 0.0
    return vc, values[-1]


def _start(model: MixedModel) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(model.X, model.y, rcond=None) if model.n_fixed else (np.zeros(0),)
    resid = model.y - model.X @ beta
    total = max(float(resid @ resid) / max(model.n_obs - model.n_fixed, 1), 1e-12)
    share = total / (model.n_levels + 1)
    return np.log(np.full(model.n_levels + 1, share))


def _optimize(model: MixedModel, reml: bool, theta0: np.ndarray, fixed_zero: Sequence[int], tol: float, max_iter: int):
    free = np.array([h for h in range(model.n_levels + 1) if h not in set(fixed_zero)])

    def full(theta_free):
        theta = theta0.copy()
        theta[free] = theta_free
        return theta

    def objective(theta_free):
        vc, s = _unpack(full(theta_free), fixed_zero)
        try:
            return -model.profile(vc, s, reml).loglik
        except NumericalError:
            return np.inf

    def jac(theta_free):
        vc, s = _unpack(full(theta_free), fixed_zero)
        try:
            return -model.gradient(vc, s, reml)[free]
        except NumericalError:
            return np.zeros(free.size)

    start = theta0[free]
    simplex = optimize.minimize(
        objective, start, method="Nelder-Mead",
        options={"maxiter": max(50, max_iter // 5), "xatol": 1e-3, "fatol": 1e-6},
    )
    refined = optimize.minimize(
        objective, simplex.x, jac=jac, method="L-BFGS-B",
        bounds=[(_LOG_FLOOR, 50.0)] * free.size,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-6},
    )
    best = refined if refined.fun <= simplex.fun else simplex
    theta = full(best.x)
    n_iter = int(getattr(simplex, "nit", 0)) + int(getattr(refined, "nit", 0))
    return theta, -float(best.fun), bool(refined.success), n_iter, str(refined.message)


def fit_reml(
    y: np.ndarray,
    X: np.ndarray,
    Z_blocks: Sequence[np.ndarray],
    *,
    method: str = "reml",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    start: Optional[np.ndarray] = None,
    model: Optional[MixedModel] = None,
    with_se: bool = True,
) -> LmmFit:
    """Maximize the restricted (or full, method="ml") likelihood over variance components."""
    if method not in ("reml", "ml"):
        raise ValidationError(f"unknown method {method!r}")
    reml = method == "reml"
    model = model or MixedModel(y, X, list(Z_blocks))
    theta0 = np.log(np.clip(start, 1e-12, None)) if start is not None else _start(model)

    theta, best, converged, n_iter, message = _optimize(model, reml, theta0, (), tol, max_iter)
    fixed_zero: List[int] = []
    # boundary comparison: pin each level at zero and keep it if no worse
    for h in range(model.n_levels):
        trial = fixed_zero + [h]
        alt_theta, alt_best, alt_conv, alt_iter, alt_msg = _optimize(model, reml, theta, trial, tol, max_iter)
        n_iter += alt_iter
        if alt_best >= best - tol * max(1.0, abs(best)):
            fixed_zero, theta, best, converged, message = trial, alt_theta, alt_best, alt_conv, alt_msg

    vc, s = _unpack(theta, fixed_zero)
    vc[vc < np.exp(_LOG_FLOOR + 1.0)] = 0.0
    prof = model.profile(vc, s, reml)
    ml = model.profile(vc, s, False).loglik if reml else prof.loglik
    rl = prof.loglik if reml else model.profile(vc, s, True).loglik

    grad = model.gradient(vc, s, reml)
    interior = np.append(vc > 0, True)
    grad_ok = np.linalg.norm(grad[interior]) < max(1e-3, 1e-5 * abs(best))
    converged = bool(converged or grad_ok)
    if not converged:
        logger.warning(f"⚠️ Variance-component fit did not converge: {message}")
    fit = LmmFit(
        beta_hat=prof.beta,
        vc_hat=vc,
        s_hat=float(s),
        loglik_ml=float(ml),
        loglik_reml=float(rl),
        converged=converged,
        n_obs=model.n_obs,
        method=method,
        beta_cov=prof.beta_cov,
        n_iter=n_iter,
        message=message,
    )
    if with_se:
        fit.vc_se = variance_standard_errors(model, fit, reml)
    return fit


def variance_standard_errors(model: MixedModel, fit: LmmFit, reml: bool, step: float = 1e-4) -> np.ndarray:
    """Curvature-based SEs of (q_1..q_H, s) from a finite-difference Hessian of the analytic gradient.

    Boundary components get an SE from the curvature at a small positive value.
    """
    theta = np.log(np.maximum(fit.variances, 1e-6 * max(fit.s_hat, 1e-12)))
    k = theta.size
    hessian = np.empty((k, k))
    for i in range(k):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        g_up = model.gradient(np.exp(up[:-1]), np.exp(up[-1]), reml)
        g_down = model.gradient(np.exp(down[:-1]), np.exp(down[-1]), reml)
        hessian[:, i] = (g_up - g_down) / (2.0 * step)
    hessian = 0.5 * (hessian + hessian.T)
    curvature = -np.diag(hessian)
    # per-component curvature; the proposal only needs marginal scales
    log_se = np.where(curvature > 1e-12, 1.0 / np.sqrt(np.abs(curvature)), 1.0)
    return np.exp(theta) * np.minimum(log_se, 5.0)


def effective_df_np(fit: LmmFit, bundle: DesignBundle, term: int = 0) -> float:
    """DF of spline term `term` (index into bundle.spline_terms) at lambda = s / q_S.

    W is s times the inverse marginal covariance of the other random levels, so with no
    other levels W = I; q_S = 0 gives the linear limit 2.
    """
    return df_at(bundle, term, fit.vc_hat, fit.s_hat)


def df_at(bundle: DesignBundle, term: int, vc: np.ndarray, s: float) -> float:
    info = bundle.spline_terms[term]
    q_s = float(vc[info.block])
    if q_s <= 0:
        return 2.0
    B = bundle.spline_basis(term)
    if bundle.n_vc == 1:
        gram = B.T @ B
    else:
        cache = GramCache(bundle.z_matrix(exclude=[info.block]), B)
        gram = s * cache.evaluate(bundle.column_variances(vc, exclude=[info.block]), s).quad()
    return df_from_gram(gram, info.kit.dr.omega, s / q_s)
