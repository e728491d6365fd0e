"""
Per-coefficient MCMC on the marginalized basis-space model.

Each sweep runs a spike-slab Gibbs update of every fixed effect and a Metropolis-Hastings
update of every variance component (zero-truncated Gaussian random walk). Spline random
effects are drawn from their complete conditional on the kept draws. Random streams are
Philox generators keyed by (master seed, k), so results do not depend on worker count.
"""
import json
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, stats
from scipy.special import expit, log_ndtr
from typing_extensions import Self

from .config import logger
from .design import DesignBundle
from .errors import ChainError, FmmError, NumericalError, ValidationError
from .lmmfit import LmmFit, MixedModel, fit_reml
from .utils import PathLike, savez_atomic
from .woodbury import GramCache

SHRINKAGE_MODES = ("eb", "none")
NO_SHRINKAGE_TAU = 1e6
POSTERIOR_FORMAT_VERSION = 1
ADAPT_WINDOW = 100


@dataclass(frozen=True)
class ChainConfig:
    n_burn: int = 5000
    n_keep: int = 10000
    thin: int = 10
    seed: int = 0
    proposal_scale: float = 1.0
    prior_shape: float = 2.0
    prior_scale_factor: float = 3.0
    shrinkage: str = "eb"
    target_accept: float = 0.4
    stall_limit: int = 500
    spline_within_sweep: bool = False
    min_set_size: int = 5
    prior_only: bool = False

    def __post_init__(self):
        if self.n_burn < 0 or self.n_keep < 1 or self.thin < 1:
            raise ValidationError("chain lengths must be n_burn >= 0, n_keep >= 1, thin >= 1")
        if self.n_keep < self.thin:
            raise ValidationError(f"n_keep ({self.n_keep}) must be at least thin ({self.thin})")
        if self.shrinkage not in SHRINKAGE_MODES:
            raise ValidationError(f"unknown shrinkage mode {self.shrinkage!r}")
        if not 0.0 < self.target_accept < 1.0:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.proposal_scale <= 0 or self.prior_shape <= 0 or self.prior_scale_factor <= 0:
            raise ValidationError("proposal and prior scales must be positive")
        if self.stall_limit < 1:
            raise ValidationError(f"stall_limit must be at least 1, got {self.stall_limit}")

    @property
    def n_saved(self) -> int:
        return self.n_keep // self.thin

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> Self:
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# Shrinkage hyperparameters


@dataclass
class ShrinkageHyper:
    pi: np.ndarray
    tau: np.ndarray
    set_index: np.ndarray
    set_ids: np.ndarray

    def for_coefficient(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        j = self.set_index[k]
        return self.pi[:, j], self.tau[:, j]

    def to_dict(self) -> Dict[str, object]:
        return {
            "pi": self.pi.tolist(),
            "tau": self.tau.tolist(),
            "set_index": self.set_index.tolist(),
            "set_ids": self.set_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> Self:
        return cls(
            pi=np.asarray(payload["pi"], dtype=float),
            tau=np.asarray(payload["tau"], dtype=float),
            set_index=np.asarray(payload["set_index"], dtype=int),
            set_ids=np.asarray(payload["set_ids"], dtype=int),
        )


def two_group_loglik(bhat: np.ndarray, V: np.ndarray, pi: float, tau: float) -> float:
    """sum log{pi N(b; 0, tau + V) + (1 - pi) N(b; 0, V)}."""
    slab = stats.norm.logpdf(bhat, scale=np.sqrt(tau + V))
    spike = stats.norm.logpdf(bhat, scale=np.sqrt(V))
    if pi >= 1.0:
        return float(slab.sum())
    return float(np.sum(np.logaddexp(np.log(pi) + slab, np.log1p(-pi) + spike)))


def _best_pi(log_ratio: np.ndarray, pi_min: float) -> float:
    """Maximizer over [pi_min, 1] of the concave sum log(pi rho + 1 - pi)."""
    rho_minus_one = np.expm1(np.clip(log_ratio, -700.0, 700.0))

    def slope(pi):
        return float(np.sum(rho_minus_one / (1.0 + pi * rho_minus_one)))

    if slope(pi_min) <= 0.0:
        return pi_min
    if slope(1.0) >= 0.0:
        return 1.0
    return float(optimize.brentq(slope, pi_min, 1.0, xtol=1e-12))


def _fit_two_group(bhat: np.ndarray, V: np.ndarray, pi_min: float, tau_min: float) -> Tuple[float, float]:
    tau_max = max(1e3 * float(np.max(bhat ** 2 + V)), 10.0 * tau_min)

    def profile(log_tau):
        tau = np.exp(log_tau)
        log_ratio = stats.norm.logpdf(bhat, scale=np.sqrt(tau + V)) - stats.norm.logpdf(bhat, scale=np.sqrt(V))
        pi = _best_pi(log_ratio, pi_min)
        return -two_group_loglik(bhat, V, pi, tau), pi

    grid = np.linspace(np.log(tau_min), np.log(tau_max), 61)
    values = [profile(g)[0] for g in grid]
    i = int(np.argmin(values))
    low, high = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    if high > low:
        refined = optimize.minimize_scalar(lambda g: profile(g)[0], bounds=(low, high), method="bounded",
                                           options={"xatol": 1e-6})
        best = refined.x if refined.fun <= values[i] else grid[i]
    else:
        best = grid[i]
    return profile(best)[1], float(np.exp(best))


def empirical_bayes(bhat: np.ndarray, V: np.ndarray, set_map: Sequence[int]) -> ShrinkageHyper:
    """Two-group marginal-likelihood estimates of (pi, tau) per predictor and regularization set."""
    bhat = np.atleast_2d(np.asarray(bhat, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    set_map = np.asarray(set_map, dtype=int)
    if bhat.shape != V.shape or bhat.shape[1] != set_map.size:
        raise ValidationError("bhat, V and set_map must agree on A x K", code="dimension_mismatch")
    if np.any(V <= 0):
        raise ValidationError("sampling variances must be positive", code="negative_variance")
    set_ids, set_index = np.unique(set_map, return_inverse=True)
    if set_ids.size == 0:
        raise ValidationError("no regularization sets", code="empty_set")
    n_pred, n_coef = bhat.shape
    pi = np.ones((n_pred, set_ids.size))
    tau = np.ones((n_pred, set_ids.size))
    pi_min = 1.0 / n_coef
    for a in range(n_pred):
        tau_min = 1e-8 * float(np.median(V[a]))
        for j in range(set_ids.size):
            members = set_index == j
            if not members.any():
                raise ValidationError(f"regularization set {set_ids[j]} is empty", code="empty_set")
            pi[a, j], tau[a, j] = _fit_two_group(bhat[a, members], V[a, members], pi_min, tau_min)
    logger.info(f"📊 Empirical Bayes: {n_pred} predictors x {set_ids.size} regularization sets")
    return ShrinkageHyper(pi=pi, tau=tau, set_index=set_index, set_ids=set_ids)


def no_shrinkage(n_pred: int, set_map: Sequence[int]) -> ShrinkageHyper:
    set_ids, set_index = np.unique(np.asarray(set_map, dtype=int), return_inverse=True)
    shape = (n_pred, set_ids.size)
    return ShrinkageHyper(np.ones(shape), np.full(shape, NO_SHRINKAGE_TAU), set_index, set_ids)


# ---------------------------------------------------------------------------
# Chain pieces


@dataclass
class ChainState:
    b: np.ndarray
    gamma: np.ndarray
    vc: np.ndarray
    s: float
    u: Dict[str, np.ndarray] = field(default_factory=dict)

    def dump(self) -> Dict[str, object]:
        return {
            "b": self.b.tolist(),
            "gamma": self.gamma.astype(int).tolist(),
            "vc": self.vc.tolist(),
            "s": float(self.s),
        }


@dataclass
class InverseGammaPrior:
    shape: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_starts(cls, starts: np.ndarray, shape: float = 2.0, factor: float = 3.0) -> "InverseGammaPrior":
        """Mode scale / (shape + 1) equals the start when factor = shape + 1."""
        starts = np.asarray(starts, dtype=float)
        return cls(np.full(starts.size, shape), factor * starts)

    def logpdf(self, h: int, value: float) -> float:
        return float(stats.invgamma.logpdf(value, self.shape[h], scale=self.scale[h]))


def inclusion_probability(bhat: float, V: float, pi: float, tau: float) -> float:
    """Posterior P(gamma = 1) for b ~ pi N(0, tau) + (1 - pi) delta_0 given bhat ~ N(b, V)."""
    if pi >= 1.0:
        return 1.0
    if pi <= 0.0:
        return 0.0
    zeta2 = bhat * bhat / V
    log_odds = np.log(pi) - np.log1p(-pi) - 0.5 * np.log1p(tau / V) + 0.5 * zeta2 / (1.0 + V / tau)
    return float(expit(log_odds))


def gibbs_fixed(
    Q: np.ndarray,
    state: ChainState,
    pi: np.ndarray,
    tau: np.ndarray,
    rng: np.random.Generator,
    prior_only: bool = False,
) -> None:
    """Spike-slab update of every b_a in place. Q = [X, y]' Sigma^{-1} [X, y]."""
    A = state.b.size
    QXX, QXy = Q[:A, :A], Q[:A, A]
    for a in range(A):
        if prior_only:
            include = rng.random() < pi[a]
            state.b[a] = rng.normal(0.0, np.sqrt(tau[a])) if include else 0.0
            state.gamma[a] = include
            continue
        qaa = QXX[a, a]
        if not qaa > 0:
            raise NumericalError(f"X_{a}' Sigma^-1 X_{a} is not positive", code="singular_sigma")
        V = 1.0 / qaa
        bhat = (QXy[a] - QXX[a] @ state.b + qaa * state.b[a]) * V
        include = rng.random() < inclusion_probability(bhat, V, pi[a], tau[a])
        if include:
            shrink = 1.0 / (1.0 + V / tau[a])
            state.b[a] = rng.normal(bhat * shrink, np.sqrt(V * shrink))
        else:
            state.b[a] = 0.0
        state.gamma[a] = include


def truncated_normal_draw(mean: float, sd: float, rng: np.random.Generator) -> float:
    """N(mean, sd^2) restricted to (0, inf)."""
    for _ in range(8):
        value = rng.normal(mean, sd)
        if value > 0.0:
            return float(value)
    return float(stats.truncnorm.rvs(-mean / sd, np.inf, loc=mean, scale=sd, random_state=rng))


def hastings_correction(current: float, proposal: float, sd: float) -> float:
    """log q(current | proposal) - log q(proposal | current) for the zero-truncated walk."""
    return float(log_ndtr(current / sd) - log_ndtr(proposal / sd))


@dataclass
class _Current:
    logdet: float
    Q: np.ndarray

    def loglik(self, b: np.ndarray) -> float:
        c = np.append(-b, 1.0)
        return -0.5 * (self.logdet + float(c @ self.Q @ c))


def _evaluate(model: MixedModel, vc: np.ndarray, s: float) -> _Current:
    ev = model.evaluate(vc, s)
    return _Current(ev.logdet, ev.quad())


def mh_variance(
    model: MixedModel,
    state: ChainState,
    prior: InverseGammaPrior,
    scales: np.ndarray,
    rng: np.random.Generator,
    current: Optional[_Current] = None,
    prior_only: bool = False,
) -> Tuple[np.ndarray, _Current]:
    """One MH update per variance component (random levels, then s). Returns accept flags."""
    theta = np.append(state.vc, state.s)
    if current is None:
        current = _evaluate(model, theta[:-1], theta[-1])
    current_ll = 0.0 if prior_only else current.loglik(state.b)
    accepted = np.zeros(theta.size, dtype=bool)
    for h in range(theta.size):
        sd = scales[h]
        proposal = truncated_normal_draw(theta[h], sd, rng)
        trial = theta.copy()
        trial[h] = proposal
        if prior_only:
            trial_ll, trial_state = 0.0, current
        else:
            trial_state = _evaluate(model, trial[:-1], trial[-1])
            trial_ll = trial_state.loglik(state.b)
        log_ratio = (
            trial_ll + prior.logpdf(h, proposal)
            - current_ll - prior.logpdf(h, theta[h])
            + hastings_correction(theta[h], proposal, sd)
        )
        if np.log(rng.random()) < log_ratio:
            theta = trial
            current_ll = trial_ll
            current = trial_state
            accepted[h] = True
    state.vc = theta[:-1]
    state.s = float(theta[-1])
    return accepted, current


class SplineSampler:
    """Complete-conditional draws of spline random effects, marginal over the other levels."""

    def __init__(self, y: np.ndarray, bundle: DesignBundle):
        self.bundle = bundle
        self.terms = []
        for info in bundle.spline_terms:
            Z_S = bundle.blocks[info.block].design
            cache = GramCache(bundle.z_matrix(exclude=[info.block]), np.column_stack([Z_S, bundle.X, y]))
            self.terms.append((info, Z_S.shape[1], cache))

    def conditional(self, term: int, b: np.ndarray, vc: np.ndarray, s: float) -> Tuple[np.ndarray, np.ndarray]:
        """Mean m and covariance V of u_S given (b, variances)."""
        info, width, cache = self.terms[term]
        q_s = float(vc[info.block])
        if q_s <= 0:
            return np.zeros(width), np.zeros((width, width))
        ev = cache.evaluate(self.bundle.column_variances(vc, exclude=[info.block]), s)
        Q = ev.quad()
        A = b.size
        ZZ = Q[:width, :width]
        Zr = Q[:width, width + A] - Q[:width, width:width + A] @ b
        precision = ZZ + np.eye(width) / q_s
        try:
            factor = linalg.cho_factor(precision, lower=True)
        except linalg.LinAlgError:
            raise NumericalError("spline conditional precision is singular", code="singular_sigma")
        V = linalg.cho_solve(factor, np.eye(width))
        return V @ Zr, V

    def draw(self, b: np.ndarray, vc: np.ndarray, s: float, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        out = {}
        for term, (info, width, _) in enumerate(self.terms):
            mean, cov = self.conditional(term, b, vc, s)
            if not cov.any():
                out[info.label] = mean
                continue
            root = linalg.cholesky(cov, lower=True)
            out[info.label] = mean + root @ rng.standard_normal(width)
        return out


def sample_spline(sampler: SplineSampler, state: ChainState, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return sampler.draw(state.b, state.vc, state.s, rng)


# ---------------------------------------------------------------------------
# Posteriors


@dataclass
class CoefficientPosterior:
    k: int
    fixed_names: List[str]
    vc_names: List[str]
    b: np.ndarray
    gamma: np.ndarray
    vc: np.ndarray
    s: np.ndarray
    u: Dict[str, np.ndarray]
    acceptance: np.ndarray
    n_stalls: int = 0
    kept_stalls: int = 0
    scales: Optional[np.ndarray] = None
    seconds: float = 0.0

    @property
    def n_draws(self) -> int:
        return self.b.shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Named scalar draw columns (fixed effects, variances, residual)."""
        out = {f"b[{name}]": self.b[:, a] for a, name in enumerate(self.fixed_names)}
        out.update({f"q[{name}]": self.vc[:, h] for h, name in enumerate(self.vc_names)})
        out["s"] = self.s
        return out

    def save(self, path: PathLike) -> None:
        meta = {
            "format_version": POSTERIOR_FORMAT_VERSION,
            "k": self.k,
            "fixed_names": self.fixed_names,
            "vc_names": self.vc_names,
            "acceptance": self.acceptance.tolist(),
            "n_stalls": self.n_stalls,
            "kept_stalls": self.kept_stalls,
            "scales": None if self.scales is None else self.scales.tolist(),
            "seconds": self.seconds,
            "spline_labels": list(self.u),
        }
        arrays = {f"u{i}": draws for i, draws in enumerate(self.u.values())}
        savez_atomic(
            path, meta=np.array(json.dumps(meta)), b=self.b, gamma=self.gamma, vc=self.vc, s=self.s, **arrays
        )

    @classmethod
    def load(cls, path: PathLike) -> Self:
        with np.load(Path(path), allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            if meta.get("format_version") != POSTERIOR_FORMAT_VERSION:
                raise ValidationError(f"unsupported posterior file {path}", code="bad_format")
            u = {label: archive[f"u{i}"] for i, label in enumerate(meta["spline_labels"])}
            return cls(
                k=int(meta["k"]),
                fixed_names=list(meta["fixed_names"]),
                vc_names=list(meta["vc_names"]),
                b=archive["b"],
                gamma=archive["gamma"],
                vc=archive["vc"],
                s=archive["s"],
                u=u,
                acceptance=np.asarray(meta["acceptance"]),
                n_stalls=int(meta["n_stalls"]),
                kept_stalls=int(meta.get("kept_stalls", 0)),
                scales=None if meta.get("scales") is None else np.asarray(meta["scales"]),
                seconds=float(meta.get("seconds", 0.0)),
            )


def chain_rng(master_seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(k,))))


def _starting_values(fit: LmmFit) -> np.ndarray:
    variances = fit.variances
    floor = max(1e-3 * float(variances.sum()), 1e-10)
    return np.maximum(variances, floor)


def run_chain(
    k: int,
    y: np.ndarray,
    bundle: DesignBundle,
    hyper: ShrinkageHyper,
    config: ChainConfig,
    start: Optional[LmmFit] = None,
) -> CoefficientPosterior:
    """Run one coefficient's chain; deterministic given (config.seed, k)."""
    started = time.monotonic()
    rng = chain_rng(config.seed, k)
    model = MixedModel.from_bundle(y, bundle)
    if start is None:
        start = fit_reml(y, bundle.X, [b.design for b in bundle.blocks], model=model)
    starts = _starting_values(start)
    prior = InverseGammaPrior.from_starts(starts, config.prior_shape, config.prior_scale_factor)
    se = start.vc_se if start.vc_se is not None else 0.5 * starts
    scales = config.proposal_scale * np.maximum(np.asarray(se, dtype=float), 1e-3 * starts)
    pi, tau = hyper.for_coefficient(k)
    if config.shrinkage == "none":
        pi, tau = np.ones_like(pi), np.full_like(tau, NO_SHRINKAGE_TAU)

    A, H = bundle.n_fixed, bundle.n_vc
    state = ChainState(
        b=np.array(start.beta_hat, dtype=float),
        gamma=np.ones(A, dtype=bool),
        vc=starts[:-1].copy(),
        s=float(starts[-1]),
    )
    spline = SplineSampler(y, bundle) if bundle.spline_terms else None
    G = config.n_saved
    b_draws = np.empty((G, A))
    gamma_draws = np.empty((G, A), dtype=bool)
    vc_draws = np.empty((G, H))
    s_draws = np.empty(G)
    u_draws = {info.label: np.empty((G, info.kit.dr.n_random)) for info in bundle.spline_terms}

    window_accepts = np.zeros(H + 1)
    kept_accepts = np.zeros(H + 1)
    rejections = np.zeros(H + 1, dtype=int)
    n_stalls = 0
    kept_stalls = 0
    current = None
    saved = 0
    try:
        for sweep in range(config.n_burn + config.n_keep):
            if current is None:
                current = _evaluate(model, state.vc, state.s)
            gibbs_fixed(current.Q, state, pi, tau, rng, config.prior_only)
            accepted, current = mh_variance(model, state, prior, scales, rng, current, config.prior_only)

            rejections = np.where(accepted, 0, rejections + 1)
            for h in np.flatnonzero(rejections >= config.stall_limit):
                rejections[h] = 0
                n_stalls += 1
                if sweep < config.n_burn:
                    scales[h] *= 0.5
                    logger.warning(f"⚠️ Chain {k}: {config.stall_limit} straight rejections for component {h}; halving its proposal scale")
                else:
                    kept_stalls += 1
                    logger.warning(f"⚠️ Chain {k}: {config.stall_limit} straight rejections for component {h} after burn-in; scale stays frozen")

            if sweep < config.n_burn:
                window_accepts += accepted
                if (sweep + 1) % ADAPT_WINDOW == 0:
                    rate = window_accepts / ADAPT_WINDOW
                    scales = np.where(rate < 0.5 * config.target_accept, scales * 0.5, scales)
                    scales = np.where(rate > min(1.5 * config.target_accept, 0.95), scales * 2.0, scales)
                    window_accepts[:] = 0
                continue

            kept_accepts += accepted
            if (sweep - config.n_burn + 1) % config.thin == 0 and saved < G:
                b_draws[saved] = state.b
                gamma_draws[saved] = state.gamma
                vc_draws[saved] = state.vc
                s_draws[saved] = state.s
                if spline is not None and config.spline_within_sweep:
                    for label, draw in sample_spline(spline, state, rng).items():
                        u_draws[label][saved] = draw
                saved += 1
    except NumericalError as e:
        raise ChainError(str(e), k=k, state=state.dump())

    if spline is not None and not config.spline_within_sweep:
        for g in range(G):
            draws = spline.draw(b_draws[g], vc_draws[g], s_draws[g], rng)
            for label, draw in draws.items():
                u_draws[label][g] = draw

    return CoefficientPosterior(
        k=k,
        fixed_names=list(bundle.fixed_names),
        vc_names=list(bundle.vc_names),
        b=b_draws,
        gamma=gamma_draws,
        vc=vc_draws,
        s=s_draws,
        u=u_draws,
        acceptance=kept_accepts / config.n_keep,
        n_stalls=n_stalls,
        kept_stalls=kept_stalls,
        scales=scales.copy(),
        seconds=time.monotonic() - started,
    )


@dataclass
class ChainBatch:
    posteriors: Dict[int, CoefficientPosterior] = field(default_factory=dict)
    errors: Dict[int, str] = field(default_factory=dict)

    @property
    def ordered(self) -> List[CoefficientPosterior]:
        return [self.posteriors[k] for k in sorted(self.posteriors)]


def _chain_task(args) -> Tuple[int, Optional[CoefficientPosterior], Optional[str]]:
    k, y, bundle, hyper, config, start = args
    try:
        return k, run_chain(k, y, bundle, hyper, config, start), None
    except FmmError as e:
        detail = f"{e}"
        if isinstance(e, ChainError):
            detail += f" | state={json.dumps(e.state)}"
        return k, None, detail


def run_all(
    coeffs: np.ndarray,
    bundle: DesignBundle,
    hyper: ShrinkageHyper,
    config: ChainConfig,
    *,
    starts: Optional[Sequence[Optional[LmmFit]]] = None,
    indices: Optional[Sequence[int]] = None,
    workers: int = 1,
    on_done: Optional[Callable[[CoefficientPosterior], None]] = None,
) -> ChainBatch:
    """Run chains for columns `indices` (default all) of the N x K coefficient matrix.

    Failures are collected per k; other chains keep running. Output does not depend on
    `workers` because every chain seeds itself from (config.seed, k).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 2 or coeffs.shape[0] != bundle.n_obs:
        raise ValidationError(f"coefficients are {coeffs.shape}, design has {bundle.n_obs} rows", code="dimension_mismatch")
    indices = list(range(coeffs.shape[1])) if indices is None else [int(k) for k in indices]
    batch = ChainBatch()
    if not indices:
        return batch
    tasks = [(k, coeffs[:, k], bundle, hyper, config, starts[k] if starts is not None else None) for k in indices]
    logger.info(f"🔄 Running {len(tasks)} chains on {workers} worker(s)")

    def collect(result):
        k, posterior, error = result
        if error is not None:
            batch.errors[k] = error
            logger.error(f"❌ Chain {k} failed: {error}")
            return
        batch.posteriors[k] = posterior
        if on_done is not None:
            on_done(posterior)
        done = len(batch.posteriors) + len(batch.errors)
        if done % max(1, len(tasks) // 10) == 0:
            logger.info(f"🔄 {done}/{len(tasks)} chains finished")

    if workers <= 1:
        for task in tasks:
            collect(_chain_task(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_chain_task, task) for task in tasks]
            for future in as_completed(futures):
                collect(future.result())
    logger.info(f"✅ Chains done: {len(batch.posteriors)} ok, {len(batch.errors)} failed")
    return batch
