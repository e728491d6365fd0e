"""
Model selection by per-coefficient information criteria and energy-weighted voting.

For each candidate c and basis coefficient k the criterion is
-2 loglik_ck + penalty(n_par_ck), with n_par counting fixed effects, variance components
(residual included) and, optionally, the estimated DF of every nonparametric term. Each
coefficient votes for its argmin with weight w_k, giving P_c = sum_k w_k [c wins at k].
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .config import logger
from .design import DesignBundle, assemble
from .errors import FmmError, NumericalError, ValidationError
from .formula import ModelSpec, parse_formula
from .lmmfit import LOG2PI, LmmFit, effective_df_np, fit_reml

CRITERIA = ("aBIC", "aAIC")
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class CandidateModel:
    id: str
    spec: ModelSpec

    @classmethod
    def parse(cls, text: str, id: Optional[str] = None) -> "CandidateModel":
        spec = parse_formula(text)
        return cls(id or spec.to_formula(), spec)


def penalty(n_par: Union[float, np.ndarray], n_obs: int, criterion: str = "aBIC"):
    if criterion == "aBIC":
        return n_par * np.log(n_obs)
    if criterion == "aAIC":
        return 2.0 * n_par
    raise ValidationError(f"unknown criterion {criterion!r}")


def abic(fit: LmmFit, n_par: float, criterion: str = "aBIC") -> float:
    """-2 ML log-likelihood + penalty; non-converged fits are scored but flagged in the log."""
    if not fit.converged:
        logger.warning(f"⚠️ Scoring a non-converged fit ({fit.message})")
    return float(-2.0 * fit.loglik_ml + penalty(n_par, fit.n_obs, criterion))


def parameter_count(fit: LmmFit, bundle: DesignBundle, df_penalty: bool = True) -> float:
    n_par = float(bundle.n_fixed + bundle.n_vc + 1)
    if df_penalty:
        n_par += sum(effective_df_np(fit, bundle, t) for t in range(len(bundle.spline_terms)))
    return n_par


@dataclass
class CandidateFits:
    candidate: CandidateModel
    fits: List[Optional[LmmFit]]
    n_par: np.ndarray
    errors: Dict[int, str] = field(default_factory=dict)

    def scores(self, criterion: str) -> np.ndarray:
        out = np.full(len(self.fits), np.nan)
        for k, fit in enumerate(self.fits):
            if fit is not None:
                out[k] = -2.0 * fit.loglik_ml + penalty(self.n_par[k], fit.n_obs, criterion)
        return out


def _fit_column(args) -> Tuple[int, Optional[LmmFit], float, Optional[str]]:
    k, y, bundle, df_penalty = args
    try:
        fit = fit_reml(y, bundle.X, [b.design for b in bundle.blocks], method="ml", with_se=False)
        return k, fit, parameter_count(fit, bundle, df_penalty), None
    except FmmError as e:
        return k, None, np.nan, str(e)


def fit_candidate(
    coeffs: np.ndarray,
    frame,
    candidate: CandidateModel,
    *,
    df_penalty: bool = True,
    workers: int = 1,
) -> CandidateFits:
    """ML fits of one candidate for every coefficient column."""
    coeffs = np.asarray(coeffs, dtype=float)
    bundle = assemble(frame, candidate.spec)
    tasks = [(k, coeffs[:, k], bundle, df_penalty) for k in range(coeffs.shape[1])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_column, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_fit_column(t) for t in tasks]
    fits: List[Optional[LmmFit]] = [None] * len(tasks)
    n_par = np.full(len(tasks), np.nan)
    errors = {}
    for k, fit, count, error in results:
        fits[k], n_par[k] = fit, count
        if error is not None:
            errors[k] = error
            logger.warning(f"⚠️ {candidate.id}: coefficient {k} fit failed ({error}); excluded from the vote")
    return CandidateFits(candidate, fits, n_par, errors)


@dataclass
class SelectionReport:
    stage: str
    criterion: str
    candidates: List[str]
    P: Dict[str, float]
    winners: List[Optional[str]]
    scores: np.ndarray
    n_par: np.ndarray
    excluded: List[int] = field(default_factory=list)
    details: Dict[str, object] = field(default_factory=dict)

    @property
    def best(self) -> str:
        return max(self.candidates, key=lambda c: (self.P[c], -self.candidates.index(c)))

    def to_dict(self) -> Dict[str, object]:
        return {
            "stage": self.stage,
            "criterion": self.criterion,
            "candidates": self.candidates,
            "P": self.P,
            "best": self.best,
            "winners": self.winners,
            "mean_n_par": {c: float(np.nanmean(self.n_par[i])) if np.isfinite(self.n_par[i]).any() else None
                           for i, c in enumerate(self.candidates)},
            "excluded": self.excluded,
            "details": self.details,
        }


def vote(
    candidates: Sequence[str],
    scores: np.ndarray,
    weights: np.ndarray,
    n_par: Optional[np.ndarray] = None,
    *,
    stage: str = "fixed",
    criterion: str = "aBIC",
) -> SelectionReport:
    """Energy-weighted vote over a C x K score table (NaN marks a failed fit).

    Ties at the argmin go to the smaller n_par, then the lexicographically smaller id.
    Coefficients with no finite score are dropped and the weights renormalized.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValidationError("no candidate models to vote on", code="empty_candidates")
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    weights = np.asarray(weights, dtype=float)
    C, K = scores.shape
    if C != len(candidates) or weights.shape != (K,):
        raise ValidationError(f"score table {scores.shape} does not match {len(candidates)} candidates / {weights.size} weights",
                              code="dimension_mismatch")
    n_par = np.zeros((C, K)) if n_par is None else np.atleast_2d(np.asarray(n_par, dtype=float))
    tally = np.zeros(C)
    winners: List[Optional[str]] = []
    excluded = []
    for k in range(K):
        column = scores[:, k]
        finite = np.isfinite(column)
        if not finite.any():
            winners.append(None)
            excluded.append(k)
            continue
        low = column[finite].min()
        tied = [c for c in range(C) if finite[c] and np.isclose(column[c], low, rtol=_TIE_RTOL, atol=1e-9)]
        best = min(tied, key=lambda c: (np.nan_to_num(n_par[c, k], nan=np.inf), candidates[c]))
        tally[best] += weights[k]
        winners.append(candidates[best])
    if excluded:
        logger.warning(f"⚠️ {len(excluded)} coefficient(s) had no successful fit and were left out of the vote")
    total = tally.sum()
    if total <= 0:
        raise NumericalError("vote weights sum to zero after exclusions", code="zero_weights")
    P = tally / total
    return SelectionReport(
        stage=stage,
        criterion=criterion,
        candidates=candidates,
        P={c: float(p) for c, p in zip(candidates, P)},
        winners=winners,
        scores=scores,
        n_par=n_par,
        excluded=excluded,
    )


def _score_candidates(coeffs, frame, candidates: Sequence[CandidateModel], weights, *, stage, criterion, df_penalty, workers):
    fitted = [fit_candidate(coeffs, frame, c, df_penalty=df_penalty, workers=workers) for c in candidates]
    scores = np.vstack([f.scores(criterion) for f in fitted])
    n_par = np.vstack([f.n_par for f in fitted])
    report = vote([c.id for c in candidates], scores, weights, n_par, stage=stage, criterion=criterion)
    logger.info(f"📊 {stage} selection ({criterion}): best {report.best} with P={report.P[report.best]:.3f}")
    return report


def random_structure(text: str) -> ModelSpec:
    """Random levels of a candidate written as e.g. '(1 | eye) + (1 | subject)'; '' means none."""
    text = (text or "").strip()
    if not text:
        return ModelSpec()
    spec = parse_formula(f"value ~ 1 + {text}")
    if spec.fixed_terms:
        raise ValidationError(f"random candidate {text!r} contains fixed terms")
    return spec


def _combine(fixed: ModelSpec, random: ModelSpec) -> ModelSpec:
    return fixed.with_random(random.random_levels)


def _random_label(random: ModelSpec) -> str:
    return " + ".join(level.label() for level in random.random_levels) or "none"


@dataclass
class TwoStepResult:
    best_fixed: str
    best_random: str
    reports: List[SelectionReport]

    def to_dict(self) -> Dict[str, object]:
        return {
            "best_fixed": self.best_fixed,
            "best_random": self.best_random,
            "reports": [r.to_dict() for r in self.reports],
        }


def _richest(frame, fixed: ModelSpec, randoms: Sequence[ModelSpec]) -> ModelSpec:
    sizes = [assemble(frame, _combine(fixed, r)).n_vc for r in randoms]
    return randoms[int(np.argmax(sizes))]


def two_step_select(
    fixed_candidates: Sequence[str],
    random_candidates: Sequence[str],
    frame,
    coeffs: np.ndarray,
    weights: np.ndarray,
    *,
    criterion: str = "aBIC",
    df_penalty: bool = True,
    workers: int = 1,
) -> TwoStepResult:
    """Fixed structure first under the richest random structure, then random given the winner."""
    fixed_specs = {text: parse_formula(text) for text in fixed_candidates}
    random_specs = {text: random_structure(text) for text in random_candidates}
    if not fixed_specs or not random_specs:
        raise ValidationError("two-step selection needs fixed and random candidates", code="empty_candidates")
    first_fixed = next(iter(fixed_specs.values()))
    baseline = _richest(frame, first_fixed, list(random_specs.values()))
    logger.info(f"🔧 Stage 1 baseline random structure: {_random_label(baseline)}")

    stage1 = [CandidateModel(text, _combine(spec, baseline)) for text, spec in fixed_specs.items()]
    fixed_report = _score_candidates(coeffs, frame, stage1, weights, stage="fixed", criterion=criterion,
                                     df_penalty=df_penalty, workers=workers)
    fixed_report.details["baseline_random"] = _random_label(baseline)
    best_fixed = fixed_specs[fixed_report.best]

    stage2 = [CandidateModel(text or "none", _combine(best_fixed, spec)) for text, spec in random_specs.items()]
    random_report = _score_candidates(coeffs, frame, stage2, weights, stage="random", criterion=criterion,
                                      df_penalty=df_penalty, workers=workers)
    random_report.details["fixed"] = fixed_report.best
    return TwoStepResult(fixed_report.best, random_report.best, [fixed_report, random_report])


def joint_select(
    fixed_candidates: Sequence[str],
    random_candidates: Sequence[str],
    frame,
    coeffs: np.ndarray,
    weights: np.ndarray,
    *,
    criterion: str = "aBIC",
    df_penalty: bool = True,
    workers: int = 1,
) -> SelectionReport:
    """One vote over every fixed x random combination."""
    candidates = []
    for fixed_text in fixed_candidates:
        fixed = parse_formula(fixed_text)
        for random_text in random_candidates:
            random = random_structure(random_text)
            candidates.append(CandidateModel(f"{fixed_text} | {_random_label(random)}", _combine(fixed, random)))
    return _score_candidates(coeffs, frame, candidates, weights, stage="joint", criterion=criterion,
                             df_penalty=df_penalty, workers=workers)


# ---------------------------------------------------------------------------
# Common versus coefficient-varying smoothness


def _whitener(Z: np.ndarray, lam: float) -> Tuple[np.ndarray, float]:
    """(Z Z' + lam I)^{-1/2} and log|Z Z' + lam I|."""
    M = Z @ Z.T + lam * np.eye(Z.shape[0])
    values, vectors = linalg.eigh(M)
    if values.min() <= 0:
        raise NumericalError(f"whitening matrix is not positive definite at lambda={lam}", code="non_pd_whitening")
    return (vectors / np.sqrt(values)) @ vectors.T, float(np.sum(np.log(values)))


def common_lambda_loglik(y: np.ndarray, X: np.ndarray, Z: np.ndarray, lam: float) -> np.ndarray:
    """ML log-likelihood of each column of y under N(X b, sigma^2 (Z Z' + lam I)), sigma^2 profiled."""
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T
    root, logdet = _whitener(Z, lam)
    Xw, yw = root @ X, root @ y
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    rss = np.sum((yw - Xw @ beta) ** 2, axis=0)
    n = y.shape[0]
    sigma2 = np.maximum(rss / n, 1e-300)
    return -0.5 * (n * LOG2PI + n * np.log(sigma2) + logdet + n)


def smoothness_compare(
    coeffs: np.ndarray,
    frame,
    formula: str,
    lambda_grid: Sequence[float],
    weights: np.ndarray,
    *,
    criterion: str = "aBIC",
) -> SelectionReport:
    """Vote 'varying' (lambda_k estimated per coefficient) against 'common' (one lambda for all k).

    The model must have exactly one random level, a spline term. For each lambda on the grid
    the common model is the whitened regression; the reported vote uses the grid value with
    the largest weighted log-likelihood, and per-lambda P(varying) goes in `details`.
    """
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    if lambda_grid.size == 0 or np.any(lambda_grid <= 0):
        raise ValidationError("lambda grid must be nonempty and positive", code="bad_lambda_grid")
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float).T).T
    weights = np.asarray(weights, dtype=float)
    bundle = assemble(frame, formula)
    if bundle.n_vc != 1 or not bundle.spline_terms:
        raise ValidationError("smoothness comparison needs exactly one random level, a spline term",
                              code="bad_smoothness_model")
    Z = bundle.blocks[0].design
    K = coeffs.shape[1]
    n = bundle.n_obs

    varying = fit_candidate(coeffs, frame, CandidateModel("varying", bundle.spec), df_penalty=False)
    varying_scores = varying.scores(criterion)
    common_npar = float(bundle.n_fixed + 1)

    per_lambda = {}
    best = None
    for lam in lambda_grid:
        loglik = common_lambda_loglik(coeffs, bundle.X, Z, lam)
        common_scores = -2.0 * loglik + penalty(common_npar, n, criterion)
        report = vote(
            ["varying", "common"],
            np.vstack([varying_scores, common_scores]),
            weights,
            np.vstack([varying.n_par, np.full(K, common_npar)]),
            stage="smoothness",
            criterion=criterion,
        )
        per_lambda[float(lam)] = report.P["varying"]
        total = float(weights @ loglik)
        if best is None or total > best[0]:
            best = (total, float(lam), report)
    _, lam_star, report = best
    report.details = {"lambda": lam_star, "P_varying_by_lambda": per_lambda}
    logger.info(f"📊 Smoothness comparison: P(varying)={report.P['varying']:.3f} at common lambda={lam_star:.4g}")
    return report


def render_table(report: SelectionReport) -> str:
    """Plain-text table: one row per candidate with mean n_par, coefficients won and P."""
    wins = {c: sum(1 for w in report.winners if w == c) for c in report.candidates}
    width = max(len("model"), *(len(c) for c in report.candidates))
    header = f"{'model':<{width}}  {'n_par':>7}  {'wins':>5}  {'P':>6}"
    lines = [f"{report.stage} selection ({report.criterion})", header, "-" * len(header)]
    for i, c in enumerate(report.candidates):
        counts = report.n_par[i][np.isfinite(report.n_par[i])]
        mean_npar = f"{counts.mean():7.2f}" if counts.size else f"{'-':>7}"
        marker = " *" if c == report.best else ""
        lines.append(f"{c:<{width}}  {mean_npar}  {wins[c]:>5}  {report.P[c]:6.3f}{marker}")
    if report.excluded:
        lines.append(f"({len(report.excluded)} coefficient(s) excluded after failed fits)")
    return "\n".join(lines)
