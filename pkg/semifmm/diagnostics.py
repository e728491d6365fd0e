"""
Convergence diagnostics for kept MCMC draws.

Geweke z compares the means of the first and last quarter of a chain, each mean's
variance taken from an autoregressive estimate of the spectral density at zero.
ESS uses the initial positive sequence: autocorrelations are summed in adjacent pairs
up to the first nonpositive pair.
"""
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import fft, linalg, stats

from .config import logger
from .errors import ValidationError
from .mcmc import CoefficientPosterior

MIN_DRAWS = 200
MAX_AR_ORDER = 10
GROUPS = ("fixed", "nonparametric", "variance", "all")


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance at lags 0..n-1 via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    centered = x - x.mean()
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centered, size)
    return fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n


def spectral_density_zero(x: np.ndarray, max_order: int = MAX_AR_ORDER) -> float:
    """AR spectral density at frequency zero, order chosen by AIC (Yule-Walker fit)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    acov = autocovariance(x)[: max_order + 1]
    if acov[0] <= 0:
        return 0.0
    best_aic, best = n * np.log(acov[0]), acov[0]
    for order in range(1, min(max_order, n // 4) + 1):
        try:
            phi = linalg.solve_toeplitz(acov[:order], acov[1:order + 1])
        except linalg.LinAlgError:
            break
        sigma2 = acov[0] - float(phi @ acov[1:order + 1])
        if sigma2 <= 0:
            break
        aic = n * np.log(sigma2) + 2 * order
        if aic < best_aic:
            best_aic = aic
            best = sigma2 / max((1.0 - phi.sum()) ** 2, 1e-8)
    return float(best)


def geweke(x: np.ndarray, first: float = 0.25, last: float = 0.25) -> Tuple[float, float]:
    """(z, two-sided p). A constant chain gives (0, 1)."""
    x = np.asarray(x, dtype=float)
    if not 0 < first < 1 or not 0 < last < 1 or first + last > 1:
        raise ValidationError("Geweke windows must be fractions with first + last <= 1")
    n = x.size
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    if a.size < 2 or b.size < 2:
        raise ValidationError(f"chain of {n} draws is too short for Geweke windows", code="too_few_draws")
    var = spectral_density_zero(a) / a.size + spectral_density_zero(b) / b.size
    if var <= 0:
        return 0.0, 1.0
    z = (a.mean() - b.mean()) / np.sqrt(var)
    return float(z), float(2.0 * stats.norm.sf(abs(z)))


def ess(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    n = x.size
    acov = autocovariance(x)
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    tau = -1.0
    for m in range(0, n - 1, 2):
        pair = rho[m] + rho[m + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0 / n))


@dataclass
class ParameterDiagnostic:
    name: str
    group: str
    z: float
    p: float
    ess: float
    zero_variance: bool
    n_draws: int

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def _columns(posterior: CoefficientPosterior, spline_columns: Sequence[int]) -> Iterable[Tuple[str, str, np.ndarray]]:
    for a, name in enumerate(posterior.fixed_names):
        group = "nonparametric" if a in spline_columns else "fixed"
        yield f"b[{name}]", group, posterior.b[:, a]
    for h, name in enumerate(posterior.vc_names):
        yield f"q[{name}]", "variance", posterior.vc[:, h]
    yield "s", "variance", posterior.s
    for label, draws in posterior.u.items():
        for m in range(draws.shape[1]):
            yield f"u[{label}][{m}]", "nonparametric", draws[:, m]


def diagnose(posterior: CoefficientPosterior, spline_columns: Sequence[int] = ()) -> List[ParameterDiagnostic]:
    """Geweke z, p and ESS for every scalar parameter of one coefficient's posterior.

    `spline_columns` are fixed-effect columns that belong to nonparametric terms.
    """
    if posterior.n_draws < MIN_DRAWS:
        logger.warning(f"⚠️ Coefficient {posterior.k}: only {posterior.n_draws} draws (< {MIN_DRAWS}) for diagnostics")
    out = []
    for name, group, draws in _columns(posterior, set(spline_columns)):
        constant = bool(np.ptp(draws) == 0)
        z, p = geweke(draws)
        out.append(ParameterDiagnostic(
            name=name,
            group=group,
            z=z,
            p=p,
            ess=float(draws.size) if constant else ess(draws),
            zero_variance=constant,
            n_draws=int(draws.size),
        ))
    return out


@dataclass
class GroupSummary:
    group: str
    n_parameters: int
    n_zero_variance: int
    z_quantiles: Tuple[float, float, float]
    z_mean: float
    p_quantiles: Tuple[float, float, float]
    fraction_p_below_05: float
    median_ess: float
    acceptance: Dict[str, float]

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def summarize(
    diagnostics: Dict[int, List[ParameterDiagnostic]],
    posteriors: Dict[int, CoefficientPosterior],
) -> Dict[str, GroupSummary]:
    """Per-group summaries across coefficients; zero-variance chains are counted but not scored."""
    acceptance = _acceptance_summary(posteriors)
    summaries = {}
    for group in GROUPS:
        rows = [d for ds in diagnostics.values() for d in ds if group == "all" or d.group == group]
        live = [d for d in rows if not d.zero_variance]
        if not live:
            summaries[group] = GroupSummary(group, len(rows), len(rows), (0.0, 0.0, 0.0), 0.0, (1.0, 1.0, 1.0),
                                            0.0, float("nan"), acceptance if group in ("variance", "all") else {})
            continue
        z = np.array([d.z for d in live])
        p = np.array([d.p for d in live])
        summaries[group] = GroupSummary(
            group=group,
            n_parameters=len(rows),
            n_zero_variance=len(rows) - len(live),
            z_quantiles=tuple(float(v) for v in np.quantile(z, [0.025, 0.5, 0.975])),
            z_mean=float(z.mean()),
            p_quantiles=tuple(float(v) for v in np.quantile(p, [0.025, 0.5, 0.975])),
            fraction_p_below_05=float(np.mean(p < 0.05)),
            median_ess=float(np.median([d.ess for d in live])),
            acceptance=acceptance if group in ("variance", "all") else {},
        )
    return summaries


def _acceptance_summary(posteriors: Dict[int, CoefficientPosterior]) -> Dict[str, float]:
    if not posteriors:
        return {}
    any_posterior = next(iter(posteriors.values()))
    names = [f"q[{n}]" for n in any_posterior.vc_names] + ["s"]
    rates = np.array([p.acceptance for p in posteriors.values()])
    out = {}
    for i, name in enumerate(names):
        out[f"{name}:median"] = float(np.median(rates[:, i]))
        out[f"{name}:min"] = float(rates[:, i].min())
        out[f"{name}:max"] = float(rates[:, i].max())
    return out
