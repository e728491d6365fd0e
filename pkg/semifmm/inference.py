"""
Data-space posterior summaries.

Quantities are built per draw in basis space and mapped back with Psi (linear, so the
order of synthesis and any other linear step commutes). Bands: pointwise per-location
quantiles, and joint bands from the quantile of the maximum standardized deviation.
"""
import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .basis import BasisSystem, induced_covariance
from .config import logger
from .dataset import SurfaceGrid
from .design import DesignBundle, SerialBasis, serial_covariance
from .errors import NumericalError, ValidationError
from .mcmc import CoefficientPosterior
from .runconfig import AUC_RANGE, DEFAULT_AGES
from .splinekit import df_from_gram
from .utils import PathLike, write_text_atomic
from .woodbury import GramCache

MIN_BAND_DRAWS = 100


@dataclass
class PosteriorSurface:
    """Draws (G x ...) of one quantity; `axes` names the trailing dimensions."""

    label: str
    draws: np.ndarray
    axes: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)


@dataclass
class StackedPosterior:
    """Kept draws of all coefficients aligned by draw index."""

    b: np.ndarray
    vc: np.ndarray
    s: np.ndarray
    u: Dict[str, np.ndarray]
    fixed_names: List[str]
    vc_names: List[str]

    @property
    def n_draws(self) -> int:
        return self.b.shape[0]

    @property
    def K(self) -> int:
        return self.b.shape[1]

    def fixed(self, name: str) -> np.ndarray:
        """G x K draws of one fixed-effect column."""
        try:
            return self.b[:, :, self.fixed_names.index(name)]
        except ValueError:
            raise ValidationError(f"no fixed effect named {name!r}", code="unknown_term")

    def variance(self, name: str) -> np.ndarray:
        if name == "s":
            return self.s
        try:
            return self.vc[:, :, self.vc_names.index(name)]
        except ValueError:
            raise ValidationError(f"no variance component named {name!r}", code="unknown_term")


def stack_posteriors(posteriors: Sequence[CoefficientPosterior]) -> StackedPosterior:
    """Stack per-coefficient posteriors ordered by k; all must share draw count and names."""
    if not posteriors:
        raise ValidationError("no posteriors to stack", code="empty_posterior")
    first = posteriors[0]
    for p in posteriors:
        if p.n_draws != first.n_draws or p.fixed_names != first.fixed_names or p.vc_names != first.vc_names:
            raise ValidationError(f"posterior for coefficient {p.k} is not aligned with coefficient {first.k}",
                                  code="dimension_mismatch")
    return StackedPosterior(
        b=np.stack([p.b for p in posteriors], axis=1),
        vc=np.stack([p.vc for p in posteriors], axis=1),
        s=np.stack([p.s for p in posteriors], axis=1),
        u={label: np.stack([p.u[label] for p in posteriors], axis=1) for label in first.u},
        fixed_names=list(first.fixed_names),
        vc_names=list(first.vc_names),
    )


def _psi_columns(basis: BasisSystem, targets: Optional[Sequence[int]]) -> np.ndarray:
    if targets is None:
        return basis.psi
    targets = np.asarray(targets, dtype=int)
    if targets.size and (targets.min() < 0 or targets.max() >= basis.T):
        raise ValidationError("target locations outside the grid", code="out_of_range")
    return basis.psi[:, targets]


def back_project(
    coeff_draws: np.ndarray,
    basis: BasisSystem,
    targets: Optional[Sequence[int]] = None,
    label: str = "surface",
) -> PosteriorSurface:
    """Draw g at location t is sum_k draws[g, ..., k] psi_k(t)."""
    coeff_draws = np.asarray(coeff_draws, dtype=float)
    if coeff_draws.shape[-1] != basis.K:
        raise ValidationError(f"draws have {coeff_draws.shape[-1]} coefficients, basis has {basis.K}",
                              code="dimension_mismatch")
    psi = _psi_columns(basis, targets)
    axes = {"location": np.arange(basis.T) if targets is None else np.asarray(targets, dtype=int)}
    return PosteriorSurface(label, coeff_draws @ psi, axes)


def ages_in_range(ages: Sequence[float], bundle: DesignBundle, covariate: str = "age") -> np.ndarray:
    """Keep the ages inside the spline range of `covariate`; the rest are dropped with a warning."""
    ages = np.asarray(ages, dtype=float)
    bounds = bundle.covariate_range(covariate)
    if bounds is None:
        return ages
    inside = (ages >= bounds[0]) & (ages <= bounds[1])
    if not inside.all():
        logger.warning(
            f"⚠️ Dropping {int((~inside).sum())} of {ages.size} {covariate} value(s) outside the "
            f"observed range [{bounds[0]:g}, {bounds[1]:g}]"
        )
    return ages[inside]


def _spline_coefficients(stacked: StackedPosterior, bundle: DesignBundle, term: int, ages: np.ndarray, derivative: bool):
    """G x n_ages x K basis-space draws of f(x) (or df/dx) for spline term `term`."""
    info = bundle.spline_terms[term]
    lin = stacked.b[:, :, info.fixed_column]
    if info.label not in stacked.u:
        raise ValidationError(f"no spline draws for {info.label}", code="missing_spline_draws")
    u = stacked.u[info.label]
    if derivative:
        d_lin, d_z = info.kit.derivative(ages)
        return lin[:, None, :] * d_lin[None, :, :] + np.einsum("xm,gkm->gxk", d_z, u)
    observed = bundle.covariates[info.covariate]
    z = info.kit.z_design(ages) - info.kit.z_design(observed).mean(axis=0)
    linear = (ages - info.center)[None, :, None] * lin[:, None, :]
    return linear + np.einsum("xm,gkm->gxk", z, u)


def np_surface(
    stacked: StackedPosterior,
    bundle: DesignBundle,
    basis: BasisSystem,
    *,
    term: int = 0,
    ages: Sequence[float] = DEFAULT_AGES,
    targets: Optional[Sequence[int]] = None,
) -> PosteriorSurface:
    """f(x, t) on an age grid, centered to average zero over the observed covariate values."""
    ages = np.asarray(ages, dtype=float)
    coefficients = _spline_coefficients(stacked, bundle, term, ages, derivative=False)
    surface = back_project(coefficients, basis, targets, label=f"f[{bundle.spline_terms[term].label}]")
    surface.axes = {"age": ages, **surface.axes}
    return surface


def auc_derivative(
    stacked: StackedPosterior,
    bundle: DesignBundle,
    basis: BasisSystem,
    *,
    term: int = 0,
    ages: Sequence[float] = DEFAULT_AGES,
    targets: Optional[Sequence[int]] = None,
) -> PosteriorSurface:
    """d AUC / d age = beta(t) + dZ_B(x)/dx u_S(t); there is no serial x age term."""
    ages = np.asarray(ages, dtype=float)
    coefficients = _spline_coefficients(stacked, bundle, term, ages, derivative=True)
    surface = back_project(coefficients, basis, targets, label="dAUC/dage")
    surface.axes = {"age": ages, **surface.axes}
    return surface


def serial_integrals(serial: SerialBasis, low: float = AUC_RANGE[0], high: float = AUC_RANGE[1]) -> np.ndarray:
    """int_low^high G_d(p) dp for every non-intercept column."""
    if not 0 < low < high:
        raise ValidationError(f"serial integration range ({low}, {high}) must be positive and increasing",
                              code="bad_range")
    n_cols = serial.slope_columns([low]).shape[1]
    out = np.empty(n_cols)
    for d in range(n_cols):
        value, _ = integrate.quad(lambda p: float(serial.slope_columns([p])[0, d]), low, high,
                                  epsabs=1e-13, epsrel=1e-13, limit=200)
        out[d] = value
    return out


def auc(
    f: PosteriorSurface,
    slopes: Sequence[PosteriorSurface],
    serial: SerialBasis,
    low: float = AUC_RANGE[0],
    high: float = AUC_RANGE[1],
) -> PosteriorSurface:
    """AUC(x, t) = f(x, t) + int (B_1(t) G_1(p) + B_2(t) G_2(p)) dp, per draw.

    `slopes` are the data-space draws of B_1, B_2 (G x locations); f is G x ages x locations.
    """
    weights = serial_integrals(serial, low, high)
    if len(slopes) != weights.size:
        raise ValidationError(f"expected {weights.size} serial slope surfaces, got {len(slopes)}",
                              code="dimension_mismatch")
    integral = sum(w * s.draws for w, s in zip(weights, slopes))
    draws = f.draws + (integral[:, None, ...] if f.draws.ndim == integral.ndim + 1 else integral)
    return PosteriorSurface("AUC", draws, dict(f.axes))


def serial_mean_surface(
    stacked: StackedPosterior,
    bundle: DesignBundle,
    basis: BasisSystem,
    serial_name: str,
    levels: Sequence[float],
    *,
    ages: Sequence[float] = DEFAULT_AGES,
    targets: Optional[Sequence[int]] = None,
) -> PosteriorSurface:
    """mu(x, p, t) = B_0(t) + sum_d B_d(t) G_d(p) + f(x, t) for every p in `levels` (G x p x ages x t)."""
    ages = np.asarray(ages, dtype=float)
    levels = np.asarray(levels, dtype=float)
    serial = bundle.serial_bases.get(serial_name)
    if serial is None:
        raise ValidationError(f"model has no serial term for {serial_name!r}", code="unknown_term")
    G, K = stacked.n_draws, stacked.K
    base = stacked.fixed("(Intercept)") if "(Intercept)" in stacked.fixed_names else np.zeros((G, K))
    label = f"hyper({serial_name})"
    slope_names = [f"{label}[{n}]" for n in serial.names if n != "G0"]
    columns = serial.slope_columns(levels)
    serial_part = np.einsum("pd,gkd->gpk", columns, np.stack([stacked.fixed(n) for n in slope_names], axis=-1))
    f = _spline_coefficients(stacked, bundle, 0, ages, derivative=False) if bundle.spline_terms else np.zeros((G, ages.size, K))
    coefficients = base[:, None, None, :] + serial_part[:, :, None, :] + f[:, None, :, :]
    surface = back_project(coefficients, basis, targets, label="mean")
    surface.axes = {serial_name: levels, "age": ages, **surface.axes}
    return surface


# ---------------------------------------------------------------------------
# Bands


@dataclass
class BandSummary:
    mean: np.ndarray
    sd: np.ndarray
    pw_lo: np.ndarray
    pw_hi: np.ndarray
    joint_lo: np.ndarray
    joint_hi: np.ndarray
    alpha: float
    critical: float
    zero_sd: np.ndarray

    def covers(self, truth: np.ndarray) -> np.ndarray:
        return (truth >= self.joint_lo) & (truth <= self.joint_hi)


def joint_band(surface: PosteriorSurface, alpha: float = 0.05) -> BandSummary:
    """Pointwise and joint bands over all trailing axes of the surface."""
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    draws = surface.draws.reshape(surface.n_draws, -1)
    G = draws.shape[0]
    if G < 2:
        raise ValidationError("bands need at least two draws", code="too_few_draws")
    if G < MIN_BAND_DRAWS:
        logger.warning(f"⚠️ {surface.label}: joint band from only {G} draws")
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1)
    zero = ~(sd > 1e-14 * np.maximum(np.abs(mean), 1.0))
    if zero.any():
        logger.warning(f"⚠️ {surface.label}: {int(zero.sum())} point(s) with zero posterior sd; band collapses there")
    pw_lo, pw_hi = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
    if zero.all():
        critical = 0.0
    else:
        standardized = np.abs(draws[:, ~zero] - mean[~zero]) / sd[~zero]
        critical = float(np.quantile(standardized.max(axis=1), 1.0 - alpha))
    half = np.where(zero, 0.0, critical * sd)
    pw_lo = np.where(zero, mean, pw_lo)
    pw_hi = np.where(zero, mean, pw_hi)
    joint_lo = np.minimum(mean - half, pw_lo)
    joint_hi = np.maximum(mean + half, pw_hi)
    shape = surface.draws.shape[1:]
    return BandSummary(
        mean=mean.reshape(shape),
        sd=sd.reshape(shape),
        pw_lo=pw_lo.reshape(shape),
        pw_hi=pw_hi.reshape(shape),
        joint_lo=joint_lo.reshape(shape),
        joint_hi=joint_hi.reshape(shape),
        alpha=alpha,
        critical=critical,
        zero_sd=zero.reshape(shape),
    )


def stack_bands(bands: Sequence[BandSummary]) -> BandSummary:
    """Bands computed slice by slice, stacked on a new leading axis; critical is the largest."""
    if not bands:
        raise ValidationError("no bands to stack", code="empty_posterior")
    fields = ("mean", "sd", "pw_lo", "pw_hi", "joint_lo", "joint_hi", "zero_sd")
    stacked = {name: np.stack([np.asarray(getattr(b, name)) for b in bands]) for name in fields}
    return BandSummary(alpha=bands[0].alpha, critical=max(b.critical for b in bands), **stacked)


# ---------------------------------------------------------------------------
# Degrees of freedom and induced covariance


def data_space_variances(stacked: StackedPosterior, basis: BasisSystem, targets: Optional[Sequence[int]] = None) -> Dict[str, np.ndarray]:
    """G x locations induced variance of every random level and of the residual."""
    psi2 = _psi_columns(basis, targets) ** 2
    out = {name: stacked.vc[:, :, h] @ psi2 for h, name in enumerate(stacked.vc_names)}
    out["s"] = stacked.s @ psi2
    return out


def df_map(
    variances: Dict[str, np.ndarray],
    bundle: DesignBundle,
    *,
    term: int = 0,
) -> PosteriorSurface:
    """DF(t) per draw from data-space variances (G x P each), lambda(t) = s(t) / q_S(t).

    W is s(t) times the inverse covariance of the other random levels plus residual.
    """
    info = bundle.spline_terms[term]
    omega = info.kit.dr.omega
    B = bundle.spline_basis(term)
    q_s = variances[bundle.vc_names[info.block]]
    s = variances["s"]
    others = [h for h in range(bundle.n_vc) if h != info.block]
    out = np.full(q_s.shape, 2.0)
    if not others:
        gram = B.T @ B
        for g, t in zip(*np.nonzero(q_s > 0)):
            out[g, t] = df_from_gram(gram, omega, s[g, t] / q_s[g, t])
    else:
        cache = GramCache(bundle.z_matrix(exclude=[info.block]), B)
        other_names = [bundle.vc_names[h] for h in others]
        for g, t in zip(*np.nonzero(q_s > 0)):
            vc = np.zeros(bundle.n_vc)
            for h, name in zip(others, other_names):
                vc[h] = variances[name][g, t]
            col = bundle.column_variances(vc, exclude=[info.block])
            gram = s[g, t] * cache.evaluate(col, s[g, t]).quad()
            out[g, t] = df_from_gram(gram, omega, s[g, t] / q_s[g, t])
    return PosteriorSurface(f"DF[{info.label}]", np.clip(out, 2.0, info.kit.sdef.n_basis))


def induced_correlation_maps(
    variances: Dict[str, np.ndarray],
    basis: BasisSystem,
    reference: int,
) -> Dict[str, np.ndarray]:
    """Correlation between `reference` and every location, per random level and residual.

    `variances` maps a level name to its K posterior-mean basis-space variances.
    """
    if not 0 <= reference < basis.T:
        raise ValidationError(f"reference location {reference} outside the grid", code="out_of_range")
    out = {}
    for name, v in variances.items():
        v = np.asarray(v, dtype=float)
        cov = induced_covariance(v, basis, [reference]).covariance[0]
        var = v @ basis.psi ** 2
        scale = np.sqrt(var[reference] * var)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[name] = np.where(scale > 0, cov / scale, 0.0)
    return out


def serial_correlation(
    level_variances: Dict[str, float],
    bundle: DesignBundle,
    serial_name: str,
    levels: Sequence[float],
) -> np.ndarray:
    """Within-unit correlation across serial levels at one location.

    `level_variances` holds the data-space variance of each random level and "s". Blocks
    named "<group>:G1", "<group>:G2" use the serial basis; intercept blocks add a constant.
    """
    serial = bundle.serial_bases.get(serial_name)
    if serial is None:
        raise ValidationError(f"model has no serial term for {serial_name!r}", code="unknown_term")
    levels = np.asarray(levels, dtype=float)
    q = np.zeros(len(serial.names))
    constant = 0.0
    for name in bundle.vc_names:
        if name.startswith("spline:"):
            continue
        short = name.split(":", 1)[1]
        value = float(level_variances.get(name, 0.0))
        if short == "(Intercept)":
            if "G0" in serial.names:
                q[serial.names.index("G0")] += value
            else:
                constant += value
        elif short in serial.names:
            q[serial.names.index(short)] += value
    cov = serial_covariance(serial, q, levels, levels) + constant + float(level_variances.get("s", 0.0)) * np.eye(levels.size)
    diag = np.sqrt(np.diag(cov))
    if np.any(diag <= 0):
        raise NumericalError("serial covariance has a zero diagonal", code="degenerate")
    return cov / np.outer(diag, diag)


# ---------------------------------------------------------------------------
# Regional aggregation


@dataclass(frozen=True)
class Region:
    """kind: 'band' (theta range, all phi), 'circumferential' (phi average per theta row) or 'custom'."""

    kind: str
    theta: Tuple[float, float] = (0.0, 0.0)
    weights: Optional[Tuple[float, ...]] = None
    name: str = ""


PERIPAPILLARY = Region("band", (9.0, 17.0), name="PP")
MIDPERIPHERAL = Region("band", (17.0, 24.0), name="MP")


def region_weights(grid: SurfaceGrid, region: Region, area: bool = True) -> np.ndarray:
    """T x m weight matrix (columns sum to 1) so aggregate = draws @ W."""
    theta = grid.theta()
    row_weight = np.sin(np.deg2rad(theta)) if area else np.ones_like(theta)
    if region.kind == "band":
        lo, hi = region.theta
        inside = (theta >= lo - 1e-9) & (theta <= hi + 1e-9)
        if not inside.any():
            raise ValidationError(f"region {region.name or region.theta} contains no grid rows", code="empty_region")
        w = np.repeat(np.where(inside, row_weight, 0.0), grid.n_circumferential)
        return (w / w.sum())[:, None]
    if region.kind == "circumferential":
        W = np.zeros((grid.size, grid.n_meridional))
        for i in range(grid.n_meridional):
            W[i * grid.n_circumferential:(i + 1) * grid.n_circumferential, i] = 1.0 / grid.n_circumferential
        return W
    if region.kind == "custom":
        w = np.asarray(region.weights, dtype=float)
        if w.shape != (grid.size,) or np.any(w < 0) or not w.sum() > 0:
            raise ValidationError("custom region weights must be nonnegative, one per grid point, not all zero",
                                  code="empty_region")
        return (w / w.sum())[:, None]
    raise ValidationError(f"unknown region kind {region.kind!r}")


def aggregate(surface: PosteriorSurface, grid: SurfaceGrid, region: Region, area: bool = True) -> PosteriorSurface:
    """Area-weighted regional means per draw; surface must span the full grid on its last axis."""
    if surface.draws.shape[-1] != grid.size:
        raise ValidationError("aggregation needs draws over the full grid", code="dimension_mismatch")
    W = region_weights(grid, region, area)
    draws = surface.draws @ W
    axes = {k: v for k, v in surface.axes.items() if k != "location"}
    if region.kind == "circumferential":
        axes["theta"] = grid.theta()
    else:
        draws = draws[..., 0]
    return PosteriorSurface(f"{surface.label}@{region.name or region.kind}", draws, axes)


# ---------------------------------------------------------------------------
# Export


def band_rows(
    band: BandSummary,
    grid: Optional[SurfaceGrid] = None,
    locations: Optional[np.ndarray] = None,
    slice_labels: Optional[Sequence[Dict[str, float]]] = None,
):
    mean = np.atleast_1d(band.mean)
    if locations is None:
        locations = np.arange(mean.shape[-1])
    theta = grid.theta() if grid is not None else None
    phi = grid.phi() if grid is not None else None
    flat = {name: np.atleast_1d(getattr(band, name)).reshape(-1, mean.shape[-1])
            for name in ("mean", "pw_lo", "pw_hi", "joint_lo", "joint_hi")}
    for r in range(flat["mean"].shape[0]):
        for j, loc in enumerate(locations):
            row = {"slice": r}
            if slice_labels is not None:
                row.update(slice_labels[r])
            row["location"] = int(loc)
            if theta is not None:
                row["theta"] = float(theta[int(loc) // grid.n_circumferential])
                row["phi"] = float(phi[int(loc) % grid.n_circumferential])
            row.update({name: float(values[r, j]) for name, values in flat.items()})
            yield row


def write_band_csv(
    path: PathLike,
    band: BandSummary,
    grid: Optional[SurfaceGrid] = None,
    locations: Optional[np.ndarray] = None,
    slice_labels: Optional[Sequence[Dict[str, float]]] = None,
) -> Path:
    """CSV with columns slice, [slice labels], location, [theta, phi], mean, pw_lo, pw_hi, joint_lo, joint_hi."""
    rows = list(band_rows(band, grid, locations, slice_labels))
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(rows[0]) if rows else ["location"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    write_text_atomic(path, buffer.getvalue())
    return Path(path)
