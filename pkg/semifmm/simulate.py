"""
Pseudo-data generation.

Functions are drawn coefficient by coefficient from a linear mixed model in wavelet space
and synthesized back onto the surface grid:

* `simulate_pseudo` draws from explicit per-coefficient parameters on an assembled design.
* `scenario_dataset` builds one of the canned truths on the study design (19 subjects,
  34 eyes, 9 pressure levels by default), optionally with boundary spikes.
* `truth_from_fit` / `simulate_from_fit` draw new subjects from the posterior predictive of a fit.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .basis import BasisSystem, TensorLayout, WaveletSpec
from .config import logger
from .dataset import FunctionalDataset, FunctionRecord, SurfaceGrid
from .design import DesignBundle, assemble, hyperbolic_basis
from .errors import ValidationError
from .runconfig import SimulationConfig

SCENARIO_FORMULAS = {
    "null": "value ~ 1",
    "linear": "value ~ lin(age)",
    "nonparametric": "value ~ np(age)",
    "linear_random": "value ~ lin(age) + (1 | eye)",
    "glaucoma": "value ~ hyper(iop) + np(age) + (hyper(iop) | eye)",
}


def simulation_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass
class DesignFrame:
    """Function metadata without values; enough for `assemble`."""

    records: List[FunctionRecord]
    serial_name: str = "iop"

    @property
    def n_functions(self) -> int:
        return len(self.records)

    def covariate(self, name: str) -> np.ndarray:
        if name == self.serial_name:
            return np.array([r.serial_level for r in self.records], dtype=float)
        try:
            return np.array([float(r.covariates[name]) for r in self.records])
        except KeyError:
            raise ValidationError(f"covariate {name!r} is missing for some functions", code="missing_covariate")

    def labels(self, grouping: str) -> List[str]:
        if grouping in ("unit", "eye"):
            return [r.unit_id for r in self.records]
        if grouping == "subject":
            return [r.subject_id for r in self.records]
        raise ValidationError(f"unknown grouping {grouping!r}", code="unknown_grouping")


def study_design(
    rng: np.random.Generator,
    *,
    n_subjects: int = 19,
    n_units: int = 34,
    levels: Sequence[float] = (7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0),
    age_range: Tuple[float, float] = (20.0, 90.0),
) -> List[FunctionRecord]:
    """One record per (eye, level). The first n_units - n_subjects subjects contribute two eyes."""
    if not n_subjects <= n_units <= 2 * n_subjects:
        raise ValidationError(f"{n_units} eyes cannot be spread over {n_subjects} subjects", code="bad_design")
    ages = np.round(rng.uniform(age_range[0], age_range[1], size=n_subjects), 1)
    pairs = n_units - n_subjects
    records = []
    for i in range(n_subjects):
        subject = f"S{i + 1:02d}"
        eyes = ("OD", "OS") if i < pairs else ("OD",)
        for eye in eyes:
            unit = f"{subject}-{eye}"
            for level in levels:
                records.append(FunctionRecord(
                    function_id=f"{unit}-p{level:g}",
                    subject_id=subject,
                    unit_id=unit,
                    serial_level=float(level),
                    covariates={"age": float(ages[i])},
                ))
    return records


@dataclass
class PseudoParameters:
    """Per-coefficient generating parameters on one design.

    fixed is A x K (one row per fixed column), vc is H x K (one row per random block), s has
    length K. `spline` holds fixed spline coefficients (m x K) by term label; their blocks
    contribute those values to the mean instead of fresh draws. `offset` (N x K) is added to
    the mean as is.
    """

    fixed: np.ndarray
    vc: np.ndarray
    s: np.ndarray
    spline: Dict[str, np.ndarray] = field(default_factory=dict)
    offset: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return int(np.shape(self.s)[0])

    def check(self, bundle: DesignBundle) -> None:
        K = self.K
        shapes = {"fixed": (bundle.n_fixed, K), "vc": (bundle.n_vc, K), "s": (K,)}
        for name, shape in shapes.items():
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise ValidationError(f"{name} has shape {value.shape}, expected {shape}", code="missing_parameters")
            missing = np.flatnonzero(~np.isfinite(value.reshape(-1, K)).all(axis=0))
            if missing.size:
                raise ValidationError(
                    f"{name} is missing values for coefficient(s) {missing[:10].tolist()}", code="missing_parameters"
                )
        if np.any(np.asarray(self.vc) < 0) or np.any(np.asarray(self.s) < 0):
            raise ValidationError("generating variances must be nonnegative", code="negative_variance")
        labels = {info.label: info for info in bundle.spline_terms}
        for label, u in self.spline.items():
            if label not in labels:
                raise ValidationError(f"no spline term {label!r} in the design", code="unknown_term")
            width = bundle.blocks[labels[label].block].width
            if np.shape(u) != (width, K):
                raise ValidationError(f"spline {label!r} has shape {np.shape(u)}, expected {(width, K)}",
                                      code="missing_parameters")
        if self.offset is not None and np.shape(self.offset) != (bundle.n_obs, K):
            raise ValidationError(f"offset has shape {np.shape(self.offset)}, expected {(bundle.n_obs, K)}",
                                  code="dimension_mismatch")


def mean_coefficients(params: PseudoParameters, bundle: DesignBundle) -> np.ndarray:
    """N x K mean: X fixed + fixed spline parts + offset."""
    mean = bundle.X @ np.asarray(params.fixed, dtype=float)
    for info in bundle.spline_terms:
        if info.label in params.spline:
            mean += bundle.blocks[info.block].design @ np.asarray(params.spline[info.label], dtype=float)
    if params.offset is not None:
        mean += params.offset
    return mean


def simulate_coefficients(params: PseudoParameters, bundle: DesignBundle, rng: np.random.Generator) -> np.ndarray:
    """N x K coefficient draws: mean + random effects + residuals."""
    params.check(bundle)
    K = params.K
    draws = mean_coefficients(params, bundle)
    given = {info.block for info in bundle.spline_terms if info.label in params.spline}
    vc = np.asarray(params.vc, dtype=float)
    for h, block in enumerate(bundle.blocks):
        if h in given or not np.any(vc[h] > 0):
            continue
        u = rng.standard_normal((block.width, K)) * np.sqrt(vc[h])
        draws += block.design @ u
    draws += rng.standard_normal((bundle.n_obs, K)) * np.sqrt(np.asarray(params.s, dtype=float))
    return draws


def _synthesize(coeffs: np.ndarray, basis: Union[BasisSystem, TensorLayout]) -> np.ndarray:
    if isinstance(basis, BasisSystem):
        layout = basis.layout
        return basis.synthesize(coeffs).reshape(coeffs.shape[0], layout.n_meridional, layout.n_circumferential)
    return basis.synthesize(coeffs)


def simulate_pseudo(
    params: PseudoParameters,
    bundle: DesignBundle,
    basis: Union[BasisSystem, TensorLayout],
    seed: int,
    *,
    records: Sequence[FunctionRecord],
    grid: SurfaceGrid,
    serial_name: str = "iop",
) -> FunctionalDataset:
    """Draw coefficients per the parameters and back-transform to surfaces on `grid`.

    `basis` is either a retained BasisSystem (parameters per retained coefficient) or a full
    TensorLayout (parameters per coefficient of the complete transform).
    """
    layout = basis.layout if isinstance(basis, BasisSystem) else basis
    if (layout.n_meridional, layout.n_circumferential) != grid.shape:
        raise ValidationError(
            f"basis grid {(layout.n_meridional, layout.n_circumferential)} does not match {grid.shape}",
            code="dimension_mismatch",
        )
    expected = basis.K if isinstance(basis, BasisSystem) else layout.size
    if params.K != expected:
        raise ValidationError(f"parameters cover {params.K} coefficients, basis has {expected}",
                              code="missing_parameters")
    if len(records) != bundle.n_obs:
        raise ValidationError(f"{len(records)} records for a design with {bundle.n_obs} rows", code="dimension_mismatch")
    coeffs = simulate_coefficients(params, bundle, simulation_rng(seed))
    values = _synthesize(coeffs, basis)
    logger.info(f"✅ Simulated {len(records)} functions on a {grid.shape[0]}x{grid.shape[1]} grid (K={params.K})")
    return FunctionalDataset(grid, list(records), values, serial_name)


# ---------------------------------------------------------------------------
# Canned truths


def age_profile(kind: str, ages: np.ndarray, age_range: Tuple[float, float] = (20.0, 90.0)) -> np.ndarray:
    """Age multiplier of the age surface: none, centered linear, or a full sine period."""
    ages = np.asarray(ages, dtype=float)
    low, high = age_range
    scaled = (ages - low) / (high - low)
    if kind == "linear":
        return 2.0 * scaled - 1.0
    if kind == "nonparametric":
        return np.sin(2.0 * np.pi * scaled)
    return np.zeros_like(ages)


def truth_surfaces(grid: SurfaceGrid, scale: float = 1.0) -> Dict[str, np.ndarray]:
    """Smooth n_meridional x n_circumferential effect surfaces used by every scenario."""
    theta, phi = np.meshgrid(grid.theta(), np.deg2rad(grid.phi()), indexing="ij")
    low, high = grid.theta_range
    near = 1.0 - (theta - low) / (high - low)
    surfaces = {
        "intercept": 1.0 + 0.4 * np.cos(phi) * np.exp(-2.0 * (1.0 - near)) + 0.3 * near,
        "age": -0.3 * (1.0 + 0.5 * np.sin(2.0 * phi)) * (0.5 + 0.5 * near),
        "G1": 0.6 * (1.0 + 0.3 * np.cos(phi)),
        "G2": -0.4 * (0.5 + 0.5 * near) * (1.0 + 0.2 * np.sin(phi)),
    }
    return {name: scale * values for name, values in surfaces.items()}


def scale_weights(layout: TensorLayout, decay: float) -> np.ndarray:
    """Per-coefficient variance shares 2^{-decay (j1 + j2)}, normalized to sum to the grid size."""
    index = layout.index_map()
    raw = 2.0 ** (-decay * (index["j1"] + index["j2"]))
    return raw * (layout.n_meridional * layout.n_circumferential) / raw.sum()


@dataclass
class SimulationResult:
    dataset: FunctionalDataset
    formula: str
    surfaces: Dict[str, np.ndarray]
    params: PseudoParameters
    spiked: List[int] = field(default_factory=list)

    def truth_summary(self) -> Dict[str, object]:
        return {"formula": self.formula, "spiked": list(self.spiked), "surfaces": sorted(self.surfaces)}


def scenario_mean(
    scenario: str,
    frame: DesignFrame,
    surfaces: Dict[str, np.ndarray],
    layout: TensorLayout,
    age_range: Tuple[float, float],
) -> np.ndarray:
    """N x K_full mean coefficients of a scenario."""
    coef = {name: layout.analyze(values) for name, values in surfaces.items()}
    n = frame.n_functions
    mean = np.tile(coef["intercept"], (n, 1))
    age = frame.covariate("age")
    if scenario in ("linear", "linear_random"):
        mean += np.outer(age_profile("linear", age, age_range), coef["age"])
    elif scenario in ("nonparametric", "glaucoma"):
        mean += np.outer(age_profile("nonparametric", age, age_range), coef["age"])
    if scenario == "glaucoma":
        G = hyperbolic_basis(frame.covariate(frame.serial_name)).slope_columns(frame.covariate(frame.serial_name))
        mean += np.outer(G[:, 0], coef["G1"]) + np.outer(G[:, 1], coef["G2"])
    return mean


def scenario_dataset(config: SimulationConfig, seed: int, wavelet: Optional[WaveletSpec] = None) -> SimulationResult:
    """Draw a pseudo-dataset for one scenario of `config`."""
    wavelet = wavelet or WaveletSpec()
    rng = simulation_rng(seed)
    grid = SurfaceGrid(config.n_meridional, config.n_circumferential, theta_range=config.theta_range)
    layout = TensorLayout.for_grid(wavelet, grid.n_meridional, grid.n_circumferential)
    records = study_design(rng, n_subjects=config.n_subjects, n_units=config.n_units,
                           levels=config.serial_levels, age_range=config.age_range)
    frame = DesignFrame(records)
    formula = SCENARIO_FORMULAS[config.scenario]

    # random structure only; the mean enters through the offset
    random_part = {
        "linear_random": "(1 | eye)",
        "glaucoma": "(hyper(iop) | eye)",
    }.get(config.scenario, "")
    if config.subject_sd > 0:
        random_part = f"{random_part} + (1 | subject)" if random_part else "(1 | subject)"
    bundle = assemble(frame, f"value ~ 0 + {random_part}" if random_part else "value ~ 1")

    surfaces = truth_surfaces(grid, config.effect_scale)
    weights = scale_weights(layout, config.decay)
    vc = np.zeros((bundle.n_vc, layout.size))
    for h, name in enumerate(bundle.vc_names):
        sd = config.subject_sd if name.startswith("subject:") else config.unit_sd
        vc[h] = sd ** 2 * weights
    params = PseudoParameters(
        fixed=np.zeros((bundle.n_fixed, layout.size)),
        vc=vc,
        s=config.noise_sd ** 2 * weights,
        offset=scenario_mean(config.scenario, frame, surfaces, layout, config.age_range),
    )
    dataset = simulate_pseudo(params, bundle, layout, int(rng.integers(2 ** 31)), records=records, grid=grid)
    spiked: List[int] = []
    if config.spike_units:
        dataset, spiked = inject_spikes(dataset, config.spike_units, config.spike_magnitude * max(config.noise_sd, 1e-12), rng)
    return SimulationResult(dataset, formula, surfaces, params, spiked)


def inject_spikes(
    dataset: FunctionalDataset,
    n_units: int,
    magnitude: float,
    rng: np.random.Generator,
) -> Tuple[FunctionalDataset, List[int]]:
    """Add one boundary spike (first meridional row, random column) to `n_units` random functions."""
    if n_units > dataset.n_functions:
        raise ValidationError(f"cannot spike {n_units} of {dataset.n_functions} functions")
    chosen = sorted(rng.choice(dataset.n_functions, size=n_units, replace=False).tolist())
    values = dataset.values.copy()
    for i in chosen:
        column = int(rng.integers(dataset.grid.n_circumferential))
        values[i, 0, column] += magnitude * rng.choice((-1.0, 1.0))
    logger.info(f"🔧 Injected boundary spikes of magnitude {magnitude:.3g} into {n_units} functions")
    return dataset.with_values(values), chosen


# ---------------------------------------------------------------------------
# Posterior-predictive draws


def truth_from_fit(stacked, bundle: DesignBundle, draw: int) -> PseudoParameters:
    """Parameters of kept posterior draw `draw`; spline terms keep that draw's coefficients."""
    if not 0 <= draw < stacked.n_draws:
        raise ValidationError(f"draw {draw} outside the {stacked.n_draws} kept draws", code="bad_draw")
    vc = stacked.vc[draw].T.copy()
    spline = {}
    for info in bundle.spline_terms:
        if info.label in stacked.u:
            spline[info.label] = stacked.u[info.label][draw].T.copy()
            vc[info.block] = 0.0
    return PseudoParameters(
        fixed=stacked.b[draw].T.copy(),
        vc=vc,
        s=stacked.s[draw].copy(),
        spline=spline,
    )


def simulate_from_fit(
    stacked,
    bundle: DesignBundle,
    basis: BasisSystem,
    ages: Sequence[float],
    levels: Sequence[float],
    seed: int,
    *,
    grid: SurfaceGrid,
    serial_name: str = "iop",
) -> FunctionalDataset:
    """One new single-eye subject per age, observed at every level in `levels`.

    The parameters are one kept posterior draw picked by `seed`, so repeated calls with
    different seeds sample the posterior predictive distribution. Ages outside the fitted
    spline range are clipped to it.
    """
    ages = np.asarray(ages, dtype=float)
    bounds = bundle.covariate_range("age")
    if bounds is not None:
        clipped = np.clip(ages, *bounds)
        if np.any(clipped != ages):
            logger.warning(f"⚠️ Clipping {int(np.sum(clipped != ages))} age(s) to the fitted range "
                           f"[{bounds[0]:g}, {bounds[1]:g}]")
        ages = clipped
    records = []
    for i, age in enumerate(ages):
        subject = f"P{i + 1:02d}"
        for level in levels:
            records.append(FunctionRecord(
                function_id=f"{subject}-OD-p{level:g}",
                subject_id=subject,
                unit_id=f"{subject}-OD",
                serial_level=float(level),
                covariates={"age": float(age)},
            ))
    frame = DesignFrame(records, serial_name)
    new_bundle = assemble(frame, bundle.spec, reference=bundle)
    rng = simulation_rng(seed)
    draw = int(rng.integers(stacked.n_draws))
    logger.info(f"🔧 Posterior-predictive functions from kept draw {draw} of {stacked.n_draws}")
    params = truth_from_fit(stacked, bundle, draw)
    return simulate_pseudo(params, new_bundle, basis, int(rng.integers(2 ** 31)), records=records, grid=grid,
                           serial_name=serial_name)
