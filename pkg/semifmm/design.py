"""
Design assembly for semiparametric functional mixed models.

Every nonparametric term contributes one centered linear fixed column and one spline
random block Z_B = B(x) Z_map with a single variance component. Every random level
contributes one block per design column (intercept, slope or serial basis column),
each holding one column per group, with its own variance component.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import logger
from .errors import ValidationError
from .formula import (
    InteractionTerm,
    LinearTerm,
    ModelSpec,
    NonparametricTerm,
    RandomLevel,
    SerialTerm,
    parse_formula,
)
from .splinekit import SplineBasisDef, SplineKit, spline_kit

SERIAL_KINDS = ("constant", "linear", "hyperbolic_no_intercept", "hyperbolic")
_HALF_ROOT2 = np.sqrt(2.0) / 2.0


@dataclass(frozen=True)
class SerialBasis:
    """Parametric basis G_d(p) over a serial variable, with constants fixed from a design grid."""

    kind: str
    levels: Tuple[float, ...]
    p_mean: float = 0.0
    p_norm: float = 1.0
    inv_mean: float = 0.0
    inv_norm: float = 1.0

    def __post_init__(self):
        if self.kind not in SERIAL_KINDS:
            raise ValidationError(f"unknown serial basis kind {self.kind!r}")

    @property
    def names(self) -> List[str]:
        return {
            "constant": ["G0"],
            "linear": ["G0", "G1"],
            "hyperbolic_no_intercept": ["G1", "G2"],
            "hyperbolic": ["G0", "G1", "G2"],
        }[self.kind]

    @property
    def D(self) -> int:
        return len(self.names) - 1

    def standardized(self, p: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0) and self.kind.startswith("hyperbolic"):
            raise ValidationError("hyperbolic serial basis needs p > 0", code="nonpositive_serial")
        x1 = (p - self.p_mean) / self.p_norm
        x2 = (1.0 / p - self.inv_mean) / self.inv_norm if self.kind.startswith("hyperbolic") else np.zeros_like(p)
        return x1, x2

    def evaluate(self, p: Sequence[float]) -> np.ndarray:
        """len(p) x (D+1) matrix of G_d(p) in `names` order."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        ones = np.ones_like(p)
        if self.kind == "constant":
            return ones[:, None]
        x1, x2 = self.standardized(p)
        if self.kind == "linear":
            return np.column_stack([ones, x1])
        g1 = _HALF_ROOT2 * (x1 - x2)
        g2 = _HALF_ROOT2 * (x1 + x2)
        if self.kind == "hyperbolic_no_intercept":
            return np.column_stack([g1, g2])
        return np.column_stack([ones, g1, g2])

    def slope_columns(self, p: Sequence[float]) -> np.ndarray:
        """G columns without the intercept."""
        full = self.evaluate(p)
        return full[:, 1:] if self.names[0] == "G0" else full

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__, levels=list(self.levels))

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "SerialBasis":
        return cls(**dict(payload, levels=tuple(payload["levels"])))


def _distinct(p_levels: Sequence[float]) -> np.ndarray:
    levels = np.unique(np.asarray(p_levels, dtype=float))
    if levels.size < 3:
        raise ValidationError(f"need at least 3 distinct serial levels, got {levels.size}", code="too_few_levels")
    return levels


def hyperbolic_basis(p_levels: Sequence[float], *, intercept: bool = True) -> SerialBasis:
    """Orthogonalized {p, 1/p} basis: G1 = (X1 - X2)/sqrt 2, G2 = (X1 + X2)/sqrt 2."""
    levels = _distinct(p_levels)
    if np.any(levels <= 0):
        raise ValidationError("hyperbolic serial basis needs p > 0", code="nonpositive_serial")
    centered_p = levels - levels.mean()
    centered_inv = 1.0 / levels - (1.0 / levels).mean()
    return SerialBasis(
        kind="hyperbolic" if intercept else "hyperbolic_no_intercept",
        levels=tuple(levels.tolist()),
        p_mean=float(levels.mean()),
        p_norm=float(np.linalg.norm(centered_p)),
        inv_mean=float((1.0 / levels).mean()),
        inv_norm=float(np.linalg.norm(centered_inv)),
    )


def linear_serial_basis(p_levels: Sequence[float]) -> SerialBasis:
    levels = np.unique(np.asarray(p_levels, dtype=float))
    if levels.size < 2:
        raise ValidationError("need at least 2 distinct serial levels for a linear basis", code="too_few_levels")
    centered = levels - levels.mean()
    return SerialBasis(
        kind="linear", levels=tuple(levels.tolist()), p_mean=float(levels.mean()), p_norm=float(np.linalg.norm(centered))
    )


def serial_covariance(basis: SerialBasis, q: Sequence[float], p: Union[float, Sequence[float]], p2: Union[float, Sequence[float]]):
    """sum_d G_d(p) G_d(p') q_d; a scalar for scalar p, p' and a matrix otherwise."""
    q = np.asarray(q, dtype=float)
    if q.shape != (basis.D + 1,):
        raise ValidationError(f"expected {basis.D + 1} serial variances, got {q.shape}", code="dimension_mismatch")
    if np.any(q < 0):
        raise ValidationError("serial variances must be nonnegative", code="negative_variance")
    left = basis.evaluate(p)
    right = basis.evaluate(p2)
    cov = (left * q) @ right.T
    if np.ndim(p) == 0 and np.ndim(p2) == 0:
        return float(cov[0, 0])
    return cov


@dataclass(frozen=True)
class RandomBlock:
    """One variance component: an N x M_h design and the group label per column."""

    name: str
    kind: str
    design: np.ndarray
    column_groups: Tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return self.design.shape[1]


@dataclass(frozen=True)
class SplineTermInfo:
    label: str
    covariate: str
    center: float
    kit: SplineKit
    fixed_column: int
    block: int
    multiplier: Optional[str] = None


@dataclass
class DesignBundle:
    spec: ModelSpec
    X: np.ndarray
    fixed_names: List[str]
    blocks: List[RandomBlock]
    term_index: Dict[str, Tuple[int, int]]
    spline_terms: List[SplineTermInfo] = field(default_factory=list)
    serial_bases: Dict[str, SerialBasis] = field(default_factory=dict)
    centers: Dict[str, float] = field(default_factory=dict)
    covariates: Dict[str, np.ndarray] = field(default_factory=dict)
    multipliers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def n_vc(self) -> int:
        return len(self.blocks)

    @property
    def vc_names(self) -> List[str]:
        return [b.name for b in self.blocks]

    def z_matrix(self, exclude: Sequence[int] = ()) -> np.ndarray:
        kept = [b.design for i, b in enumerate(self.blocks) if i not in set(exclude)]
        return np.hstack(kept) if kept else np.zeros((self.n_obs, 0))

    def block_slices(self) -> List[slice]:
        edges = np.concatenate([[0], np.cumsum([b.width for b in self.blocks])])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def column_variances(self, vc: Sequence[float], exclude: Sequence[int] = ()) -> np.ndarray:
        """Per-column variances for z_matrix(exclude) from per-block variances."""
        skip = set(exclude)
        return np.concatenate(
            [np.full(b.width, float(v)) for i, (b, v) in enumerate(zip(self.blocks, vc)) if i not in skip]
            or [np.zeros(0)]
        )

    def marginal_covariance(self, vc: Sequence[float], s: float) -> np.ndarray:
        """Dense sum_h q_h Z_h Z_h' + s I (small problems only)."""
        cov = s * np.eye(self.n_obs)
        for block, q in zip(self.blocks, vc):
            cov += q * block.design @ block.design.T
        return cov

    def spline_basis(self, term: int) -> np.ndarray:
        """B(x) for spline term `term`, times its interaction multiplier if any."""
        info = self.spline_terms[term]
        B = info.kit.design(self.covariates[info.covariate])
        if info.label in self.multipliers:
            B = B * self.multipliers[info.label][:, None]
        return B

    def covariate_range(self, covariate: str) -> Optional[Tuple[float, float]]:
        """Interval every spline term in `covariate` can be evaluated on; None without one."""
        bounds = [info.kit.sdef for info in self.spline_terms if info.covariate == covariate]
        if not bounds:
            return None
        return max(s.a for s in bounds), min(s.b for s in bounds)

    def block_index(self, name: str) -> int:
        try:
            return self.vc_names.index(name)
        except ValueError:
            raise ValidationError(f"no random block named {name!r}", code="unknown_term")


def _group_indicator(labels: Sequence[str]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    groups = sorted(set(labels))
    lookup = {g: i for i, g in enumerate(groups)}
    indicator = np.zeros((len(labels), len(groups)))
    indicator[np.arange(len(labels)), [lookup[g] for g in labels]] = 1.0
    return indicator, tuple(groups)


class _Assembler:
    def __init__(self, frame, spec: ModelSpec, reference: Optional[DesignBundle]):
        self.frame = frame
        self.spec = spec
        self.reference = reference
        self.n = frame.n_functions
        self.columns: List[np.ndarray] = []
        self.names: List[str] = []
        self.blocks: List[RandomBlock] = []
        self.term_index: Dict[str, Tuple[int, int]] = {}
        self.spline_terms: List[SplineTermInfo] = []
        self.serial_bases: Dict[str, SerialBasis] = dict(reference.serial_bases) if reference else {}
        self.centers: Dict[str, float] = dict(reference.centers) if reference else {}
        self.covariates: Dict[str, np.ndarray] = {}
        self.multipliers: Dict[str, np.ndarray] = {}
        self.kits: Dict[Tuple[str, int], SplineKit] = (
            {(info.covariate, info.kit.sdef.M): info.kit for info in reference.spline_terms} if reference else {}
        )

    def centered(self, name: str) -> np.ndarray:
        values = self.frame.covariate(name)
        if name not in self.centers:
            self.centers[name] = float(values.mean())
        return values - self.centers[name]

    def serial_basis(self, name: str) -> SerialBasis:
        if name not in self.serial_bases:
            self.serial_bases[name] = hyperbolic_basis(self.frame.covariate(name))
        return self.serial_bases[name]

    def slope(self, term: Union[LinearTerm, SerialTerm]) -> Tuple[np.ndarray, List[str]]:
        if isinstance(term, SerialTerm):
            basis = self.serial_basis(term.covariate)
            cols = basis.slope_columns(self.frame.covariate(term.covariate))
            return cols, [f"{term.label()}[{n}]" for n in basis.names if n != "G0"]
        return self.centered(term.covariate)[:, None], [term.label()]

    def add_fixed(self, label: str, cols: np.ndarray, names: List[str]) -> List[int]:
        start = len(self.names)
        self.columns.extend(cols.T)
        self.names.extend(names)
        self.term_index[label] = (start, len(self.names))
        return list(range(start, len(self.names)))

    def kit_for(self, term: NonparametricTerm) -> SplineKit:
        key = (term.covariate, term.knots)
        if key not in self.kits:
            values = self.frame.covariate(term.covariate)
            self.kits[key] = spline_kit(SplineBasisDef.from_data(values, M=term.knots))
        return self.kits[key]

    def add_spline(self, term: NonparametricTerm, multiplier: Optional[np.ndarray], multiplier_names: List[str], label: str):
        kit = self.kit_for(term)
        x = self.frame.covariate(term.covariate)
        linear = self.centered(term.covariate)
        z = kit.z_design(x)
        self.covariates[term.covariate] = x
        if multiplier is None:
            multiplier, multiplier_names = np.ones((self.n, 1)), [None]
        lin_cols = multiplier * linear[:, None]
        lin_names = [f"{label}[lin]" if m is None else f"{m}:{term.label()}[lin]" for m in multiplier_names]
        fixed_cols = self.add_fixed(label, lin_cols, lin_names)
        for j, m in enumerate(multiplier_names):
            block_name = f"spline:{term.covariate}" if m is None else f"spline:{m}:{term.covariate}"
            self.blocks.append(RandomBlock(block_name, "spline", multiplier[:, j:j + 1] * z))
            if m is not None:
                self.multipliers[f"{m}:{term.label()}"] = multiplier[:, j]
            self.spline_terms.append(SplineTermInfo(
                label=label if m is None else f"{m}:{term.label()}",
                covariate=term.covariate,
                center=self.centers[term.covariate],
                kit=kit,
                fixed_column=fixed_cols[j],
                block=len(self.blocks) - 1,
                multiplier=m,
            ))

    def add_random(self, level: RandomLevel):
        try:
            labels = self.frame.labels(level.grouping)
        except ValidationError:
            raise ValidationError(f"unknown grouping {level.grouping!r}", code="unknown_grouping")
        indicator, groups = _group_indicator(labels)
        columns: List[Tuple[str, np.ndarray]] = []
        if level.intercept:
            columns.append(("(Intercept)", np.ones(self.n)))
        if level.slope is not None:
            cols, names = self.slope(level.slope)
            for name, col in zip(names, cols.T):
                short = name.split("[")[-1].rstrip("]") if "[" in name else name
                columns.append((short, col))
        for short, col in columns:
            self.blocks.append(RandomBlock(f"{level.grouping}:{short}", "unit", indicator * col[:, None], groups))

    def build(self) -> DesignBundle:
        if self.spec.include_intercept:
            self.add_fixed("(Intercept)", np.ones((self.n, 1)), ["(Intercept)"])
        for term in self.spec.fixed_terms:
            label = term.label()
            if isinstance(term, NonparametricTerm):
                self.add_spline(term, None, [], label)
            elif isinstance(term, InteractionTerm):
                cols, names = self.slope(term.left)
                self.add_spline(term.right, cols, names, label)
            else:
                cols, names = self.slope(term)
                self.add_fixed(label, cols, names)
        for level in self.spec.random_levels:
            self.add_random(level)
        X = np.column_stack(self.columns) if self.columns else np.zeros((self.n, 0))
        return DesignBundle(
            spec=self.spec,
            X=X,
            fixed_names=self.names,
            blocks=self.blocks,
            term_index=self.term_index,
            spline_terms=self.spline_terms,
            serial_bases=self.serial_bases,
            centers=self.centers,
            covariates=self.covariates,
            multipliers=self.multipliers,
        )


def assemble(frame, spec: Union[ModelSpec, str], *, reference: Optional[DesignBundle] = None) -> DesignBundle:
    """Expand a model spec over a dataset's metadata.

    `frame` is anything with `n_functions`, `covariate(name)` and `labels(grouping)`
    (a FunctionalDataset). With `reference`, spline knots, centering constants and serial
    basis constants are taken from that bundle so new rows share its parameterization.
    """
    if isinstance(spec, str):
        spec = parse_formula(spec)
    bundle = _Assembler(frame, spec, reference).build()
    if bundle.n_obs <= bundle.n_fixed:
        raise ValidationError(
            f"{bundle.n_obs} observations cannot support {bundle.n_fixed} fixed effects", code="underdetermined"
        )
    logger.debug(
        f"🔧 Assembled {spec.to_formula()}: X {bundle.X.shape}, "
        f"{bundle.n_vc} variance components ({', '.join(bundle.vc_names) or 'none'})"
    )
    return bundle
