"""
Basis transforms for surface-sampled functions.

The tensor wavelet transform applies a 1-D multilevel DWT down the meridional axis
(reflection boundary) and then across the circumferential axis (periodic boundary).
Coefficients are laid out as a (R x C) block matrix flattened row-major; scale index 0
is the approximation (father) block and 1..levels run from coarsest to finest detail.
"""
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pywt
from scipy import linalg

from .config import logger
from .errors import NumericalError, ValidationError
from .utils import PathLike, savez_atomic

BASIS_FORMAT_VERSION = 1
NEAR_LOSSLESS_EPS = 0.005

_PYWT_MODES = {"reflection": "symmetric", "periodic": "periodization"}


@dataclass(frozen=True)
class WaveletSpec:
    filter: str = "db3"
    levels: int = 5
    boundary_meridional: str = "reflection"
    boundary_circumferential: str = "periodic"

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError(f"wavelet levels must be >= 1, got {self.levels}")
        for boundary in (self.boundary_meridional, self.boundary_circumferential):
            if boundary not in _PYWT_MODES:
                raise ValidationError(f"unknown boundary mode {boundary!r}")
        check_filter(self.filter)

    @property
    def wavelet(self) -> pywt.Wavelet:
        return pywt.Wavelet(self.filter)

    @property
    def filter_length(self) -> int:
        return self.wavelet.dec_len

    def to_dict(self) -> Dict[str, object]:
        return {
            "filter": self.filter,
            "levels": self.levels,
            "boundary_meridional": self.boundary_meridional,
            "boundary_circumferential": self.boundary_circumferential,
        }


def check_filter(name: str, tol: float = 1e-10) -> None:
    """Reject filters that are not orthogonal with the advertised vanishing moments."""
    try:
        wavelet = pywt.Wavelet(name)
    except ValueError:
        raise ValidationError(f"unknown wavelet filter {name!r}", code="bad_filter")
    if not wavelet.orthogonal:
        raise ValidationError(f"wavelet filter {name!r} is not orthogonal", code="bad_filter")
    h = np.asarray(wavelet.dec_lo)
    g = np.asarray(wavelet.dec_hi)
    if abs(h @ h - 1.0) > tol or abs(h.sum() - np.sqrt(2.0)) > tol:
        raise ValidationError(f"filter {name!r} fails the orthonormality sums", code="bad_filter")
    for shift in range(1, len(h) // 2):
        if abs(h[2 * shift:] @ h[:-2 * shift]) > tol:
            raise ValidationError(f"filter {name!r} is not orthogonal to its even shifts", code="bad_filter")
    taps = np.arange(len(g), dtype=float)
    for moment in range(wavelet.vanishing_moments_psi or 0):
        if abs(np.sum(g * taps ** moment)) > tol * max(1.0, float(len(g)) ** moment):
            raise ValidationError(f"filter {name!r} fails vanishing moment {moment}", code="bad_filter")


def _mode(boundary: str) -> str:
    try:
        return _PYWT_MODES[boundary]
    except KeyError:
        raise ValidationError(f"unknown boundary mode {boundary!r}")


def level_lengths(n: int, spec: WaveletSpec, boundary: str) -> List[int]:
    """Coefficient counts in pywt order: [approx, detail_L, ..., detail_1]."""
    mode = _mode(boundary)
    details = []
    length = n
    for _ in range(spec.levels):
        if length < 2:
            raise ValidationError(
                f"{spec.levels} levels are not feasible for length {n} ({boundary})", code="levels_infeasible"
            )
        length = pywt.dwt_coeff_len(length, spec.filter_length, mode)
        details.append(length)
    return [details[-1]] + details[::-1]


def _check_signal(n: int, spec: WaveletSpec, boundary: str) -> None:
    if n < spec.filter_length:
        raise ValidationError(
            f"signal of length {n} is shorter than the {spec.filter} filter ({spec.filter_length})",
            code="signal_too_short",
        )
    level_lengths(n, spec, boundary)


def _wavedec(data: np.ndarray, spec: WaveletSpec, boundary: str, axis: int) -> List[np.ndarray]:
    with warnings.catch_warnings():
        # pywt warns once levels exceed its boundary-free maximum; the transform stays exact
        warnings.filterwarnings("ignore", message="Level value", category=UserWarning)
        return pywt.wavedec(data, spec.wavelet, mode=_mode(boundary), level=spec.levels, axis=axis)


def _waverec(coeffs: List[np.ndarray], spec: WaveletSpec, boundary: str, axis: int, n: int) -> np.ndarray:
    rebuilt = pywt.waverec(coeffs, spec.wavelet, mode=_mode(boundary), axis=axis)
    return np.take(rebuilt, np.arange(n), axis=axis)


def dwt1d(signal: Sequence[float], spec: WaveletSpec, boundary: str) -> List[np.ndarray]:
    """Multilevel 1-D DWT; returns [approx, detail_L, ..., detail_1]."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValidationError("dwt1d expects a 1-D signal")
    if not np.all(np.isfinite(x)):
        raise ValidationError("signal contains non-finite values", code="non_finite")
    _check_signal(x.size, spec, boundary)
    return _wavedec(x, spec, boundary, axis=0)


def idwt1d(coeffs: List[np.ndarray], spec: WaveletSpec, boundary: str, n: int) -> np.ndarray:
    return _waverec([np.asarray(c, dtype=float) for c in coeffs], spec, boundary, axis=0, n=n)


@dataclass(frozen=True)
class TensorLayout:
    """Block layout of tensor wavelet coefficients for one grid shape."""

    spec: WaveletSpec
    n_meridional: int
    n_circumferential: int
    row_lengths: Tuple[int, ...]
    col_lengths: Tuple[int, ...]

    @classmethod
    def for_grid(cls, spec: WaveletSpec, n_meridional: int, n_circumferential: int) -> "TensorLayout":
        _check_signal(n_meridional, spec, spec.boundary_meridional)
        _check_signal(n_circumferential, spec, spec.boundary_circumferential)
        return cls(
            spec=spec,
            n_meridional=n_meridional,
            n_circumferential=n_circumferential,
            row_lengths=tuple(level_lengths(n_meridional, spec, spec.boundary_meridional)),
            col_lengths=tuple(level_lengths(n_circumferential, spec, spec.boundary_circumferential)),
        )

    @property
    def n_rows(self) -> int:
        return sum(self.row_lengths)

    @property
    def n_cols(self) -> int:
        return sum(self.col_lengths)

    @property
    def size(self) -> int:
        return self.n_rows * self.n_cols

    def index_map(self) -> Dict[str, np.ndarray]:
        """Scale pair (j1 meridional, j2 circumferential) and in-block location per coefficient."""
        row_scale = np.repeat(np.arange(len(self.row_lengths)), self.row_lengths)
        row_loc = np.concatenate([np.arange(n) for n in self.row_lengths])
        col_scale = np.repeat(np.arange(len(self.col_lengths)), self.col_lengths)
        col_loc = np.concatenate([np.arange(n) for n in self.col_lengths])
        return {
            "j1": np.repeat(row_scale, self.n_cols),
            "j2": np.tile(col_scale, self.n_rows),
            "k1": np.repeat(row_loc, self.n_cols),
            "k2": np.tile(col_loc, self.n_rows),
        }

    def _split(self, block: np.ndarray, lengths: Sequence[int], axis: int) -> List[np.ndarray]:
        edges = np.cumsum(lengths)[:-1]
        return np.split(block, edges, axis=axis)

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Forward transform of (..., n_meridional, n_circumferential) -> (..., K)."""
        values = np.asarray(values, dtype=float)
        if values.shape[-2:] != (self.n_meridional, self.n_circumferential):
            raise ValidationError(
                f"matrix is {values.shape[-2:]}, layout expects {(self.n_meridional, self.n_circumferential)}",
                code="dimension_mismatch",
            )
        spec = self.spec
        rows = np.concatenate(_wavedec(values, spec, spec.boundary_meridional, axis=-2), axis=-2)
        both = np.concatenate(_wavedec(rows, spec, spec.boundary_circumferential, axis=-1), axis=-1)
        return both.reshape(values.shape[:-2] + (self.size,))

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Inverse transform of (..., K) -> (..., n_meridional, n_circumferential)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-1] != self.size:
            raise ValidationError(f"expected {self.size} coefficients, got {coeffs.shape[-1]}", code="dimension_mismatch")
        spec = self.spec
        block = coeffs.reshape(coeffs.shape[:-1] + (self.n_rows, self.n_cols))
        cols = _waverec(
            self._split(block, self.col_lengths, axis=-1), spec, spec.boundary_circumferential,
            axis=-1, n=self.n_circumferential,
        )
        return _waverec(
            self._split(cols, self.row_lengths, axis=-2), spec, spec.boundary_meridional,
            axis=-2, n=self.n_meridional,
        )

    def basis_functions(self, indices: Sequence[int], chunk: int = 256) -> np.ndarray:
        """Rows psi_k(t) (flattened) for the requested coefficient indices."""
        indices = np.asarray(indices, dtype=int)
        out = np.empty((indices.size, self.n_meridional * self.n_circumferential))
        for start in range(0, indices.size, chunk):
            part = indices[start:start + chunk]
            unit = np.zeros((part.size, self.size))
            unit[np.arange(part.size), part] = 1.0
            out[start:start + part.size] = self.synthesize(unit).reshape(part.size, -1)
        return out


def tensor_transform(values: np.ndarray, spec: WaveletSpec) -> Tuple[np.ndarray, TensorLayout]:
    """vec of the 2-D transform of one T1 x T2 matrix, plus its layout."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValidationError("tensor_transform expects a matrix", code="dimension_mismatch")
    layout = TensorLayout.for_grid(spec, *values.shape)
    return layout.analyze(values), layout


def tensor_inverse(coeffs: np.ndarray, layout: TensorLayout) -> np.ndarray:
    return layout.synthesize(coeffs)


def analysis_matrix_1d(n: int, spec: WaveletSpec, boundary: str) -> np.ndarray:
    """Dense analysis operator (K1 x n) built by transforming unit vectors."""
    _check_signal(n, spec, boundary)
    return np.concatenate(_wavedec(np.eye(n), spec, boundary, axis=0), axis=0)


def synthesis_matrix_1d(n: int, spec: WaveletSpec, boundary: str) -> np.ndarray:
    """Dense synthesis operator (n x K1) built by inverting unit coefficient vectors."""
    lengths = level_lengths(n, spec, boundary)
    total = sum(lengths)
    unit = np.eye(total)
    edges = np.cumsum(lengths)[:-1]
    return _waverec(np.split(unit, edges, axis=0), spec, boundary, axis=0, n=n)


# ---------------------------------------------------------------------------
# Coefficient-space screening


def spike_filter(coeffs: np.ndarray, ratio_threshold: float = 100.0) -> np.ndarray:
    """Indices of coefficients whose |.| distribution is not extremely skewed."""
    magnitude = np.abs(np.asarray(coeffs, dtype=float))
    if magnitude.ndim != 2 or magnitude.shape[1] < 1:
        raise ValidationError("spike_filter expects an N x K matrix with K >= 1")
    mean = magnitude.mean(axis=0)
    median = np.median(magnitude, axis=0)
    dropped = mean > ratio_threshold * median
    kept = np.flatnonzero(~dropped)
    if kept.size == 0:
        logger.warning("⚠️ Spike filter removed every coefficient")
    elif dropped.any():
        logger.info(f"🧹 Spike filter removed {int(dropped.sum())} of {magnitude.shape[1]} coefficients")
    return kept


@dataclass
class CompressionResult:
    retained: np.ndarray
    per_function: np.ndarray
    compression_ratio: float

    @property
    def min_fraction(self) -> float:
        return float(self.per_function.min())

    @property
    def mean_fraction(self) -> float:
        return float(self.per_function.mean())


def compress(
    coeffs: np.ndarray,
    energy_threshold: float = 0.995,
    available: Optional[Sequence[int]] = None,
) -> CompressionResult:
    """Smallest-by-construction coefficient set preserving each function's energy.

    Coefficients are first taken greedily by total energy until the pooled fraction
    reaches the threshold; then the function with the largest deficit receives its
    largest missing coefficient until every function meets the threshold.
    """
    if not 0.0 < energy_threshold <= 1.0:
        raise ValidationError(f"energy threshold must lie in (0, 1], got {energy_threshold}")
    coeffs = np.asarray(coeffs, dtype=float)
    n_funcs, n_coeffs = coeffs.shape
    squared = coeffs ** 2
    totals = squared.sum(axis=1)
    totals_safe = np.where(totals > 0, totals, 1.0)
    pool = np.arange(n_coeffs) if available is None else np.unique(np.asarray(available, dtype=int))

    reachable = squared[:, pool].sum(axis=1) / totals_safe
    reachable[totals == 0] = 1.0
    if reachable.min() < energy_threshold:
        worst = int(np.argmin(reachable))
        raise ValidationError(
            f"energy threshold {energy_threshold} is infeasible after filtering: function #{worst} "
            f"can keep at most {reachable[worst]:.6f}",
            code="compression_infeasible",
        )

    if energy_threshold >= 1.0:
        retained = pool[squared[:, pool].sum(axis=0) > 0]
    else:
        column_energy = squared[:, pool].sum(axis=0)
        order = pool[np.argsort(-column_energy, kind="stable")]
        cumulative = np.cumsum(squared[:, order].sum(axis=0))
        grand = cumulative[-1] if cumulative.size else 0.0
        m = int(np.searchsorted(cumulative, energy_threshold * grand) + 1) if grand > 0 else 0
        mask = np.zeros(n_coeffs, dtype=bool)
        mask[order[:m]] = True
        in_pool = np.zeros(n_coeffs, dtype=bool)
        in_pool[pool] = True
        missing = (squared * (~mask & in_pool)).sum(axis=1) + (squared * ~in_pool).sum(axis=1)
        while True:
            fraction = np.where(totals > 0, 1.0 - missing / totals_safe, 1.0)
            if fraction.min() >= energy_threshold:
                break
            worst = int(np.argmin(fraction))
            candidates = np.flatnonzero(in_pool & ~mask)
            if candidates.size == 0 or squared[worst, candidates].max() == 0.0:
                break
            pick = candidates[np.argmax(squared[worst, candidates])]
            mask[pick] = True
            missing -= squared[:, pick]
        retained = np.flatnonzero(mask)

    kept_energy = squared[:, retained].sum(axis=1)
    per_function = np.where(totals > 0, kept_energy / totals_safe, 1.0)
    ratio = n_coeffs / max(retained.size, 1)
    logger.info(
        f"📦 Compression kept {retained.size} of {n_coeffs} coefficients "
        f"(min energy {per_function.min():.5f}, mean {per_function.mean():.5f}, ratio {ratio:.1f}:1)"
    )
    return CompressionResult(retained=retained, per_function=per_function, compression_ratio=ratio)


def energy_weights(coeffs: np.ndarray) -> np.ndarray:
    """w_k = sum_i Y*_ik^2 / sum_ik Y*_ik^2."""
    column = np.sum(np.asarray(coeffs, dtype=float) ** 2, axis=0)
    total = column.sum()
    if not total > 0:
        raise NumericalError("energy weights need at least one nonzero coefficient", code="all_zero")
    return column / total


# ---------------------------------------------------------------------------
# Basis systems


@dataclass
class BasisSystem:
    """A retained set of basis functions with its synthesis/analysis operators."""

    layout: TensorLayout
    retained: np.ndarray
    psi: np.ndarray
    weights: np.ndarray
    kind: str = "wavelet"
    rotation: Optional[np.ndarray] = None
    _psi_inv: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.psi.shape[0]

    @property
    def T(self) -> int:
        return self.psi.shape[1]

    @property
    def index_map(self) -> Dict[str, np.ndarray]:
        if self.kind == "pc":
            # principal components form one scale class
            zeros = np.zeros(self.K, dtype=int)
            return {"j1": zeros, "j2": zeros, "k1": np.arange(self.K), "k2": zeros}
        full = self.layout.index_map()
        return {name: values[self.retained] for name, values in full.items()}

    @property
    def psi_inv(self) -> np.ndarray:
        """Psi'(Psi Psi')^{-1}, materialized on first use."""
        if self._psi_inv is None:
            gram = self.psi @ self.psi.T
            try:
                factor = linalg.cho_factor(gram)
            except linalg.LinAlgError:
                raise NumericalError("Psi Psi' is singular for the retained basis", code="singular_basis")
            self._psi_inv = linalg.cho_solve(factor, self.psi).T
        return self._psi_inv

    def analyze(self, values: np.ndarray) -> np.ndarray:
        """Basis coefficients (N x K) of functions given as (N, n1, n2) or (N, T)."""
        values = np.asarray(values, dtype=float)
        shape = (self.layout.n_meridional, self.layout.n_circumferential)
        if values.shape[-1] == self.T and values.shape[-2:] != shape:
            values = values.reshape(values.shape[:-1] + shape)
        full = self.layout.analyze(values)
        if self.kind == "pc":
            return full[..., self.retained] @ self.rotation
        return full[..., self.retained]

    def project(self, values: np.ndarray) -> np.ndarray:
        """Least-squares coefficients y Psi^- (N x K)."""
        flat = np.asarray(values, dtype=float).reshape(np.shape(values)[0], -1)
        return flat @ self.psi_inv

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Data-space functions (N x T) from basis coefficients (N x K)."""
        return np.asarray(coeffs, dtype=float) @ self.psi

    def relative_errors(self, values: np.ndarray) -> np.ndarray:
        flat = np.asarray(values, dtype=float).reshape(np.shape(values)[0], -1)
        rebuilt = self.synthesize(self.analyze(values))
        norms = np.linalg.norm(flat, axis=1)
        return np.linalg.norm(flat - rebuilt, axis=1) / np.where(norms > 0, norms, 1.0)

    def regularization_sets(self, min_size: int = 5) -> np.ndarray:
        """Set id per coefficient from its scale pair, merging small sets toward coarser scales."""
        return merge_scale_sets(self.index_map["j1"], self.index_map["j2"], self.layout.spec.levels, min_size)

    def save(self, path: PathLike) -> None:
        spec = self.layout.spec
        savez_atomic(
            path,
            format_version=np.array(BASIS_FORMAT_VERSION),
            kind=np.array(self.kind),
            wavelet_filter=np.array(spec.filter),
            levels=np.array(spec.levels),
            boundary_meridional=np.array(spec.boundary_meridional),
            boundary_circumferential=np.array(spec.boundary_circumferential),
            grid_shape=np.array([self.layout.n_meridional, self.layout.n_circumferential]),
            retained=self.retained,
            weights=self.weights,
            rotation=self.rotation if self.rotation is not None else np.zeros((0, 0)),
        )

    @classmethod
    def load(cls, path: PathLike) -> "BasisSystem":
        with np.load(Path(path), allow_pickle=False) as archive:
            version = int(archive["format_version"])
            if version != BASIS_FORMAT_VERSION:
                raise ValidationError(f"unsupported basis file version {version}", code="bad_format")
            spec = WaveletSpec(
                filter=str(archive["wavelet_filter"]),
                levels=int(archive["levels"]),
                boundary_meridional=str(archive["boundary_meridional"]),
                boundary_circumferential=str(archive["boundary_circumferential"]),
            )
            n1, n2 = (int(v) for v in archive["grid_shape"])
            retained = archive["retained"].astype(int)
            weights = archive["weights"].astype(float)
            kind = str(archive["kind"])
            rotation = archive["rotation"] if archive["rotation"].size else None
        layout = TensorLayout.for_grid(spec, n1, n2)
        psi = layout.basis_functions(retained)
        if kind == "pc":
            psi = rotation.T @ psi
        return cls(layout=layout, retained=retained, psi=psi, weights=weights, kind=kind, rotation=rotation)


def wavelet_basis(layout: TensorLayout, retained: Sequence[int], coeffs: np.ndarray) -> BasisSystem:
    """BasisSystem for a retained wavelet subset; coeffs is the N x K_full coefficient matrix."""
    retained = np.asarray(retained, dtype=int)
    return BasisSystem(
        layout=layout,
        retained=retained,
        psi=layout.basis_functions(retained),
        weights=energy_weights(np.asarray(coeffs)[:, retained]),
    )


def merge_scale_sets(j1: np.ndarray, j2: np.ndarray, levels: int, min_size: int = 5) -> np.ndarray:
    """Map scale pairs to set ids j1*(levels+1)+j2, folding sparse sets into coarser ones."""
    j1 = np.asarray(j1, dtype=int).copy()
    j2 = np.asarray(j2, dtype=int).copy()
    if j1.size == 0:
        raise ValidationError("no coefficients to assign to regularization sets", code="empty_set")
    width = levels + 1
    # finest pairs first so merged members can cascade further down
    for total in range(2 * levels, 0, -1):
        for a in range(min(total, levels), max(0, total - levels) - 1, -1):
            b = total - a
            members = (j1 == a) & (j2 == b)
            count = int(members.sum())
            if count == 0 or count >= min_size:
                continue
            if a >= b:
                j1[members] = a - 1
            else:
                j2[members] = b - 1
    return j1 * width + j2


@dataclass
class InducedCovariance:
    covariance: np.ndarray

    def correlation(self) -> np.ndarray:
        diag = np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))
        scale = np.outer(diag, diag)
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.where(scale > 0, self.covariance / scale, 0.0)
        np.fill_diagonal(corr, np.where(diag > 0, 1.0, 0.0))
        return corr


def induced_covariance(
    variances: np.ndarray,
    basis: BasisSystem,
    locations: Optional[Sequence[int]] = None,
    columns: Optional[Sequence[int]] = None,
) -> InducedCovariance:
    """Psi' diag(v) Psi restricted to rows `locations` and columns `columns`."""
    v = np.asarray(variances, dtype=float)
    if v.shape != (basis.K,):
        raise ValidationError(f"expected {basis.K} variances, got {v.shape}", code="dimension_mismatch")
    if np.any(v < 0):
        raise ValidationError("induced covariance needs nonnegative variances", code="negative_variance")
    rows = basis.psi if locations is None else basis.psi[:, np.asarray(locations, dtype=int)]
    cols = rows if columns is None else basis.psi[:, np.asarray(columns, dtype=int)]
    return InducedCovariance((rows * v[:, None]).T @ cols)


def induced_variance(variances: np.ndarray, basis: BasisSystem) -> np.ndarray:
    """Diagonal of the induced data-space covariance at every grid location."""
    return np.asarray(variances, dtype=float) @ basis.psi ** 2


def pc_basis(coeffs: np.ndarray, wavelet: BasisSystem, scree_threshold: float = 0.995) -> BasisSystem:
    """Wavelet-regularized principal components of the retained coefficient matrix."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] < 2:
        raise ValidationError("pc_basis needs at least two functions")
    _, singular, vt = np.linalg.svd(coeffs, full_matrices=False)
    energy = singular ** 2
    if not energy.sum() > 0:
        raise NumericalError("coefficient matrix has rank 0", code="degenerate")
    explained = np.cumsum(energy) / energy.sum()
    n_keep = int(np.searchsorted(explained, scree_threshold - 1e-12) + 1)
    n_keep = min(n_keep, vt.shape[0])
    rotation = vt[:n_keep].T
    scores = coeffs @ rotation
    logger.info(f"📊 PC basis keeps {n_keep} components ({explained[n_keep - 1]:.4%} of variance)")
    return BasisSystem(
        layout=wavelet.layout,
        retained=wavelet.retained,
        psi=rotation.T @ wavelet.psi,
        weights=energy_weights(scores),
        kind="pc",
        rotation=rotation,
    )


@dataclass
class BasisReport:
    n_full: int
    n_after_spike: int
    n_retained: int
    min_energy: float
    mean_energy: float
    compression_ratio: float
    max_relative_error: float

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def build_basis(
    values: np.ndarray,
    spec: WaveletSpec,
    *,
    spike_ratio: float = 100.0,
    energy_threshold: float = 0.995,
    epsilon: float = NEAR_LOSSLESS_EPS,
) -> Tuple[BasisSystem, np.ndarray, BasisReport]:
    """Transform, filter spikes, compress. Returns the basis, its N x K coefficients and a report."""
    values = np.asarray(values, dtype=float)
    layout = TensorLayout.for_grid(spec, values.shape[1], values.shape[2])
    full = layout.analyze(values)
    logger.info(f"🔄 Tensor transform: {values.shape[0]} functions -> K={layout.size}")
    survivors = spike_filter(full, spike_ratio)
    # energy is judged against the de-spiked functions
    despiked = full[:, survivors]
    padded = np.zeros_like(full)
    padded[:, survivors] = despiked
    result = compress(padded, energy_threshold, available=survivors)
    basis = wavelet_basis(layout, result.retained, full)
    coefficients = full[:, result.retained]

    reference = layout.synthesize(padded).reshape(values.shape[0], -1)
    rebuilt = basis.synthesize(coefficients)
    norms = np.linalg.norm(reference, axis=1)
    errors = np.linalg.norm(reference - rebuilt, axis=1) / np.where(norms > 0, norms, 1.0)
    if errors.max() > epsilon:
        logger.warning(f"⚠️ Basis is not near-lossless: worst relative error {errors.max():.4g} > {epsilon}")
    report = BasisReport(
        n_full=layout.size,
        n_after_spike=int(survivors.size),
        n_retained=int(result.retained.size),
        min_energy=result.min_fraction,
        mean_energy=result.mean_fraction,
        compression_ratio=float(result.compression_ratio),
        max_relative_error=float(errors.max()),
    )
    return basis, coefficients, report
