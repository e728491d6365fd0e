"""
O'Sullivan penalized splines in mixed-model form.

A cubic B-spline basis with M interior knots carries the curvature penalty
Omega_mm' = int B_m''(x) B_{m'}''(x) dx. Its spectral decomposition splits every spline into
an unpenalized straight line and M+2 independent penalized directions, so a penalized
spline fit is a linear mixed model with random effects u ~ N(0, q I) and lambda = s / q.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import NumericalError, ValidationError

ORDER = 3
NULL_SPACE_RTOL = 1e-10
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class SplineBasisDef:
    a: float
    b: float
    M: int = 5
    interior: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not self.a < self.b:
            raise ValidationError(f"spline boundary needs a < b, got [{self.a}, {self.b}]")
        if self.M < 1:
            raise ValidationError(f"need at least one interior knot, got M={self.M}")
        if self.interior is not None:
            knots = tuple(float(v) for v in self.interior)
            if len(knots) != self.M:
                raise ValidationError(f"expected {self.M} interior knots, got {len(knots)}")
            if any(np.diff(knots) <= 0) or knots[0] <= self.a or knots[-1] >= self.b:
                raise ValidationError("interior knots must increase strictly inside (a, b)")
            object.__setattr__(self, "interior", knots)

    @classmethod
    def from_data(cls, x: Sequence[float], M: int = 5) -> "SplineBasisDef":
        """Equally spaced interior knots over the observed range."""
        x = np.asarray(x, dtype=float)
        return cls(a=float(x.min()), b=float(x.max()), M=M)

    @property
    def interior_knots(self) -> np.ndarray:
        if self.interior is not None:
            return np.asarray(self.interior)
        return np.linspace(self.a, self.b, self.M + 2)[1:-1]

    @property
    def knots(self) -> np.ndarray:
        return np.concatenate([[self.a] * (ORDER + 1), self.interior_knots, [self.b] * (ORDER + 1)])

    @property
    def n_basis(self) -> int:
        return self.M + ORDER + 1

    def to_dict(self):
        return {"a": self.a, "b": self.b, "M": self.M, "interior": list(self.interior_knots)}


def _check_range(x: np.ndarray, sdef: SplineBasisDef) -> np.ndarray:
    span = sdef.b - sdef.a
    low, high = sdef.a - _RANGE_TOL * span, sdef.b + _RANGE_TOL * span
    outside = (x < low) | (x > high)
    if np.any(outside):
        raise ValidationError(
            f"{int(outside.sum())} value(s) outside the spline range [{sdef.a}, {sdef.b}], "
            f"e.g. {float(x[outside][0])}",
            code="out_of_range",
        )
    return np.clip(x, sdef.a, sdef.b)


def _basis_curve(sdef: SplineBasisDef, nu: int = 0) -> BSpline:
    curve = BSpline(sdef.knots, np.eye(sdef.n_basis), ORDER, extrapolate=False)
    return curve.derivative(nu) if nu else curve


def bspline_design(x: Sequence[float], sdef: SplineBasisDef, nu: int = 0) -> np.ndarray:
    """N x (M+4) matrix of B_m^(nu)(x_i)."""
    x = _check_range(np.atleast_1d(np.asarray(x, dtype=float)), sdef)
    return np.nan_to_num(_basis_curve(sdef, nu)(x))


def penalty_matrix(sdef: SplineBasisDef) -> np.ndarray:
    """Curvature penalty by 3-point Gauss-Legendre on every knot interval (exact)."""
    nodes, weights = np.polynomial.legendre.leggauss(3)
    breaks = np.unique(sdef.knots)
    second = _basis_curve(sdef, 2)
    omega = np.zeros((sdef.n_basis, sdef.n_basis))
    for left, right in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (right - left)
        points = left + half * (nodes + 1.0)
        values = np.nan_to_num(second(points))
        omega += half * (values.T * weights) @ values
    return 0.5 * (omega + omega.T)


@dataclass(frozen=True)
class DemmlerReinsch:
    omega: np.ndarray
    x_lin: np.ndarray
    z_omega: np.ndarray
    eigenvalues: np.ndarray

    @property
    def z_map(self) -> np.ndarray:
        return self.z_omega / np.sqrt(self.eigenvalues)

    @property
    def n_random(self) -> int:
        return self.eigenvalues.size

    def split(self, nu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(beta, u) with nu = X_Omega beta + Z_map u."""
        nu = np.asarray(nu, dtype=float)
        return self.x_lin.T @ nu, np.sqrt(self.eigenvalues) * (self.z_omega.T @ nu)

    def combine(self, beta: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.x_lin @ np.asarray(beta, dtype=float) + self.z_map @ np.asarray(u, dtype=float)


def demmler_reinsch(omega: np.ndarray) -> DemmlerReinsch:
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise NumericalError("penalty matrix must be square", code="eigen_failure")
    if not np.allclose(omega, omega.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(omega).max())):
        raise NumericalError("penalty matrix is not symmetric", code="eigen_failure")
    try:
        values, vectors = linalg.eigh(omega)
    except linalg.LinAlgError as e:
        raise NumericalError(f"eigen-decomposition of the penalty failed: {e}", code="eigen_failure")
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    positive = values > NULL_SPACE_RTOL * values[0]
    n_null = int((~positive).sum())
    if n_null != 2:
        raise NumericalError(f"penalty null space has dimension {n_null}, expected 2", code="eigen_failure")
    return DemmlerReinsch(
        omega=omega,
        x_lin=vectors[:, ~positive],
        z_omega=vectors[:, positive],
        eigenvalues=values[positive],
    )


@dataclass(frozen=True)
class SplineKit:
    """A basis definition with its penalty and mixed-model reparameterization."""

    sdef: SplineBasisDef
    dr: DemmlerReinsch

    def design(self, x: Sequence[float]) -> np.ndarray:
        return bspline_design(x, self.sdef)

    def z_design(self, x: Sequence[float]) -> np.ndarray:
        """Z_B = B(x) Z_map, the random-effect design of the penalized part."""
        return self.design(x) @ self.dr.z_map

    def derivative(self, x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        return derivative_design(x, self.sdef, self.dr)


@lru_cache(maxsize=64)
def spline_kit(sdef: SplineBasisDef) -> SplineKit:
    return SplineKit(sdef=sdef, dr=demmler_reinsch(penalty_matrix(sdef)))


def derivative_design(x: Sequence[float], sdef: SplineBasisDef, dr: DemmlerReinsch) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise d/dx of the linear column (x) and of Z_B(x)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d_basis = bspline_design(x, sdef, nu=1)
    return np.ones((x.size, 1)), d_basis @ dr.z_map


def penalized_fit(B: np.ndarray, omega: np.ndarray, y: np.ndarray, lam: float, W: Optional[np.ndarray] = None) -> np.ndarray:
    """Coefficients (B'WB + lambda Omega)^{-1} B'W y."""
    weighted = B.T if W is None else B.T @ W
    try:
        return linalg.solve(weighted @ B + lam * omega, weighted @ y, assume_a="sym")
    except linalg.LinAlgError as e:
        raise NumericalError(f"penalized system is singular: {e}", code="singular")


def df_from_gram(gram: np.ndarray, omega: np.ndarray, lam: float) -> float:
    """trace{(G + lambda Omega)^{-1} G} for G = B'WB.

    Uses the generalized eigenvalues kappa of (Omega, G) so DF = sum 1 / (1 + lambda kappa),
    which stays accurate for extreme lambda.
    """
    if not lam > 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    gram = 0.5 * (gram + gram.T)
    try:
        kappa = linalg.eigh(omega, gram, eigvals_only=True)
    except linalg.LinAlgError:
        # rank-deficient design: fall back to the dense trace
        try:
            inner = linalg.solve(gram + lam * omega, gram, assume_a="sym")
        except linalg.LinAlgError as e:
            raise NumericalError(f"smoother system is singular: {e}", code="singular")
        return float(np.trace(inner))
    kappa = np.clip(kappa, 0.0, None)
    # rounding leaves the two null-space eigenvalues slightly above zero
    kappa[kappa < NULL_SPACE_RTOL * kappa.max()] = 0.0
    return float(np.sum(1.0 / (1.0 + lam * kappa)))


def df_lambda(B: np.ndarray, omega: np.ndarray, lam: float, W: Optional[np.ndarray] = None) -> float:
    """trace{B (B'WB + lambda Omega)^{-1} B'W}, W = I when omitted."""
    B = np.asarray(B, dtype=float)
    gram = B.T @ B if W is None else B.T @ np.asarray(W, dtype=float) @ B
    return df_from_gram(gram, omega, lam)
