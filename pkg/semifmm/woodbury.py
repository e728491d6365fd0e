"""
Low-rank marginal covariance algebra.

Sigma = s I + Z diag(d) Z'. With Zt = Z diag(d)^{1/2} and C = s I_R + Zt'Zt,

    F' Sigma^{-1} F   = (F'F - (Zt'F)' C^{-1} Zt'F) / s
    log|Sigma|        = (N - R) log s + log|C|
    F' Sigma^{-2} F   = (F'F - 2 (Zt'F)' H + H' Zt'Zt H) / s^2,   H = C^{-1} Zt'F

so every quantity needed by the fitters comes from the Grams Z'Z, Z'F, F'F, which
are computed once per response.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import NumericalError


class GramCache:
    """Precomputed Grams for a fixed (Z, F) pair."""

    def __init__(self, Z: np.ndarray, F: np.ndarray):
        Z = np.asarray(Z, dtype=float)
        F = np.asarray(F, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if Z.shape[0] != F.shape[0]:
            raise NumericalError(f"Z has {Z.shape[0]} rows but F has {F.shape[0]}", code="dimension_mismatch")
        self.n_obs = F.shape[0]
        self.rank = Z.shape[1]
        self.ZtZ = Z.T @ Z
        self.ZtF = Z.T @ F
        self.FtF = F.T @ F

    def evaluate(self, column_variances: np.ndarray, s: float) -> "MarginalEval":
        d = np.asarray(column_variances, dtype=float)
        if d.shape != (self.rank,):
            raise NumericalError(f"expected {self.rank} column variances, got {d.shape}", code="dimension_mismatch")
        if not s > 0 or np.any(d < 0) or not np.all(np.isfinite(d)):
            raise NumericalError(f"invalid variances (s={s})", code="singular_sigma")
        root = np.sqrt(d)
        scaled_ZtZ = root[:, None] * self.ZtZ * root[None, :]
        scaled_ZtF = root[:, None] * self.ZtF
        if self.rank:
            C = scaled_ZtZ + s * np.eye(self.rank)
            try:
                factor = linalg.cho_factor(C, lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise NumericalError("marginal covariance is not positive definite", code="singular_sigma")
            H = linalg.cho_solve(factor, scaled_ZtF, check_finite=False)
            logdet_C = 2.0 * np.sum(np.log(np.diag(factor[0])))
        else:
            factor, H, logdet_C = None, np.zeros((0, self.FtF.shape[0])), 0.0
        return MarginalEval(
            cache=self,
            s=float(s),
            root=root,
            factor=factor,
            H=H,
            scaled_ZtZ=scaled_ZtZ,
            scaled_ZtF=scaled_ZtF,
            logdet=(self.n_obs - self.rank) * np.log(s) + logdet_C,
        )


@dataclass
class MarginalEval:
    cache: GramCache
    s: float
    root: np.ndarray
    factor: Optional[tuple]
    H: np.ndarray
    scaled_ZtZ: np.ndarray
    scaled_ZtF: np.ndarray
    logdet: float

    def quad(self) -> np.ndarray:
        """F' Sigma^{-1} F."""
        out = (self.cache.FtF - self.scaled_ZtF.T @ self.H) / self.s
        return 0.5 * (out + out.T)

    def quad2(self) -> np.ndarray:
        """F' Sigma^{-2} F."""
        c = self.cache
        out = (c.FtF - 2.0 * self.scaled_ZtF.T @ self.H + self.H.T @ self.scaled_ZtZ @ self.H) / self.s ** 2
        return 0.5 * (out + out.T)

    def cross(self) -> np.ndarray:
        """Z' Sigma^{-1} F (R x m)."""
        c = self.cache
        return (c.ZtF - c.ZtZ @ (self.root[:, None] * self.H)) / self.s

    def z_inner_diag(self) -> np.ndarray:
        """diag(Z' Sigma^{-1} Z)."""
        c = self.cache
        if not c.rank:
            return np.zeros(0)
        G = c.ZtZ * self.root[None, :]
        solved = linalg.cho_solve(self.factor, G.T, check_finite=False)
        return (np.diag(c.ZtZ) - np.einsum("ij,ji->i", G, solved)) / self.s

    def trace_inverse(self) -> float:
        """tr(Sigma^{-1})."""
        if not self.cache.rank:
            return self.cache.n_obs / self.s
        inner = linalg.cho_solve(self.factor, self.scaled_ZtZ, check_finite=False)
        return (self.cache.n_obs - float(np.trace(inner))) / self.s


def dense_marginal(Z: np.ndarray, column_variances: np.ndarray, s: float) -> np.ndarray:
    """Dense Sigma, for small problems and checks."""
    Z = np.asarray(Z, dtype=float)
    return s * np.eye(Z.shape[0]) + (Z * np.asarray(column_variances, dtype=float)) @ Z.T
