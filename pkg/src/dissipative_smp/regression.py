"""Least-squares projection on polynomial functions of the state.

Conditional expectations given the state at a grid node are approximated
by regressing on standardized monomials of that state. Standardization is
recomputed at every node; components with (numerically) zero spread are
treated as constants and their monomials dropped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidParams, NonFiniteRegression, SingularDesignMatrix

FAMILIES = ("polynomial_total_degree", "tensor_polynomial")
MAX_CONDITION = 1e10
LOW_R2 = 0.9


@lru_cache(maxsize=None)
def _exponents(family: str, degree: int, n: int) -> tuple:
    rng = range(degree + 1)
    exps = [e for e in itertools.product(rng, repeat=n) if family == "tensor_polynomial" or sum(e) <= degree]
    exps.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return tuple(exps)


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial regression basis in standardized state coordinates."""

    family: str = "polynomial_total_degree"
    degree: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParams(f"basis family must be one of {FAMILIES}")
        if self.degree < 1:
            raise InvalidParams("basis degree must be at least 1")

    def exponents(self, n: int) -> tuple:
        return _exponents(self.family, self.degree, n)

    def size(self, n: int) -> int:
        return len(self.exponents(n))

    def standardize(self, x: np.ndarray):
        """Per-component mean and std; std is 0 for constant components."""
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12 * (1.0 + np.abs(mean)), std, 0.0)
        return mean, std

    def design(self, x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
        """Design matrix with columns for every monomial active under ``std``."""
        n = x.shape[1]
        keep = [e for e in self.exponents(n) if all(std[i] > 0 or e[i] == 0 for i in range(n))]
        safe = np.where(std > 0, std, 1.0)
        z = (x - mean) / safe
        powers = [[np.ones(x.shape[0])] for _ in range(n)]
        for i in range(n):
            for d in range(1, self.degree + 1):
                powers[i].append(powers[i][-1] * z[:, i])
        cols = []
        for e in keep:
            col = powers[0][e[0]]
            for i in range(1, n):
                if e[i]:
                    col = col * powers[i][e[i]]
            cols.append(col)
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class RegressionFit:
    """Coefficients of a multi-output projection fitted at one node."""

    basis: RegressionBasis
    mean: np.ndarray
    std: np.ndarray
    coef: np.ndarray
    r2: np.ndarray
    condition: float

    def design(self, x: np.ndarray) -> np.ndarray:
        return self.basis.design(x, self.mean, self.std)

    def predict(self, x: np.ndarray, design: np.ndarray = None) -> np.ndarray:
        phi = self.design(x) if design is None else design
        return phi @ self.coef


class Projector:
    """Reusable least-squares solver for one design matrix.

    Normal equations are solved with the Gram matrix scaled by 1/M; the
    design condition number is the square root of the Gram condition.
    """

    def __init__(self, basis: RegressionBasis, x: np.ndarray):
        self.basis = basis
        if not np.all(np.isfinite(x)):
            raise NonFiniteRegression("non-finite regressors")
        self.mean, self.std = basis.standardize(x)
        self.phi = basis.design(x, self.mean, self.std)
        M, ncols = self.phi.shape
        if M < ncols:
            raise SingularDesignMatrix(f"{M} paths cannot fit {ncols} basis functions")
        gram = (self.phi.T @ self.phi) / M
        if not np.all(np.isfinite(gram)):
            raise NonFiniteRegression("non-finite design matrix")
        eig = np.linalg.eigvalsh(gram)
        self.condition = float(np.sqrt(eig[-1] / eig[0])) if eig[0] > 0 else np.inf
        if not self.condition <= MAX_CONDITION:
            raise SingularDesignMatrix(f"design condition number {self.condition:.3e} exceeds {MAX_CONDITION:.0e}")
        self._chol = np.linalg.cholesky(gram)
        self._M = M

    def fit(self, y: np.ndarray) -> RegressionFit:
        """Project columns of ``y`` (shape (M,) or (M, c)) on the basis."""
        y2 = y.reshape(self._M, -1)
        rhs = (self.phi.T @ y2) / self._M
        tmp = np.linalg.solve(self._chol, rhs)
        coef = np.linalg.solve(self._chol.T, tmp)
        if not np.all(np.isfinite(coef)):
            raise NonFiniteRegression("non-finite regression coefficients")
        fitted = self.phi @ coef
        ss_res = np.sum((y2 - fitted) ** 2, axis=0)
        centred = y2 - y2.mean(axis=0)
        ss_tot = np.sum(centred * centred, axis=0)
        scale = np.maximum(np.sum(y2 * y2, axis=0), 1e-300)
        r2 = np.where(ss_tot > 1e-20 * scale, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)
        return RegressionFit(self.basis, self.mean, self.std, coef, r2, self.condition)

    def fitted(self, fit: RegressionFit) -> np.ndarray:
        return self.phi @ fit.coef
