"""Clamped B-spline bases on [0, 1] and difference penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NUM_BASIS = 8
DEFAULT_DEGREE = 3
DEFAULT_PENALTY_ORDER = 2
DEFAULT_GRID_SIZE = 1001
MIN_CENTERING_GRID = 100


@dataclass(frozen=True)
class SplineBasis:
    degree: int
    knots: tuple
    penalty_order: int = DEFAULT_PENALTY_ORDER

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def interior_knots(self) -> np.ndarray:
        k = np.asarray(self.knots)
        return k[self.degree + 1:len(k) - self.degree - 1]

    def __call__(self, tau) -> np.ndarray:
        return evaluate_basis(self, tau)

    def describe(self) -> str:
        inner = ", ".join(f"{k:.6g}" for k in self.interior_knots)
        return (f"B-spline basis: degree={self.degree} J={self.num_basis} "
                f"penalty_order={self.penalty_order}\n"
                f"interior knots: [{inner}]\n")


@dataclass(frozen=True)
class PenaltyMatrix:
    order: int
    coefficients: np.ndarray

    def quadratic_form(self, coef) -> float:
        coef = np.asarray(coef, dtype=float)
        return float(coef @ self.coefficients @ coef)


@dataclass(frozen=True)
class CenteredBasis:
    """Basis evaluated on a dense grid with grid-mean removed per column."""

    basis: SplineBasis
    grid: np.ndarray
    table: np.ndarray
    offsets: np.ndarray

    def evaluate(self, tau) -> np.ndarray:
        return evaluate_basis(self.basis, tau) - self.offsets


def make_basis(num_basis: int = DEFAULT_NUM_BASIS, degree: int = DEFAULT_DEGREE,
               penalty_order: int = DEFAULT_PENALTY_ORDER) -> SplineBasis:
    """Equally spaced interior knots, boundary knots of multiplicity degree+1."""
    if degree < 1:
        raise ValueError("degree must be at least 1")
    if num_basis < degree + 1:
        raise ValueError(f"need J >= degree + 1 = {degree + 1}, got J={num_basis}")
    n_interior = num_basis - degree - 1
    interior = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return SplineBasis(degree=degree, knots=tuple(float(k) for k in knots), penalty_order=penalty_order)


def evaluate_basis(basis: SplineBasis, tau) -> np.ndarray:
    """Values of all J basis functions at ``tau``.

    Returns shape (J,) for scalar input and (n, J) otherwise. Uses the
    triangular Cox-de Boor recursion over the nonzero functions of each
    knot span.
    """
    t = np.asarray(tau, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t).ravel()
    if t.size and (np.nanmin(t) < 0.0 or np.nanmax(t) > 1.0 or np.isnan(t).any()):
        raise ValueError("tau must lie in [0, 1]")
    U = np.asarray(basis.knots)
    p = basis.degree
    J = basis.num_basis

    # span index i with U[i] <= t < U[i+1]; t == 1 goes to the last nonempty span
    span = np.searchsorted(U, t, side="right") - 1
    span = np.clip(span, p, J - 1)

    n = t.size
    N = np.zeros((n, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, p + 1))
    right = np.zeros((n, p + 1))
    for j in range(1, p + 1):
        left[:, j] = t - U[span + 1 - j]
        right[:, j] = U[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((n, J))
    cols = span[:, None] - p + np.arange(p + 1)[None, :]
    np.put_along_axis(out, cols, N, axis=1)
    return out[0] if scalar else out


def difference_operator(num_basis: int, order: int) -> np.ndarray:
    return np.diff(np.eye(num_basis), n=order, axis=0)


def penalty_matrix(basis: SplineBasis, order: int | None = None) -> PenaltyMatrix:
    """D'D for the ``order``-th difference operator on coefficient sequences."""
    order = basis.penalty_order if order is None else order
    J = basis.num_basis
    if order < 0 or order >= J:
        raise ValueError(f"penalty order must satisfy 0 <= order < J={J}, got {order}")
    D = difference_operator(J, order)
    return PenaltyMatrix(order=order, coefficients=D.T @ D)


def center_basis(basis: SplineBasis, grid=None) -> CenteredBasis:
    """Remove each column's mean over a dense grid on [0, 1].

    Any coefficient combination of the centered columns then has grid mean
    zero, which is how the labor component is pinned down relative to the
    country shifts.
    """
    if grid is None:
        grid = np.linspace(0.0, 1.0, DEFAULT_GRID_SIZE)
    grid = np.asarray(grid, dtype=float)
    if grid.size < MIN_CENTERING_GRID:
        raise ValueError(f"centering grid needs at least {MIN_CENTERING_GRID} points, got {grid.size}")
    raw = evaluate_basis(basis, grid)
    offsets = raw.mean(axis=0)
    return CenteredBasis(basis=basis, grid=grid, table=raw - offsets, offsets=offsets)
