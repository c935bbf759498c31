"""Uniform space/time grids and atomic probability measures living on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AsymmetricGrid, GridMismatch, NegativeWeight, NonFiniteData, ValidationError, ZeroMass

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform tensor grid on [x_min, x_max]^dimension.

    ``n_nodes`` is the node count per axis. For ``dimension == 2`` nodes are
    enumerated row-major, first coordinate slowest.
    """

    x_min: float
    x_max: float
    n_nodes: int
    dimension: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.x_min) and np.isfinite(self.x_max)):
            raise NonFiniteData("grid bounds must be finite")
        if not self.x_min < self.x_max:
            raise ValidationError("x_min must be smaller than x_max")
        if int(self.n_nodes) != self.n_nodes or self.n_nodes < 3:
            raise ValidationError("need at least 3 nodes per axis")
        if self.dimension not in (1, 2):
            raise ValidationError("dimension must be 1 or 2")
        object.__setattr__(self, "n_nodes", int(self.n_nodes))

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_nodes - 1)

    @property
    def axis(self) -> np.ndarray:
        """Node coordinates along one axis; the last entry is x_max exactly."""
        return np.linspace(self.x_min, self.x_max, self.n_nodes)

    @property
    def size(self) -> int:
        return self.n_nodes ** self.dimension

    @property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (n,) in 1D and (n*n, 2) in 2D."""
        a = self.axis
        if self.dimension == 1:
            return a
        xx, yy = np.meshgrid(a, a, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @property
    def points(self) -> np.ndarray:
        """Node coordinates always as an (size, dimension) array."""
        return self.nodes.reshape(self.size, self.dimension)

    @property
    def radius(self) -> float:
        return max(abs(self.x_min), abs(self.x_max))

    @property
    def is_symmetric(self) -> bool:
        return abs(self.x_min + self.x_max) <= 1e-12 * max(1.0, self.radius)

    def node(self, i: int) -> float:
        return self.x_min + i * self.h

    def index_of(self, x: float, tol: float = 1e-9) -> int:
        """Index of the 1D node at ``x``; raises if ``x`` is not a node."""
        i = int(round((x - self.x_min) / self.h))
        if i < 0 or i >= self.n_nodes or abs(self.node(i) - x) > tol * max(1.0, self.h):
            raise ValidationError(f"{x} is not a grid node")
        return i

    @classmethod
    def from_spacing(cls, x_min: float, x_max: float, h: float, dimension: int = 1) -> "SpaceGrid":
        n = (x_max - x_min) / h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValidationError("spacing does not divide the interval")
        return cls(x_min, x_max, int(round(n)) + 1, dimension)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError("horizon must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValidationError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    @classmethod
    def with_max_dt(cls, T: float, dt_max: float, multiple_of: int = 1) -> "TimeGrid":
        n = int(np.ceil(T / dt_max - 1e-12))
        n = max(multiple_of, -(-n // multiple_of) * multiple_of)
        return cls(T, n)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Probability vector over the nodes of a SpaceGrid."""

    grid: SpaceGrid
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if w.shape[0] != self.grid.size:
            raise GridMismatch(f"expected {self.grid.size} weights, got {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise NonFiniteData("weights must be finite")
        if np.any(w < 0):
            raise NegativeWeight("weights must be nonnegative")
        if abs(w.sum() - 1.0) > _MASS_TOL:
            raise ValidationError(f"weights sum to {w.sum():.15g}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    @property
    def mean(self):
        m = self.weights @ self.grid.points
        return float(m[0]) if self.grid.dimension == 1 else m

    @property
    def variance(self) -> float:
        pts = self.grid.points
        c = pts - self.weights @ pts
        return float(self.weights @ np.sum(c * c, axis=1))

    def atoms(self):
        """Support coordinates and their masses."""
        s = self.support
        return self.grid.points[s] if self.grid.dimension == 2 else self.grid.nodes[s], self.weights[s]

    def __eq__(self, other):
        return (isinstance(other, GridMeasure) and self.grid == other.grid
                and np.array_equal(self.weights, other.weights))

    __hash__ = None


def make_measure(raw_weights, grid: SpaceGrid) -> GridMeasure:
    """Normalize nonnegative raw weights into a GridMeasure."""
    w = np.asarray(raw_weights, dtype=float).ravel()
    if w.shape[0] != grid.size:
        raise GridMismatch(f"expected {grid.size} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise NonFiniteData("weights must be finite")
    if np.any(w < 0):
        raise NegativeWeight("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ZeroMass("total mass is zero")
    w = w / total
    # pin the sum to 1 at machine precision
    w[np.argmax(w)] += 1.0 - w.sum()
    return GridMeasure(grid, w)


def dirac(grid: SpaceGrid, x: float) -> GridMeasure:
    w = np.zeros(grid.size)
    w[grid.index_of(x)] = 1.0
    return GridMeasure(grid, w)


def atomic(grid: SpaceGrid, locations, masses) -> GridMeasure:
    """Measure with given masses at given node coordinates (1D)."""
    w = np.zeros(grid.size)
    for x, m in zip(np.atleast_1d(locations), np.atleast_1d(masses)):
        w[grid.index_of(float(x))] += m
    return make_measure(w, grid)


def gaussian(grid: SpaceGrid, mean: float, std: float) -> GridMeasure:
    """Gaussian density sampled at the nodes and renormalized (1D)."""
    if std <= 0:
        raise ValidationError("std must be positive")
    x = grid.nodes
    return make_measure(np.exp(-0.5 * ((x - mean) / std) ** 2), grid)


def gaussian_mixture(grid: SpaceGrid, means, stds, mix) -> GridMeasure:
    x = grid.nodes
    w = np.zeros_like(x)
    for m, s, p in zip(means, stds, mix):
        w += p * np.exp(-0.5 * ((x - m) / s) ** 2) / s
    return make_measure(w, grid)


def moment(m: GridMeasure, order: int = 1, absolute: bool = False):
    """Sum of w_i x_i**order (componentwise in 2D), or |x_i|**order."""
    if order < 1 or int(order) != order:
        raise ValidationError("order must be a positive integer")
    if absolute:
        r = np.linalg.norm(m.grid.points, axis=1)
        return float(m.weights @ r ** order)
    vals = m.weights @ m.grid.points ** order
    return float(vals[0]) if m.grid.dimension == 1 else vals


def flip(m: GridMeasure) -> GridMeasure:
    """Reflection x -> -x; requires a grid symmetric about the origin."""
    if not m.grid.is_symmetric:
        raise AsymmetricGrid("flip needs x_min == -x_max")
    if m.grid.dimension == 1:
        w = m.weights[::-1]
    else:
        n = m.grid.n_nodes
        w = m.weights.reshape(n, n)[::-1, ::-1].ravel()
    return GridMeasure(m.grid, w.copy())


def mollifier_kernel(h: float, eps: float) -> np.ndarray:
    """Symmetric discrete kernel supported on [-eps, eps], unit mass.

    Gaussian profile with standard deviation eps/2, truncated at eps. Returns
    ``[1.0]`` when eps < h.
    """
    r = int(np.floor(eps / h + 1e-12))
    if r < 1:
        return np.ones(1)
    j = np.arange(-r, r + 1) * h
    k = np.exp(-0.5 * (j / (0.5 * eps)) ** 2)
    k = 0.5 * (k + k[::-1])
    return k / k.sum()


def mollify(m: GridMeasure, eps: float) -> GridMeasure:
    """Convolve with a symmetric kernel; overflow mass is clamped to the boundary node."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    k = mollifier_kernel(m.grid.h, eps)
    if k.size == 1:
        return m
    r = k.size // 2
    n = m.grid.n_nodes

    def conv_axis(w):
        full = np.convolve(w, k)  # length n + 2r, full[i + r] is node i
        out = full[r:r + n].copy()
        out[0] += full[:r].sum()
        out[-1] += full[r + n:].sum()
        return out

    if m.grid.dimension == 1:
        w = conv_axis(m.weights)
    else:
        w = m.weights.reshape(n, n)
        w = np.apply_along_axis(conv_axis, 0, w)
        w = np.apply_along_axis(conv_axis, 1, w).ravel()
    return make_measure(np.maximum(w, 0.0), m.grid)


def w1_metric(m1: GridMeasure, m2: GridMeasure) -> float:
    """1D Wasserstein-1 distance via cumulative distribution functions."""
    if m1.grid != m2.grid:
        raise GridMismatch("measures live on different grids")
    if m1.grid.dimension != 1:
        raise ValidationError("w1_metric is one-dimensional")
    d = np.cumsum(m1.weights - m2.weights)[:-1]
    return float(np.abs(d).sum() * m1.grid.h)


def binned_measure(samples, grid: SpaceGrid, weights=None) -> GridMeasure:
    """Law of (weighted) 1D samples, split linearly between neighbouring nodes.

    Linear splitting keeps the sample mean exactly for samples inside the hull.
    """
    s = np.clip(np.asarray(samples, dtype=float), grid.x_min, grid.x_max)
    p = np.ones(s.shape) if weights is None else np.asarray(weights, dtype=float)
    u = (s - grid.x_min) / grid.h
    i = np.clip(np.floor(u).astype(np.int64), 0, grid.n_nodes - 2)
    frac = u - i
    w = np.bincount(i, weights=p * (1.0 - frac), minlength=grid.n_nodes)
    w += np.bincount(i + 1, weights=p * frac, minlength=grid.n_nodes)
    return make_measure(w, grid)
