"""Gap-coordinate grids over the ordered simplex and cell-mass fields.

A point 0 <= s_1 <= ... <= s_N is stored through its gaps u_1 = s_1,
u_k = s_k - s_{k-1}. Each gap axis has M cells of width h; the last cell is
an overflow sink for everything beyond (M-1)h. Fields store cell masses.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError
from .model import RateSpec

FIELD_MAGIC = b"RNWL"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True)
class GapGrid:
    N: int
    h: float
    M: int

    def __post_init__(self):
        if self.N < 1 or self.M < 2 or not self.h > 0:
            raise ArgumentError(f"invalid grid N={self.N}, h={self.h}, M={self.M}")

    @property
    def shape(self):
        return (self.M,) * self.N

    @property
    def size(self):
        return self.M**self.N

    @property
    def extent(self):
        return self.M * self.h

    def centers(self):
        return (np.arange(self.M) + 0.5) * self.h

    def moment_points(self):
        """Cell centers, with the overflow cell at its inner edge."""
        c = self.centers()
        c[-1] = (self.M - 1) * self.h
        return c

    def axis_view(self, values, axis, ndim=None):
        """Reshape a per-axis vector to broadcast along ``axis``."""
        ndim = self.N if ndim is None else ndim
        shape = [1] * ndim
        shape[axis] = self.M
        return np.asarray(values).reshape(shape)

    def center_ages(self, i, u1_shift=0.0):
        """Age s_i at every cell center, broadcastable of rank i."""
        c = self.centers()
        s = self.axis_view(c + u1_shift, 0, i)
        for k in range(1, i):
            s = s + self.axis_view(c, k, i)
        return s

    def cell_index(self, gaps):
        """Cell multi-index of gap vector(s); raises if outside [0, M h)."""
        gaps = np.asarray(gaps, dtype=float)
        if np.any(gaps < 0) or np.any(gaps >= self.extent):
            raise DomainError(f"gaps {gaps} outside truncated domain [0, {self.extent})")
        idx = np.floor(gaps / self.h + 1e-9).astype(np.int64)
        return np.minimum(idx, self.M - 1)

    def sub(self, K):
        return GapGrid(K, self.h, self.M)


@dataclass
class DensityField:
    grid: GapGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ArgumentError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @property
    def N(self):
        return self.grid.N

    @property
    def mass(self):
        return float(self.values.sum())

    def copy(self):
        return DensityField(self.grid, self.values.copy())

    def density(self):
        """Cell-average density (mass / cell volume)."""
        return self.values / self.grid.h**self.grid.N


def ages_to_gaps(ages):
    ages = np.asarray(ages, dtype=float)
    if np.any(ages < 0) or np.any(np.diff(ages) < 0):
        raise DomainError("ages must be nonnegative and nondecreasing")
    return np.diff(ages, prepend=0.0)


def _exp_axis(grid, c):
    j = np.arange(grid.M)
    m = np.exp(-c * j * grid.h) * -np.expm1(-c * grid.h)
    m[-1] = np.exp(-c * (grid.M - 1) * grid.h)
    return m


def _outer(vectors):
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _box_axis(grid, lo, hi):
    edges = np.arange(grid.M + 1) * grid.h
    left = np.clip(edges[:-1], lo, hi)
    right = np.clip(edges[1:], lo, hi)
    return right - left


def init_density(grid: GapGrid, kind: str, **params) -> DensityField:
    """Probability field of a given kind.

    kinds:
      ``dirac`` (``ages=``): unit mass in the cell holding the age vector;
      ``product-exponential`` (``rate=c``): exact cell integrals of
      prod_k c e^{-c u_k}, tail mass in the overflow cells;
      ``uniform-box`` (``lo=``, ``hi=``, scalars or per-gap lists): uniform in
      the gap box.
    """
    kind = kind.replace("_", "-")
    if kind in ("dirac", "dirac-at"):
        ages = np.atleast_1d(np.asarray(params["ages"], dtype=float))
        if ages.shape != (grid.N,):
            raise ArgumentError(f"dirac needs {grid.N} ages, got {ages.shape}")
        idx = grid.cell_index(ages_to_gaps(ages))
        values = np.zeros(grid.shape)
        values[tuple(idx)] = 1.0
        return DensityField(grid, values)
    if kind == "product-exponential":
        c = float(params.get("rate", params.get("c", 1.0)))
        if not c > 0:
            raise DomainError("product-exponential rate must be positive")
        values = _outer([_exp_axis(grid, c)] * grid.N)
    elif kind == "uniform-box":
        lo = np.broadcast_to(np.asarray(params["lo"], dtype=float), (grid.N,))
        hi = np.broadcast_to(np.asarray(params["hi"], dtype=float), (grid.N,))
        if np.any(hi <= lo):
            raise DomainError("uniform-box is empty")
        if np.any(lo < 0) or np.any(hi > grid.extent):
            raise DomainError(f"uniform-box outside [0, {grid.extent}]")
        values = _outer([_box_axis(grid, l, u) for l, u in zip(lo, hi)])
    else:
        raise ArgumentError(f"unknown initial density kind {kind!r}")
    values = np.asarray(values, dtype=np.float64).reshape(grid.shape)
    return DensityField(grid, values / values.sum())


def _sum_last(values):
    return np.ascontiguousarray(values.sum(axis=-1))


def marginal(field: DensityField, K: int) -> DensityField:
    """Sum out gap axes K+1..N, one trailing axis at a time."""
    if not 1 <= K <= field.N:
        raise ArgumentError(f"marginal order K={K} outside 1..{field.N}")
    v = field.values
    for _ in range(field.N - K):
        v = _sum_last(v)
    return DensityField(field.grid.sub(K), v)


def axis_marginal(field: DensityField, axis: int):
    """1-D marginal along one gap axis."""
    others = tuple(k for k in range(field.N) if k != axis)
    return field.values.sum(axis=others) if others else field.values.copy()


def sigma_weights(N):
    """c_k = sum_{i=k}^N 2^{-i}, so that sigma_N = sum_k c_k u_k."""
    w = 0.5 ** np.arange(1, N + 1)
    return np.cumsum(w[::-1])[::-1]


def sigma_moment(field: DensityField) -> float:
    """sum over cells of mass * sigma_N at cell-center ages.

    Overflow cells are evaluated at their inner edge, so the result is a lower
    bound whenever they carry mass.
    """
    pts = field.grid.moment_points()
    cw = sigma_weights(field.N)
    return float(sum(cw[k] * np.dot(axis_marginal(field, k), pts) for k in range(field.N)))


def _check_same_grid(f, g):
    if f.grid != g.grid:
        raise ArgumentError(f"grid mismatch: {f.grid} vs {g.grid}")


def l1_distance(f: DensityField, g: DensityField) -> float:
    _check_same_grid(f, g)
    return float(np.abs(f.values - g.values).sum())


def rate_table(spec: RateSpec, grid: GapGrid, first=1, last=None, u1_shift=0.0):
    """sum_{i=first}^{last} phi_i at cell ages, full grid shape.

    ``u1_shift`` moves the first gap coordinate off the cell center.
    """
    last = grid.N if last is None else last
    spec.check_range(last)
    table = np.zeros(grid.shape)
    for i in range(first, last + 1):
        comp = spec.component(i)
        s_i = grid.center_ages(i, u1_shift)
        if comp.parametric:
            w, b0, b1, lo, hi = comp.coefficients
            term = w * np.clip(b0 + b1 * s_i, lo, hi)
        else:
            cols = []
            for k in range(1, i + 1):
                s_k = grid.center_ages(k, u1_shift)
                s_k = s_k.reshape(s_k.shape + (1,) * (i - k))
                cols.append(np.broadcast_to(s_k, (grid.M,) * i).reshape(-1))
            term = comp(np.stack(cols, axis=1)).reshape((grid.M,) * i)
        table += np.reshape(term, np.shape(term) + (1,) * (grid.N - np.ndim(term)))
    return table


def coupling_term(field: DensityField, spec: RateSpec, K: int) -> DensityField:
    """Tail-rate flux E_N^(K): K-marginal of (sum_{i>K} phi_i) * mass."""
    if not 1 <= K < field.N:
        raise ArgumentError(f"coupling term needs 1 <= K < N, got K={K}, N={field.N}")
    tail = rate_table(spec, field.grid, K + 1, field.N)
    return marginal(DensityField(field.grid, tail * field.values), K)


# persistence -------------------------------------------------------------------

def dump_field(path, field: DensityField):
    g = field.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, g.N, g.M, g.h))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C"))


def load_field(path) -> DensityField:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, N, M, h = _HEADER.unpack(head)
        if magic != FIELD_MAGIC or version != FIELD_VERSION:
            raise ArgumentError(f"{path}: not a field dump (magic {magic!r}, version {version})")
        data = np.frombuffer(fh.read(), dtype="<f8")
    grid = GapGrid(N, h, M)
    if data.size != grid.size:
        raise ArgumentError(f"{path}: expected {grid.size} cells, found {data.size}")
    return DensityField(grid, data.reshape(grid.shape).astype(np.float64))


def fmt(x):
    return format(float(x), ".17g")


def write_marginal_csv(path, field: DensityField):
    """Cell-center ages, mass and density for fields with N <= 2."""
    g = field.grid
    if g.N > 2:
        raise ArgumentError("CSV export supports K <= 2; take a marginal first")
    c = g.centers()
    vol = g.h**g.N
    with open(path, "w") as fh:
        if g.N == 1:
            fh.write("s1,mass,density\n")
            for j in range(g.M):
                m = field.values[j]
                fh.write(f"{fmt(c[j])},{fmt(m)},{fmt(m / vol)}\n")
        else:
            fh.write("s1,s2,mass,density\n")
            for j1 in range(g.M):
                for j2 in range(g.M):
                    m = field.values[j1, j2]
                    fh.write(f"{fmt(c[j1])},{fmt(c[j1] + c[j2])},{fmt(m)},{fmt(m / vol)}\n")
