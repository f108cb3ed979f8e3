"""Cell-binned full neighbor lists and spatial sorting with permutation records."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .clock import SERIAL, ChunkRunner
from .core import AtomStore, Decomposition, SimParams

STENCIL = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)

# atoms may sit this far outside the binned region through rounding alone
_EDGE_TOL = 1e-9


class BinningError(RuntimeError):
    """An atom lies outside the region covered by the cell grid (missed exchange)."""


@dataclass(frozen=True)
class CellGrid:
    """Bins covering the subdomain plus a halo of ``width`` on every side."""

    origin: np.ndarray
    bins: tuple[int, int, int]
    side: np.ndarray

    @classmethod
    def for_subdomain(cls, decomp: Decomposition, width: float) -> CellGrid:
        origin = decomp.lo - width
        extent = decomp.hi - decomp.lo + 2 * width
        bins = tuple(int(max(1, np.floor(e / width))) if width > 0 else 1 for e in extent)
        return cls(origin, bins, extent / np.array(bins))

    @property
    def n_bins(self) -> int:
        return self.bins[0] * self.bins[1] * self.bins[2]

    def coords(self, x: np.ndarray) -> np.ndarray:
        rel = (x - self.origin) / self.side
        c = np.floor(rel).astype(np.int64)
        nb = np.array(self.bins)
        bad = (rel < -_EDGE_TOL) | (rel > nb + _EDGE_TOL)
        if bad.any():
            k = int(np.argwhere(bad.any(axis=1))[0, 0])
            raise BinningError(
                f"atom slot {k} at {x[k].tolist()} is outside the binned region "
                f"[{self.origin.tolist()}, {(self.origin + nb * self.side).tolist()}]"
            )
        return np.clip(c, 0, nb - 1)

    def flat(self, coords: np.ndarray) -> np.ndarray:
        # row-major: z fastest
        nx, ny, nz = self.bins
        return (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]


@dataclass
class NeighborList:
    """Full neighbor lists of the owned atoms in CSR form.

    Neighbors of owned atom ``i`` are ``neighbors[offsets[i]:offsets[i + 1]]``;
    ``owners`` repeats ``i`` once per entry so kernels avoid recomputing it.
    """

    offsets: np.ndarray
    neighbors: np.ndarray
    owners: np.ndarray
    n_local: int
    n_total: int
    build_iteration: int = 0
    version: int = 0

    def of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i] : self.offsets[i + 1]]

    def as_sets(self) -> list[set[int]]:
        return [set(self.of(i).tolist()) for i in range(self.n_local)]

    @property
    def n_entries(self) -> int:
        return len(self.neighbors)


def neighbor_build(
    atoms: AtomStore,
    params: SimParams,
    decomp: Decomposition,
    runner: ChunkRunner = SERIAL,
    iteration: int = 0,
    version: int = 0,
) -> NeighborList:
    """All pairs (owned i, any j) with ``|x_i - x_j| < r_cut + skin``.

    Candidates for atom i are the contents of the 27 bins around i's bin, visited in
    stencil order and, within a bin, in slot order.  They are generated atom-major so
    the lists come out grouped by owner without a sort.
    """
    cutoff = params.halo_width
    x = atoms.x
    n_local, n_total = atoms.n_local, len(x)
    grid = CellGrid.for_subdomain(decomp, cutoff)
    coords = grid.coords(x)
    flat = grid.flat(coords)
    order = np.argsort(flat, kind="stable")
    # one extra always-empty bin stands in for stencil cells off the grid
    counts = np.bincount(flat, minlength=grid.n_bins + 1)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    nb = np.array(grid.bins)
    cut2 = cutoff * cutoff
    xs, ys, zs = (np.ascontiguousarray(x[:, c]) for c in range(3))
    # single-precision prefilter with a margin well above its rounding error;
    # survivors are re-tested exactly in double precision
    rel = x - grid.origin
    sorted32 = [np.ascontiguousarray(rel[order, c], dtype=np.float32) for c in range(3)]
    own32 = [np.ascontiguousarray(rel[:n_local, c], dtype=np.float32) for c in range(3)]
    loose2 = np.float32((cutoff + 1e-4) ** 2)
    # offset of each atom inside its bin, used to skip stencil bins out of reach
    inner = rel - coords * grid.side
    steps = np.array([-1, 0, 1])

    def build_chunk(a: int, b: int):
        m = b - a
        # per axis: neighbor bin coordinate, in-grid flag and squared gap for steps -1, 0, +1;
        # broadcasting the three axes gives the 27 stencil cells in STENCIL order
        nc = coords[a:b, :, None] + steps
        ok = (nc >= 0) & (nc < nb[None, :, None])
        gap = np.stack([inner[a:b], np.zeros((m, 3)), grid.side - inner[a:b]], axis=2)
        gap *= gap
        reach = gap[:, 0, :, None, None] + gap[:, 1, None, :, None] + gap[:, 2, None, None, :]
        valid = ok[:, 0, :, None, None] & ok[:, 1, None, :, None] & ok[:, 2, None, None, :]
        valid &= reach < cut2 * (1 + 1e-9)
        fl = (nc[:, 0, :, None, None] * nb[1] + nc[:, 1, None, :, None]) * nb[2] + nc[:, 2, None, None, :]
        fl = np.where(valid, fl, grid.n_bins).reshape(m, 27)
        cnt = counts[fl]
        per_i = cnt.sum(axis=1)
        cnt = cnt.ravel()
        total = int(per_i.sum())
        first = np.cumsum(cnt) - cnt
        # position of every candidate in bin order
        slot = np.repeat(starts[fl].ravel() - first, cnt) + np.arange(total)
        d = np.repeat(own32[0][a:b], per_i) - sorted32[0][slot]
        r2 = d * d
        for c in (1, 2):
            d = np.repeat(own32[c][a:b], per_i) - sorted32[c][slot]
            d *= d
            r2 += d
        near = np.flatnonzero(r2 < loose2)
        i = np.repeat(np.arange(a, b, dtype=np.int64), per_i)[near]
        j = order[slot[near]]
        dx = xs[i] - xs[j]
        dy = ys[i] - ys[j]
        dz = zs[i] - zs[j]
        keep = (dx * dx + dy * dy + dz * dz < cut2) & (j != i)
        return i[keep], j[keep]

    parts = runner.map(build_chunk, n_local)
    if parts:
        owners = np.concatenate([p[0] for p in parts])
        neighbors = np.concatenate([p[1] for p in parts])
    else:
        owners = neighbors = np.zeros(0, np.int64)
    per_atom = np.bincount(owners, minlength=n_local)
    offsets = np.concatenate(([0], np.cumsum(per_atom))).astype(np.int64)
    return NeighborList(offsets, neighbors, owners, n_local, n_total, iteration, version)


@dataclass(frozen=True)
class PermutationRecord:
    """``perm[j]`` is the new slot of the atom previously at slot ``j``."""

    perm: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.perm)
        seen = np.zeros(n, dtype=bool)
        if n and (self.perm.min() < 0 or self.perm.max() >= n):
            raise ValueError("permutation entries out of range")
        seen[self.perm] = True
        if not seen.all():
            raise ValueError("permutation is not a bijection")

    @classmethod
    def identity(cls, n: int) -> PermutationRecord:
        return cls(np.arange(n, dtype=np.int64))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self.perm))))

    def compose(self, then: PermutationRecord) -> PermutationRecord:
        """Permutation equal to applying ``self`` first and ``then`` second."""
        return PermutationRecord(then.perm[self.perm])

    def __len__(self) -> int:
        return len(self.perm)


def apply_permutation(values: np.ndarray, perm: PermutationRecord) -> np.ndarray:
    values = np.asarray(values)
    if len(values) != len(perm):
        raise ValueError(f"length mismatch: {len(values)} values, permutation of {len(perm)}")
    out = np.empty_like(values)
    out[perm.perm] = values
    return out


def sort_atoms(atoms: AtomStore, params: SimParams, decomp: Decomposition) -> PermutationRecord:
    """Reorder owned atoms by bin index in place; ghosts are discarded.

    Ties keep their prior slot order.  ``x``, ``v``, ``f`` and ``gid`` move together.
    """
    atoms.drop_ghosts()
    grid = CellGrid.for_subdomain(decomp, params.halo_width)
    flat = grid.flat(grid.coords(atoms.x))
    order = np.argsort(flat, kind="stable")
    perm = np.empty_like(order)
    perm[order] = np.arange(len(order))
    atoms.x = atoms.x[order]
    atoms.v = atoms.v[order]
    atoms.f = atoms.f[order]
    atoms.gid = atoms.gid[order]
    return PermutationRecord(perm.astype(np.int64))
