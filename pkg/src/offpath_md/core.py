"""Simulation parameters, box geometry, spatial decomposition and initial state."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# fcc basis in units of the cubic cell edge
FCC_BASIS = np.array(
    [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]
)

MASS = 1.0


class ConfigError(ValueError):
    """Invalid simulation parameters or decomposition."""


@dataclass(frozen=True)
class SimParams:
    epsilon: float = 1.0
    sigma: float = 1.0
    r_cut: float = 2.5
    skin: float = 0.3
    dt: float = 0.005
    reneigh_interval: int = 20
    sort_interval: int = 5
    n_iterations: int = 1000
    unit_cells: tuple[int, int, int] = (10, 10, 10)
    density: float = 0.8442
    t_init: float = 1.44
    rng_seed: int = 12345

    def __post_init__(self) -> None:
        if not self.r_cut > 0:
            raise ConfigError(f"r_cut must be > 0, got {self.r_cut}")
        if self.skin < 0:
            raise ConfigError(f"skin must be >= 0, got {self.skin}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if self.reneigh_interval < 1:
            raise ConfigError(f"reneigh_interval must be >= 1, got {self.reneigh_interval}")
        if self.sort_interval < 0:
            raise ConfigError(f"sort_interval must be >= 0, got {self.sort_interval}")
        if self.n_iterations < 0:
            raise ConfigError(f"n_iterations must be >= 0, got {self.n_iterations}")
        if len(self.unit_cells) != 3 or min(self.unit_cells) < 1:
            raise ConfigError(f"unit_cells must be three positive ints, got {self.unit_cells}")
        if not self.density > 0 or not self.epsilon > 0 or not self.sigma > 0:
            raise ConfigError("density, epsilon and sigma must be positive")
        if self.t_init < 0:
            raise ConfigError(f"t_init must be >= 0, got {self.t_init}")

    @property
    def n_atoms(self) -> int:
        nx, ny, nz = self.unit_cells
        return 4 * nx * ny * nz

    @property
    def halo_width(self) -> float:
        return self.r_cut + self.skin

    @property
    def lattice_constant(self) -> float:
        return (4.0 / self.density) ** (1.0 / 3.0)


@dataclass(frozen=True)
class GlobalBox:
    lengths: tuple[float, float, float]

    @classmethod
    def from_params(cls, params: SimParams) -> GlobalBox:
        a = params.lattice_constant
        return cls(tuple(n * a for n in params.unit_cells))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=float)


def wrap_periodic(pos: np.ndarray, box: GlobalBox) -> np.ndarray:
    """Map coordinates into ``[0, L)`` along every axis.

    Works on a single 3-vector or an ``(n, 3)`` array.  Inputs are assumed to be
    less than one box length outside the box.
    """
    pos = np.asarray(pos, dtype=float)
    lengths = box.array
    out = np.where(pos < 0.0, pos + lengths, pos)
    out = np.where(out >= lengths, out - lengths, out)
    # -tiny + L can round up to exactly L
    return np.where(out >= lengths, 0.0, out)


def choose_proc_grid(n_workers: int, box: GlobalBox) -> tuple[int, int, int]:
    """Factorization of ``n_workers`` minimizing subdomain surface area."""
    if n_workers < 1:
        raise ConfigError(f"need at least one worker, got {n_workers}")
    lx, ly, lz = box.lengths
    best, best_area = None, math.inf
    for px in range(1, n_workers + 1):
        if n_workers % px:
            continue
        for py in range(1, n_workers // px + 1):
            if (n_workers // px) % py:
                continue
            pz = n_workers // (px * py)
            sx, sy, sz = lx / px, ly / py, lz / pz
            area = sx * sy + sy * sz + sx * sz
            if area < best_area - 1e-12:
                best, best_area = (px, py, pz), area
    return best


@dataclass(frozen=True)
class Decomposition:
    box: GlobalBox
    proc_grid: tuple[int, int, int]
    my_coords: tuple[int, int, int]
    halo_width: float

    def __post_init__(self) -> None:
        for axis in range(3):
            if not 0 <= self.my_coords[axis] < self.proc_grid[axis]:
                raise ConfigError(f"coords {self.my_coords} outside grid {self.proc_grid}")
            sub = self.box.lengths[axis] / self.proc_grid[axis]
            limit = self.box.lengths[axis] if self.proc_grid[axis] == 1 else sub
            if self.halo_width > limit:
                raise ConfigError(
                    f"halo width {self.halo_width:.4g} exceeds subdomain extent {limit:.4g} "
                    f"on axis {axis}; use fewer workers along that axis"
                )

    @classmethod
    def build(cls, params: SimParams, proc_grid: tuple[int, int, int], node: int) -> Decomposition:
        box = GlobalBox.from_params(params)
        return cls(box, tuple(proc_grid), node_coords(node, proc_grid), params.halo_width)

    @property
    def n_nodes(self) -> int:
        px, py, pz = self.proc_grid
        return px * py * pz

    @property
    def node(self) -> int:
        return node_index(self.my_coords, self.proc_grid)

    def edges(self, axis: int) -> np.ndarray:
        n = self.proc_grid[axis]
        e = np.arange(n + 1, dtype=float) * (self.box.lengths[axis] / n)
        e[-1] = self.box.lengths[axis]
        return e

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.edges(a)[self.my_coords[a]] for a in range(3)])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.edges(a)[self.my_coords[a] + 1] for a in range(3)])

    def owner_coord(self, values: np.ndarray, axis: int) -> np.ndarray:
        """Grid coordinate along ``axis`` owning each (wrapped) coordinate value."""
        e = self.edges(axis)
        k = np.searchsorted(e, values, side="right") - 1
        return np.clip(k, 0, self.proc_grid[axis] - 1)

    def neighbor_node(self, axis: int, step: int) -> int:
        coords = list(self.my_coords)
        coords[axis] = (coords[axis] + step) % self.proc_grid[axis]
        return node_index(tuple(coords), self.proc_grid)


def node_index(coords: tuple[int, int, int], grid: tuple[int, int, int]) -> int:
    cx, cy, cz = coords
    px, py, _ = grid
    return (cz * py + cy) * px + cx


def node_coords(node: int, grid: tuple[int, int, int]) -> tuple[int, int, int]:
    px, py, pz = grid
    if not 0 <= node < px * py * pz:
        raise ConfigError(f"node {node} outside grid {grid}")
    return (node % px, (node // px) % py, node // (px * py))


@dataclass
class AtomStore:
    """Per-worker atom arrays.

    ``x`` and ``gid`` hold owned atoms followed by ghosts; ``v`` and ``f`` hold owned
    atoms only.  A slot index is only meaningful until the next exchange or sort.
    ``gid`` is the stable lattice-site identity carried for diagnostics.
    """

    x: np.ndarray
    v: np.ndarray
    f: np.ndarray
    gid: np.ndarray

    @property
    def n_local(self) -> int:
        return len(self.v)

    @property
    def n_ghost(self) -> int:
        return len(self.x) - len(self.v)

    def drop_ghosts(self) -> None:
        self.x = self.x[: self.n_local]
        self.gid = self.gid[: self.n_local]

    def copy(self) -> AtomStore:
        return AtomStore(self.x.copy(), self.v.copy(), self.f.copy(), self.gid.copy())

    @classmethod
    def empty(cls) -> AtomStore:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64))


def lattice_positions(params: SimParams, gids: np.ndarray) -> np.ndarray:
    nx, ny, _ = params.unit_cells
    a = params.lattice_constant
    basis = gids % 4
    cell = gids // 4
    ix = cell % nx
    iy = (cell // nx) % ny
    iz = cell // (nx * ny)
    return (np.stack([ix, iy, iz], axis=1) + FCC_BASIS[basis]) * a


def initial_velocities(params: SimParams) -> np.ndarray:
    """Velocities for every lattice site, zero-momentum and scaled to ``t_init``.

    One seeded stream is drawn in site order, so an atom's velocity depends only on
    its site index and never on which worker owns it.
    """
    rng = np.random.default_rng(params.rng_seed)
    v = rng.uniform(-0.5, 0.5, size=(params.n_atoms, 3))
    v -= v.mean(axis=0)
    t_now = MASS * np.sum(v * v) / (3.0 * params.n_atoms)
    if t_now > 0:
        v *= math.sqrt(params.t_init / t_now)
    return v


def create_lattice(params: SimParams, decomp: Decomposition) -> AtomStore:
    """Owned atoms of the fcc lattice for this worker's subdomain."""
    all_gids = np.arange(params.n_atoms, dtype=np.int64)
    pos = wrap_periodic(lattice_positions(params, all_gids), decomp.box)
    mine = np.ones(params.n_atoms, dtype=bool)
    for axis in range(3):
        mine &= decomp.owner_coord(pos[:, axis], axis) == decomp.my_coords[axis]
    if not mine.any():
        raise ConfigError(
            f"subdomain {decomp.my_coords} of grid {decomp.proc_grid} owns no lattice sites"
        )
    v = initial_velocities(params)
    return AtomStore(
        x=pos[mine].copy(),
        v=v[mine].copy(),
        f=np.zeros((int(mine.sum()), 3)),
        gid=all_gids[mine],
    )


def check_decomposition(params: SimParams, proc_grid: tuple[int, int, int]) -> None:
    """Raise ConfigError if any subdomain of ``proc_grid`` would be empty or too thin."""
    n = proc_grid[0] * proc_grid[1] * proc_grid[2]
    box = GlobalBox.from_params(params)
    pos = wrap_periodic(lattice_positions(params, np.arange(params.n_atoms)), box)
    for node in range(n):
        d = Decomposition(box, proc_grid, node_coords(node, proc_grid), params.halo_width)
        mine = np.ones(len(pos), dtype=bool)
        for axis in range(3):
            mine &= d.owner_coord(pos[:, axis], axis) == d.my_coords[axis]
        if not mine.any():
            raise ConfigError(f"subdomain {d.my_coords} of grid {proc_grid} owns no lattice sites")


# --- snapshot files -----------------------------------------------------------


@dataclass
class Snapshot:
    box: GlobalBox
    iteration: int
    gid: np.ndarray
    x: np.ndarray
    v: np.ndarray = field(repr=False)


def write_snapshot(path: str | Path, snap: Snapshot) -> None:
    order = np.argsort(snap.gid, kind="stable")
    lines = [
        f"atoms {len(order)}",
        "box {:.17g} {:.17g} {:.17g}".format(*snap.box.lengths),
        f"iteration {snap.iteration}",
    ]
    for k in order:
        x, v = snap.x[k], snap.v[k]
        lines.append(
            f"{snap.gid[k]} {x[0]:.17g} {x[1]:.17g} {x[2]:.17g} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_snapshot(path: str | Path) -> Snapshot:
    lines = Path(path).read_text().splitlines()
    try:
        n = int(lines[0].split()[1])
        box = GlobalBox(tuple(float(t) for t in lines[1].split()[1:4]))
        iteration = int(lines[2].split()[1])
        rows = np.array([[float(t) for t in ln.split()] for ln in lines[3 : 3 + n]]).reshape(n, 7)
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"malformed snapshot file {path}: {exc}") from exc
    return Snapshot(box, iteration, rows[:, 0].astype(np.int64), rows[:, 1:4], rows[:, 4:7])


def store_from_snapshot(snap: Snapshot, decomp: Decomposition) -> AtomStore:
    """Owned part of a snapshot for one subdomain."""
    pos = wrap_periodic(snap.x, decomp.box)
    mine = np.ones(len(pos), dtype=bool)
    for axis in range(3):
        mine &= decomp.owner_coord(pos[:, axis], axis) == decomp.my_coords[axis]
    return AtomStore(
        x=pos[mine].copy(), v=snap.v[mine].copy(), f=np.zeros((int(mine.sum()), 3)), gid=snap.gid[mine]
    )

