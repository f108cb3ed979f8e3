"""Shared test utilities and independent brute-force oracles.

The oracles deliberately avoid the package's binning, ghost and exchange code:
they work on the global periodic system directly.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from offpath_md.core import (
    AtomStore,
    Decomposition,
    GlobalBox,
    SimParams,
    choose_proc_grid,
    create_lattice,
    initial_velocities,
    lattice_positions,
    node_coords,
    wrap_periodic,
)
from offpath_md.halo import PeerGroup, border
from offpath_md.transport import HOST, InProcessHub, rank_of

SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)))


def params(cells=3, **kw) -> SimParams:
    if isinstance(cells, int):
        cells = (cells,) * 3
    return SimParams(unit_cells=tuple(cells), **kw)


def perturbed_system(p: SimParams, amplitude: float = 0.15, seed: int = 0):
    """Global (gid, x, v): the lattice jiggled by uniform noise, wrapped into the box."""
    rng = np.random.default_rng(seed)
    gid = np.arange(p.n_atoms, dtype=np.int64)
    box = GlobalBox.from_params(p)
    x = lattice_positions(p, gid) + rng.uniform(-amplitude, amplitude, size=(p.n_atoms, 3))
    return gid, wrap_periodic(x, box), initial_velocities(p)


def decomposition(p: SimParams, n_nodes: int = 1, node: int = 0, proc_grid=None) -> Decomposition:
    box = GlobalBox.from_params(p)
    grid = proc_grid or choose_proc_grid(n_nodes, box)
    return Decomposition(box, grid, node_coords(node, grid), p.halo_width)


def owned_store(p: SimParams, decomp: Decomposition, gid, x, v) -> AtomStore:
    mine = np.ones(len(gid), dtype=bool)
    for axis in range(3):
        mine &= decomp.owner_coord(x[:, axis], axis) == decomp.my_coords[axis]
    return AtomStore(x[mine].copy(), v[mine].copy(), np.zeros((int(mine.sum()), 3)), gid[mine].copy())


def run_nodes(n_nodes: int, body, timeout: float = 60.0) -> list:
    """Run ``body(node, peers)`` on one thread per host worker and return results."""
    hub = InProcessHub(2 * n_nodes, timeout=timeout)
    results: list = [None] * n_nodes
    errors: list = []

    def target(node: int) -> None:
        try:
            results[node] = body(node, PeerGroup(hub.endpoint(rank_of(node, HOST)), HOST))
        except BaseException as err:  # surfaced below
            errors.append(err)
            hub.endpoint(rank_of(node, HOST)).close()

    threads = [threading.Thread(target=target, args=(k,)) for k in range(n_nodes)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def stores_with_ghosts(p: SimParams, gid, x, v, n_nodes: int = 1, proc_grid=None):
    """(decomposition, store with ghosts) for every node of a decomposition."""
    box = GlobalBox.from_params(p)
    grid = proc_grid or choose_proc_grid(n_nodes, box)

    def body(node, peers):
        d = decomposition(p, n_nodes, node, grid)
        atoms = owned_store(p, d, gid, x, v)
        border(atoms, d, p.halo_width, peers)
        return d, atoms

    return run_nodes(n_nodes, body)


def image_of(atoms: AtomStore, x_global: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Integer periodic image of every row (owned rows are image 0)."""
    return np.rint((atoms.x - x_global[atoms.gid]) / lengths).astype(np.int64)


# --- neighbor oracle ---------------------------------------------------------------


def neighbor_oracle(x: np.ndarray, lengths: np.ndarray, cutoff: float, rows=None,
                    all_images: bool = False) -> list[set]:
    """For each atom in ``rows``: every (j, image) with ``|x_i - (x_j + image*L)| < cutoff``.

    Plain O(N^2).  When every box side exceeds twice the cutoff at most one image of
    each pair can be in range, so the minimum image is checked; otherwise (or with
    ``all_images``) all 27.
    """
    assert np.all(lengths > cutoff)
    rows = np.arange(len(x)) if rows is None else np.asarray(list(rows))
    n, c2 = len(x), cutoff * cutoff
    out = []
    if not all_images and np.all(lengths > 2 * cutoff):
        for a in range(0, len(rows), 256):
            block = rows[a : a + 256]
            d = x[block][:, None, :] - x[None, :, :]
            image = np.rint(d / lengths)
            d -= image * lengths
            r2 = np.einsum("ijk,ijk->ij", d, d)
            r2[np.arange(len(block)), block] = np.inf
            found = [set() for _ in block]
            for r, j in zip(*np.nonzero(r2 < c2)):
                # x_i - (x_j + s L) = d  means the image of j is  s = rint((x_i - x_j) / L)
                found[r].add((int(j), tuple(int(k) for k in image[r, j])))
            out.extend(found)
        return out
    shifted = (x[None, :, :] + (SHIFTS * lengths)[:, None, :]).reshape(-1, 3)
    shift_keys = [tuple(s) for s in SHIFTS.tolist()]
    for a in range(0, len(rows), 16):
        block = rows[a : a + 16]
        d = x[block][:, None, :] - shifted[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", d, d)
        r2[np.arange(len(block)), 13 * n + block] = np.inf  # the atom itself, unshifted
        found = [set() for _ in block]
        for r, h in zip(*np.nonzero(r2 < c2)):
            found[r].add((int(h % n), shift_keys[h // n]))
        out.extend(found)
    return out


def list_as_global_sets(nlist, atoms: AtomStore, x_global: np.ndarray, lengths: np.ndarray) -> dict[int, set]:
    """Neighbor list entries as {owner gid: {(gid_j, image of j relative to i)}}."""
    img = image_of(atoms, x_global, lengths)
    out = {}
    for i in range(atoms.n_local):
        js = nlist.of(i)
        rel = img[js] - img[i]
        out[int(atoms.gid[i])] = {(int(atoms.gid[j]), tuple(r.tolist())) for j, r in zip(js, rel)}
    return out


# --- force oracle ------------------------------------------------------------------


def force_oracle(x: np.ndarray, lengths: np.ndarray, p: SimParams):
    """Direct-sum LJ forces and total energy with cutoff over all periodic images.

    Pair terms are accumulated in extended precision.
    """
    assert np.all(lengths > p.r_cut)
    images = SHIFTS * lengths
    f = np.zeros((len(x), 3), dtype=np.longdouble)
    energy = np.longdouble(0)
    rc2 = p.r_cut**2
    for i in range(len(x)):
        d = (x[i] - (x[None, :, :] + images[:, None, :])).reshape(-1, 3)
        r2 = np.einsum("jk,jk->j", d, d)
        keep = (r2 < rc2) & (r2 > 0)
        d = d[keep].astype(np.longdouble)
        r2 = r2[keep].astype(np.longdouble)
        sr6 = (np.longdouble(p.sigma) ** 2 / r2) ** 3
        fpair = 24 * np.longdouble(p.epsilon) * sr6 * (2 * sr6 - 1) / r2
        f[i] = (d * fpair[:, None]).sum(axis=0)
        energy += (4 * np.longdouble(p.epsilon) * sr6 * (sr6 - 1)).sum() / 2
    return f, energy


# --- straight-line reference simulator ---------------------------------------------


class ReferenceSimulator:
    """Single-worker velocity Verlet with minimum-image forces.

    Candidate pairs come from an all-pairs O(N^2) scan within ``r_cut + margin``,
    redone whenever any atom has moved more than ``margin / 2`` since the last
    scan, so no pair inside the cutoff is ever missed.  Needs every box side to be
    at least twice the cutoff plus margin.
    """

    def __init__(self, p: SimParams, margin: float = 0.5):
        self.p = p
        self.margin = margin
        self.lengths = GlobalBox.from_params(p).array
        assert np.all(self.lengths >= 2 * (p.r_cut + margin))
        gid = np.arange(p.n_atoms)
        self.x = wrap_periodic(lattice_positions(p, gid), GlobalBox.from_params(p))
        self.v = initial_velocities(p)
        self._scan()
        self.f, self.pe = self.forces()

    def _minimum_image(self, d: np.ndarray) -> np.ndarray:
        return d - self.lengths * np.rint(d / self.lengths)

    def _scan(self) -> None:
        x, n = self.x, len(self.x)
        reach2 = (self.p.r_cut + self.margin) ** 2
        pi, pj = [], []
        for a in range(0, n, 256):
            d = self._minimum_image(x[a : a + 256, None, :] - x[None, :, :])
            r2 = np.einsum("ijk,ijk->ij", d, d)
            i, j = np.nonzero(r2 < reach2)
            keep = a + i < j
            pi.append(a + i[keep])
            pj.append(j[keep])
        self.pairs = (np.concatenate(pi), np.concatenate(pj))
        self.x_scan = x.copy()

    def forces(self):
        p, n = self.p, len(self.x)
        moved = self._minimum_image(self.x - self.x_scan)
        if np.max(np.einsum("ij,ij->i", moved, moved)) > (0.5 * self.margin) ** 2:
            self._scan()
        i, j = self.pairs
        d = self._minimum_image(self.x[i] - self.x[j])
        r2 = np.einsum("ij,ij->i", d, d)
        inside = r2 < p.r_cut**2
        i, j, d, r2 = i[inside], j[inside], d[inside], r2[inside]
        sr6 = (p.sigma**2 / r2) ** 3
        fij = (24 * p.epsilon * sr6 * (2 * sr6 - 1) / r2)[:, None] * d
        f = np.zeros((n, 3))
        for k in range(3):
            f[:, k] = np.bincount(i, fij[:, k], n) - np.bincount(j, fij[:, k], n)
        return f, float(np.sum(4 * p.epsilon * sr6 * (sr6 - 1)))

    def temperature(self) -> float:
        return float(np.sum(self.v * self.v)) / (3 * len(self.v))

    def step(self) -> None:
        dt = self.p.dt
        self.v += 0.5 * dt * self.f
        self.x += dt * self.v
        self.x -= self.lengths * np.floor(self.x / self.lengths)
        self.f, self.pe = self.forces()
        self.v += 0.5 * dt * self.f


def lattice_store(p: SimParams, n_nodes: int = 1, node: int = 0) -> tuple[Decomposition, AtomStore]:
    d = decomposition(p, n_nodes, node)
    return d, create_lattice(p, d)
