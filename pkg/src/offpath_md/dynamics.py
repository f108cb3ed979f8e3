"""Lennard-Jones forces and velocity-Verlet integration."""

from __future__ import annotations

import numpy as np

from .clock import SERIAL, ChunkRunner
from .core import MASS, AtomStore, SimParams
from .neighbor import NeighborList

MIN_SEPARATION = 1e-3  # in units of sigma


class NumericalBlowup(FloatingPointError):
    """Two atoms came closer than the minimum-separation floor."""


def force_compute(
    atoms: AtomStore,
    nlist: NeighborList,
    params: SimParams,
    runner: ChunkRunner = SERIAL,
) -> float:
    """Fill ``atoms.f`` for owned atoms and return this worker's potential energy.

    Each owned atom sums its own full neighbor list in list order, so the force on
    an atom does not depend on how the owned range is split across threads.  Pair
    energies are halved: each pair is seen from both sides, by this worker or by
    the worker owning the ghost's original.
    """
    n = atoms.n_local
    if nlist.n_local != n or nlist.n_total > len(atoms.x):
        raise ValueError(
            f"neighbor list built for {nlist.n_local} owned / {nlist.n_total} total atoms, "
            f"store has {n} / {len(atoms.x)}"
        )
    x = atoms.x
    rc2 = params.r_cut * params.r_cut
    sig2 = params.sigma * params.sigma
    floor2 = (MIN_SEPARATION * params.sigma) ** 2
    eps = params.epsilon
    offsets, neighbors, owners = nlist.offsets, nlist.neighbors, nlist.owners

    xs, ys, zs = (np.ascontiguousarray(x[:, c]) for c in range(3))

    def chunk(a: int, b: int):
        lo, hi = offsets[a], offsets[b]
        j = neighbors[lo:hi]
        per_i = np.diff(offsets[a : b + 1])
        dx = np.repeat(xs[a:b], per_i) - xs[j]
        dy = np.repeat(ys[a:b], per_i) - ys[j]
        dz = np.repeat(zs[a:b], per_i) - zs[j]
        r2 = dx * dx + dy * dy + dz * dz
        if hi > lo and r2.min() < floor2:
            k = int(np.argmin(r2))
            raise NumericalBlowup(
                f"owned slot {int(owners[lo + k])} is {np.sqrt(r2[k]):.3g} from a neighbor "
                f"(floor {MIN_SEPARATION * params.sigma:.3g})"
            )
        # skin pairs get exactly zero weight; adding +0.0 leaves every sum unchanged
        inv2 = np.where(r2 < rc2, 1.0 / r2, 0.0)
        sr6 = (sig2 * inv2) ** 3
        fpair = 24.0 * eps * sr6 * (2.0 * sr6 - 1.0) * inv2
        rel = owners[lo:hi] - a
        m = b - a
        fa = np.empty((m, 3))
        fa[:, 0] = np.bincount(rel, weights=dx * fpair, minlength=m)
        fa[:, 1] = np.bincount(rel, weights=dy * fpair, minlength=m)
        fa[:, 2] = np.bincount(rel, weights=dz * fpair, minlength=m)
        ea = np.bincount(rel, weights=4.0 * eps * sr6 * (sr6 - 1.0), minlength=m)
        return fa, ea

    parts = runner.map(chunk, n)
    if parts:
        atoms.f = np.concatenate([p[0] for p in parts])
        e_atom = np.concatenate([p[1] for p in parts])
    else:
        atoms.f = np.zeros((0, 3))
        e_atom = np.zeros(0)
    return 0.5 * float(e_atom.sum())


def initial_integrate(atoms: AtomStore, params: SimParams) -> None:
    n = atoms.n_local
    atoms.v += (0.5 * params.dt / MASS) * atoms.f
    atoms.x[:n] += params.dt * atoms.v


def final_integrate(atoms: AtomStore, params: SimParams) -> None:
    atoms.v += (0.5 * params.dt / MASS) * atoms.f


def lj_pair_energy(r: np.ndarray | float, params: SimParams):
    sr6 = (params.sigma / np.asarray(r, dtype=float)) ** 6
    return 4.0 * params.epsilon * sr6 * (sr6 - 1.0)


def lj_pair_force(r: np.ndarray | float, params: SimParams):
    """Radial force magnitude, positive when repulsive."""
    r = np.asarray(r, dtype=float)
    sr6 = (params.sigma / r) ** 6
    return 24.0 * params.epsilon * sr6 * (2.0 * sr6 - 1.0) / r
