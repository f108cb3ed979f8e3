from __future__ import annotations

import time

import numpy as np
import pytest
from helpers import decomposition, image_of, owned_store, params, perturbed_system, run_nodes
from hypothesis import given, settings
from hypothesis import strategies as st

from offpath_md.core import AtomStore, GlobalBox, choose_proc_grid, wrap_periodic
from offpath_md.halo import (
    BorderMap,
    ExchangePlan,
    MigrationError,
    PeerGroup,
    PlanMismatch,
    border,
    communicate,
    exchange,
    replay_exchange,
)
from offpath_md.transport import pack_arrays, unpack_arrays


X2 = (2, 1, 1)


def displaced(p, seed, scale):
    """Global state with every atom pushed by up to ``scale`` (not wrapped)."""
    gid, x, v = perturbed_system(p, seed=seed)
    rng = np.random.default_rng(seed + 100)
    return gid, x, v, x + rng.uniform(-scale, scale, x.shape)


def run_exchange(p, n_nodes, gid, x0, v, x1, grid=None):
    """Place atoms by ``x0`` ownership, move them to ``x1``, exchange, and replay the
    plan on the pre-exchange positions and on an integer marker column."""
    grid = grid or choose_proc_grid(n_nodes, GlobalBox.from_params(p))

    def body(node, peers):
        d = decomposition(p, n_nodes, node, grid)
        atoms = owned_store(p, d, gid, x0, v)
        mine = atoms.gid
        atoms.x = x1[mine].copy()
        pre_x = atoms.x.copy()
        plan = exchange(atoms, d, peers)
        arrays = plan.to_arrays()
        plan2 = ExchangePlan.from_arrays(unpack_arrays(pack_arrays(*arrays)))
        replayed_x = replay_exchange(wrap_periodic(pre_x, d.box), plan2, peers)
        replayed_gid = replay_exchange(mine.copy(), plan2, peers)
        return d, atoms, plan, replayed_x, replayed_gid

    return run_nodes(n_nodes, body)


@pytest.mark.parametrize("n_nodes, grid", [(2, None), (4, None), (8, (2, 2, 2)), (3, (3, 1, 1))])
def test_exchange_conserves_multiset_and_replays(n_nodes, grid):
    p = params((7, 7, 7))
    gid, x0, v, x1 = displaced(p, n_nodes, 0.4)
    out = run_exchange(p, n_nodes, gid, x0, v, x1, grid)
    all_gid = np.concatenate([a.gid for _, a, *_ in out])
    assert np.array_equal(np.sort(all_gid), gid)
    box = GlobalBox.from_params(p)
    target = wrap_periodic(x1, box)
    for d, atoms, plan, rx, rg in out:
        assert np.array_equal(atoms.x, target[atoms.gid])
        assert np.array_equal(atoms.v, v[atoms.gid])
        assert np.all(atoms.x >= d.lo) and np.all(atoms.x < d.hi)
        assert not atoms.f.any() and atoms.f.shape == atoms.x.shape
        # plan fidelity: replayed arrays match the host's post-exchange arrays bitwise
        assert np.array_equal(rx, atoms.x)
        assert np.array_equal(rg, atoms.gid)
        assert plan.n_after == atoms.n_local


def exchange_and_border(p, gid, x0, v, x1, slow: int):
    """Exchange then border on a 2x2x1 grid with node ``slow`` late to both."""
    n_nodes, grid = 4, (2, 2, 1)

    def body(node, peers):
        d = decomposition(p, n_nodes, node, grid)
        atoms = owned_store(p, d, gid, x0, v)
        atoms.x = x1[atoms.gid].copy()
        if node == slow:
            time.sleep(0.05)
        plan = exchange(atoms, d, peers)
        if node == slow:
            time.sleep(0.05)
        bmap = border(atoms, d, p.halo_width, peers)
        return [atoms.gid.copy(), atoms.x.copy(), *plan.to_arrays(), *bmap.to_arrays()]

    return run_nodes(n_nodes, body)


@pytest.mark.parametrize("slow", [0, 1, 3])
def test_exchange_and_border_ignore_arrival_order(slow):
    p = params((7, 7, 7))
    gid, x0, v, x1 = displaced(p, 5, 0.4)
    prompt = exchange_and_border(p, gid, x0, v, x1, slow=-1)
    late = exchange_and_border(p, gid, x0, v, x1, slow=slow)
    for a, b in zip(prompt, late):
        assert len(a) == len(b)
        assert all(np.array_equal(u, w) for u, w in zip(a, b))


def test_no_crossing_gives_identity_plan():
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, seed=1)
    out = run_exchange(p, 2, gid, x, v, x.copy())
    for d, atoms, plan, *_ in out:
        assert plan.is_identity()
        assert np.array_equal(atoms.gid, owned_store(p, d, gid, x, v).gid)


def test_single_migration_up_x():
    p = params((6, 6, 6))
    grid = (3, 1, 1)
    gid, x, v = perturbed_system(p, amplitude=0.0, seed=2)
    d0 = decomposition(p, 3, 0, grid)
    mover = int(np.flatnonzero((x[:, 0] < d0.hi[0]) & (x[:, 0] > d0.hi[0] - 1.0))[0])
    x1 = x.copy()
    x1[mover, 0] = d0.hi[0] + 0.05
    (_, a0, plan0, *_), (d1, a1, plan1, *_), (_, a2, plan2, *_) = run_exchange(p, 3, gid, x, v, x1, grid)
    n0 = len(owned_store(p, d0, gid, x, v).gid)
    assert a0.n_local == n0 - 1 and mover not in a0.gid
    assert a1.gid[-1] == mover and a1.x[-1, 0] >= d1.lo[0]
    assert (plan1.passes[0].n_from_down, plan1.passes[0].n_from_up) == (1, 0)
    assert plan0.passes[0].send_up.size == 1 and plan0.passes[0].send_down.size == 0
    assert plan2.is_identity()


def test_compaction_fills_holes_from_tail():
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, amplitude=0.0, seed=3)
    d0 = decomposition(p, 2, 0, X2)
    local = owned_store(p, d0, gid, x, v)
    leave = local.gid[[1, 4]]
    x1 = x.copy()
    x1[leave, 0] = d0.hi[0] + 0.05
    (_, a0, plan0, *_), _ = run_exchange(p, 2, gid, x, v, x1, X2)
    n = local.n_local
    expected = list(local.gid)
    # holes are visited in ascending order, each taking the current last survivor
    expected[1] = local.gid[n - 1]
    expected[4] = local.gid[n - 2]
    assert a0.gid.tolist() == expected[: n - 2]


def test_far_migration_rejected():
    p = params((8, 8, 8))
    gid, x, v = perturbed_system(p, amplitude=0.0, seed=4)
    grid = (4, 1, 1)
    d0 = decomposition(p, 4, 0, grid)
    far = int(np.flatnonzero(x[:, 0] < d0.hi[0] - 0.5)[0])
    x1 = x.copy()
    x1[far, 0] += 2 * (d0.hi[0] - d0.lo[0])
    with pytest.raises(MigrationError):
        run_exchange(p, 4, gid, x, v, x1, grid)


def test_replay_rejects_wrong_length():
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, seed=5)

    def body(node, peers):
        d = decomposition(p, 2, node)
        atoms = owned_store(p, d, gid, x, v)
        plan = exchange(atoms, d, peers)
        with pytest.raises(PlanMismatch):
            replay_exchange(np.zeros((plan.n_before + 1, 3)), plan, peers)
        return True

    assert all(run_nodes(2, body))


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 1, 1), (2, 2, 1), (1, 2, 2), (2, 2, 2)]),
       st.floats(0.0, 0.9))
def test_exchange_property(seed, grid, scale):
    p = params((7, 7, 7))
    gid, x0, v, x1 = displaced(p, seed, scale)
    n = grid[0] * grid[1] * grid[2]
    out = run_exchange(p, n, gid, x0, v, x1, grid)
    assert np.array_equal(np.sort(np.concatenate([a.gid for _, a, *_ in out])), gid)
    for _, atoms, _, rx, rg in out:
        assert np.array_equal(rx, atoms.x) and np.array_equal(rg, atoms.gid)


# --- border / communicate -------------------------------------------------------------


def bordered(p, n_nodes, gid, x, v, moved=None, grid=None):
    """Run border, optionally move owners, run communicate; return per-node results."""

    def body(node, peers):
        d = decomposition(p, n_nodes, node, grid)
        atoms = owned_store(p, d, gid, x, v)
        bmap = border(atoms, d, p.halo_width, peers)
        after_border = atoms.x.copy()
        communicate(atoms, bmap, peers)
        no_op = np.array_equal(after_border, atoms.x)
        if moved is not None:
            atoms.x[: atoms.n_local] = moved[atoms.gid[: atoms.n_local]]
            communicate(atoms, bmap, peers)
        return d, atoms, bmap, after_border, no_op

    return run_nodes(n_nodes, body)


@pytest.mark.parametrize("n_nodes", [1, 2, 4])
def test_ghosts_cover_halo_exactly(n_nodes):
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, seed=6)
    box = GlobalBox.from_params(p)
    lengths = box.array
    images = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])
    for d, atoms, bmap, _, no_op in bordered(p, n_nodes, gid, x, v):
        assert no_op
        assert bmap.n_total == len(atoms.x) and bmap.n_local == atoms.n_local
        ghosts = atoms.x[atoms.n_local :]
        # every ghost is an exact periodic image of its source
        img = image_of(atoms, x, lengths)[atoms.n_local :]
        assert np.array_equal(ghosts, x[atoms.gid[atoms.n_local :]] + img * lengths)
        # ghosts are exactly the images inside the halo box that are not owned here
        expected = set()
        for s in images:
            cand = x + s * lengths
            inside = np.all((cand >= d.lo - p.halo_width) & (cand < d.hi + p.halo_width), axis=1)
            owned_here = np.all((cand >= d.lo) & (cand < d.hi), axis=1)
            for g in np.flatnonzero(inside & ~owned_here):
                expected.add((int(g), tuple(s)))
        got = {(int(g), tuple(int(c) for c in s)) for g, s in zip(atoms.gid[atoms.n_local :], img)}
        assert got == expected


def test_communicate_tracks_owner_motion():
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, seed=7)
    lengths = GlobalBox.from_params(p).array
    moved = x + np.random.default_rng(8).uniform(-0.1, 0.1, x.shape)
    for d, atoms, bmap, before, _ in bordered(p, 2, gid, x, v, moved):
        g = atoms.gid[atoms.n_local :]
        shift = before[atoms.n_local :] - x[g]
        ghosts = atoms.x[atoms.n_local :]
        assert np.allclose(ghosts, moved[g] + shift, rtol=0, atol=1e-12)
        unshifted = ~shift.any(axis=1)
        assert unshifted.any()
        # images that were never shifted are bitwise copies of the moved owners
        assert np.array_equal(ghosts[unshifted], moved[g[unshifted]])
        assert np.allclose(np.abs(shift) / lengths, np.rint(np.abs(shift) / lengths), atol=1e-12)


def test_atom_far_from_faces_is_not_a_ghost():
    p = params((8, 8, 8))
    d = decomposition(p)
    centre = (d.lo + d.hi) / 2
    atoms = AtomStore(np.array([centre]), np.zeros((1, 3)), np.zeros((1, 3)), np.arange(1))
    border(atoms, d, p.halo_width, PeerGroup(None))
    assert atoms.n_ghost == 0


def test_atom_near_upper_face_is_ghost_on_neighbor():
    p = params((6, 6, 6))
    d0 = decomposition(p, 2, 0, X2)
    pos = np.array([[d0.hi[0] - 0.5, 4.0, 4.0], [1.0 + d0.hi[0], 4.0, 4.0]])
    _, (d1, a1, *_rest) = bordered(p, 2, np.arange(2), pos, np.zeros((2, 3)), grid=X2)
    ghost_rows = np.flatnonzero(a1.gid[a1.n_local :] == 0) + a1.n_local
    assert len(ghost_rows) >= 1
    assert np.any(np.all(a1.x[ghost_rows] == pos[0], axis=1))


def test_border_map_round_trip():
    p = params((6, 6, 6))
    gid, x, v = perturbed_system(p, seed=9)
    for _, atoms, bmap, _, _ in bordered(p, 2, gid, x, v):
        back = BorderMap.from_arrays(unpack_arrays(pack_arrays(*bmap.to_arrays())))
        assert back.n_local == bmap.n_local and len(back.swaps) == len(bmap.swaps)
        for a, b in zip(back.swaps, bmap.swaps):
            assert (a.axis, a.direction, a.send_node, a.recv_node, a.recv_start, a.recv_count) == (
                b.axis, b.direction, b.send_node, b.recv_node, b.recv_start, b.recv_count)
            assert np.array_equal(a.sendlist, b.sendlist) and np.array_equal(a.shift, b.shift)


def test_communicate_rejects_stale_map():
    p = params((6, 6, 6))
    d = decomposition(p)
    gid, x, v = perturbed_system(p, seed=10)
    atoms = owned_store(p, d, gid, x, v)
    bmap = border(atoms, d, p.halo_width, PeerGroup(None))
    atoms.v = atoms.v[:-1]
    with pytest.raises(PlanMismatch):
        communicate(atoms, bmap, PeerGroup(None))
