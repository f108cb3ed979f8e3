"""Exchange, border and communicate, plus replayable exchange plans.

All three routines work one axis at a time (x, then y, then z).  On an axis with a
single node the periodic images are produced locally and no message is sent.

Exchange on an axis with ``n > 1`` nodes runs one pass: every worker sends a
"down" message to its lower neighbor and an "up" message to its upper neighbor
(possibly empty), then receives the upper neighbor's down message followed by the
lower neighbor's up message.  The pass is recorded as an ``ExchangePass`` so the
same reordering can be replayed on any other per-atom array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AtomStore, Decomposition, wrap_periodic
from .transport import HOST, Endpoint, Tag, rank_of


class MigrationError(RuntimeError):
    """An atom moved farther than one subdomain between rebuilds."""


class PlanMismatch(RuntimeError):
    """A plan or border map does not fit the array or peers it is applied to."""


@dataclass
class PeerGroup:
    """The workers of one role (all hosts or all offloads), addressed by node."""

    endpoint: Endpoint
    role: int = HOST

    def send(self, node: int, tag: Tag, *arrays) -> None:
        self.endpoint.send_arrays(rank_of(node, self.role), tag, *arrays)

    def recv(self, node: int, tag: Tag) -> list[np.ndarray]:
        return self.endpoint.recv_arrays(rank_of(node, self.role), tag)


# --- exchange -----------------------------------------------------------------


@dataclass
class ExchangePass:
    """One axis of an exchange, as seen by one worker.

    ``send_down``/``send_up`` are departing slots (ascending) and their
    destinations ``down_node``/``up_node``.  ``keep`` lists the surviving slots in
    their new order: survivors below the new owned count stay put and each hole is
    filled from the tail.  Arrivals are appended after them, first the
    ``n_from_up`` atoms sent by ``up_node``, then the ``n_from_down`` atoms sent
    by ``down_node``.
    """

    axis: int
    down_node: int
    up_node: int
    send_down: np.ndarray
    send_up: np.ndarray
    keep: np.ndarray
    n_from_up: int
    n_from_down: int

    @property
    def n_before(self) -> int:
        return len(self.keep) + len(self.send_down) + len(self.send_up)

    @property
    def n_after(self) -> int:
        return len(self.keep) + self.n_from_up + self.n_from_down

    def is_identity(self) -> bool:
        return (
            len(self.send_down) == len(self.send_up) == self.n_from_up == self.n_from_down == 0
            and bool(np.array_equal(self.keep, np.arange(len(self.keep))))
        )


@dataclass
class ExchangePlan:
    n_before: int
    passes: list[ExchangePass] = field(default_factory=list)

    @property
    def n_after(self) -> int:
        return self.passes[-1].n_after if self.passes else self.n_before

    def is_identity(self) -> bool:
        return all(p.is_identity() for p in self.passes)

    def to_arrays(self) -> list[np.ndarray]:
        out = [np.array([self.n_before, len(self.passes)])]
        for p in self.passes:
            out.append(np.array([p.axis, p.down_node, p.up_node, p.n_from_up, p.n_from_down]))
            out.extend([p.send_down, p.send_up, p.keep])
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> ExchangePlan:
        n_before, n_passes = (int(v) for v in arrays[0])
        passes = []
        for k in range(n_passes):
            head, down, up, keep = arrays[1 + 4 * k : 5 + 4 * k]
            axis, dn, un, nfu, nfd = (int(v) for v in head)
            passes.append(ExchangePass(axis, dn, un, down, up, keep, nfu, nfd))
        return cls(n_before, passes)


def _compaction(stay: np.ndarray) -> np.ndarray:
    """Survivor order after filling departure holes with the last survivors."""
    k = int(stay.sum())
    keep = np.arange(k, dtype=np.int64)
    holes = np.flatnonzero(~stay[:k])
    fillers = np.flatnonzero(stay[k:])[::-1] + k
    keep[holes] = fillers
    return keep


def _pass_targets(decomp: Decomposition, values: np.ndarray, axis: int):
    n = decomp.proc_grid[axis]
    c = decomp.my_coords[axis]
    owner = decomp.owner_coord(values, axis)
    down = (owner == (c - 1) % n) & (owner != c)
    up = (owner == (c + 1) % n) & (owner != c) & ~down
    far = (owner != c) & ~down & ~up
    if far.any():
        k = int(np.flatnonzero(far)[0])
        raise MigrationError(
            f"atom in slot {k} at coordinate {values[k]:.6g} on axis {axis} left subdomain "
            f"{decomp.my_coords} by more than one neighbor; the skin or rebuild interval is too large"
        )
    return np.flatnonzero(down), np.flatnonzero(up)


def exchange(atoms: AtomStore, decomp: Decomposition, peers: PeerGroup) -> ExchangePlan:
    """Wrap owned positions and migrate atoms that left the subdomain.

    Ghosts are discarded and forces are zeroed: both are stale once slots move.
    """
    atoms.drop_ghosts()
    atoms.x = wrap_periodic(atoms.x, decomp.box)
    plan = ExchangePlan(atoms.n_local)
    for axis in range(3):
        if decomp.proc_grid[axis] == 1:
            continue
        down_node = decomp.neighbor_node(axis, -1)
        up_node = decomp.neighbor_node(axis, +1)
        send_down, send_up = _pass_targets(decomp, atoms.x[:, axis], axis)
        stay = np.ones(atoms.n_local, dtype=bool)
        stay[send_down] = False
        stay[send_up] = False
        keep = _compaction(stay)
        peers.send(down_node, Tag.EXCHANGE, atoms.x[send_down], atoms.v[send_down], atoms.gid[send_down])
        peers.send(up_node, Tag.EXCHANGE, atoms.x[send_up], atoms.v[send_up], atoms.gid[send_up])
        xu, vu, gu = peers.recv(up_node, Tag.EXCHANGE)
        xd, vd, gd = peers.recv(down_node, Tag.EXCHANGE)
        atoms.x = np.concatenate([atoms.x[keep], xu.reshape(-1, 3), xd.reshape(-1, 3)])
        atoms.v = np.concatenate([atoms.v[keep], vu.reshape(-1, 3), vd.reshape(-1, 3)])
        atoms.gid = np.concatenate([atoms.gid[keep], gu, gd])
        plan.passes.append(
            ExchangePass(axis, down_node, up_node, send_down, send_up, keep, len(gu), len(gd))
        )
    atoms.f = np.zeros((atoms.n_local, 3))
    return plan


def replay_exchange(values: np.ndarray, plan: ExchangePlan, peers: PeerGroup) -> np.ndarray:
    """Move ``values`` between workers exactly as ``plan`` moved the atoms.

    Every worker of the group must replay its own plan of the same exchange.
    """
    values = np.asarray(values)
    if len(values) != plan.n_before:
        raise PlanMismatch(f"plan expects {plan.n_before} rows, got {len(values)}")
    tail = values.shape[1:]
    for p in plan.passes:
        if len(values) != p.n_before:
            raise PlanMismatch(f"pass on axis {p.axis} expects {p.n_before} rows, got {len(values)}")
        peers.send(p.down_node, Tag.EXCHANGE, values[p.send_down])
        peers.send(p.up_node, Tag.EXCHANGE, values[p.send_up])
        (from_up,) = peers.recv(p.up_node, Tag.EXCHANGE)
        (from_down,) = peers.recv(p.down_node, Tag.EXCHANGE)
        if len(from_up) != p.n_from_up or len(from_down) != p.n_from_down:
            raise PlanMismatch(
                f"axis {p.axis}: received {len(from_up)}+{len(from_down)} rows, "
                f"plan recorded {p.n_from_up}+{p.n_from_down}"
            )
        values = np.concatenate(
            [values[p.keep], from_up.reshape((-1,) + tail).astype(values.dtype),
             from_down.reshape((-1,) + tail).astype(values.dtype)]
        )
    return values


# --- border / communicate -------------------------------------------------------


@dataclass
class Swap:
    """Ghost traffic in one direction along one axis.

    Rows ``sendlist`` (owned or earlier ghosts) are sent, offset by ``shift``, to
    ``send_node``; ``recv_count`` ghosts from ``recv_node`` land at slots
    ``recv_start:recv_start + recv_count``.  ``send_node == recv_node == -1``
    marks a local periodic self-image.
    """

    axis: int
    direction: int
    send_node: int
    recv_node: int
    sendlist: np.ndarray
    shift: np.ndarray
    recv_start: int
    recv_count: int

    @property
    def local(self) -> bool:
        return self.send_node < 0


@dataclass
class BorderMap:
    n_local: int
    swaps: list[Swap] = field(default_factory=list)

    @property
    def n_ghost(self) -> int:
        return sum(s.recv_count for s in self.swaps)

    @property
    def n_total(self) -> int:
        return self.n_local + self.n_ghost

    def to_arrays(self) -> list[np.ndarray]:
        out = [np.array([self.n_local, len(self.swaps)])]
        for s in self.swaps:
            out.append(np.array([s.axis, s.direction, s.send_node, s.recv_node, s.recv_start, s.recv_count]))
            out.extend([s.sendlist, s.shift])
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> BorderMap:
        n_local, n_swaps = (int(v) for v in arrays[0])
        swaps = []
        for k in range(n_swaps):
            head, sendlist, shift = arrays[1 + 3 * k : 4 + 3 * k]
            axis, direction, sn, rn, start, count = (int(v) for v in head)
            swaps.append(Swap(axis, direction, sn, rn, sendlist, shift, start, count))
        return cls(n_local, swaps)


def _axis_swaps(x: np.ndarray, decomp: Decomposition, halo: float, axis: int, n_cand: int):
    n = decomp.proc_grid[axis]
    c = decomp.my_coords[axis]
    length = decomp.box.lengths[axis]
    lo, hi = decomp.lo[axis], decomp.hi[axis]
    col = x[:n_cand, axis]
    out = []
    for direction, sel, wraps, sign in ((-1, col < lo + halo, c == 0, 1.0), (+1, col >= hi - halo, c == n - 1, -1.0)):
        shift = np.zeros(3)
        if wraps:
            shift[axis] = sign * length
        node = -1 if n == 1 else decomp.neighbor_node(axis, direction)
        out.append((direction, node, np.flatnonzero(sel), shift))
    return out


def border(atoms: AtomStore, decomp: Decomposition, halo: float, peers: PeerGroup) -> BorderMap:
    """Append ghost copies of every atom within ``halo`` of a subdomain face."""
    atoms.drop_ghosts()
    bmap = BorderMap(atoms.n_local)
    for axis in range(3):
        n_cand = len(atoms.x)
        swaps = _axis_swaps(atoms.x, decomp, halo, axis, n_cand)
        for direction, node, sendlist, shift in swaps:
            if node >= 0:
                peers.send(node, Tag.BORDER, atoms.x[sendlist] + shift, atoms.gid[sendlist])
        # ghosts arrive from the opposite side: the down-swap's come from above
        for direction, node, sendlist, shift in swaps:
            if node < 0:
                gx, gg = atoms.x[sendlist] + shift, atoms.gid[sendlist]
                recv_node = -1
            else:
                recv_node = decomp.neighbor_node(axis, -direction)
                gx, gg = peers.recv(recv_node, Tag.BORDER)
                gx = gx.reshape(-1, 3)
            bmap.swaps.append(
                Swap(axis, direction, node, recv_node, sendlist, shift, len(atoms.x), len(gg))
            )
            atoms.x = np.concatenate([atoms.x, gx])
            atoms.gid = np.concatenate([atoms.gid, gg])
    return bmap


def communicate(atoms: AtomStore, bmap: BorderMap, peers: PeerGroup) -> None:
    """Refresh ghost positions in place using the slots recorded by ``border``."""
    if atoms.n_local != bmap.n_local:
        raise PlanMismatch(f"border map built for {bmap.n_local} owned atoms, store has {atoms.n_local}")
    if len(atoms.x) != bmap.n_total:
        x = np.empty((bmap.n_total, 3))
        x[: atoms.n_local] = atoms.x[: atoms.n_local]
        atoms.x = x
    x = atoms.x
    swaps = bmap.swaps
    k = 0
    while k < len(swaps):
        axis = swaps[k].axis
        group = [s for s in swaps[k:] if s.axis == axis]
        for s in group:
            if not s.local:
                peers.send(s.send_node, Tag.COMMUNICATE, x[s.sendlist] + s.shift)
        for s in group:
            if s.local:
                x[s.recv_start : s.recv_start + s.recv_count] = x[s.sendlist] + s.shift
            else:
                (gx,) = peers.recv(s.recv_node, Tag.COMMUNICATE)
                if len(gx) != s.recv_count:
                    raise PlanMismatch(
                        f"axis {axis}: expected {s.recv_count} ghosts from node {s.recv_node}, got {len(gx)}"
                    )
                x[s.recv_start : s.recv_start + s.recv_count] = gx.reshape(-1, 3)
        k += len(group)
