"""Baseline and off-path execution across host/offload worker pairs.

Every node runs a host worker and, in the off-path modes, an offload worker.
Workers talk only through transport endpoints.  Host-to-offload traffic on a
rebuild iteration follows a fixed sequence::

    host -> offload   CONTROL(round, iteration), X_SNAPSHOT
    host -> offload   PLAN, PERMUTATION                (after the host's rebuild)
    offload -> host   F_RESULT
    host -> offload   NLIST (new list and border map; queued, not awaited)

and ``CONTROL(stop)`` ends the run.  In ``offpath`` mode the offload evaluates
forces with the list from the previous rebuild while the host rebuilds.  In
``offpath_sync_debug`` mode the new list and map are sent before the forces are
computed, so the result must match the baseline bit for bit.
"""

from __future__ import annotations

import hashlib
import multiprocessing as mp
import os
import queue
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .analysis import ThermoSample, TimingBreakdown
from .clock import ChunkRunner, CpuGate, make_clock
from .core import (
    MASS,
    AtomStore,
    ConfigError,
    Decomposition,
    GlobalBox,
    SimParams,
    Snapshot,
    check_decomposition,
    choose_proc_grid,
    create_lattice,
    store_from_snapshot,
    wrap_periodic,
)
from .dynamics import final_integrate, force_compute, initial_integrate
from .halo import BorderMap, ExchangePlan, PeerGroup, border, communicate, exchange, replay_exchange
from .neighbor import NeighborList, PermutationRecord, apply_permutation, neighbor_build, sort_atoms
from .transport import (
    DEFAULT_TIMEOUT,
    HOST,
    OFFLOAD,
    InProcessHub,
    PeerClosed,
    ProtocolDesync,
    SocketEndpoint,
    Tag,
    Throttle,
    TransportError,
    TransportTimeout,
    pack_arrays,
    parse_address,
    rank_of,
    unpack_arrays,
    worker_name,
)

CONTROL_ROUND, CONTROL_STOP = 1, 2

# routine names grouped the way the timing breakdown reports them
FORCE_ROUTINES = ("force",)
NEIGH_ROUTINES = ("neigh", "sort")
COMM_ROUTINES = ("exchange", "border", "communicate")


class RunMode(str, Enum):
    BASELINE = "baseline"
    OFFPATH = "offpath"
    SYNC_DEBUG = "offpath_sync_debug"

    @classmethod
    def parse(cls, text: str) -> RunMode:
        try:
            return cls(text.replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown mode {text!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def uses_offload(self) -> bool:
        return self is not RunMode.BASELINE


class IndexConsistencyError(RuntimeError):
    """Forces returned by the offload belong to different atoms than the host's slots."""


@dataclass(frozen=True)
class FaultSpec:
    """Makes one offload worker misbehave, for error-path tests.

    ``action`` is ``"kill"`` (close the endpoint and exit) or ``"wrong_tag"``
    (answer with an NLIST frame where F_RESULT belongs).  ``stage`` is
    ``"after_control"`` or ``"after_snapshot"``.
    """

    node: int = 0
    iteration: int = 1
    stage: str = "after_snapshot"
    action: str = "kill"


@dataclass
class RunOptions:
    n_nodes: int = 1
    proc_grid: tuple[int, int, int] | None = None
    host_threads: int = 1
    offload_threads: int = 1
    throttle: float = 1.0
    # slows every compute kernel of the run; used to time the original algorithm as
    # if it ran on offload cores
    compute_throttle: float = 1.0
    clock: str = "auto"
    transport: str = "inprocess"
    peers: list[str] | None = None
    thermo_every: int = 10
    digest_every: int = 0
    debug_ids: bool = True
    timeout: float = DEFAULT_TIMEOUT
    fault: FaultSpec | None = None
    initial: Snapshot | None = None

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise ConfigError(f"need at least one node pair, got {self.n_nodes}")
        if self.host_threads < 1 or self.offload_threads < 1:
            raise ConfigError("thread counts must be >= 1")
        if not self.throttle >= 1.0 or not self.compute_throttle >= 1.0:
            raise ConfigError("throttle factors must be >= 1")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}; expected inprocess or socket")
        if self.clock not in ("auto", "wall", "virtual"):
            raise ConfigError(f"unknown clock {self.clock!r}; expected auto, wall or virtual")
        if self.thermo_every < 1 or self.digest_every < 0:
            raise ConfigError("thermo_every must be >= 1 and digest_every >= 0")


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def resolve_clock(opts: RunOptions, mode: RunMode) -> str:
    """``auto`` picks the virtual clock when the host/offload topology has more
    compute threads than there are cores.

    The decision ignores ``mode`` so baseline and off-path runs of one
    configuration are always timed on the same kind of clock.
    """
    if opts.clock != "auto":
        return opts.clock
    busy = opts.n_nodes * (opts.host_threads + opts.offload_threads)
    return "wall" if available_cores() >= busy else "virtual"


# --- per-worker records ---------------------------------------------------------


@dataclass
class LedgerEntry:
    iteration: int
    rebuild: bool
    list_version: int
    stamps: dict[str, tuple[float, float]] = field(default_factory=dict)


class IterationLedger:
    """Which neighbor-list version each iteration's forces used, and routine stamps."""

    def __init__(self) -> None:
        self.entries: dict[int, LedgerEntry] = {}

    def open(self, iteration: int, rebuild: bool) -> None:
        self.entries[iteration] = LedgerEntry(iteration, rebuild, -1)

    def use(self, iteration: int, version: int) -> None:
        self.entries[iteration].list_version = version

    def stamp(self, iteration: int, name: str, t0: float, t1: float) -> None:
        entry = self.entries.get(iteration)
        if entry is not None:
            entry.stamps[name] = (t0, t1)

    def versions(self) -> np.ndarray:
        return np.array([self.entries[k].list_version for k in sorted(self.entries)])

    def rebuild_iterations(self) -> list[int]:
        return [k for k in sorted(self.entries) if self.entries[k].rebuild and k > 0]


class Recorder:
    def __init__(self, clock) -> None:
        self.clock = clock
        self.calls: dict[str, list[tuple[int, float]]] = defaultdict(list)
        self.ledger = IterationLedger()

    @contextmanager
    def time(self, name: str, iteration: int):
        t0 = self.clock.now()
        try:
            yield
        finally:
            t1 = self.clock.now()
            self.calls[name].append((iteration, t1 - t0))
            self.ledger.stamp(iteration, name, t0, t1)


@dataclass
class WorkerReport:
    node: int
    role: int
    calls: dict[str, list[tuple[int, float]]]
    ledger: IterationLedger
    t_total: float
    thermo: list[tuple[int, float, float, np.ndarray, int]] = field(default_factory=list)
    digests: list[tuple[int, str]] = field(default_factory=list)
    final_gid: np.ndarray | None = None
    final_x: np.ndarray | None = None
    final_v: np.ndarray | None = None
    throttle_injected: float = 0.0
    rounds: int = 0
    error: BaseException | None = None

    def total(self, names) -> float:
        return sum(dt for n in names for _, dt in self.calls.get(n, ()))

    def per_iteration(self, names) -> dict[int, float]:
        out: dict[int, float] = defaultdict(float)
        for n in names:
            for it, dt in self.calls.get(n, ()):
                out[it] += dt
        return dict(out)


@dataclass
class SimulationResult:
    params: SimParams
    mode: RunMode
    options: RunOptions
    proc_grid: tuple[int, int, int]
    clock: str
    thermo: list[ThermoSample]
    momentum: list[tuple[int, np.ndarray]]
    atom_counts: list[tuple[int, int]]
    hosts: list[WorkerReport]
    offloads: list[WorkerReport]

    @property
    def t_total(self) -> float:
        return max(r.t_total for r in self.hosts)

    @property
    def breakdown(self) -> TimingBreakdown:
        """Whole-run breakdown: the slowest host's total, routine sums averaged over hosts."""
        n = len(self.hosts)
        return TimingBreakdown(
            self.t_total,
            sum(r.total(FORCE_ROUTINES) for r in self.hosts) / n,
            sum(r.total(NEIGH_ROUTINES) for r in self.hosts) / n,
            sum(r.total(COMM_ROUTINES) for r in self.hosts) / n,
        )

    @property
    def ledger(self) -> IterationLedger:
        return self.hosts[0].ledger

    def trajectory(self) -> list[tuple[int, int, str]]:
        """(iteration, node, digest of owned x and v in slot order)."""
        return [(it, r.node, d) for r in self.hosts for it, d in r.digests]

    def final_state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global (gid, x, v) at the end of the run, sorted by gid."""
        gid = np.concatenate([r.final_gid for r in self.hosts])
        x = np.concatenate([r.final_x for r in self.hosts])
        v = np.concatenate([r.final_v for r in self.hosts])
        order = np.argsort(gid, kind="stable")
        return gid[order], x[order], v[order]

    def snapshot(self) -> Snapshot:
        gid, x, v = self.final_state()
        box = GlobalBox.from_params(self.params)
        return Snapshot(box, self.params.n_iterations, gid, wrap_periodic(x, box), v)

    def temperatures(self) -> np.ndarray:
        return np.array([s.temperature for s in self.thermo])


# --- message payloads ------------------------------------------------------------


def encode_list(nl: NeighborList, bmap: BorderMap) -> bytes:
    meta = np.array([nl.n_local, nl.n_total, nl.build_iteration, nl.version])
    return pack_arrays(meta, nl.offsets, nl.neighbors, *bmap.to_arrays())


def decode_list(payload: bytes) -> tuple[NeighborList, BorderMap]:
    arrays = unpack_arrays(payload)
    n_local, n_total, built, version = (int(v) for v in arrays[0])
    offsets, neighbors = arrays[1], arrays[2]
    owners = np.repeat(np.arange(n_local, dtype=np.int64), np.diff(offsets))
    return NeighborList(offsets, neighbors, owners, n_local, n_total, built, version), BorderMap.from_arrays(arrays[3:])


def digest(atoms: AtomStore) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(atoms.x[: atoms.n_local]).tobytes())
    h.update(np.ascontiguousarray(atoms.v).tobytes())
    return h.hexdigest()


class AsyncSender:
    """Sends queued messages to one peer in order from a background thread.

    Payloads may be zero-argument callables so packing also leaves the worker's
    critical path.  Under a ``CpuGate`` those callables run only while the gate is
    free, so packing never time-slices against a computing worker.  Delivery
    failures surface on the next call to ``put`` or ``close``.
    """

    def __init__(self, endpoint, peer: int) -> None:
        self.endpoint = endpoint
        self.peer = peer
        self._q: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._gate = getattr(getattr(endpoint, "mailbox", None), "gate", None)
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"sender-{endpoint.rank}")
        self._thread.start()

    def _loop(self) -> None:
        while True:
            item = self._q.get()
            if item is None:
                return
            tag, payload, stamp = item
            if self._error is not None:
                continue
            try:
                data = self._evaluate(payload) if callable(payload) else payload
                self.endpoint.send(self.peer, tag, data, stamp=stamp)
            except BaseException as err:  # noqa: BLE001 - reported to the owner
                self._error = err

    def _evaluate(self, payload):
        if self._gate is None:
            return payload()
        self._gate.acquire()
        try:
            return payload()
        finally:
            self._gate.release()

    def put(self, tag: Tag, payload, stamp: float) -> None:
        self._q.put((tag, payload, stamp))

    def close(self) -> BaseException | None:
        """Flushes the queue.  The owner holds the gate, so it is lent out while
        the sender drains."""
        self._q.put(None)
        if self._gate is not None:
            self._gate.release()
        try:
            self._thread.join()
        finally:
            if self._gate is not None:
                self._gate.acquire()
        return self._error


def _expect(endpoint, peer: int, tag: Tag, iteration: int) -> list[np.ndarray]:
    """Strict protocol receive; any failure becomes a desync naming the awaited tag."""
    try:
        msg = endpoint.recv_strict(peer, tag)
    except ProtocolDesync as err:
        raise ProtocolDesync(f"iteration {iteration}: {err}", expected=tag, peer=peer, iteration=iteration) from err
    except (PeerClosed, TransportTimeout) as err:
        raise ProtocolDesync(
            f"iteration {iteration}: expected {tag.name} from {worker_name(peer)}, but {err}",
            expected=tag, peer=peer, iteration=iteration,
        ) from err
    return unpack_arrays(msg.payload)


# --- workers ---------------------------------------------------------------------


@dataclass
class WorkerContext:
    params: SimParams
    mode: RunMode
    options: RunOptions
    proc_grid: tuple[int, int, int]
    node: int
    clock_kind: str


def _host_main(ctx: WorkerContext, endpoint) -> WorkerReport:
    p, opts, mode = ctx.params, ctx.options, ctx.mode
    clock = make_clock(ctx.clock_kind)
    endpoint.clock = clock
    runner = ChunkRunner(opts.host_threads, clock)
    throttle = Throttle(opts.compute_throttle, clock)
    rec = Recorder(clock)
    decomp = Decomposition.build(p, ctx.proc_grid, ctx.node)
    peers = PeerGroup(endpoint, HOST)
    offload = rank_of(ctx.node, OFFLOAD)
    sender = AsyncSender(endpoint, offload) if mode.uses_offload else None
    report = WorkerReport(ctx.node, HOST, rec.calls, rec.ledger, 0.0)
    halo = p.halo_width

    if opts.initial is not None:
        atoms = store_from_snapshot(opts.initial, decomp)
    else:
        atoms = create_lattice(p, decomp)

    def sample(it: int, pe: float) -> None:
        if it % opts.thermo_every == 0:
            report.thermo.append((it, MASS * float(np.sum(atoms.v * atoms.v)), pe, MASS * atoms.v.sum(axis=0), atoms.n_local))
        if opts.digest_every and it % opts.digest_every == 0:
            report.digests.append((it, digest(atoms)))

    def rebuild(it: int, version: int, ship=None):
        with rec.time("exchange", it):
            plan = exchange(atoms, decomp, peers)
        if version % p.sort_interval == 0:
            with rec.time("sort", it):
                perm = throttle.run(sort_atoms, atoms, p, decomp)
        else:
            perm = PermutationRecord.identity(atoms.n_local)
        if ship is not None:
            ship(plan, perm)
        with rec.time("border", it):
            bmap = border(atoms, decomp, halo, peers)
        with rec.time("neigh", it):
            nl = throttle.run(neighbor_build, atoms, p, decomp, runner, it, version)
        return plan, perm, bmap, nl

    def forces(it: int, nl: NeighborList) -> float:
        with rec.time("force", it):
            return throttle.run(force_compute, atoms, nl, p, runner)

    try:
        clock.reset()
        rec.ledger.open(0, True)
        _, _, bmap, nl = rebuild(0, 0)
        rec.ledger.use(0, nl.version)
        pe = forces(0, nl)
        sample(0, pe)
        if mode is RunMode.OFFPATH:
            sender.put(Tag.NLIST, lambda m=bmap, n=nl: encode_list(n, m), clock.now())

        version = 0
        for it in range(1, p.n_iterations + 1):
            is_rebuild = it % p.reneigh_interval == 0
            rec.ledger.open(it, is_rebuild)
            with rec.time("integrate", it):
                throttle.run(initial_integrate, atoms, p)
            if not is_rebuild:
                with rec.time("communicate", it):
                    communicate(atoms, bmap, peers)
                pe = forces(it, nl)
                rec.ledger.use(it, nl.version)
            elif mode is RunMode.BASELINE:
                version += 1
                _, _, bmap, nl = rebuild(it, version)
                pe = forces(it, nl)
                rec.ledger.use(it, nl.version)
            else:
                version += 1
                old_version = nl.version
                with rec.time("offload_send", it):
                    sender.put(Tag.CONTROL, pack_arrays(np.array([CONTROL_ROUND, it])), clock.now())
                    snap = [atoms.x[: atoms.n_local].copy()]
                    if opts.debug_ids:
                        snap.append(atoms.gid[: atoms.n_local].copy())
                    sender.put(Tag.X_SNAPSHOT, pack_arrays(*snap), clock.now())

                def ship(plan: ExchangePlan, perm: PermutationRecord, it: int = it) -> None:
                    # both exist before border and neighbor_build start, so the offload
                    # worker can replay its forces while the host is still rebuilding
                    with rec.time("offload_send", it):
                        sender.put(Tag.PLAN, pack_arrays(*plan.to_arrays()), clock.now())
                        sender.put(Tag.PERMUTATION, pack_arrays(perm.perm), clock.now())

                plan, perm, bmap, nl = rebuild(it, version, ship)
                if mode is RunMode.SYNC_DEBUG:
                    with rec.time("offload_send", it):
                        sender.put(Tag.NLIST, encode_list(nl, bmap), clock.now())
                with rec.time("offload_wait", it):
                    result = _expect(endpoint, offload, Tag.F_RESULT, it)
                f, pe_arr = result[0].reshape(-1, 3), result[1]
                if len(f) != atoms.n_local:
                    raise IndexConsistencyError(
                        f"iteration {it}: offload returned {len(f)} forces for {atoms.n_local} owned atoms"
                    )
                if opts.debug_ids and not np.array_equal(result[2], atoms.gid[: atoms.n_local]):
                    bad = int(np.flatnonzero(result[2] != atoms.gid[: atoms.n_local])[0])
                    raise IndexConsistencyError(
                        f"iteration {it}: force slot {bad} belongs to atom {int(result[2][bad])}, "
                        f"host slot holds atom {int(atoms.gid[bad])}"
                    )
                atoms.f = f
                pe = float(pe_arr[0])
                rec.ledger.use(it, nl.version if mode is RunMode.SYNC_DEBUG else old_version)
                if mode is RunMode.OFFPATH:
                    sender.put(Tag.NLIST, lambda m=bmap, n=nl: encode_list(n, m), clock.now())
            with rec.time("integrate", it):
                throttle.run(final_integrate, atoms, p)
            sample(it, pe)
        if sender is not None:
            sender.put(Tag.CONTROL, pack_arrays(np.array([CONTROL_STOP, p.n_iterations])), clock.now())
        if opts.digest_every == 0:
            report.digests.append((p.n_iterations, digest(atoms)))
        report.t_total = clock.now()
        report.final_gid = atoms.gid[: atoms.n_local].copy()
        report.final_x = atoms.x[: atoms.n_local].copy()
        report.final_v = atoms.v.copy()
        report.throttle_injected = throttle.injected
    finally:
        runner.close()
        send_error = sender.close() if sender is not None else None
    if send_error is not None:
        raise send_error
    return report


def _offload_main(ctx: WorkerContext, endpoint) -> WorkerReport:
    p, opts, mode = ctx.params, ctx.options, ctx.mode
    clock = make_clock(ctx.clock_kind)
    endpoint.clock = clock
    runner = ChunkRunner(opts.offload_threads, clock)
    throttle = Throttle(opts.throttle, clock)
    rec = Recorder(clock)
    peers = PeerGroup(endpoint, OFFLOAD)
    host = rank_of(ctx.node, HOST)
    box = GlobalBox.from_params(p)
    report = WorkerReport(ctx.node, OFFLOAD, rec.calls, rec.ledger, 0.0)
    fault = opts.fault if opts.fault is not None and opts.fault.node == ctx.node else None

    def inject(stage: str, it: int) -> bool:
        if fault is None or fault.stage != stage or fault.iteration != it:
            return False
        if fault.action == "kill":
            endpoint.close()
            return True
        if fault.action == "wrong_tag":
            endpoint.send(host, Tag.NLIST, pack_arrays(np.zeros(0)))
        return False

    def gids_after(gid: np.ndarray, plan: ExchangePlan, perm: PermutationRecord) -> np.ndarray:
        return apply_permutation(replay_exchange(gid, plan, peers), perm)

    try:
        clock.reset()
        it = 0
        while True:
            if mode is RunMode.OFFPATH:
                nl, bmap = decode_list(endpoint.recv_strict(host, Tag.NLIST).payload)
            ctrl = _expect(endpoint, host, Tag.CONTROL, it)[0]
            if int(ctrl[0]) == CONTROL_STOP:
                break
            it = int(ctrl[1])
            if inject("after_control", it):
                return report
            snap = _expect(endpoint, host, Tag.X_SNAPSHOT, it)
            if inject("after_snapshot", it):
                return report
            x = snap[0].reshape(-1, 3)
            n = len(x)
            rec.ledger.open(it, True)
            if mode is RunMode.OFFPATH:
                atoms = AtomStore(x, np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n, np.int64))
                with rec.time("communicate", it):
                    communicate(atoms, bmap, peers)
                with rec.time("force", it):
                    pe = throttle.run(force_compute, atoms, nl, p, runner)
                rec.ledger.use(it, nl.version)
                plan = ExchangePlan.from_arrays(_expect(endpoint, host, Tag.PLAN, it))
                perm = PermutationRecord(_expect(endpoint, host, Tag.PERMUTATION, it)[0])
                with rec.time("replay", it):
                    f = apply_permutation(replay_exchange(atoms.f, plan, peers), perm)
                    extra = [gids_after(snap[1], plan, perm)] if opts.debug_ids else []
            else:
                plan = ExchangePlan.from_arrays(_expect(endpoint, host, Tag.PLAN, it))
                perm = PermutationRecord(_expect(endpoint, host, Tag.PERMUTATION, it)[0])
                nl, bmap = decode_list(endpoint.recv_strict(host, Tag.NLIST).payload)
                with rec.time("replay", it):
                    x = apply_permutation(replay_exchange(wrap_periodic(x, box), plan, peers), perm)
                    extra = [gids_after(snap[1], plan, perm)] if opts.debug_ids else []
                n = len(x)
                atoms = AtomStore(x, np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n, np.int64))
                with rec.time("communicate", it):
                    communicate(atoms, bmap, peers)
                with rec.time("force", it):
                    pe = throttle.run(force_compute, atoms, nl, p, runner)
                rec.ledger.use(it, nl.version)
                f = atoms.f
            if inject("before_result", it):
                return report
            endpoint.send(host, Tag.F_RESULT, pack_arrays(f, np.array([pe]), *extra))
            report.rounds += 1
        report.t_total = clock.now()
        report.throttle_injected = throttle.injected
    finally:
        runner.close()
    return report


def _run_worker(role: int, ctx: WorkerContext, endpoint) -> WorkerReport:
    main = _host_main if role == HOST else _offload_main
    try:
        return main(ctx, endpoint)
    except BaseException as err:  # noqa: BLE001 - carried back to the launcher
        endpoint.close()
        return WorkerReport(ctx.node, role, {}, IterationLedger(), 0.0, error=err)


# --- launchers -------------------------------------------------------------------


def _launch_threads(ctxs: list[tuple[int, WorkerContext]], n_ranks: int, timeout: float,
                    gate: CpuGate | None = None) -> list[WorkerReport]:
    hub = InProcessHub(n_ranks, timeout)
    reports: dict[int, WorkerReport] = {}
    if gate is not None:
        for ep in hub.endpoints:
            ep.mailbox.gate = gate

    def body(role: int, ctx: WorkerContext) -> None:
        r = rank_of(ctx.node, role)
        if gate is not None:
            gate.acquire()
        try:
            reports[r] = _run_worker(role, ctx, hub.endpoint(r))
        finally:
            if gate is not None:
                gate.release()

    threads = [
        threading.Thread(target=body, args=(role, ctx), name=f"{worker_name(rank_of(ctx.node, role))}")
        for role, ctx in ctxs
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    hub.close()
    return [reports[rank_of(ctx.node, role)] for role, ctx in ctxs]


def _process_entry(role: int, ctx: WorkerContext, n_ranks: int, address: str | None, ports, addresses_in, results) -> None:
    rank = rank_of(ctx.node, role)
    if address is not None:
        listener = SocketEndpoint.listen(*parse_address(address))
    else:
        listener = SocketEndpoint.listen()
    ports.put((rank, listener.getsockname()[:2]))
    addresses = addresses_in.recv()
    endpoint = SocketEndpoint(rank, addresses, listener, ctx.options.timeout)
    report = _run_worker(role, ctx, endpoint)
    report.error = _picklable(report.error)
    results.put((rank, report))
    # keep the endpoint open until every worker has finished reading
    addresses_in.recv()
    endpoint.close()


def _picklable(err: BaseException | None) -> BaseException | None:
    if err is None:
        return None
    if isinstance(err, ProtocolDesync):
        return ProtocolDesync(str(err), expected=err.expected, peer=err.peer, iteration=err.iteration)
    try:
        import pickle

        pickle.dumps(err)
        return err
    except Exception:  # noqa: BLE001
        return RuntimeError(f"{type(err).__name__}: {err}")


def _launch_processes(ctxs: list[tuple[int, WorkerContext]], n_ranks: int, peers: list[str] | None,
                      timeout: float) -> list[WorkerReport]:
    mpctx = mp.get_context("spawn")
    ports = mpctx.Queue()
    results = mpctx.Queue()
    procs, pipes = [], {}
    for role, ctx in ctxs:
        r = rank_of(ctx.node, role)
        parent, child = mpctx.Pipe()
        address = peers[r] if peers else None
        proc = mpctx.Process(target=_process_entry, args=(role, ctx, n_ranks, address, ports, child, results),
                             daemon=True)
        proc.start()
        procs.append(proc)
        pipes[r] = parent
    addresses: list = [None] * n_ranks
    for _ in ctxs:
        r, addr = ports.get(timeout=timeout)
        addresses[r] = tuple(addr)
    # unused ranks (offloads of a baseline run) still need a placeholder
    addresses = [a if a is not None else ("127.0.0.1", 9) for a in addresses]
    for pipe in pipes.values():
        pipe.send(addresses)
    reports = {}
    for _ in ctxs:
        r, rep = results.get(timeout=timeout + 60)
        reports[r] = rep
    for pipe in pipes.values():
        pipe.send("done")
    for proc in procs:
        proc.join(timeout=30)
    return [reports[rank_of(ctx.node, role)] for role, ctx in ctxs]


def _raise_first(reports: list[WorkerReport]) -> None:
    failed = [r for r in reports if r.error is not None]
    if not failed:
        return
    # a worker's own fault outranks the transport errors it causes elsewhere
    failed.sort(key=lambda r: (isinstance(r.error, TransportError), not isinstance(r.error, ProtocolDesync),
                               r.role != HOST, r.node))
    raise failed[0].error


def _execute(params: SimParams, opts: RunOptions, mode: RunMode) -> SimulationResult:
    box = GlobalBox.from_params(params)
    grid = tuple(opts.proc_grid) if opts.proc_grid else choose_proc_grid(opts.n_nodes, box)
    if grid[0] * grid[1] * grid[2] != opts.n_nodes:
        raise ConfigError(f"process grid {grid} does not have {opts.n_nodes} nodes")
    Decomposition(box, grid, (0, 0, 0), params.halo_width)
    check_decomposition(params, grid)
    clock_kind = resolve_clock(opts, mode)
    ctxs = []
    for node in range(opts.n_nodes):
        ctx = WorkerContext(params, mode, opts, grid, node, clock_kind)
        ctxs.append((HOST, ctx))
        if mode.uses_offload:
            ctxs.append((OFFLOAD, ctx))
    n_ranks = 2 * opts.n_nodes
    if opts.transport == "socket":
        if opts.peers is not None and len(opts.peers) != n_ranks:
            raise ConfigError(f"socket transport needs {n_ranks} peer addresses, got {len(opts.peers)}")
        reports = _launch_processes(ctxs, n_ranks, opts.peers, opts.timeout)
    else:
        gate = CpuGate() if clock_kind == "virtual" else None
        reports = _launch_threads(ctxs, n_ranks, opts.timeout, gate)
    _raise_first(reports)
    hosts = sorted((r for r in reports if r.role == HOST), key=lambda r: r.node)
    offloads = sorted((r for r in reports if r.role == OFFLOAD), key=lambda r: r.node)
    thermo, momentum, counts = _combine_thermo(hosts, params.n_atoms)
    return SimulationResult(params, mode, opts, grid, clock_kind, thermo, momentum, counts, hosts, offloads)


def _combine_thermo(hosts: list[WorkerReport], n_atoms: int):
    thermo, momentum, counts = [], [], []
    for k in range(len(hosts[0].thermo)):
        rows = [h.thermo[k] for h in hosts]
        it = rows[0][0]
        mv2 = pe = 0.0
        mom = np.zeros(3)
        count = 0
        for _, m, e, p, c in rows:
            mv2 += m
            pe += e
            mom = mom + p
            count += c
        thermo.append(ThermoSample.from_sums(it, mv2, pe, n_atoms))
        momentum.append((it, mom))
        counts.append((it, count))
    return thermo, momentum, counts


def run_baseline(params: SimParams, options: RunOptions | None = None) -> SimulationResult:
    return _execute(params, options or RunOptions(), RunMode.BASELINE)


def run_offpath(params: SimParams, options: RunOptions | None = None,
                mode: RunMode = RunMode.OFFPATH) -> SimulationResult:
    mode = RunMode(mode)
    if not mode.uses_offload:
        raise ConfigError("run_offpath needs an off-path mode")
    return _execute(params, options or RunOptions(), mode)


def run(params: SimParams, options: RunOptions | None = None, mode: RunMode = RunMode.BASELINE) -> SimulationResult:
    mode = RunMode(mode)
    return run_baseline(params, options) if mode is RunMode.BASELINE else run_offpath(params, options, mode)
