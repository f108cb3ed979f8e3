"""Thermodynamic reporting, temperature-divergence rate, and runtime models."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import MASS


@dataclass(frozen=True)
class ThermoSample:
    iteration: int
    temperature: float
    potential: float
    kinetic: float
    total: float

    @classmethod
    def from_sums(cls, iteration: int, mv2: float, pe: float, n_atoms: int) -> ThermoSample:
        """Build a sample from globally reduced ``Σ m|v|²`` and potential energy."""
        ke = 0.5 * mv2
        return cls(iteration, mv2 / (3.0 * n_atoms), pe, ke, ke + pe)


def compute_temperature(velocities, n_atoms: int | None = None, mass: float = MASS) -> float:
    """``Σ m|v|² / (3 N)`` over one array or a sequence of per-worker arrays."""
    if isinstance(velocities, np.ndarray):
        velocities = [velocities]
    parts = [np.asarray(v, dtype=float).reshape(-1, 3) for v in velocities]
    total = sum(float(np.sum(v * v)) for v in parts)
    n = sum(len(v) for v in parts) if n_atoms is None else n_atoms
    if n == 0:
        return 0.0
    return mass * total / (3.0 * n)


# --- temperature divergence rate ------------------------------------------------


@dataclass(frozen=True)
class TdrReport:
    alpha: float
    beta: float
    n_samples: int
    delta_threshold: float | None = None
    max_abs_delta: float = 0.0

    @property
    def passed(self) -> bool | None:
        if self.delta_threshold is None:
            return None
        return self.max_abs_delta <= self.delta_threshold


def _temperatures(series) -> tuple[np.ndarray, np.ndarray | None]:
    items = list(series)
    if items and isinstance(items[0], ThermoSample):
        return (np.array([s.temperature for s in items]), np.array([s.iteration for s in items], dtype=float))
    return np.asarray(items, dtype=float), None


def compute_tdr(test, reference, iterations=None, delta_threshold: float | None = None,
                sample_every: int = 10) -> TdrReport:
    """Least-squares line through ``T_test(n) - T_ref(n)`` against iteration ``n``.

    Series may be ``ThermoSample`` sequences (iterations taken from them) or plain
    temperature arrays sampled every ``sample_every`` iterations from 0.
    """
    t_test, it_test = _temperatures(test)
    t_ref, it_ref = _temperatures(reference)
    if len(t_test) != len(t_ref):
        raise ValueError(f"series lengths differ: {len(t_test)} vs {len(t_ref)}")
    if it_test is not None and it_ref is not None and not np.array_equal(it_test, it_ref):
        raise ValueError("series are sampled at different iterations")
    if len(t_test) < 3:
        raise ValueError(f"need at least 3 samples, got {len(t_test)}")
    if iterations is None:
        iterations = it_test if it_test is not None else it_ref
    if iterations is None:
        iterations = sample_every * np.arange(len(t_test), dtype=float)
    n = np.asarray(iterations, dtype=float)
    delta = t_test - t_ref
    design = np.column_stack([n, np.ones_like(n)])
    (alpha, beta), *_ = np.linalg.lstsq(design, delta, rcond=None)
    return TdrReport(float(alpha), float(beta), len(delta), delta_threshold, float(np.max(np.abs(delta))))


def seed_spread_delta(runs) -> float:
    """Default bound on ``|delta T|``: the largest temperature gap between any two
    baseline runs that differ only in their seed."""
    series = [_temperatures(r)[0] for r in runs]
    if len(series) < 2:
        raise ValueError("need at least two seeds")
    if len({len(t) for t in series}) != 1:
        raise ValueError("seed runs have different lengths")
    return max(float(np.max(np.abs(a - b))) for k, a in enumerate(series) for b in series[k + 1 :])


# --- timing ---------------------------------------------------------------------


@dataclass(frozen=True)
class TimingBreakdown:
    """Whole-run seconds.  ``t_comm`` covers exchange, border and communicate,
    packing and unpacking included."""

    t_total: float
    t_force: float
    t_neigh: float
    t_comm: float

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.t_force + self.t_neigh + self.t_comm > self.t_total * (1 + 1e-9) + 1e-12:
            raise ValueError("routine times exceed the total")

    @property
    def t_other(self) -> float:
        return self.t_total - self.t_force - self.t_neigh - self.t_comm


def improvement(baseline_total: float, offpath_total: float) -> float:
    """Fractional runtime saving of the off-path run; negative when it is slower."""
    if baseline_total <= 0:
        raise ValueError("baseline time must be positive")
    return (baseline_total - offpath_total) / baseline_total


def max_comm_offload_improvement(b: TimingBreakdown) -> float:
    """Percent saving available from hiding all communication time."""
    if b.t_total <= 0:
        return 0.0
    return 100.0 * b.t_comm / b.t_total


@dataclass(frozen=True)
class PerfMeasurement:
    """Per-call routine times for configuration ``p/h/b``.

    Host fields come from the original algorithm with ``h`` host threads and no
    offload; offload fields from the same algorithm run on ``b`` throttled offload
    threads.  ``host_t_comm`` is the exchange plus border time of one rebuild
    iteration and ``host_t_neigh`` includes sorting.
    """

    p: int
    h: int
    b: int
    host_t_force: float
    host_t_neigh: float
    host_t_comm: float
    host_t_total: float
    offload_t_force: float
    offload_t_comm: float

    @property
    def label(self) -> str:
        return f"{self.p}/{self.h}/{self.b}"


def estimate_offpath_time(m: PerfMeasurement, n_iterations: int, reneigh_interval: int) -> float:
    if reneigh_interval <= 0:
        raise ValueError(f"re-neighboring interval must be positive, got {reneigh_interval}")
    host_path = m.host_t_neigh + m.host_t_comm
    offload_path = m.offload_t_force + m.offload_t_comm
    saving = m.host_t_force + host_path - max(host_path, offload_path)
    return m.host_t_total - saving * (n_iterations / reneigh_interval)


def with_auxiliary_node(m: PerfMeasurement, t_force: float, t_comm: float) -> PerfMeasurement:
    """Replace the offload side by a single host-class core with the given per-call times."""
    return PerfMeasurement(m.p, m.h, 1, m.host_t_force, m.host_t_neigh, m.host_t_comm, m.host_t_total,
                           t_force, t_comm)


def find_knee(host_path_by_threads: dict[int, float], offload_path: float) -> int:
    """Host thread count whose neighbor-build path is closest to the offload force path."""
    if not host_path_by_threads:
        raise ValueError("no host measurements")
    return min(sorted(host_path_by_threads), key=lambda h: abs(host_path_by_threads[h] - offload_path))


def peak_ratio(host_peak_per_socket: float, sockets: int, offload_peak: float) -> float:
    if offload_peak <= 0:
        raise ValueError("offload peak must be positive")
    return host_peak_per_socket * sockets / offload_peak


# --- CSV ------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        # shortest exact form; always reads back as a float, including -0.0
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_csv(rows: list[dict], columns: list[str], header: dict[str, str] | None = None) -> str:
    """CSV text with optional ``# key=value`` provenance lines first."""
    out = io.StringIO()
    for k, v in (header or {}).items():
        out.write(f"# {k}={v}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return out.getvalue()


def read_csv(text: str) -> tuple[dict[str, str], list[str], list[dict[str, str]]]:
    header: dict[str, str] = {}
    lines = text.splitlines()
    k = 0
    while k < len(lines) and lines[k].startswith("# "):
        key, _, value = lines[k][2:].partition("=")
        header[key] = value
        k += 1
    reader = csv.reader(lines[k:])
    columns = next(reader)
    rows = [dict(zip(columns, r)) for r in reader]
    return header, columns, rows


def _parse(value: str):
    if value == "":
        return None
    if value in ("true", "false"):
        return value == "true"
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    return value


THERMO_COLUMNS = ["iteration", "T", "PE", "KE", "E"]
TIMING_COLUMNS = ["label", "mode", "t_total", "t_force", "t_neigh", "t_comm"]
TDR_COLUMNS = ["label", "alpha", "beta", "threshold", "pass"]


def thermo_csv(samples: list[ThermoSample], header: dict[str, str] | None = None) -> str:
    rows = [
        {"iteration": s.iteration, "T": s.temperature, "PE": s.potential, "KE": s.kinetic, "E": s.total}
        for s in samples
    ]
    return write_csv(rows, THERMO_COLUMNS, header)


def parse_thermo_csv(text: str) -> tuple[dict[str, str], list[ThermoSample]]:
    header, _, rows = read_csv(text)
    return header, [
        ThermoSample(int(r["iteration"]), float(r["T"]), float(r["PE"]), float(r["KE"]), float(r["E"]))
        for r in rows
    ]


def timing_csv(rows: list[tuple[str, str, TimingBreakdown]], header: dict[str, str] | None = None) -> str:
    return write_csv(
        [{"label": label, "mode": mode, **asdict(b)} for label, mode, b in rows], TIMING_COLUMNS, header
    )


def parse_timing_csv(text: str) -> tuple[dict[str, str], list[tuple[str, str, TimingBreakdown]]]:
    header, _, rows = read_csv(text)
    return header, [
        (r["label"], r["mode"], TimingBreakdown(*(float(r[c]) for c in TIMING_COLUMNS[2:]))) for r in rows
    ]


def tdr_csv(rows: list[tuple[str, TdrReport]], header: dict[str, str] | None = None) -> str:
    return write_csv(
        [
            {"label": label, "alpha": t.alpha, "beta": t.beta, "threshold": t.delta_threshold, "pass": t.passed}
            for label, t in rows
        ],
        TDR_COLUMNS,
        header,
    )


def parse_table_csv(text: str) -> tuple[dict[str, str], list[str], list[dict]]:
    """Generic reader returning typed cells (int, float, bool or None)."""
    header, columns, rows = read_csv(text)
    return header, columns, [{k: _parse(v) for k, v in r.items()} for r in rows]


def reemit_csv(text: str) -> str:
    """Parse and re-serialize any CSV written by this module."""
    header, columns, rows = parse_table_csv(text)
    return write_csv(rows, columns, header)


def relative_error(estimate: float, measured: float) -> float:
    return abs(estimate - measured) / abs(measured) if measured else math.inf
