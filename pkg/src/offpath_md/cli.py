"""Command-line harness: ``run``, ``sweep``, ``model`` and ``report``.

Settings come from built-in defaults, then an optional ``key=value`` config file,
then command-line flags (flags win).  ``OFFPATH_MD_OUTPUT_DIR`` replaces the
default output directory.  Every CSV starts with ``# key=value`` lines holding the
full configuration, and such a CSV is itself accepted as a config file.

Exit codes: 0 success, 1 sync-debug mismatch, 2 configuration error,
3 protocol desync, 4 numerical blow-up (atoms closer than the separation floor,
or flung outside the binned region).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import statistics
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analysis import (
    PerfMeasurement,
    TimingBreakdown,
    compute_tdr,
    estimate_offpath_time,
    improvement,
    max_comm_offload_improvement,
    parse_thermo_csv,
    peak_ratio,
    relative_error,
    seed_spread_delta,
    tdr_csv,
    thermo_csv,
    timing_csv,
    write_csv,
)
from .core import ConfigError, SimParams, read_snapshot, write_snapshot
from .dynamics import NumericalBlowup
from .halo import MigrationError, PlanMismatch
from .neighbor import BinningError
from .scheduler import (
    COMM_ROUTINES,
    IndexConsistencyError,
    RunMode,
    RunOptions,
    SimulationResult,
    run,
)
from .transport import ProtocolDesync

OUTPUT_ENV = "OFFPATH_MD_OUTPUT_DIR"
EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_DESYNC, EXIT_BLOWUP = 0, 1, 2, 3, 4
MIN_MODEL_ITERATIONS = 50


@dataclass
class RunConfig:
    # simulation
    cells: tuple[int, int, int] = (10, 10, 10)
    iters: int = 1000
    reneigh: int = 20
    sort_interval: int = 5
    skin: float = 0.3
    r_cut: float = 2.5
    dt: float = 0.005
    density: float = 0.8442
    t_init: float = 1.44
    epsilon: float = 1.0
    sigma: float = 1.0
    seed: int = 12345
    # execution
    mode: str = "baseline"
    nodes: int = 2
    proc_grid: tuple[int, int, int] | None = None
    host_threads: int = 1
    offload_threads: int = 1
    throttle: float = 2.0
    clock: str = "auto"
    transport: str = "inprocess"
    peers: tuple[str, ...] | None = None
    thermo_every: int = 10
    digest_every: int = 0
    debug_ids: bool = True
    timeout: float = 120.0
    repeats: int = 1
    # outputs
    output_dir: str = "out"
    dump: str | None = None
    load: str | None = None
    # sweep axes
    sweep_cells: tuple[int, ...] = (10,)
    sweep_reneigh: tuple[int, ...] = (1, 5, 10, 20)
    sweep_skins: tuple[float, ...] = (0.3,)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode != "both":
            RunMode.parse(self.mode)
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.peers is not None and len(self.peers) != 2 * self.nodes:
            raise ConfigError(f"peers must list {2 * self.nodes} host:port addresses, got {len(self.peers)}")
        self.params()
        self.options()

    def params(self, **override) -> SimParams:
        values = dict(
            epsilon=self.epsilon, sigma=self.sigma, r_cut=self.r_cut, skin=self.skin, dt=self.dt,
            reneigh_interval=self.reneigh, sort_interval=self.sort_interval, n_iterations=self.iters,
            unit_cells=tuple(self.cells), density=self.density, t_init=self.t_init, rng_seed=self.seed,
        )
        values.update(override)
        return SimParams(**values)

    def options(self, **override) -> RunOptions:
        values = dict(
            n_nodes=self.nodes, proc_grid=self.proc_grid, host_threads=self.host_threads,
            offload_threads=self.offload_threads, throttle=self.throttle, clock=self.clock,
            transport=self.transport, peers=list(self.peers) if self.peers else None,
            thermo_every=self.thermo_every, digest_every=self.digest_every, debug_ids=self.debug_ids,
            timeout=self.timeout,
        )
        values.update(override)
        return RunOptions(**values)

    def to_header(self) -> dict[str, str]:
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


# --- key=value parsing -------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"1,5,20"`` or ``"1..20"`` (inclusive) or a mix such as ``"1..3,10"``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        else:
            out.append(int(part))
    return tuple(out)


def parse_value(key: str, text: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown setting {key!r}")
    text = text.strip()
    try:
        if text == "none" and "None" in kind:
            return None
        if kind.startswith("tuple[int, int, int]"):
            values = parse_int_list(text)
            if len(values) == 1:
                values = values * 3
            if len(values) != 3:
                raise ValueError("expected one or three integers")
            return values
        if kind.startswith("tuple[int, ...]"):
            return parse_int_list(text)
        if kind.startswith("tuple[float, ...]"):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind.startswith("tuple[str, ...]"):
            return tuple(v.strip() for v in text.split(",") if v.strip())
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected true or false")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {text!r} ({err})") from None


def read_config_file(path: str | Path) -> dict:
    """Settings from a ``key=value`` file.  A CSV written by this tool also works:
    its ``# key=value`` header is read and the table is ignored."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from None
    out = {}
    csv_header = bool(lines) and lines[0].startswith("# ") and "=" in lines[0]
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if csv_header:
            if not line.startswith("# "):
                break
            line = line[2:]
        elif not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key = key.strip().replace("-", "_")
        out[key] = parse_value(key, value)
    return out


def build_config(file_values: dict, flag_values: dict) -> RunConfig:
    values = {}
    env_dir = os.environ.get(OUTPUT_ENV)
    if env_dir:
        values["output_dir"] = env_dir
    values.update(file_values)
    values.update({k: v for k, v in flag_values.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


# --- measurements --------------------------------------------------------------------


def _median(values) -> float:
    values = list(values)
    return statistics.median(values) if values else 0.0


def model_runs(config: RunConfig, with_offpath: bool = False):
    """Host-only, throttled offload-only and (optionally) off-path runs, repeated
    ``config.repeats`` times.  The runs of one round happen back to back so slow
    drifts in machine speed hit all three alike."""
    if config.iters < MIN_MODEL_ITERATIONS:
        raise ConfigError(f"model measurements need at least {MIN_MODEL_ITERATIONS} iterations for stable medians")
    params = config.params()
    host_opts = config.options(debug_ids=False)
    offload_opts = config.options(host_threads=config.offload_threads, compute_throttle=config.throttle,
                                  debug_ids=False)
    hosts, offloads, offpaths = [], [], []
    for _ in range(config.repeats):
        hosts.append(run(params, host_opts, RunMode.BASELINE))
        offloads.append(run(params, offload_opts, RunMode.BASELINE))
        if with_offpath:
            offpaths.append(run(params, host_opts, RunMode.OFFPATH))
    return hosts, offloads, offpaths


def measure_for_model(config: RunConfig) -> PerfMeasurement:
    """Per-call routine times of the original algorithm in host-only and
    offload-only settings, for the performance model.

    The host side runs the baseline with ``host_threads`` threads.  The offload
    side runs the same baseline with ``offload_threads`` threads and every
    compute kernel slowed by ``throttle``.  Communication per rebuild iteration is
    exchange plus border on the host side and one ghost refresh on the offload
    side, matching what each side does during an overlapped rebuild.
    """
    hosts, offloads, _ = model_runs(config)
    return measurement_from_runs(hosts, offloads, config.host_threads, config.offload_threads)


def measurement_from_runs(host, offload, h: int, b: int) -> PerfMeasurement:
    """Model inputs from one run per side, or from lists of repeated runs: per-call
    times are medians over every call of every repeat, and the host total is the
    median over repeats."""
    hosts = list(host) if isinstance(host, (list, tuple)) else [host]
    offloads = list(offload) if isinstance(offload, (list, tuple)) else [offload]

    def per_call(results, names, rebuild_only: bool) -> float:
        values = []
        for result in results:
            for r in result.hosts:
                rebuilds = set(r.ledger.rebuild_iterations())
                per_it = r.per_iteration(names)
                values.extend(t for it, t in per_it.items() if it > 0 and (not rebuild_only or it in rebuilds))
        return _median(values)

    ghost_refreshes = [dt for res in offloads for r in res.hosts for _, dt in r.calls.get("communicate", ())]
    return PerfMeasurement(
        p=len(hosts[0].hosts),
        h=h,
        b=b,
        host_t_force=per_call(hosts, ("force",), False),
        host_t_neigh=per_call(hosts, ("neigh", "sort"), True),
        host_t_comm=per_call(hosts, ("exchange", "border"), True),
        host_t_total=_median(res.t_total for res in hosts),
        offload_t_force=per_call(offloads, ("force",), False),
        offload_t_comm=_median(ghost_refreshes) if ghost_refreshes else per_call(offloads, COMM_ROUTINES, True),
    )


# --- subcommands ---------------------------------------------------------------------


def _out(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _label(config: RunConfig, mode: str) -> str:
    return f"{mode}-p{config.nodes}-n{config.reneigh}-{config.cells[0]}x{config.cells[1]}x{config.cells[2]}"


def _execute(config: RunConfig, mode: RunMode) -> SimulationResult:
    options = config.options()
    if config.load:
        options = dataclasses.replace(options, initial=read_snapshot(config.load))
    return run(config.params(), options, mode)


def cmd_run(config: RunConfig) -> int:
    out = _out(config)
    header = config.to_header()
    modes = [RunMode.BASELINE, RunMode.OFFPATH] if config.mode == "both" else [RunMode.parse(config.mode)]
    if modes == [RunMode.SYNC_DEBUG]:
        modes = [RunMode.BASELINE, RunMode.SYNC_DEBUG]
    results = {}
    for mode in modes:
        res = _execute(config, mode)
        results[mode] = res
        (out / f"thermo_{mode.value}.csv").write_text(thermo_csv(res.thermo, header))
        print(f"{mode.value}: {len(res.thermo)} thermo samples, t_total {res.t_total:.4f}s ({res.clock} clock)")
    (out / "timing.csv").write_text(
        timing_csv([(_label(config, m.value), m.value, r.breakdown) for m, r in results.items()], header)
    )
    if config.dump:
        write_snapshot(config.dump, results[modes[-1]].snapshot())

    if RunMode.SYNC_DEBUG in results:
        same = results[RunMode.BASELINE].trajectory() == results[RunMode.SYNC_DEBUG].trajectory()
        print("sync-debug trajectory " + ("bitwise-identical to baseline" if same else "DIFFERS from baseline"))
        return EXIT_OK if same else EXIT_MISMATCH
    if RunMode.OFFPATH in results and RunMode.BASELINE in results:
        b, o = results[RunMode.BASELINE], results[RunMode.OFFPATH]
        row = {
            "label": _label(config, "both"),
            "t_baseline": b.t_total,
            "t_offpath": o.t_total,
            "improvement": improvement(b.t_total, o.t_total),
            "max_comm_improvement_pct": max_comm_offload_improvement(b.breakdown),
        }
        (out / "summary.csv").write_text(write_csv([row], list(row), header))
        if len(b.thermo) >= 3:
            tdr = compute_tdr(o.thermo, b.thermo)
            (out / "tdr.csv").write_text(tdr_csv([(_label(config, "offpath"), tdr)], header))
            print(f"TDR of off-path against this baseline: alpha {tdr.alpha:.3e}, beta {tdr.beta:.3e}")
        print(f"improvement {100 * row['improvement']:.2f}%  "
              f"(communication share {row['max_comm_improvement_pct']:.2f}%)")
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    out = _out(config)
    rows = []
    for cells in config.sweep_cells:
        for skin in config.sweep_skins:
            for n in config.sweep_reneigh:
                c = config.replace(cells=(cells,) * 3, skin=skin, reneigh=n)
                b = run(c.params(), c.options(debug_ids=False), RunMode.BASELINE)
                o = run(c.params(), c.options(debug_ids=False), RunMode.OFFPATH)
                rows.append({
                    "atoms": c.params().n_atoms,
                    "skin": skin,
                    "reneigh": n,
                    "t_baseline": b.t_total,
                    "t_offpath": o.t_total,
                    "improvement": improvement(b.t_total, o.t_total),
                    "max_comm_improvement_pct": max_comm_offload_improvement(b.breakdown),
                })
                print(f"atoms {rows[-1]['atoms']:>7} skin {skin:<5} interval {n:>3}: "
                      f"improvement {100 * rows[-1]['improvement']:6.2f}%", flush=True)
    (out / "sweep.csv").write_text(write_csv(rows, list(rows[0]) if rows else ["atoms"], config.to_header()))
    _print_pivot(rows)
    return EXIT_OK


def _print_pivot(rows: list[dict]) -> None:
    intervals = sorted({r["reneigh"] for r in rows})
    keys = sorted({(r["atoms"], r["skin"]) for r in rows})
    print("improvement % by atoms/skin (rows) and re-neighboring interval (columns)")
    print(f"{'atoms':>8} {'skin':>5} " + " ".join(f"{n:>7}" for n in intervals))
    for atoms, skin in keys:
        cells = {r["reneigh"]: r["improvement"] for r in rows if (r["atoms"], r["skin"]) == (atoms, skin)}
        print(f"{atoms:>8} {skin:>5} " + " ".join(
            f"{100 * cells[n]:7.2f}" if n in cells else f"{'':>7}" for n in intervals))


def cmd_model(config: RunConfig, measure_offpath: bool) -> int:
    hosts, offloads, offpaths = model_runs(config, measure_offpath)
    m = measurement_from_runs(hosts, offloads, config.host_threads, config.offload_threads)
    estimate = estimate_offpath_time(m, config.iters, config.reneigh)
    row = {"label": m.label, **dataclasses.asdict(m), "estimate": estimate, "measured": None, "rel_error": None}
    print(f"{m.label}: host force {m.host_t_force:.4g}s neigh {m.host_t_neigh:.4g}s comm {m.host_t_comm:.4g}s; "
          f"offload force {m.offload_t_force:.4g}s comm {m.offload_t_comm:.4g}s")
    print(f"estimated off-path runtime {estimate:.4f}s (baseline {m.host_t_total:.4f}s)")
    if measure_offpath:
        measured = _median(o.t_total for o in offpaths)
        row["measured"] = measured
        row["rel_error"] = relative_error(estimate, measured)
        print(f"measured off-path runtime {measured:.4f}s, relative error {100 * row['rel_error']:.2f}%")
    (_out(config) / "model.csv").write_text(write_csv([row], list(row), config.to_header()))
    return EXIT_OK


def cmd_report(args) -> int:
    if args.peak_ratio:
        host, sockets, offload = args.peak_ratio
        print(f"peak ratio {peak_ratio(host, int(sockets), offload):.4f}")
    if args.reference:
        _, ref = parse_thermo_csv(Path(args.reference).read_text())
        delta = args.delta
        if delta is None and args.spread:
            delta = seed_spread_delta([parse_thermo_csv(Path(f).read_text())[1] for f in args.spread])
            print(f"delta from seed spread: {delta:.4e}")
        rows = []
        for path in args.thermo:
            _, test = parse_thermo_csv(Path(path).read_text())
            tdr = compute_tdr(test, ref, delta_threshold=delta)
            rows.append((Path(path).stem, tdr))
            print(f"{Path(path).stem}: alpha {tdr.alpha:.4e} beta {tdr.beta:.4e}"
                  + ("" if tdr.passed is None else f" pass={tdr.passed}"))
        text = tdr_csv(rows)
        if args.output:
            Path(args.output).write_text(text)
    elif args.thermo:
        raise ConfigError("report needs --reference to compare thermo files")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file (a CSV written by this tool also works)")
    p.add_argument("--cells", type=lambda s: parse_value("cells", s), help="fcc unit cells per axis: N or NX,NY,NZ")
    p.add_argument("--iters", type=int)
    p.add_argument("--reneigh", type=parse_int_list,
                   help="iterations between neighbor-list rebuilds; a list or range such as 1..20 "
                        "with --mode both sweeps the intervals")
    p.add_argument("--sort-interval", type=int, help="rebuilds between spatial sorts")
    p.add_argument("--skin", type=float)
    p.add_argument("--r-cut", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--t-init", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", help="baseline, offpath, offpath-sync-debug or both")
    p.add_argument("--nodes", type=int, help="host/offload node pairs")
    p.add_argument("--proc-grid", type=lambda s: parse_value("proc_grid", s))
    p.add_argument("--host-threads", type=int)
    p.add_argument("--offload-threads", type=int)
    p.add_argument("--throttle", type=float, help="offload slowdown factor (>= 1)")
    p.add_argument("--clock", choices=["auto", "wall", "virtual"])
    p.add_argument("--repeats", type=int, help="model: measurement rounds, medians taken across them")
    p.add_argument("--transport", choices=["inprocess", "socket"])
    p.add_argument("--peers", type=lambda s: parse_value("peers", s), help="host:port per rank, comma separated")
    p.add_argument("--thermo-every", type=int)
    p.add_argument("--digest-every", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--dump", help="write the final state to this snapshot file")
    p.add_argument("--load", help="start from this snapshot file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="offpath-md", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one configuration")
    _add_config_flags(p_run)
    p_sweep = sub.add_parser("sweep", help="baseline vs off-path over sizes, intervals and skins")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--sweep-cells", type=lambda s: parse_value("sweep_cells", s))
    p_sweep.add_argument("--sweep-reneigh", type=lambda s: parse_value("sweep_reneigh", s))
    p_sweep.add_argument("--sweep-skins", type=lambda s: parse_value("sweep_skins", s))
    p_model = sub.add_parser("model", help="measure routine times and estimate the off-path runtime")
    _add_config_flags(p_model)
    p_model.add_argument("--measure", action="store_true", help="also run the off-path algorithm and compare")
    p_report = sub.add_parser("report", help="TDR and model reports from existing files")
    p_report.add_argument("thermo", nargs="*", help="thermo CSV files to compare")
    p_report.add_argument("--reference", help="reference thermo CSV")
    p_report.add_argument("--delta", type=float, help="pass/fail bound on |delta T|")
    p_report.add_argument("--spread", nargs="+", metavar="THERMO",
                          help="baseline thermo files differing only in seed; without --delta, the bound is "
                               "their largest pairwise |delta T|")
    p_report.add_argument("--output", help="write the TDR table here")
    p_report.add_argument("--peak-ratio", nargs=3, type=float, metavar=("HOST", "SOCKETS", "OFFLOAD"))
    return parser


_NOT_CONFIG = {"command", "config", "measure", "thermo", "reference", "delta", "spread", "output", "peak_ratio"}


def config_from_args(args) -> tuple[RunConfig, tuple[int, ...]]:
    """The merged configuration and the intervals given to ``--reneigh``."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    intervals = flags.pop("reneigh", None) or ()
    if len(intervals) == 1:
        flags["reneigh"] = intervals[0]
    elif intervals:
        flags["reneigh"] = intervals[0]
        if flags.get("sweep_reneigh") is None:
            flags["sweep_reneigh"] = intervals
    return build_config(file_values, flags), tuple(intervals)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "report":
            return cmd_report(args)
        config, intervals = config_from_args(args)
        if args.command == "run" and len(intervals) > 1:
            if config.mode != "both":
                raise ConfigError("several --reneigh intervals need --mode both")
            return cmd_sweep(config.replace(sweep_cells=(config.cells[0],), sweep_skins=(config.skin,),
                                            sweep_reneigh=intervals))
        if args.command == "run":
            return cmd_run(config)
        if args.command == "sweep":
            return cmd_sweep(config)
        return cmd_model(config, args.measure)
    except (ConfigError, MigrationError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolDesync, IndexConsistencyError, PlanMismatch) as err:
        print(f"protocol desync: {err}", file=sys.stderr)
        return EXIT_DESYNC
    except (NumericalBlowup, BinningError) as err:
        print(f"numerical blow-up: {err}", file=sys.stderr)
        return EXIT_BLOWUP


if __name__ == "__main__":
    sys.exit(main())
