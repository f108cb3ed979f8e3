from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from offpath_md.analysis import parse_table_csv, parse_thermo_csv, parse_timing_csv, reemit_csv
from offpath_md.cli import (
    EXIT_BLOWUP,
    EXIT_CONFIG,
    EXIT_DESYNC,
    EXIT_OK,
    OUTPUT_ENV,
    RunConfig,
    build_config,
    main,
    measure_for_model,
    measurement_from_runs,
    model_runs,
    parse_int_list,
    read_config_file,
)
from offpath_md.core import (
    ConfigError,
    Decomposition,
    GlobalBox,
    Snapshot,
    create_lattice,
    read_snapshot,
    write_snapshot,
)

SMALL = ["--cells", "4", "--nodes", "1"]


def run_cli(tmp_path, *args):
    return main(["run", *SMALL, "--output-dir", str(tmp_path), *args])


def test_int_list_forms():
    assert parse_int_list("1..4") == (1, 2, 3, 4)
    assert parse_int_list("1,5,20") == (1, 5, 20)
    assert parse_int_list("1..2,10") == (1, 2, 10)
    with pytest.raises(ValueError):
        parse_int_list("5..1")


def test_default_run_writes_101_samples(tmp_path):
    """1,000 iterations sampled every 10 gives 101 thermo rows."""
    code = main(["run", "--cells", "4", "--iters", "1000", "--reneigh", "20", "--mode", "baseline",
                 "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    header, samples = parse_thermo_csv((tmp_path / "thermo_baseline.csv").read_text())
    assert len(samples) == 101 and samples[-1].iteration == 1000
    assert header["reneigh"] == "20" and header["cells"] == "4,4,4"
    _, rows = parse_timing_csv((tmp_path / "timing.csv").read_text())
    assert rows[0][1] == "baseline" and rows[0][2].t_total > 0


def test_every_output_round_trips(tmp_path):
    assert run_cli(tmp_path, "--iters", "40", "--reneigh", "5", "--mode", "both") == EXIT_OK
    for name in ("thermo_baseline.csv", "thermo_offpath.csv", "timing.csv", "summary.csv", "tdr.csv"):
        text = (tmp_path / name).read_text()
        assert reemit_csv(text) == text, name
    _, cols, rows = parse_table_csv((tmp_path / "summary.csv").read_text())
    assert cols == ["label", "t_baseline", "t_offpath", "improvement", "max_comm_improvement_pct"]
    assert len(rows) == 1


def test_provenance_header_reproduces_baseline(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_cli(first, "--iters", "30", "--reneigh", "3", "--seed", "7", "--mode", "baseline",
                   "--dump", str(first / "final.snap")) == EXIT_OK
    csv_path = first / "thermo_baseline.csv"
    assert main(["run", "--config", str(csv_path), "--output-dir", str(second),
                 "--dump", str(second / "final.snap")]) == EXIT_OK
    ha, sa = parse_thermo_csv((first / "thermo_baseline.csv").read_text())
    hb, sb = parse_thermo_csv((second / "thermo_baseline.csv").read_text())
    paths = {"output_dir", "dump"}
    assert {k: v for k, v in ha.items() if k not in paths} == {k: v for k, v in hb.items() if k not in paths}
    assert sa == sb
    a, b = read_snapshot(first / "final.snap"), read_snapshot(second / "final.snap")
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\ncells = 5\nreneigh=7\nskin=0.4\n")
    values = read_config_file(cfg)
    assert values == {"cells": (5, 5, 5), "reneigh": 7, "skin": 0.4}
    config = build_config(values, {"reneigh": 3, "skin": None})
    assert (config.cells, config.reneigh, config.skin) == ((5, 5, 5), 3, 0.4)


def test_env_sets_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert build_config({}, {}).output_dir == str(tmp_path / "env")
    assert build_config({}, {"output_dir": "x"}).output_dir == "x"
    assert main(["run", *SMALL, "--iters", "5", "--mode", "baseline"]) == EXIT_OK
    assert (tmp_path / "env" / "thermo_baseline.csv").exists()


@pytest.mark.parametrize("args", [
    ["--skin", "-1"],
    ["--mode", "sideways"],
    ["--cells", "1"],
    ["--nodes", "2", "--proc-grid", "1,1,3"],
    ["--throttle", "0.5"],
    ["--iters", "banana"],
])
def test_config_errors_exit_2(tmp_path, args):
    assert run_cli(tmp_path, *args) == EXIT_CONFIG


def test_bad_config_file_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_reneigh_list_needs_both(tmp_path):
    assert run_cli(tmp_path, "--reneigh", "1..3", "--mode", "baseline") == EXIT_CONFIG


def test_sync_debug_exit_zero(tmp_path, capsys):
    assert run_cli(tmp_path, "--iters", "20", "--reneigh", "4", "--mode", "offpath-sync-debug") == EXIT_OK
    assert "bitwise-identical" in capsys.readouterr().out


def test_blowup_exit_4(tmp_path):
    """Two atoms loaded 5e-4 sigma apart trip the separation sentinel."""
    p = RunConfig(cells=(4, 4, 4), nodes=1).params()
    d = Decomposition.build(p, (1, 1, 1), 0)
    atoms = create_lattice(p, d)
    x = atoms.x[: atoms.n_local].copy()
    x[1] = x[0] + [5e-4, 0.0, 0.0]
    box = GlobalBox.from_params(p)
    snap = tmp_path / "close.snap"
    write_snapshot(snap, Snapshot(box, 0, atoms.gid.copy(), x, atoms.v.copy()))
    assert run_cli(tmp_path, "--iters", "5", "--load", str(snap)) == EXIT_BLOWUP


def test_runaway_atoms_exit_4(tmp_path):
    assert run_cli(tmp_path, "--iters", "20", "--dt", "0.2", "--t-init", "20") == EXIT_BLOWUP


def test_desync_exit_3(tmp_path, monkeypatch):
    import offpath_md.cli as cli
    from offpath_md.scheduler import FaultSpec, run

    def faulty(params, options, mode):
        options.fault = FaultSpec(node=0, iteration=5, stage="after_snapshot", action="wrong_tag")
        return run(params, options, mode)

    monkeypatch.setattr(cli, "run", faulty)
    assert run_cli(tmp_path, "--iters", "10", "--reneigh", "5", "--mode", "offpath") == EXIT_DESYNC


def test_interval_sweep_shape(tmp_path, capsys):
    """``--mode both`` with an interval range gives one row per interval."""
    assert run_cli(tmp_path, "--iters", "12", "--mode", "both", "--reneigh", "1..4") == EXIT_OK
    _, cols, rows = parse_table_csv((tmp_path / "sweep.csv").read_text())
    assert [r["reneigh"] for r in rows] == [1, 2, 3, 4]
    assert cols[:3] == ["atoms", "skin", "reneigh"] and {r["atoms"] for r in rows} == {256}
    out = capsys.readouterr().out
    assert "improvement % by atoms/skin" in out


def test_sweep_over_sizes_and_skins(tmp_path):
    code = main(["sweep", "--nodes", "1", "--iters", "6", "--sweep-cells", "3,4", "--sweep-reneigh", "2,3",
                 "--sweep-skins", "0.2,0.3", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    _, _, rows = parse_table_csv((tmp_path / "sweep.csv").read_text())
    assert len(rows) == 8
    assert {(r["atoms"], r["skin"], r["reneigh"]) for r in rows} == {
        (a, s, n) for a in (108, 256) for s in (0.2, 0.3) for n in (2, 3)}


def test_model_needs_fifty_iterations():
    with pytest.raises(ConfigError):
        measure_for_model(RunConfig(cells=(4, 4, 4), nodes=1, iters=49))
    assert main(["model", *SMALL, "--iters", "10"]) == EXIT_CONFIG


def test_model_repeats_pool_medians():
    config = RunConfig(cells=(4, 4, 4), nodes=1, iters=50, reneigh=5, clock="virtual", repeats=3)
    hosts, offloads, offpaths = model_runs(config, with_offpath=True)
    assert len(hosts) == len(offloads) == len(offpaths) == 3
    m = measurement_from_runs(hosts, offloads, 1, 1)
    assert m.host_t_total == sorted(r.t_total for r in hosts)[1]
    singles = [measurement_from_runs(h, o, 1, 1).host_t_force for h, o in zip(hosts, offloads)]
    assert min(singles) <= m.host_t_force <= max(singles)
    with pytest.raises(ConfigError):
        RunConfig(repeats=0)


def test_model_medians_are_stable():
    config = RunConfig(cells=(6, 6, 6), nodes=1, iters=200, reneigh=2, clock="virtual")
    a, b = measure_for_model(config), measure_for_model(config)
    for name in ("host_t_force", "host_t_neigh", "offload_t_force"):
        x, y = getattr(a, name), getattr(b, name)
        assert abs(x - y) <= 0.10 * max(x, y), name
    assert a.offload_t_force > a.host_t_force


def test_model_more_host_threads_never_slows_neighbor_build():
    config = RunConfig(cells=(6, 6, 6), nodes=1, iters=200, reneigh=2, clock="virtual")
    one = measure_for_model(config)
    two = measure_for_model(config.replace(host_threads=2))
    assert two.host_t_neigh <= 1.10 * one.host_t_neigh


def test_model_command_writes_estimate(tmp_path):
    assert main(["model", *SMALL, "--iters", "50", "--reneigh", "5", "--measure",
                 "--output-dir", str(tmp_path)]) == EXIT_OK
    _, cols, rows = parse_table_csv((tmp_path / "model.csv").read_text())
    assert rows[0]["estimate"] > 0 and rows[0]["measured"] > 0 and rows[0]["rel_error"] >= 0


def test_report_tdr_and_peak_ratio(tmp_path, capsys):
    assert run_cli(tmp_path, "--iters", "30", "--reneigh", "5", "--mode", "both") == EXIT_OK
    out = tmp_path / "report.csv"
    code = main(["report", str(tmp_path / "thermo_offpath.csv"), "--reference",
                 str(tmp_path / "thermo_baseline.csv"), "--delta", "1.0", "--output", str(out),
                 "--peak-ratio", "656.6", "2", "80"])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "peak ratio 16.4150" in printed
    _, cols, rows = parse_table_csv(out.read_text())
    assert rows[0]["label"] == "thermo_offpath" and rows[0]["pass"] is True


def test_report_delta_from_seed_spread(tmp_path, capsys):
    for seed in (1, 2):
        assert run_cli(tmp_path / f"s{seed}", "--iters", "30", "--seed", str(seed), "--mode", "baseline") == EXIT_OK
    assert run_cli(tmp_path, "--iters", "30", "--reneigh", "10", "--seed", "1", "--mode", "both") == EXIT_OK
    out = tmp_path / "report.csv"
    code = main(["report", str(tmp_path / "thermo_offpath.csv"), "--reference", str(tmp_path / "thermo_baseline.csv"),
                 "--spread", str(tmp_path / "s1" / "thermo_baseline.csv"), str(tmp_path / "s2" / "thermo_baseline.csv"),
                 "--output", str(out)])
    assert code == EXIT_OK and "delta from seed spread" in capsys.readouterr().out
    _, _, rows = parse_table_csv(out.read_text())
    assert rows[0]["threshold"] > 0 and rows[0]["pass"] is True


def test_report_without_reference_is_config_error(tmp_path):
    assert main(["report", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "offpath_md", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "run" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "offpath_md", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
