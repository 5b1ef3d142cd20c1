"""
Sweep orchestration, config loading, CSV contract and the CLI.
Run with: pytest test_experiment.py          (add -m slow for the trend sweeps)
"""

import statistics
from dataclasses import replace

import numpy as np
import pytest

import run_experiment
from precoders.errors import ConfigurationError, ParseError
from precoders.experiment import (
    RESULT_COLUMNS,
    SUMMARY_COLUMNS,
    ExperimentSpec,
    ResultRow,
    complexity_flops,
    derive_seed,
    iter_cells,
    iterations_to_fraction,
    load_spec,
    read_results_csv,
    report_trends,
    rerun_row,
    run_experiment as run_sweep_cells,
    time_per_iteration,
    write_results_csv,
)
from precoders.network_model import NetworkConfig, generate_channels

TINY = dict(
    num_bs=2, num_ut=2, mt=2, mr=1, streams=1, power_dbm=(20.0,), bsc=(1, 2),
    trials=2, max_outer=10, methods=("rcg", "mrt", "zf", "mmse"), trajectory=True,
)

TINY_FILE = """\
# desk-sized sweep
num_bs=2
num_ut=2
mt=2
mr=1
streams=1
power_dbm=20
bsc=1,2
trials=2
max_outer=10
methods=rcg,mrt,zf,mmse
"""


def _tiny(**kw):
    return ExperimentSpec(**{**TINY, **kw})


def _csv_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


# ---------------------------------------------------------------------
# CONFIG
# ---------------------------------------------------------------------
def test_defaults_match_desk_sweep():
    spec = ExperimentSpec()
    assert (spec.num_bs, spec.num_ut, spec.mt, spec.mr, spec.streams) == (3, 6, 8, 2, 2)
    assert spec.power_dbm == (10.0, 20.0, 30.0)
    assert spec.bsc == (1, 2, 3)
    config = spec.network_config(30.0, 2)
    assert config.bs_power == (1.0, 1.0, 1.0)
    assert config.noise_power == pytest.approx(10 ** -13.4)


@pytest.mark.parametrize("bad", [
    dict(methods=("rcg", "wmmse")),
    dict(methods=("mrt", "mrt")),
    dict(bsc=(1, 4)),
    dict(trials=0),
    dict(rcg_init="rcg"),
    dict(streams=3),
    dict(cluster_policy="nearest"),
])
def test_experiment_spec_rejects_invalid_values(bad):
    with pytest.raises(ConfigurationError):
        ExperimentSpec(**bad)


def test_load_spec_reads_flat_key_value_file(tmp_path):
    path = tmp_path / "desk.env"
    path.write_text(TINY_FILE)
    spec = load_spec(path, environ={})
    assert spec.num_bs == 2 and spec.mr == 1
    assert spec.power_dbm == (20.0,)
    assert spec.bsc == (1, 2)
    assert spec.methods == ("rcg", "mrt", "zf", "mmse")


def test_load_spec_rejects_unknown_keys_and_bad_values(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("num_bs=2\nbogus=1\n")
    with pytest.raises(ConfigurationError):
        load_spec(path, environ={})
    path.write_text("trials=two\n")
    with pytest.raises(ConfigurationError):
        load_spec(path, environ={})
    with pytest.raises(ConfigurationError):
        load_spec(tmp_path / "missing.env", environ={})


def test_load_spec_precedence(tmp_path):
    path = tmp_path / "desk.env"
    path.write_text(TINY_FILE + "out_dir=from_file\n")
    environ = {"UCN_OUT_DIR": "from_env", "UCN_WORKERS": "3"}
    assert load_spec(None, environ=environ).out_dir == "from_env"
    spec = load_spec(path, environ=environ)
    assert spec.out_dir == "from_file"
    assert spec.workers == 3
    assert load_spec(path, {"out_dir": "from_cli", "seed": None}, environ).out_dir == "from_cli"


# ---------------------------------------------------------------------
# CELLS AND SEEDS
# ---------------------------------------------------------------------
def test_derive_seed_is_stable_and_separates_trials():
    seeds = [derive_seed(7, t) for t in range(50)]
    assert seeds == [derive_seed(7, t) for t in range(50)]
    assert len(set(seeds)) == 50
    assert all(0 <= s < 2 ** 64 for s in seeds)
    assert derive_seed(0, 3) ^ derive_seed(5, 3) == 5


def test_cells_iterate_trial_power_bsc_method():
    cells = iter_cells(_tiny())
    assert len(cells) == 2 * 1 * 2 * 4
    assert [c.method for c in cells[:4]] == ["rcg", "mrt", "zf", "mmse"]
    assert [(c.trial, c.bsc) for c in cells[::4]] == [(0, 1), (0, 2), (1, 1), (1, 2)]


def test_cells_of_a_trial_share_one_channel_draw(tmp_path):
    spec = _tiny(trials=3, trajectory=False)
    rows = run_sweep_cells(spec, tmp_path).rows
    for trial in range(3):
        assert {r.seed for r in rows if r.trial == trial} == {derive_seed(spec.seed, trial)}
    assert len({r.seed for r in rows}) == 3
    # every cluster size of a trial sees the same channels
    seed = derive_seed(spec.seed, 1)
    one, two = (generate_channels(spec.network_config(20.0, bsc), seed) for bsc in (1, 2))
    np.testing.assert_array_equal(one.blocks, two.blocks)


# ---------------------------------------------------------------------
# SWEEPS
# ---------------------------------------------------------------------
def test_tiny_sweep_writes_all_outputs(tmp_path):
    result = run_sweep_cells(_tiny(), tmp_path)
    names = {p.name for p in tmp_path.glob("*.csv")}
    assert names == {"results.csv", "summary.csv"} | {f"trajectory_{m}.csv" for m in TINY["methods"]}
    assert len(result.rows) == 16
    assert not result.failed
    assert all(r.wall_ms == 0.0 for r in result.rows)

    header = (tmp_path / "results.csv").read_text().splitlines()[0]
    assert header == ",".join(RESULT_COLUMNS)
    summary_header = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert summary_header == ",".join(SUMMARY_COLUMNS)
    assert all(s["trials"] == 2 for s in result.summary)

    assert read_results_csv(tmp_path / "results.csv") == result.rows
    rcg_traj = read_results_csv(tmp_path / "trajectory_rcg.csv")
    assert rcg_traj[0].outer_iter == 0
    assert len(rcg_traj) == sum(r.outer_iter + 1 for r in result.rows if r.method == "rcg")


def test_rcg_never_below_its_mrt_start(tmp_path):
    rows = run_sweep_cells(_tiny(trajectory=False), tmp_path).rows
    mrt = {(r.trial, r.power_dbm, r.bsc): r.wsr_bits for r in rows if r.method == "mrt"}
    for r in rows:
        if r.method == "rcg":
            assert r.wsr_bits >= mrt[(r.trial, r.power_dbm, r.bsc)] - 1e-9


def test_reruns_are_byte_identical(tmp_path):
    run_sweep_cells(_tiny(), tmp_path / "a")
    run_sweep_cells(_tiny(), tmp_path / "b")
    first = _csv_bytes(tmp_path / "a")
    assert first and first == _csv_bytes(tmp_path / "b")
    assert all(b"\r\n" not in blob for blob in first.values())


def test_parallel_sweep_matches_serial(tmp_path):
    run_sweep_cells(_tiny(), tmp_path / "serial")
    run_sweep_cells(_tiny(workers=2), tmp_path / "parallel")
    assert _csv_bytes(tmp_path / "serial") == _csv_bytes(tmp_path / "parallel")


def test_failing_cell_becomes_status_row(tmp_path):
    spec = _tiny(num_ut=3, bsc=(1,), methods=("mrt", "bd"), trials=1, trajectory=False)
    result = run_sweep_cells(spec, tmp_path)
    by_method = {r.method: r for r in result.rows}
    assert by_method["mrt"].ok
    assert by_method["bd"].status == "BaselineInfeasibleError"
    assert by_method["bd"].wsr_bits is None
    assert result.failed == [by_method["bd"]]
    assert read_results_csv(tmp_path / "results.csv")[1].status == "BaselineInfeasibleError"


def test_row_reruns_from_its_recorded_seed(tmp_path):
    spec = _tiny(trajectory=False)
    run_sweep_cells(spec, tmp_path)
    rows = read_results_csv(tmp_path / "results.csv")
    for row in (rows[4], rows[-4]):
        assert rerun_row(spec, row) == row


# ---------------------------------------------------------------------
# CSV / REPORTS
# ---------------------------------------------------------------------
def test_read_results_reports_line_of_malformed_row(tmp_path):
    path = tmp_path / "results.csv"
    write_results_csv(path, [ResultRow(0, 11, 20.0, 1, "mrt", wsr_bits=1.5)])
    with open(path, "a") as fh:
        fh.write("1,11,20,1,mrt,0,abc,,0,0,ok\n")
    with pytest.raises(ParseError) as err:
        read_results_csv(path)
    assert err.value.line_no == 3

    path.write_text("trial,seed\n")
    with pytest.raises(ParseError) as err:
        read_results_csv(path)
    assert err.value.line_no == 1


def test_floats_round_trip_at_full_precision(tmp_path):
    path = tmp_path / "results.csv"
    row = ResultRow(0, 2 ** 64 - 1, 20.0, 2, "rcg", outer_iter=3, wsr_bits=0.1 + 0.2, grad_norm=1e-300)
    write_results_csv(path, [row])
    assert read_results_csv(path) == [row]


def test_report_trends_on_hand_built_rows(tmp_path):
    write_results_csv(tmp_path / "results.csv", [
        ResultRow(0, 1, 20.0, 1, "rcg", outer_iter=5, wsr_bits=3.5, grad_norm=1e-7, inner_iters=9),
        ResultRow(0, 1, 20.0, 1, "mrt", wsr_bits=2.5, grad_norm=0.3),
    ])
    text = report_trends(tmp_path)
    assert "result rows: 2" in text
    assert "rcg=3.5 mrt=2.5" in text
    assert "rcg - mrt = +1 (+40.00%)" in text
    assert "power_dbm=20: single bsc" in text
    assert "rcg iterations: 5 over 1 runs, mean inner iterations 1.8" in text


def test_report_trends_prints_milestones_from_trajectory(tmp_path):
    run_sweep_cells(_tiny(methods=("rcg",)), tmp_path)
    text = report_trends(tmp_path / "results.csv")
    assert "rcg gain per added serving BS" in text
    assert "iterations to 85% of final WSR" in text
    assert "iterations to 93% of final WSR" in text


def test_report_trends_without_trajectories_uses_result_totals(tmp_path):
    rows = run_sweep_cells(_tiny(methods=("rcg", "mrt"), trajectory=False), tmp_path).rows
    assert not (tmp_path / "trajectory_rcg.csv").exists()
    rcg = [r for r in rows if r.method == "rcg"]
    outer = sum(r.outer_iter for r in rcg)
    text = report_trends(tmp_path)
    assert "0 iterations" not in text
    assert f"rcg iterations: {outer} over {len(rcg)} runs" in text
    assert f"mean inner iterations {sum(r.inner_iters for r in rcg) / outer:.3g}" in text


def test_iterations_to_fraction():
    assert iterations_to_fraction([], 0.85) == 0
    assert iterations_to_fraction([1.0, 2.0, 3.0, 4.0], 0.5) == 1
    assert iterations_to_fraction([1.0, 2.0, 3.0, 4.0], 1.0) == 3
    assert iterations_to_fraction([5.0, 5.0], 0.93) == 0


def test_complexity_model():
    config = NetworkConfig(num_bs=3, num_ut=6, mt=8, mr=2, streams=2, bs_power=1.0, noise_power=1e-13, cluster_size=2)
    assert complexity_flops("rcg", config) == 2 * 6 * 8 * 2 * (2 * 12)
    assert complexity_flops("ZF", config) == 12 ** 3 + 24 * 12 ** 2
    # RCG per-iteration cost grows with the serving cluster
    assert complexity_flops("rcg", replace(config, cluster_size=3)) > complexity_flops("rcg", config)
    with pytest.raises(ConfigurationError):
        complexity_flops("gradient-free", config)


# ---------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------
def test_cli_runs_sweep_and_reports(tmp_path, capsys):
    path = tmp_path / "desk.env"
    path.write_text(TINY_FILE)
    out = tmp_path / "out"
    assert run_experiment.main(["--config", str(path), "--out", str(out), "--trials", "1", "--trajectory"]) == 0
    assert (out / "results.csv").is_file()
    assert (out / "trajectory_rcg.csv").is_file()
    assert len(read_results_csv(out / "results.csv")) == 8
    assert "Sweep completed" in capsys.readouterr().out

    assert run_experiment.main(["--report-only", str(out)]) == 0
    assert "mean WSR (bits/s/Hz) per cell" in capsys.readouterr().out


def test_cli_exit_codes_for_bad_input(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("num_bs=2\nbogus=1\n")
    assert run_experiment.main(["--config", str(path)]) == 2
    assert run_experiment.main(["--methods", "rcg,wmmse", "--out", str(tmp_path)]) == 2
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "results.csv").write_text("not,a,header\n")
    assert run_experiment.main(["--report-only", str(broken)]) == 2
    assert run_experiment.main(["--report-only", str(tmp_path / "nowhere" / "results.csv")]) == 3


def test_upload_falls_back_and_reports_failure(monkeypatch):
    calls = []

    class Refused:
        status_code = 503
        text = "unavailable"

    def fake_post(url, json, timeout):
        calls.append(url)
        return Refused()

    monkeypatch.setattr(run_experiment.requests, "post", fake_post)
    rows = [ResultRow(0, 1, 20.0, 1, "mrt", wsr_bits=2.0)]
    assert not run_experiment.upload_results("r1", _tiny(), rows, "https://archive.example.org/")
    assert calls == [
        "https://archive.example.org/api/admin/results/bulk",
        "http://127.0.0.1:5000/api/admin/results/bulk",
    ]


# ---------------------------------------------------------------------
# DESK SWEEPS (slow)
# ---------------------------------------------------------------------
@pytest.mark.slow
def test_cluster_size_trend(tmp_path):
    spec = ExperimentSpec(power_dbm=(30.0,), methods=("rcg",), trials=20, max_outer=200)
    rows = run_sweep_cells(spec, tmp_path).rows
    per_trial = {}
    for r in rows:
        per_trial.setdefault(r.trial, {})[r.bsc] = r.wsr_bits
    means = [statistics.fmean(t[b] for t in per_trial.values()) for b in (1, 2, 3)]
    assert means[0] <= means[1] <= means[2]
    concave = sum(t[3] - t[2] < t[2] - t[1] for t in per_trial.values())
    assert concave >= 0.7 * len(per_trial)


@pytest.mark.slow
def test_rcg_dominates_linear_baselines(tmp_path):
    spec = ExperimentSpec(bsc=(2,), methods=("rcg", "mrt", "zf", "mmse"), trials=20, max_outer=200)
    result = run_sweep_cells(spec, tmp_path)
    assert not result.failed
    for row in result.summary:
        if row["method"] == "rcg":
            continue
        rcg = next(s for s in result.summary
                   if s["method"] == "rcg" and (s["power_dbm"], s["bsc"]) == (row["power_dbm"], row["bsc"]))
        assert rcg["mean_wsr_bits"] >= row["mean_wsr_bits"]

    # every instance, not only the means: the solver starts from MRT and never goes downhill
    mrt = {(r.trial, r.power_dbm, r.bsc): r.wsr_bits for r in result.rows if r.method == "mrt"}
    for r in result.rows:
        if r.method == "rcg":
            assert r.wsr_bits >= mrt[(r.trial, r.power_dbm, r.bsc)] - 1e-9


@pytest.mark.slow
def test_iteration_time_grows_at_most_linearly_in_bs_count():
    def median_ms(num_bs):
        config = NetworkConfig(
            num_bs=num_bs, num_ut=6, mt=8, mr=2, streams=2, bs_power=1.0,
            noise_power=10 ** -13.4, cluster_size=2, ref_gain_db=-100.0,
        )
        return statistics.median(time_per_iteration(config, seed) for seed in range(3))

    small, large = median_ms(2), median_ms(4)
    assert small > 0
    assert large / small <= 2.0 * 1.3
