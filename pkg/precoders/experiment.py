# precoders/experiment.py
"""
Monte-Carlo sweeps over transmit power and cluster size.

A sweep cell is (trial, power, B_sc, method). Every cell of a trial sees the
same channel draw, whose seed is derived from (seed, trial) only, so a cell can
be re-run in isolation from the seed recorded in its result row.

Outputs under out_dir:
    results.csv              one row per cell (final iterate)
    summary.csv              per (power, B_sc, method) means over trials
    trajectory_<method>.csv  per-iteration rows (only with trajectory=True)
"""
import csv
import hashlib
import logging
import math
import os
import statistics
import time
from collections import OrderedDict, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values

from precoders.baselines import BaselineKind, linear_baseline, mrt_precoder
from precoders.errors import BaselineInfeasibleError, ConfigurationError, ParseError, PrecoderError
from precoders.network_model import (
    CLUSTER_POLICIES,
    NetworkConfig,
    dbm_to_watts,
    generate_channels,
    select_clusters,
    snr_db,
)
from precoders.rcg_solver import SolverOptions, SolverTrace, rcg_solve
from precoders.wsr_objective import WsrObjective, nats_to_bits

log = logging.getLogger(__name__)

RCG = "rcg"
METHODS = (RCG,) + tuple(k.value for k in BaselineKind)
MILESTONES = (0.85, 0.93)

RESULT_COLUMNS = (
    "trial", "seed", "power_dbm", "bsc", "method", "outer_iter",
    "wsr_bits", "grad_norm", "inner_iters", "wall_ms", "status",
)
SUMMARY_COLUMNS = (
    "power_dbm", "bsc", "method", "trials", "ok_trials",
    "mean_wsr_bits", "mean_outer_iter", "mean_inner_iters", "rcg_flops_per_iter",
)


# ---------------------------------------------------------------------
# EXPERIMENT SETTINGS
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class ExperimentSpec:
    num_bs: int = 3
    num_ut: int = 6
    mt: int = 8
    mr: int = 2
    streams: Union[int, Tuple[int, ...]] = 2
    power_dbm: Tuple[float, ...] = (10.0, 20.0, 30.0)
    noise_dbm: float = -104.0
    bsc: Tuple[int, ...] = (1, 2, 3)
    weights: Optional[Tuple[float, ...]] = None
    trials: int = 20
    seed: int = 0
    max_outer: int = 500
    max_inner: int = 40
    grad_tol: float = 1e-6
    alpha0: float = 1e-3
    r: float = 0.5
    c: float = 1e-4
    methods: Tuple[str, ...] = (RCG, "mrt", "zf", "mmse")
    out_dir: str = "results"
    cell_radius: float = 500.0
    d0: float = 50.0
    pathloss_exp: float = 3.5
    ref_gain_db: float = -100.0
    cluster_policy: str = "large_scale"
    rcg_init: str = "mrt"
    workers: int = 1
    trajectory: bool = False
    timing: bool = False

    def __post_init__(self):
        if not self.power_dbm or not self.bsc or not self.methods:
            raise ConfigurationError("power_dbm, bsc and methods must all be nonempty")
        if self.trials < 1:
            raise ConfigurationError(f"trials must be >= 1, got {self.trials}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}; expected a subset of {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError(f"duplicate methods in {self.methods}")
        if any(not 1 <= b <= self.num_bs for b in self.bsc):
            raise ConfigurationError(f"every bsc must be in [1, {self.num_bs}], got {self.bsc}")
        if self.cluster_policy not in CLUSTER_POLICIES:
            raise ConfigurationError(f"cluster_policy must be one of {CLUSTER_POLICIES}")
        if self.rcg_init not in METHODS[1:]:
            raise ConfigurationError(f"rcg_init must be a baseline name, got {self.rcg_init!r}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        # surfaces dimension / knob errors before any cell runs
        for b in self.bsc:
            self.network_config(self.power_dbm[0], b)

    def network_config(self, power_dbm: float, bsc: int) -> NetworkConfig:
        return NetworkConfig(
            num_bs=self.num_bs, num_ut=self.num_ut, mt=self.mt, mr=self.mr,
            streams=self.streams, bs_power=dbm_to_watts(power_dbm),
            noise_power=dbm_to_watts(self.noise_dbm), cluster_size=bsc, weights=self.weights,
            max_outer=self.max_outer, max_inner=self.max_inner, grad_tol=self.grad_tol,
            alpha0=self.alpha0, r=self.r, c=self.c, rng_seed=self.seed,
            cell_radius=self.cell_radius, d0=self.d0, pathloss_exp=self.pathloss_exp,
            ref_gain_db=self.ref_gain_db,
        )


def _split_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _ints_or_int(value: str):
    items = [int(v) for v in _split_list(value)]
    return items[0] if len(items) == 1 else tuple(items)


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_PARSERS = {
    "num_bs": int, "num_ut": int, "mt": int, "mr": int,
    "streams": _ints_or_int,
    "power_dbm": lambda v: tuple(float(x) for x in _split_list(v)),
    "noise_dbm": float,
    "bsc": lambda v: tuple(int(x) for x in _split_list(v)),
    "weights": lambda v: tuple(float(x) for x in _split_list(v)) or None,
    "trials": int, "seed": int, "max_outer": int, "max_inner": int,
    "grad_tol": float, "alpha0": float, "r": float, "c": float,
    "methods": lambda v: tuple(m.lower() for m in _split_list(v)),
    "out_dir": str,
    "cell_radius": float, "d0": float, "pathloss_exp": float, "ref_gain_db": float,
    "cluster_policy": str, "rcg_init": lambda v: v.strip().lower(),
    "workers": int, "trajectory": _bool, "timing": _bool,
}

_ENVIRONMENT = {"UCN_OUT_DIR": "out_dir", "UCN_WORKERS": "workers"}


def parse_settings(raw: Dict[str, Optional[str]], source: str = "<settings>") -> dict:
    values = {}
    for key, text in raw.items():
        name = key.strip().lower()
        if name not in _PARSERS:
            raise ConfigurationError(f"{source}: unknown key {key!r}")
        if text is None:
            raise ConfigurationError(f"{source}: key {key!r} has no value")
        try:
            values[name] = _PARSERS[name](text)
        except ValueError as exc:
            raise ConfigurationError(f"{source}: bad value for {key!r}: {exc}") from None
    return values


def load_spec(
        path: Optional[Union[str, Path]] = None,
        overrides: Optional[dict] = None,
        environ: Optional[Dict[str, str]] = None,
) -> ExperimentSpec:
    """
    Precedence: overrides (CLI) > config file > UCN_* environment > defaults.
    The config file is flat key=value text.
    """
    environ = os.environ if environ is None else environ
    values = parse_settings(
        {field_name: environ[var] for var, field_name in _ENVIRONMENT.items() if environ.get(var)},
        source="environment",
    )
    if path is not None:
        if not Path(path).is_file():
            raise ConfigurationError(f"config file not found: {path}")
        values.update(parse_settings(dotenv_values(path), source=str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentSpec(**values)


# ---------------------------------------------------------------------
# CELLS
# ---------------------------------------------------------------------
def derive_seed(seed: int, *indices: int) -> int:
    """seed XOR blake2b(indices), kept in 64 bits."""
    digest = hashlib.blake2b(",".join(str(int(x)) for x in indices).encode(), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & (2 ** 64 - 1)


@dataclass(frozen=True)
class Cell:
    trial: int
    power_dbm: float
    bsc: int
    method: str


def iter_cells(spec: ExperimentSpec) -> List[Cell]:
    return [
        Cell(trial, power, bsc, method)
        for trial in range(spec.trials)
        for power in spec.power_dbm
        for bsc in spec.bsc
        for method in spec.methods
    ]


@dataclass(frozen=True)
class ResultRow:
    trial: int
    seed: int
    power_dbm: float
    bsc: int
    method: str
    outer_iter: int = 0
    wsr_bits: Optional[float] = None
    grad_norm: Optional[float] = None
    inner_iters: int = 0
    wall_ms: float = 0.0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class CellOutcome:
    row: ResultRow
    trajectory: List[ResultRow] = field(default_factory=list)


# ---------------------------------------------------------------------
# COMPLEXITY MODEL
# ---------------------------------------------------------------------
def complexity_flops(method: str, config: NetworkConfig) -> float:
    """
    Leading-order complex multiply counts. "rcg" and "wmmse" are per outer
    iteration; the closed-form precoders are one-shot.
    """
    b, u, mt, mr, bsc = config.num_bs, config.num_ut, config.mt, config.mr, config.cluster_size
    d = config.streams
    n_t, n_r = b * mt, u * mr
    # sum_k sum_{i in U_k} x_i == sum_i B_i x_i with B_i = bsc
    served_streams = bsc * sum(d)
    method = method.lower()
    if method == RCG:
        return float(2 * u * mt * mr * served_streams)
    if method == "wmmse":
        return float(bsc * sum(4 * u * mt * mr * di + mt * mt * di for di in d) + b * mt ** 3)
    if method == "mrt":
        return float(u * bsc * (mr * mr * mt + mr ** 3))
    if method == "zf":
        return float(n_r ** 3 + n_t * n_r ** 2)
    if method == "mmse":
        return float(n_t ** 3 + n_t ** 2 * n_r)
    if method == "bd":
        return float(n_r ** 2 * n_t * u + n_r * n_t ** 2)
    if method == "ezf":
        return float(n_t ** 3 * u + n_r * n_t ** 2)
    raise ConfigurationError(f"no complexity model for method {method!r}")


# ---------------------------------------------------------------------
# RUNNING ONE CELL
# ---------------------------------------------------------------------
def _initial_point(spec: ExperimentSpec, channels, cluster, config):
    if spec.rcg_init == "mrt":
        return mrt_precoder(channels, cluster, config)
    try:
        return linear_baseline(spec.rcg_init, channels, cluster, config)
    except BaselineInfeasibleError as exc:
        log.warning("rcg_init=%s failed (%s); starting from MRT", spec.rcg_init, exc)
        return mrt_precoder(channels, cluster, config)


def _trajectory_rows(base: ResultRow, trace: SolverTrace, timing: bool) -> List[ResultRow]:
    return [
        replace(
            base, outer_iter=rec.iteration, wsr_bits=nats_to_bits(rec.wsr), grad_norm=rec.grad_norm,
            inner_iters=rec.inner_iters, wall_ms=rec.wall_ms if timing else 0.0,
        )
        for rec in trace.records
    ]


def run_single(spec: ExperimentSpec, trial: int, seed: int, power_dbm: float, bsc: int, method: str) -> CellOutcome:
    """One cell from its channel seed; failures come back as a status row."""
    base = ResultRow(trial=trial, seed=seed, power_dbm=power_dbm, bsc=bsc, method=method)
    try:
        config = spec.network_config(power_dbm, bsc)
        channels = generate_channels(config, seed)
        cluster = select_clusters(channels, bsc, spec.cluster_policy, config.bs_power)
        objective = WsrObjective.from_config(config, channels, cluster)
        log.debug("trial=%d power=%g dBm bsc=%d: strongest-link SNR %.1f dB",
                  trial, power_dbm, bsc, snr_db(config, channels))

        if method == RCG:
            p0 = _initial_point(spec, channels, cluster, config)
            _, trace = rcg_solve(objective, p0, SolverOptions.from_config(config))
            last = trace.final
            row = replace(
                base, outer_iter=trace.outer_iterations, wsr_bits=nats_to_bits(last.wsr),
                grad_norm=last.grad_norm, inner_iters=trace.total_inner,
                wall_ms=sum(rec.wall_ms for rec in trace.records) if spec.timing else 0.0,
            )
            trajectory = _trajectory_rows(base, trace, spec.timing) if spec.trajectory else []
            return CellOutcome(row, trajectory)

        started = time.perf_counter()
        p = linear_baseline(method, channels, cluster, config)
        elapsed = (time.perf_counter() - started) * 1e3
        cache = objective.build_cache(p)
        g = objective.riemannian_gradient(p, objective.euclidean_gradient(cache))
        row = replace(
            base, wsr_bits=nats_to_bits(objective.wsr(cache)),
            grad_norm=objective.manifold.norm(p, g), wall_ms=elapsed if spec.timing else 0.0,
        )
        return CellOutcome(row, [row] if spec.trajectory else [])

    except PrecoderError as exc:
        log.warning("cell trial=%d power=%g bsc=%d %s failed: %s", trial, power_dbm, bsc, method, exc)
        return CellOutcome(replace(base, status=type(exc).__name__))


def run_cell(spec: ExperimentSpec, cell: Cell) -> CellOutcome:
    return run_single(spec, cell.trial, derive_seed(spec.seed, cell.trial), cell.power_dbm, cell.bsc, cell.method)


def rerun_row(spec: ExperimentSpec, row: ResultRow) -> ResultRow:
    return run_single(spec, row.trial, row.seed, row.power_dbm, row.bsc, row.method).row


# ---------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------
def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})


def write_results_csv(path: Union[str, Path], rows: Iterable[ResultRow]) -> None:
    _write_csv(Path(path), RESULT_COLUMNS, (asdict(r) for r in rows))


def write_summary_csv(path: Union[str, Path], rows: Iterable[dict]) -> None:
    _write_csv(Path(path), SUMMARY_COLUMNS, rows)


_INT_COLUMNS = frozenset(("trial", "seed", "bsc", "outer_iter", "inner_iters"))
_OPTIONAL_COLUMNS = frozenset(("wsr_bits", "grad_norm"))


def _parse_field(path: str, line_no: int, name: str, text: str):
    if name in ("method", "status"):
        return text
    if text == "":
        if name in _OPTIONAL_COLUMNS:
            return None
        raise ParseError(path, line_no, f"empty value in column {name!r}")
    try:
        return int(text) if name in _INT_COLUMNS else float(text)
    except ValueError:
        raise ParseError(path, line_no, f"column {name!r}: {text!r} is not a number") from None


def read_results_csv(path: Union[str, Path]) -> List[ResultRow]:
    """Parse a results or trajectory CSV back into rows."""
    path = str(path)
    rows: List[ResultRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(path, 1, "empty file, expected a header row")
        if tuple(header) != RESULT_COLUMNS:
            raise ParseError(path, 1, f"unexpected header {header}")
        for record in reader:
            line_no = reader.line_num
            if not record:
                continue
            if len(record) != len(RESULT_COLUMNS):
                raise ParseError(path, line_no, f"expected {len(RESULT_COLUMNS)} fields, found {len(record)}")
            values = {name: _parse_field(path, line_no, name, text) for name, text in zip(RESULT_COLUMNS, record)}
            rows.append(ResultRow(**values))
    return rows


# ---------------------------------------------------------------------
# SUMMARY / TRENDS
# ---------------------------------------------------------------------
def summarize(spec: Optional[ExperimentSpec], rows: Sequence[ResultRow]) -> List[dict]:
    groups: "OrderedDict[Tuple[float, int, str], List[ResultRow]]" = OrderedDict()
    for row in rows:
        groups.setdefault((row.power_dbm, row.bsc, row.method), []).append(row)

    out = []
    for (power, bsc, method), members in groups.items():
        ok = [m for m in members if m.ok and m.wsr_bits is not None]
        total_outer = sum(m.outer_iter for m in ok)
        flops = None
        if spec is not None:
            flops = complexity_flops(RCG, spec.network_config(power, bsc))
        out.append({
            "power_dbm": power,
            "bsc": bsc,
            "method": method,
            "trials": len(members),
            "ok_trials": len(ok),
            "mean_wsr_bits": statistics.fmean(m.wsr_bits for m in ok) if ok else None,
            "mean_outer_iter": statistics.fmean(m.outer_iter for m in ok) if ok else None,
            "mean_inner_iters": sum(m.inner_iters for m in ok) / total_outer if total_outer else 0.0,
            "rcg_flops_per_iter": flops,
        })
    return out


def iterations_to_fraction(wsr_values: Sequence[float], fraction: float) -> int:
    """First iteration whose WSR reaches `fraction` of the final WSR."""
    if not wsr_values:
        return 0
    target = fraction * wsr_values[-1]
    for n, value in enumerate(wsr_values):
        if value >= target:
            return n
    return len(wsr_values) - 1


def _mean_line(rows: Sequence[ResultRow]) -> Optional[float]:
    values = [r.wsr_bits for r in rows if r.ok and r.wsr_bits is not None]
    return statistics.fmean(values) if values else None


def report_trends(path: Union[str, Path]) -> str:
    """
    Human-readable digest of a finished run. `path` is the run directory or
    its results.csv; trajectory_rcg.csv next to it is used when present.
    """
    path = Path(path)
    results_path = path / "results.csv" if path.is_dir() else path
    rows = read_results_csv(results_path)
    lines: List[str] = [f"run: {results_path.parent}", f"result rows: {len(rows)}"]

    cells: "OrderedDict[Tuple[float, int], Dict[str, List[ResultRow]]]" = OrderedDict()
    for row in rows:
        cells.setdefault((row.power_dbm, row.bsc), defaultdict(list))[row.method].append(row)

    lines.append("")
    lines.append("mean WSR (bits/s/Hz) per cell")
    for (power, bsc), by_method in cells.items():
        means = {m: _mean_line(rs) for m, rs in by_method.items()}
        parts = [f"{m}={v:.6g}" if v is not None else f"{m}=n/a" for m, v in means.items()]
        lines.append(f"  power_dbm={power:g} bsc={bsc}: " + " ".join(parts))
        rcg_mean = means.get(RCG)
        if rcg_mean is not None:
            for m, v in means.items():
                if m == RCG or v is None:
                    continue
                gain = f"{100.0 * (rcg_mean - v) / v:+.2f}%" if v > 0 else "n/a"
                lines.append(f"    rcg - {m} = {rcg_mean - v:+.6g} ({gain})")

    by_power: Dict[float, List[Tuple[int, float]]] = defaultdict(list)
    for (power, bsc), by_method in cells.items():
        mean = _mean_line(by_method.get(RCG, []))
        if mean is not None:
            by_power[power].append((bsc, mean))
    if by_power:
        lines.append("")
        lines.append("rcg gain per added serving BS")
        for power, series in by_power.items():
            series.sort()
            steps = [f"{b0}->{b1}: {m1 - m0:+.6g}" for (b0, m0), (b1, m1) in zip(series, series[1:])]
            lines.append(f"  power_dbm={power:g}: " + (", ".join(steps) if steps else "single bsc"))

    traj_path = results_path.parent / f"trajectory_{RCG}.csv"
    traj = read_results_csv(traj_path) if traj_path.is_file() else []
    steps = [r for r in traj if r.outer_iter >= 1]
    lines.append("")
    if not steps:
        # without a trajectory file the per-run totals still carry the inner-step average
        finished = [r for r in rows if r.method == RCG and r.ok]
        outer = sum(r.outer_iter for r in finished)
        if outer:
            lines.append(
                f"rcg iterations: {outer} over {len(finished)} runs, "
                f"mean inner iterations {sum(r.inner_iters for r in finished) / outer:.3g}"
            )
        else:
            lines.append("rcg trajectory: 0 iterations")
    else:
        lines.append(
            f"rcg trajectory: {len(steps)} iterations, "
            f"mean inner iterations {statistics.fmean(r.inner_iters for r in steps):.3g}"
        )
        runs: Dict[Tuple[int, float, int], List[float]] = OrderedDict()
        for r in traj:
            runs.setdefault((r.trial, r.power_dbm, r.bsc), []).append(r.wsr_bits)
        for fraction in MILESTONES:
            reached = [iterations_to_fraction(w, fraction) for w in runs.values()]
            lines.append(f"  iterations to {fraction:.0%} of final WSR: mean {statistics.fmean(reached):.3g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------
# ORCHESTRATION
# ---------------------------------------------------------------------
@dataclass
class ExperimentResult:
    out_dir: Path
    rows: List[ResultRow]
    summary: List[dict]
    trajectories: Dict[str, List[ResultRow]]

    @property
    def failed(self) -> List[ResultRow]:
        return [r for r in self.rows if not r.ok]


def run_experiment(spec: ExperimentSpec, out_dir: Optional[Union[str, Path]] = None, progress=None) -> ExperimentResult:
    """
    Run every cell, write the CSVs and return what was written. `progress`,
    when given, is called with each CellOutcome in cell order.
    """
    out = Path(out_dir or spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = iter_cells(spec)
    log.info("running %d cells (%d trials) with %d worker(s) into %s", len(cells), spec.trials, spec.workers, out)

    job = partial(run_cell, spec)
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = pool.map(job, cells, chunksize=max(1, len(cells) // (4 * spec.workers)))
            outcomes = [_report(progress, o) for o in outcomes]
    else:
        outcomes = [_report(progress, job(c)) for c in cells]

    rows = [o.row for o in outcomes]
    trajectories: Dict[str, List[ResultRow]] = {m: [] for m in spec.methods} if spec.trajectory else {}
    for o in outcomes:
        if spec.trajectory:
            trajectories[o.row.method].extend(o.trajectory)

    summary = summarize(spec, rows)
    write_results_csv(out / "results.csv", rows)
    write_summary_csv(out / "summary.csv", summary)
    for method, traj in trajectories.items():
        write_results_csv(out / f"trajectory_{method}.csv", traj)
    return ExperimentResult(out_dir=out, rows=rows, summary=summary, trajectories=trajectories)


def _report(progress, outcome: CellOutcome) -> CellOutcome:
    if progress is not None:
        progress(outcome)
    return outcome


# ---------------------------------------------------------------------
# SCALING MEASUREMENT
# ---------------------------------------------------------------------
def time_per_iteration(config: NetworkConfig, seed: int, iterations: int = 20) -> float:
    """Median wall time (ms) of one RCG outer iteration on a fresh draw."""
    channels = generate_channels(config, seed)
    cluster = select_clusters(channels, config.cluster_size)
    objective = WsrObjective.from_config(config, channels, cluster)
    p0 = mrt_precoder(channels, cluster, config)
    opts = SolverOptions.from_config(config, max_outer=iterations, grad_tol=0.0)
    _, trace = rcg_solve(objective, p0, opts)
    times = [rec.wall_ms for rec in trace.records[1:]]
    return statistics.median(times) if times else math.nan
