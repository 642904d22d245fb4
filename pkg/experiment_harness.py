# -*- coding: utf-8 -*-
"""
Experiment Harness Module for ClusterSlot
Runs the three order-noise experiments and the route-comparison study,
writes plot-ready CSV/JSON artifacts with a manifest for exact replay
"""

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from ledger_db import RunLedgerDatabase
from metrics_stats import (
    RunSummary,
    average_trajectories,
    compare_experiments,
    format_stats_report,
    mean_ci,
    ratio_correlation,
    summarize_run,
    trajectory_ci,
)
from orders import (
    LINES_PER_PURCHASE_ORDER,
    PURCHASE_ORDERS_PER_ORDER,
    OrderStream,
    PerturbationModel,
    generate_base_order,
    generate_route_study_order,
)
from routing import DEFAULT_EXHAUSTIVE_LIMIT, DEFAULT_SEGMENT_CAPACITY, RouteEvaluator
from warehouse_state import GridDims, StateConfig, StateInvariantError, init_random_state, state_digest
from wms_loop import (
    DEFAULT_FEATURES,
    DEFAULT_KMEANS_RESTARTS,
    Trajectory,
    WMSEngine,
    reconcile,
    run_main_loop,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

PACKAGE_VERSION = "1.0.0"
MANIFEST_VERSION = 1
FLOAT_FORMAT = "%.12g"
DEFAULT_RUNS = {"small": 10, "large": 5, "custom": 10}


class ReplayError(RuntimeError):
    """A replayed run does not reproduce its manifest"""


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value else default


class ExperimentConfig(BaseModel):
    """Parameters of one experiment campaign; every random choice derives from the seeds"""
    model_config = ConfigDict(extra="forbid")

    scale: Literal["small", "large", "custom"] = "small"
    experiments: List[int] = Field(default_factory=lambda: [1])
    iterations: int = Field(default=100, ge=1)
    runs: Optional[int] = Field(default=None, ge=1)
    k: int = Field(default=3, ge=1)
    seed_state: int = 0
    seed_orders: int = 0
    seed_kmeans: int = 0
    seed_stats: int = 0
    out: Path = Field(default_factory=lambda: Path(os.getenv("CLUSTERSLOT_OUTPUT_DIR", "results")))
    route_study: bool = False
    exhaustive_limit: int = Field(
        default_factory=lambda: _env_int("CLUSTERSLOT_EXHAUSTIVE_LIMIT", DEFAULT_EXHAUSTIVE_LIMIT), ge=1,
    )
    segment_capacity: int = Field(
        default_factory=lambda: _env_int("CLUSTERSLOT_SEGMENT_CAPACITY", DEFAULT_SEGMENT_CAPACITY), ge=1,
    )
    workers: int = Field(default_factory=lambda: _env_int("CLUSTERSLOT_WORKERS", 1), ge=1)
    route_study_products: int = Field(default=10, ge=1)
    purchase_orders: int = Field(default=PURCHASE_ORDERS_PER_ORDER, ge=1)
    lines_per_purchase: int = Field(default=LINES_PER_PURCHASE_ORDER, ge=1)
    clusters_per_step: bool = True
    features: Literal["lines", "centroid"] = DEFAULT_FEATURES
    kmeans_restarts: int = Field(default=DEFAULT_KMEANS_RESTARTS, ge=1)
    resamples: int = Field(default=10_000, ge=1)
    max_balance: int = Field(default=10, ge=1)
    n_x: Optional[int] = None
    n_y: Optional[int] = None
    n_z: Optional[int] = None
    article_count: Optional[int] = None
    empty_racks: Optional[int] = None
    validate_states: bool = False

    @field_validator("experiments")
    @classmethod
    def _check_experiments(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("at least one experiment is required")
        unknown = [e for e in value if e not in (1, 2, 3)]
        if unknown:
            raise ValueError(f"unknown experiments {unknown}; expected 1, 2 or 3")
        return sorted(set(value))

    @model_validator(mode="after")
    def _check_scale(self) -> "ExperimentConfig":
        if self.runs is None:
            self.runs = DEFAULT_RUNS[self.scale]
        if self.scale == "custom":
            missing = [name for name in ("n_x", "n_y", "n_z", "article_count", "empty_racks")
                       if getattr(self, name) is None]
            if missing:
                raise ValueError(f"custom scale needs {', '.join(missing)}")
        if self.purchase_orders < self.k:
            raise ValueError(f"purchase_orders={self.purchase_orders} cannot form k={self.k} clusters")
        if self.route_study_products < self.k:
            raise ValueError(f"route_study_products={self.route_study_products} cannot form k={self.k} clusters")
        self.state_config(0).validate()
        return self

    def state_config(self, rng_seed: int) -> StateConfig:
        if self.scale == "small":
            config = StateConfig.small(rng_seed)
        elif self.scale == "large":
            config = StateConfig.large(rng_seed)
        else:
            config = StateConfig(GridDims(self.n_x, self.n_y, self.n_z), self.article_count,
                                 self.max_balance, self.empty_racks, rng_seed)
        config.max_balance = self.max_balance
        return config

    @classmethod
    def from_yaml(cls, path: Union[str, Path], **overrides) -> "ExperimentConfig":
        """Load a YAML config; non-None overrides (CLI flags) win over file values"""
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a mapping of config fields")
        data.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**data)


def _derive(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def run_seeds(config: ExperimentConfig, experiment: int, run: int) -> Dict[str, int]:
    """
    Seeds of one run. The initial state and base order depend on the run
    index only, so all experiments of a run start from the same x_0 and o.
    """
    return {
        "state": _derive(config.seed_state, run),
        "orders": _derive(config.seed_orders, run),
        "stream": _derive(config.seed_orders, run, experiment),
        "kmeans": _derive(config.seed_kmeans, run, experiment),
    }


@dataclass
class RunResult:
    experiment: int
    run: int
    seeds: Dict[str, int]
    trajectory: Trajectory
    summary: RunSummary
    area_summary: Optional[RunSummary]
    final_state_digest: str


def simulate_run(config: ExperimentConfig, experiment: int, run: int) -> RunResult:
    """One trajectory of the WMS loop under the experiment's order-noise model"""
    seeds = run_seeds(config, experiment, run)
    state_config = config.state_config(seeds["state"])
    x0 = init_random_state(state_config)
    base = generate_base_order(state_config, seeds["orders"], config.purchase_orders, config.lines_per_purchase)
    stream = OrderStream(base, PerturbationModel.for_experiment(experiment), seeds["stream"])

    trajectory = run_main_loop(
        x0, stream, config.iterations,
        clusters_per_step=config.clusters_per_step,
        K=config.k,
        kmeans_seed=seeds["kmeans"],
        validate=config.validate_states,
        features=config.features,
        kmeans_restarts=config.kmeans_restarts,
    )
    final_digest = state_digest(trajectory.final_state)
    trajectory.final_state = None

    summary = summarize_run(experiment, seeds["state"], trajectory.silhouette_series())
    try:
        area_summary = summarize_run(experiment, seeds["state"], trajectory.area_series(), metric="area")
    except ValueError:
        area_summary = None
    logger.info(f"Experiment {experiment} run {run}: silhouette {summary.initial:.3f} -> {summary.final:.3f}")
    return RunResult(experiment, run, seeds, trajectory, summary, area_summary, final_digest)


def _simulate_task(task: Tuple[ExperimentConfig, int, int]) -> RunResult:
    return simulate_run(*task)


def _execute(function, tasks: List, workers: int, desc: str) -> List:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(tqdm(pool.map(function, tasks), total=len(tasks), desc=desc))
    return [function(task) for task in tqdm(tasks, desc=desc)]


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _average_frame(results: List[RunResult]) -> pd.DataFrame:
    areas = [r.trajectory.area_series() for r in results]
    silhouettes = [r.trajectory.silhouette_series() for r in results]
    area_mean, area_sd = average_trajectories(areas)
    _, area_lo, area_hi = trajectory_ci(areas)
    sil_mean, sil_sd = average_trajectories(silhouettes)
    _, sil_lo, sil_hi = trajectory_ci(silhouettes)
    return pd.DataFrame({
        "n": np.arange(1, len(area_mean) + 1),
        "area_mean": area_mean,
        "area_sd": area_sd,
        "area_lo": area_lo,
        "area_hi": area_hi,
        "silhouette_mean": sil_mean,
        "silhouette_sd": sil_sd,
        "silhouette_lo": sil_lo,
        "silhouette_hi": sil_hi,
        "runs": len(results),
    })


def _summary_frame(results: List[RunResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        row = {"run": result.run}
        row.update(result.summary.to_row())
        area = result.area_summary
        row["area_initial"] = area.initial if area else math.nan
        row["area_final"] = area.final if area else math.nan
        row["relocations"] = int(sum(r.relocations for r in result.trajectory.records))
        row["final_state_digest"] = result.final_state_digest
        rows.append(row)
    return pd.DataFrame(rows)


def _write_manifest(config: ExperimentConfig, out: Path, runs: List[Dict]) -> Path:
    files = {
        str(path.relative_to(out)): _sha256_file(path)
        for path in sorted(out.rglob("*"))
        if path.is_file() and path.suffix in (".csv", ".jsonl", ".txt")
    }
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": PACKAGE_VERSION,
        "created_at": datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ"),
        "config": json.loads(config.model_dump_json()),
        "runs": runs,
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def run_experiment(config: ExperimentConfig) -> Path:
    """
    Simulate every (experiment, run) pair and write the artifact directory:
    per-run trajectories and events, per-experiment averages, the run
    summary, statistics report, pairwise comparisons, ledger and manifest.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running experiments {config.experiments} at {config.scale} scale: "
                f"{config.runs} runs x {config.iterations} iterations -> {out}")

    tasks = [(config, e, r) for e in config.experiments for r in range(1, config.runs + 1)]
    results = sorted(_execute(_simulate_task, tasks, config.workers, "runs"),
                     key=lambda result: (result.experiment, result.run))

    ledger = RunLedgerDatabase(out / "ledger.db")
    manifest_runs = []
    for experiment in config.experiments:
        exp_dir = out / f"exp{experiment}"
        exp_dir.mkdir(exist_ok=True)
        group = [result for result in results if result.experiment == experiment]
        for result in group:
            result.trajectory.write_csv(exp_dir / f"trajectory_run{result.run}.csv")
            result.trajectory.write_events_jsonl(exp_dir / f"events_run{result.run}.jsonl")
            run_id = ledger.record_run(experiment, result.run, result.summary.run_seed, config.scale,
                                       config.iterations, result.summary.initial, result.summary.final,
                                       result.final_state_digest)
            if run_id is not None:
                ledger.save_trajectory(run_id, result.trajectory)
            manifest_runs.append({
                "experiment": experiment,
                "run": result.run,
                "seeds": result.seeds,
                "final_state_digest": result.final_state_digest,
            })
        _average_frame(group).to_csv(exp_dir / "average.csv", index=False, float_format=FLOAT_FORMAT)

    summaries = [result.summary for result in results]
    _summary_frame(results).to_csv(out / "summary.csv", index=False, float_format=FLOAT_FORMAT)
    comparisons = compare_experiments(summaries, config.resamples, config.seed_stats)
    comparisons.to_csv(out / "comparisons.csv", index=False, float_format=FLOAT_FORMAT)
    (out / "stats.txt").write_text(format_stats_report(summaries, comparisons), encoding="utf-8")

    if config.route_study:
        run_route_study(config)

    manifest = _write_manifest(config, out, manifest_runs)
    logger.info(f"Artifacts written to {out} (manifest {manifest.name})")
    return out


def _route_study_task(task: Tuple[ExperimentConfig, int]) -> Dict:
    config, run = task
    seeds = run_seeds(config, 1, run)
    state_config = config.state_config(seeds["state"])
    x0 = init_random_state(state_config)
    order = generate_route_study_order(state_config, seeds["orders"], config.route_study_products)
    stream = OrderStream(order, PerturbationModel.NONE, seeds["stream"])
    evaluator = RouteEvaluator(state_config.dims, config.exhaustive_limit, config.segment_capacity,
                               workers=1, optimal_method="held_karp", at_iterations={1, config.iterations})
    trajectory = run_main_loop(x0, stream, config.iterations, K=config.k,
                               kmeans_seed=seeds["kmeans"], route_evaluator=evaluator,
                               features=config.features, kmeans_restarts=config.kmeans_restarts)

    first, last = trajectory.records[0], trajectory.records[-1]
    notes = []
    if first.route_len_exact is None:
        notes.append(f"optimum deferred at iteration 1 ({first.n_stops} stops)")
    if last.route_len_exact is None:
        notes.append(f"optimum deferred at iteration {last.n} ({last.n_stops} stops)")

    def ratio(record):
        if record.route_len_exact is None or record.route_len_approx is None:
            return math.nan
        return record.route_len_approx / record.route_len_exact if record.route_len_exact else 1.0

    reduction = math.nan
    if first.route_len_exact and last.route_len_exact is not None:
        reduction = 1.0 - last.route_len_exact / first.route_len_exact

    return {
        "run": run,
        "run_seed": seeds["state"],
        "stops_initial": first.n_stops,
        "stops_final": last.n_stops,
        "optimal_initial": first.route_len_exact,
        "clustered_initial": first.route_len_approx,
        "ratio_initial": ratio(first),
        "optimal_final": last.route_len_exact,
        "clustered_final": last.route_len_approx,
        "ratio_final": ratio(last),
        "length_reduction": reduction,
        "note": "; ".join(notes),
    }


def format_route_study_report(table: pd.DataFrame) -> str:
    ratios = table["ratio_final"].dropna().to_numpy(dtype=float)
    lines = [f"Route study: {len(table)} runs"]
    if len(ratios):
        lines.append(f"  ratio obtained/optimal: mean {ratios.mean():.3f}, "
                     f"SD {ratios.std(ddof=1) if len(ratios) > 1 else 0.0:.3f}, "
                     f"median {np.median(ratios):.3f}, max {ratios.max():.3f}")
        if len(ratios) > 1:
            _, lo, hi = mean_ci(ratios)
            lines.append(f"  95% CI of mean ratio: [{lo:.3f}, {hi:.3f}]")
    r, p = ratio_correlation(table["optimal_final"].to_numpy(dtype=float), table["ratio_final"].to_numpy(dtype=float))
    lines.append(f"  correlation optimal length vs ratio: r={r:.3f}, p={p:.3g}")
    lines.append(f"  stops: {table['stops_initial'].mean():.2f} -> {table['stops_final'].mean():.2f} (mean)")
    reduction = table["length_reduction"].dropna()
    if len(reduction):
        lines.append(f"  optimal length reduction: {100 * reduction.mean():.1f}% (mean)")
    deferred = table["note"].astype(bool).sum()
    if deferred:
        lines.append(f"  {deferred} runs with a deferred optimum (see note column)")
    return "\n".join(lines) + "\n"


def run_route_study(config: ExperimentConfig) -> pd.DataFrame:
    """Optimal vs cluster-decomposed routes at the first and final iteration of a recurring order"""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Route study: {config.runs} runs, {config.route_study_products} products, "
                f"{config.iterations} iterations")
    rows = _execute(_route_study_task, [(config, r) for r in range(1, config.runs + 1)],
                    config.workers, "route study")
    table = pd.DataFrame(sorted(rows, key=lambda row: row["run"]))
    table.to_csv(out / "route_study.csv", index=False, float_format=FLOAT_FORMAT)
    (out / "route_study.txt").write_text(format_route_study_report(table), encoding="utf-8")
    return table


def replay(manifest_path: Union[str, Path], out: Optional[Union[str, Path]] = None) -> Path:
    """
    Re-run a manifest's campaign into `out` (default: `<dir>_replay`) and
    compare every recorded file digest.

    Raises:
        ReplayError: version mismatch or any differing file
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ReplayError(f"Manifest version {manifest.get('manifest_version')} unsupported "
                          f"(expected {MANIFEST_VERSION})")
    if manifest.get("package_version") != PACKAGE_VERSION:
        raise ReplayError(f"Manifest written by version {manifest.get('package_version')}, "
                          f"this is {PACKAGE_VERSION}")

    target = Path(out) if out else manifest_path.parent.with_name(manifest_path.parent.name + "_replay")
    config = ExperimentConfig(**manifest["config"]).model_copy(update={"out": target})
    run_experiment(config)

    replayed = json.loads((target / "manifest.json").read_text(encoding="utf-8"))
    mismatched = sorted(
        name for name, digest in manifest["files"].items() if replayed["files"].get(name) != digest
    )
    extra = sorted(set(replayed["files"]) - set(manifest["files"]))
    if mismatched or extra:
        raise ReplayError(f"Replay differs in {len(mismatched)} files {mismatched[:5]} "
                          f"and adds {len(extra)} files {extra[:5]}")
    logger.info(f"Replay of {manifest_path} reproduced {len(manifest['files'])} files")
    return target


@dataclass
class InvariantReport:
    iterations: int = 0
    violations: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    def add(self, check: str, message: Optional[str] = None) -> None:
        self.violations.setdefault(check, [])
        if message:
            self.violations[check].append(message)

    def format(self) -> str:
        lines = [f"Checked {self.iterations} iterations"]
        for check in sorted(self.violations):
            found = self.violations[check]
            lines.append(f"  {check:<20} {'ok' if not found else f'{len(found)} violations'}")
            lines.extend(f"    {message}" for message in found[:5])
        return "\n".join(lines) + "\n"


def validate_invariants(config: ExperimentConfig) -> InvariantReport:
    """
    Step each experiment's runs and check: state invariants, parcel
    conservation, cluster partition, PSD covariances, silhouette bounds and
    the relocation guard.
    """
    report = InvariantReport()
    for check in ("state", "conservation", "partition", "covariance_psd", "silhouette_bounds", "relocation_guard"):
        report.add(check)

    for experiment in config.experiments:
        for run in range(1, config.runs + 1):
            seeds = run_seeds(config, experiment, run)
            state_config = config.state_config(seeds["state"])
            x0 = init_random_state(state_config)
            base = generate_base_order(state_config, seeds["orders"], config.purchase_orders,
                                       config.lines_per_purchase)
            stream = OrderStream(base, PerturbationModel.for_experiment(experiment), seeds["stream"])
            engine = WMSEngine(x0, stream, K=config.k, kmeans_seed=seeds["kmeans"],
                               clusters_per_step=config.clusters_per_step, validate=True,
                               features=config.features, kmeans_restarts=config.kmeans_restarts)

            for _ in range(config.iterations):
                where = f"exp{experiment} run{run} n={engine.n + 1}"
                try:
                    record = engine.step()
                except StateInvariantError as e:
                    report.add("state", f"{where}: {e}")
                    break
                report.iterations += 1
                model = engine.last_model

                if not reconcile(record):
                    report.add("conservation", f"{where}: stock {record.stock_before} -> {record.stock_after}")
                pick_sets = [model.pick_sets[label].s_pick for label in range(1, model.K + 1)]
                if sum(len(s) for s in pick_sets) != len(model.node_labels) or \
                        frozenset().union(*pick_sets) != model.all_pick_nodes():
                    report.add("partition", f"{where}: pick sets do not partition the picking nodes")
                for label, cov in model.covariances.items():
                    if cov is not None and np.linalg.eigvalsh(cov).min() < -1e-9:
                        report.add("covariance_psd", f"{where}: cluster {label} covariance not PSD")
                if not math.isnan(record.silhouette) and not -1.0 <= record.silhouette <= 1.0:
                    report.add("silhouette_bounds", f"{where}: silhouette {record.silhouette}")

            for event in engine.trajectory.events:
                if event["kind"] != "relocation":
                    continue
                if event["distance_after"] >= event["distance_before"] or event["from_node"] == event["to_node"]:
                    report.add("relocation_guard", f"exp{experiment} run{run} n={event['n']}: "
                                                   f"article {event['article']} moved away from its center")

    logger.info(f"Invariant suite: {report.iterations} iterations, {'ok' if report.ok else 'violations found'}")
    return report
