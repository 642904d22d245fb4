# -*- coding: utf-8 -*-
"""
Metrics and Statistics Module for ClusterSlot
Trajectory aggregation, t confidence intervals, permutation tests and
effect sizes for run-level improvements
"""

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 10_000


class StatisticsError(ValueError):
    """Raised when an estimator is undefined for the given data"""


@dataclass
class RunSummary:
    """Improvement Δ = final - initial of one run's score series"""
    experiment: int
    run_seed: int
    initial: float
    final: float
    delta: float
    series: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    metric: str = "silhouette"

    def to_row(self) -> Dict:
        return {
            "experiment": self.experiment,
            "run_seed": self.run_seed,
            "metric": self.metric,
            "initial": self.initial,
            "final": self.final,
            "delta": self.delta,
            "iterations": len(self.series),
        }


def _as_array(values, name: str = "values") -> np.ndarray:
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.size == 0:
        raise StatisticsError(f"{name} is empty")
    return array


def summarize_run(experiment: int, run_seed: int, series, metric: str = "silhouette") -> RunSummary:
    """Initial and final are the first and last finite entries of the series"""
    series = np.asarray(series, dtype=float)
    finite = np.flatnonzero(np.isfinite(series))
    if finite.size == 0:
        raise StatisticsError(f"Run {run_seed} of experiment {experiment} has no finite {metric} values")
    initial, final = float(series[finite[0]]), float(series[finite[-1]])
    return RunSummary(experiment, run_seed, initial, final, final - initial, series, metric)


def mean_ci(values, confidence: float = 0.95) -> Tuple[float, float, float]:
    """Student t interval on the mean: (mean, lo, hi)"""
    x = _as_array(values)
    if x.size < 2:
        raise StatisticsError("A confidence interval needs at least 2 values")
    mean = float(x.mean())
    sem = float(x.std(ddof=1)) / math.sqrt(x.size)
    half = float(stats.t.ppf((1 + confidence) / 2, x.size - 1)) * sem
    return mean, mean - half, mean + half


def _mean_differences(combined: np.ndarray, groups_a: np.ndarray, n_a: int) -> np.ndarray:
    total = combined.sum()
    n_b = len(combined) - n_a
    sum_a = combined[groups_a].sum(axis=1)
    return np.abs(sum_a / n_a - (total - sum_a) / n_b)


def permutation_test(group_a, group_b, resamples: int = DEFAULT_RESAMPLES, seed: int = 0) -> float:
    """
    Two-sided permutation p-value for the difference of means.

    When the number of distinct relabelings C(|A|+|B|, |A|) is at most
    `resamples` all of them are enumerated and p = count / total. Otherwise
    `resamples` random relabelings are drawn and p = (count+1)/(resamples+1).
    """
    a = _as_array(group_a, "group_a")
    b = _as_array(group_b, "group_b")
    combined = np.concatenate([a, b])
    n_a, n = len(a), len(combined)
    observed = abs(a.mean() - b.mean())
    tolerance = 1e-9 * max(float(np.abs(combined).max()), np.finfo(float).tiny)

    relabelings = math.comb(n, n_a)
    if relabelings <= resamples:
        groups = np.array(list(itertools.combinations(range(n), n_a)), dtype=np.int64)
        diffs = _mean_differences(combined, groups, n_a)
        count = int(np.count_nonzero(diffs >= observed - tolerance))
        return count / relabelings

    rng = np.random.default_rng(seed)
    groups = np.argsort(rng.random((resamples, n)), axis=1)[:, :n_a]
    diffs = _mean_differences(combined, groups, n_a)
    count = int(np.count_nonzero(diffs >= observed - tolerance))
    return (count + 1) / (resamples + 1)


def bonferroni(p: float, comparisons: int) -> float:
    return min(1.0, p * comparisons)


def cohens_d(group_a, group_b) -> float:
    """Mean difference over the pooled standard deviation (ddof=1)"""
    a = _as_array(group_a, "group_a")
    b = _as_array(group_b, "group_b")
    dof = len(a) + len(b) - 2
    if dof < 1:
        raise StatisticsError("Cohen's d needs at least 3 observations in total")
    pooled = math.sqrt((((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / dof)
    if pooled == 0:
        raise StatisticsError("Pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / pooled)


def cliffs_delta(group_a, group_b) -> float:
    """(#{a > b} - #{a < b}) / (|A|·|B|)"""
    a = _as_array(group_a, "group_a")
    b = _as_array(group_b, "group_b")
    return float(np.sign(a[:, np.newaxis] - b[np.newaxis, :]).sum() / (len(a) * len(b)))


def effect_magnitude_d(d: float) -> str:
    size = abs(d)
    if size < 0.2:
        return "negligible"
    if size < 0.5:
        return "small"
    if size < 0.8:
        return "medium"
    return "large"


def effect_magnitude_delta(delta: float) -> str:
    size = abs(delta)
    if size < 0.147:
        return "negligible"
    if size < 0.33:
        return "small"
    if size < 0.474:
        return "medium"
    return "large"


def _stack_runs(runs: Sequence) -> np.ndarray:
    if len(runs) == 0:
        raise StatisticsError("No runs to average")
    lengths = {len(run) for run in runs}
    if len(lengths) != 1:
        raise StatisticsError(f"Runs differ in length: {sorted(lengths)}")
    return np.vstack([np.asarray(run, dtype=float) for run in runs])


def average_trajectories(runs: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and sample SD over runs, ignoring NaN entries; SD is 0 for one run"""
    matrix = _stack_runs(runs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean = np.nanmean(matrix, axis=0)
        if len(matrix) == 1:
            return mean, np.zeros(matrix.shape[1])
        sd = np.nanstd(matrix, axis=0, ddof=1)
    return mean, np.nan_to_num(sd, nan=0.0)


def trajectory_ci(runs: Sequence, confidence: float = 0.95) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise t band (mean, lo, hi); degenerates to the mean for a single run"""
    matrix = _stack_runs(runs)
    mean, sd = average_trajectories(runs)
    counts = np.sum(np.isfinite(matrix), axis=0)
    half = np.zeros_like(mean)
    several = counts >= 2
    if several.any():
        quantiles = stats.t.ppf((1 + confidence) / 2, counts[several] - 1)
        half[several] = quantiles * sd[several] / np.sqrt(counts[several])
    return mean, mean - half, mean + half


def ratio_correlation(optimal, ratios) -> Tuple[float, float]:
    """Pearson r and p between optimal route length and approximation ratio; NaN when undefined"""
    x = np.asarray(optimal, dtype=float)
    y = np.asarray(ratios, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan, math.nan
    result = stats.pearsonr(x, y)
    return float(result[0]), float(result[1])


def compare_experiments(summaries: List[RunSummary], resamples: int = DEFAULT_RESAMPLES,
                        seed: int = 0) -> pd.DataFrame:
    """Pairwise permutation p (raw and Bonferroni), Cohen's d and Cliff's δ on run-level Δ"""
    deltas: Dict[int, List[float]] = {}
    for summary in summaries:
        deltas.setdefault(summary.experiment, []).append(summary.delta)
    pairs = list(itertools.combinations(sorted(deltas), 2))

    rows = []
    for exp_a, exp_b in pairs:
        a, b = deltas[exp_a], deltas[exp_b]
        p = permutation_test(a, b, resamples=resamples, seed=seed)
        try:
            d = cohens_d(a, b)
        except StatisticsError as e:
            logger.warning(f"Cohen's d undefined for experiments {exp_a} vs {exp_b}: {e}")
            d = math.nan
        delta = cliffs_delta(a, b)
        rows.append({
            "experiment_a": exp_a,
            "experiment_b": exp_b,
            "mean_delta_a": float(np.mean(a)),
            "mean_delta_b": float(np.mean(b)),
            "p_value": p,
            "p_bonferroni": bonferroni(p, len(pairs)),
            "cohens_d": d,
            "d_magnitude": effect_magnitude_d(d) if not math.isnan(d) else "undefined",
            "cliffs_delta": delta,
            "delta_magnitude": effect_magnitude_delta(delta),
        })
    return pd.DataFrame(rows, columns=[
        "experiment_a", "experiment_b", "mean_delta_a", "mean_delta_b", "p_value", "p_bonferroni",
        "cohens_d", "d_magnitude", "cliffs_delta", "delta_magnitude",
    ])


def format_stats_report(summaries: List[RunSummary], comparisons: pd.DataFrame,
                        confidence: float = 0.95) -> str:
    """Plain-text table of per-experiment improvements and pairwise tests"""
    level = int(round(confidence * 100))
    lines = [f"{'Experiment':<12}{'Runs':>6}{'Initial':>10}{'Final':>10}{'Mean Δ':>10}{'SD':>9}   {level}% CI"]
    by_experiment: Dict[int, List[RunSummary]] = {}
    for summary in summaries:
        by_experiment.setdefault(summary.experiment, []).append(summary)

    for experiment in sorted(by_experiment):
        group = by_experiment[experiment]
        delta = np.array([s.delta for s in group])
        initial = np.mean([s.initial for s in group])
        final = np.mean([s.final for s in group])
        sd = delta.std(ddof=1) if len(delta) > 1 else 0.0
        if len(delta) > 1:
            _, lo, hi = mean_ci(delta, confidence)
            interval = f"[{lo:.2f}, {hi:.2f}]"
        else:
            interval = "n/a"
        lines.append(f"{'Exp ' + str(experiment):<12}{len(group):>6}{initial:>10.3f}{final:>10.3f}"
                     f"{delta.mean():>10.3f}{sd:>9.3f}   {interval}")

    if len(comparisons):
        lines.append("")
        lines.append("Pairwise comparisons (permutation test on Δ, Bonferroni-adjusted)")
        for row in comparisons.itertuples(index=False):
            lines.append(
                f"  Exp {row.experiment_a} vs Exp {row.experiment_b}: p={row.p_value:.4g} "
                f"(adj {row.p_bonferroni:.4g}), d={row.cohens_d:.2f} ({row.d_magnitude}), "
                f"δ={row.cliffs_delta:.2f} ({row.delta_magnitude})"
            )
    return "\n".join(lines) + "\n"
