"""Storage, backhaul-ratio and training-density sweeps over the caching pipeline.

Seeds: every random stage draws from ``child_seed(master, repeat, stream)``,
a ``numpy.random.SeedSequence`` keyed by the master seed, the repeat index
and a fixed stream number (trace=0, assign=1, split=2, cf=3). Any single
stage of any repeat can therefore be re-run on its own. A trace file is
shared by all repeats; only its cell assignment changes.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .placement import StorageBudget, greedy_place
from .popularity import (
    RatingMatrix,
    RatingSplit,
    build_rating_matrix,
    estimate_popularity,
    known_first_scores,
    split_ratings,
    train_reg_svd,
    transform_ratings,
    inverse_transform,
)
from .simcore import LinkConfig, simulate
from .trace import Catalog, RequestLog, assign_requests_to_cells, generate_synthetic_trace, read_final_traces

log = logging.getLogger(__name__)

STREAMS = {"trace": 0, "assign": 1, "split": 2, "cf": 3}
GROUND = "ground"
CF = "cf"
METHODS = (GROUND, CF)


def child_seed(master: int, repeat: int, stream: str) -> int:
    seq = np.random.SeedSequence([master, repeat, STREAMS[stream]])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SweepCurve:
    sweep: str
    metric: str
    x_label: str
    y_label: str
    x: tuple
    y: dict  # method name -> tuple of y values, one per x

    def __post_init__(self):
        for method, ys in self.y.items():
            if len(ys) != len(self.x):
                raise ValueError(f"{method}: {len(ys)} y values for {len(self.x)} x values")

    @property
    def methods(self) -> tuple:
        return tuple(self.y)


@dataclass(frozen=True)
class Scenario:
    """Inputs shared by every method and grid point of one repeat."""

    catalog: Catalog
    requests: RequestLog
    ground: RatingMatrix
    repeat: int


def load_trace(config: ExperimentConfig, repeat: int = 0) -> tuple[Catalog, RequestLog]:
    if config.trace_file:
        catalog, requests = read_final_traces(config.trace_file, config.synthetic.bitrate)
        if requests.skipped_rows:
            log.warning("%s: skipped %d malformed rows", config.trace_file, requests.skipped_rows)
        return catalog, requests
    params = dataclasses.replace(config.synthetic, seed=child_seed(config.seed, repeat, "trace"))
    return generate_synthetic_trace(params)


def prepare(config: ExperimentConfig, repeat: int = 0) -> Scenario:
    catalog, requests = load_trace(config, repeat)
    requests = assign_requests_to_cells(requests, config.num_cells, child_seed(config.seed, repeat, "assign"))
    ground = build_rating_matrix(requests, config.num_cells, len(catalog), config.normalize_ratings)
    return Scenario(catalog, requests, ground, repeat)


def cf_estimate(config: ExperimentConfig, scenario: Scenario, train_fraction: float) -> tuple[np.ndarray, RatingSplit]:
    """Dense CF popularity estimate on the count scale, plus the split behind it.

    The factor model is fitted on transformed ratings (``rating_transform``)
    and its predictions mapped back; training ratings pass through untouched.
    """
    split = split_ratings(scenario.ground, train_fraction, child_seed(config.seed, scenario.repeat, "split"))
    kind = config.rating_transform
    split_t = RatingSplit(transform_ratings(split.train, kind), transform_ratings(split.test, kind),
                          split.train_fraction)
    hyper = dataclasses.replace(config.cf, seed=child_seed(config.seed, scenario.repeat, "cf"))
    model = train_reg_svd(split_t.train, hyper)
    estimate = inverse_transform(estimate_popularity(model, scenario.ground, split_t), kind)
    estimate[split.train.cells, split.train.contents] = split.train.values
    return estimate, split


def cf_scores(config: ExperimentConfig, scenario: Scenario, train_fraction: float) -> np.ndarray:
    """Placement scores for the collaborative-filtering method.

    Known training ratings rank ahead of every predicted entry.
    """
    estimate, split = cf_estimate(config, scenario, train_fraction)
    return known_first_scores(estimate, split.train)


def links_for(config: ExperimentConfig, ratio: float | None = None) -> LinkConfig:
    backhaul = config.total_backhaul if ratio is None else ratio * config.total_wireless
    return LinkConfig.from_totals(config.num_cells, backhaul, config.total_wireless, config.shared_backhaul)


def _evaluate(job) -> tuple[float, float]:
    catalog, requests, scores, fraction, links = job
    placement = greedy_place(scores, catalog, StorageBudget.for_catalog(fraction, catalog))
    result = simulate(requests, catalog, placement, links)
    return result.satisfaction_pct, result.backhaul_load_pct


def _run_jobs(jobs: list, workers: int) -> list:
    # results come back in job order whatever the completion order
    if workers <= 1 or len(jobs) <= 1:
        return [_evaluate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_evaluate, jobs))


def _mean_over_repeats(per_repeat: list[list[float]]) -> tuple:
    return tuple(float(v) for v in np.mean(np.asarray(per_repeat, dtype=float), axis=0))


def _pct(values) -> tuple:
    return tuple(round(100.0 * v, 9) for v in values)


def run_storage_sweep(config: ExperimentConfig) -> tuple[SweepCurve, SweepCurve]:
    """Satisfaction and backhaul load against per-cell storage, both methods."""
    config.validate()
    links = links_for(config)
    sat = {m: [] for m in METHODS}
    bh = {m: [] for m in METHODS}
    for repeat in range(config.repeats):
        scenario = prepare(config, repeat)
        scores = {GROUND: scenario.ground.to_dense(), CF: cf_scores(config, scenario, config.train_fraction)}
        jobs = [
            (scenario.catalog, scenario.requests, scores[m], s, links)
            for m in METHODS for s in config.storage_grid
        ]
        out = _run_jobs(jobs, config.workers)
        G = len(config.storage_grid)
        for k, m in enumerate(METHODS):
            chunk = out[k * G:(k + 1) * G]
            sat[m].append([o[0] for o in chunk])
            bh[m].append([o[1] for o in chunk])
        log.info("storage sweep: repeat %d/%d done", repeat + 1, config.repeats)
    x = _pct(config.storage_grid)
    return (
        SweepCurve("storage", "satisfaction", "Storage Size (%)", "Satisfaction (%)", x,
                   {m: _mean_over_repeats(sat[m]) for m in METHODS}),
        SweepCurve("storage", "backhaul", "Storage Size (%)", "Backhaul Load (%)", x,
                   {m: _mean_over_repeats(bh[m]) for m in METHODS}),
    )


def run_backhaul_ratio_sweep(config: ExperimentConfig) -> SweepCurve:
    """Satisfaction against total backhaul / total wireless capacity."""
    config.validate()
    for ratio in config.backhaul_ratio_grid:
        if not 0 < ratio <= 1:
            raise ConfigError(f"backhaul ratio must lie in (0, 1], got {ratio}")
    link_grid = [links_for(config, r) for r in config.backhaul_ratio_grid]
    sat = {m: [] for m in METHODS}
    for repeat in range(config.repeats):
        scenario = prepare(config, repeat)
        scores = {GROUND: scenario.ground.to_dense(), CF: cf_scores(config, scenario, config.train_fraction)}
        jobs = [
            (scenario.catalog, scenario.requests, scores[m], config.backhaul_storage, links)
            for m in METHODS for links in link_grid
        ]
        out = _run_jobs(jobs, config.workers)
        G = len(link_grid)
        for k, m in enumerate(METHODS):
            sat[m].append([o[0] for o in out[k * G:(k + 1) * G]])
        log.info("backhaul sweep: repeat %d/%d done", repeat + 1, config.repeats)
    return SweepCurve(
        "backhaul", "satisfaction", "Normalized backhaul Capacity (%)", "Satisfaction (%)",
        _pct(config.backhaul_ratio_grid), {m: _mean_over_repeats(sat[m]) for m in METHODS},
    )


def satisfaction_rmse(ground_curve, cf_curve) -> float:
    """Root-mean-square gap between two satisfaction curves over a shared grid."""
    a = np.asarray(ground_curve, dtype=float)
    b = np.asarray(cf_curve, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("curves must be non-empty and of equal length")
    return float(math.sqrt(np.mean((a - b) ** 2)))


def run_density_sweep(config: ExperimentConfig) -> SweepCurve:
    """Satisfaction RMSE between ground truth and CF against training density."""
    config.validate()
    if len(config.storage_grid) < 2:
        raise ConfigError("density sweep needs at least two storage points")
    links = links_for(config)
    G = len(config.storage_grid)
    rmse = []
    for repeat in range(config.repeats):
        scenario = prepare(config, repeat)
        score_sets = [scenario.ground.to_dense()]
        score_sets += [cf_scores(config, scenario, d) for d in config.density_grid]
        jobs = [
            (scenario.catalog, scenario.requests, scores, s, links)
            for scores in score_sets for s in config.storage_grid
        ]
        sats = [o[0] for o in _run_jobs(jobs, config.workers)]
        ground_curve = sats[:G]
        rmse.append([
            satisfaction_rmse(ground_curve, sats[(k + 1) * G:(k + 2) * G])
            for k in range(len(config.density_grid))
        ])
        log.info("density sweep: repeat %d/%d done", repeat + 1, config.repeats)
    return SweepCurve(
        "density", "rmse", "Training Density (%)", "RMSE",
        _pct(config.density_grid), {CF: _mean_over_repeats(rmse)},
    )


# -- figure data files ----------------------------------------------------


def _fmt(v: float) -> str:
    return format(v, ".6g")


def emit_csv(curve: SweepCurve, directory, header: bool = False) -> list[Path]:
    """Write one two-column x,y file per method, named {sweep}-{metric}-{method}.csv."""
    if not curve.x or not curve.y:
        raise ValueError(f"refusing to write an empty {curve.sweep}-{curve.metric} curve")
    directory = Path(directory)
    paths = []
    for method, ys in curve.y.items():
        path = directory / f"{curve.sweep}-{curve.metric}-{method}.csv"
        lines = [f"{curve.x_label},{curve.y_label}"] if header else []
        lines += [f"{_fmt(x)},{_fmt(y)}" for x, y in zip(curve.x, ys)]
        try:
            directory.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


def read_curve_csv(path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        a, b = line.split(",")
        try:
            xs.append(float(a))
            ys.append(float(b))
        except ValueError:
            if xs:
                raise
            # header line
    return xs, ys
