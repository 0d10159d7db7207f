"""Fluid processor-sharing replay of a request log against cached base stations.

Every active request at a cell gets an equal share of the cell's wireless
link; misses additionally get an equal share of the backhaul among the
cell's active misses. No request ever runs faster than its content bitrate.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, TextIO

import numpy as np

from .placement import CachePlacement
from .popularity import RatingMatrix
from .trace import Catalog, RequestLog

RATE_TOLERANCE = 1e-9
DEFAULT_TOTAL_BACKHAUL = 3.8e6
DEFAULT_TOTAL_WIRELESS = 120e6


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    num_cells: int
    backhaul_per_cell: float
    wireless_per_cell: float
    # one backhaul pool of num_cells * backhaul_per_cell shared by all misses
    shared_backhaul: bool = False

    def __post_init__(self):
        if self.num_cells < 1:
            raise SimulationError("num_cells must be >= 1")
        if not (self.backhaul_per_cell > 0 and self.wireless_per_cell > 0):
            raise SimulationError("link capacities must be > 0")
        if self.backhaul_per_cell > self.wireless_per_cell:
            raise SimulationError(
                f"backhaul ({self.backhaul_per_cell}) exceeds wireless ({self.wireless_per_cell})"
            )

    @classmethod
    def from_totals(
        cls,
        num_cells: int,
        total_backhaul: float = DEFAULT_TOTAL_BACKHAUL,
        total_wireless: float = DEFAULT_TOTAL_WIRELESS,
        shared_backhaul: bool = False,
    ) -> "LinkConfig":
        return cls(num_cells, total_backhaul / num_cells, total_wireless / num_cells, shared_backhaul)


@dataclass(frozen=True)
class DeliveryRecord:
    index: int
    cell: int
    content: int
    hit: bool
    start: float
    finish: float
    bytes_over_backhaul: int
    achieved_rate: float
    satisfied: bool


@dataclass(frozen=True)
class Segment:
    """A stretch of constant rate for one request (recorded on demand)."""

    index: int
    cell: int
    hit: bool
    start: float
    end: float
    rate: float


class SimResult:
    """Per-request outcomes, column-wise, plus the two summary percentages."""

    def __init__(self, cells, contents, hits, starts, finishes, sizes, bitrates, lags, segments=None):
        self.cells = np.asarray(cells, dtype=np.int64)
        self.contents = np.asarray(contents, dtype=np.int64)
        self.hits = np.asarray(hits, dtype=bool)
        self.starts = np.asarray(starts, dtype=float)
        self.finishes = np.asarray(finishes, dtype=float)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.bitrates = np.asarray(bitrates, dtype=float)
        self.lags = np.asarray(lags, dtype=float)
        self.segments = segments
        # lag = integral of (bitrate - rate) dt, so duration = (size + lag) / bitrate
        self.achieved_rates = self.bitrates * self.sizes / (self.sizes + self.lags)
        self.satisfied = self.achieved_rates >= self.bitrates * (1 - RATE_TOLERANCE)
        self.bytes_over_backhaul = np.where(self.hits, 0, self.sizes)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def records(self) -> list[DeliveryRecord]:
        return [
            DeliveryRecord(i, c, f, h, s, e, b, r, ok)
            for i, (c, f, h, s, e, b, r, ok) in enumerate(zip(
                self.cells.tolist(), self.contents.tolist(), self.hits.tolist(),
                self.starts.tolist(), self.finishes.tolist(),
                self.bytes_over_backhaul.tolist(), self.achieved_rates.tolist(),
                self.satisfied.tolist(),
            ))
        ]

    @property
    def satisfaction_pct(self) -> float:
        return satisfaction(self)

    @property
    def backhaul_load_pct(self) -> float:
        return backhaul_load(self)

    def write_requests_csv(self, stream: TextIO, header: bool = True) -> None:
        if header:
            stream.write("index,cell,content,hit,start,finish,achieved_rate,satisfied\n")
        for r in self.records:
            stream.write(
                f"{r.index},{r.cell},{r.content},{int(r.hit)},{r.start!r},{r.finish!r},"
                f"{r.achieved_rate!r},{int(r.satisfied)}\n"
            )

    def write_summary_csv(self, stream: TextIO, header: bool = True) -> None:
        if header:
            stream.write("satisfaction_pct,backhaul_load_pct\n")
        stream.write(f"{self.satisfaction_pct!r},{self.backhaul_load_pct!r}\n")


def satisfaction(result: SimResult) -> float:
    """Percent of requests whose average delivery rate met the content bitrate."""
    if len(result) == 0:
        raise SimulationError("satisfaction of an empty simulation")
    return 100.0 * int(result.satisfied.sum()) / len(result)


def backhaul_load(result: SimResult) -> float:
    """Percent of requested bytes that crossed the backhaul."""
    if len(result) == 0:
        raise SimulationError("backhaul load of an empty simulation")
    return 100.0 * int(result.bytes_over_backhaul.sum()) / int(result.sizes.sum())


def simulate(
    log: RequestLog,
    catalog: Catalog,
    placement: CachePlacement,
    links: LinkConfig,
    record_segments: bool = False,
) -> SimResult:
    if not log.assigned:
        raise SimulationError("simulation needs a log assigned to cells")
    log.check_catalog(catalog)
    N = links.num_cells
    if placement.num_cells != N:
        raise SimulationError(f"placement covers {placement.num_cells} cells, links {N}")
    D = len(log)
    if D and log.cells.max() >= N:
        raise SimulationError(f"request cell id {int(log.cells.max())} >= {N}")

    sizes_arr = catalog.sizes[log.contents]
    rates_cap_arr = catalog.bitrates[log.contents]
    hits_arr = placement.cached_mask(len(catalog))[log.cells, log.contents] if D else np.zeros(0, bool)

    arrivals = log.arrivals.tolist()
    cells = log.cells.tolist()
    cap = rates_cap_arr.tolist()
    hits = hits_arr.tolist()
    rem = sizes_arr.astype(float).tolist()
    rate = [0.0] * D
    lag = [0.0] * D
    t_upd = [0.0] * D
    finish = [0.0] * D
    version = [0] * D

    wireless = links.wireless_per_cell
    backhaul = links.backhaul_per_cell
    shared = links.shared_backhaul
    pool = backhaul * N
    active: list[set] = [set() for _ in range(N)]
    miss_count = [0] * N
    total_misses = 0
    segments: Optional[list] = [] if record_segments else None

    heap: list = []
    next_arrival = 0

    def advance(i: int, t: float) -> None:
        dt = t - t_upd[i]
        if dt > 0:
            r = rate[i]
            rem[i] -= r * dt
            if rem[i] < 0:
                rem[i] = 0.0
            lag[i] += (cap[i] - r) * dt
            if segments is not None:
                segments.append(Segment(i, cells[i], hits[i], t_upd[i], t, r))
        t_upd[i] = t

    def reschedule(i: int, t: float, new_rate: float) -> None:
        rate[i] = new_rate
        version[i] += 1
        heapq.heappush(heap, (t + rem[i] / new_rate, i, version[i]))

    def rerate(cell_ids, t: float) -> None:
        for c in cell_ids:
            members = active[c]
            if not members:
                continue
            w_share = wireless / len(members)
            if shared:
                b_share = pool / total_misses if total_misses else 0.0
            else:
                b_share = backhaul / miss_count[c] if miss_count[c] else 0.0
            for i in members:
                advance(i, t)
                r = min(cap[i], w_share) if hits[i] else min(cap[i], w_share, b_share)
                reschedule(i, t, r)

    def touched(c: int, miss_changed: bool):
        if shared and miss_changed:
            return [n for n in range(N) if miss_count[n] or n == c]
        return (c,)

    while next_arrival < D or heap:
        # pick the earliest event; equal times resolve by request index
        take_arrival = False
        if heap:
            t_c, i_c, ver = heap[0]
            if ver != version[i_c]:
                heapq.heappop(heap)
                continue
        if next_arrival < D:
            if not heap or (arrivals[next_arrival], next_arrival) < (t_c, i_c):
                take_arrival = True

        if take_arrival:
            i = next_arrival
            next_arrival += 1
            t = arrivals[i]
            c = cells[i]
            for j in active[c]:
                advance(j, t)
            active[c].add(i)
            t_upd[i] = t
            if not hits[i]:
                miss_count[c] += 1
                total_misses += 1
            rerate(touched(c, not hits[i]), t)
        else:
            heapq.heappop(heap)
            i, t = i_c, t_c
            c = cells[i]
            advance(i, t)
            rem[i] = 0.0
            finish[i] = t
            version[i] += 1
            active[c].discard(i)
            if not hits[i]:
                miss_count[c] -= 1
                total_misses -= 1
            rerate(touched(c, not hits[i]), t)

    return SimResult(
        log.cells, log.contents, hits_arr, log.arrivals, finish,
        sizes_arr, rates_cap_arr, lag, segments,
    )


def analytic_backhaul_load(popularity: RatingMatrix, placement: CachePlacement, catalog: Catalog) -> float:
    """Closed-form backhaul load: sum of count x size over uncached pairs, as a percent."""
    if popularity.num_contents != len(catalog) or popularity.num_cells != placement.num_cells:
        raise SimulationError("popularity, placement and catalog shapes disagree")
    cached = placement.cached_mask(len(catalog))[popularity.cells, popularity.contents]
    sizes = catalog.sizes[popularity.contents]
    values = popularity.values
    if np.all(values == np.round(values)):
        load = values.astype(np.int64) * sizes
        total = int(load.sum())
        missed = int(load[~cached].sum())
    else:
        load = values * sizes
        total = float(load.sum())
        missed = float(load[~cached].sum())
    if total == 0:
        raise SimulationError("zero total demand")
    return 100.0 * missed / total
