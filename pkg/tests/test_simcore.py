import io
import logging
from collections import defaultdict

import numpy as np
import pytest

from edgecache.placement import CachePlacement, StorageBudget, greedy_place
from edgecache.popularity import build_rating_matrix
from edgecache.simcore import (
    LinkConfig,
    SimulationError,
    analytic_backhaul_load,
    backhaul_load,
    satisfaction,
    simulate,
)
from edgecache.trace import (
    Catalog,
    RequestLog,
    SyntheticTraceParams,
    assign_requests_to_cells,
    generate_synthetic_trace,
)

MB = 1e6
L, B = 8 * MB, 4 * MB
WIRELESS, BACKHAUL = 120 * MB / 16, 3.8 * MB / 16


def one_cell(arrivals, contents, catalog, cached, links=None, **kw):
    log = RequestLog(arrivals, contents, max(arrivals), cells=[0] * len(arrivals))
    placement = CachePlacement.from_sets([cached], catalog)
    links = links or LinkConfig(1, BACKHAUL, WIRELESS)
    return simulate(log, catalog, placement, links, **kw)


def random_instance(seed, num_cells=None, fraction=None):
    rng = np.random.default_rng(seed)
    N = num_cells or int(rng.integers(1, 5))
    params = SyntheticTraceParams(
        num_contents=int(rng.integers(2, 15)), num_requests=int(rng.integers(1, 60)),
        duration=float(rng.uniform(1, 50)), size_log_mean=14.0, size_log_sigma=1.0,
        min_size=1000, max_size=10**8, bitrate=B, seed=seed,
    )
    catalog, log = generate_synthetic_trace(params)
    log = assign_requests_to_cells(log, N, seed)
    ground = build_rating_matrix(log, N, len(catalog))
    frac = float(rng.random()) if fraction is None else fraction
    placement = greedy_place(ground.to_dense(), catalog, StorageBudget.for_catalog(frac, catalog))
    links = LinkConfig.from_totals(N, 3.8 * MB, 120 * MB)
    return catalog, log, ground, placement, links


class TestHandComputed:
    catalog = Catalog.from_arrays([int(L)], B)

    def test_cached_delivery_takes_two_seconds(self):
        r = one_cell([0.0], [0], self.catalog, {0})
        assert r.finishes[0] - r.starts[0] == pytest.approx(2.0, rel=1e-6)
        assert r.satisfied[0] and r.hits[0]

    def test_backhaul_bound_delivery(self):
        r = one_cell([0.0], [0], self.catalog, set())
        assert r.finishes[0] - r.starts[0] == pytest.approx(33.684, rel=1e-5)
        assert r.finishes[0] == pytest.approx(L / BACKHAUL, rel=1e-12)
        assert r.achieved_rates[0] == pytest.approx(BACKHAUL, rel=1e-6)
        assert not r.satisfied[0]

    def test_two_way_wireless_split(self):
        r = one_cell([0.0, 0.0], [0, 0], self.catalog, {0}, record_segments=True)
        assert r.finishes.tolist() == pytest.approx([L / 3.75e6] * 2, rel=1e-6)
        assert all(s.rate == pytest.approx(3.75e6, rel=1e-12) for s in r.segments)
        assert not r.satisfied.any()

    def test_staggered_sharing(self):
        # second hit arrives at t=1; both then share 7.5 MB/s
        r = one_cell([0.0, 1.0], [0, 0], self.catalog, {0})
        t1 = 1 + (L - B) / 3.75e6
        assert r.finishes[0] == pytest.approx(t1, rel=1e-12)
        left = L - 3.75e6 * (t1 - 1)
        assert r.finishes[1] == pytest.approx(t1 + left / B, rel=1e-12)

    def test_hit_and_miss_share_wireless(self):
        links = LinkConfig(1, 7 * MB, 7.5 * MB)
        r = one_cell([0.0, 0.0], [0, 0], Catalog.from_arrays([int(L), int(L)], B), {0}, links=links)
        # both get 3.75 from the wireless share; the miss is also under its 7 MB/s backhaul
        assert r.finishes.tolist() == pytest.approx([L / 3.75e6] * 2, rel=1e-12)


class TestMetrics:
    def test_all_hits_isolated_is_full_satisfaction(self):
        catalog = Catalog.from_arrays([int(L)] * 3, B)
        log = RequestLog([0.0, 10.0, 20.0], [0, 1, 2], 20.0, cells=[0, 1, 1])
        everything = CachePlacement.from_sets([{0, 1, 2}] * 2, catalog)
        r = simulate(log, catalog, everything, LinkConfig(2, BACKHAUL, WIRELESS))
        assert satisfaction(r) == 100.0 and backhaul_load(r) == 0.0

    def test_all_misses_backhaul_bound(self):
        catalog, log, _, _, links = random_instance(3, num_cells=4)
        r = simulate(log, catalog, CachePlacement.from_sets([set()] * 4, catalog), links)
        assert satisfaction(r) == 0.0 and backhaul_load(r) == 100.0

    def test_half_bytes_cached(self):
        catalog = Catalog.from_arrays([100, 100], B)
        log = RequestLog([0.0, 0.0], [0, 1], 0.0, cells=[0, 0])
        r = simulate(log, catalog, CachePlacement.from_sets([{1}], catalog), LinkConfig(1, 1e3, 1e4))
        assert backhaul_load(r) == 50.0
        assert r.bytes_over_backhaul.tolist() == [100, 0]

    def test_empty_result(self):
        catalog = Catalog.from_arrays([5], B)
        r = simulate(RequestLog([], [], 0.0, cells=[]), catalog,
                     CachePlacement.from_sets([set()], catalog), LinkConfig(1, 1, 2))
        assert len(r) == 0
        with pytest.raises(SimulationError):
            satisfaction(r)
        with pytest.raises(SimulationError):
            backhaul_load(r)

    def test_achieved_rate_matches_duration(self):
        catalog, log, _, placement, links = random_instance(11, num_cells=3, fraction=0.3)
        r = simulate(log, catalog, placement, links)
        assert np.allclose(r.achieved_rates, r.sizes / (r.finishes - r.starts), rtol=1e-6)
        assert np.all(r.finishes > r.starts)


class TestAnalytic:
    def test_endpoints(self):
        catalog, log, ground, _, _ = random_instance(5, num_cells=3)
        full = CachePlacement.from_sets([range(len(catalog))] * 3, catalog)
        empty = CachePlacement.from_sets([()] * 3, catalog)
        assert analytic_backhaul_load(ground, full, catalog) == 0.0
        assert analytic_backhaul_load(ground, empty, catalog) == 100.0

    def test_single_uncached(self):
        catalog = Catalog.from_arrays([10], B)
        log = RequestLog([0.0], [0], 0.0, cells=[0])
        ground = build_rating_matrix(log, 1, 1)
        assert analytic_backhaul_load(ground, CachePlacement.from_sets([()], catalog), catalog) == 100.0

    @pytest.mark.parametrize("seed", range(50))
    def test_equals_simulated_load(self, seed):
        catalog, log, ground, placement, links = random_instance(seed)
        simulated = simulate(log, catalog, placement, links).backhaul_load_pct
        assert analytic_backhaul_load(ground, placement, catalog) == pytest.approx(simulated, rel=1e-9, abs=0)

    def test_never_increases_when_caching_more(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            catalog, _, ground, placement, _ = random_instance(seed)
            sets = [set(s) for s in placement.per_cell]
            before = analytic_backhaul_load(ground, placement, catalog)
            n = int(rng.integers(len(sets)))
            sets[n].add(int(rng.integers(len(catalog))))
            after = analytic_backhaul_load(ground, CachePlacement.from_sets(sets, catalog), catalog)
            assert after <= before

    def test_shape_mismatch(self):
        catalog, _, ground, _, _ = random_instance(1, num_cells=2)
        with pytest.raises(SimulationError):
            analytic_backhaul_load(ground, CachePlacement.from_sets([()] * 3, catalog), catalog)


@pytest.mark.parametrize("seed", range(15))
def test_segment_invariants(seed):
    catalog, log, _, placement, links = random_instance(seed, fraction=0.5)
    r = simulate(log, catalog, placement, links, record_segments=True)
    delivered = defaultdict(float)
    by_cell = defaultdict(list)
    for s in r.segments:
        delivered[s.index] += s.rate * (s.end - s.start)
        by_cell[s.cell].append(s)
        assert s.rate <= catalog.bitrates[log.contents[s.index]] * (1 + 1e-12)
        assert s.hit == r.hits[s.index]
    for i in range(len(r)):
        assert delivered[i] == pytest.approx(r.sizes[i], rel=1e-6)
    for cell_segments in by_cell.values():
        for t in {s.start for s in cell_segments}:
            live = [s for s in cell_segments if s.start <= t < s.end]
            assert sum(s.rate for s in live) <= links.wireless_per_cell + 1e-9
            assert sum(s.rate for s in live if not s.hit) <= links.backhaul_per_cell + 1e-9
    assert np.all(r.bytes_over_backhaul[r.hits] == 0)


def test_satisfaction_mostly_monotone_in_cache_growth(caplog):
    failures = []
    for seed in range(100):
        catalog, log, ground, _, links = random_instance(seed)
        rng = np.random.default_rng(seed)
        small = [set(np.flatnonzero(rng.random(len(catalog)) < 0.3).tolist()) for _ in range(links.num_cells)]
        large = [s | set(np.flatnonzero(rng.random(len(catalog)) < 0.3).tolist()) for s in small]
        a = simulate(log, catalog, CachePlacement.from_sets(small, catalog), links).satisfaction_pct
        b = simulate(log, catalog, CachePlacement.from_sets(large, catalog), links).satisfaction_pct
        if b < a:
            failures.append((seed, a, b))
    for seed, a, b in failures:
        logging.getLogger(__name__).warning("seed %d: satisfaction %.3f -> %.3f after caching more", seed, a, b)
    assert len(failures) <= 1


def test_shared_backhaul_pool():
    catalog = Catalog.from_arrays([int(L)], B)
    # lone miss at cell 0 can use the whole 2-cell pool
    log = RequestLog([0.0], [0], 0.0, cells=[0])
    empty = CachePlacement.from_sets([(), ()], catalog)
    r = simulate(log, catalog, empty, LinkConfig(2, 1 * MB, 7.5 * MB, shared_backhaul=True))
    assert r.finishes[0] == pytest.approx(L / (2 * MB), rel=1e-12)
    # two misses in different cells split the pool
    log2 = RequestLog([0.0, 0.0], [0, 0], 0.0, cells=[0, 1])
    r2 = simulate(log2, catalog, empty, LinkConfig(2, 1 * MB, 7.5 * MB, shared_backhaul=True))
    assert r2.finishes.tolist() == pytest.approx([L / MB] * 2, rel=1e-12)
    r3 = simulate(log2, catalog, empty, LinkConfig(2, 1 * MB, 7.5 * MB))
    assert r3.finishes.tolist() == pytest.approx([L / MB] * 2, rel=1e-12)


class TestErrors:
    catalog = Catalog.from_arrays([10], B)

    def test_unassigned(self):
        with pytest.raises(SimulationError):
            simulate(RequestLog([0.0], [0], 0.0), self.catalog,
                     CachePlacement.from_sets([()], self.catalog), LinkConfig(1, 1, 2))

    def test_cell_out_of_range(self):
        log = RequestLog([0.0], [0], 0.0, cells=[3])
        with pytest.raises(SimulationError):
            simulate(log, self.catalog, CachePlacement.from_sets([()] * 2, self.catalog), LinkConfig(2, 1, 2))

    def test_unknown_content(self):
        log = RequestLog([0.0], [4], 0.0, cells=[0])
        with pytest.raises(ValueError):
            simulate(log, self.catalog, CachePlacement.from_sets([()], self.catalog), LinkConfig(1, 1, 2))

    @pytest.mark.parametrize("args", [(0, 1, 2), (1, 0, 2), (1, 3, 2), (1, 1, -1)])
    def test_link_config(self, args):
        with pytest.raises(SimulationError):
            LinkConfig(*args)


def test_deterministic_and_csv():
    catalog, log, _, placement, links = random_instance(7, fraction=0.4)
    outs = []
    for _ in range(2):
        r = simulate(log, catalog, placement, links)
        buf = io.StringIO()
        r.write_requests_csv(buf)
        r.write_summary_csv(buf)
        outs.append(buf.getvalue())
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert lines[0] == "index,cell,content,hit,start,finish,achieved_rate,satisfied"
    assert len(lines) == len(log) + 3
    assert lines[-2] == "satisfaction_pct,backhaul_load_pct"
