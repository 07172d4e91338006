"""Five-stage data-parallel pipeline: collective cost model, steady-state
iteration timing, overlap properties and the sweep harness."""

from dataclasses import replace

import pytest

from oocsched.distsim import (Collective, DistConfig, DistConfigError,
                              allreduce_time, assign_groups, parse_dist_text,
                              scaling_sweep, simulate_distributed,
                              simulate_monolithic, sweep_csv)
from oocsched.plan import Strategy
from oocsched.planner import plan_model
from oocsched.simulator import simulate
from oocsched.zoo import (fc_chain_model, swap_timeline_fixture,
                          uniform_chain_hardware)


def weighted_fixture(features=64, capacity_blocks=3.0, ratio=2.0):
    g = fc_chain_model(num_layers=6, features=features, batch=2)
    hw = uniform_chain_hardware(g, swap_compute_ratio=ratio,
                                capacity_blocks=capacity_blocks)
    plan = plan_model(g, hw, strategy=Strategy.CAPACITY_RECOMPUTE,
                      solver="exhaustive")
    return plan, g, hw


class TestAllReduce:
    def cfg(self, p, bw=1e9, lat=0.0, collective=Collective.RING):
        return DistConfig(workers=p, collective=collective, net_bw=bw,
                          net_latency=lat)

    def test_single_worker_free(self):
        assert allreduce_time(1e9, self.cfg(1)) == 0.0

    def test_two_workers_ring(self):
        # 2*(P-1)/P = 1 at P=2: exactly one bandwidth term
        b = 8e6
        assert allreduce_time(b, self.cfg(2)) == pytest.approx(b / 1e9)

    def test_large_p_asymptote(self):
        b = 8e6
        limit = 2 * b / 1e9
        previous = 0.0
        for p in (2, 4, 8, 64, 1024):
            t = allreduce_time(b, self.cfg(p))
            assert previous <= t <= limit
            previous = t
        assert allreduce_time(b, self.cfg(4096)) == pytest.approx(limit, rel=1e-3)

    def test_latency_term(self):
        base = allreduce_time(1e6, self.cfg(4))
        with_lat = allreduce_time(1e6, self.cfg(4, lat=1e-4))
        assert with_lat == pytest.approx(base + 2 * 3 * 1e-4)

    def test_flat_collective(self):
        cfg = self.cfg(4, collective=Collective.FLAT, lat=1e-5)
        assert allreduce_time(1e6, cfg) == pytest.approx(3 * 1e6 / 1e9 + 1e-5)


class TestGroups:
    def test_default_one_group_per_block(self):
        assert assign_groups(5, 0) == [[1], [2], [3], [4], [5]]

    def test_merging_adjacent(self):
        assert assign_groups(6, 2) == [[1, 2, 3], [4, 5, 6]]
        assert assign_groups(5, 2) == [[1, 2, 3], [4, 5]]

    def test_monolithic(self):
        assert assign_groups(4, 1) == [[1, 2, 3, 4]]


class TestSingleWorker:
    def test_iteration_is_makespan_plus_host_tail(self):
        plan, g, hw = weighted_fixture()
        single = simulate(plan, g, hw).makespan
        cfg = DistConfig(workers=1)
        trace = simulate_distributed(plan, g, hw, cfg, iterations=3)
        assert trace.iteration_time >= single - 1e-9
        # swapped blocks pay gradient swap-out + host update + weight return
        swapped = plan.swapped_blocks()
        assert swapped, "fixture must swap something"
        assert trace.iteration_time > single
        assert trace.exposed_comm == 0.0
        assert not any(e.resource == "network" for e in trace.events)

    def test_steady_state_iterations_equal(self):
        plan, g, hw = weighted_fixture()
        trace = simulate_distributed(plan, g, hw, DistConfig(workers=1), iterations=5)
        assert len(trace.iteration_times) == 4
        for dt in trace.iteration_times[1:]:
            assert dt == pytest.approx(trace.iteration_times[0], abs=1e-9)


class TestOverlap:
    def test_fast_network_exchanges_fully_hidden(self):
        # zero-weight blocks: gradient exchange is free and fully hidden
        g, hw = swap_timeline_fixture()
        plan = plan_model(g, hw, strategy=Strategy.CAPACITY_RECOMPUTE,
                          solver="exhaustive")
        cfg = DistConfig(workers=2, net_bw=1e12)
        trace = simulate_distributed(plan, g, hw, cfg, iterations=3)
        assert trace.exposed_comm == 0.0

    def test_slow_network_exposes_all_exchanges(self):
        plan, g, hw = weighted_fixture()
        cfg = DistConfig(workers=2, net_bw=50.0)   # pathologically slow
        trace = simulate_distributed(plan, g, hw, cfg, iterations=3)
        total_comm = sum(allreduce_time(sum(
            b for b in [16384.0]), cfg) for _ in range(6))
        assert trace.exposed_comm == pytest.approx(total_comm, rel=0.05)
        assert trace.iteration_time >= total_comm

    def test_phased_never_slower_than_monolithic(self):
        plan, g, hw = weighted_fixture()
        for p in (2, 4):
            for bw in (1e7, 1e5, 2e3):
                cfg = DistConfig(workers=p, net_bw=bw, net_latency=0.0)
                phased = simulate_distributed(plan, g, hw, cfg, iterations=3)
                mono = simulate_monolithic(plan, g, hw, cfg, iterations=3)
                assert phased.iteration_time <= mono.iteration_time + 1e-9

    def test_exchange_order_is_reverse_block_order(self):
        plan, g, hw = weighted_fixture()
        cfg = DistConfig(workers=2, net_bw=1e5)
        trace = simulate_distributed(plan, g, hw, cfg, iterations=2)
        for it in (1, 2):
            groups = [e.group for e in sorted(trace.events, key=lambda e: e.t_start)
                      if e.action == "exchange" and e.iteration == it]
            assert groups == sorted(groups, reverse=True)


class TestBounds:
    def test_sandwich(self):
        plan, g, hw = weighted_fixture()
        for p in (2, 4):
            for bw in (1e7, 1e4):
                cfg = DistConfig(workers=p, net_bw=bw)
                trace = simulate_distributed(plan, g, hw, cfg, iterations=3)
                compute = sum(e.t_end - e.t_start for e in trace.events
                              if e.resource == "compute" and e.iteration == 3)
                comm = sum(e.t_end - e.t_start for e in trace.events
                           if e.action == "exchange" and e.iteration == 3)
                lower = max(compute, comm)
                netfree = simulate_distributed(plan, g, hw, cfg, iterations=3,
                                               _zero_network=True)
                upper = netfree.iteration_time + comm
                assert lower - 1e-9 <= trace.iteration_time <= upper + 1e-9

    def test_requires_two_iterations(self):
        plan, g, hw = weighted_fixture()
        with pytest.raises(DistConfigError):
            simulate_distributed(plan, g, hw, DistConfig(workers=2), iterations=1)


class TestScalingSweep:
    def test_throughput_non_decreasing_in_bandwidth(self):
        plan, g, hw = weighted_fixture()
        previous = 0.0
        for bw in (1e3, 1e4, 1e5, 1e6):
            cfg = DistConfig(workers=4, net_bw=bw)
            trace = simulate_distributed(plan, g, hw, cfg, iterations=3)
            tput = 4 * g.batch_size / trace.iteration_time
            assert tput >= previous - 1e-12
            previous = tput

    def test_sweep_rows(self):
        plan, g, hw = weighted_fixture()
        cfg = DistConfig(workers=1, net_bw=1e6)
        points = scaling_sweep(plan, g, hw, cfg, [1, 2, 4], iterations=2)
        assert [pt.workers for pt in points] == [1, 2, 4]
        assert all(pt.throughput == pt.workers * g.batch_size / pt.iteration_time
                   for pt in points)
        csv = sweep_csv(points)
        assert csv.splitlines()[0] == "P,iteration_time,throughput,exposed_comm"

    def test_halving_batch_halves_compute(self):
        g_full = fc_chain_model(num_layers=6, features=64, batch=4)
        g_half = fc_chain_model(num_layers=6, features=64, batch=2)
        hw = uniform_chain_hardware(g_full, swap_compute_ratio=2.0,
                                    capacity_blocks=3.0)
        from oocsched.planner import build_blocks, generate_schedule
        part = [(i, i) for i in range(1, 7)]

        def compute_total(graph):
            blocks, costs = build_blocks(part, graph, hw)
            plan = generate_schedule(blocks, graph, hw, Strategy.CAPACITY,
                                     costs=costs)
            trace = simulate(plan, graph, hw)
            return sum(e.t_end - e.t_start for e in trace.compute_events())

        assert compute_total(g_half) == pytest.approx(compute_total(g_full) / 2)


class TestConfigFile:
    def test_parse_round_trip(self):
        cfg = parse_dist_text(
            "workers = 8\ncollective = ring\nnet_bw = 12.5e9\n"
            "net_latency = 5e-6\ngroups = 0\n")
        assert cfg == DistConfig(workers=8, collective=Collective.RING,
                                 net_bw=12.5e9, net_latency=5e-6, groups=0)

    def test_rejects_unknown_key(self):
        with pytest.raises(DistConfigError):
            parse_dist_text("workers = 2\nwhatever = 1\n")

    def test_rejects_bad_values(self):
        with pytest.raises(DistConfigError):
            DistConfig(workers=0)
        with pytest.raises(DistConfigError):
            DistConfig(workers=2, net_bw=-1)
