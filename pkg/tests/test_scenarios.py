"""Instance generators, disruptions, and the recovery experiment driver."""
import numpy as np
import pytest

import linemarket as lm

import instances


class TestGridGeneration:
    def test_paper_scale_dimensions(self):
        spec = lm.GridSpec(rows=7, cols=120, pools=1, lines_per_pool=1, seed=0)
        net, _ = lm.generate_grid(spec)
        assert len(net.nodes) == 840
        assert len(net.edges) == 1553  # 7*119 horizontal + 6*120 vertical

    def test_smallest_grid(self):
        spec = lm.GridSpec(
            rows=2, cols=2, pools=1, lines_per_pool=1,
            shared_first_edge=((0, 0), (1, 0)), min_line_len=2, seed=0,
        )
        net, _ = lm.generate_grid(spec)
        assert len(net.nodes) == 4
        assert len(net.edges) == 4

    def test_deterministic_for_fixed_seed(self):
        spec = instances.grid_spec(3, 2)
        a = lm.network_to_json(*lm.generate_grid(spec))
        b = lm.network_to_json(*lm.generate_grid(spec))
        assert a == b

    def test_lines_share_first_edge_and_meet_min_length(self):
        spec = instances.grid_spec(1, 2)
        net, ps = lm.generate_grid(spec)
        assert lm.validate_network(net, ps) == []
        first = "0,3->1,3"
        for key in ps.pairs():
            line = ps.lines[key]
            assert line.edge_ids[0] == first
            assert len(line) >= spec.min_line_len

    def test_capacities_within_range(self):
        spec = instances.grid_spec(2, 1)
        net, _ = lm.generate_grid(spec)
        caps = net.capacity_vector()
        assert caps.min() >= 10.0 and caps.max() < 110.0

    def test_extra_pool_leaves_earlier_draws_alone(self):
        # capacities then pool0 lines are drawn before pool1 ever exists
        net1, ps1 = lm.generate_grid(instances.grid_spec(4, 1))
        net2, ps2 = lm.generate_grid(instances.grid_spec(4, 2))
        np.testing.assert_array_equal(net1.capacity_vector(), net2.capacity_vector())
        for lop in ps1.lops_in("pool0"):
            assert ps1.line(lop, "pool0") == ps2.line(lop, "pool0")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            lm.GridSpec(rows=1, cols=5, pools=1, lines_per_pool=1)
        with pytest.raises(ValueError):
            lm.GridSpec(rows=3, cols=3, pools=1, lines_per_pool=1,
                        shared_first_edge=((0, 0), (2, 0)))
        with pytest.raises(ValueError):
            lm.GridSpec(rows=3, cols=3, pools=1, lines_per_pool=1,
                        capacity_range=(5.0, 5.0))


class TestPerturbPool:
    def setup_method(self):
        self.spec = instances.grid_spec(0, 1)
        _, self.pools = lm.generate_grid(self.spec)

    def count_changed(self, other):
        return sum(
            1 for key in self.pools.pairs()
            if other.lines[key] != self.pools.lines[key]
        )

    def test_zero_fraction_is_identity(self):
        out = lm.perturb_pool(self.spec, self.pools, 0.0, seed=9)
        assert self.count_changed(out) == 0

    def test_tenth_of_ten_lines_changes_exactly_one(self):
        out = lm.perturb_pool(self.spec, self.pools, 0.1, seed=9)
        assert self.count_changed(out) == 1

    def test_full_fraction_resamples_every_line(self):
        out = lm.perturb_pool(self.spec, self.pools, 1.0, seed=9)
        assert self.count_changed(out) == len(self.pools.pairs())

    def test_deterministic(self):
        a = lm.perturb_pool(self.spec, self.pools, 0.5, seed=4)
        b = lm.perturb_pool(self.spec, self.pools, 0.5, seed=4)
        assert a.lines == b.lines

    def test_fraction_domain(self):
        with pytest.raises(ValueError):
            lm.perturb_pool(self.spec, self.pools, 1.5, seed=0)


def test_uniform_utilities():
    _, ps = lm.generate_grid(instances.grid_spec(0, 2))
    table = lm.uniform_utilities(ps, 5.0, 15.0, seed=42)
    table.validate_against(ps)
    coeffs = [s.coefficient for s in table.entries.values()]
    assert min(coeffs) >= 5.0 and max(coeffs) < 15.0
    again = lm.uniform_utilities(ps, 5.0, 15.0, seed=42)
    assert again.to_json() == table.to_json()
    with pytest.raises(ValueError):
        lm.uniform_utilities(ps, -1.0, 2.0, seed=0)


def test_pool_scaled_utilities():
    _, ps = lm.generate_grid(instances.grid_spec(0, 2))
    table = lm.pool_scaled_utilities(ps, 10.0, [1.0, 0.5])
    for lop in ps.lops_in("pool0"):
        assert table.spec(lop, "pool0").coefficient == 10.0
        assert table.spec(lop, "pool1").coefficient == 5.0
    with pytest.raises(ValueError):
        lm.pool_scaled_utilities(ps, 10.0, [1.0])


def test_child_seed_is_stable_and_tag_sensitive():
    assert lm.scenarios.child_seed(7, "grid") == lm.scenarios.child_seed(7, "grid")
    assert lm.scenarios.child_seed(7, "grid") != lm.scenarios.child_seed(7, "disruption")
    assert lm.scenarios.child_seed(7, "grid") != lm.scenarios.child_seed(8, "grid")


def test_disruption_spec_validation():
    with pytest.raises(ValueError):
        lm.DisruptionSpec("explode", 1, 0.1)
    with pytest.raises(ValueError):
        lm.DisruptionSpec("reduce", 0, 0.1)
    with pytest.raises(ValueError):
        lm.DisruptionSpec("reduce", 1, 1.5)
    with pytest.raises(ValueError):
        lm.DisruptionSpec("reduce", 1, -0.1)


class TestCongestedEdges:
    def test_saturated_edge_is_congested(self):
        net, pools, table = instances.single_edge()
        res = lm.run_mechanism(net, pools, table)
        assert lm.congested_edges(res.state) == {"e1"}

    def test_threshold_filters_low_prices(self):
        state = lm.OuterState(
            shares=lm.ProportionVector(("k0",), np.array([1.0])),
            pool_states={
                "k0": lm.PoolMarketState(
                    "k0", ("e1", "e2"), ("lop0",),
                    np.array([0.01, 0.5]), np.array([1.0]), np.array([1.0]), 1.0,
                )
            },
            pool_costs={"k0": 0.0},
            cost_level=0.0,
            outer_iter=0,
        )
        assert lm.congested_edges(state) == {"e2"}
        assert lm.congested_edges(state, threshold=0.6) == set()

    def test_only_the_bottleneck_prices(self):
        net = lm.Network(
            ["u", "v", "w"],
            [lm.Edge("e1", "u", "v", 4.0), lm.Edge("e2", "v", "w", 50.0)],
        )
        pools = lm.PoolSystem(["k0"], {("lop0", "k0"): lm.Line(("e1", "e2"))})
        table = lm.UtilityTable({("lop0", "k0"): lm.UtilitySpec(2.0)})
        res = lm.run_mechanism(net, pools, table)
        assert res.converged
        assert lm.congested_edges(res.state) == {"e1"}


class TestApplyDisruption:
    def net3(self):
        return lm.Network(
            ["a", "b", "c", "d"],
            [
                lm.Edge("e1", "a", "b", 10.0),
                lm.Edge("e2", "b", "c", 10.0),
                lm.Edge("e3", "c", "d", 7.0),
            ],
        )

    def test_reduce(self):
        out = lm.apply_disruption(self.net3(), lm.DisruptionSpec("reduce", 1, 0.1), ["e1"])
        assert out.capacity("e1") == pytest.approx(9.0)

    def test_increase(self):
        out = lm.apply_disruption(self.net3(), lm.DisruptionSpec("increase", 1, 0.5), ["e1"])
        assert out.capacity("e1") == pytest.approx(15.0)

    def test_mixed_hits_disjoint_edges(self):
        out = lm.apply_disruption(
            self.net3(), lm.DisruptionSpec("mixed", 1, 0.1), ["e1", "e2"]
        )
        caps = sorted([out.capacity("e1"), out.capacity("e2")])
        np.testing.assert_allclose(caps, [9.0, 11.0])

    def test_untouched_edges_keep_exact_capacity(self):
        net = self.net3()
        out = lm.apply_disruption(net, lm.DisruptionSpec("reduce", 1, 0.5, seed=3), ["e1", "e2"])
        changed = [e for e in ("e1", "e2") if out.capacity(e) != net.capacity(e)]
        assert len(changed) == 1
        assert out.capacity("e3") == net.capacity("e3")

    def test_insufficient_congestion_rejected(self):
        with pytest.raises(ValueError):
            lm.apply_disruption(self.net3(), lm.DisruptionSpec("mixed", 1, 0.1), ["e1"])

    def test_original_network_untouched(self):
        net = self.net3()
        lm.apply_disruption(net, lm.DisruptionSpec("reduce", 1, 0.9), ["e1"])
        assert net.capacity("e1") == 10.0

    def test_deterministic_choice(self):
        spec = lm.DisruptionSpec("reduce", 1, 0.5, seed=11)
        a = lm.apply_disruption(self.net3(), spec, ["e1", "e2", "e3"])
        b = lm.apply_disruption(self.net3(), spec, ["e1", "e2", "e3"])
        np.testing.assert_array_equal(a.capacity_vector(), b.capacity_vector())


def test_disruption_objective_monotonicity():
    """Growing capacity can only help the optimum, shrinking only hurt."""
    net, pools, table = instances.two_lops_one_edge()
    base = lm.solve_fixed_f(net, pools, table, {"k0": 1.0}).objective
    up = lm.apply_disruption(net, lm.DisruptionSpec("increase", 1, 0.5), ["e1"])
    down = lm.apply_disruption(net, lm.DisruptionSpec("reduce", 1, 0.5), ["e1"])
    assert lm.solve_fixed_f(up, pools, table, {"k0": 1.0}).objective >= base - 1e-9
    assert lm.solve_fixed_f(down, pools, table, {"k0": 1.0}).objective <= base + 1e-9


class TestRecoveryExperiment:
    def test_null_disruption_keeps_warm_fixed_point(self):
        net, pools, table = instances.single_edge()
        dis = lm.DisruptionSpec("reduce", 1, 0.0, seed=2)
        out = lm.run_recovery_experiment(net, pools, table, dis, instance="null")
        assert out.warm.status == "converged"
        assert out.warm.f_updates == 0
        assert all(v <= 1 for v in out.warm.price_updates.values())
        assert out.warm.bid_updates == 0

    def test_mode_selection(self):
        net, pools, table = instances.single_edge()
        dis = lm.DisruptionSpec("reduce", 1, 0.1, seed=2)
        out = lm.run_recovery_experiment(net, pools, table, dis, modes=("warm",))
        assert out.cold is None and out.cold_result is None
        assert [r.mode for r in out.records()] == ["warm"]
        assert out.warm.instance == "instance"

    def test_mode_validation(self):
        net, pools, table = instances.single_edge()
        dis = lm.DisruptionSpec("reduce", 1, 0.1)
        with pytest.raises(ValueError):
            lm.run_recovery_experiment(net, pools, table, dis, modes=())
        with pytest.raises(ValueError):
            lm.run_recovery_experiment(net, pools, table, dis, modes=("tepid",))

    def test_precomputed_baseline_is_reused(self):
        net, pools, table = instances.single_edge()
        base = lm.run_mechanism(net, pools, table)
        dis = lm.DisruptionSpec("reduce", 1, 0.2, seed=2)
        out = lm.run_recovery_experiment(
            net, pools, table, dis, baseline=base, modes=("warm",)
        )
        assert out.baseline is base
        assert out.warm.status == "converged"
        assert out.warm.total_price_updates == sum(out.warm.price_updates.values())

    def test_disrupted_capacity_recorded(self):
        net, pools, table = instances.single_edge()
        dis = lm.DisruptionSpec("reduce", 1, 0.5, seed=2)
        out = lm.run_recovery_experiment(net, pools, table, dis)
        assert out.disrupted_net.capacity("e1") == pytest.approx(2.0)
        assert net.capacity("e1") == 4.0
