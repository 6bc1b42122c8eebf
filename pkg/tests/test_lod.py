"""Jam detection counters, structural operations and transition planning."""

import numpy as np
import pytest

from hybridflow.hybrid import MACRO, BoundaryInterface, Cluster
from hybridflow.lod import (LodController, LodPolicy, NotAdjacent,
                            RepresentationMismatch, TooSmall, merge_clusters,
                            split_cluster)
from hybridflow.macro import FundamentalDiagram, MacroSegment
from hybridflow.micro import Vehicle
from hybridflow.network import Chain

FD = FundamentalDiagram()
POLICY = LodPolicy()

CHAIN = Chain(id="chain0", roads=("r",), offsets=(0.0,), length=1000.0, cyclic=False)


def macro_cluster(cid="m", start=0.0, end=1000.0, rho=0.0):
    n = int((end - start) / 100.0)
    cluster = Cluster(id=cid, chain_id="chain0", start=start, end=end,
                      representation=MACRO)
    cluster.segment = MacroSegment(dx=[100.0] * n, lanes=[1.0] * n,
                                   rho=np.full(n, rho), fd=FD)
    cluster.cell_starts = start + np.arange(n) * 100.0
    return cluster


def micro_cluster_with(cid, start, end, positions):
    cluster = Cluster(id=cid, chain_id="chain0", start=start, end=end)
    for i, pos in enumerate(positions):
        veh = Vehicle(id=f"{cid}_v{i}", road="r", lane=0, position=pos, speed=20.0)
        cluster.vehicles[veh.id] = veh
    return cluster


def observe_n(controller, clusters, ratios, cell_ratios, steps, start=0):
    for k in range(steps):
        controller.observe(clusters, ratios, cell_ratios, start + k)


class TestPolicy:
    def test_threshold_ordering_enforced(self):
        with pytest.raises(ValueError):
            LodPolicy(theta_down=0.9, theta_up=0.8)
        with pytest.raises(ValueError):
            LodPolicy(persistence=0)


class TestDetectJam:
    def test_free_flow_never_flags(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.01)
        ratios = {cluster.id: 1.0}
        cells = {cluster.id: np.ones(10)}
        observe_n(ctl, [cluster], ratios, cells, 100)
        assert not ctl.detect_jam(cluster).any()

    def test_flag_appears_exactly_at_persistence(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.12)
        # ratio for rho=0.12 is about 0.0385, well under theta_down
        cells = {cluster.id: np.full(10, 0.0385)}
        ratios = {cluster.id: 0.0385}
        for k in range(POLICY.persistence - 1):
            ctl.observe([cluster], ratios, cells, k)
            assert not ctl.detect_jam(cluster).any(), f"flagged early at {k}"
        ctl.observe([cluster], ratios, cells, POLICY.persistence - 1)
        assert ctl.detect_jam(cluster).all()

    def test_oscillating_ratio_never_flags(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.05)
        for k in range(200):
            ratio = 0.2 if k % 2 == 0 else 0.9
            ctl.observe([cluster], {cluster.id: ratio},
                        {cluster.id: np.full(10, ratio)}, k)
            assert not ctl.detect_jam(cluster).any()

    def test_counters_keyed_by_position_survive_splits(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.12)
        cells = {cluster.id: np.full(10, 0.0385)}
        observe_n(ctl, [cluster], {cluster.id: 0.0385}, cells, POLICY.persistence)
        left, right = split_cluster(cluster, 500.0, CHAIN)
        assert ctl.detect_jam(left).all()
        assert ctl.detect_jam(right).all()


class TestSplit:
    def test_split_empty_macro(self):
        cluster = macro_cluster()
        left, right = split_cluster(cluster, 500.0, CHAIN)
        assert (left.start, left.end) == (0.0, 500.0)
        assert (right.start, right.end) == (500.0, 1000.0)
        assert len(left.segment) == 5 and len(right.segment) == 5
        assert left.mass() + right.mass() == 0.0

    def test_split_micro_partitions_vehicles(self):
        positions = [50, 150, 250, 350, 550, 650, 750, 850, 900, 950]
        cluster = micro_cluster_with("c", 0.0, 1000.0, positions)
        left, right = split_cluster(cluster, 400.0, CHAIN)
        assert len(left.vehicles) == 4
        assert len(right.vehicles) == 6

    def test_macro_split_requires_cell_edge(self):
        cluster = macro_cluster()
        with pytest.raises(ValueError):
            split_cluster(cluster, 523.0, CHAIN)

    def test_too_small_rejected(self):
        cluster = macro_cluster()
        with pytest.raises(TooSmall):
            split_cluster(cluster, 100.0, CHAIN, min_cluster_length=200.0)

    def test_mass_preserved(self):
        cluster = macro_cluster(rho=0.07)
        before = cluster.mass()
        left, right = split_cluster(cluster, 300.0, CHAIN)
        assert left.mass() + right.mass() == pytest.approx(before, abs=1e-12)


class TestMerge:
    def shared(self, up="a", down="b", position=500.0, lanes=1):
        return BoundaryInterface(id="i", chain_id="chain0", position=position,
                                 upstream_id=up, downstream_id=down, lanes=lanes)

    def test_split_then_merge_macro_is_identity(self):
        cluster = macro_cluster(rho=0.06)
        left, right = split_cluster(cluster, 500.0, CHAIN)
        merged, homeless, fraction = merge_clusters(
            left, right, self.shared(left.id, right.id), CHAIN, lambda: "m2")
        assert merged.mass() == pytest.approx(cluster.mass(), abs=1e-12)
        assert np.allclose(merged.segment.rho, cluster.segment.rho)
        assert homeless == [] and fraction == 0.0

    def test_merge_micro_union_ordered(self):
        a = micro_cluster_with("a", 0.0, 500.0, [100, 200])
        b = micro_cluster_with("b", 500.0, 1000.0, [600, 700])
        merged, homeless, fraction = merge_clusters(
            a, b, self.shared("a", "b"), CHAIN, lambda: "m")
        assert len(merged.vehicles) == 4
        ordered = sorted(merged.vehicles.values(), key=lambda v: v.position)
        assert [v.position for v in ordered] == [100, 200, 600, 700]

    def test_merge_requires_adjacency(self):
        a = micro_cluster_with("a", 0.0, 400.0, [])
        b = micro_cluster_with("b", 500.0, 1000.0, [])
        with pytest.raises(NotAdjacent):
            merge_clusters(a, b, self.shared(), CHAIN, lambda: "m")

    def test_merge_requires_same_representation(self):
        a = micro_cluster_with("a", 0.0, 500.0, [])
        b = macro_cluster("b", 500.0, 1000.0)
        with pytest.raises(RepresentationMismatch):
            merge_clusters(a, b, self.shared(), CHAIN, lambda: "m")

    def test_macro_merge_folds_interface_mass_into_boundary_cell(self):
        a = macro_cluster("a", 0.0, 500.0, rho=0.02)
        b = macro_cluster("b", 500.0, 1000.0, rho=0.02)
        shared = self.shared("a", "b")
        shared.carryover[:] = [0.75]
        shared.pending.append(Vehicle(id="q", road="r", lane=0,
                                      position=500.0, speed=0.0))
        before = a.mass() + b.mass() + shared.mass()
        merged, homeless, fraction = merge_clusters(a, b, shared, CHAIN, lambda: "m")
        assert merged.mass() + fraction == pytest.approx(before, abs=1e-12)
        assert homeless == []


class TestPlan:
    def plan(self, ctl, clusters, interfaces=(), step=100, micro_count=0,
             capable=lambda c: True):
        return ctl.plan(clusters, list(interfaces), step, micro_count, capable)

    def test_steady_free_flow_is_empty_plan(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.01)
        observe_n(ctl, [cluster], {cluster.id: 1.0},
                  {cluster.id: np.ones(10)}, 30)
        assert self.plan(ctl, [cluster]) == []

    def test_jammed_cell_yields_split_and_refine(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.01)
        ratios = np.ones(10)
        ratios[5] = 0.1   # cell [500, 600) jammed
        observe_n(ctl, [cluster], {cluster.id: 0.9},
                  {cluster.id: ratios}, POLICY.persistence)
        actions = self.plan(ctl, [cluster], step=POLICY.persistence)
        kinds = [a.kind for a in actions]
        assert kinds == ["split", "split", "refine"]
        # flagged cell padded by one on each side
        assert actions[0].position == pytest.approx(400.0)
        assert actions[1].position == pytest.approx(700.0)
        assert all(a.trigger == "jam" for a in actions)

    def test_cooldown_suppresses_refine(self):
        ctl = LodController(POLICY)
        cluster = macro_cluster(rho=0.01)
        ratios = np.full(10, 0.1)
        ctl.mark_switch(cluster.id, step=0, refined=False)
        observe_n(ctl, [cluster], {cluster.id: 0.1},
                  {cluster.id: ratios}, POLICY.persistence)
        assert self.plan(ctl, [cluster], step=POLICY.persistence) == []
        late = self.plan(ctl, [cluster], step=POLICY.cooldown + 1)
        assert late and late[-1].kind == "refine"

    def test_budget_zero_coarsens_all_micro(self):
        policy = LodPolicy(micro_vehicle_budget=0)
        ctl = LodController(policy)
        a = micro_cluster_with("a", 0.0, 500.0, [100, 200])
        b = micro_cluster_with("b", 500.0, 1000.0, [600])
        observe_n(ctl, [a, b], {"a": 1.0, "b": 1.0}, {}, 3)
        actions = self.plan(ctl, [a, b], step=3, micro_count=3)
        assert [a.kind for a in actions] == ["coarsen", "coarsen"]
        assert all(a.trigger == "budget" for a in actions)

    def test_budget_respects_capability_and_cooldown(self):
        policy = LodPolicy(micro_vehicle_budget=0)
        ctl = LodController(policy)
        a = micro_cluster_with("a", 0.0, 500.0, [100])
        ctl.mark_switch("a", step=0, refined=True)
        actions = self.plan(ctl, [a], step=3, micro_count=1)
        assert actions == []   # still cooling down

    def test_recovery_coarsens_refined_cluster_once(self):
        ctl = LodController(POLICY)
        a = micro_cluster_with("a", 0.0, 500.0, [100])
        ctl.mark_switch("a", step=0, refined=True)
        start = POLICY.cooldown + 1
        observe_n(ctl, [a], {"a": 1.0}, {}, POLICY.persistence, start=start)
        actions = self.plan(ctl, [a], step=start + POLICY.persistence)
        assert [x.kind for x in actions] == ["coarsen"]
        assert actions[0].trigger == "recovery"

    def test_recovered_neighbors_merge(self):
        ctl = LodController(POLICY)
        a = macro_cluster("a", 0.0, 500.0, rho=0.005)
        b = macro_cluster("b", 500.0, 1000.0, rho=0.005)
        itf = BoundaryInterface(id="i", chain_id="chain0", position=500.0,
                                upstream_id="a", downstream_id="b", lanes=1)
        ratios = {"a": 1.0, "b": 1.0}
        cells = {"a": np.ones(5), "b": np.ones(5)}
        observe_n(ctl, [a, b], ratios, cells, POLICY.persistence)
        actions = self.plan(ctl, [a, b], [itf], step=POLICY.persistence)
        assert [x.kind for x in actions] == ["merge"]
        assert actions[0].position == pytest.approx(500.0)

    def test_plan_is_deterministic(self):
        def build():
            ctl = LodController(POLICY)
            cluster = macro_cluster(rho=0.01)
            ratios = np.ones(10)
            ratios[3] = 0.1
            observe_n(ctl, [cluster], {cluster.id: 0.9},
                      {cluster.id: ratios}, POLICY.persistence)
            return self.plan(ctl, [cluster], step=POLICY.persistence)
        assert build() == build()
