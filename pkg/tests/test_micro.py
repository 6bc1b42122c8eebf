"""Car-following and lane-changing unit tests.

Derived expectations are frozen from independent scalar evaluation of the
acceleration law (and bisection for the equilibrium gap), not from the
implementation under test.
"""

import math

import numpy as np
import pytest

from hybridflow.micro import (AdjacentView, BehaviorContext, DesiredSpeedReached,
                              DriverParams, NonPositiveGap, Perception, Vehicle,
                              behavior_chain, equilibrium_gap, idm_acceleration,
                              mobil_decide, LEFT, RIGHT, STAY)

P = DriverParams()   # canonical car settings

INF = float("inf")


def scalar_idm(v, s, dv, p=P):
    """Independent re-statement of the acceleration law for cross-checking."""
    s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    inter = 0.0 if math.isinf(s) else (s_star / s) ** 2
    return p.a_max * (1.0 - (v / p.v0) ** p.delta - inter)


class TestIdm:
    def test_standing_free_road_gives_max_acceleration(self):
        assert idm_acceleration(0.0, INF, 0.0, P) == P.a_max

    def test_at_desired_speed_free_road_gives_zero(self):
        assert abs(idm_acceleration(P.v0, INF, 0.0, P)) < 1e-12

    def test_worked_example(self):
        # independent evaluation gives -0.457269 for v=20, s=50, dv=3
        expected = scalar_idm(20.0, 50.0, 3.0)
        assert abs(expected - (-0.4572690804521492)) < 1e-12
        assert abs(idm_acceleration(20.0, 50.0, 3.0, P) - expected) < 1e-3

    def test_rejects_non_positive_gap(self):
        with pytest.raises(NonPositiveGap):
            idm_acceleration(10.0, 0.0, 0.0, P)
        with pytest.raises(NonPositiveGap):
            idm_acceleration(10.0, -5.0, 0.0, P)

    def test_never_exceeds_max_acceleration(self):
        rng = np.random.default_rng(42)
        for _ in range(2000):
            v = rng.uniform(0, 40)
            s = rng.uniform(0.5, 500)
            dv = rng.uniform(-20, 20)
            assert idm_acceleration(v, s, dv, P) <= P.a_max + 1e-12

    def test_monotonicity_grid(self):
        speeds = np.linspace(0, 33, 12)
        gaps = np.linspace(2, 200, 12)
        dvs = np.linspace(-10, 10, 9)
        # non-increasing in v
        for s in gaps:
            for dv in dvs:
                acc = [idm_acceleration(v, s, dv, P) for v in speeds]
                assert all(a >= b - 1e-9 for a, b in zip(acc, acc[1:]))
        # non-decreasing in s
        for v in speeds:
            for dv in dvs:
                acc = [idm_acceleration(v, s, dv, P) for s in gaps]
                assert all(a <= b + 1e-9 for a, b in zip(acc, acc[1:]))
        # non-increasing in dv
        for v in speeds:
            for s in gaps:
                acc = [idm_acceleration(v, s, dv, P) for dv in dvs]
                assert all(a >= b - 1e-9 for a, b in zip(acc, acc[1:]))


class TestEquilibriumGap:
    def test_standstill_gap(self):
        assert equilibrium_gap(0.0, P) == P.s0

    def test_against_bisection(self):
        lo, hi = P.s0, 10_000.0
        for _ in range(200):
            mid = (lo + hi) / 2.0
            if idm_acceleration(20.0, mid, 0.0, P) > 0:
                hi = mid
            else:
                lo = mid
        assert abs(equilibrium_gap(20.0, P) - (lo + hi) / 2.0) < 1e-3
        assert abs(equilibrium_gap(20.0, P) - 36.4445) < 1e-3

    @pytest.mark.parametrize("v", [1.0, 5.0, 10.0, 25.0])
    def test_defining_property(self, v):
        assert abs(idm_acceleration(v, equilibrium_gap(v, P), 0.0, P)) < 1e-9

    def test_error_at_desired_speed(self):
        with pytest.raises(DesiredSpeedReached):
            equilibrium_gap(P.v0, P)


def perception(leader_gap=INF, leader_dv=0.0, left=None, right=None,
               follower_gap=INF, follower_speed=0.0, speed_limit=INF):
    return Perception(leader_gap=leader_gap, leader_dv=leader_dv,
                      speed_limit=speed_limit, left=left, right=right,
                      follower_gap=follower_gap, follower_speed=follower_speed)


class TestMobil:
    def test_no_adjacent_lanes_stays(self):
        assert mobil_decide(perception(leader_gap=10.0, leader_dv=5.0), 20.0, P) == STAY

    def test_slow_leader_empty_left_lane_changes_left(self):
        p0 = DriverParams(p=0.0)
        view = AdjacentView()   # empty lane
        decision = mobil_decide(perception(leader_gap=20.0, leader_dv=10.0,
                                           left=view), 20.0, p0)
        # gain is the free-road vs car-following difference, well above threshold
        gain = scalar_idm(20.0, INF, 0.0, p0) - scalar_idm(20.0, 20.0, 10.0, p0)
        assert gain > p0.da_th
        assert decision == LEFT

    def test_close_fast_follower_blocks_change(self):
        # follower 5 m behind at 30 m/s would need about -1008 m/s^2
        assert scalar_idm(30.0, 5.0, 10.0) < -P.b_safe
        view = AdjacentView(leader_gap=INF, leader_dv=0.0,
                            follower_gap=5.0, follower_speed=30.0)
        decision = mobil_decide(perception(leader_gap=20.0, leader_dv=10.0,
                                           left=view), 20.0, P)
        assert decision == STAY

    def test_tie_breaks_right(self):
        empty = AdjacentView()
        decision = mobil_decide(perception(leader_gap=15.0, leader_dv=8.0,
                                           left=empty, right=empty), 20.0,
                                DriverParams(p=0.0))
        assert decision == RIGHT

    def test_safety_property_randomized(self):
        """No accepted change may force the new follower below -b_safe."""
        rng = np.random.default_rng(7)
        accepted = 0
        for _ in range(3000):
            v = rng.uniform(0, 35)
            pc = perception(
                leader_gap=rng.uniform(1, 120), leader_dv=rng.uniform(-10, 15),
                follower_gap=rng.uniform(1, 120), follower_speed=rng.uniform(0, 35),
                left=AdjacentView(rng.uniform(1, 120), rng.uniform(-10, 15),
                                  rng.uniform(0.2, 120), rng.uniform(0, 35)),
                right=AdjacentView(rng.uniform(1, 120), rng.uniform(-10, 15),
                                   rng.uniform(0.2, 120), rng.uniform(0, 35)))
            decision = mobil_decide(pc, v, P)
            if decision == STAY:
                continue
            accepted += 1
            view = pc.left if decision == LEFT else pc.right
            follower_acc = scalar_idm(view.follower_speed, view.follower_gap,
                                      view.follower_speed - v)
            assert follower_acc >= -P.b_safe - 1e-9
        assert accepted > 20   # the scene generator does produce changes


class TestBehaviorChain:
    def vehicle(self, lane=0, speed=20.0):
        return Vehicle(id="t", road="r", lane=lane, position=100.0, speed=speed)

    def test_free_road_acceleration_only(self):
        ctx = BehaviorContext(lane_count=2, permitted_lanes=None)
        intent = behavior_chain(self.vehicle(), perception(), ctx)
        assert intent.lane_change == STAY
        assert abs(intent.acceleration - scalar_idm(20.0, INF, 0.0)) < 1e-12
        assert intent.reason == "acceleration"

    def test_mandatory_change_toward_exit_lane(self):
        # must reach the rightmost lane before the node; right lane is free
        ctx = BehaviorContext(lane_count=2, permitted_lanes=frozenset({1}),
                              distance_to_node=100.0)
        intent = behavior_chain(self.vehicle(lane=0),
                                perception(right=AdjacentView()), ctx)
        assert intent.lane_change == RIGHT
        assert intent.reason == "navigation"

    def test_mandatory_change_blocked_by_safety(self):
        blocked = AdjacentView(leader_gap=INF, leader_dv=0.0,
                               follower_gap=3.0, follower_speed=30.0)
        ctx = BehaviorContext(lane_count=2, permitted_lanes=frozenset({1}),
                              distance_to_node=100.0)
        intent = behavior_chain(self.vehicle(lane=0),
                                perception(right=blocked), ctx)
        assert intent.lane_change == STAY
        assert intent.reason == "navigation_blocked"
        # held back against the node as a standing obstacle
        assert intent.acceleration <= scalar_idm(20.0, 100.0, 20.0) + 1e-9

    def test_stop_sign_deceleration(self):
        # standing virtual leader 30 m ahead at v=15
        intent = behavior_chain(self.vehicle(speed=15.0),
                                perception(leader_gap=30.0, leader_dv=15.0),
                                BehaviorContext(lane_count=1))
        assert abs(intent.acceleration - scalar_idm(15.0, 30.0, 15.0)) < 1e-12

    def test_speed_limit_caps_desired_speed(self):
        intent = behavior_chain(self.vehicle(speed=20.0),
                                perception(speed_limit=20.0),
                                BehaviorContext(lane_count=1))
        assert abs(intent.acceleration) < 1e-9   # at the capped desired speed

    def test_exactly_one_influence(self):
        ctx = BehaviorContext(lane_count=3, permitted_lanes=None)
        pc = perception(leader_gap=12.0, leader_dv=8.0,
                        left=AdjacentView(), right=AdjacentView())
        intent = behavior_chain(self.vehicle(lane=1), pc, ctx)
        assert intent.lane_change in (LEFT, STAY, RIGHT)
        assert math.isfinite(intent.acceleration)


class TestDriverParams:
    def test_rejects_invalid(self):
        with pytest.raises(ValueError):
            DriverParams(v0=-1)
        with pytest.raises(ValueError):
            DriverParams(p=1.5)
        with pytest.raises(ValueError):
            DriverParams(delta=0.5)
