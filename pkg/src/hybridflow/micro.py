"""Microscopic vehicle dynamics.

Car following uses the intelligent-driver acceleration law; lane changing
uses an incentive/safety trade-off weighted by a politeness factor.  A
three-part behavior chain arbitrates between mandatory navigation changes,
opportunistic overtaking, and plain longitudinal control.

Conventions: `position` is the front bumper, measured from the road start.
A gap is always bumper-to-bumper (leader rear minus own front).  All
functions here are pure; state mutation is the engine's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

INF = float("inf")

#: direction encoding for lane changes (lane 0 is leftmost)
LEFT, STAY, RIGHT = -1, 0, 1


class NonPositiveGap(ValueError):
    """Car-following evaluated with a vanishing or negative gap."""


class DesiredSpeedReached(ValueError):
    """No finite equilibrium gap exists at or above the desired speed."""


@dataclass(frozen=True)
class DriverParams:
    """Driving-style parameters shared by car following and lane changing.

    v0      desired speed, m/s
    T       desired time headway, s
    a_max   maximum acceleration, m/s^2
    b       comfortable deceleration, m/s^2
    delta   acceleration exponent
    s0      minimum bumper-to-bumper gap, m
    p       politeness factor in [0, 1]
    da_th   lane-change incentive threshold, m/s^2
    b_safe  maximum deceleration a change may impose on the new follower, m/s^2
    """

    v0: float = 33.33
    T: float = 1.6
    a_max: float = 0.73
    b: float = 1.67
    delta: float = 4.0
    s0: float = 2.0
    p: float = 0.3
    da_th: float = 0.1
    b_safe: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.T, self.a_max, self.b, self.s0, self.b_safe) <= 0:
            raise ValueError("v0, T, a_max, b, s0 and b_safe must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if not 0 <= self.p <= 1:
            raise ValueError("politeness must lie in [0, 1]")
        if self.da_th < 0:
            raise ValueError("incentive threshold must be >= 0")


@dataclass
class Vehicle:
    """Microscopic particle: kinematic state plus driving style and route."""

    id: str
    road: str
    lane: int
    position: float            # m, front bumper from road start
    speed: float               # m/s
    length: float = 4.0
    params: DriverParams = field(default_factory=DriverParams)
    route: object = None       # network.Route or None (follow unique turns)
    # memorized from the previous step, for diagnostics
    prev_leader_gap: float = INF
    # stop signs already served, as (road id, sign position) pairs
    satisfied_stops: set = field(default_factory=set)

    @property
    def rear(self) -> float:
        return self.position - self.length


@dataclass(frozen=True)
class AdjacentView:
    """What the driver sees in one neighboring lane."""

    leader_gap: float = INF        # to prospective leader, bumper-to-bumper
    leader_dv: float = 0.0         # own speed minus prospective leader's
    follower_gap: float = INF      # prospective follower's front to own rear
    follower_speed: float = 0.0


@dataclass(frozen=True)
class Perception:
    """One vehicle's view of its surroundings at a consistent instant."""

    leader_gap: float = INF
    leader_dv: float = 0.0
    speed_limit: float = INF       # effective limit at the current position
    left: AdjacentView | None = None
    right: AdjacentView | None = None
    follower_gap: float = INF      # same-lane follower, for politeness terms
    follower_speed: float = 0.0


# ---------------------------------------------------------------------------
# Longitudinal model
# ---------------------------------------------------------------------------

def desired_gap(v: float, dv: float, params: DriverParams) -> float:
    """Dynamical desired gap, floored at the standstill gap s0."""
    dynamic = v * params.T + v * dv / (2.0 * math.sqrt(params.a_max * params.b))
    return params.s0 + max(0.0, dynamic)


def idm_acceleration(v: float, s: float, dv: float, params: DriverParams) -> float:
    """Acceleration from own speed v, gap s and closing speed dv.

    s may be +inf (free road).  Raises NonPositiveGap for s <= 0: overlaps
    must be resolved by the caller, they are not a driving situation.
    """
    if v < 0:
        raise ValueError(f"speed must be non-negative, got {v}")
    if s <= 0:
        raise NonPositiveGap(f"gap must be positive, got {s}")
    free = (v / params.v0) ** params.delta
    interaction = 0.0 if math.isinf(s) else (desired_gap(v, dv, params) / s) ** 2
    return params.a_max * (1.0 - free - interaction)


def equilibrium_gap(v: float, params: DriverParams) -> float:
    """Gap at which a follower at speed v exactly holds its speed.

    Closed form of idm_acceleration(v, s, 0) = 0; only defined below the
    desired speed."""
    if v >= params.v0:
        raise DesiredSpeedReached(f"no equilibrium gap at v={v} >= v0={params.v0}")
    return desired_gap(v, 0.0, params) / math.sqrt(1.0 - (v / params.v0) ** params.delta)


# ---------------------------------------------------------------------------
# Lane changing
# ---------------------------------------------------------------------------

def _follower_accel_after(view: AdjacentView, v_self: float,
                          params: DriverParams) -> float:
    """New follower's acceleration if we moved in front of it."""
    if view.follower_gap <= 0:
        return -INF
    return idm_acceleration(view.follower_speed, view.follower_gap,
                            view.follower_speed - v_self, params)


def is_change_safe(view: AdjacentView | None, v_self: float,
                   params: DriverParams) -> bool:
    """Safety criterion: target slot exists and the prospective follower is
    not forced below -b_safe."""
    if view is None or view.leader_gap <= 0 or view.follower_gap <= 0:
        return False
    return _follower_accel_after(view, v_self, params) >= -params.b_safe


def _incentive(perception: Perception, view: AdjacentView, v: float,
               own_length: float, params: DriverParams) -> float:
    """Acceleration gain of a change, politeness-weighted over neighbors."""
    a_self = idm_acceleration(v, perception.leader_gap, perception.leader_dv, params)
    a_self_new = idm_acceleration(v, view.leader_gap, view.leader_dv, params)

    # prospective follower: now trails the target-lane leader, would trail us
    a_new = _follower_accel_after(view, v, params)
    gap_now = view.follower_gap + own_length + view.leader_gap
    dv_now = view.follower_speed - (v - view.leader_dv) if math.isfinite(view.leader_gap) else 0.0
    a_new_now = idm_acceleration(view.follower_speed, gap_now, dv_now, params) \
        if view.follower_gap > 0 else 0.0

    # old follower: trails us now, would trail our current leader
    if perception.follower_gap <= 0 or math.isinf(perception.follower_gap):
        a_old_now = a_old_after = 0.0
    else:
        a_old_now = idm_acceleration(perception.follower_speed, perception.follower_gap,
                                     perception.follower_speed - v, params)
        gap_after = perception.follower_gap + own_length + perception.leader_gap
        dv_after = (perception.follower_speed - (v - perception.leader_dv)
                    if math.isfinite(perception.leader_gap) else 0.0)
        a_old_after = idm_acceleration(perception.follower_speed, gap_after, dv_after, params)

    return (a_self_new - a_self
            + params.p * ((a_new - a_new_now) + (a_old_after - a_old_now)))


def mobil_decide(perception: Perception, v: float, params: DriverParams,
                 own_length: float = 4.0) -> int:
    """Pick LEFT, RIGHT or STAY.

    A side is eligible when the safety criterion holds and the incentive
    exceeds the threshold; the larger incentive wins, ties go right."""
    candidates: list[tuple[float, int]] = []
    for direction, view in ((RIGHT, perception.right), (LEFT, perception.left)):
        if not is_change_safe(view, v, params):
            continue
        gain = _incentive(perception, view, v, own_length, params)
        if gain > params.da_th:
            candidates.append((gain, direction))
    if not candidates:
        return STAY
    # max incentive; on an exact tie the earlier entry (RIGHT) survives
    best = max(candidates, key=lambda c: c[0])
    return best[1]


# ---------------------------------------------------------------------------
# Behavior chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BehaviorContext:
    """Navigation facts the chain needs beyond raw perception."""

    lane_count: int
    permitted_lanes: frozenset[int] | None = None   # None: any lane continues
    distance_to_node: float = INF                   # m to the next node
    nav_horizon: float = 300.0


@dataclass(frozen=True)
class VehicleIntent:
    """The single influence a vehicle emits each step."""

    vehicle_id: str
    acceleration: float
    lane_change: int = STAY
    reason: str = "acceleration"


def behavior_chain(vehicle: Vehicle, perception: Perception,
                   ctx: BehaviorContext) -> VehicleIntent:
    """Arbitrate navigation, overtaking and car following, in that order.

    Navigation fires when the current lane cannot reach the route's next
    road and the node is within the navigation horizon; it is gated by the
    safety criterion only.  Otherwise the incentive model may change lanes.
    Exactly one intent is returned either way.
    """
    params = vehicle.params
    v = vehicle.speed
    v0_eff = min(params.v0, perception.speed_limit)
    eff = DriverParams(v0=max(v0_eff, 0.1), T=params.T, a_max=params.a_max,
                       b=params.b, delta=params.delta, s0=params.s0,
                       p=params.p, da_th=params.da_th, b_safe=params.b_safe)

    accel = idm_acceleration(v, perception.leader_gap, perception.leader_dv, eff)

    must_change = (ctx.permitted_lanes is not None
                   and vehicle.lane not in ctx.permitted_lanes
                   and ctx.distance_to_node < ctx.nav_horizon)
    if must_change:
        # hold back as if the node were a standing obstacle until the change lands
        if ctx.distance_to_node > 0:
            accel = min(accel, idm_acceleration(v, ctx.distance_to_node, v, eff))
        target = min(ctx.permitted_lanes, key=lambda l: (abs(l - vehicle.lane), l))
        direction = RIGHT if target > vehicle.lane else LEFT
        view = perception.right if direction == RIGHT else perception.left
        if is_change_safe(view, v, params):
            return VehicleIntent(vehicle.id, accel, direction, "navigation")
        return VehicleIntent(vehicle.id, accel, STAY, "navigation_blocked")

    decision = mobil_decide(perception, v, eff, vehicle.length)
    if decision != STAY:
        return VehicleIntent(vehicle.id, accel, decision, "overtaking")
    return VehicleIntent(vehicle.id, accel, STAY, "acceleration")
