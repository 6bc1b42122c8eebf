"""Stock observation probes.

Probes are the only output pathway: models never write files themselves.
Each writer accumulates rows while the engine notifies it at consistent
instants and renders them at the end of the run; the auditors check the
conservation ledger and the structural invariants every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .engine import EngineState, Probe
from .hybrid import MICRO


def fmt(x) -> str:
    """Decimal rendering with 9 significant digits, stable across runs."""
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isinf(x):
            return "inf"
        return f"{x:.9g}"
    return str(x)


def _cluster_geometry(state: EngineState, cluster) -> tuple[float, float]:
    """(drivable length weighted by lanes, plain length) of an extent."""
    chain = state.chains[cluster.chain_id]
    lane_length = 0.0
    for road_id, a, b in chain.pieces(cluster.start, cluster.end):
        lane_length += (b - a) * state.network.roads[road_id].lane_count
    return lane_length, cluster.end - cluster.start


def collect_step_rows(state: EngineState) -> list[dict]:
    """One row per cluster plus a totals row, all fields finite."""
    rows = []
    for chain_id in sorted(state.order):
        for cluster in state.chain_clusters(chain_id):
            lane_length, _ = _cluster_geometry(state, cluster)
            if cluster.representation == MICRO:
                count = float(len(cluster.vehicles))
                density = count / lane_length if lane_length > 0 else 0.0
                speed = (sum(v.speed for v in cluster.vehicles.values()) / count
                         if count else state.fd.v_f)
            else:
                count = cluster.segment.total_mass()
                density = count / lane_length if lane_length > 0 else 0.0
                speed = cluster.segment.mean_speed()
            flows = state.last_flows.get(cluster.id, [0.0, 0.0])
            rows.append({
                "step": state.step, "time": state.time, "cluster": cluster.id,
                "chain": chain_id, "representation": cluster.representation,
                "start": cluster.start, "end": cluster.end,
                "vehicles": count, "mean_density": density, "mean_speed": speed,
                "inflow": flows[0], "outflow": flows[1],
            })
    rows.append({
        "step": state.step, "time": state.time, "cluster": "TOTAL",
        "chain": "", "representation": "", "start": None, "end": None,
        "vehicles": None, "mean_density": None, "mean_speed": None,
        "inflow": None, "outflow": None,
        "inserted": state.ledger.inserted, "absorbed": state.ledger.absorbed,
        "total_mass": state.total_mass(),
    })
    return rows


class StepRecordProbe(Probe):
    """Collects the per-step cluster records for later export."""

    def __init__(self):
        self.rows: list[dict] = []

    def on_step_end(self, state: EngineState) -> None:
        self.rows.extend(collect_step_rows(state))


class TrajectoryProbe(Probe):
    """Collects every vehicle's kinematic state each step."""

    def __init__(self):
        self.rows: list[dict] = []

    def on_step_end(self, state: EngineState) -> None:
        for cid in sorted(state.clusters):
            cluster = state.clusters[cid]
            if cluster.representation != MICRO:
                continue
            for veh in sorted(cluster.vehicles.values(), key=lambda v: v.id):
                self.rows.append({
                    "step": state.step, "time": state.time, "vehicle": veh.id,
                    "road": veh.road, "lane": veh.lane,
                    "position": veh.position, "speed": veh.speed,
                })


class TransitionLogProbe(Probe):
    """Mirrors the engine's level-of-detail transition log."""

    def __init__(self):
        self.records: list = []

    def on_step_end(self, state: EngineState) -> None:
        self.records = list(state.transitions)

    def on_final(self, state: EngineState) -> None:
        self.records = list(state.transitions)


@dataclass
class AuditViolation:
    step: int
    kind: str
    value: float


class MassAuditProbe(Probe):
    """Checks the conservation ledger identity at every consistent instant."""

    def __init__(self, tolerance: float = 1e-6):
        self.tolerance = tolerance
        self.violations: list[AuditViolation] = []
        self.initial_mass: float | None = None
        self.final_mass: float | None = None
        self.final_residual: float | None = None

    def on_initialized(self, state: EngineState) -> None:
        self.initial_mass = state.total_mass()

    def on_step_end(self, state: EngineState) -> None:
        residual = state.ledger_residual()
        if abs(residual) > self.tolerance:
            self.violations.append(AuditViolation(state.step, "ledger", residual))
        self.final_mass = state.total_mass()
        self.final_residual = residual

    def on_final(self, state: EngineState) -> None:
        self.final_mass = state.total_mass()
        self.final_residual = state.ledger_residual()


class CanaryProbe(Probe):
    """Hashes the state and records any inconsistent snapshot it is shown."""

    def __init__(self):
        self.digests: list[str] = []
        self.problems: list[tuple[int, str]] = []

    def _check(self, state: EngineState) -> None:
        for problem in state.consistency_errors():
            self.problems.append((state.step, problem))
        self.digests.append(state.state_digest())

    def on_initialized(self, state: EngineState) -> None:
        self._check(state)

    def on_step_end(self, state: EngineState) -> None:
        self._check(state)

    def on_final(self, state: EngineState) -> None:
        self._check(state)


class CallSequenceProbe(Probe):
    """Records the callback sequence, for engine-contract tests."""

    def __init__(self):
        self.calls: list[str] = []
        self.errors: list[BaseException] = []

    def on_simulation_start(self) -> None:
        self.calls.append("start")

    def on_initialized(self, state) -> None:
        self.calls.append("initialized")

    def on_step_end(self, state) -> None:
        self.calls.append("step_end")

    def on_final(self, state) -> None:
        self.calls.append("final")

    def on_error(self, error) -> None:
        self.calls.append("error")
        self.errors.append(error)
