"""Voltage regulator and smart-inverter device models.

Regulators (substation LTC and line VRs) are modelled as ideal
autotransformers with 33 discrete positions and a timer-based bandwidth
controller.  Smart inverters follow a four-point volt/var characteristic
that can be translated along the voltage axis by a supervisory controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

GANGED = "ganged"
PER_PHASE = "per_phase"


class DeviceError(ValueError):
    pass


@dataclass(frozen=True)
class RegulatorSpec:
    """Tap hardware plus local bandwidth-control settings.

    ``v_set`` and ``bandwidth`` are on a 120 V base, ``time_delay`` in seconds.
    """

    id: str
    branch: str
    mode: str = PER_PHASE
    tap_min: int = -16
    tap_max: int = 16
    step_pu: float = 0.00625
    v_set: float = 120.0
    bandwidth: float = 2.0
    time_delay: float = 60.0
    max_tap_per_action: int = 1

    def __post_init__(self):
        if self.mode not in (GANGED, PER_PHASE):
            raise DeviceError(f"regulator {self.id}: unknown mode {self.mode!r}")
        if not self.tap_min <= 0 <= self.tap_max:
            raise DeviceError(f"regulator {self.id}: tap range must include 0")
        lo, hi = self.ratio(self.tap_min), self.ratio(self.tap_max)
        if lo < 0.9 - 1e-12 or hi > 1.1 + 1e-12:
            raise DeviceError(f"regulator {self.id}: ratio range [{lo}, {hi}] exceeds +/-10%")

    @property
    def ganged(self) -> bool:
        return self.mode == GANGED

    @property
    def positions(self) -> int:
        return self.tap_max - self.tap_min + 1

    def ratio(self, tap: int) -> float:
        return 1.0 + tap * self.step_pu

    def clamp(self, tap: int) -> int:
        return min(self.tap_max, max(self.tap_min, int(tap)))


@dataclass(frozen=True)
class TapState:
    """Integer tap per regulator and phase (A, B, C), plus local-control timers.

    Ganged devices hold the same tap on every phase.  Timers are the
    accumulated out-of-band time in seconds per phase.
    """

    taps: Mapping[str, tuple[int, int, int]] = field(default_factory=dict)
    timers: Mapping[str, tuple[float, float, float]] = field(default_factory=dict)

    def __getitem__(self, reg_id: str) -> tuple[int, int, int]:
        return self.taps.get(reg_id, (0, 0, 0))

    def key(self) -> tuple:
        return tuple(sorted((k, tuple(v)) for k, v in self.taps.items()))

    def __hash__(self):
        return hash(self.key())

    def __eq__(self, other):
        if not isinstance(other, TapState):
            return NotImplemented
        return self.key() == other.key() and _timer_key(self) == _timer_key(other)

    def with_taps(self, reg_id: str, taps: Sequence[int]) -> TapState:
        new = dict(self.taps)
        new[reg_id] = tuple(int(t) for t in taps)
        return replace(self, taps=new)

    def with_timers(self, reg_id: str, timers: Sequence[float]) -> TapState:
        new = dict(self.timers)
        new[reg_id] = tuple(float(t) for t in timers)
        return replace(self, timers=new)

    @classmethod
    def zeros(cls, specs: Sequence[RegulatorSpec]) -> TapState:
        return cls({s.id: (0, 0, 0) for s in specs}, {s.id: (0.0, 0.0, 0.0) for s in specs})

    def validate(self, specs: Sequence[RegulatorSpec]) -> None:
        by_id = {s.id: s for s in specs}
        for rid, taps in self.taps.items():
            if rid not in by_id:
                raise DeviceError(f"tap state references unknown regulator {rid!r}")
            spec = by_id[rid]
            for t in taps:
                if not spec.tap_min <= t <= spec.tap_max:
                    raise DeviceError(f"regulator {rid}: tap {t} outside [{spec.tap_min}, {spec.tap_max}]")
            if spec.ganged and len(set(taps)) != 1:
                raise DeviceError(f"ganged regulator {rid} holds unequal taps {taps}")


def _timer_key(state: TapState) -> tuple:
    return tuple(sorted((k, tuple(v)) for k, v in state.timers.items()))


def local_regulator_step(spec: RegulatorSpec, tap_state: TapState, measured_v, dt: float,
                         phases: Sequence[int] = (0, 1, 2)):
    """Advance one regulator's bandwidth controller by ``dt`` seconds.

    ``measured_v`` is the regulated-side voltage on a 120 V base, one value per
    phase in ``phases`` (a ganged device uses their mean).  The per-phase
    timer integrates while the voltage sits outside ``v_set +/- bandwidth/2``
    and resets as soon as it returns to the band.  When a timer reaches
    ``time_delay`` the tap moves one step toward correction.

    Returns ``(new_state, moves, saturated)`` where ``moves`` is the number of
    single-step tap operations performed (a ganged move counts once).
    """
    measured = np.atleast_1d(np.asarray(measured_v, dtype=float))
    taps = list(tap_state[spec.id])
    timers = list(tap_state.timers.get(spec.id, (0.0, 0.0, 0.0)))
    half = spec.bandwidth / 2.0
    moves = 0
    saturated = False

    if spec.ganged:
        channels = [(list(phases), float(np.mean(measured)))]
    else:
        channels = [([p], float(v)) for p, v in zip(phases, measured)]

    for group, v in channels:
        lead = group[0]
        error = v - spec.v_set
        if abs(error) <= half:
            for p in group:
                timers[p] = 0.0
            continue
        timer = timers[lead] + dt
        direction = 1 if error < 0 else -1
        if timer >= spec.time_delay - 1e-9:
            target = taps[lead] + direction * spec.max_tap_per_action
            if spec.clamp(target) == taps[lead]:
                saturated = True
            else:
                new_tap = spec.clamp(target)
                moves += abs(new_tap - taps[lead])
                for p in group:
                    taps[p] = new_tap
            timer = 0.0
        for p in group:
            timers[p] = timer

    new_state = tap_state.with_taps(spec.id, taps).with_timers(spec.id, timers)
    return new_state, moves, saturated


@dataclass(frozen=True)
class VoltVarCurve:
    """Four-point volt/var characteristic.

    ``v_points`` are absolute voltages in p.u.; ``q_points`` are fractions of
    the Var limit (+1 = full injection).  ``q_lim`` scales the output to kvar.
    """

    v_points: tuple[float, float, float, float] = (0.95, 0.98, 1.02, 1.05)
    q_points: tuple[float, float, float, float] = (1.0, 0.0, 0.0, -1.0)
    v_ref: float = 1.0
    q_lim: float = 1.0

    def __post_init__(self):
        v1, v2, v3, v4 = self.v_points
        q1, q2, q3, q4 = self.q_points
        if not (v1 < v2 <= v3 < v4):
            raise DeviceError(f"curve knees must satisfy V1<V2<=V3<V4, got {self.v_points}")
        if not (q1 == 1.0 and q2 == 0.0 and q3 == 0.0 and q4 == -1.0):
            raise DeviceError(f"curve Q points must be (+1, 0, 0, -1), got {self.q_points}")
        if self.q_lim < 0:
            raise DeviceError("q_lim must be nonnegative")

    def slopes(self) -> tuple[float, float, float]:
        v, q = self.v_points, self.q_points
        return tuple((q[i + 1] - q[i]) / (v[i + 1] - v[i]) for i in range(3))

    def with_limit(self, q_lim: float) -> VoltVarCurve:
        return replace(self, q_lim=float(q_lim))

    def to_dict(self) -> dict:
        return {"v_points": list(self.v_points), "v_ref": self.v_ref}

    @classmethod
    def from_dict(cls, data: Mapping) -> VoltVarCurve:
        return cls(v_points=tuple(float(x) for x in data["v_points"]),
                   v_ref=float(data.get("v_ref", 1.0)),
                   q_lim=float(data.get("q_lim", 1.0)))


def _curve_fraction(curve: VoltVarCurve, v: float) -> float:
    v1, v2, v3, v4 = curve.v_points
    if v <= v1:
        return 1.0
    if v < v2:
        return (v2 - v) / (v2 - v1)
    if v <= v3:
        return 0.0
    if v < v4:
        return -(v - v3) / (v4 - v3)
    return -1.0


def curve_eval(curve: VoltVarCurve, v: float, q_lim: Optional[float] = None) -> float:
    """Var output in kvar at terminal voltage ``v`` (p.u.)."""
    lim = curve.q_lim if q_lim is None else q_lim
    return lim * _curve_fraction(curve, float(v))


def curve_inverse(curve: VoltVarCurve, q: float, q_lim: Optional[float] = None) -> float:
    """Voltage at which the curve produces ``q`` kvar.

    Flat segments map to a canonical point: the deadband to its midpoint and
    the saturated tails to the adjacent knee.
    """
    lim = curve.q_lim if q_lim is None else q_lim
    v1, v2, v3, v4 = curve.v_points
    if lim <= 0:
        if abs(q) > 0:
            raise DeviceError(f"q={q} outside the representable range of a zero-limit curve")
        return 0.5 * (v2 + v3)
    frac = q / lim
    if abs(frac) > 1.0 + 1e-12:
        raise DeviceError(f"q={q} kvar outside +/-{lim} kvar")
    if frac >= 1.0:
        return v1
    if frac <= -1.0:
        return v4
    if frac == 0.0:
        return 0.5 * (v2 + v3)
    if frac > 0.0:
        return v2 - frac * (v2 - v1)
    return v3 + (-frac) * (v4 - v3)


def shift_curve(curve: VoltVarCurve, delta_v: float) -> VoltVarCurve:
    """Translate the curve along the voltage axis so f_new(v) = f_old(v - delta_v)."""
    if delta_v == 0.0:
        return curve
    return replace(curve,
                   v_points=tuple(p + delta_v for p in curve.v_points),
                   v_ref=curve.v_ref + delta_v)


def var_limit(s_rating: float, p_now: float) -> float:
    """Available reactive capability sqrt(S^2 - P^2), zero when P exceeds S."""
    return math.sqrt(max(s_rating * s_rating - p_now * p_now, 0.0))


@dataclass(frozen=True)
class InverterState:
    """Per-phase inverter control state.

    ``slot`` indexes the model's inverter phase slots.
    """

    slot: int
    curve: VoltVarCurve
    q_now: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0

    def __post_init__(self):
        if not self.q_min - 1e-9 <= self.q_now <= self.q_max + 1e-9:
            raise DeviceError(f"inverter slot {self.slot}: q={self.q_now} outside [{self.q_min}, {self.q_max}]")

    def with_limits(self, q_lim: float) -> InverterState:
        q = min(q_lim, max(-q_lim, self.q_now))
        return replace(self, q_min=-q_lim, q_max=q_lim, q_now=q, curve=self.curve.with_limit(q_lim))


def inverter_local_step(state: InverterState, measured_v: float, alpha: float = 0.5) -> InverterState:
    """One damped step of the local volt/var loop.

    q_next = (1 - alpha) * q_now + alpha * clamp(f(v), q_min, q_max)
    """
    if not 0.0 < alpha <= 1.0:
        raise DeviceError(f"damping alpha must lie in (0, 1], got {alpha}")
    target = curve_eval(state.curve, measured_v, state.q_max)
    target = min(state.q_max, max(state.q_min, target))
    q_next = (1.0 - alpha) * state.q_now + alpha * target
    q_next = min(state.q_max, max(state.q_min, q_next))
    return replace(state, q_now=q_next)
