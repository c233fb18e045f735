"""Turns optimizer output into device commands.

Each smart inverter keeps its own volt/var curve.  Rather than sending a new
curve, the dispatcher translates the existing one along the voltage axis by
``v_g - v_l``, where ``v_l`` is the voltage at which the old curve already
produces the target ``q_g``.  The shifted curve then passes through
``(v_g, q_g)``, so once the local loop settles at ``v_g`` the inverter sits
at the supervisory set-point.  Only that one scalar has to be transmitted.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from svvc.devices import DeviceError, InverterState, TapState, curve_eval, curve_inverse, shift_curve
from svvc.feeder.model import PHASES, FeederModel

log = logging.getLogger(__name__)

SCALAR_BYTES = 8
CURVE_SCALARS = 8  # four (V, Q) pairs


@dataclass(frozen=True)
class TapCommand:
    regulator: str
    phase: int
    target: int


@dataclass(frozen=True)
class CurveShift:
    slot: int
    delta_v: float
    q_g: float
    v_g: float
    v_l: float


@dataclass(frozen=True)
class DispatchPlan:
    interval: float
    tap_commands: tuple[TapCommand, ...] = ()
    shifts: tuple[CurveShift, ...] = ()
    skipped: tuple[int, ...] = ()
    messages: int = 0
    bytes: int = 0

    def __post_init__(self):
        slots = [s.slot for s in self.shifts]
        if len(slots) != len(set(slots)):
            raise ValueError("more than one shift for an inverter in one interval")


def _tap_commands(model: FeederModel, current: TapState, target: TapState) -> list[TapCommand]:
    out = []
    for spec in model.regulators:
        phases = model.regulator_phases(spec.id)
        if spec.ganged:
            phases = phases[:1]
        for p in phases:
            if target[spec.id][p] != current[spec.id][p]:
                out.append(TapCommand(spec.id, p, int(target[spec.id][p])))
    return out


def make_plan(result, states: Sequence[InverterState], threshold_frac: float = 0.10,
              interval: float = 0.0, current_taps: TapState | None = None,
              model: FeederModel | None = None, tol: float = 1e-12) -> DispatchPlan:
    """Build the per-interval plan from a :class:`~svvc.vvo.VvoResult`.

    ``states`` covers the smart inverter slots in ``result.slots`` order.
    Inverters whose target is below ``threshold_frac`` of their Var limit keep
    their current curve.  Tap commands are emitted only where the target
    differs from ``current_taps``.
    """
    by_slot = {st.slot: st for st in states}
    shifts, skipped = [], []
    for k, slot in enumerate(result.slots):
        st = by_slot.get(slot)
        if st is None:
            raise ValueError(f"no inverter state for slot {slot}")
        q_lim = float(result.q_lim[k])
        q_g = float(result.q_g[k])
        if abs(q_g) < threshold_frac * q_lim or q_lim <= 0:
            skipped.append(slot)
            continue
        if abs(q_g) > q_lim:
            log.warning("slot %d: q_g=%.4g outside +/-%.4g kvar, clamped", slot, q_g, q_lim)
            q_g = max(-q_lim, min(q_lim, q_g))
        try:
            v_l = curve_inverse(st.curve, q_g, q_lim)
        except DeviceError:
            log.warning("slot %d: target not representable on current curve", slot)
            skipped.append(slot)
            continue
        delta = float(result.v_g[k]) - v_l
        if abs(delta) <= tol:
            continue
        shifts.append(CurveShift(slot, delta, q_g, float(result.v_g[k]), v_l))
    taps = []
    if current_taps is not None and model is not None:
        taps = _tap_commands(model, current_taps, result.taps)
    plan = DispatchPlan(interval, tuple(taps), tuple(shifts), tuple(skipped))
    messages, nbytes = message_accounting(plan)
    return replace(plan, messages=messages, bytes=nbytes)


def message_accounting(plan: DispatchPlan) -> tuple[int, int]:
    """One message per tap command and per curve shift; one scalar payload each."""
    messages = len(plan.tap_commands) + len(plan.shifts)
    return messages, messages * SCALAR_BYTES


def full_curve_bytes(plan: DispatchPlan) -> int:
    """Payload if every shifted inverter were sent its four-point curve instead."""
    return len(plan.tap_commands) * SCALAR_BYTES + len(plan.shifts) * CURVE_SCALARS * SCALAR_BYTES


@dataclass
class ApplyOutcome:
    taps: TapState
    inverters: list
    ltc_ops: int = 0
    vr_ops: int = 0
    rejected: list = field(default_factory=list)


def apply_plan(plan: DispatchPlan, tap_state: TapState, inverter_states: Sequence[InverterState],
               model: FeederModel) -> ApplyOutcome:
    """Install commanded taps and shifted curves.

    Operations are counted as |delta tap| per controlled channel; a ganged
    device moves all phases together and counts once.  A shift is skipped
    when the curve already passes through (v_g, q_g), so applying the same
    plan twice is the same as applying it once.
    """
    taps = tap_state
    ltc_ops = vr_ops = 0
    rejected = []
    for cmd in plan.tap_commands:
        spec = model.regulator_map.get(cmd.regulator)
        if spec is None or not spec.tap_min <= cmd.target <= spec.tap_max:
            log.warning("rejecting tap command %s", cmd)
            rejected.append(cmd)
            continue
        cur = list(taps[spec.id])
        ops = abs(cmd.target - cur[cmd.phase])
        if spec.ganged:
            new = [cmd.target] * 3
            ltc_ops += ops
        else:
            new = cur
            new[cmd.phase] = cmd.target
            vr_ops += ops
        taps = taps.with_taps(spec.id, new).with_timers(spec.id, (0.0, 0.0, 0.0))
    shifts = {s.slot: s for s in plan.shifts}
    out = []
    for st in inverter_states:
        s = shifts.get(st.slot)
        if s is not None and not _passes(st.curve, s, st):
            st = replace(st, curve=shift_curve(st.curve, s.delta_v))
        out.append(st)
    return ApplyOutcome(taps, out, ltc_ops, vr_ops, rejected)


def _passes(curve, shift: CurveShift, st: InverterState) -> bool:
    """Does ``curve`` already produce q_g at v_g?"""
    return abs(curve_eval(curve, shift.v_g, st.q_max) - shift.q_g) <= 1e-9 * max(1.0, abs(shift.q_g))


def write_dispatch_log(path, plans: Sequence[DispatchPlan], model: FeederModel) -> None:
    """CSV ``interval,device,kind,payload``; payloads are one scalar each."""
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "device", "kind", "payload"])
        for plan in plans:
            for cmd in plan.tap_commands:
                spec = model.regulator_map[cmd.regulator]
                dev = cmd.regulator if spec.ganged else f"{cmd.regulator}.{PHASES[cmd.phase]}"
                w.writerow([f"{plan.interval:g}", dev, "tap", cmd.target])
            for s in plan.shifts:
                w.writerow([f"{plan.interval:g}", model.slot_label(s.slot), "shift", f"{s.delta_v:.9f}"])
