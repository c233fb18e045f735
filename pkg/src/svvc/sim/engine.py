"""Quasi-static 24-hour simulation of the three control cases.

Case 1  regulators on local bandwidth control, inverters at unity power factor.
Case 2  regulators local, smart inverters on the fixed default volt/var curve.
Case 3  supervisory optimizer every dispatch period: taps are commanded and
        held, inverter curves are shifted, inverters follow their curves
        between dispatches.

Inverters react to the previous step's terminal voltage with a damped
update, so local dynamics are resolved at the simulation step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from svvc.devices import InverterState, TapState, inverter_local_step, local_regulator_step
from svvc.dispatcher import apply_plan, make_plan
from svvc.feeder import load_feeder, load_profiles
from svvc.feeder.model import FeederModel
from svvc.feeder.profiles import synthesize
from svvc.powerflow import (
    InjectionSet, PhasorSolution, PowerFlowError, check_limits, monitored_nodes, power_balance,
    slot_limits, solve,
)
from svvc.sim.scenario import SYNTH, Scenario
from svvc.vvo import loss_kw, run_vvo

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    """Power flow failed during a run; carries the simulation time."""

    def __init__(self, message: str, time_s: float):
        super().__init__(message)
        self.time_s = time_s


@dataclass
class MetricsReport:
    case: int
    scenario: str
    N_OV: int = 0
    N_UV: int = 0
    loss_kWh: float = 0.0
    N_LTC: int = 0
    N_VR: int = 0
    V_max: float = -np.inf
    V_min: float = np.inf
    sample_s: float = 60.0
    energy: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    voltage_samples: list = field(default_factory=list)
    dispatch: list = field(default_factory=list)     # per interval settle records
    runtime: list = field(default_factory=list)      # (time_s, seconds)
    plans: list = field(default_factory=list)
    slot_labels: list = field(default_factory=list)
    tap_labels: list = field(default_factory=list)
    infeasible_intervals: int = 0

    @property
    def N_total(self) -> int:
        return self.N_LTC + self.N_VR

    def row(self) -> list:
        return [self.case, self.N_OV, self.N_UV, f"{self.loss_kWh:.4f}", self.N_LTC, self.N_VR,
                self.N_total, f"{self.V_max:.5f}", f"{self.V_min:.5f}"]


def count_violation(solution: PhasorSolution, v_min: float = 0.95, v_max: float = 1.05) -> tuple[int, int]:
    """(under, over) phase-node counts for one sampled instant; limits are inclusive."""
    rep = check_limits(solution, v_min, v_max)
    return rep.n_under, rep.n_over


def _apply_local_overrides(model: FeederModel, overrides: dict) -> FeederModel:
    if not overrides:
        return model
    specs = []
    known = {r.id for r in model.regulators}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"local_control references unknown regulators {sorted(unknown)}")
    for spec in model.regulators:
        specs.append(replace(spec, **overrides.get(spec.id, {})))
    return replace(model, regulators=tuple(specs))


def _tap_channels(model: FeederModel) -> list:
    out = []
    for spec in model.regulators_by_depth():
        phases = model.regulator_phases(spec.id)
        for p in (phases[:1] if spec.ganged else phases):
            out.append((spec.id, p))
    return out


def settle(model: FeederModel, inj: InjectionSet, taps: TapState, states: list, alpha: float,
           tol_pu: float = 1e-4, max_iter: int = 50, v0=None):
    """Iterate the damped inverter loop against the power flow to a fixed point.

    Returns ``(states, solution, iterations, converged)``; convergence means
    the largest Var update fell below ``tol_pu`` on the per-phase base.
    """
    base = model.phase_base_kva
    slots = model.inverter_slots
    q_full = inj.slot_q(model)

    def solve_with(sts):
        full = q_full.copy()
        for st in sts:
            full[st.slot] = st.q_now
        return solve(model, inj.with_slot_q(model, full), taps, v0=v0)

    sol = solve_with(states)
    for it in range(1, max_iter + 1):
        new = [inverter_local_step(st, sol.v[slots[st.slot][2]], alpha) for st in states]
        delta = max((abs(a.q_now - b.q_now) for a, b in zip(new, states)), default=0.0)
        states = new
        sol = solve_with(states)
        v0 = sol.V
        if delta / base <= tol_pu:
            return states, sol, it, True
    log.warning("inverter settle did not converge in %d iterations", max_iter)
    return states, sol, max_iter, False


def scenario_profile(scenario: Scenario):
    src = scenario.profile
    if isinstance(src, str) and src.startswith(SYNTH):
        return synthesize(src[len(SYNTH):], scenario.sim_step_s, scenario.seed)
    return load_profiles(src)


def run_case(scenario: Scenario, model: FeederModel | None = None, profile=None) -> MetricsReport:
    """Simulate one case over the scenario's profile."""
    model = model or load_feeder(scenario.feeder)
    model = _apply_local_overrides(model, scenario.local_control)
    profile = profile or scenario_profile(scenario)
    profile.check_period(scenario.dispatch_period_s)
    dt = scenario.sim_step_s
    if profile.step_s and abs(profile.step_s - dt) > 1e-9:
        raise ValueError(f"profile step {profile.step_s}s differs from sim step {dt}s")
    case = scenario.case
    cfg = scenario.optimizer
    n = len(profile)
    if scenario.duration_s is not None:
        n = min(n, int(round(scenario.duration_s / dt)))

    smart = list(model.smart_slots)
    slot_labels = [model.slot_label(s) for s in smart]
    channels = _tap_channels(model)
    rep = MetricsReport(case=case, scenario=scenario.name, sample_s=scenario.violation_sample_s,
                        slot_labels=slot_labels,
                        tap_labels=[f"{r}" if model.regulator_map[r].ganged else f"{r}.{'ABC'[p]}"
                                    for r, p in channels])
    mon = monitored_nodes(model)
    slot_nodes = [model.inverter_slots[s][2] for s in smart]
    sample_every = int(round(scenario.violation_sample_s / dt))
    dispatch_every = int(round(scenario.dispatch_period_s / dt))
    reg_specs = model.regulators_by_depth()
    reg_nodes = {spec.id: [model.node_index[(model.regulator_branch(spec.id).to_bus, p)]
                           for p in model.regulator_phases(spec.id)] for spec in reg_specs}

    taps = model.default_taps()
    states = [InverterState(s, scenario.curve) for s in smart]
    v_prev = None
    V_warm = None

    def step_inj(k):
        return InjectionSet.build(model, float(profile.load_mult[k]), float(profile.pv_mult[k]))

    def with_q(inj, sts):
        full = np.zeros(len(model.inverter_slots))
        for st in sts:
            full[st.slot] = st.q_now
        return inj.with_slot_q(model, full)

    def local_regulators(sol, taps):
        moves_ltc = moves_vr = 0
        for spec in reg_specs:
            measured = sol.v[reg_nodes[spec.id]] * 120.0
            taps, moves, _ = local_regulator_step(spec, taps, measured, dt, model.regulator_phases(spec.id))
            if spec.ganged:
                moves_ltc += moves
            else:
                moves_vr += moves
        return taps, moves_ltc, moves_vr

    def update_inverters(inj, sts, v_prev):
        lims = slot_limits(model, inj, smart)
        out = []
        for st, lim, node in zip(sts, lims, slot_nodes):
            st = st.with_limits(lim)
            if case == 1:
                st = replace(st, q_now=0.0)
            elif v_prev is not None:
                st = inverter_local_step(st, v_prev[node], scenario.damping)
            out.append(st)
        return out

    ts = {"time_s": [], "load_mult": [], "pv_mult": [], "loss_kw": [], "v_min": [], "v_max": [],
          "taps": [], "q": []}
    e_src = e_load = e_gen = 0.0
    # warm-up steps (k < 0) replay the first profile point so that every
    # controller starts the day from its own steady state; they are not metered
    warm = int(round(scenario.warmup_s / dt))
    for k in range(-warm, n):
        t = float(profile.time_s[max(k, 0)]) + min(k, 0) * dt
        inj = step_inj(max(k, 0))
        states = update_inverters(inj, states, v_prev)
        metered = k >= 0
        if case == 3 and k % dispatch_every == 0:
            t0 = time.perf_counter()
            try:
                res = run_vvo(model, with_q(inj, states), taps, cfg,
                              q0=np.array([st.q_now for st in states]), slots=smart)
            except PowerFlowError as exc:
                raise SimulationError(f"t={t:g}s: optimizer power flow failed: {exc}", t) from exc
            plan = make_plan(res, states, scenario.threshold_frac, t, taps, model)
            out = apply_plan(plan, taps, states, model)
            taps, states = out.taps, out.inverters
            if metered:
                rep.runtime.append((t, time.perf_counter() - t0))
                rep.infeasible_intervals += 0 if res.feasible else 1
                rep.N_LTC += out.ltc_ops
                rep.N_VR += out.vr_ops
                rep.plans.append(plan)
                rep.dispatch.append(_settle_record(model, scenario, t, inj, taps, states, res, plan, V_warm))
        try:
            sol = solve(model, with_q(inj, states), taps, v0=V_warm)
        except PowerFlowError as exc:
            raise SimulationError(f"t={t:g}s: power flow failed: {exc}", t) from exc
        V_warm, v_prev = sol.V, sol.v
        if not metered:
            if case in (1, 2):
                taps, _, _ = local_regulators(sol, taps)
            continue
        vm = sol.v[mon]
        rep.V_min = min(rep.V_min, float(vm.min()))
        rep.V_max = max(rep.V_max, float(vm.max()))
        lk = loss_kw(sol)
        rep.loss_kWh += lk * dt / 3600.0
        bal = power_balance(model, sol)
        e_src += bal["source_kw"] * dt / 3600.0
        e_load += bal["load_kw"] * dt / 3600.0
        e_gen += bal["generation_kw"] * dt / 3600.0
        if k % sample_every == 0:
            uv, ov = count_violation(sol)
            rep.N_UV += uv
            rep.N_OV += ov
            rep.voltage_samples.append(vm.copy())
        ts["time_s"].append(t)
        ts["load_mult"].append(inj.load_mult)
        ts["pv_mult"].append(inj.pv_mult)
        ts["loss_kw"].append(lk)
        ts["v_min"].append(float(vm.min()))
        ts["v_max"].append(float(vm.max()))
        ts["taps"].append([taps[r][p] for r, p in channels])
        ts["q"].append([st.q_now for st in states])
        if case in (1, 2):
            taps, ml, mv = local_regulators(sol, taps)
            rep.N_LTC += ml
            rep.N_VR += mv
    rep.energy = {"source_kWh": e_src, "load_kWh": e_load, "generation_kWh": e_gen}
    rep.series = ts
    return rep


def _settle_record(model, scenario, t, inj, taps, states, res, plan, v0) -> dict:
    """Settle the shifted curves at frozen load/PV and compare to targets."""
    skipped = set(plan.skipped)
    settled, sol, iters, ok = settle(model, inj, taps, list(states), scenario.damping,
                                     scenario.settle_tol_pu, scenario.settle_max_iter, v0)
    by_slot = {st.slot: st for st in settled}
    rows = []
    for k, slot in enumerate(res.slots):
        node = model.inverter_slots[slot][2]
        q_lim = float(res.q_lim[k])
        q_set = by_slot[slot].q_now
        rows.append({"slot": slot, "q_g": float(res.q_g[k]), "q_settled": q_set, "q_lim": q_lim,
                     "err_frac": abs(q_set - res.q_g[k]) / q_lim if q_lim > 0 else 0.0,
                     "v_g": float(res.v_g[k]), "v_settled": float(sol.v[node]),
                     "v_err": abs(float(sol.v[node]) - float(res.v_g[k])), "skipped": slot in skipped})
    uv, ov = count_violation(sol)
    return {"time_s": t, "rows": rows, "iterations": iters, "converged": ok,
            "settled_uv": uv, "settled_ov": ov, "any_skipped": bool(skipped), "feasible": res.feasible}
