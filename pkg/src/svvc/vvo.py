"""Two-stage supervisory Volt/VAR optimizer.

Stage 1 drives out-of-band voltages back toward ``v_ref`` with smart-inverter
Vars (weighted squared deviation, weights 1 only on violating nodes) and, if
that is not enough or inverters saturate, searches a pruned window of tap
moves.  Stage 2 then minimises network loss with the inverters while keeping
every voltage inside the band.

Both inverter stages are projected gradient descent with a halving line
search.  Gradients are assembled from finite-difference voltage
sensitivities.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from svvc.devices import TapState
from svvc.feeder.model import FeederModel
from svvc.powerflow import (
    InjectionSet, PhasorSolution, PowerFlowError, check_limits, loss_partials, monitored_nodes,
    series_loss_pu, slot_limits, solve, voltage_sensitivity,
)


@dataclass(frozen=True)
class OptimizerConfig:
    v_min: float = 0.95
    v_max: float = 1.05
    v_ref: float = 1.0
    max_iter: int = 30
    tol: float = 1e-9          # objective improvement (stage 1 p.u.^2, stage 2 kW)
    grad_tol: float = 1e-9
    step0: float = 1.0
    max_halvings: int = 12
    tap_window: tuple[int, ...] = (0, 1, -1, 2, -2, 3, -3)
    sens_h: float = 1e-4
    sens_mode: str = "forward"

    def __post_init__(self):
        if not self.v_min < self.v_ref < self.v_max:
            raise ValueError(f"need v_min < v_ref < v_max, got {self.v_min}, {self.v_ref}, {self.v_max}")
        w = set(self.tap_window)
        if 0 not in w or any(-d not in w for d in w):
            raise ValueError(f"tap window must be symmetric and contain 0, got {self.tap_window}")

    @classmethod
    def from_dict(cls, data: dict) -> OptimizerConfig:
        data = dict(data)
        if "tap_window" in data:
            data["tap_window"] = tuple(int(x) for x in data["tap_window"])
        return cls(**data)

    def window_up(self) -> tuple[int, ...]:
        return tuple(sorted(d for d in self.tap_window if d > 0))

    def window_down(self) -> tuple[int, ...]:
        return tuple(sorted((d for d in self.tap_window if d < 0), reverse=True))


@dataclass
class StageResult:
    q: np.ndarray
    solution: PhasorSolution
    trace: list = field(default_factory=list)   # (iteration, objective, step)
    steps: int = 0
    saturated: bool = False
    aborted: bool = False


@dataclass
class TapSearchResult:
    candidates: list          # [(TapState, v_var, PhasorSolution)] best first
    evaluations: int
    closest: Optional[tuple] = None   # (TapState, violation magnitude, PhasorSolution)

    @property
    def feasible(self) -> bool:
        return bool(self.candidates)


@dataclass
class VvoResult:
    taps: TapState
    slots: tuple[int, ...]
    q_g: np.ndarray          # kvar per smart slot
    v_g: np.ndarray          # p.u. at each smart slot's node
    q_lim: np.ndarray
    feasible: bool
    solution: PhasorSolution
    stage1_trace: list = field(default_factory=list)
    stage2_trace: list = field(default_factory=list)
    tap_search: Optional[TapSearchResult] = None
    loss_kw: float = 0.0

    def write_trace(self, path) -> None:
        write_trace(path, [("stage1", *row) for row in self.stage1_trace]
                    + [("stage2", *row) for row in self.stage2_trace])


def write_trace(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "iteration", "objective", "step"])
        for stage, it, obj, step in rows:
            w.writerow([stage, it, f"{obj:.12g}", f"{step:.6g}"])


# ---------------------------------------------------------------------------
# objectives

def voltage_variance(solution: PhasorSolution, v_ref: float = 1.0) -> float:
    """Sum over all phase-nodes of (v - v_ref)^2."""
    return float(np.sum((solution.v - v_ref) ** 2))


def stage1_objective(solution: PhasorSolution, cfg: OptimizerConfig) -> tuple[float, np.ndarray]:
    """Weighted flattening objective and its weights over monitored nodes."""
    idx = monitored_nodes(solution.model)
    v = solution.v[idx]
    w = ((v < cfg.v_min) | (v > cfg.v_max)).astype(float)
    return float(np.sum(w * (v - cfg.v_ref) ** 2)), w


def stage1_gradient(model: FeederModel, solution: PhasorSolution, slots, cfg: OptimizerConfig,
                    sens=None) -> np.ndarray:
    """d(stage-1 objective)/dq per smart slot, per kvar (weights held fixed)."""
    sens = sens or voltage_sensitivity(model, solution, slots, cfg.sens_h, cfg.sens_mode)
    idx = monitored_nodes(model)
    _, w = stage1_objective(solution, cfg)
    r = 2.0 * w * (solution.v[idx] - cfg.v_ref)
    return r @ sens.dv[idx] / model.phase_base_kva


def loss_gradient(model: FeederModel, solution: PhasorSolution, slots, cfg: OptimizerConfig,
                  sens=None) -> np.ndarray:
    """d(loss kW)/dq per smart slot, per kvar, via the chain rule through |v| and angle."""
    sens = sens or voltage_sensitivity(model, solution, slots, cfg.sens_h, cfg.sens_mode)
    dv, dth = loss_partials(model, solution.V)
    # loss in kW = base * loss_pu; q in kvar = base * q_pu, so the bases cancel
    return dv @ sens.dv + dth @ sens.dtheta


def loss_kw(solution: PhasorSolution) -> float:
    return series_loss_pu(solution.model, solution.V) * solution.model.phase_base_kva


# ---------------------------------------------------------------------------
# inverter stages

class _Evaluator:
    """Solves with a given smart-slot Var vector, counting power flows."""

    def __init__(self, model: FeederModel, inj: InjectionSet, taps: TapState, slots: Sequence[int]):
        self.model, self.inj, self.taps = model, inj, taps
        self.slots = tuple(slots)
        self.full_q = inj.slot_q(model) if len(model.inverter_slots) else np.zeros(0)
        self.count = 0

    def injection(self, q: np.ndarray) -> InjectionSet:
        full = self.full_q.copy()
        full[list(self.slots)] = q
        return self.inj.with_slot_q(self.model, full)

    def __call__(self, q: np.ndarray, v0=None, taps: Optional[TapState] = None) -> PhasorSolution:
        self.count += 1
        return solve(self.model, self.injection(q), self.taps if taps is None else taps, v0=v0)


def _direction(grad: np.ndarray, q: np.ndarray, q_lim: np.ndarray) -> np.ndarray:
    """Scaled descent direction for a unit step; components blocked by the box are dropped."""
    d = -grad.copy()
    d[(q >= q_lim) & (d > 0)] = 0.0
    d[(q <= -q_lim) & (d < 0)] = 0.0
    big = np.max(np.abs(d)) if d.size else 0.0
    if big == 0.0:
        return d
    return d / big * q_lim.max()


def _outward_clamped(grad: np.ndarray, q: np.ndarray, q_lim: np.ndarray) -> bool:
    up = (q >= q_lim) & (-grad > 0)
    down = (q <= -q_lim) & (-grad < 0)
    return bool(np.any((up | down) & (q_lim > 0)))


def _project(q: np.ndarray, q_lim: np.ndarray) -> np.ndarray:
    return np.minimum(q_lim, np.maximum(-q_lim, q))


def stage1_inverter_opt(model: FeederModel, inj: InjectionSet, taps: TapState, cfg: OptimizerConfig,
                        q0: Optional[np.ndarray] = None, slots: Optional[Sequence[int]] = None,
                        evaluator: Optional[_Evaluator] = None,
                        base: Optional[PhasorSolution] = None) -> StageResult:
    """Projected gradient on the weighted voltage-flattening objective."""
    slots = tuple(model.smart_slots if slots is None else slots)
    ev = evaluator or _Evaluator(model, inj, taps, slots)
    q_lim = slot_limits(model, inj, slots)
    q = _project(np.zeros(len(slots)) if q0 is None else np.asarray(q0, float), q_lim)
    sol = base if base is not None else ev(q)
    obj, w = stage1_objective(sol, cfg)
    res = StageResult(q, sol, [(0, obj, 0.0)])
    if not w.any() or not len(slots):
        return res
    for it in range(1, cfg.max_iter + 1):
        try:
            grad = stage1_gradient(model, sol, slots, cfg)
        except PowerFlowError:
            res.aborted = True
            break
        d = _direction(grad, q, q_lim)
        res.saturated = _outward_clamped(grad, q, q_lim)
        if not np.any(d):
            break
        t = cfg.step0
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            trial_q = _project(q + t * d, q_lim)
            try:
                trial = ev(trial_q, v0=sol.V)
            except PowerFlowError:
                t *= 0.5
                continue
            trial_obj, _ = stage1_objective(trial, cfg)
            if trial_obj < obj:
                accepted = (trial_q, trial, trial_obj)
                break
            t *= 0.5
        if accepted is None:
            break
        improvement = obj - accepted[2]
        q, sol, obj = accepted
        res.q, res.solution, res.steps = q, sol, it
        res.trace.append((it, obj, t))
        if obj == 0.0 or improvement < cfg.tol:
            break
    if obj > 0.0 and not res.saturated:
        try:
            res.saturated = _outward_clamped(stage1_gradient(model, sol, slots, cfg), q, q_lim)
        except PowerFlowError:
            pass
    return res


def _in_band(sol: PhasorSolution, cfg: OptimizerConfig) -> bool:
    v = sol.monitored_v()
    return bool(np.all(v >= cfg.v_min) and np.all(v <= cfg.v_max))


def stage2_loss_opt(model: FeederModel, inj: InjectionSet, taps: TapState, q_start, cfg: OptimizerConfig,
                    slots: Optional[Sequence[int]] = None, evaluator: Optional[_Evaluator] = None,
                    base: Optional[PhasorSolution] = None) -> StageResult:
    """Projected gradient loss descent; steps leaving the voltage band are rejected."""
    slots = tuple(model.smart_slots if slots is None else slots)
    ev = evaluator or _Evaluator(model, inj, taps, slots)
    q_lim = slot_limits(model, inj, slots)
    q = _project(np.asarray(q_start, float), q_lim)
    sol = base if base is not None else ev(q)
    obj = loss_kw(sol)
    res = StageResult(q, sol, [(0, obj, 0.0)])
    if not len(slots):
        return res
    feasible_start = _in_band(sol, cfg)
    for it in range(1, cfg.max_iter + 1):
        try:
            grad = loss_gradient(model, sol, slots, cfg)
        except PowerFlowError:
            res.aborted = True
            break
        d = _direction(grad, q, q_lim)
        if np.max(np.abs(grad * (d != 0)), initial=0.0) < cfg.grad_tol:
            break
        t = cfg.step0
        accepted = None
        for _ in range(cfg.max_halvings + 1):
            trial_q = _project(q + t * d, q_lim)
            try:
                trial = ev(trial_q, v0=sol.V)
            except PowerFlowError:
                t *= 0.5
                continue
            trial_obj = loss_kw(trial)
            if trial_obj < obj and (not feasible_start or _in_band(trial, cfg)):
                accepted = (trial_q, trial, trial_obj)
                break
            t *= 0.5
        if accepted is None:
            break
        improvement = obj - accepted[2]
        q, sol, obj = accepted
        res.q, res.solution, res.steps = q, sol, it
        res.trace.append((it, obj, t))
        if improvement < cfg.tol:
            break
    return res


# ---------------------------------------------------------------------------
# tap search

def _violation(sol: PhasorSolution, cfg: OptimizerConfig):
    return check_limits(sol, cfg.v_min, cfg.v_max)


def _shift(model: FeederModel, taps: TapState, reg_id: str, deltas) -> Optional[TapState]:
    spec = model.regulator_map[reg_id]
    cur = list(taps[reg_id])
    if spec.ganged:
        lead = model.regulator_phases(reg_id)[0]
        new = [cur[lead] + deltas] * 3
    else:
        new = list(cur)
        for p, d in deltas.items():
            new[p] = cur[p] + d
    if any(not spec.tap_min <= t <= spec.tap_max for t in new):
        return None
    return taps.with_taps(reg_id, new)


def tap_moves(model: FeederModel, a: TapState, b: TapState) -> int:
    """Single-step operations between two tap states (ganged devices count once)."""
    total = 0
    for spec in model.regulators:
        ta, tb = a[spec.id], b[spec.id]
        if spec.ganged:
            p = model.regulator_phases(spec.id)[0]
            total += abs(ta[p] - tb[p])
        else:
            total += sum(abs(ta[p] - tb[p]) for p in model.regulator_phases(spec.id))
    return total


def _tap_magnitude(model: FeederModel, taps: TapState) -> int:
    total = 0
    for spec in model.regulators:
        t = taps[spec.id]
        phases = model.regulator_phases(spec.id)
        total += abs(t[phases[0]]) if spec.ganged else sum(abs(t[p]) for p in phases)
    return total


def _downstream_nodes(model: FeederModel, reg_id: str, phase: Optional[int]) -> set:
    br = model.regulator_branch(reg_id)
    buses = model.downstream_buses(br.to_bus) | {br.to_bus}
    return {f"{b}.{'ABC'[p]}" for b in buses for p in model.bus_map[b].phases
            if phase is None or p == phase}


def downstream_directions(model: FeederModel, reg_id: str, report, cfg: OptimizerConfig) -> dict:
    """Allowed tap deltas per controlled channel of a downstream device.

    A channel (phase, or the whole device when ganged) with only under-voltage
    downstream may move up, only over-voltage may move down; channels with no
    violation, or with both kinds, stay put.
    """
    spec = model.regulator_map[reg_id]
    phases = model.regulator_phases(reg_id)
    channels = [None] if spec.ganged else list(phases)
    out = {}
    under = {lbl for lbl, _ in report.under}
    over = {lbl for lbl, _ in report.over}
    for ch in channels:
        nodes = _downstream_nodes(model, reg_id, ch)
        uv, ov = bool(nodes & under), bool(nodes & over)
        if uv and not ov:
            out[ch] = cfg.window_up()
        elif ov and not uv:
            out[ch] = cfg.window_down()
        else:
            out[ch] = (0,)
    return out


def _expand(model: FeederModel, taps: TapState, downstream: list, dirs: dict):
    """All direction-consistent downstream tap states (excluding no-move)."""
    axes = []
    for reg_id in downstream:
        for ch, deltas in dirs[reg_id].items():
            axes.append((reg_id, ch, deltas))
    for combo in itertools.product(*[a[2] for a in axes]):
        if not any(combo):
            continue
        state = taps
        for (reg_id, ch, _), d in zip(axes, combo):
            if d == 0:
                continue
            spec = model.regulator_map[reg_id]
            state = _shift(model, state, reg_id, d if spec.ganged else {ch: d})
            if state is None:
                break
        if state is not None:
            yield state


def _rank_key(model: FeederModel, origin: TapState, item):
    taps, vvar, _ = item
    return (vvar, tap_moves(model, origin, taps), _tap_magnitude(model, taps))


def tap_search(model: FeederModel, inj: InjectionSet, q_g, taps: TapState, cfg: OptimizerConfig,
               slots: Optional[Sequence[int]] = None) -> TapSearchResult:
    """Pruned search over tap moves, candidates ranked by voltage variance."""
    slots = tuple(model.smart_slots if slots is None else slots)
    ev = _Evaluator(model, inj, taps, slots)
    q_g = np.zeros(len(slots)) if q_g is None else np.asarray(q_g, float)
    seen = {}

    def evaluate(state: TapState):
        key = state.key()
        if key not in seen:
            try:
                seen[key] = (state, ev(q_g, taps=state))
            except PowerFlowError:
                seen[key] = (state, None)
        return seen[key][1]

    base = evaluate(taps)
    if base is not None and _violation(base, cfg).ok:
        cand = [(taps, voltage_variance(base, cfg.v_ref), base)]
        return TapSearchResult(cand, ev.count)

    order = [r.id for r in model.regulators_by_depth()]
    if not order:
        return TapSearchResult([], ev.count, _closest(seen, cfg))
    upstream, downstream = order[0], order[1:]
    up_spec = model.regulator_map[upstream]
    feasible = []
    for delta in cfg.tap_window:
        if up_spec.ganged:
            state = _shift(model, taps, upstream, delta)
        else:
            state = _shift(model, taps, upstream, {p: delta for p in model.regulator_phases(upstream)})
        if state is None:
            continue
        sol = evaluate(state)
        if sol is None:
            continue
        report = _violation(sol, cfg)
        if report.ok:
            feasible.append((state, voltage_variance(sol, cfg.v_ref), sol))
            continue
        if not downstream:
            continue
        dirs = {r: downstream_directions(model, r, report, cfg) for r in downstream}
        if not _fixable(model, report, downstream):
            continue
        for cand in _expand(model, state, downstream, dirs):
            csol = evaluate(cand)
            if csol is not None and _violation(csol, cfg).ok:
                feasible.append((cand, voltage_variance(csol, cfg.v_ref), csol))
    unique = {}
    for item in feasible:
        unique.setdefault(item[0].key(), item)
    ranked = sorted(unique.values(), key=lambda it: _rank_key(model, taps, it))
    return TapSearchResult(ranked, ev.count, None if ranked else _closest(seen, cfg))


def _fixable(model: FeederModel, report, downstream: list) -> bool:
    """Every violation sits below some downstream device (otherwise no move can clear it)."""
    covered = set()
    for reg_id in downstream:
        covered |= _downstream_nodes(model, reg_id, None)
    return all(lbl in covered for lbl, _ in report.under + report.over)


def _closest(seen: dict, cfg: OptimizerConfig):
    best = None
    for state, sol in seen.values():
        if sol is None:
            continue
        mag = _violation(sol, cfg).magnitude()
        if best is None or mag < best[1]:
            best = (state, mag, sol)
    return best


def exhaustive_tap_search(model: FeederModel, inj: InjectionSet, q_g, taps: TapState, cfg: OptimizerConfig,
                          slots: Optional[Sequence[int]] = None, consistent_only: bool = True):
    """Reference search over the full window cross-product.

    With ``consistent_only`` the downstream moves are filtered by the same
    direction rule the pruned search applies (judged from the upstream-only
    power flow).  Returns candidates ranked like :func:`tap_search`.
    """
    slots = tuple(model.smart_slots if slots is None else slots)
    ev = _Evaluator(model, inj, taps, slots)
    q_g = np.zeros(len(slots)) if q_g is None else np.asarray(q_g, float)
    order = [r.id for r in model.regulators_by_depth()]
    channels = []
    for reg_id in order:
        spec = model.regulator_map[reg_id]
        for ch in ([None] if spec.ganged else model.regulator_phases(reg_id)):
            channels.append((reg_id, ch))
    upstream = order[0]
    up_channels = [c for c in channels if c[0] == upstream]
    down_channels = [c for c in channels if c[0] != upstream]
    out = []
    for up_combo in itertools.product(cfg.tap_window, repeat=len(up_channels)):
        if len(set(up_combo)) > 1:
            continue  # upstream device moves as one unit in the pruned rule
        state = _apply_channels(model, taps, up_channels, up_combo)
        if state is None:
            continue
        up_sol = ev(q_g, taps=state)
        report = _violation(up_sol, cfg)
        if report.ok:
            out.append((state, voltage_variance(up_sol, cfg.v_ref), up_sol))
            continue
        dirs = {r: downstream_directions(model, r, report, cfg) for r in order[1:]}
        for combo in itertools.product(cfg.tap_window, repeat=len(down_channels)):
            if consistent_only and any(d != 0 and d not in dirs[r][ch] for (r, ch), d in zip(down_channels, combo)):
                continue
            cand = _apply_channels(model, state, down_channels, combo)
            if cand is None:
                continue
            sol = ev(q_g, taps=cand)
            if _violation(sol, cfg).ok:
                out.append((cand, voltage_variance(sol, cfg.v_ref), sol))
    unique = {}
    for item in out:
        unique.setdefault(item[0].key(), item)
    return sorted(unique.values(), key=lambda it: _rank_key(model, taps, it)), ev.count


def _apply_channels(model, taps, channels, deltas):
    state = taps
    for (reg_id, ch), d in zip(channels, deltas):
        if d == 0:
            continue
        spec = model.regulator_map[reg_id]
        state = _shift(model, state, reg_id, d if spec.ganged or ch is None else {ch: d})
        if state is None:
            return None
    return state


# ---------------------------------------------------------------------------
# orchestration

def run_vvo(model: FeederModel, inj: InjectionSet, taps: TapState, cfg: Optional[OptimizerConfig] = None,
            q0: Optional[np.ndarray] = None, slots: Optional[Sequence[int]] = None) -> VvoResult:
    """One supervisory interval: feasibility stage then loss stage."""
    cfg = cfg or OptimizerConfig()
    slots = tuple(model.smart_slots if slots is None else slots)
    q_lim = slot_limits(model, inj, slots)
    q_entry = _project(np.zeros(len(slots)) if q0 is None else np.asarray(q0, float), q_lim)
    ev = _Evaluator(model, inj, taps, slots)
    entry = ev(q_entry)
    entry_mag = _violation(entry, cfg).magnitude()

    q, sol, cur_taps = q_entry, entry, taps
    s1_trace, search = [], None
    if not _violation(entry, cfg).ok:
        s1 = stage1_inverter_opt(model, inj, taps, cfg, q_entry, slots, ev, base=entry)
        q, sol, s1_trace = s1.q, s1.solution, s1.trace
        if not _violation(sol, cfg).ok or s1.saturated:
            search = tap_search(model, inj, q, taps, cfg, slots)
            if search.candidates:
                cur_taps, _, sol = search.candidates[0]
            elif search.closest is not None and search.closest[1] < _violation(sol, cfg).magnitude():
                cur_taps, _, sol = search.closest
            if cur_taps is not taps and not _violation(sol, cfg).ok:
                # a second flattening pass at the new taps
                ev2 = _Evaluator(model, inj, cur_taps, slots)
                s1b = stage1_inverter_opt(model, inj, cur_taps, cfg, q, slots, ev2, base=sol)
                q, sol = s1b.q, s1b.solution
                s1_trace = s1_trace + [(len(s1_trace) + r[0], r[1], r[2]) for r in s1b.trace[1:]]

    feasible = _violation(sol, cfg).ok
    s2_trace = []
    if feasible:
        ev2 = _Evaluator(model, inj, cur_taps, slots)
        s2 = stage2_loss_opt(model, inj, cur_taps, q, cfg, slots, ev2, base=sol)
        q, sol, s2_trace = s2.q, s2.solution, s2.trace

    if _violation(sol, cfg).magnitude() > entry_mag:
        q, sol, cur_taps = q_entry, entry, taps
        feasible = _violation(sol, cfg).ok

    nodes = [model.inverter_slots[s][2] for s in slots]
    return VvoResult(taps=cur_taps, slots=slots, q_g=q.copy(), v_g=sol.v[nodes].copy(), q_lim=q_lim,
                     feasible=feasible, solution=sol, stage1_trace=s1_trace, stage2_trace=s2_trace,
                     tap_search=search, loss_kw=loss_kw(sol))
