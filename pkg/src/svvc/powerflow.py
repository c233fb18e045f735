"""Unbalanced three-phase backward-forward sweep power flow.

The sweep walks the radial tree twice per iteration: the backward pass
accumulates drawn node currents into branch currents (scaled by the ratio
of every ideal regulator crossed), the forward pass propagates voltage drops
``Z @ J`` and regulator ratios away from the source.  For fixed taps both
passes are linear, so they are linearised once per tap state into dense
operators and each iteration is two matrix products (``method="matrix"``).
``method="loop"`` runs the literal branch-by-branch passes every iteration.

Powers are per-unit on the per-phase base ``base_mva/3``; voltages per-unit
on each bus line-to-neutral base.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from svvc.devices import TapState, var_limit
from svvc.feeder.admittance import branch_ratios, build_admittance, full_admittance
from svvc.feeder.model import DELTA, DELTA_PAIRS, PHASES, FeederModel

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100
LOAD_EXPONENT = {"pq": 0, "i": 1, "z": 2}
_SQRT3 = math.sqrt(3.0)


class PowerFlowError(RuntimeError):
    """Sweep failed to converge; carries the final mismatch."""

    def __init__(self, message: str, mismatch: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class InjectionSet:
    """Per phase-node injections in kW/kvar plus the load scaling factor.

    ``p_g``/``q_g`` are inverter generation (positive = injection into the
    network).  ``p_l``/``q_l`` are extra constant-power consumption on top of
    the model's loads, which are scaled by ``load_mult`` and evaluated with
    their own voltage dependence.
    """

    load_mult: float
    p_g: np.ndarray
    q_g: np.ndarray
    p_l: np.ndarray
    q_l: np.ndarray
    pv_mult: float = 0.0

    @classmethod
    def empty(cls, model: FeederModel, load_mult: float = 1.0) -> InjectionSet:
        z = np.zeros(model.n_nodes)
        return cls(float(load_mult), z, z.copy(), z.copy(), z.copy())

    @classmethod
    def build(cls, model: FeederModel, load_mult: float = 1.0, pv_mult: float = 0.0,
              q_slots: Optional[np.ndarray] = None) -> InjectionSet:
        inj = replace(cls.empty(model, load_mult), pv_mult=float(pv_mult))
        p = inj.p_g
        for slot, (k, _, node) in enumerate(model.inverter_slots):
            p[node] += slot_p_kw(model, slot, pv_mult)
        if q_slots is not None:
            inj = inj.with_slot_q(model, q_slots)
        return inj

    def with_slot_q(self, model: FeederModel, q_slots) -> InjectionSet:
        """Replace inverter Var injections; ``q_slots`` covers every inverter slot (kvar)."""
        q_slots = np.asarray(q_slots, dtype=float)
        if q_slots.shape != (len(model.inverter_slots),):
            raise ValueError(f"expected {len(model.inverter_slots)} slot values, got {q_slots.shape}")
        q = np.zeros(model.n_nodes)
        nodes = [node for _, _, node in model.inverter_slots]
        np.add.at(q, nodes, q_slots)
        return replace(self, q_g=q)

    def slot_q(self, model: FeederModel) -> np.ndarray:
        """Var injection per inverter slot (assumes one inverter per phase-node)."""
        return np.array([self.q_g[node] for _, _, node in model.inverter_slots])

    def drawn_pu(self, model: FeederModel) -> np.ndarray:
        """Constant-power part drawn from the network, p.u. complex."""
        return ((self.p_l - self.p_g) + 1j * (self.q_l - self.q_g)) / model.phase_base_kva


def slot_p_kw(model: FeederModel, slot: int, pv_mult: float) -> float:
    k, _, _ = model.inverter_slots[slot]
    site = model.inverters[k]
    return site.phase_share(site.p_rating_kw) * pv_mult


def slot_q_limit(model: FeederModel, slot: int, pv_mult: float) -> float:
    """Per-phase Var capability from the instantaneous PV output."""
    k, _, _ = model.inverter_slots[slot]
    site = model.inverters[k]
    return var_limit(site.phase_share(site.s_rating_kva), slot_p_kw(model, slot, pv_mult))


def slot_limits(model: FeederModel, inj: InjectionSet, slots: Sequence[int]) -> np.ndarray:
    return np.array([slot_q_limit(model, s, inj.pv_mult) for s in slots])


@dataclass(frozen=True, eq=False)
class PhasorSolution:
    model: FeederModel
    V: np.ndarray             # complex p.u. per phase-node
    J: np.ndarray             # current into each phase-node's feeding branch (p.u.); source rows = source current
    iterations: int
    mismatch: float           # max nodal complex-power mismatch, p.u.
    taps: TapState
    inj: InjectionSet
    I_draw: np.ndarray = field(repr=False, default=None)  # load+generation current drawn per node

    @property
    def v(self) -> np.ndarray:
        return np.abs(self.V)

    @property
    def theta(self) -> np.ndarray:
        return np.angle(self.V)

    def voltage(self, bus: str, phase: str | int) -> complex:
        p = PHASES.index(phase) if isinstance(phase, str) else phase
        return self.V[self.model.node_index[(bus, p)]]

    def monitored_v(self) -> np.ndarray:
        return self.v[monitored_nodes(self.model)]


def monitored_nodes(model: FeederModel) -> np.ndarray:
    """Every phase-node except the (fixed) source bus."""
    def make():
        src = set(model.source_nodes.tolist())
        return np.array([i for i in range(model.n_nodes) if i not in src], dtype=int)
    return model.memo("monitored", make)


def node_label(model: FeederModel, i: int) -> str:
    bus, p = model.nodes[i]
    return f"{bus}.{PHASES[p]}"


# ---------------------------------------------------------------------------
# load kernel (tap independent)

@dataclass(frozen=True, eq=False)
class _LoadKernel:
    w_idx: np.ndarray
    w_s0: np.ndarray
    w_k: np.ndarray
    w_inc: sp.csr_matrix
    d_p: np.ndarray
    d_q: np.ndarray
    d_s0: np.ndarray
    d_k: np.ndarray
    d_inc: sp.csr_matrix

    def currents(self, V: np.ndarray, load_mult: float) -> np.ndarray:
        """Current drawn by the modelled loads, shape like ``V`` (n, k)."""
        out = np.zeros_like(V)
        if len(self.w_idx):
            Vw = V[self.w_idx]
            S = (self.w_s0 * load_mult)[:, None] * np.abs(Vw) ** self.w_k[:, None]
            out += self.w_inc @ np.conj(S / Vw)
        if len(self.d_p):
            Vd = V[self.d_p] - V[self.d_q]
            S = (self.d_s0 * load_mult)[:, None] * (np.abs(Vd) / _SQRT3) ** self.d_k[:, None]
            out += self.d_inc @ np.conj(S / Vd)
        return out

    def power(self, V: np.ndarray, load_mult: float) -> complex:
        """Total complex power consumed by the modelled loads (p.u.)."""
        total = 0j
        if len(self.w_idx):
            total += np.sum(self.w_s0 * load_mult * np.abs(V[self.w_idx]) ** self.w_k)
        if len(self.d_p):
            Vd = V[self.d_p] - V[self.d_q]
            total += np.sum(self.d_s0 * load_mult * (np.abs(Vd) / _SQRT3) ** self.d_k)
        return complex(total)


def _build_kernel(model: FeederModel) -> _LoadKernel:
    n = model.n_nodes
    base = model.phase_base_kva
    wye, delta = [], []
    for ld in model.loads:
        k = LOAD_EXPONENT[ld.model]
        parts = [(ld.bus, 1.0 - ld.distributed_fraction)]
        if ld.distributed_fraction > 0:
            parts.append((model.parent_bus(ld.bus), ld.distributed_fraction))
        for bus, frac in parts:
            if frac == 0:
                continue
            for ph in range(3):
                s = (ld.p_kw[ph] + 1j * ld.q_kvar[ph]) * frac / base
                if s == 0:
                    continue
                if ld.conn == DELTA:
                    a, b = DELTA_PAIRS[ph]
                    delta.append((model.node_index[(bus, a)], model.node_index[(bus, b)], s, k))
                else:
                    wye.append((model.node_index[(bus, ph)], s, k))
    w_idx = np.array([w[0] for w in wye], dtype=int)
    w_inc = sp.csr_matrix((np.ones(len(wye)), (w_idx, np.arange(len(wye)))), shape=(n, len(wye)))
    d_p = np.array([d[0] for d in delta], dtype=int)
    d_q = np.array([d[1] for d in delta], dtype=int)
    m = len(delta)
    d_inc = sp.csr_matrix((np.r_[np.ones(m), -np.ones(m)],
                           (np.r_[d_p, d_q], np.r_[np.arange(m), np.arange(m)])), shape=(n, m))
    return _LoadKernel(w_idx, np.array([w[1] for w in wye], complex), np.array([w[2] for w in wye], float),
                       w_inc, d_p, d_q, np.array([d[2] for d in delta], complex),
                       np.array([d[3] for d in delta], float), d_inc)


def load_kernel(model: FeederModel) -> _LoadKernel:
    return model.memo("kernel", lambda: _build_kernel(model))


# ---------------------------------------------------------------------------
# sweep passes

def source_voltage(model: FeederModel) -> np.ndarray:
    ang = math.radians(model.source_angle_deg)
    shifts = np.radians([0.0, -120.0, 120.0])
    src = model.source
    return np.array([model.source_pu * np.exp(1j * (ang + shifts[p])) for p in sorted(src.phases)])


def _branch_plan(model: FeederModel, taps: TapState):
    ratios = branch_ratios(model, taps)
    plan = []
    for br in model.branch_order:
        phases = sorted(model.bus_map[br.to_bus].phases)
        f = np.array([model.node_index[(br.from_bus, p)] for p in phases])
        t = np.array([model.node_index[(br.to_bus, p)] for p in phases])
        if br.series:
            z = br.z_ohm[np.ix_(phases, phases)] / model.z_base(br.to_bus)
            plan.append((f, t, None, z))
        else:
            plan.append((f, t, ratios[br.name][phases], None))
    return plan


def backward_pass(plan, I: np.ndarray) -> np.ndarray:
    """Accumulate drawn currents ``I`` (n, k) toward the source.

    Row ``i`` of the result is the current flowing into node ``i`` through
    its feeding branch; source rows hold the total source current.
    """
    acc = np.array(I, dtype=complex, copy=True)
    for f, t, ratio, _ in reversed(plan):
        if ratio is None:
            acc[f] += acc[t]
        else:
            acc[f] += ratio[:, None] * acc[t]
    return acc


def forward_pass(plan, model: FeederModel, v_source: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Propagate voltages from the source given branch currents ``J`` (n, k)."""
    V = np.zeros(J.shape, dtype=complex)
    V[model.source_nodes] = v_source[:, None] if v_source.ndim == 1 else v_source
    for f, t, ratio, z in plan:
        if ratio is None:
            V[t] = V[f] - z @ J[t]
        else:
            V[t] = ratio[:, None] * V[f]
    return V


@dataclass(frozen=True, eq=False)
class _SweepOperators:
    plan: list
    A: np.ndarray       # backward pass as a matrix
    T: np.ndarray       # forward(0, backward(I)) as a matrix
    v_open: np.ndarray  # forward(source, 0)
    y_red: sp.csr_matrix
    c_t: sp.csr_matrix
    reduced: np.ndarray
    check_rows: np.ndarray  # reduced rows checked for mismatch (non-source)
    y_shunt: sp.csr_matrix


def sweep_operators(model: FeederModel, taps: TapState) -> _SweepOperators:
    def make():
        n = model.n_nodes
        plan = _branch_plan(model, taps)
        eye = np.eye(n, dtype=complex)
        A = backward_pass(plan, eye)
        zero_src = np.zeros(len(model.source_nodes), complex)
        Zop = forward_pass(plan, model, zero_src, eye)
        v_open = forward_pass(plan, model, source_voltage(model), np.zeros((n, 1), complex))[:, 0]
        adm = build_admittance(model, taps)
        src = set(model.source_nodes.tolist())
        check = np.array([k for k, full in enumerate(adm.reduced) if int(full) not in src], dtype=int)
        _, y_shunt = full_admittance(model)
        return _SweepOperators(plan, A.real.copy(), Zop @ A, v_open, adm.Y, adm.C.T.tocsr(),
                               adm.reduced, check, y_shunt)

    return model.memo(("sweep", taps.key()), make)


def _mismatch(ops: _SweepOperators, V: np.ndarray, I_draw: np.ndarray) -> np.ndarray:
    """Per-column max nodal complex-power mismatch (p.u.)."""
    Vr = V[ops.reduced]
    r = ops.y_red @ Vr + ops.c_t @ I_draw
    s = np.abs(Vr * np.conj(r))[ops.check_rows]
    if s.size == 0:
        return np.zeros(V.shape[1])
    return s.max(axis=0)


def _iterate(model, ops, kernel, s_const, load_mult, V0, tol, max_iter, method="matrix", trace=None):
    V = V0
    mis = np.full(V.shape[1], np.inf)
    for it in range(max_iter + 1):
        I_draw = kernel.currents(V, load_mult) + np.conj(s_const / V)
        mis = _mismatch(ops, V, I_draw)
        if trace is not None:
            trace.append((it, float(mis.max())))
        worst = float(mis.max())
        if not np.isfinite(worst) or worst > 1e6:
            raise PowerFlowError(f"power flow diverged after {it} sweeps (mismatch {worst:.3g})", worst, it)
        if worst <= tol:
            return V, I_draw, it, worst
        if it == max_iter:
            break
        I_sweep = I_draw + ops.y_shunt @ V
        if method == "loop":
            J = backward_pass(ops.plan, I_sweep)
            V = forward_pass(ops.plan, model, source_voltage(model), J)
        else:
            V = ops.v_open[:, None] + ops.T @ I_sweep
    raise PowerFlowError(f"power flow did not converge in {max_iter} sweeps (mismatch {worst:.3g})",
                         worst, max_iter)


def flat_start(model: FeederModel, taps: TapState) -> np.ndarray:
    ops = sweep_operators(model, taps)
    return ops.v_open.copy()


def solve(model: FeederModel, inj: InjectionSet, taps: Optional[TapState] = None, *,
          tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          v0: Optional[np.ndarray] = None, method: str = "matrix",
          trace_path: Optional[str | Path] = None) -> PhasorSolution:
    """Solve the power flow for one operating point.

    ``v0`` warm-starts the sweep (defaults to the no-load voltages).  When
    ``trace_path`` is given the per-sweep mismatch is written there as CSV.
    """
    taps = model.default_taps() if taps is None else taps
    taps.validate(model.regulators)
    ops = sweep_operators(model, taps)
    kernel = load_kernel(model)
    start = ops.v_open if v0 is None else np.asarray(v0, complex)
    trace = [] if trace_path is not None else None
    try:
        V, I_draw, it, mis = _iterate(model, ops, kernel, inj.drawn_pu(model)[:, None], inj.load_mult,
                                      start[:, None].copy(), tol, max_iter, method, trace)
    finally:
        if trace_path is not None:
            with open(trace_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sweep", "mismatch_pu"])
                w.writerows(trace)
    I_sweep = I_draw + ops.y_shunt @ V
    J = (ops.A @ I_sweep)[:, 0]
    return PhasorSolution(model, V[:, 0], J, it, mis, taps, inj, I_draw[:, 0])


def solve_batch(model: FeederModel, taps: TapState, s_const: np.ndarray, load_mult: float,
                v0: np.ndarray, v_tol: float = 1e-13, max_iter: int = 200) -> np.ndarray:
    """Solve several injection columns at once; returns complex voltages (n, k).

    Tight solves stop on the voltage update rather than the power mismatch,
    whose floor is set by round-off in the largest admittances.
    """
    ops = sweep_operators(model, taps)
    kernel = load_kernel(model)
    V = v0.copy()
    step = np.inf
    for _ in range(max_iter):
        I_sweep = kernel.currents(V, load_mult) + np.conj(s_const / V) + ops.y_shunt @ V
        V_new = ops.v_open[:, None] + ops.T @ I_sweep
        step = float(np.max(np.abs(V_new - V)))
        V = V_new
        if not np.isfinite(step) or step > 1e3:
            break
        if step <= v_tol:
            return V
    raise PowerFlowError(f"batched power flow did not converge (last update {step:.3g})", step, max_iter)


# ---------------------------------------------------------------------------
# losses and limits

def series_loss_pu(model: FeederModel, V: np.ndarray) -> float:
    """Series-element loss from the nodal quadratic form (p.u.).

    -1/2 * sum_{i != j} G_ij (v_i^2 + v_j^2 - 2 v_i v_j cos(theta_i - theta_j))
    over the full-network series admittance.  Equivalent to
    sum Re(conj(V_i) Y_ij V_j) because series rows sum to zero.
    """
    i, j, g = _offdiag_g(model)
    # v_i^2 + v_j^2 - 2 v_i v_j cos(.) is |V_i - V_j|^2.  Short lines give
    # |G| ~ 1e4-1e5 whose inter-phase terms cancel almost completely, so the
    # sum is formed in extended precision.
    Vl = np.asarray(V).astype(np.clongdouble)
    d = Vl[i] - Vl[j]
    return float(-0.5 * np.sum(g.astype(np.longdouble) * (d.real * d.real + d.imag * d.imag)))


def _offdiag_g(model: FeederModel):
    def make():
        y_series, _ = full_admittance(model)
        coo = sp.coo_matrix(y_series.real)
        keep = (coo.row != coo.col) & (coo.data != 0)
        return coo.row[keep], coo.col[keep], coo.data[keep]
    return model.memo("g_offdiag", make)


def loss_partials(model: FeederModel, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d(loss)/d|v| and d(loss)/dtheta of the quadratic form (p.u.)."""
    i, j, g = _offdiag_g(model)
    v = np.abs(V)
    th = np.angle(V)
    c = np.cos(th[i] - th[j])
    s = np.sin(th[i] - th[j])
    dv = np.zeros(len(v))
    dth = np.zeros(len(v))
    # each unordered pair appears twice (i,j) and (j,i); differentiate term by term
    np.add.at(dv, i, -0.5 * g * (2 * v[i] - 2 * v[j] * c))
    np.add.at(dv, j, -0.5 * g * (2 * v[j] - 2 * v[i] * c))
    np.add.at(dth, i, -0.5 * g * (2 * v[i] * v[j] * s))
    np.add.at(dth, j, -0.5 * g * (-2 * v[i] * v[j] * s))
    return dv, dth


def branch_loss_pu(model: FeederModel, solution: PhasorSolution) -> float:
    """Sum over series branches of Re(I^H Z I) (p.u.), with I = Z^-1 (V_from - V_to)."""
    ops = sweep_operators(model, solution.taps)
    V = solution.V
    total = 0.0
    for f, t, ratio, z in ops.plan:
        if ratio is None:
            i = np.linalg.solve(z, V[f] - V[t])
            total += float(np.real(np.conj(i) @ (z @ i)))
    return total


def total_loss(model: FeederModel, solution: PhasorSolution) -> float:
    """Network loss in kW."""
    return series_loss_pu(model, solution.V) * model.phase_base_kva


def power_balance(model: FeederModel, solution: PhasorSolution) -> dict:
    """Real-power bookkeeping in kW: source, load and generation totals."""
    base = model.phase_base_kva
    src = model.source_nodes
    p_source = float(np.real(np.sum(solution.V[src] * np.conj(solution.J[src])))) * base
    kernel = load_kernel(model)
    p_load = kernel.power(solution.V, solution.inj.load_mult).real * base + float(np.sum(solution.inj.p_l))
    p_gen = float(np.sum(solution.inj.p_g))
    return {"source_kw": p_source, "load_kw": p_load, "generation_kw": p_gen,
            "loss_kw": total_loss(model, solution)}


@dataclass(frozen=True)
class ViolationReport:
    under: list
    over: list
    v_min: float = 0.95
    v_max: float = 1.05

    @property
    def n_under(self) -> int:
        return len(self.under)

    @property
    def n_over(self) -> int:
        return len(self.over)

    @property
    def ok(self) -> bool:
        return not self.under and not self.over

    def magnitude(self) -> float:
        """Largest distance outside the band (0 when feasible)."""
        worst = 0.0
        for _, v in self.under:
            worst = max(worst, self.v_min - v)
        for _, v in self.over:
            worst = max(worst, v - self.v_max)
        return worst


def check_limits(solution: PhasorSolution, v_min: float = 0.95, v_max: float = 1.05,
                 nodes: Optional[Sequence[int]] = None) -> ViolationReport:
    """Closed-interval band check; values exactly on a limit are not violations."""
    model = solution.model
    idx = monitored_nodes(model) if nodes is None else np.asarray(nodes, dtype=int)
    v = solution.v[idx]
    under = [(node_label(model, int(i)), float(x)) for i, x in zip(idx, v) if x < v_min]
    over = [(node_label(model, int(i)), float(x)) for i, x in zip(idx, v) if x > v_max]
    return ViolationReport(under, over, v_min, v_max)


# ---------------------------------------------------------------------------
# sensitivities

@dataclass(frozen=True, eq=False)
class Sensitivity:
    """Response of every phase-node to unit Var injection at each slot.

    ``dv`` and ``dtheta`` have shape (n_nodes, n_slots) in p.u. voltage (or
    radians) per p.u. Var on the per-phase base.
    """

    slots: tuple[int, ...]
    dv: np.ndarray
    dtheta: np.ndarray
    base: PhasorSolution

    def per_kvar(self) -> np.ndarray:
        return self.dv / self.base.model.phase_base_kva


def voltage_sensitivity(model: FeederModel, solution: PhasorSolution,
                        slots: Optional[Sequence[int]] = None, h: float = 1e-4,
                        mode: str = "forward") -> Sensitivity:
    """Finite-difference sensitivity d|v|/dq by perturbed re-solves.

    ``mode`` is ``"forward"`` (one-sided, default) or ``"central"``.  All
    perturbed cases are swept together from the base point.
    """
    if mode not in ("forward", "central"):
        raise ValueError(f"unknown sensitivity mode {mode!r}")
    slots = tuple(model.smart_slots if slots is None else slots)
    taps, inj = solution.taps, solution.inj
    s0 = inj.drawn_pu(model)
    base_V = solve_batch(model, taps, s0[:, None], inj.load_mult, solution.V[:, None].copy())
    m = len(slots)
    if m == 0:
        z = np.zeros((model.n_nodes, 0))
        return Sensitivity(slots, z, z.copy(), solution)
    nodes = [model.inverter_slots[s][2] for s in slots]
    signs = (1.0,) if mode == "forward" else (1.0, -1.0)
    cols = []
    for sign in signs:
        S = np.repeat(s0[:, None], m, axis=1)
        S[nodes, np.arange(m)] -= 1j * sign * h  # more Var injection = less drawn
        cols.append(S)
    S = np.concatenate(cols, axis=1)
    V = solve_batch(model, taps, S, inj.load_mult, np.repeat(base_V, S.shape[1], axis=1))
    vb, tb = np.abs(base_V), np.angle(base_V)
    if mode == "forward":
        dv = (np.abs(V) - vb) / h
        dth = _wrap(np.angle(V) - tb) / h
    else:
        Vp, Vm = V[:, :m], V[:, m:]
        dv = (np.abs(Vp) - np.abs(Vm)) / (2 * h)
        dth = _wrap(np.angle(Vp) - np.angle(Vm)) / (2 * h)
    dv[model.source_nodes] = 0.0
    dth[model.source_nodes] = 0.0
    return Sensitivity(slots, dv, dth, solution)


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi
