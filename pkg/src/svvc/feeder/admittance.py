"""Per-unit nodal admittance over phase-nodes.

Regulators and switches are zero-impedance elements, so their to-side
phase-nodes are eliminated: with V_to = a * V_from the full-network
admittance reduces to ``C.T @ Y_full @ C``, which is the familiar
off-nominal-tap transformer model (off-diagonals scale by ``a``, the from
diagonal by ``a**2``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from svvc.devices import TapState
from svvc.feeder.model import FeederError, FeederModel


@dataclass(frozen=True, eq=False)
class AdmittanceView:
    model: FeederModel
    reduced: np.ndarray   # full phase-node indices kept in the reduced network
    C: sp.csr_matrix      # full x reduced voltage map, V_full = C @ V_red
    Y: sp.csr_matrix      # reduced admittance, p.u.
    Y_series: sp.csr_matrix  # full-network series-element admittance (no shunts)
    Y_shunt: sp.csr_matrix   # full-network shunt admittance (line charging, capacitors)

    @property
    def G(self) -> sp.csr_matrix:
        return self.Y.real.tocsr()

    @property
    def B(self) -> sp.csr_matrix:
        return self.Y.imag.tocsr()

    def to_reduced(self, v_full: np.ndarray) -> np.ndarray:
        return v_full[self.reduced]


def branch_ratios(model: FeederModel, taps: TapState) -> dict[str, np.ndarray]:
    """Per-phase voltage ratio for every zero-impedance branch."""
    out = {}
    for br in model.branches:
        if br.series:
            continue
        ratio = np.ones(3)
        if br.regulator is not None:
            spec = model.regulator_map[br.regulator]
            t = taps[spec.id]
            ratio = np.array([spec.ratio(t[p]) for p in range(3)])
        out[br.name] = ratio
    return out


def series_primitive(model: FeederModel, br) -> tuple[list[int], list[int], np.ndarray]:
    """(from nodes, to nodes, 3x3-restricted series admittance in p.u.)."""
    phases = sorted(model.bus_map[br.to_bus].phases)
    fidx = [model.node_index[(br.from_bus, p)] for p in phases]
    tidx = [model.node_index[(br.to_bus, p)] for p in phases]
    z = br.z_ohm[np.ix_(phases, phases)] / model.z_base(br.to_bus)
    try:
        y = np.linalg.inv(z)
    except np.linalg.LinAlgError:
        raise FeederError(f"branch {br.name}: singular impedance on present phases") from None
    return fidx, tidx, y


def _assemble(model: FeederModel):
    n = model.n_nodes
    rows, cols, vals = [], [], []
    srows, scols, svals = [], [], []
    for br in model.branches:
        phases = sorted(model.bus_map[br.to_bus].phases)
        fidx = [model.node_index[(br.from_bus, p)] for p in phases]
        tidx = [model.node_index[(br.to_bus, p)] for p in phases]
        if br.series:
            _, _, y = series_primitive(model, br)
            for a, ia in enumerate(fidx):
                for b, ib in enumerate(fidx):
                    rows += [ia, tidx[a], ia, tidx[a]]
                    cols += [ib, tidx[b], tidx[b], ib]
                    vals += [y[a, b], y[a, b], -y[a, b], -y[a, b]]
        ysh = br.y_shunt[np.ix_(phases, phases)] * model.z_base(br.to_bus) / 2.0
        if np.any(ysh != 0):
            for a in range(len(phases)):
                for b in range(len(phases)):
                    srows += [fidx[a], tidx[a]]
                    scols += [fidx[b], tidx[b]]
                    svals += [ysh[a, b], ysh[a, b]]
    for sh in model.shunts:
        kv_ratio = sh.kv / model.bus_map[sh.bus].base_kv
        for p in sorted(model.bus_map[sh.bus].phases):
            if sh.q_kvar[p] == 0:
                continue
            i = model.node_index[(sh.bus, p)]
            srows.append(i)
            scols.append(i)
            svals.append(1j * sh.q_kvar[p] / model.phase_base_kva / kv_ratio ** 2)
    y_series = sp.csr_matrix((np.array(vals, complex), (rows, cols)), shape=(n, n))
    y_shunt = sp.csr_matrix((np.array(svals, complex), (srows, scols)), shape=(n, n))
    return y_series, y_shunt


def full_admittance(model: FeederModel):
    """Series and shunt admittance over all phase-nodes (tap independent)."""
    return model.memo("y_full", lambda: _assemble(model))


def elimination_map(model: FeederModel, taps: TapState):
    n = model.n_nodes
    ratios = branch_ratios(model, taps)
    # row of C for each full node, as dict {reduced col: coeff}
    eliminated = set()
    for br in model.branches:
        if not br.series:
            for p in model.bus_map[br.to_bus].phases:
                eliminated.add(model.node_index[(br.to_bus, p)])
    reduced = np.array([i for i in range(n) if i not in eliminated], dtype=int)
    col_of = {int(full): k for k, full in enumerate(reduced)}
    row_map: dict[int, dict[int, float]] = {int(i): {col_of[int(i)]: 1.0} for i in reduced}
    for br in model.branch_order:
        if br.series:
            continue
        for p in model.bus_map[br.to_bus].phases:
            f = model.node_index[(br.from_bus, p)]
            t = model.node_index[(br.to_bus, p)]
            row_map[t] = {c: ratios[br.name][p] * v for c, v in row_map[f].items()}
    rows, cols, vals = [], [], []
    for i, entries in row_map.items():
        for c, v in entries.items():
            rows.append(i)
            cols.append(c)
            vals.append(v)
    C = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(reduced)))
    return reduced, C


def build_admittance(model: FeederModel, taps: TapState | None = None) -> AdmittanceView:
    """Reduced nodal admittance for the given tap positions."""
    taps = model.default_taps() if taps is None else taps
    taps.validate(model.regulators)

    def factory():
        y_series, y_shunt = full_admittance(model)
        reduced, C = elimination_map(model, taps)
        Y = (C.T @ (y_series + y_shunt) @ C).tocsr()
        return AdmittanceView(model, reduced, C, Y, y_series, y_shunt)

    return model.memo(("admittance", taps.key()), factory)
