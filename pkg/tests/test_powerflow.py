import csv
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feeders import build, five_bus_doc, three_bus_doc, two_bus_doc
from svvc import DATA_DIR
from svvc.feeder import build_admittance, load_feeder
from svvc.powerflow import (
    InjectionSet, PowerFlowError, branch_loss_pu, check_limits, power_balance, series_loss_pu, solve,
    total_loss, voltage_sensitivity,
)

PUBLISHED = Path(__file__).parent / "data" / "ieee34_published.csv"


def two_bus_closed_form(P, Q, R, X, v1=1.0):
    """Receiving-end phasor of a source behind R+jX feeding constant P+jQ."""
    a = v1 * v1 - 2 * (P * R + Q * X)
    v2 = np.sqrt((a + np.sqrt(a * a - 4 * (P * P + Q * Q) * (R * R + X * X))) / 2)
    th = -np.arctan2(X * P - R * Q, v2 * v2 + R * P + X * Q)
    return v2 * np.exp(1j * th)


def per_unit_two_bus(P, Q, R, X, kv=2.4, source_pu=1.0):
    base = 1000.0 / 3.0
    zb = kv * kv * 1000.0 / base
    return build(two_bus_doc(r=R * zb, x=X * zb, kw=P * base, kvar=Q * base, base_kv=kv, source_pu=source_pu))


def residual(sol):
    """Largest nodal complex-power mismatch of a solution, from the admittance matrix."""
    model = sol.model
    adm = build_admittance(model, sol.taps)
    Vr = sol.V[adm.reduced]
    r = adm.Y @ Vr + adm.C.T @ sol.I_draw
    src = set(model.source_nodes.tolist())
    rows = [k for k, full in enumerate(adm.reduced) if int(full) not in src]
    return float(np.max(np.abs(Vr * np.conj(r))[rows]))


@pytest.fixture(scope="module")
def ieee34():
    return load_feeder(DATA_DIR / "ieee34_mod.json")


@pytest.fixture(scope="module")
def ieee34_raw():
    return load_feeder(DATA_DIR / "ieee34_mod.json", apply_modifications=False)


def test_two_bus_matches_closed_form():
    m = per_unit_two_bus(0.1, 0.05, 0.01, 0.02)
    sol = solve(m, InjectionSet.build(m), tol=1e-10)
    assert abs(sol.V[1] - two_bus_closed_form(0.1, 0.05, 0.01, 0.02)) <= 1e-8


@given(st.floats(0.0, 0.4), st.floats(0.0, 0.3), st.floats(0.005, 0.05), st.floats(0.005, 0.08),
       st.floats(0.95, 1.05))
@settings(max_examples=60, deadline=None)
def test_two_bus_closed_form_property(P, Q, R, X, v1):
    m = per_unit_two_bus(P, Q, R, X, source_pu=v1)
    sol = solve(m, InjectionSet.build(m), tol=1e-11)
    assert abs(sol.V[1] - two_bus_closed_form(P, Q, R, X, v1)) <= 1e-8


def test_unmodified_ieee34_matches_published(ieee34_raw):
    sol = solve(ieee34_raw, InjectionSet.build(ieee34_raw))
    worst = 0.0
    with open(PUBLISHED, newline="") as fh:
        for row in csv.DictReader(fh):
            v = abs(sol.voltage(row["bus"], row["phase"]))
            worst = max(worst, abs(v - float(row["v_pu"])))
    assert worst <= 1e-3


def test_unmodified_ieee34_angles(ieee34_raw):
    sol = solve(ieee34_raw, InjectionSet.build(ieee34_raw))
    with open(PUBLISHED, newline="") as fh:
        for row in csv.DictReader(fh):
            ang = np.degrees(np.angle(sol.voltage(row["bus"], row["phase"])))
            diff = (ang - float(row["angle_deg"]) + 180) % 360 - 180
            assert abs(diff) < 0.05, row


def test_loop_and_matrix_sweeps_agree(ieee34):
    taps = ieee34.default_taps().with_taps("VR1", (3, -2, 5))
    inj = InjectionSet.build(ieee34, 0.8, 0.6)
    a = solve(ieee34, inj, taps, tol=1e-10)
    b = solve(ieee34, inj, taps, tol=1e-10, method="loop")
    assert np.max(np.abs(a.V - b.V)) < 1e-9


@given(st.floats(0.1, 1.3), st.floats(0.0, 1.0), st.integers(-6, 6), st.integers(-8, 8),
       st.integers(-8, 8), st.integers(-8, 8))
@settings(max_examples=25, deadline=None)
def test_residual_and_loss_identities(ieee34, lm, pv, ltc, ta, tb, tc):
    taps = ieee34.default_taps().with_taps("LTC", (ltc,) * 3).with_taps("VR1", (ta, tb, tc))
    sol = solve(ieee34, InjectionSet.build(ieee34, lm, pv), taps)
    assert sol.mismatch <= 1e-6
    assert residual(sol) <= 1e-6
    q = series_loss_pu(ieee34, sol.V)
    assert q >= 0
    assert q == pytest.approx(branch_loss_pu(ieee34, sol), rel=1e-8)
    bal = power_balance(ieee34, sol)
    slack = ieee34.n_nodes * 1e-6 * ieee34.phase_base_kva
    assert abs(bal["source_kw"] - bal["load_kw"] + bal["generation_kw"] - bal["loss_kw"]) <= slack


@pytest.mark.parametrize("doc", [three_bus_doc(), five_bus_doc()], ids=["three-bus", "five-bus"])
def test_toy_feeders_residual(doc):
    m = build(doc)
    sol = solve(m, InjectionSet.build(m, 1.0, 0.7))
    assert residual(sol) <= 1e-6
    assert series_loss_pu(m, sol.V) == pytest.approx(branch_loss_pu(m, sol), rel=1e-8)


def test_source_fixed_and_regulator_ratio(ieee34):
    taps = ieee34.default_taps().with_taps("LTC", (4, 4, 4))
    sol = solve(ieee34, InjectionSet.build(ieee34, 0.5), taps)
    src = ieee34.source_nodes
    assert np.allclose(sol.v[src], ieee34.source_pu)
    ratio = sol.voltage("800", "A") / sol.voltage(ieee34.source.id, "A")
    assert ratio == pytest.approx(1 + 4 * 0.00625)


def test_more_load_means_lower_voltage(ieee34):
    lo = solve(ieee34, InjectionSet.build(ieee34, 0.5))
    hi = solve(ieee34, InjectionSet.build(ieee34, 1.0))
    assert hi.v.min() < lo.v.min()
    assert total_loss(ieee34, hi) > total_loss(ieee34, lo)


def test_single_solve_under_50ms(ieee34):
    inj = InjectionSet.build(ieee34, 1.0, 0.5)
    solve(ieee34, inj)
    times = []
    for k in range(5):
        taps = ieee34.default_taps().with_taps("VR1", (k + 1, k, k + 2))
        t0 = time.perf_counter()
        solve(ieee34, inj, taps)
        times.append(time.perf_counter() - t0)
    assert max(times) < 0.05


def test_divergence_raises():
    m = per_unit_two_bus(3.0, 2.0, 0.05, 0.1)
    with pytest.raises(PowerFlowError) as err:
        solve(m, InjectionSet.build(m))
    assert err.value.iterations >= 0


def test_trace_written(tmp_path, ieee34):
    path = tmp_path / "trace.csv"
    sol = solve(ieee34, InjectionSet.build(ieee34), trace_path=path)
    rows = path.read_text().splitlines()
    assert rows[0] == "sweep,mismatch_pu"
    assert len(rows) == sol.iterations + 2


def test_limit_check_inclusive():
    m = per_unit_two_bus(0.1, 0.05, 0.01, 0.02)
    sol = solve(m, InjectionSet.build(m))
    v = float(sol.v[1])
    assert check_limits(sol, v, 1.05).ok
    assert check_limits(sol, v + 1e-9, 1.05).n_under == 1
    assert check_limits(sol, 0.9, v - 1e-9).n_over == 1


def test_sensitivity_forward_matches_central(ieee34):
    sol = solve(ieee34, InjectionSet.build(ieee34, 0.8, 0.5))
    fwd = voltage_sensitivity(ieee34, sol)
    ctr = voltage_sensitivity(ieee34, sol, mode="central")
    assert np.allclose(fwd.dv, ctr.dv, rtol=1e-3, atol=1e-6)
    # injecting Vars raises the local voltage
    nodes = [ieee34.inverter_slots[s][2] for s in fwd.slots]
    assert np.all(fwd.dv[nodes, np.arange(len(nodes))] > 0)
    assert np.all(fwd.dv[ieee34.source_nodes] == 0)


def test_sensitivity_predicts_small_injection(ieee34):
    inj = InjectionSet.build(ieee34, 0.8, 0.5)
    sol = solve(ieee34, inj, tol=1e-10)
    sens = voltage_sensitivity(ieee34, sol)
    slot = sens.slots[0]
    dq = 5.0  # kvar
    q = inj.slot_q(ieee34)
    q[slot] += dq
    bumped = solve(ieee34, inj.with_slot_q(ieee34, q), tol=1e-10)
    predicted = sol.v + sens.per_kvar()[:, 0] * dq
    assert np.max(np.abs(bumped.v - predicted)) < 1e-5


def test_injection_set_validates_shape(ieee34):
    inj = InjectionSet.build(ieee34)
    with pytest.raises(ValueError):
        inj.with_slot_q(ieee34, np.zeros(3))
