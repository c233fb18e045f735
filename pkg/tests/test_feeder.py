import copy
import json

import numpy as np
import pytest

from feeders import build, five_bus_doc, ieee34_doc, three_bus_doc, two_bus_doc
from svvc import DATA_DIR
from svvc.feeder import FeederError, ProfileError, ProfileSet, build_admittance, load_feeder, load_profiles
from svvc.feeder.profiles import CONDITIONS, HEADER, synthesize


def test_three_bus_structure():
    m = build(three_bus_doc())
    assert m.n_nodes == 10
    assert m.source.id == "s"
    assert m.parent_bus("l") == "m"
    assert m.depth("e") == 2
    assert m.downstream_buses("m") == {"m", "e", "l"}
    assert [m.slot_label(s) for s in m.smart_slots] == ["pv.A", "pv.B", "pv.C"]


def test_linecode_scaled_by_length():
    m = build(three_bus_doc())
    br = m.branch_map["s-m"]
    assert br.z_ohm[0, 0] == pytest.approx(2.0 * (0.45 + 1.05j))
    # impedance restricted to the phases present at the to-bus
    lat = m.branch_map["m-l"].z_ohm
    assert lat[1, 1] != 0 and lat[0, 0] == 0 and lat[0, 1] == 0


def _mutate(doc, fn):
    doc = copy.deepcopy(doc)
    fn(doc)
    return doc


@pytest.mark.parametrize("fn, match", [
    (lambda d: d["buses"].append({"id": "m", "phases": "A", "base_kv": 7.2}), "duplicate bus"),
    (lambda d: d["buses"][1].update(source=True), "exactly one source"),
    (lambda d: d["branches"].append({"from": "e", "to": "l", "linecode": "oh", "length": 1}), "non-radial|cycle"),
    (lambda d: d["branches"].pop(1), "non-radial"),
    (lambda d: d["branches"][0].update(to="zz"), "unknown bus"),
    (lambda d: d["loads"][0].update(conn="star"), "wye"),
    (lambda d: d["loads"][3].update(kw=[50, 120, 0]), "phasing|phases"),
    (lambda d: d["inverters"][0].update(p_kw=400), "s_rating"),
    (lambda d: d["branches"][0].update(linecode="nope"), "unknown linecode"),
    (lambda d: d["buses"][0].pop("base_kv"), "base_kv"),
])
def test_invalid_feeders_rejected(fn, match):
    with pytest.raises(FeederError, match=match):
        build(_mutate(three_bus_doc(), fn))


def test_regulator_branch_needs_known_regulator():
    doc = five_bus_doc()
    doc["regulators"] = doc["regulators"][:1]
    with pytest.raises(FeederError, match="unknown regulator"):
        build(doc)


def test_regulators_ordered_by_depth():
    m = build(five_bus_doc())
    assert [r.id for r in m.regulators_by_depth()] == ["LTC", "VR"]
    assert m.regulator_map["LTC"].ganged
    assert m.regulator_phases("VR") == (0, 1, 2)


def test_bundled_feeder_modified_and_raw():
    mod = load_feeder(DATA_DIR / "ieee34_mod.json")
    raw = load_feeder(DATA_DIR / "ieee34_mod.json", apply_modifications=False)
    assert {r.id for r in raw.regulators} == {"VR1", "VR2"}
    assert {r.id for r in mod.regulators} == {"LTC", "VR1"}
    assert mod.regulator_map["LTC"].ganged
    assert mod.regulator_map["LTC"].v_set == 122 and mod.regulator_map["LTC"].time_delay == 30
    assert mod.regulator_map["VR1"].v_set == 120 and mod.regulator_map["VR1"].time_delay == 60
    assert not mod.shunts and raw.shunts
    assert len(mod.smart_slots) > 0
    assert len(raw.buses) == 36


def test_load_feeder_reports_parse_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"buses": [')
    with pytest.raises(FeederError, match="line"):
        load_feeder(p)
    with pytest.raises(FeederError):
        load_feeder(tmp_path / "missing.json")


def test_overlay_rejects_unknown_entries():
    from svvc.feeder import apply_overlay
    doc = ieee34_doc(modified=False)
    doc["overlay"] = {"remove": {"buses": ["nope"]}}
    with pytest.raises(FeederError, match="unknown entries"):
        apply_overlay(doc)


# ---------------------------------------------------------------------------
# admittance

def test_series_admittance_rows_sum_to_zero():
    m = build(three_bus_doc())
    adm = build_admittance(m)
    rows = np.asarray(adm.Y_series.sum(axis=1)).ravel()
    assert np.max(np.abs(rows)) < 1e-9


def test_reduced_admittance_tap_scaling():
    m = build(five_bus_doc())
    taps = m.default_taps().with_taps("VR", (4, 0, -2))
    adm = build_admittance(m, taps)
    # every kept node maps to a product of ratios; check the VR to-side scaling
    i = m.node_index[("b2r", 0)]
    j = m.node_index[("b2", 0)]
    col = list(adm.reduced).index(j)
    assert adm.C[i, col] == pytest.approx(1 + 4 * 0.00625)
    assert adm.Y.shape[0] == len(adm.reduced) == m.n_nodes - 6


def test_admittance_is_symmetric_without_taps():
    m = build(three_bus_doc())
    Y = build_admittance(m).Y.toarray()
    assert np.allclose(Y, Y.T)


# ---------------------------------------------------------------------------
# profiles

def test_profile_round_trip(tmp_path):
    prof = synthesize("highload_cloudy", seed=3)
    p = tmp_path / "p.csv"
    p.write_text(prof.to_csv())
    back = load_profiles(p)
    assert len(back) == len(prof) == 5760
    assert back.step_s == 15.0
    assert np.allclose(back.load_mult, prof.load_mult, atol=1e-6)
    assert p.read_text().splitlines()[0] == ",".join(HEADER)


@pytest.mark.parametrize("text, match", [
    ("time_s,load_mult\n0,1\n", "missing columns"),
    ("time_s,load_mult,pv_mult\n0,1,0\n15,1\n", "ragged"),
    ("time_s,load_mult,pv_mult\n0,1,0\n15,-1,0\n", "negative"),
    ("time_s,load_mult,pv_mult\n0,1,0\n15,1,0\n45,1,0\n", "fixed positive step"),
    ("time_s,load_mult,pv_mult\n0,1,x\n", "non-numeric"),
    ("", "empty"),
])
def test_bad_profiles_rejected(tmp_path, text, match):
    p = tmp_path / "p.csv"
    p.write_text(text)
    with pytest.raises(ProfileError, match=match):
        load_profiles(p)


def test_profile_step_must_divide_period():
    prof = ProfileSet.constant(10, step_s=40.0)
    with pytest.raises(ProfileError):
        prof.check_period(300.0)
    ProfileSet.constant(10, step_s=15.0).check_period(300.0)


def test_synthesis_is_seeded():
    a = synthesize("lightload_cloudy", seed=5)
    b = synthesize("lightload_cloudy", seed=5)
    c = synthesize("lightload_cloudy", seed=6)
    assert np.array_equal(a.pv_mult, b.pv_mult)
    assert not np.array_equal(a.pv_mult, c.pv_mult)


def test_synthesized_conditions_differ_as_labelled():
    p = {c: synthesize(c) for c in CONDITIONS}
    assert p["highload_sunny"].load_mult.max() > p["lightload_sunny"].load_mult.max()
    assert np.sum(p["highload_cloudy"].pv_mult) < np.sum(p["highload_sunny"].pv_mult)
    for prof in p.values():
        assert prof.pv_mult[0] == 0.0  # midnight
    with pytest.raises(ProfileError):
        synthesize("overcast")


def test_bundled_profiles_load():
    for c in CONDITIONS:
        prof = load_profiles(DATA_DIR / f"{c}.csv")
        assert len(prof) == 5760 and prof.step_s == 15.0


def test_bundled_profiles_match_generator():
    # the shipped CSVs are the generator output at seed 0
    for c in CONDITIONS:
        assert (DATA_DIR / f"{c}.csv").read_text() == synthesize(c, seed=0).to_csv()


def test_scenario_files_reference_bundled_data():
    for p in sorted(DATA_DIR.glob("scenario_*.json")):
        doc = json.loads(p.read_text())
        assert (DATA_DIR / doc["feeder"]).exists()
        assert (DATA_DIR / doc["profile"]).exists()


def test_two_bus_doc_builds():
    m = build(two_bus_doc())
    assert m.n_nodes == 2 and m.z_base("b") == pytest.approx(2.4 ** 2 * 1000 / (1000 / 3))
