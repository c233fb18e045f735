"""Feeder file reader.

Feeder files are JSON documents with the sections ``base``, ``buses``,
``branches``, ``loads``, ``inverters``, ``regulators`` and optionally
``linecodes``, ``shunts`` and ``overlay``.  The full schema is documented in
``docs/feeder_format.md``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from svvc.devices import DeviceError, RegulatorSpec, TapState
from svvc.feeder.model import (
    DELTA, LINE, PHASE_INDEX, WYE, Branch, Bus, FeederError, FeederModel,
    InverterSite, Load, Shunt,
)

FT_PER_MILE = 5280.0
LENGTH_PER_MILE = {"ft": FT_PER_MILE, "kft": FT_PER_MILE / 1000.0, "mi": 1.0,
                   "m": 1609.344, "km": 1.609344}


def _phases(text, where: str) -> tuple[int, ...]:
    if isinstance(text, str):
        items = list(text.replace(",", "").replace(".", "").upper())
    else:
        items = [str(p).upper() for p in text]
    try:
        out = tuple(sorted({PHASE_INDEX[p] for p in items}))
    except KeyError as exc:
        raise FeederError(f"{where}: unknown phase {exc.args[0]!r}") from None
    if not out:
        raise FeederError(f"{where}: at least one phase required")
    return out


def _complex_matrix(data, where: str) -> np.ndarray:
    """3x3 complex matrix from nested [re, im] pairs, a flat [re, im] pair list
    per row, or a scalar/1x1 for single-phase entries."""
    try:
        arr = np.asarray(data, dtype=float)
    except (TypeError, ValueError):
        raise FeederError(f"{where}: matrix must be numeric") from None
    if arr.shape == (3, 3, 2):
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.shape == (3, 3):
        return arr.astype(complex)
    raise FeederError(f"{where}: expected 3x3 matrix of [re, im] pairs, got shape {arr.shape}")


def _triple(values, where: str) -> tuple[float, float, float]:
    if isinstance(values, Mapping):
        out = [0.0, 0.0, 0.0]
        for key, val in values.items():
            k = key.upper()
            idx = {"A": 0, "B": 1, "C": 2, "AB": 0, "BC": 1, "CA": 2}.get(k)
            if idx is None:
                raise FeederError(f"{where}: unknown phase key {key!r}")
            out[idx] = float(val)
        return tuple(out)
    vals = [float(v) for v in values]
    if len(vals) != 3:
        raise FeederError(f"{where}: expected three per-phase values")
    return tuple(vals)


def _require(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise FeederError(f"{where}: missing field {key!r}")
    return obj[key]


def apply_overlay(doc: dict) -> dict:
    """Return a copy of ``doc`` with its ``overlay`` section applied.

    Overlay order: ``remove`` then ``modify`` then ``add``.
    """
    doc = copy.deepcopy(doc)
    overlay = doc.pop("overlay", None)
    if not overlay:
        return doc
    keyed = {"buses": "id", "branches": "name", "loads": "name", "shunts": "name",
             "inverters": "id", "regulators": "id"}
    for section, names in overlay.get("remove", {}).items():
        key = keyed.get(section)
        if key is None:
            raise FeederError(f"overlay.remove: unknown section {section!r}")
        if names == "all":
            doc[section] = []
            continue
        names = set(names)
        present = {item[key] for item in doc.get(section, [])}
        missing = names - present
        if missing:
            raise FeederError(f"overlay.remove.{section}: unknown entries {sorted(missing)}")
        doc[section] = [item for item in doc.get(section, []) if item[key] not in names]
    for section, changes in overlay.get("modify", {}).items():
        if section == "base":
            doc.setdefault("base", {}).update(changes)
            continue
        key = keyed.get(section)
        if key is None:
            raise FeederError(f"overlay.modify: unknown section {section!r}")
        items = {item[key]: item for item in doc.get(section, [])}
        for name, fields in changes.items():
            if name not in items:
                raise FeederError(f"overlay.modify.{section}: unknown entry {name!r}")
            for fname, val in fields.items():
                if val is None:
                    items[name].pop(fname, None)
                else:
                    items[name][fname] = val
    for section, items in overlay.get("add", {}).items():
        if section not in keyed:
            raise FeederError(f"overlay.add: unknown section {section!r}")
        doc.setdefault(section, []).extend(copy.deepcopy(items))
    return doc


def model_from_dict(doc: Mapping[str, Any]) -> FeederModel:
    base = doc.get("base", {})
    unit = base.get("length_unit", "ft")
    if unit not in LENGTH_PER_MILE:
        raise FeederError(f"base.length_unit: unknown unit {unit!r}")
    per_mile = LENGTH_PER_MILE[unit]

    linecodes = {}
    for name, lc in doc.get("linecodes", {}).items():
        where = f"linecodes.{name}"
        z = _complex_matrix(_require(lc, "z_ohm_per_mile", where), where + ".z_ohm_per_mile")
        b = np.asarray(lc.get("b_us_per_mile", np.zeros((3, 3))), dtype=float)
        if b.shape != (3, 3):
            raise FeederError(f"{where}.b_us_per_mile: expected 3x3")
        linecodes[str(name)] = (z, 1j * b * 1e-6)

    buses = []
    for i, item in enumerate(_require(doc, "buses", "feeder")):
        where = f"buses[{i}]"
        buses.append(Bus(id=str(_require(item, "id", where)),
                         phases=_phases(_require(item, "phases", where), where + ".phases"),
                         base_kv=float(_require(item, "base_kv", where)),
                         is_source=bool(item.get("source", False))))

    branches = []
    for i, item in enumerate(_require(doc, "branches", "feeder")):
        where = f"branches[{i}]"
        name = str(item.get("name", f"{item.get('from')}-{item.get('to')}"))
        kind = item.get("kind", LINE)
        length = float(item.get("length", 0.0))
        z = np.zeros((3, 3), complex)
        y = np.zeros((3, 3), complex)
        if "linecode" in item:
            code = str(item["linecode"])
            if code not in linecodes:
                raise FeederError(f"{where}.linecode: unknown linecode {code!r}")
            zc, yc = linecodes[code]
            miles = length / per_mile
            z, y = zc * miles, yc * miles
        if "z_ohm" in item:
            z = _complex_matrix(item["z_ohm"], where + ".z_ohm")
        if "y_shunt_us" in item:
            y = 1j * np.asarray(item["y_shunt_us"], dtype=float) * 1e-6
        branches.append(Branch(name=name, from_bus=str(_require(item, "from", where)),
                               to_bus=str(_require(item, "to", where)), kind=kind,
                               z_ohm=z, y_shunt=y, length=length,
                               regulator=item.get("regulator")))
    # restrict impedances to the phases actually present at the to-bus
    phases_of = {b.id: b.phases for b in buses}
    fixed = []
    for br in branches:
        mask = np.zeros(3, bool)
        mask[list(phases_of.get(br.to_bus, ()))] = True
        keep = np.outer(mask, mask)
        fixed.append(Branch(br.name, br.from_bus, br.to_bus, br.kind,
                            np.where(keep, br.z_ohm, 0), np.where(keep, br.y_shunt, 0),
                            br.length, br.regulator))
    branches = fixed

    loads = []
    for i, item in enumerate(doc.get("loads", [])):
        where = f"loads[{i}]"
        conn = str(item.get("conn", WYE)).lower()
        if conn not in (WYE, DELTA):
            raise FeederError(f"{where}.conn: must be 'wye' or 'delta'")
        loads.append(Load(name=str(item.get("name", f"load{i}")),
                          bus=str(_require(item, "bus", where)), conn=conn,
                          model=str(item.get("model", "pq")).lower(),
                          p_kw=_triple(_require(item, "kw", where), where + ".kw"),
                          q_kvar=_triple(item.get("kvar", [0, 0, 0]), where + ".kvar"),
                          distributed_fraction=float(item.get("distributed", 0.0))))

    shunts = []
    for i, item in enumerate(doc.get("shunts", [])):
        where = f"shunts[{i}]"
        shunts.append(Shunt(name=str(item.get("name", f"shunt{i}")),
                            bus=str(_require(item, "bus", where)),
                            q_kvar=_triple(_require(item, "kvar", where), where + ".kvar"),
                            kv=float(_require(item, "kv", where))))

    inverters = []
    for i, item in enumerate(doc.get("inverters", [])):
        where = f"inverters[{i}]"
        inverters.append(InverterSite(id=str(_require(item, "id", where)),
                                      bus=str(_require(item, "bus", where)),
                                      phases=_phases(_require(item, "phases", where), where + ".phases"),
                                      p_rating_kw=float(_require(item, "p_kw", where)),
                                      s_rating_kva=float(_require(item, "s_kva", where)),
                                      smart=bool(item.get("smart", False))))

    regulators = []
    taps, timers = {}, {}
    for i, item in enumerate(doc.get("regulators", [])):
        where = f"regulators[{i}]"
        lo, hi = item.get("tap_range", [-16, 16])
        try:
            spec = RegulatorSpec(id=str(_require(item, "id", where)),
                                 branch=str(_require(item, "branch", where)),
                                 mode=item.get("mode", "per_phase"),
                                 tap_min=int(lo), tap_max=int(hi),
                                 step_pu=float(item.get("step_pu", 0.00625)),
                                 v_set=float(item.get("v_set", 120.0)),
                                 bandwidth=float(item.get("bandwidth", 2.0)),
                                 time_delay=float(item.get("time_delay", 60.0)),
                                 max_tap_per_action=int(item.get("max_tap_per_action", 1)))
        except DeviceError as exc:
            raise FeederError(f"{where}: {exc}") from None
        regulators.append(spec)
        t = item.get("taps", [0, 0, 0])
        if isinstance(t, int):
            t = [t, t, t]
        taps[spec.id] = tuple(int(x) for x in t)
        timers[spec.id] = (0.0, 0.0, 0.0)

    try:
        return FeederModel(name=str(doc.get("name", "feeder")), buses=tuple(buses),
                           branches=tuple(branches), loads=tuple(loads),
                           inverters=tuple(inverters), regulators=tuple(regulators),
                           shunts=tuple(shunts), base_mva=float(base.get("mva", 1.0)),
                           source_pu=float(base.get("source_pu", 1.0)),
                           source_angle_deg=float(base.get("source_angle_deg", 0.0)),
                           initial_taps=TapState(taps, timers))
    except DeviceError as exc:
        raise FeederError(str(exc)) from None


def load_feeder(path, apply_modifications: bool = True) -> FeederModel:
    """Read and validate a feeder file.

    When the file carries an ``overlay`` section (the bundled IEEE-34 file
    does) it is applied unless ``apply_modifications`` is false, which yields
    the unmodified network.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FeederError(f"{path}: cannot read feeder file ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FeederError(f"{path}: top level must be an object")
    if apply_modifications:
        doc = apply_overlay(doc)
    else:
        doc = dict(doc)
        doc.pop("overlay", None)
    try:
        return model_from_dict(doc)
    except FeederError as exc:
        raise FeederError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise FeederError(f"{path}: bad field value ({exc})") from None
