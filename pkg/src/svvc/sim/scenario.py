"""Scenario files: which feeder, which profile, which control case."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from svvc import DATA_DIR
from svvc.devices import VoltVarCurve
from svvc.vvo import OptimizerConfig

CASES = (1, 2, 3)
SYNTH = "synth:"  # profile given as "synth:<condition>" is generated from the seed
LOCAL_FIELDS = ("v_set", "bandwidth", "time_delay", "max_tap_per_action")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    feeder: Path
    profile: Path | str
    case: int = 3
    sim_step_s: float = 15.0
    dispatch_period_s: float = 300.0
    violation_sample_s: float = 60.0
    warmup_s: float = 1800.0
    duration_s: Optional[float] = None
    local_control: dict = field(default_factory=dict)
    curve: VoltVarCurve = field(default_factory=VoltVarCurve)
    damping: float = 0.5
    threshold_frac: float = 0.10
    settle_tol_pu: float = 1e-4
    settle_max_iter: int = 50
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.case not in CASES:
            raise ScenarioError(f"case must be one of {CASES}, got {self.case}")
        for name in ("sim_step_s", "dispatch_period_s", "violation_sample_s"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        for name in ("dispatch_period_s", "violation_sample_s"):
            ratio = getattr(self, name) / self.sim_step_s
            if abs(ratio - round(ratio)) > 1e-9:
                raise ScenarioError(f"{name} must be a multiple of sim_step_s")
        if not 0 < self.damping <= 1:
            raise ScenarioError("damping must lie in (0, 1]")

    def with_case(self, case: int) -> Scenario:
        return replace(self, case=int(case))

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, seed=int(seed))


def _resolve(path_text: str, base: Path) -> Path:
    p = Path(path_text)
    if p.is_absolute():
        return p
    for root in (base, DATA_DIR):
        if (root / p).exists():
            return (root / p).resolve()
    return (base / p).resolve()


def scenario_from_dict(doc: dict, base: Path = Path(".")) -> Scenario:
    try:
        name = str(doc.get("name", "scenario"))
        feeder = _resolve(str(doc["feeder"]), base)
        profile_text = str(doc["profile"])
        profile = profile_text if profile_text.startswith(SYNTH) else _resolve(profile_text, base)
    except KeyError as exc:
        raise ScenarioError(f"scenario: missing field {exc.args[0]!r}") from None
    local = doc.get("local_control", {})
    for reg, settings in local.items():
        bad = set(settings) - set(LOCAL_FIELDS)
        if bad:
            raise ScenarioError(f"local_control.{reg}: unknown settings {sorted(bad)}")
    curve = VoltVarCurve.from_dict(doc["curve"]) if "curve" in doc else VoltVarCurve()
    try:
        opt = OptimizerConfig.from_dict(doc.get("optimizer", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"optimizer: {exc}") from None
    kwargs = {k: doc[k] for k in ("sim_step_s", "dispatch_period_s", "violation_sample_s", "warmup_s",
                                  "duration_s", "damping", "threshold_frac", "settle_tol_pu",
                                  "settle_max_iter", "seed", "case") if k in doc}
    return Scenario(name=name, feeder=feeder, profile=profile, local_control=local, curve=curve,
                    optimizer=opt, **kwargs)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc, path.parent)


def bundled_scenarios() -> list[Path]:
    return sorted(DATA_DIR.glob("scenario_*.json"))
