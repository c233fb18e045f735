"""Load/PV multiplier profiles and the synthetic 24-hour generators.

Profile files are CSV with header ``time_s,load_mult,pv_mult`` on a fixed
time step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER = ("time_s", "load_mult", "pv_mult")
DAY = 86400.0

CONDITIONS = ("highload_cloudy", "highload_sunny", "lightload_cloudy", "lightload_sunny")


class ProfileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProfileSet:
    time_s: np.ndarray
    load_mult: np.ndarray
    pv_mult: np.ndarray
    name: str = ""

    def __post_init__(self):
        n = len(self.time_s)
        if len(self.load_mult) != n or len(self.pv_mult) != n:
            raise ProfileError("ragged series: time, load and PV columns differ in length")
        if n < 1:
            raise ProfileError("empty profile")
        if np.any(self.load_mult < 0) or np.any(self.pv_mult < 0):
            raise ProfileError("negative multiplier in profile")
        if not (np.all(np.isfinite(self.load_mult)) and np.all(np.isfinite(self.pv_mult))):
            raise ProfileError("non-finite multiplier in profile")
        if n > 1:
            steps = np.diff(self.time_s)
            if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=0, atol=1e-9):
                raise ProfileError("profile time column must use a fixed positive step")
        for arr in (self.time_s, self.load_mult, self.pv_mult):
            arr.setflags(write=False)

    @property
    def step_s(self) -> float:
        return float(self.time_s[1] - self.time_s[0]) if len(self.time_s) > 1 else 0.0

    def __len__(self):
        return len(self.time_s)

    def check_period(self, period_s: float) -> None:
        step = self.step_s
        if step and abs(period_s / step - round(period_s / step)) > 1e-9:
            raise ProfileError(f"profile step {step}s does not divide the {period_s}s period")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for t, lm, pm in zip(self.time_s, self.load_mult, self.pv_mult):
            w.writerow([f"{t:g}", f"{lm:.6f}", f"{pm:.6f}"])
        return buf.getvalue()

    @classmethod
    def constant(cls, n: int, step_s: float = 15.0, load: float = 1.0, pv: float = 1.0) -> ProfileSet:
        return cls(np.arange(n) * step_s, np.full(n, load), np.full(n, pv), name="constant")


def load_profiles(path) -> ProfileSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProfileError(f"{path}: cannot read profile ({exc.strerror})") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ProfileError(f"{path}: empty file") from None
    missing = [h for h in HEADER if h not in header]
    if missing:
        raise ProfileError(f"{path}: missing columns {missing}")
    cols = [header.index(h) for h in HEADER]
    data = [[], [], []]
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise ProfileError(f"{path}: line {lineno}: ragged series (missing values)")
        try:
            for k, c in enumerate(cols):
                data[k].append(float(row[c]))
        except ValueError:
            raise ProfileError(f"{path}: line {lineno}: non-numeric value") from None
    try:
        return ProfileSet(np.array(data[0]), np.array(data[1]), np.array(data[2]), name=path.stem)
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic profiles

def _load_shape(hours: np.ndarray, summer: bool) -> np.ndarray:
    """Residential-commercial diurnal shape with morning and evening peaks."""
    base = 0.55 + 0.12 * np.cos(2 * np.pi * (hours - 15.0) / 24.0)
    morning = 0.10 * np.exp(-0.5 * ((hours - 8.0) / 1.3) ** 2)
    if summer:
        evening = 0.38 * np.exp(-0.5 * ((hours - 18.5) / 2.4) ** 2)
        night = -0.18 * np.exp(-0.5 * ((hours - 3.5) / 2.5) ** 2)
    else:
        evening = 0.30 * np.exp(-0.5 * ((hours - 19.0) / 1.8) ** 2)
        night = -0.15 * np.exp(-0.5 * ((hours - 3.5) / 2.5) ** 2)
    return base + morning + evening + night


def _pv_shape(hours: np.ndarray, summer: bool) -> np.ndarray:
    rise, setting = (6.0, 20.0) if summer else (7.5, 17.5)
    x = np.clip((hours - rise) / (setting - rise), 0.0, 1.0)
    return np.sin(np.pi * x) ** 1.6


def _cloud_factor(rng: np.random.Generator, n: int, step: float,
                  depth_range: tuple[float, float] = (0.2, 0.5)) -> np.ndarray:
    """Multiplicative cloud transmittance: bursts of passing clouds.

    The multiplier stands for PV spread over the whole feeder, so cloud edges
    ramp over one to four minutes rather than switching within a step.
    """
    factor = np.ones(n)
    t = 0
    while t < n:
        gap = int(rng.exponential(420.0) / step) + 1
        t += gap
        if t >= n:
            break
        edge = max(1, int(rng.uniform(60.0, 240.0) / step))
        length = int(rng.uniform(120.0, 600.0) / step) + 2 * edge
        depth = rng.uniform(*depth_range)
        ramp = np.ones(length)
        k = min(edge, length // 2)
        if k:
            ramp[:k] = np.linspace(0.0, 1.0, k + 1)[1:]
            ramp[-k:] = np.linspace(1.0, 0.0, k + 1)[:-1]
        seg = slice(t, min(t + length, n))
        factor[seg] = np.minimum(factor[seg], 1.0 - depth * ramp[: seg.stop - seg.start])
        t += length
    return factor


# peak load multiplier and peak PV multiplier per condition
PEAKS = {"highload": (0.7, 1.0), "lightload": (0.315, 0.9)}


def synthesize(condition: str, step_s: float = 15.0, seed: int = 0, load_peak: float | None = None,
               pv_peak: float | None = None, cloud_depth: tuple[float, float] = (0.2, 0.5)) -> ProfileSet:
    """Deterministic 24-hour profile for one of :data:`CONDITIONS`.

    High-load days use a summer load shape and a long PV day; light-load days
    a winter shape and a short PV day.  Cloudy days multiply the PV bell by
    random cloud dips whose depth is drawn from ``cloud_depth``.
    """
    if condition not in CONDITIONS:
        raise ProfileError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    rng = np.random.default_rng([seed, CONDITIONS.index(condition)])
    n = int(round(DAY / step_s))
    t = np.arange(n) * step_s
    hours = t / 3600.0
    high = condition.startswith("highload")
    cloudy = condition.endswith("cloudy")
    default_load, default_pv = PEAKS["highload" if high else "lightload"]
    load_peak = default_load if load_peak is None else load_peak
    pv_peak = default_pv if pv_peak is None else pv_peak

    load = _load_shape(hours, summer=high)
    load = load / load.max() * load_peak
    wander = np.cumsum(rng.normal(0.0, 0.0015, n))
    wander -= np.linspace(wander[0], wander[-1], n)
    load = load * (1.0 + wander)

    pv = _pv_shape(hours, summer=high) * pv_peak
    if cloudy:
        pv = pv * _cloud_factor(rng, n, step_s, cloud_depth)
    return ProfileSet(t, np.clip(load, 0.0, None), np.clip(pv, 0.0, None), name=condition)
