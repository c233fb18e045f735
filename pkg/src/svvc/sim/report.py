"""CSV and figure output for simulation runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from svvc.dispatcher import write_dispatch_log

METRICS_HEADER = ["case", "N_OV", "N_UV", "loss_kWh", "N_LTC", "N_VR", "N_total", "V_max", "V_min"]
HIST_EDGES = np.round(np.arange(0.90, 1.1001, 0.0025), 4)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def append_metrics(path, report) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow(report.row())


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(report, out_dir, model=None, figures: bool = True) -> dict:
    """Write one run's outputs into ``out_dir``; ``metrics.csv`` is appended to.

    Per-run files carry a ``case<k>_`` prefix so the three cases of a
    scenario can share a directory.  Returns the paths written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    prefix = f"case{report.case}_"
    paths = {"metrics": out / "metrics.csv"}
    append_metrics(paths["metrics"], report)

    s = report.series
    taps = np.array(s["taps"], dtype=int).reshape(len(s["time_s"]), -1)
    q = np.array(s["q"], dtype=float).reshape(len(s["time_s"]), -1)

    paths["timeseries"] = out / f"{prefix}timeseries.csv"
    _write_rows(paths["timeseries"],
                ["time_s", "load_mult", "pv_mult", "loss_kw", "v_min", "v_max"] + report.tap_labels,
                [[f"{t:g}", f"{lm:.6f}", f"{pm:.6f}", f"{lk:.6f}", f"{a:.6f}", f"{b:.6f}", *tp]
                 for t, lm, pm, lk, a, b, tp in zip(s["time_s"], s["load_mult"], s["pv_mult"],
                                                   s["loss_kw"], s["v_min"], s["v_max"], taps.tolist())])

    paths["q_injection"] = out / f"{prefix}q_injection.csv"
    _write_rows(paths["q_injection"], ["time_s"] + report.slot_labels,
                [[f"{t:g}", *(f"{x:.6f}" for x in row)] for t, row in zip(s["time_s"], q.tolist())])

    paths["ltc_taps"] = out / f"{prefix}ltc_taps.csv"
    _write_rows(paths["ltc_taps"], ["time_s"] + report.tap_labels,
                [[f"{t:g}", *row] for t, row in zip(s["time_s"], taps.tolist())])

    samples = np.concatenate(report.voltage_samples) if report.voltage_samples else np.zeros(0)
    counts, _ = np.histogram(np.clip(samples, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
    paths["voltage_distribution"] = out / f"{prefix}voltage_distribution.csv"
    _write_rows(paths["voltage_distribution"], ["v_lo", "v_hi", "count"],
                [[f"{a:.4f}", f"{b:.4f}", int(c)] for a, b, c in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts)])

    paths["dispatch_error"] = out / f"{prefix}dispatch_error.csv"
    rows = []
    for rec in report.dispatch:
        for r in rec["rows"]:
            rows.append([f"{rec['time_s']:g}", report.slot_labels[_slot_pos(report, r['slot'], model)],
                         f"{r['q_g']:.6f}", f"{r['q_settled']:.6f}", f"{r['q_lim']:.6f}",
                         f"{r['err_frac']:.6f}", f"{r['v_g']:.6f}", f"{r['v_settled']:.6f}",
                         int(r["skipped"])])
    _write_rows(paths["dispatch_error"],
                ["time_s", "inverter", "q_g", "q_settled", "q_lim", "err_frac", "v_g", "v_settled", "skipped"],
                rows)

    paths["runtime"] = out / f"{prefix}runtime.csv"
    _write_rows(paths["runtime"], ["time_s", "seconds"], [[f"{t:g}", f"{x:.6f}"] for t, x in report.runtime])

    if model is not None and report.plans:
        paths["dispatch_log"] = out / f"{prefix}dispatch_log.csv"
        write_dispatch_log(paths["dispatch_log"], report.plans, model)

    if figures:
        paths.update(render_figures(report, out, prefix))
    return paths


def _slot_pos(report, slot: int, model) -> int:
    if model is not None:
        return list(model.smart_slots).index(slot)
    return slot if slot < len(report.slot_labels) else 0


def render_figures(report, out: Path, prefix: str) -> dict:
    """PNG figures matching the plot-ready CSVs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = report.series
    hours = np.array(s["time_s"]) / 3600.0
    paths = {}

    fig, ax = plt.subplots(figsize=(8, 3.5))
    q = np.array(s["q"], dtype=float).reshape(len(hours), -1)
    for k, lbl in enumerate(report.slot_labels):
        ax.plot(hours, q[:, k], lw=0.7, label=lbl)
    ax.set_xlabel("hour")
    ax.set_ylabel("Var injection (kvar)")
    ax.set_title(f"{report.scenario}: case {report.case} inverter Vars")
    if len(report.slot_labels) <= 18:
        ax.legend(fontsize=5, ncol=6, loc="upper left")
    paths["fig_q_injection"] = _save(fig, out / f"{prefix}q_injection.png")

    fig, ax = plt.subplots(figsize=(6, 3.5))
    samples = np.concatenate(report.voltage_samples) if report.voltage_samples else np.zeros(0)
    ax.hist(samples, bins=HIST_EDGES, color="tab:blue")
    ax.axvline(0.95, color="k", ls="--", lw=0.8)
    ax.axvline(1.05, color="k", ls="--", lw=0.8)
    ax.set_xlabel("voltage (p.u.)")
    ax.set_ylabel("node-minutes")
    paths["fig_voltage_distribution"] = _save(fig, out / f"{prefix}voltage_distribution.png")

    fig, ax = plt.subplots(figsize=(8, 3.5))
    taps = np.array(s["taps"], dtype=int).reshape(len(hours), -1)
    for k, lbl in enumerate(report.tap_labels):
        ax.step(hours, taps[:, k], where="post", lw=0.9, label=lbl)
    ax.set_xlabel("hour")
    ax.set_ylabel("tap position")
    ax.legend(fontsize=7)
    paths["fig_ltc_taps"] = _save(fig, out / f"{prefix}ltc_taps.png")

    if report.dispatch:
        fig, ax = plt.subplots(figsize=(8, 3.5))
        t = [rec["time_s"] / 3600.0 for rec in report.dispatch]
        err = [np.mean([r["err_frac"] for r in rec["rows"] if not r["skipped"]] or [0.0]) for rec in report.dispatch]
        ax.plot(t, np.array(err) * 100.0, ".", ms=3)
        ax.set_xlabel("hour")
        ax.set_ylabel("mean |q - q_g| / q_lim (%)")
        paths["fig_dispatch_error"] = _save(fig, out / f"{prefix}dispatch_error.png")

    if report.runtime:
        fig, ax = plt.subplots(figsize=(8, 3.0))
        ax.plot([x[0] / 3600.0 for x in report.runtime], [x[1] for x in report.runtime], ".", ms=3)
        ax.set_xlabel("hour")
        ax.set_ylabel("optimizer time (s)")
        paths["fig_runtime"] = _save(fig, out / f"{prefix}runtime.png")
    return paths


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    import matplotlib.pyplot as plt
    plt.close(fig)
    return path


def summarize(reports: Sequence) -> str:
    lines = [",".join(["scenario"] + METRICS_HEADER)]
    for r in reports:
        lines.append(",".join(str(x) for x in [r.scenario] + r.row()))
    return "\n".join(lines)
