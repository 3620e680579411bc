"""Run artefacts: grid maps, gain traces, selection results and AP reports.

All writers produce byte-stable output for identical inputs (floats use
``repr``, keys are sorted, line endings are ``\\n``).
"""

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, RLPlaceIOError

REPORT_COLUMNS = ("method", "M", "seed", "ap_03", "ap_05", "ap_07", "frames", "runtime_ms")
TRACE_COLUMNS = ("step", "chosen_id", "k_before", "k_after", "gain")
METHOD_ORDER = {"random": 0, "covdens": 1, "greedy": 2, "brute": 3}
METHOD_LABEL = {"random": "Random", "covdens": "Coverage/density", "greedy": "Ours (greedy)",
                "brute": "Upper bound (brute force)"}


def _open(path, mode="w", binary=False):
    try:
        if binary:
            return open(path, mode + "b")
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise RLPlaceIOError(f"cannot open {path}: {exc}") from exc


def _grid_values(grid_map):
    v = np.asarray(getattr(grid_map, "values", grid_map), dtype=float)
    if v.ndim != 2:
        raise ParameterError(f"grid map must be 2-D, got shape {v.shape}")
    return v


def write_grid_csv(path, grid_map):
    """Row-major CSV, one grid row per line."""
    v = _grid_values(grid_map)
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in v:
            w.writerow([repr(float(x)) for x in row])


def grid_to_pgm_bytes(grid_map):
    """8-bit binary PGM with pixel = round(255 * value), values clipped to [0, 1]."""
    v = _grid_values(grid_map)
    pix = np.rint(255.0 * np.clip(v, 0.0, 1.0)).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path, grid_map):
    with _open(path, binary=True) as fh:
        fh.write(grid_to_pgm_bytes(grid_map))


def read_pgm(path):
    """Inverse of :func:`write_pgm`; returns the uint8 pixel array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise RLPlaceIOError(str(exc)) from exc
    magic, dims, maxval, body = data.split(b"\n", 3)
    w, h = (int(t) for t in dims.split())
    if magic != b"P5" or maxval != b"255" or len(body) != w * h:
        raise ParameterError(f"{path} is not an 8-bit binary PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def write_trace_csv(path, trace):
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow([rec.step, rec.chosen_id, repr(rec.k_before), repr(rec.k_after),
                        repr(rec.gain)])


def write_loss_csv(path, history):
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for k, v in enumerate(history):
            w.writerow([k, repr(float(v))])


def selection_result(method, placement, score, scorer_mode, frames, seed):
    return {"method": method, "placement": [int(p) for p in placement],
            "score": None if score is None else float(score), "scorer_mode": scorer_mode,
            "frames_used": [int(f) for f in frames], "seed": int(seed)}


def write_json(path, doc):
    with _open(path) as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated placement: which method produced it and its AP triple."""

    method: str
    m: int
    seed: int
    ap_03: float
    ap_05: float
    ap_07: float
    frames: int
    runtime_ms: float = 0.0

    @classmethod
    def from_result(cls, method, m, seed, result, frames, runtime_ms=0.0):
        return cls(method, int(m), int(seed), result.ap_03, result.ap_05, result.ap_07,
                   int(frames), float(runtime_ms))

    def row(self):
        return [self.method, self.m, self.seed, repr(self.ap_03), repr(self.ap_05),
                repr(self.ap_07), self.frames, f"{self.runtime_ms:.3f}"]


def summarize(records):
    """Group by (method, M): mean and sample std (None for a single value) per AP column."""
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.m), []).append(r)
    out = []
    for (method, m), rows in sorted(groups.items(),
                                    key=lambda kv: (kv[0][1], METHOD_ORDER.get(kv[0][0], 9),
                                                    kv[0][0])):
        stats = {}
        for col in ("ap_03", "ap_05", "ap_07"):
            vals = np.array([getattr(r, col) for r in rows])
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
            stats[col] = (float(np.mean(vals)), std)
        out.append({"method": method, "M": m, "n": len(rows), **stats})
    return out


def _cell(stat):
    mean, std = stat
    return f"{mean:.3f}" if std is None else f"{mean:.3f}±{std:.3f}"


def markdown_table(summary):
    lines = ["| Method | M | runs | AP@0.3 | AP@0.5 | AP@0.7 |",
             "|---|---|---|---|---|---|"]
    for s in summary:
        label = METHOD_LABEL.get(s["method"], s["method"])
        lines.append(f"| {label} | {s['M']} | {s['n']} | {_cell(s['ap_03'])} | "
                     f"{_cell(s['ap_05'])} | {_cell(s['ap_07'])} |")
    return "\n".join(lines) + "\n"


def emit_report(records, out_dir):
    """Write ``report.csv`` (one row per record) and ``report.md`` (grouped summary).

    Returns the summary rows. Raises :class:`ParameterError` on empty input.
    """
    records = list(records)
    if not records:
        raise ParameterError("emit_report needs at least one result")
    for r in records:
        for col in ("ap_03", "ap_05", "ap_07"):
            v = getattr(r, col)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ParameterError(f"{col}={v} outside [0, 1]")
    csv_path = os.path.join(out_dir, "report.csv")
    md_path = os.path.join(out_dir, "report.md")
    with _open(csv_path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in records:
            w.writerow(r.row())
    summary = summarize(records)
    with _open(md_path) as fh:
        fh.write(markdown_table(summary))
    return summary
