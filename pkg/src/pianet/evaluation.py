"""FROC analysis and the CPM score.

A detection is matched against the nodules of its scan in descending score
order. It is a true positive when its center lies within ``hit_rule`` times
the radius of a relevant nodule that no higher-scored detection has claimed.
Further hits on a claimed nodule, and hits on irrelevant findings, are
excused: they count as neither true nor false positives. Everything else is
a false positive.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as bx
from .data.volume import ScanAnnotation
from .errors import ConfigError, DataError, PianetIOError

TP, FP, EXCUSED = "TP", "FP", "EXCUSED"
CPM_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DETECTION_COLUMNS = ["scan_id", "x_mm", "y_mm", "z_mm", "r_mm", "score"]
REPORT_VERSION = 1


@dataclass(frozen=True)
class FrocPoint:
    fps_per_scan: float
    sensitivity: float
    threshold: float


@dataclass
class CpmReport:
    rates: tuple
    sensitivities: tuple
    cpm: float
    curve: list = field(default_factory=list)


@dataclass
class ScanMatch:
    scan_id: str
    scores: np.ndarray  # per detection, input order
    labels: list  # TP / FP / EXCUSED per detection
    nodule_of: list  # matched relevant nodule index for TPs, else None
    nodule_hit: np.ndarray  # per relevant nodule
    n_relevant: int


def _hits(center, nodules, hit_rule, mode, r_det):
    """Indices of ``nodules`` hit by a detection."""
    out = []
    for k, n in enumerate(nodules):
        if mode == "radius":
            if np.linalg.norm(center - n.center) <= hit_rule * n.diameter / 2.0:
                out.append(k)
        elif bx.iou_cube((*center, r_det), (n.x, n.y, n.z, n.diameter)) >= hit_rule:
            out.append(k)
    return out


def match_to_truth(detections, annotation, hit_rule=1.0, mode="radius"):
    """Label one scan's detections, rows (x_mm, y_mm, z_mm, r_mm, score).

    ``mode`` is "radius" (center within ``hit_rule`` radii) or "iou" (cube
    IoU at least ``hit_rule``).
    """
    if mode not in ("radius", "iou"):
        raise ConfigError(f"unknown hit mode {mode!r}")
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 5)
    relevant = annotation.relevant()
    irrelevant = annotation.irrelevant()
    labels = [FP] * len(det)
    nodule_of = [None] * len(det)
    hit = np.zeros(len(relevant), dtype=bool)
    for i in np.argsort(-det[:, 4], kind="stable"):
        center = det[i, :3]
        rel = _hits(center, relevant, hit_rule, mode, det[i, 3])
        fresh = [k for k in rel if not hit[k]]
        if fresh:
            k = min(fresh, key=lambda j: (np.linalg.norm(center - relevant[j].center), j))
            hit[k] = True
            labels[i], nodule_of[i] = TP, k
        elif rel or _hits(center, irrelevant, hit_rule, mode, det[i, 3]):
            labels[i] = EXCUSED
    return ScanMatch(annotation.scan_id, det[:, 4].copy(), labels, nodule_of, hit, len(relevant))


def match_all(detections, annotations, scan_ids=None, hit_rule=1.0, mode="radius"):
    """Match ``{scan_id: rows}`` against ``{scan_id: ScanAnnotation}``.

    ``scan_ids`` lists every evaluated scan (scans without detections count
    toward the per-scan FP rate); it defaults to the annotated scans.
    """
    scan_ids = list(annotations) if scan_ids is None else list(scan_ids)
    unknown = sorted(set(detections) - set(scan_ids))
    if unknown:
        raise DataError(f"detections reference unknown scan ids: {', '.join(unknown)}")
    out = []
    for sid in scan_ids:
        ann = annotations.get(sid, ScanAnnotation(sid))
        out.append(match_to_truth(detections.get(sid, np.zeros((0, 5))), ann, hit_rule, mode))
    return out


def froc(matches):
    """FROC points, one per distinct TP/FP score, in order of rising FP rate."""
    if not matches:
        raise ConfigError("FROC needs at least one scan")
    n_nodules = sum(m.n_relevant for m in matches)
    if n_nodules == 0:
        raise DataError("FROC sensitivity is undefined without relevant nodules")
    scores, is_tp = [], []
    for m in matches:
        for s, lab in zip(m.scores, m.labels):
            if lab != EXCUSED:
                scores.append(s)
                is_tp.append(lab == TP)
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    n_scans = len(matches)
    if not len(scores):
        return [FrocPoint(0.0, 0.0, math.inf)]
    points = []
    for t in np.unique(scores)[::-1]:
        sel = scores >= t
        points.append(FrocPoint(float(np.sum(sel & ~is_tp)) / n_scans, float(np.sum(sel & is_tp)) / n_nodules,
                                float(t)))
    return points


def sensitivity_at(curve, rate):
    """Right-continuous step read-out: best sensitivity among points with fps <= rate, else 0."""
    vals = [p.sensitivity for p in curve if p.fps_per_scan <= rate]
    return max(vals) if vals else 0.0


def cpm(curve, rates=CPM_RATES):
    if not curve:
        raise ConfigError("CPM needs a non-empty FROC curve")
    sens = tuple(sensitivity_at(curve, r) for r in rates)
    return CpmReport(tuple(rates), sens, float(sum(sens) / len(sens)), list(curve))


def evaluate(detections, annotations, scan_ids=None, hit_rule=1.0, mode="radius"):
    matches = match_all(detections, annotations, scan_ids, hit_rule, mode)
    curve = froc(matches)
    return curve, cpm(curve), matches


# -- reports -------------------------------------------------------------------


def _num(x):
    return None if not math.isfinite(x) else x


def report_dict(report, n_scans=None, n_nodules=None):
    return {
        "version": REPORT_VERSION,
        "cpm": report.cpm,
        "operating_points": [{"fps_per_scan": r, "sensitivity": s} for r, s in zip(report.rates, report.sensitivities)],
        "curve": [{"fps_per_scan": p.fps_per_scan, "sensitivity": p.sensitivity, "threshold": _num(p.threshold)}
                  for p in report.curve],
        "n_scans": n_scans,
        "n_nodules": n_nodules,
    }


def format_report(report, fmt="json", n_scans=None, n_nodules=None):
    """Serialize a CpmReport as ``json``, ``csv`` or gnuplot-style ``plot-data``."""
    if fmt == "json":
        return json.dumps(report_dict(report, n_scans, n_nodules), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "fps_per_scan", "sensitivity", "threshold"])
        for p in report.curve:
            w.writerow(["curve", repr(p.fps_per_scan), repr(p.sensitivity), repr(p.threshold)])
        for r, s in zip(report.rates, report.sensitivities):
            w.writerow(["operating_point", repr(r), repr(s), ""])
        w.writerow(["cpm", "", repr(report.cpm), ""])
        return buf.getvalue()
    if fmt == "plot-data":
        lines = [f"# cpm {report.cpm!r}", "# fps_per_scan sensitivity threshold"]
        lines += [f"{p.fps_per_scan!r} {p.sensitivity!r} {p.threshold!r}" for p in report.curve]
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r} (json, csv, plot-data)")


def parse_report(text, fmt="json"):
    """Inverse of ``format_report`` for json and csv."""
    if fmt == "json":
        d = json.loads(text)
        curve = [FrocPoint(p["fps_per_scan"], p["sensitivity"], math.inf if p["threshold"] is None else p["threshold"])
                 for p in d["curve"]]
        ops_ = d["operating_points"]
        return CpmReport(tuple(o["fps_per_scan"] for o in ops_), tuple(o["sensitivity"] for o in ops_), d["cpm"], curve)
    if fmt == "csv":
        curve, rates, sens, value = [], [], [], None
        for row in list(csv.reader(io.StringIO(text)))[1:]:
            if row[0] == "curve":
                curve.append(FrocPoint(float(row[1]), float(row[2]), float(row[3])))
            elif row[0] == "operating_point":
                rates.append(float(row[1]))
                sens.append(float(row[2]))
            elif row[0] == "cpm":
                value = float(row[2])
        return CpmReport(tuple(rates), tuple(sens), value, curve)
    raise ConfigError(f"cannot parse report format {fmt!r}")


def write_report(path, report, fmt="json", n_scans=None, n_nodules=None):
    try:
        Path(path).write_text(format_report(report, fmt, n_scans, n_nodules), encoding="utf-8")
    except OSError as exc:
        raise PianetIOError(f"cannot write report {path}: {exc.strerror or exc}") from exc
    return Path(path)


# -- detections CSV ------------------------------------------------------------


def format_detections(rows_by_scan):
    """``{scan_id: rows (x, y, z, r, score)}`` -> CSV text, scans in the given order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETECTION_COLUMNS)
    for sid, rows in rows_by_scan.items():
        for r in np.asarray(rows, dtype=np.float64).reshape(-1, 5):
            w.writerow([sid] + [repr(float(v)) for v in r])
    return buf.getvalue()


def parse_detections(text, source="<csv>"):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != DETECTION_COLUMNS:
        raise DataError(f"{source}:1: header must be {','.join(DETECTION_COLUMNS)}")
    out = {}
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(DETECTION_COLUMNS):
            raise DataError(f"{source}:{lineno}: expected {len(DETECTION_COLUMNS)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric field") from None
        out.setdefault(row[0].strip(), []).append(vals)
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


def write_detections(path, rows_by_scan):
    try:
        Path(path).write_text(format_detections(rows_by_scan), encoding="utf-8")
    except OSError as exc:
        raise PianetIOError(f"cannot write detections {path}: {exc.strerror or exc}") from exc
    return Path(path)


def read_detections(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PianetIOError(f"cannot read detections {path}: {exc.strerror or exc}") from exc
    return parse_detections(text, str(path))
