"""Error metrics, reference baselines and the parsing/resizing benchmark tables.

Resizing comparisons are made in the canonical rest pose of the subject
(template(beta) plus offsets, theta = 0), so they do not depend on the pose
jitter of the individual scans. Parsing comparisons use the posed scans.
"""

import csv
import io as _io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from garmentforge import baselines as B
from garmentforge import losses as L
from garmentforge import parser as P
from garmentforge import sizer as SZ
from garmentforge.mesh import Mesh, surface_area, vertex_normals

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("class", "method", "split", "v_err_mm", "a_err_pct", "n_instances", "seed")
TEST_SPLITS = ("test_unseen_subject", "test_unseen_size")

PARSE_METHODS = ("linear", "fc", "parsernet")
RESIZE_METHODS = ("error_margin", "average_prediction", "linear_scaling", "sizernet")

# Real-scan results for the closest garment class, shown next to the synthetic numbers.
# Parsing: V_err in mm for (linear, fc, parsernet).
REAL_SCAN_PARSING = {"tshirt": (26.94, 15.98, 13.77), "shorts": (29.78, 20.12, 16.07)}
# Resizing: (V_err mm, A_err %) for error margin, average prediction, linear scaling, learned model.
REAL_SCAN_RESIZING = {
    "tshirt": ((33.25, 24.56), (23.86, 3.63), (35.05, 8.45), (16.42, 1.79)),
    "shorts": ((43.21, 27.21), (24.79, 5.41), (35.77, 4.99), (16.71, 2.38)),
}


# --- metrics --------------------------------------------------------------------

def v_err(pred, gt):
    """Mean per-vertex Euclidean distance in millimetres."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not len(pred):
        raise ValueError("empty vertex arrays")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def a_err(pred, gt):
    """Relative surface-area difference in percent."""
    area_gt = surface_area(gt)
    if area_gt <= 0.0:
        raise ValueError("ground-truth mesh has zero area")
    return float(100.0 * abs(surface_area(pred) - area_gt) / area_gt)


@dataclass
class Record:
    class_name: str
    method: str
    split: str
    instance: str
    v_err_mm: float
    a_err_pct: float


class MetricReport:
    """Per-instance records with aggregates by (class, method, split)."""

    def __init__(self, seed=0, config_hash=""):
        self.seed = int(seed)
        self.config_hash = config_hash
        self.records = []

    def add(self, class_name, method, split, instance, v, a):
        self.records.append(Record(class_name, method, split, instance, float(v), float(a)))

    def extend(self, other):
        self.records.extend(other.records)
        return self

    def select(self, class_name=None, method=None, split=None):
        return [r for r in self.records if (class_name is None or r.class_name == class_name)
                and (method is None or r.method == method) and (split is None or r.split == split)]

    def aggregate(self, class_name, method, split=None):
        """Mean V_err, mean A_err and count; ``split=None`` pools every split."""
        rs = self.select(class_name, method, split)
        if not rs:
            return float("nan"), float("nan"), 0
        return (float(np.mean([r.v_err_mm for r in rs])), float(np.mean([r.a_err_pct for r in rs])), len(rs))

    def groups(self):
        """(class, method) pairs in first-seen order."""
        seen = {}
        for r in self.records:
            seen.setdefault((r.class_name, r.method), None)
        return list(seen)

    def rows(self):
        out = []
        for c, m in self.groups():
            splits = list(dict.fromkeys(r.split for r in self.select(c, m)))
            for s in splits + ["test"]:
                v, a, n = self.aggregate(c, m, None if s == "test" else s)
                out.append((c, m, s, v, a, n))
        return out

    def to_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c, m, s, v, a, n in self.rows():
            w.writerow([c, m, s, f"{v:.6f}", f"{a:.6f}", n, self.seed])
        return buf.getvalue()

    def instances_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("class", "method", "split", "instance", "v_err_mm", "a_err_pct"))
        for r in self.records:
            w.writerow([r.class_name, r.method, r.split, r.instance, f"{r.v_err_mm:.6f}", f"{r.a_err_pct:.6f}"])
        return buf.getvalue()


def split_of(dataset, scan_id):
    for name in TEST_SPLITS:
        if scan_id in dataset.split.get(name, ()):
            return name
    return "train"


# --- resizing: rest-pose garments and pairs ------------------------------------------

def rest_garment(model, class_name, scan):
    """The scan's garment in the subject's rest pose, as a mesh."""
    g = model.garments[class_name]
    return Mesh(SZ.unposed_garment(model, class_name, scan.beta, scan.garments[class_name].d_g), g.faces)


def test_pairs(dataset):
    """Ordered (source, target) pairs with a test target and a different-size source of the same subject."""
    out = []
    for s in dataset.pool("test"):
        for src in dataset.subject_scans(s.subject):
            if src.size != s.size:
                out.append(SZ.ResizePair(s.subject, src, s))
    return out


def baseline_error_margin(dataset, classes=None, subjects=None):
    """Differences between consecutive sizes of the same subject."""
    model = dataset.model
    classes = sorted(model.garments) if classes is None else classes
    subjects = sorted({s.subject for s in dataset.pool("test")}) if subjects is None else subjects
    report = MetricReport(dataset.config.seed)
    for c in classes:
        for sub in subjects:
            scans = sorted(dataset.subject_scans(sub), key=lambda s: s.size)
            for a, b in zip(scans[:-1], scans[1:]):
                if b.size != a.size + 1:
                    continue
                ga, gb = rest_garment(model, c, a), rest_garment(model, c, b)
                report.add(c, "error_margin", split_of(dataset, b.scan_id), f"{a.scan_id}->{b.scan_id}",
                           v_err(ga.vertices, gb.vertices), a_err(ga, gb))
    return report


def baseline_average_prediction(dataset, classes=None, targets=None):
    """Predict every size of a subject by the mean over all of that subject's sizes."""
    model = dataset.model
    classes = sorted(model.garments) if classes is None else classes
    targets = dataset.pool("test") if targets is None else targets
    report = MetricReport(dataset.config.seed)
    for c in classes:
        faces = model.garments[c].faces
        for t in targets:
            group = dataset.subject_scans(t.subject)
            avg = np.mean([rest_garment(model, c, s).vertices for s in group], axis=0)
            gt = rest_garment(model, c, t)
            report.add(c, "average_prediction", split_of(dataset, t.scan_id), t.scan_id,
                       v_err(avg, gt.vertices), a_err(Mesh(avg, faces), gt))
    return report


def fit_linear_scaling(dataset, classes=None):
    """Per (class, size_in, size_out) isotropic factors from training-subject area ratios."""
    model = dataset.model
    classes = sorted(model.garments) if classes is None else classes
    areas = {}
    for c in classes:
        for p in SZ.size_pairs(dataset.pool("train")):
            key = (c, p.source.size, p.target.size)
            a_in = surface_area(rest_garment(model, c, p.source))
            a_out = surface_area(rest_garment(model, c, p.target))
            areas.setdefault(key, []).append((a_in, a_out))
    return B.fit_scaling(areas)


def baseline_linear_scaling(dataset, factors, classes=None, pairs=None):
    """Scale the source about its centroid, then move it onto the target's centroid."""
    model = dataset.model
    classes = sorted(model.garments) if classes is None else classes
    pairs = test_pairs(dataset) if pairs is None else pairs
    report = MetricReport(dataset.config.seed)
    for c in classes:
        for p in pairs:
            src, gt = rest_garment(model, c, p.source), rest_garment(model, c, p.target)
            s = factors.get((c, p.source.size, p.target.size), 1.0)
            pred = B.apply_scaling(src.vertices, s, gt.vertices.mean(0))
            report.add(c, "linear_scaling", split_of(dataset, p.target.scan_id),
                       f"{p.source.scan_id}->{p.target.scan_id}", v_err(pred, gt.vertices), a_err(Mesh(pred, gt.faces), gt))
    return report


def evaluate_sizer(dataset, sizers, pairs=None):
    model = dataset.model
    pairs = test_pairs(dataset) if pairs is None else pairs
    report = MetricReport(dataset.config.seed)
    for c, sz in sorted(sizers.items()):
        for p in pairs:
            src, gt = rest_garment(model, c, p.source), rest_garment(model, c, p.target)
            pred = SZ.resize(sz, src.vertices, p.source.beta, p.source.size, p.target.size)
            report.add(c, "sizernet", split_of(dataset, p.target.scan_id), f"{p.source.scan_id}->{p.target.scan_id}",
                       v_err(pred.vertices, gt.vertices), a_err(pred, gt))
    return report


def size_monotonicity(dataset, sizers, sizes=(0, 1, 2)):
    """Fraction of test inputs whose predicted areas are nondecreasing over ``sizes``, per class."""
    model = dataset.model
    out = {}
    for c, sz in sorted(sizers.items()):
        ok = []
        for s in dataset.pool("test"):
            src = rest_garment(model, c, s).vertices
            areas = [surface_area(SZ.resize(sz, src, s.beta, s.size, k)) for k in sizes]
            ok.append(bool(np.all(np.diff(areas) >= 0.0)))
        out[c] = float(np.mean(ok)) if ok else float("nan")
    return out


# --- parsing -------------------------------------------------------------------------

@dataclass
class ParsePredictions:
    """Posed garment vertices per (method, class, scan id), plus the predicted pose and shape."""

    garments: dict
    params: dict


def predict_parsers(dataset, scans, bundle=None, fc_models=None, linear_models=None):
    model = dataset.model
    garments, params = {}, {}
    for s in scans:
        mesh = model.mesh(s.single)
        if bundle is not None:
            out = P.parse(bundle, mesh)
            params[s.scan_id] = (out["theta"], out["beta"])
            for c in bundle.classes:
                garments[("parsernet", c, s.scan_id)] = out[c].vertices
        for c, fc in sorted((fc_models or {}).items()):
            theta, beta = params.get(s.scan_id) or P.predict_pose_shape(bundle, mesh)
            x = bundle.features(mesh)[None]
            garments[("fc", c, s.scan_id)] = B.predict_fc(model, fc, x, theta, beta).vertices
        for c, lp in sorted((linear_models or {}).items()):
            garments[("linear", c, s.scan_id)] = lp.predict(s.single)
    return ParsePredictions(garments, params)


def parse_report(dataset, scans, predictions, seed=0):
    model = dataset.model
    report = MetricReport(seed)
    keys = sorted({(m, c) for m, c, _ in predictions.garments},
                  key=lambda k: (k[1], PARSE_METHODS.index(k[0]) if k[0] in PARSE_METHODS else 99))
    for m, c in keys:
        faces = model.garments[c].faces
        for s in scans:
            pred = predictions.garments.get((m, c, s.scan_id))
            if pred is None:
                continue
            gt = s.garments[c].posed
            report.add(c, m, split_of(dataset, s.scan_id), s.scan_id, v_err(pred, gt),
                       a_err(Mesh(pred, faces), Mesh(gt, faces)))
    return report


def interpenetration_fraction(points, body):
    """Fraction of points behind the tangent plane of their nearest vertex of the body mesh."""
    depth, _ = L.penetration_depth(points, body.vertices, vertex_normals(body))
    return float((depth < 0).mean())


# --- tables --------------------------------------------------------------------------

def _fmt(x):
    return "    -" if x is None or not np.isfinite(x) else f"{x:6.2f}"


def parse_table(report, split="test"):
    """Text table with one row per class: V_err (mm) per method, real-scan values alongside."""
    classes = list(dict.fromkeys(r.class_name for r in report.records))
    head = f"{'class':<8} {'linear':>7} {'fc':>7} {'parser':>7}   | real-scan {'linear':>7} {'fc':>7} {'parser':>7}"
    lines = ["Parsing V_err (mm), split " + split, head]
    for c in classes:
        vals = [report.aggregate(c, m, None if split == "test" else split)[0] for m in PARSE_METHODS]
        ref = REAL_SCAN_PARSING.get(c, (None,) * 3)
        lines.append(f"{c:<8} " + " ".join(f"{_fmt(v):>7}" for v in vals) + "   |           "
                     + " ".join(f"{_fmt(v):>7}" for v in ref))
    return "\n".join(lines) + "\n"


def resize_table(report, split="test"):
    classes = list(dict.fromkeys(r.class_name for r in report.records))
    head = f"{'class':<8} " + " ".join(f"{m[:14]:>16}" for m in RESIZE_METHODS)
    lines = ["Resizing V_err (mm) / A_err (%), split " + split, head]
    for c in classes:
        cells = []
        for m in RESIZE_METHODS:
            v, a, _ = report.aggregate(c, m, None if split == "test" else split)
            cells.append(f"{_fmt(v)} /{_fmt(a)}")
        lines.append(f"{c:<8} " + " ".join(f"{x:>16}" for x in cells))
        ref = REAL_SCAN_RESIZING.get(c)
        if ref:
            lines.append(f"{'  real':<8} " + " ".join(f"{_fmt(v) + ' /' + _fmt(a):>16}" for v, a in ref))
    return "\n".join(lines) + "\n"


def write_report(report, directory, name, table):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.csv").write_text(report.to_csv())
    (d / f"{name}_instances.csv").write_text(report.instances_csv())
    (d / f"{name}.txt").write_text(table)
