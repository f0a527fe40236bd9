"""End-to-end drivers: dataset, parser and baselines, sizer, evaluation."""

import logging
import time
from pathlib import Path

import numpy as np

from garmentforge import baselines as B
from garmentforge import evaluate as E
from garmentforge import io
from garmentforge import parser as P
from garmentforge import sizer as SZ
from garmentforge import synth
from garmentforge.mesh import vertex_normals
from garmentforge.procedural import build_humanoid
from garmentforge.training import MetricLog

logger = logging.getLogger(__name__)


def make_dataset(rc, out_dir):
    cfg = rc.synth_config()
    logger.info("synth: seed %d, config %s", cfg.seed, io.config_hash(cfg.to_dict()))
    return synth.generate_dataset(cfg, out_dir)


def train_parser_stack(dataset, rc, out_dir, with_baselines=True):
    """ParserNet, then the FC and linear parsers that share its features and neighbourhoods."""
    out = Path(out_dir)
    log = MetricLog()
    cfg = rc.parser_config()
    bundle = P.build_bundle(dataset.model, cfg)
    train = dataset.pool("train")
    seen = {s.subject for s in train}
    undressed = [u for u in dataset.undressed if u.subject in seen]
    t0 = time.perf_counter()
    P.train_parser(bundle, train, undressed, checkpoint_dir=out, log=log)
    logger.info("parser trained in %.1f s", time.perf_counter() - t0)
    P.save_bundle(bundle, out)
    fcs, lins = {}, {}
    if with_baselines:
        fcs, lins = train_baselines(dataset, bundle, rc, log)
        B.save_baselines(out / "baselines", fcs, lins, rc.fc_config())
    log.save(out / "train_log.txt")
    io.write_json(out / "run.json", {"command": "train-parser", "seed": rc.seed, "config": rc.to_dict(),
                                     "config_hash": rc.hash()})
    return bundle, fcs, lins, log


def train_baselines(dataset, bundle, rc, log=None):
    log = MetricLog() if log is None else log
    model = dataset.model
    train = dataset.pool("train")
    meshes = [model.mesh(s.single) for s in train]
    features = np.stack([bundle.features(m) for m in meshes])
    params = [P.predict_pose_shape(bundle, m) for m in meshes]
    fc_cfg = rc.fc_config()
    opts = rc.linear_options()
    fcs, lins = {}, {}
    for c in bundle.classes:
        t0 = time.perf_counter()
        fcs[c] = B.train_fc_parser(model, c, features, params, train, P.garment_laplacian(model, c), fc_cfg, log)
        t1 = time.perf_counter()
        lins[c] = B.fit_linear_parser(c, bundle.neighborhoods[c], [s.single for s in train],
                                      [s.garments[c].posed for s in train], **opts)
        logger.info("baselines %s: fc %.1f s, linear %.1f s (%d nonzero)", c, t1 - t0, time.perf_counter() - t1,
                    lins[c].n_nonzero)
    return fcs, lins


def train_sizers(dataset, rc, out_dir):
    out = Path(out_dir)
    log = MetricLog()
    cfg = rc.sizer_config()
    sizers = {}
    for c in sorted(dataset.model.garments):
        t0 = time.perf_counter()
        sizers[c] = SZ.build_sizer(dataset.model, c, cfg)
        SZ.train_sizer(sizers[c], dataset.pool("train"), log, checkpoint_dir=out)
        logger.info("sizer %s trained in %.1f s", c, time.perf_counter() - t0)
    SZ.save_sizer(sizers, out)
    log.save(out / "train_log.txt")
    io.write_json(out / "run.json", {"command": "train-sizer", "seed": rc.seed, "config": rc.to_dict(),
                                     "config_hash": rc.hash()})
    return sizers, log


def evaluate_parsing(dataset, bundle, fcs=None, lins=None):
    scans = dataset.pool("test")
    preds = E.predict_parsers(dataset, scans, bundle, fcs, lins)
    report = E.parse_report(dataset, scans, preds, dataset.config.seed)
    extra = {"interpenetration": {}}
    for c in bundle.classes:
        fr = [E.interpenetration_fraction(preds.garments[("parsernet", c, s.scan_id)], dataset.model.mesh(s.body))
              for s in scans]
        extra["interpenetration"][f"parsernet_{c}"] = float(np.mean(fr))
    return report, preds, extra


def evaluate_resizing(dataset, sizers):
    model = dataset.model
    classes = sorted(sizers)
    report = E.baseline_error_margin(dataset, classes)
    report.extend(E.baseline_average_prediction(dataset, classes))
    report.extend(E.baseline_linear_scaling(dataset, E.fit_linear_scaling(dataset, classes), classes))
    report.extend(E.evaluate_sizer(dataset, sizers))
    extra = {"monotonic_fraction": E.size_monotonicity(dataset, sizers), "interpenetration": {}}
    for c, sz in sorted(sizers.items()):
        fr = []
        for p in E.test_pairs(dataset):
            src = E.rest_garment(model, c, p.source).vertices
            t = p.target
            posed = SZ.resize(sz, src, t.beta, p.source.size, t.size, t.theta).vertices
            body = model.mesh(t.body)
            fr.append(E.interpenetration_fraction(posed, body))
        extra["interpenetration"][f"sizernet_{c}"] = float(np.mean(fr)) if fr else float("nan")
    return report, extra


def evaluate_all(dataset, out_dir, bundle=None, fcs=None, lins=None, sizers=None, seed=0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"seed": int(seed)}
    if bundle is not None:
        rep, _, extra = evaluate_parsing(dataset, bundle, fcs, lins)
        rep.seed = seed
        E.write_report(rep, out, "parsing", E.parse_table(rep))
        summary["parsing"] = extra
    if sizers:
        rep, extra = evaluate_resizing(dataset, sizers)
        rep.seed = seed
        E.write_report(rep, out, "resizing", E.resize_table(rep))
        summary["resizing"] = extra
    io.write_json(out / "summary.json", summary)
    return summary


def run_benchmark(rc, out_dir, model=None):
    """Dataset, all models and both tables under one directory."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    cfg = rc.synth_config()
    model = build_humanoid() if model is None else model
    dataset = synth.generate_dataset(cfg, out / "data", model)
    bundle, fcs, lins, _ = train_parser_stack(dataset, rc, out / "parser")
    t1 = time.perf_counter()
    sizers, _ = train_sizers(dataset, rc, out / "sizer")
    t2 = time.perf_counter()
    summary = evaluate_all(dataset, out / "eval", bundle, fcs, lins, sizers, rc.seed)
    t3 = time.perf_counter()
    timing = {"synth_and_parsers_s": t1 - t0, "sizers_s": t2 - t1, "eval_s": t3 - t2}
    logger.info("benchmark timings %s", timing)
    return dataset, bundle, fcs, lins, sizers, summary, timing


def undressed_body_error(bundle, dataset, subjects=None):
    """Mean per-vertex error (mm) of the predicted-shape body on undressed held-out bodies.

    The shape prediction is posed with the true pose so the number isolates shape.
    """
    from garmentforge import body as bm

    model = dataset.model
    errs = []
    for u in dataset.undressed:
        if subjects is not None and u.subject not in subjects:
            continue
        _, beta = P.predict_pose_shape(bundle, model.mesh(u.body))
        pred = bm.skin(model, bm.BodyParams(beta, u.theta)).vertices
        truth = bm.skin(model, bm.BodyParams(u.beta, u.theta)).vertices
        errs.append(np.linalg.norm(pred - truth, axis=1).mean() * 1000)
    return float(np.mean(errs)) if errs else float("nan")


def skin_inside_fraction(bundle, dataset, scans):
    """Fraction of skin-region vertices of the predicted smooth body not outside the clothed input surface."""
    model = dataset.model
    ids = np.flatnonzero(model.skin_mask)
    inside = []
    for s in scans:
        out = P.parse(bundle, model.mesh(s.single))
        normals = vertex_normals(model.mesh(s.single))
        depth = np.einsum("ij,ij->i", normals[ids], out["smooth_body"].vertices[ids] - s.single[ids])
        inside.append(depth <= 0.0)
    return float(np.concatenate(inside).mean()) if inside else float("nan")
