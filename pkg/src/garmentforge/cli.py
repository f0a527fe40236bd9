"""Command-line entry point: ``garmentforge <command> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 failure while running.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from garmentforge import io
from garmentforge.config import ConfigError, load_config

logger = logging.getLogger("garmentforge")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p, out_required=False):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", help="random seed (nonnegative 64-bit integer)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for linear algebra")
    p.add_argument("--out", required=out_required, help="output directory or file")


def build_parser():
    ap = _Parser(prog="garmentforge", description="Garment parsing and resizing on registered body meshes.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _common(p, out_required=True)

    p = sub.add_parser("train-parser", help="train the parser and its baselines")
    _common(p, out_required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--no-baselines", action="store_true", help="skip the FC and linear parsers")

    p = sub.add_parser("train-sizer", help="train the resizing models")
    _common(p, out_required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("parse", help="split a registered mesh into garments and body")
    _common(p, out_required=True)
    p.add_argument("--model", required=True, help="trained parser directory")
    p.add_argument("--input", required=True, help="registered input mesh (.obj)")

    p = sub.add_parser("resize", help="resize a garment")
    _common(p, out_required=True)
    p.add_argument("--model", required=True, help="trained sizer directory")
    p.add_argument("--garment", required=True, help="posed garment mesh (.obj)")
    p.add_argument("--beta", required=True, help="JSON with 'beta' and optionally 'theta'")
    p.add_argument("--from", dest="size_from", required=True)
    p.add_argument("--to", dest="size_to", required=True)

    p = sub.add_parser("eval", help="benchmark tables for trained models")
    _common(p, out_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--parser", help="trained parser directory")
    p.add_argument("--sizer", help="trained sizer directory")

    p = sub.add_parser("benchmark", help="dataset, all models and both tables in one run")
    _common(p, out_required=True)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss and network")
    _common(p)
    p.add_argument("--all", action="store_true", help="run every suite")
    p.add_argument("--suite", action="append", default=[], help="suite name (repeatable)")
    p.add_argument("--points", type=int, default=5)
    return ap


def _configure_logging():
    level = os.environ.get("GARMENTFORGE_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"GARMENTFORGE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} does not exist")
    return p


# --- commands ------------------------------------------------------------------------

def cmd_synth(args, rc):
    from garmentforge import pipeline

    pipeline.make_dataset(rc, args.out)


def cmd_train_parser(args, rc):
    from garmentforge import pipeline, synth

    ds = synth.load_dataset(_require_dir(args.data, "dataset"))
    pipeline.train_parser_stack(ds, rc, args.out, with_baselines=not args.no_baselines)


def cmd_train_sizer(args, rc):
    from garmentforge import pipeline, synth

    ds = synth.load_dataset(_require_dir(args.data, "dataset"))
    pipeline.train_sizers(ds, rc, args.out)


def cmd_parse(args, rc):
    from garmentforge import parser as P

    bundle = P.load_bundle(_require_dir(args.model, "model"))
    mesh = io.load_obj(args.input)
    if mesh.n_vertices != bundle.model.n_vertices:
        raise ValueError(f"input has {mesh.n_vertices} vertices; the registration template has "
                         f"{bundle.model.n_vertices}")
    out = P.parse(bundle, mesh)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for layer in ("upper", "lower"):
        if layer in out:
            io.save_obj(d / f"{layer}.obj", out[layer])
    io.save_obj(d / "body.obj", out["body"])
    io.write_json(d / "params.json", {"beta": out["beta"].tolist(), "theta": out["theta"].tolist(),
                                      "classes": {bundle.model.garments[c].layer: c for c in bundle.classes}})


def cmd_resize(args, rc):
    from garmentforge import body as bm
    from garmentforge import sizer as SZ

    sizers = SZ.load_sizer(_require_dir(args.model, "model"))
    garment = io.load_obj(args.garment)
    matches = [c for c, s in sizers.items() if s.garment.n_vertices == garment.n_vertices]
    if not matches:
        raise ValueError(f"no trained garment class has {garment.n_vertices} vertices")
    sz = sizers[matches[0]]
    params = io.read_json(args.beta)
    if "beta" not in params:
        raise ValueError(f"{args.beta} must contain 'beta'")
    model = sz.body_model
    beta = np.asarray(params["beta"], dtype=np.float64)
    theta = np.asarray(params.get("theta", np.zeros(3 * model.n_joints)), dtype=np.float64)
    if beta.shape != (model.n_betas,) or theta.shape != (3 * model.n_joints,):
        raise ValueError("beta/theta have the wrong length for this body model")
    d_in = bm.unpose_garment(model, sz.garment, beta, theta, garment.vertices)
    rest = SZ.unposed_garment(model, sz.class_name, beta, d_in)
    out = SZ.resize(sz, rest, beta, args.size_from, args.size_to, theta)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    io.save_obj(path, out)


def cmd_eval(args, rc):
    from garmentforge import baselines as B
    from garmentforge import parser as P
    from garmentforge import pipeline, synth
    from garmentforge import sizer as SZ

    if not args.parser and not args.sizer:
        raise UsageError("eval needs a trained model: pass --parser and/or --sizer")
    ds = synth.load_dataset(_require_dir(args.data, "dataset"))
    bundle = fcs = lins = sizers = None
    if args.parser:
        bundle = P.load_bundle(_require_dir(args.parser, "parser"))
        if (Path(args.parser) / "baselines" / "baselines.json").exists():
            fcs, lins = B.load_baselines(Path(args.parser) / "baselines")
    if args.sizer:
        sizers = SZ.load_sizer(_require_dir(args.sizer, "sizer"))
    pipeline.evaluate_all(ds, args.out, bundle, fcs, lins, sizers, rc.seed)
    for name in ("parsing", "resizing"):
        p = Path(args.out) / f"{name}.txt"
        if p.exists():
            print(p.read_text(), end="")


def cmd_benchmark(args, rc):
    from garmentforge import pipeline

    *_, timing = pipeline.run_benchmark(rc, args.out)
    for name in ("parsing", "resizing"):
        print((Path(args.out) / "eval" / f"{name}.txt").read_text(), end="")
    print("timings: " + ", ".join(f"{k}={v:.0f}" for k, v in timing.items()))


def cmd_gradcheck(args, rc):
    from garmentforge import gradchecks

    names = None if args.all or not args.suite else args.suite
    if args.points < 1:
        raise UsageError("--points must be positive")
    try:
        results = gradchecks.run_suite(names, n_points=args.points, seed=rc.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    worst = 0.0
    for name, report in results.items():
        err = report.max_rel
        print(f"{name:<24} max_rel_err={err:.3e} {'ok' if err < gradchecks.TOLERANCE else 'FAIL'}")
        worst = max(worst, err)
    if worst >= gradchecks.TOLERANCE:
        raise RuntimeError(f"gradient check failed: worst relative error {worst:.3e}")


COMMANDS = {"synth": cmd_synth, "train-parser": cmd_train_parser, "train-sizer": cmd_train_sizer,
            "parse": cmd_parse, "resize": cmd_resize, "eval": cmd_eval, "benchmark": cmd_benchmark,
            "gradcheck": cmd_gradcheck}


def main(argv=None):
    from garmentforge.nn import NetworkError
    from garmentforge.parser import ParserError
    from garmentforge.sizer import SizerError
    from garmentforge.synth import DatasetError

    parser = build_parser()
    try:
        _configure_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        rc = load_config(args.config, args.seed)
        logger.info("%s: seed %d, config hash %s", args.command, rc.seed, rc.hash())
        threads = args.threads or os.cpu_count() or 1
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, rc)
        return 0
    except NetworkError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, DatasetError, ParserError, SizerError, FileNotFoundError,
            io.ObjParseError, io.TensorFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
