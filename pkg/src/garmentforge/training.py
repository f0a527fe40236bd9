"""Shared training-loop plumbing: minibatches, divergence guard, metric logs."""

import json
import logging
from pathlib import Path

import numpy as np

from garmentforge.nn import save_net

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; a checkpoint is written first if possible."""


def minibatches(n, batch_size, rng):
    """Shuffled index batches covering ``range(n)`` once."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def guard(value, nets, checkpoint_dir=None, stage=""):
    """Abort on a non-finite loss, saving ``nets`` (name -> DenseNet) first."""
    if np.isfinite(value):
        return
    if checkpoint_dir is not None:
        d = Path(checkpoint_dir) / "checkpoint"
        infos = {name: save_net(net, d, name) for name, net in nets.items()}
        (d / "nets.json").write_text(json.dumps(infos, sort_keys=True, indent=1))
        logger.error("non-finite loss in %s; checkpoint written to %s", stage, d)
    raise TrainingDiverged(f"non-finite loss during {stage or 'training'}")


class MetricLog:
    """Ordered per-epoch records; serialized with fixed float formatting."""

    def __init__(self):
        self.records = []

    def add(self, stage, epoch, **values):
        rec = {"stage": stage, "epoch": int(epoch)}
        rec.update({k: float(v) for k, v in values.items()})
        self.records.append(rec)
        logger.info("%s epoch %d %s", stage, epoch,
                    " ".join(f"{k}={v:.6g}" for k, v in rec.items() if k not in ("stage", "epoch")))

    def stage(self, name):
        return [r for r in self.records if r["stage"] == name]

    def to_text(self):
        lines = []
        for r in self.records:
            vals = ",".join(f"{k}={r[k]:.9e}" for k in sorted(r) if k not in ("stage", "epoch"))
            lines.append(f"{r['stage']},{r['epoch']},{vals}")
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path):
        Path(path).write_text(self.to_text())
