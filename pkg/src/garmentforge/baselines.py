"""Comparison methods for parsing and resizing.

Parsing: a fixed sparse linear regressor (each garment vertex a LASSO-fitted
combination of its input neighbourhood), and a dense net that predicts the
displacement field directly.
Resizing: isotropic scaling by a per-size-pair factor plus centroid alignment.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from garmentforge import body as bm
from garmentforge import io
from garmentforge import losses as L
from garmentforge.mesh import Mesh, surface_area, vertex_normals
from garmentforge.nn import Adam, DenseNet, load_net, save_net
from garmentforge.sizer import redraped_loss
from garmentforge.training import MetricLog, guard, minibatches

logger = logging.getLogger(__name__)


# --- LASSO linear parser ----------------------------------------------------------

def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_fista(X, Y, alpha, iterations=500, tol=1e-10):
    """Batched LASSO without intercept, solved by FISTA.

    Minimises ``1/(2n) |y - X w|^2 + alpha |w|_1`` independently for every
    leading batch entry; ``X`` is ``(B, n, p)``, ``Y`` is ``(B, n)``. Returns
    ``w`` of shape ``(B, p)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[1]
    gram = np.matmul(X.transpose(0, 2, 1), X) / n
    xty = np.einsum("bnp,bn->bp", X, Y) / n
    # step from the largest Gram eigenvalue (Lipschitz constant of the smooth part)
    lip = np.maximum(np.linalg.eigvalsh(gram)[:, -1], 1e-12) * 1.01
    step = (1.0 / lip)[:, None]
    w = np.zeros(xty.shape)
    z = w.copy()
    t = 1.0
    for _ in range(iterations):
        grad = np.einsum("bpq,bq->bp", gram, z) - xty
        w_new = soft_threshold(z - step * grad, step * alpha)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = w_new + ((t - 1.0) / t_new) * (w_new - w)
        delta = np.abs(w_new - w).max()
        w, t = w_new, t_new
        if delta < tol:
            break
    return w


def lasso_objective(X, Y, w, alpha):
    r = Y - np.einsum("bnp,bp->bn", X, w)
    return 0.5 * (r ** 2).sum(1) / X.shape[1] + alpha * np.abs(w).sum(1)


@dataclass
class LinearParser:
    """Input-independent sparse regressor: ``G_i = sum_j w_ij M_j`` over the neighbourhood of row i.

    The same coefficients act on x, y and z, so the map commutes with rigid
    motions of the input, like the learned regressor it linearises.
    """

    class_name: str
    neighborhoods: np.ndarray  # (m, k)
    weights: np.ndarray        # (m, k)

    def predict(self, vertices):
        return np.einsum("mk,mkc->mc", self.weights, np.asarray(vertices)[self.neighborhoods])

    @property
    def n_nonzero(self):
        return int((self.weights != 0).sum())


def fit_linear_parser(class_name, neighborhoods, singles, targets, alpha=1e-6, iterations=2000):
    """LASSO per garment vertex; samples are (mesh, coordinate) pairs."""
    if not len(singles):
        raise ValueError("no training meshes")
    nb = np.asarray(neighborhoods)
    # (m, n_samples * 3, k): neighbourhood coordinates, one row per mesh and axis
    X = np.concatenate([np.asarray(v)[nb].transpose(0, 2, 1) for v in singles], axis=1)
    Y = np.concatenate([np.asarray(t) for t in targets], axis=1)
    return LinearParser(class_name, nb, lasso_fista(X, Y, alpha, iterations))


# --- FC parser ---------------------------------------------------------------------

@dataclass
class FCConfig:
    hidden: int = 512
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    d_tol: float = 0.02
    seed: int = 0
    dtype: str = "float32"
    weights: dict = field(default_factory=lambda: L.LossWeights().to_dict())

    def to_dict(self):
        return asdict(self)


@dataclass
class FCParser:
    """Dense net from (scaled) mesh features to the rest-frame displacement field of one garment."""

    class_name: str
    net: DenseNet
    mean_offsets: np.ndarray  # (m, 3) added to the net output

    def offsets(self, x):
        out = self.net(x).astype(np.float64)
        return out.reshape(out.shape[0], -1, 3) + self.mean_offsets


def train_fc_parser(model, class_name, features, params, scans, lap, config, log=None):
    """``features``: scaled inputs (N, 6n); ``params``: per-scan predicted (theta, beta) used for posing."""
    log = MetricLog() if log is None else log
    w = L.LossWeights.from_dict(config.weights)
    w.w_w = 0.0
    garment = model.garments[class_name]
    rng = np.random.default_rng([config.seed, 29])
    d_mean = np.mean([s.garments[class_name].d_g for s in scans], axis=0)
    net = DenseNet([features.shape[1], config.hidden, config.hidden, garment.n_vertices * 3], rng=rng,
                   dtype=np.dtype(config.dtype), out_scale=0.01)
    fc = FCParser(class_name, net, d_mean)
    bodies = [(s.body, vertex_normals(model.mesh(s.body))) for s in scans]
    opt = Adam(net.params(), lr=config.lr)
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatches(len(scans), config.batch_size, rng):
            y, cache = net.forward(features[idx])
            grad = np.zeros(y.shape)
            for b, i in enumerate(idx):
                theta, beta = params[i]
                d_g = y[b].astype(np.float64).reshape(-1, 3) + d_mean
                body, normals = bodies[i]
                v, g, _ = redraped_loss(model, garment, d_g, beta, theta, scans[i].garments[class_name].posed, lap,
                                        body, normals, w, config.d_tol)
                total += v
                grad[b] = g.reshape(-1) / len(idx)
            guard(total, {f"fc_{class_name}": net}, None, "fc")
            opt.step(net.params(), net.backward(cache, grad)[0])
        log.add(f"fc_{class_name}", epoch, loss=total / len(scans))
    return fc


def predict_fc(model, fc, x, theta, beta):
    d_g = fc.offsets(x)[0]
    return bm.garment_skin(model, model.garments[fc.class_name], beta, theta, d_g)


# --- linear scaling ------------------------------------------------------------------

def fit_scaling(pairs):
    """Least-squares isotropic factor from area ratios: ``s^2 = mean(area_out / area_in)``.

    ``pairs`` maps a key (class, size_in, size_out) to a list of
    ``(area_in, area_out)``. Returns key -> s.
    """
    out = {}
    for key, vals in pairs.items():
        ratios = np.array([b / a for a, b in vals])
        out[key] = float(np.sqrt(ratios.mean()))
    return out


def apply_scaling(vertices, s, target_centroid):
    c = vertices.mean(0)
    return target_centroid + s * (vertices - c)


def garment_area(model, class_name, vertices):
    return surface_area(Mesh(vertices, model.garments[class_name].faces))


# --- persistence ----------------------------------------------------------------------

def save_baselines(directory, fc_models=None, linear_models=None, fc_config=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "baselines", "fc": {}, "linear": {}}
    for c, fc in sorted((fc_models or {}).items()):
        meta["fc"][c] = save_net(fc.net, d / "nets", f"fc_{c}")
        io.save_tensor(d / f"fc_{c}_mean_offsets.gft", fc.mean_offsets, "f64")
    for c, lp in sorted((linear_models or {}).items()):
        io.save_tensor(d / f"linear_{c}_neighborhoods.gft", lp.neighborhoods, "i64")
        io.save_tensor(d / f"linear_{c}_weights.gft", lp.weights, "f64")
        meta["linear"][c] = {"nonzero": lp.n_nonzero}
    if fc_config is not None:
        meta["fc_config"] = fc_config.to_dict()
    io.write_json(d / "baselines.json", meta)


def load_baselines(directory):
    d = Path(directory)
    if not (d / "baselines.json").exists():
        raise FileNotFoundError(f"{d} holds no trained baselines (baselines.json missing)")
    meta = io.read_json(d / "baselines.json")
    fcs = {c: FCParser(c, load_net(d / "nets", f"fc_{c}", info), io.load_tensor(d / f"fc_{c}_mean_offsets.gft"))
           for c, info in meta["fc"].items()}
    lins = {c: LinearParser(c, io.load_tensor(d / f"linear_{c}_neighborhoods.gft"),
                            io.load_tensor(d / f"linear_{c}_weights.gft")) for c in meta["linear"]}
    return fcs, lins
