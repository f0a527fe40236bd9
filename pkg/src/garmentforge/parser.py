"""Parsing a single registered mesh into body parameters, garments and a detailed body.

Pose and shape come from two small dense nets. Each garment (and the visible
skin of the body) is a row-softmax regressor over a fixed k-nearest
neighbourhood of input vertices, so every output vertex is a convex
combination of nearby input vertices.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy.spatial import cKDTree

from garmentforge import body as bm
from garmentforge import io
from garmentforge import losses as L
from garmentforge.mesh import Mesh, graph_laplacian, knn_neighborhoods, vertex_normals
from garmentforge.nn import Adam, DenseNet, NetworkError, gradcheck, load_net, save_net
from garmentforge.regressor import SparseRegressor, softmax_rows, softmax_rows_vjp
from garmentforge.training import MetricLog, guard, minibatches

logger = logging.getLogger(__name__)


class ParserError(ValueError):
    pass


@dataclass
class ParserConfig:
    k: int = 50
    pose_hidden: int = 256
    hidden: int = 512
    batch_size: int = 8
    lr: float = 1e-4
    init_lr: float = 1e-4
    pose_epochs: int = 30
    augment_bodies: int = 150
    augment_poses: int = 1
    augment_jitter: float = 0.03
    init_epochs: int = 40
    init_target: float = 0.05
    init_tolerance: float = 0.0015
    joint_epochs: int = 10
    finetune_epochs: int = 30
    body_epochs: int = 3
    d_tol: float = 0.02
    tau: float = 0.02
    seed: int = 0
    dtype: str = "float32"
    weights: dict = field(default_factory=lambda: L.LossWeights().to_dict())

    def __post_init__(self):
        if self.k < 1:
            raise ParserError("k must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ParserError("dtype must be float32 or float64")
        self.loss_weights  # validates

    @property
    def loss_weights(self):
        return L.LossWeights.from_dict(self.weights)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- features -----------------------------------------------------------------

def mesh_features(mesh, n_vertices=None):
    """Centroid-centred positions followed by vertex normals (6n vector)."""
    if n_vertices is not None and mesh.n_vertices != n_vertices:
        raise ParserError(f"mesh has {mesh.n_vertices} vertices, expected {n_vertices}")
    v = mesh.vertices
    return np.concatenate([(v - v.mean(0)).ravel(), vertex_normals(mesh).ravel()])


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats):
        return cls(feats.mean(0), np.maximum(feats.std(0), 1e-3))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, feats):
        return (feats - self.mean) / self.std


# --- bundle -----------------------------------------------------------------------

@dataclass
class ParserBundle:
    model: object
    config: ParserConfig
    pose_net: DenseNet       # 3J pose outputs
    shape_net: DenseNet      # |beta| outputs
    garment_nets: dict       # class -> DenseNet emitting m_g * k logits
    body_net: DenseNet       # |I^s| * k logits
    neighborhoods: dict      # class -> (m_g, k); key "body" for the skin rows
    weighting: L.SkinWeighting
    scaler: FeatureScaler

    @property
    def classes(self):
        return sorted(self.garment_nets)

    def features(self, mesh):
        return self.scaler(mesh_features(mesh, self.model.n_vertices))


def garment_neighborhoods(model, vertex_ids, k):
    """k nearest template vertices per row, with the associated vertex forced to slot 0."""
    k = min(k, model.n_vertices)
    nb = knn_neighborhoods(model.template[vertex_ids], model.template, k)
    for i, v in enumerate(vertex_ids):
        row = nb[i]
        hit = np.flatnonzero(row == v)
        if hit.size == 0:
            raise ParserError(f"associated vertex {v} missing from its neighbourhood")
        if hit[0] != 0:
            nb[i] = np.concatenate([[v], np.delete(row, hit[0])])
    return nb


def build_bundle(model, config=None, rng=None, init="he"):
    config = ParserConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    dt = np.dtype(config.dtype)
    n_in = 6 * model.n_vertices
    weighting = L.make_skin_weighting(model.mesh(), model.skin_mask, config.tau)
    nbs = {c: garment_neighborhoods(model, g.vertex_ids, config.k) for c, g in sorted(model.garments.items())}
    nbs["body"] = garment_neighborhoods(model, weighting.skin_ids, config.k)
    k = nbs["body"].shape[1]

    def net(out, hidden, scale=1.0):
        return DenseNet([n_in, hidden, hidden, out], rng=rng, dtype=dt, init=init, out_scale=scale)
    pose = net(3 * model.n_joints, config.pose_hidden, 0.01)
    shape = net(model.n_betas, config.pose_hidden, 0.01)
    garments = {c: net(nbs[c].shape[0] * k, config.hidden, 0.01) for c in sorted(model.garments)}
    body = net(nbs["body"].shape[0] * k, config.hidden, 0.01)
    return ParserBundle(model, config, pose, shape, garments, body, nbs, weighting, FeatureScaler.identity(n_in))


# --- inference ---------------------------------------------------------------------

def predict_pose_shape(bundle, mesh):
    x = bundle.features(mesh)
    theta = bundle.pose_net(x)[0].astype(np.float64)
    beta = bundle.shape_net(x)[0].astype(np.float64)
    if not (np.isfinite(theta).all() and np.isfinite(beta).all()):
        raise NetworkError("non-finite pose or shape prediction")
    return theta, beta


def regressor_from_logits(logits, neighborhoods):
    logits = np.asarray(logits, dtype=np.float64).reshape(neighborhoods.shape)
    if not np.isfinite(logits).all():
        raise NetworkError("non-finite regressor logits")
    return SparseRegressor(neighborhoods, softmax_rows(logits))


def predict_regressor(net, mesh_or_features, neighborhoods, scaler=None):
    """Softmax regressor from a net; accepts a Mesh (features computed here) or features."""
    if isinstance(mesh_or_features, Mesh):
        x = mesh_features(mesh_or_features)
        if scaler is not None:
            x = scaler(x)
    else:
        x = mesh_or_features
    return regressor_from_logits(net(x)[0], neighborhoods)


def apply_regressor(reg, mesh, faces):
    return Mesh(reg.apply(mesh.vertices), faces)


def parse(bundle, mesh):
    """Garments, smooth and detailed body, and (theta, beta) for one input mesh."""
    model = bundle.model
    x = bundle.features(mesh)
    theta = bundle.pose_net(x)[0].astype(np.float64)
    beta = bundle.shape_net(x)[0].astype(np.float64)
    if not (np.isfinite(theta).all() and np.isfinite(beta).all()):
        raise NetworkError("non-finite pose or shape prediction")
    out = {"theta": theta, "beta": beta}
    for c in bundle.classes:
        reg = predict_regressor(bundle.garment_nets[c], x, bundle.neighborhoods[c])
        out[c] = apply_regressor(reg, mesh, model.garments[c].faces)
        layer = model.garments[c].layer
        out.setdefault(layer, out[c])
    smooth = bm.skin(model, bm.BodyParams(beta, theta)).vertices
    reg = predict_regressor(bundle.body_net, x, bundle.neighborhoods["body"])
    detail = smooth.copy()
    w = bundle.weighting.w_geo[:, None]
    ids = bundle.weighting.skin_ids
    detail[ids] = w * reg.apply(mesh.vertices) + (1.0 - w) * smooth[ids]
    out["smooth_body"] = Mesh(smooth, model.faces)
    out["body"] = Mesh(detail, model.faces)
    return out


# --- training ------------------------------------------------------------------------

@dataclass
class _Item:
    x: np.ndarray           # scaled features
    single: np.ndarray      # (n, 3) input vertices
    beta: np.ndarray
    theta: np.ndarray
    garments: dict          # class -> posed ground truth
    body: np.ndarray        # posed ground-truth body
    body_normals: np.ndarray
    tree: object = None


def _items(bundle, scans):
    model = bundle.model
    out = []
    for s in scans:
        normals = vertex_normals(model.mesh(s.body))
        out.append(_Item(bundle.features(model.mesh(s.single)), s.single, s.beta, s.theta,
                         {c: g.posed for c, g in s.garments.items()}, s.body, normals, cKDTree(s.body)))
    return out


def _stack(items):
    return np.stack([it.x for it in items])


def _pose_grads(bundle, item, theta_hat, beta_hat, weights):
    """Per-item pose and shape losses with gradients wrt the network outputs."""
    model = bundle.model
    p_pose = bm.BodyParams(item.beta, theta_hat)
    body = bm.skin(model, p_pose).vertices
    v_pose, (g_theta, g_body) = L.loss_pose(theta_hat, item.theta, body, item.single, weights)
    _, d_theta, _ = bm.skin_vjp(model, p_pose, g_body)
    p_shape = bm.BodyParams(beta_hat, item.theta)
    body = bm.skin(model, p_shape).vertices
    v_shape, (g_beta, g_body) = L.loss_shape(beta_hat, item.beta, model.shape_sigmas, body, item.single, weights)
    d_beta, _, _ = bm.skin_vjp(model, p_shape, g_body)
    return v_pose, g_theta + d_theta, v_shape, g_beta + d_beta


def _reposed(bundle, base, rng):
    """Copies of each ``(beta, D)`` in ``base`` skinned with fresh pose jitter."""
    model, cfg = bundle.model, bundle.config
    out = []
    for beta, offsets in base:
        for _ in range(cfg.augment_poses):
            theta = cfg.augment_jitter * rng.normal(size=3 * model.n_joints)
            v = bm.skin(model, bm.BodyParams(beta, theta, offsets)).vertices
            out.append(SimpleNamespace(x=bundle.features(model.mesh(v)), single=v, beta=beta, theta=theta))
    return out


def train_pose_shape(bundle, items, epochs, rng, log, checkpoint_dir=None, repose=()):
    """Pose and shape nets on ``items`` plus, every epoch, freshly re-posed copies of ``repose`` scans."""
    cfg = bundle.config
    weights = cfg.loss_weights
    opt_p = Adam(bundle.pose_net.params(), lr=cfg.lr)
    opt_s = Adam(bundle.shape_net.params(), lr=cfg.lr)
    model = bundle.model
    base = [(it.beta, bm.unpose_body(model, it.beta, it.theta, it.single)) for it in repose]
    fixed = items
    for epoch in range(epochs):
        items = fixed + _reposed(bundle, base, rng)
        tot_p = tot_s = 0.0
        for idx in minibatches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            x = _stack(batch)
            th, cache_p = bundle.pose_net.forward(x)
            be, cache_s = bundle.shape_net.forward(x)
            g_th = np.zeros(th.shape)
            g_be = np.zeros(be.shape)
            for b, it in enumerate(batch):
                vp, gt_, vs, gb_ = _pose_grads(bundle, it, th[b].astype(np.float64), be[b].astype(np.float64),
                                               weights)
                tot_p += vp
                tot_s += vs
                g_th[b] = gt_ / len(batch)
                g_be[b] = gb_ / len(batch)
            guard(tot_p + tot_s, {"pose": bundle.pose_net, "shape": bundle.shape_net}, checkpoint_dir, "pose/shape")
            opt_p.step(bundle.pose_net.params(), bundle.pose_net.backward(cache_p, g_th)[0])
            opt_s.step(bundle.shape_net.params(), bundle.shape_net.backward(cache_s, g_be)[0])
        log.add("pose_shape", epoch, pose=tot_p / len(items), shape=tot_s / len(items))


def row_deviation(reg):
    """Largest deviation of a row from the one-hot target at slot 0."""
    return float(1.0 - reg.values[:, 0].min())


def init_to_indicator(bundle, net, neighborhoods, items, rng, log, name="indicator", garment_ids=None):
    """Cross-entropy pretraining of softmax rows toward slot 0 (the associated vertex).

    Stops once every training row deviates from one-hot by less than
    ``init_target`` and the regressed garment is within ``init_tolerance``
    (max coordinate error) of the cut-out on every training mesh. Returns the
    final ``(deviation, error)``.
    """
    cfg = bundle.config
    if neighborhoods.shape[1] < 1:
        raise ParserError("empty neighbourhoods")
    if garment_ids is not None and (neighborhoods[:, 0] != garment_ids).any():
        raise ParserError("associated vertex missing from slot 0")
    opt = Adam(net.params(), lr=cfg.init_lr)
    x_all = _stack(items)

    singles = np.stack([it.single for it in items])
    cut = singles[:, neighborhoods[:, 0]]

    def deviation():
        logits = net(x_all).astype(np.float64).reshape(len(items), *neighborhoods.shape)
        p = softmax_rows(logits)
        err = np.abs(np.einsum("bmk,bmkc->bmc", p, singles[:, neighborhoods]) - cut).max()
        return float(1.0 - p[..., 0].min()), float(err)
    dev, err = deviation()
    for epoch in range(cfg.init_epochs):
        if dev < cfg.init_target and err < cfg.init_tolerance:
            break
        ce_tot = 0.0
        for idx in minibatches(len(items), cfg.batch_size, rng):
            logits, cache = net.forward(x_all[idx])
            p = softmax_rows(logits.astype(np.float64).reshape(len(idx), *neighborhoods.shape))
            ce_tot += indicator_cross_entropy(p.reshape(-1, neighborhoods.shape[1])) * len(idx)
            g = p.copy()
            g[..., 0] -= 1.0
            g /= len(idx) * neighborhoods.shape[0]
            opt.step(net.params(), net.backward(cache, g.reshape(len(idx), -1))[0])
            dev, err = deviation()
            if dev < cfg.init_target and err < cfg.init_tolerance:
                break
        log.add(name, epoch, cross_entropy=ce_tot / len(items), max_row_deviation=dev, max_cutout_error=err)
    return dev, err


def indicator_cross_entropy(probs):
    """Mean cross-entropy of softmax rows against the slot-0 one-hot target."""
    return float(-np.log(np.maximum(probs[:, 0], 1e-300)).mean())


def garment_laplacian(model, cname):
    g = model.garments[cname]
    return graph_laplacian(Mesh(model.template[g.vertex_ids], g.faces))


def _garment_loss(bundle, cname, item, logits, lap, weights):
    nb = bundle.neighborhoods[cname]
    w = softmax_rows(np.asarray(logits, dtype=np.float64).reshape(nb.shape))
    reg = SparseRegressor(nb, w)
    g = bundle.model.garments[cname]
    v, g_vals, terms = L.loss_parser_total(reg, item.single, item.garments[cname], g.faces, lap, item.body,
                                           item.body_normals, weights, bundle.config.d_tol)
    return v, softmax_rows_vjp(w, g_vals).reshape(-1), terms


def train_garment_nets(bundle, items, classes, epochs, rng, log, stage, opts, checkpoint_dir=None):
    """Optimise the composite garment objective for ``classes`` jointly (sum of losses)."""
    cfg = bundle.config
    weights = cfg.loss_weights
    laps = {c: garment_laplacian(bundle.model, c) for c in classes}
    for epoch in range(epochs):
        totals = {c: 0.0 for c in classes}
        for idx in minibatches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            x = _stack(batch)
            for c in classes:
                net = bundle.garment_nets[c]
                logits, cache = net.forward(x)
                grad = np.zeros(logits.shape)
                for b, it in enumerate(batch):
                    v, g, _ = _garment_loss(bundle, c, it, logits[b], laps[c], weights)
                    totals[c] += v
                    grad[b] = g / len(batch)
                guard(totals[c], {c: net}, checkpoint_dir, stage)
                opts[c].step(net.params(), net.backward(cache, grad)[0])
        log.add(stage, epoch, **{f"loss_{c}": totals[c] / len(items) for c in classes})


def train_body_net(bundle, items, epochs, rng, log, checkpoint_dir=None):
    """Skin-detail regressor: w_geo-weighted L1 to the input plus the weight regulariser."""
    cfg = bundle.config
    weights = cfg.loss_weights
    nb = bundle.neighborhoods["body"]
    opt = Adam(bundle.body_net.params(), lr=cfg.lr)
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            logits, cache = bundle.body_net.forward(_stack(batch))
            grad = np.zeros(logits.shape)
            for b, it in enumerate(batch):
                w = softmax_rows(logits[b].astype(np.float64).reshape(nb.shape))
                reg = SparseRegressor(nb, w)
                v, g_rows = L.loss_body_3d(reg.apply(it.single), it.single, bundle.weighting)
                g_vals = weights.w_3d * np.einsum("ic,ikc->ik", g_rows, it.single[nb])
                v = weights.w_3d * v
                if weights.w_w > 0:
                    vr, gr = L.loss_weight_reg(reg, it.single)
                    v += weights.w_w * vr
                    g_vals = g_vals + weights.w_w * gr
                total += v
                grad[b] = softmax_rows_vjp(w, g_vals).reshape(-1) / len(batch)
            guard(total, {"body": bundle.body_net}, checkpoint_dir, "body")
            opt.step(bundle.body_net.params(), bundle.body_net.backward(cache, grad)[0])
        log.add("body", epoch, loss=total / len(items))


def augment_bodies(model, cfg):
    """Undressed bodies drawn from the shape prior with A-pose jitter, for the pose/shape nets."""
    rng = np.random.default_rng([cfg.seed, 23])
    out = []
    for _ in range(cfg.augment_bodies):
        beta = np.clip(rng.normal(size=model.n_betas), -2.5, 2.5)
        theta = cfg.augment_jitter * rng.normal(size=3 * model.n_joints)
        v = bm.skin(model, bm.BodyParams(beta, theta)).vertices
        out.append(SimpleNamespace(single=v, body=v, beta=beta, theta=theta, garments={}))
    return out


def train_parser(bundle, train_scans, undressed=(), checkpoint_dir=None, log=None):
    """Staged training; returns the metric log.

    1. pose and shape nets (clothed scans plus undressed bodies);
    2. cross-entropy initialisation of every regressor to the cut-out;
    3. joint training of all garment nets, then per-class fine-tuning;
    4. the skin-detail regressor.
    """
    cfg = bundle.config
    log = MetricLog() if log is None else log
    rng = np.random.default_rng([cfg.seed, 17])
    if not train_scans:
        raise ParserError("no training scans")
    feats = np.stack([mesh_features(bundle.model.mesh(s.single)) for s in train_scans])
    bundle.scaler = FeatureScaler.fit(feats)
    items = _items(bundle, train_scans)
    pose_items = items + _items(bundle, list(undressed) + augment_bodies(bundle.model, cfg))
    train_pose_shape(bundle, pose_items, cfg.pose_epochs, rng, log, checkpoint_dir, repose=items)

    for c in bundle.classes:
        init_to_indicator(bundle, bundle.garment_nets[c], bundle.neighborhoods[c], items, rng, log,
                          f"init_{c}", bundle.model.garments[c].vertex_ids)
    init_to_indicator(bundle, bundle.body_net, bundle.neighborhoods["body"], items, rng, log, "init_body",
                      bundle.weighting.skin_ids)

    opts = {c: Adam(bundle.garment_nets[c].params(), lr=cfg.lr) for c in bundle.classes}
    train_garment_nets(bundle, items, bundle.classes, cfg.joint_epochs, rng, log, "joint", opts, checkpoint_dir)
    for c in bundle.classes:
        train_garment_nets(bundle, items, [c], cfg.finetune_epochs, rng, log, f"finetune_{c}", opts, checkpoint_dir)
    train_body_net(bundle, items, cfg.body_epochs, rng, log, checkpoint_dir)
    return log


# --- persistence -------------------------------------------------------------------------

def save_bundle(bundle, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bm.save_model(bundle.model, d / "body_model")
    nets = {"pose": bundle.pose_net, "shape": bundle.shape_net, "body": bundle.body_net}
    nets.update({f"garment_{c}": n for c, n in bundle.garment_nets.items()})
    infos = {name: save_net(net, d / "nets", name) for name, net in sorted(nets.items())}
    for key, nb in bundle.neighborhoods.items():
        io.save_tensor(d / f"neighborhoods_{key}.gft", nb, "i64")
    io.save_tensor(d / "feature_mean.gft", bundle.scaler.mean, "f64")
    io.save_tensor(d / "feature_std.gft", bundle.scaler.std, "f64")
    io.write_json(d / "parser.json", {"kind": "parser", "config": bundle.config.to_dict(), "nets": infos,
                                      "classes": bundle.classes, "config_hash": io.config_hash(bundle.config.to_dict())})


def load_bundle(directory):
    d = Path(directory)
    if not (d / "parser.json").exists():
        raise ParserError(f"{d} does not contain a trained parser (parser.json missing)")
    meta = io.read_json(d / "parser.json")
    model = bm.load_model(d / "body_model")
    cfg = ParserConfig.from_dict(meta["config"])
    nets = {name: load_net(d / "nets", name, info) for name, info in meta["nets"].items()}
    nbs = {c: io.load_tensor(d / f"neighborhoods_{c}.gft") for c in list(meta["classes"]) + ["body"]}
    weighting = L.make_skin_weighting(model.mesh(), model.skin_mask, cfg.tau)
    scaler = FeatureScaler(io.load_tensor(d / "feature_mean.gft"), io.load_tensor(d / "feature_std.gft"))
    return ParserBundle(model, cfg, nets["pose"], nets["shape"],
                        {c: nets[f"garment_{c}"] for c in meta["classes"]}, nets["body"], nbs, weighting, scaler)


# --- gradient check through the whole chain ------------------------------------------------

def check_parser_chain(rng):
    """Features -> dense net -> softmax rows -> composite garment loss, wrt the net parameters."""
    from garmentforge.gradchecks import KINK_MARGIN, STEP, _composite_setup, _interp_kinks

    model, g, body, normals, gt, nb, m, lap = _composite_setup(rng)
    weights = L.LossWeights(*(rng.uniform(0.1, 2.0, size=8)))
    d_tol = 0.01
    k = nb.shape[1]
    x = rng.normal(size=(1, 12))
    for _ in range(100):
        net = DenseNet([12, 6, nb.size], rng=rng, dtype=np.float64, out_scale=0.3)
        net.biases[0] += 0.1 * rng.normal(size=6)
        _, cache = net.forward(x)
        if np.abs(cache["pre"][0]).min() > 100 * KINK_MARGIN:
            break
    net.biases[1] += np.tile(np.r_[1.0, np.zeros(k - 1)], len(nb))

    def kink_dist(bias):
        lg = (net.hidden(net.forward(x)[1], 0) @ net.weights[1] + bias).reshape(nb.shape)
        reg = SparseRegressor(nb, softmax_rows(lg))
        pred = reg.apply(m)
        per_vertex = np.minimum(_interp_kinks(gt, body, normals, d_tol)(pred), np.abs(pred - gt)).min(1)
        s = np.sort(reg.values, axis=1)
        per_vertex = np.minimum(per_vertex, s[:, -1] - s[:, -2])
        return np.repeat(per_vertex, k)
    from garmentforge.gradchecks import _push_off

    net.biases[1] = _push_off(net.biases[1], kink_dist, rng, 1.0)

    def fn(p):
        for i in range(2):
            net.weights[i], net.biases[i] = p[f"W{i}"], p[f"b{i}"]
        logits, cache = net.forward(x)
        w = softmax_rows(logits[0].reshape(nb.shape))
        v, g_vals, _ = L.loss_parser_total(SparseRegressor(nb, w), m, gt, g.faces, lap, body.vertices, normals,
                                           weights, d_tol)
        grads, _ = net.backward(cache, softmax_rows_vjp(w, g_vals).reshape(1, -1))
        return v, dict(zip(net.param_names(), grads))
    params = dict(zip(net.param_names(), [p.copy() for p in net.params()]))
    return gradcheck(fn, params, STEP, max_probes=30, rng=rng)
