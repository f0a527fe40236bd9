"""Garment resizing: an encoder-decoder from (garment, beta, sizes) to a displacement field.

The encoder compresses the unposed garment (template plus offsets) to a short
latent code. The decoder maps ``[beta, code, size_in, size_out]`` to the
offset field of the resized garment, which is then draped on the body by
garment skinning. Each encoder hidden layer feeds the mirror decoder layer.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from garmentforge import body as bm
from garmentforge import io
from garmentforge import losses as L
from garmentforge.mesh import vertex_normals
from garmentforge.nn import Adam, DenseNet, load_net, save_net
from garmentforge.parser import garment_laplacian
from garmentforge.synth import SIZES
from garmentforge.training import MetricLog, guard, minibatches

logger = logging.getLogger(__name__)


class SizerError(ValueError):
    pass


def size_label(size):
    """One-hot over S, M, L, XL from an index, a name or an existing one-hot."""
    if isinstance(size, str):
        if size not in SIZES:
            raise SizerError(f"unknown size {size!r}; expected one of {SIZES}")
        size = SIZES.index(size)
    arr = np.asarray(size)
    if arr.ndim == 1:
        if arr.shape != (len(SIZES),) or not np.isin(arr, (0, 1)).all() or arr.sum() != 1:
            raise SizerError(f"size label must be one-hot over {len(SIZES)} sizes, got {arr.tolist()}")
        return arr.astype(np.float64)
    idx = int(arr)
    if idx != arr or not 0 <= idx < len(SIZES):
        raise SizerError(f"size index {size!r} out of range")
    out = np.zeros(len(SIZES))
    out[idx] = 1.0
    return out


@dataclass
class SizerConfig:
    latent: int = 30
    hidden: int = 512
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-4
    output_scale: float = 0.01  # decoder outputs are in centimetres
    d_tol: float = 0.02
    seed: int = 0
    dtype: str = "float32"
    weights: dict = field(default_factory=lambda: L.LossWeights().to_dict())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def loss_weights(self):
        w = L.LossWeights.from_dict(self.weights)
        w.w_w = 0.0
        return w


@dataclass
class SizerModel:
    class_name: str
    body_model: object
    config: SizerConfig
    encoder: DenseNet
    decoder: list           # three single-layer nets; layers 1 and 2 also see an encoder hidden layer
    input_mean: np.ndarray  # (m, 3)
    input_scale: float
    offset_mean: np.ndarray  # (m, 3)

    @property
    def garment(self):
        return self.body_model.garments[self.class_name]

    def nets(self):
        out = {"encoder": self.encoder}
        out.update({f"decoder{k}": n for k, n in enumerate(self.decoder)})
        return out

    def params(self):
        return [p for n in self.nets().values() for p in n.params()]


def build_sizer(model, class_name, config=None, rng=None, input_mean=None, input_scale=1.0, offset_mean=None):
    config = SizerConfig() if config is None else config
    rng = np.random.default_rng([config.seed, 31]) if rng is None else rng
    if class_name not in model.garments:
        raise SizerError(f"unknown garment class {class_name!r}")
    m = model.garments[class_name].n_vertices
    h, d = config.hidden, config.latent
    dt = np.dtype(config.dtype)
    encoder = DenseNet([3 * m, h, h, d], rng=rng, dtype=dt)
    cond = model.n_betas + d + 2 * len(SIZES)
    decoder = [DenseNet([cond, h], ["relu"], rng=rng, dtype=dt),
               DenseNet([2 * h, h], ["relu"], rng=rng, dtype=dt),
               DenseNet([2 * h, 3 * m], ["linear"], rng=rng, dtype=dt, out_scale=0.01)]
    zeros = np.zeros((m, 3))
    return SizerModel(class_name, model, config, encoder, decoder,
                      zeros if input_mean is None else np.asarray(input_mean, dtype=np.float64),
                      float(input_scale), zeros if offset_mean is None else np.asarray(offset_mean, dtype=np.float64))


def unposed_garment(model, class_name, beta, d_g):
    g = model.garments[class_name]
    return bm.garment_template(model, g, bm.BodyParams(beta, np.zeros(3 * model.n_joints))) + d_g


def _inputs(sizer, garments_unposed):
    g = np.asarray(garments_unposed, dtype=np.float64)
    m = sizer.garment.n_vertices
    if g.shape[-2:] != (m, 3):
        raise SizerError(f"garment for class {sizer.class_name} must be {m} x 3, got {g.shape[-2:]}")
    return ((g - sizer.input_mean) / sizer.input_scale).reshape(len(g), -1)


def _conditions(sizer, betas, d_in, d_out):
    betas = np.atleast_2d(np.asarray(betas, dtype=np.float64))
    if betas.shape[1] != sizer.body_model.n_betas:
        raise SizerError(f"beta must have {sizer.body_model.n_betas} entries")
    return betas, np.atleast_2d(d_in), np.atleast_2d(d_out)


def forward(sizer, x, betas, d_in, d_out):
    """Batched forward pass; returns ``(offsets (B, m, 3), cache)``."""
    enc, dec = sizer.encoder, sizer.decoder
    z, ec = enc.forward(x)
    a0 = np.concatenate([betas, z.astype(np.float64), d_in, d_out], axis=1)
    y0, c0 = dec[0].forward(a0)
    y1, c1 = dec[1].forward(np.concatenate([y0, enc.hidden(ec, 1)], axis=1))
    y2, c2 = dec[2].forward(np.concatenate([y1, enc.hidden(ec, 0)], axis=1))
    out = sizer.offset_mean + sizer.config.output_scale * y2.astype(np.float64).reshape(len(x), -1, 3)
    return out, {"enc": ec, "dec": (c0, c1, c2), "n_beta": betas.shape[1], "latent": z.shape[1]}


def backward(sizer, cache, grad_offsets):
    """Parameter gradients (in ``sizer.params()`` order) from the gradient on the offsets."""
    enc, dec = sizer.encoder, sizer.decoder
    h = enc.dims[1]
    c0, c1, c2 = cache["dec"]
    g = sizer.config.output_scale * np.asarray(grad_offsets).reshape(len(grad_offsets), -1)
    g2, ga2 = dec[2].backward(c2, g)
    g1, ga1 = dec[1].backward(c1, ga2[:, :h])
    g0, ga0 = dec[0].backward(c0, ga1[:, :h])
    nb, d = cache["n_beta"], cache["latent"]
    ge, _ = enc.backward(cache["enc"], ga0[:, nb:nb + d], hidden_grads={0: ga2[:, h:], 1: ga1[:, h:]})
    return ge + g0 + g1 + g2


def encode(sizer, garment_unposed):
    """Latent code of one unposed garment."""
    return sizer.encoder(_inputs(sizer, np.asarray(garment_unposed)[None]))[0].astype(np.float64)


def predict_offsets(sizer, garment_unposed, beta, delta_in, delta_out):
    x = _inputs(sizer, np.asarray(garment_unposed)[None])
    betas, d_in, d_out = _conditions(sizer, beta, size_label(delta_in), size_label(delta_out))
    return forward(sizer, x, betas, d_in, d_out)[0][0]


def resize(sizer, garment_unposed, beta, delta_in, delta_out, theta=None):
    """Resized garment draped on the body ``(beta, theta)``; ``theta`` defaults to the rest pose."""
    model = sizer.body_model
    theta = np.zeros(3 * model.n_joints) if theta is None else np.asarray(theta, dtype=np.float64)
    d_g = predict_offsets(sizer, garment_unposed, beta, delta_in, delta_out)
    return bm.garment_skin(model, sizer.garment, beta, theta, d_g)


def redraped_loss(model, garment, d_g, beta, theta, gt, lap, body, normals, weights, d_tol):
    """Composite garment loss of the skinned offsets; gradient returned wrt the offsets."""
    posed = bm.garment_skin(model, garment, beta, theta, d_g).vertices
    v, g_posed, terms = L.loss_sizer_total(posed, gt, garment.faces, lap, body, normals, weights, d_tol)
    rot = bm.garment_blend(model, garment, beta, theta)[:, :, :3]
    return v, np.einsum("mab,ma->mb", rot, g_posed), terms


# --- training --------------------------------------------------------------------

@dataclass
class ResizePair:
    subject: int
    source: object  # Scan
    target: object  # Scan


def size_pairs(scans, identity=True):
    """Ordered same-subject pairs, optionally including a -> a."""
    by_subject = {}
    for s in scans:
        by_subject.setdefault(s.subject, []).append(s)
    out = []
    for sub in sorted(by_subject):
        group = sorted(by_subject[sub], key=lambda s: s.size)
        for a in group:
            for b in group:
                if identity or a.size != b.size:
                    out.append(ResizePair(sub, a, b))
    return out


class _PairData:
    """Precomputed inputs and supervision for a list of pairs."""

    def __init__(self, sizer, pairs):
        model, c = sizer.body_model, sizer.class_name
        self.pairs = pairs
        self.unposed = np.stack([unposed_garment(model, c, p.source.beta, p.source.garments[c].d_g) for p in pairs])
        self.betas = np.stack([p.source.beta for p in pairs])
        self.d_in = np.stack([size_label(p.source.size) for p in pairs])
        self.d_out = np.stack([size_label(p.target.size) for p in pairs])
        self.normals = {}
        for p in pairs:
            if p.target.scan_id not in self.normals:
                self.normals[p.target.scan_id] = vertex_normals(model.mesh(p.target.body))


def fit_normalization(sizer, scans):
    model, c = sizer.body_model, sizer.class_name
    unposed = np.stack([unposed_garment(model, c, s.beta, s.garments[c].d_g) for s in scans])
    sizer.input_mean = unposed.mean(0)
    sizer.input_scale = float(max(np.sqrt(((unposed - sizer.input_mean) ** 2).mean()), 1e-6))
    sizer.offset_mean = np.mean([s.garments[c].d_g for s in scans], axis=0)


def train_sizer(sizer, train_scans, log=None, checkpoint_dir=None, epochs=None):
    """Fit on every ordered same-subject size pair (identity pairs included)."""
    cfg = sizer.config
    log = MetricLog() if log is None else log
    pairs = size_pairs(train_scans)
    if not pairs:
        raise SizerError("training needs at least one subject with a garment")
    fit_normalization(sizer, train_scans)
    data = _PairData(sizer, pairs)
    x_all = _inputs(sizer, data.unposed)
    model, garment = sizer.body_model, sizer.garment
    lap = garment_laplacian(model, sizer.class_name)
    weights = cfg.loss_weights
    rng = np.random.default_rng([cfg.seed, 37])
    opt = Adam(sizer.params(), lr=cfg.lr)
    n_epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        total = 0.0
        for idx in minibatches(len(pairs), cfg.batch_size, rng):
            offsets, cache = forward(sizer, x_all[idx], data.betas[idx], data.d_in[idx], data.d_out[idx])
            grad = np.zeros(offsets.shape)
            for b, i in enumerate(idx):
                t = pairs[i].target
                v, g, _ = redraped_loss(model, garment, offsets[b], t.beta, t.theta, t.garments[sizer.class_name].posed,
                                        lap, t.body, data.normals[t.scan_id], weights, cfg.d_tol)
                total += v
                grad[b] = g / len(idx)
            guard(total, sizer.nets(), checkpoint_dir, f"sizer_{sizer.class_name}")
            opt.step(sizer.params(), backward(sizer, cache, grad))
        log.add(f"sizer_{sizer.class_name}", epoch, loss=total / len(pairs))
    return log


# --- persistence -------------------------------------------------------------------

def save_sizer(sizers, directory):
    """Write one or more class models (class -> SizerModel) sharing a body model."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sizers = dict(sorted(sizers.items()))
    bm.save_model(next(iter(sizers.values())).body_model, d / "body_model")
    meta = {"kind": "sizer", "classes": {}}
    for c, s in sizers.items():
        infos = {name: save_net(net, d / "nets", f"{c}_{name}") for name, net in s.nets().items()}
        io.save_tensor(d / f"{c}_input_mean.gft", s.input_mean, "f64")
        io.save_tensor(d / f"{c}_offset_mean.gft", s.offset_mean, "f64")
        meta["classes"][c] = {"config": s.config.to_dict(), "nets": infos, "input_scale": s.input_scale}
    meta["config_hash"] = io.config_hash(meta["classes"])
    io.write_json(d / "sizer.json", meta)


def load_sizer(directory):
    d = Path(directory)
    if not (d / "sizer.json").exists():
        raise SizerError(f"{d} does not contain a trained sizer (sizer.json missing)")
    meta = io.read_json(d / "sizer.json")
    model = bm.load_model(d / "body_model")
    out = {}
    for c, info in meta["classes"].items():
        nets = {name: load_net(d / "nets", f"{c}_{name}", i) for name, i in info["nets"].items()}
        out[c] = SizerModel(c, model, SizerConfig.from_dict(info["config"]), nets["encoder"],
                            [nets[f"decoder{k}"] for k in range(3)], io.load_tensor(d / f"{c}_input_mean.gft"),
                            float(info["input_scale"]), io.load_tensor(d / f"{c}_offset_mean.gft"))
    return out


# --- gradient check through the whole chain --------------------------------------------

def check_sizer_chain(rng):
    """Encoder with skips -> decoder -> garment skinning -> composite loss, wrt every parameter."""
    from garmentforge.gradchecks import KINK_MARGIN, STEP, _composite_setup, _interp_kinks, _push_off
    from garmentforge.nn import gradcheck

    model, g, body, normals, gt, _, _, lap = _composite_setup(rng)
    weights = L.LossWeights(*(rng.uniform(0.1, 2.0, size=8)))
    d_tol = 0.01
    beta = 0.3 * rng.normal(size=model.n_betas)
    theta = 0.05 * rng.normal(size=3 * model.n_joints)
    cfg = SizerConfig(latent=3, hidden=5, dtype="float64", output_scale=1.0)
    base = bm.unpose_garment(model, g, beta, theta, gt)
    for _ in range(100):
        sizer = build_sizer(model, g.class_name, cfg, rng, input_mean=unposed_garment(model, g.class_name, beta, base),
                            input_scale=0.01, offset_mean=base)
        for net in sizer.nets().values():
            net.biases[0] += 0.3 * rng.normal(size=net.biases[0].shape)
        unposed = unposed_garment(model, g.class_name, beta, base + 0.005 * rng.normal(size=base.shape))
        x = _inputs(sizer, unposed[None])
        d_in, d_out = size_label(1)[None], size_label(2)[None]
        _, cache = forward(sizer, x, beta[None], d_in, d_out)
        pres = [cache["enc"]["pre"][0], cache["enc"]["pre"][1]] + [c["pre"][0] for c in cache["dec"][:2]]
        if min(np.abs(p).min() for p in pres) > 100 * KINK_MARGIN:
            break
    body_v = body.vertices

    def offsets_of(p):
        return forward(sizer, x, beta[None], d_in, d_out)[0][0]

    last = sizer.decoder[2]
    kinks = _interp_kinks(gt, body, normals, d_tol)

    def kink_dist(bias):
        last.biases[0] = bias
        pred = bm.garment_skin(model, g, beta, theta, offsets_of(None)).vertices
        return np.minimum(kinks(pred), np.abs(pred - gt)).min(1).repeat(3)
    last.biases[0] = _push_off(last.biases[0].copy(), kink_dist, rng, 0.1)

    named = {f"{n}.{pn}": p for n, net in sizer.nets().items() for pn, p in zip(net.param_names(), net.params())}

    def fn(p):
        for n, net in sizer.nets().items():
            for k in range(len(net.weights)):
                net.weights[k], net.biases[k] = p[f"{n}.W{k}"], p[f"{n}.b{k}"]
        offs, cache = forward(sizer, x, beta[None], d_in, d_out)
        v, gr, _ = redraped_loss(model, g, offs[0], beta, theta, gt, lap, body_v, normals, weights, d_tol)
        grads = backward(sizer, cache, gr[None])
        return v, dict(zip(named, grads))
    return gradcheck(fn, {k: v.copy() for k, v in named.items()}, STEP, max_probes=30, rng=rng)
