"""Finite-difference verification suites for every loss and network.

Each suite draws ``n_points`` seeded random configurations, moves entries
that sit within ``KINK_MARGIN`` of a nondifferentiable set (L1 ties, relu
hinges, the d_tol gate, nearest-neighbour and argmax switches), and compares
analytic gradients with central differences.
"""

from functools import lru_cache

import numpy as np

from garmentforge import body as bm
from garmentforge import losses as L
from garmentforge.mesh import Mesh, graph_laplacian, vertex_normals
from garmentforge.nn import DenseNet, GradcheckReport, gradcheck
from garmentforge.regressor import SparseRegressor, softmax_rows, softmax_rows_vjp

STEP = 1e-6
KINK_MARGIN = 1e-5
TOLERANCE = 1e-4


@lru_cache(maxsize=1)
def _humanoid():
    from garmentforge.procedural import build_humanoid

    return build_humanoid()


def _scene(rng, garment="tshirt"):
    """Posed body, a garment 1 cm outside it, and a noisy prediction of the garment."""
    model = _humanoid()
    g = model.garments[garment]
    beta = 0.5 * rng.normal(size=model.n_betas)
    theta = 0.1 * rng.normal(size=3 * model.n_joints)
    body = bm.skin(model, bm.BodyParams(beta, theta))
    normals = vertex_normals(body)
    rest_normals = vertex_normals(model.mesh(bm.unposed(model, bm.BodyParams(beta, np.zeros_like(theta)))))
    gt = bm.garment_skin(model, g, beta, theta, 0.01 * rest_normals[g.vertex_ids]).vertices
    pred = gt + 0.004 * rng.normal(size=gt.shape)
    return model, g, body, normals, gt, pred


def _push_off(values, distance_fn, rng, scale):
    """Resample entries whose kink distance is below the margin."""
    values = values.copy()
    for _ in range(100):
        bad = distance_fn(values) < KINK_MARGIN
        if not bad.any():
            return values
        values[bad] += scale * rng.normal(size=values[bad].shape)
    raise RuntimeError("could not move the test point away from kinks")


def _interp_kinks(gt, body, normals, d_tol):
    def dist(p):
        height, idx = L.penetration_depth(p, body.vertices, normals)
        _, gap = L.nearest_body_vertices(p, body.vertices)
        gate = np.abs(np.linalg.norm(p - gt, axis=1) - d_tol)
        per_vertex = np.minimum(np.minimum(np.abs(height), gap), gate)
        return np.repeat(per_vertex[:, None], 3, axis=1)
    return dist


def _require_active(pred, gt, body, normals, d_tol):
    value, _ = L.loss_interp(pred, gt, body.vertices, normals, d_tol)
    if value <= 0.0:
        raise RuntimeError("test configuration has no penetrating vertex")


def check_loss_3d(rng):
    gt = rng.normal(size=(40, 3))
    pred = _push_off(gt + 0.01 * rng.normal(size=gt.shape), lambda p: np.abs(p - gt), rng, 0.01)
    return gradcheck(lambda p: (lambda v, g: (v, {"pred": g}))(*L.loss_3d(p["pred"], gt)), {"pred": pred}, STEP,
                     rng=rng)


def check_loss_body_3d(rng):
    model = _humanoid()
    w = L.make_skin_weighting(model.mesh(), model.skin_mask)
    m = model.template + 0.002 * rng.normal(size=model.template.shape)
    target = m[w.skin_ids]
    pred = _push_off(target + 0.003 * rng.normal(size=target.shape), lambda p: np.abs(p - target), rng, 0.003)
    return gradcheck(lambda p: (lambda v, g: (v, {"pred": g}))(*L.loss_body_3d(p["pred"], m, w)),
                     {"pred": pred}, STEP, rng=rng)


def check_loss_normal(rng):
    _, g, _, _, gt, pred = _scene(rng)
    return gradcheck(lambda p: (lambda v, gr, _: (v, {"pred": gr}))(*L.loss_normal(p["pred"], gt, g.faces)),
                     {"pred": pred}, STEP, rng=rng)


def check_loss_laplacian(rng):
    _, g, _, _, gt, pred = _scene(rng)
    lap = graph_laplacian(Mesh(gt, g.faces))
    return gradcheck(lambda p: (lambda v, gr: (v, {"pred": gr}))(*L.loss_laplacian(p["pred"], gt, lap)),
                     {"pred": pred}, STEP, rng=rng)


def check_loss_interp(rng):
    _, _, body, normals, gt, _ = _scene(rng)
    d_tol = 0.015
    pred = _push_off(gt + 0.008 * rng.normal(size=gt.shape), _interp_kinks(gt, body, normals, d_tol), rng, 1e-3)
    _require_active(pred, gt, body, normals, d_tol)
    report = gradcheck(
        lambda p: (lambda v, gr: (v, {"pred": gr}))(*L.loss_interp(p["pred"], gt, body.vertices, normals, d_tol)),
        {"pred": pred}, STEP, max_probes=3 * len(pred), rng=rng)
    return report


def check_loss_weight_reg(rng):
    m = rng.normal(size=(60, 3))
    nb = np.stack([rng.choice(60, 8, replace=False) for _ in range(30)])
    vals = rng.dirichlet(np.ones(8), size=30)

    def argmax_gap(v):
        s = np.sort(v, axis=1)
        return np.repeat((s[:, -1] - s[:, -2])[:, None], 8, axis=1)
    vals = _push_off(vals, argmax_gap, rng, 0.01)
    return gradcheck(
        lambda p: (lambda v, gr: (v, {"W": gr}))(*L.loss_weight_reg(SparseRegressor(nb, p["W"]), m)),
        {"W": vals}, STEP, rng=rng)


def check_loss_pose(rng):
    model = _humanoid()
    weights = L.LossWeights()
    beta = rng.normal(size=model.n_betas)
    theta = 0.2 * rng.normal(size=3 * model.n_joints)
    offsets = 0.01 * rng.normal(size=(model.n_vertices, 3))
    target = bm.skin(model, bm.BodyParams(beta, theta, offsets)).vertices

    def fn(p):
        params = bm.BodyParams(beta, p["theta"])
        body = bm.skin(model, params).vertices
        v, (d_theta, d_body) = L.loss_pose(p["theta"], theta, body, target, weights)
        return v, {"theta": d_theta + bm.skin_vjp(model, params, d_body)[1]}
    return gradcheck(fn, {"theta": theta + 0.05 * rng.normal(size=theta.shape)}, STEP, max_probes=48, rng=rng)


def check_loss_shape(rng):
    model = _humanoid()
    weights = L.LossWeights()
    beta = rng.normal(size=model.n_betas)
    theta = 0.2 * rng.normal(size=3 * model.n_joints)
    offsets = 0.01 * rng.normal(size=(model.n_vertices, 3))
    target = bm.skin(model, bm.BodyParams(beta, theta, offsets)).vertices

    def fn(p):
        params = bm.BodyParams(p["beta"], theta)
        body = bm.skin(model, params).vertices
        v, (d_beta, d_body) = L.loss_shape(p["beta"], beta, model.shape_sigmas, body, target, weights)
        return v, {"beta": d_beta + bm.skin_vjp(model, params, d_body)[0]}
    return gradcheck(fn, {"beta": beta + 0.3 * rng.normal(size=beta.shape)}, STEP, rng=rng)


def _composite_setup(rng):
    model, g, body, normals, gt, _ = _scene(rng)
    k = 8
    # the input mesh is the body plus the garment offsets; neighbourhoods come from the rest pose
    from garmentforge.mesh import knn_neighborhoods

    nb = knn_neighborhoods(model.template[g.vertex_ids], model.template, k)
    m = bm.scatter_rows(gt, g.vertex_ids, model.n_vertices)
    covered = np.zeros(model.n_vertices, dtype=bool)
    covered[g.vertex_ids] = True
    m[~covered] = body.vertices[~covered]
    lap = graph_laplacian(Mesh(gt, g.faces))
    return model, g, body, normals, gt, nb, m, lap


def check_loss_sizer_total(rng):
    model, g, body, normals, gt, _, _, lap = _composite_setup(rng)
    weights = L.LossWeights(*(rng.uniform(0.1, 2.0, size=8)))
    d_tol = 0.015
    pred = gt + 0.008 * rng.normal(size=gt.shape)
    kinks = _interp_kinks(gt, body, normals, d_tol)
    pred = _push_off(pred, lambda p: np.minimum(kinks(p), np.abs(p - gt)), rng, 1e-3)
    _require_active(pred, gt, body, normals, d_tol)

    def fn(p):
        v, gr, _ = L.loss_sizer_total(p["pred"], gt, g.faces, lap, body.vertices, normals, weights, d_tol)
        return v, {"pred": gr}
    return gradcheck(fn, {"pred": pred}, STEP, max_probes=3 * len(pred), rng=rng)


def check_loss_parser_total(rng):
    """Composite through G = softmax(logits) M, gradient wrt the logits."""
    model, g, body, normals, gt, nb, m, lap = _composite_setup(rng)
    weights = L.LossWeights(*(rng.uniform(0.1, 2.0, size=8)))
    d_tol = 0.01
    k = nb.shape[1]
    logits = rng.normal(size=nb.shape)
    logits[:, 0] += 1.0

    def kink_dist(lg):
        reg = SparseRegressor(nb, softmax_rows(lg))
        pred = reg.apply(m)
        per_vertex = np.minimum(_interp_kinks(gt, body, normals, d_tol)(pred), np.abs(pred - gt)).min(1)
        s = np.sort(reg.values, axis=1)
        per_vertex = np.minimum(per_vertex, s[:, -1] - s[:, -2])
        return np.repeat(per_vertex[:, None], k, axis=1)
    logits = _push_off(logits, kink_dist, rng, 1.0)

    def fn(p):
        w = softmax_rows(p["logits"])
        v, g_vals, _ = L.loss_parser_total(SparseRegressor(nb, w), m, gt, g.faces, lap, body.vertices, normals,
                                           weights, d_tol)
        return v, {"logits": softmax_rows_vjp(w, g_vals)}
    return gradcheck(fn, {"logits": logits}, STEP, max_probes=200, rng=rng)


def check_dense_net(rng):
    x = rng.normal(size=(3, 7))
    target = rng.normal(size=(3, 4))
    for _ in range(100):
        net = DenseNet([7, 6, 5, 4], rng=rng, dtype=np.float64)
        for b in net.biases:
            b += 0.1 * rng.normal(size=b.shape)
        _, cache = net.forward(x)
        if min(np.abs(z).min() for z in cache["pre"][:-1]) > 100 * KINK_MARGIN:
            break

    def fn(p):
        for k in range(len(net.weights)):
            net.weights[k], net.biases[k] = p[f"W{k}"], p[f"b{k}"]
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, 2 * (y - target))
        return float(((y - target) ** 2).sum()), dict(zip(net.param_names(), grads))
    params = dict(zip(net.param_names(), [p.copy() for p in net.params()]))
    return gradcheck(fn, params, STEP, rng=rng)


LOSS_SUITE = {
    "loss_3d": check_loss_3d,
    "loss_body_3d": check_loss_body_3d,
    "loss_normal": check_loss_normal,
    "loss_laplacian": check_loss_laplacian,
    "loss_interp": check_loss_interp,
    "loss_weight_reg": check_loss_weight_reg,
    "loss_pose": check_loss_pose,
    "loss_shape": check_loss_shape,
    "loss_parser_total": check_loss_parser_total,
    "loss_sizer_total": check_loss_sizer_total,
}


def network_suite():
    from garmentforge.parser import check_parser_chain
    from garmentforge.sizer import check_sizer_chain

    return {"dense_net": check_dense_net, "parser_chain": check_parser_chain, "sizer_chain": check_sizer_chain}


def run_suite(names=None, n_points=5, seed=0):
    """Run the registered checks; returns ``{name: GradcheckReport}`` (worst over points)."""
    suite = dict(LOSS_SUITE)
    if names is None or any(n not in suite for n in names):
        suite.update(network_suite())
    names = list(suite) if names is None else list(names)
    out = {}
    for name in names:
        if name not in suite:
            raise KeyError(f"unknown gradcheck {name!r}")
        total = GradcheckReport()
        for point in range(n_points):
            rng = np.random.default_rng([seed, point, sum(map(ord, name))])
            total.merge(suite[name](rng))
        out[name] = total
    return out
