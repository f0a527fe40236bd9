"""Training objectives with analytic gradients.

Every loss returns its value together with the gradient with respect to its
differentiable inputs. Correspondences (nearest body vertex, argmax of a
regressor row) are recomputed per call and treated as constant for the
gradient; at L1 ties and relu kinks the subgradient 0 is used.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from garmentforge.mesh import DEGENERATE_AREA, geodesic_distances, indicator_matrix


@dataclass
class LossWeights:
    w_3d: float = 1.0
    w_norm: float = 0.1
    w_lap: float = 100.0
    w_interp: float = 10.0
    w_w: float = 0.1
    w_pose: float = 1.0
    w_shape: float = 1.0
    w_v: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class SkinWeighting:
    """Rows of the body regressor (``skin_ids`` into the body) and their w_geo."""

    skin_ids: np.ndarray
    w_geo: np.ndarray
    n_body: int

    def __post_init__(self):
        w = np.asarray(self.w_geo, dtype=np.float64)
        if w.shape != (len(self.skin_ids),):
            raise ValueError("one w_geo entry per skin row is required")
        if (w < 0).any() or (w > 1).any():
            raise ValueError("w_geo entries must lie in [0, 1]")
        object.__setattr__(self, "w_geo", w)
        object.__setattr__(self, "skin_ids", np.asarray(self.skin_ids, dtype=np.int64))

    @property
    def indicator(self):
        return indicator_matrix(self.skin_ids, self.n_body)


def signed_boundary_distance(mesh, skin_mask):
    """Signed geodesic distance to the skin/cloth boundary, positive on skin.

    The boundary is taken halfway between the two vertex sets.
    """
    skin_mask = np.asarray(skin_mask, dtype=bool)
    if skin_mask.all() or not skin_mask.any():
        raise ValueError("skin mask must split the mesh into two nonempty sets")
    to_cloth = geodesic_distances(mesh, np.flatnonzero(~skin_mask))
    to_skin = geodesic_distances(mesh, np.flatnonzero(skin_mask))
    return 0.5 * (to_cloth - to_skin)


def geodesic_weights(mesh, skin_mask, tau=0.02):
    """w_geo = sigmoid(signed distance / tau) on every vertex."""
    s = signed_boundary_distance(mesh, skin_mask)
    return 1.0 / (1.0 + np.exp(-s / tau))


def make_skin_weighting(mesh, skin_mask, tau=0.02, min_weight=0.01):
    w = geodesic_weights(mesh, skin_mask, tau)
    ids = np.flatnonzero(w >= min_weight)
    return SkinWeighting(ids, w[ids], mesh.n_vertices)


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def loss_3d(pred, gt):
    """Mean absolute coordinate difference."""
    _check_same(pred, gt)
    diff = np.asarray(pred, dtype=np.float64) - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_body_3d(pred_body, input_vertices, weighting):
    """Sum over skin rows of w_geo times the L1 deviation from the input mesh."""
    target = np.asarray(input_vertices)[weighting.skin_ids]
    _check_same(pred_body, target)
    diff = np.asarray(pred_body, dtype=np.float64) - target
    value = float(weighting.w_geo @ np.abs(diff).sum(1))
    return value, weighting.w_geo[:, None] * np.sign(diff)


def _normals_raw(vertices, faces):
    v = np.asarray(vertices, dtype=np.float64)
    e1 = v[faces[:, 1]] - v[faces[:, 0]]
    e2 = v[faces[:, 2]] - v[faces[:, 0]]
    c = np.cross(e1, e2)
    return e1, e2, c, np.linalg.norm(c, axis=1)


def loss_normal(pred, gt, faces):
    """Mean of ``1 - <N_gt, N_pred>`` over faces.

    Faces degenerate in either mesh are skipped. Returns
    ``(value, grad, n_skipped)``.
    """
    _check_same(pred, gt)
    faces = np.asarray(faces)
    e1, e2, c, norm = _normals_raw(pred, faces)
    _, _, cg, norm_g = _normals_raw(gt, faces)
    ok = (0.5 * norm > DEGENERATE_AREA) & (0.5 * norm_g > DEGENERATE_AREA)
    n_ok = int(ok.sum())
    grad = np.zeros(np.shape(pred))
    if n_ok == 0:
        return 0.0, grad, len(faces)
    n_pred = c[ok] / norm[ok, None]
    n_gt = cg[ok] / norm_g[ok, None]
    dots = (n_pred * n_gt).sum(1)
    value = float((1.0 - dots).mean())
    g_n = -n_gt / n_ok
    g_c = (g_n - (g_n * n_pred).sum(1, keepdims=True) * n_pred) / norm[ok, None]
    g_e1 = np.cross(e2[ok], g_c)
    g_e2 = np.cross(g_c, e1[ok])
    f = faces[ok]
    np.add.at(grad, f[:, 1], g_e1)
    np.add.at(grad, f[:, 2], g_e2)
    np.add.at(grad, f[:, 0], -g_e1 - g_e2)
    return value, grad, len(faces) - n_ok


def loss_laplacian(pred, gt, lap):
    """Frobenius norm of the differential-coordinate difference ``L gt - L pred``."""
    _check_same(pred, gt)
    if lap.shape != (len(pred), len(pred)):
        raise ValueError("Laplacian must be m x m")
    r = lap @ (np.asarray(gt, dtype=np.float64) - pred)
    value = float(np.sqrt((r ** 2).sum()))
    if value == 0.0:
        return 0.0, np.zeros(np.shape(pred))
    return value, -(lap.T @ r) / value


def nearest_body_vertices(points, body_vertices):
    """Index of the nearest body vertex and the gap to the second nearest."""
    d, idx = cKDTree(body_vertices).query(points, k=2)
    return idx[:, 0], d[:, 1] - d[:, 0]


def penetration_depth(points, body_vertices, body_normals):
    """Signed height of each point above the tangent plane of its nearest body vertex."""
    idx, _ = nearest_body_vertices(points, body_vertices)
    return np.einsum("ij,ij->i", body_normals[idx], points - body_vertices[idx]), idx


def loss_interp(pred, gt, body_vertices, body_normals, d_tol=0.02):
    """Mean over garment vertices of relu(-N_i . (G_j - B_i)), gated by |G_j - GT_j| < d_tol."""
    _check_same(pred, gt)
    if len(body_vertices) == 0:
        raise ValueError("empty body mesh")
    pred = np.asarray(pred, dtype=np.float64)
    m = len(pred)
    height, idx = penetration_depth(pred, body_vertices, body_normals)
    gate = np.linalg.norm(pred - gt, axis=1) < d_tol
    active = gate & (height < 0)
    value = float(-height[active].sum() / m)
    grad = np.zeros_like(pred)
    grad[active] = -body_normals[idx[active]] / m
    return value, grad


def row_argmax(reg):
    """Per row, the neighborhood slot of the largest weight; ties go to the lower vertex index."""
    vals = reg.values
    top = vals.max(1, keepdims=True)
    cand = np.where(vals == top, reg.neighborhoods, np.iinfo(np.int64).max)
    return cand.argmin(1)


def loss_weight_reg(reg, input_vertices):
    """Sum_i sum_j W_ij |M_k - M_j| with k the argmax of row i. Gradient wrt W values."""
    m = np.asarray(input_vertices, dtype=np.float64)
    slot = row_argmax(reg)
    k_idx = reg.neighborhoods[np.arange(reg.n_rows), slot]
    dist = np.linalg.norm(m[reg.neighborhoods] - m[k_idx][:, None, :], axis=-1)
    return float((reg.values * dist).sum()), dist


def vertex_distance(pred, target):
    """Mean Euclidean distance per vertex and its gradient wrt ``pred``."""
    _check_same(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - target
    norm = np.linalg.norm(diff, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm[:, None] > 0, diff / safe[:, None], 0.0) / len(diff)
    return float(norm.mean()), grad


def loss_pose(theta_pred, theta_gt, body_pred, input_vertices, weights):
    """``w_pose |theta_hat - theta|^2 + w_v mean_i |B_i - M_i|``.

    ``body_pred`` are the vertices of the body skinned with the reference
    shape and the predicted pose. Returns ``(value, (d_theta, d_body))``.
    """
    _check_same(theta_pred, theta_gt)
    dt = np.asarray(theta_pred, dtype=np.float64) - theta_gt
    vd, g_body = vertex_distance(body_pred, input_vertices)
    value = weights.w_pose * float(dt @ dt) + weights.w_v * vd
    return value, (2.0 * weights.w_pose * dt, weights.w_v * g_body)


def loss_shape(beta_pred, beta_gt, sigmas, body_pred, input_vertices, weights):
    """``w_shape sum_i sigma_i (beta_hat_i - beta_i)^2 + w_v mean_i |B_i - M_i|``."""
    _check_same(beta_pred, beta_gt)
    _check_same(beta_pred, sigmas)
    db = np.asarray(beta_pred, dtype=np.float64) - beta_gt
    vd, g_body = vertex_distance(body_pred, input_vertices)
    value = weights.w_shape * float(np.sum(sigmas * db * db)) + weights.w_v * vd
    return value, (2.0 * weights.w_shape * sigmas * db, weights.w_v * g_body)


def loss_sizer_total(pred, gt, faces, lap, body_vertices, body_normals, weights, d_tol=0.02):
    """Weighted vertex, normal, Laplacian and interpenetration terms.

    Returns ``(value, grad_pred, terms)``.
    """
    terms = {}
    grad = np.zeros(np.shape(pred))
    value = 0.0
    parts = (
        ("3d", weights.w_3d, lambda: loss_3d(pred, gt)),
        ("norm", weights.w_norm, lambda: loss_normal(pred, gt, faces)[:2]),
        ("lap", weights.w_lap, lambda: loss_laplacian(pred, gt, lap)),
        ("interp", weights.w_interp, lambda: loss_interp(pred, gt, body_vertices, body_normals, d_tol)),
    )
    for name, w, fn in parts:
        if w == 0.0:
            terms[name] = 0.0
            continue
        v, g = fn()
        terms[name] = v
        value += w * v
        grad += w * g
    return value, grad, terms


def loss_parser_total(reg, input_vertices, gt, faces, lap, body_vertices, body_normals, weights, d_tol=0.02):
    """The sizer terms on ``G = W M`` plus the weight regularizer.

    Returns ``(value, grad_values, terms)`` with the gradient taken wrt the
    regressor values.
    """
    m = np.asarray(input_vertices, dtype=np.float64)
    pred = reg.apply(m)
    value, g_pred, terms = loss_sizer_total(pred, gt, faces, lap, body_vertices, body_normals, weights, d_tol)
    g_values = np.einsum("ic,ikc->ik", g_pred, m[reg.neighborhoods])
    if weights.w_w > 0.0:
        v, g = loss_weight_reg(reg, m)
        terms["w"] = v
        value += weights.w_w * v
        g_values = g_values + weights.w_w * g
    else:
        terms["w"] = 0.0
    return value, g_values, terms


__all__ = [
    "LossWeights", "SkinWeighting", "geodesic_weights", "make_skin_weighting", "loss_3d", "loss_body_3d",
    "loss_normal", "loss_laplacian", "loss_interp", "loss_weight_reg", "loss_pose", "loss_shape",
    "loss_sizer_total", "loss_parser_total", "penetration_depth", "row_argmax", "vertex_distance",
]
