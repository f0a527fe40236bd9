"""Parametric skinned body with garment layers.

The body is ``skin(T(beta, theta, D), J(beta), theta, W)`` with
``T = template + shape_dirs @ beta + pose_dirs @ pose_feature(theta) + D``.
A garment class selects template vertices through a 0/1 indicator and reuses
the blend weights of the selected body vertices.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from garmentforge import io
from garmentforge.mesh import Mesh, indicator_matrix


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: np.ndarray          # (n, 3)
    faces: np.ndarray             # (f, 3)
    joints: np.ndarray            # (J, 3) rest joint positions
    parents: np.ndarray           # (J,) parent index, -1 at the root
    blend_weights: np.ndarray     # (n, J)
    shape_dirs: np.ndarray        # (n, 3, B)
    pose_dirs: np.ndarray         # (n, 3, 9 * (J - 1))
    joint_shape_dirs: np.ndarray  # (J, 3, B)
    shape_sigmas: np.ndarray      # (B,)
    joint_names: tuple = ()
    garments: dict = field(default_factory=dict)
    skin_mask: np.ndarray = None  # (n,) bool, exposed skin of the garment registry

    def __post_init__(self):
        n, nj = self.blend_weights.shape
        if self.template.shape != (n, 3):
            raise ModelError("template and blend weights disagree on vertex count")
        if self.joints.shape != (nj, 3) or len(self.parents) != nj:
            raise ModelError("joint arrays disagree on joint count")
        parents = np.asarray(self.parents)
        if parents[0] != -1 or (parents[1:] < 0).any():
            raise ModelError("joint 0 must be the only root")
        if (parents[1:] >= np.arange(1, nj)).any():
            raise ModelError("joint parents must precede their children (tree order)")
        w = self.blend_weights
        if (w < 0).any() or np.abs(w.sum(1) - 1.0).max() > 1e-6:
            raise ModelError("blend weights must be nonnegative with unit row sums")
        nb = self.shape_dirs.shape[2]
        if self.shape_dirs.shape[:2] != (n, 3) or self.joint_shape_dirs.shape != (nj, 3, nb):
            raise ModelError("shape basis shapes are inconsistent")
        if len(self.shape_sigmas) != nb:
            raise ModelError("one sigma per shape component is required")
        if self.pose_dirs.shape != (n, 3, 9 * (nj - 1)):
            raise ModelError("pose basis must be (n, 3, 9 (J - 1))")
        for g in self.garments.values():
            if g.indicator.shape[1] != n:
                raise ModelError(f"garment {g.class_name} indicator has wrong width")

    @property
    def n_vertices(self):
        return len(self.template)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_betas(self):
        return self.shape_dirs.shape[2]

    def mesh(self, vertices=None):
        return Mesh(self.template if vertices is None else vertices, self.faces)

    def zero_params(self):
        return BodyParams(np.zeros(self.n_betas), np.zeros(3 * self.n_joints), np.zeros((self.n_vertices, 3)))


@dataclass
class BodyParams:
    beta: np.ndarray
    theta: np.ndarray
    offsets: np.ndarray = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()


@dataclass(frozen=True, eq=False)
class GarmentTemplate:
    """Garment class as a subset of body template vertices.

    ``vertex_ids[i]`` is the body vertex associated with garment vertex i, so
    the indicator has its single 1 of row i in that column.
    """

    class_name: str
    layer: str
    vertex_ids: np.ndarray
    faces: np.ndarray
    n_body: int

    def __post_init__(self):
        if self.layer not in ("upper", "lower"):
            raise ModelError(f"layer must be upper or lower, got {self.layer!r}")
        f = np.asarray(self.faces)
        if f.size and (f.min() < 0 or f.max() >= len(self.vertex_ids)):
            raise ModelError("garment faces must index garment vertices")

    @property
    def n_vertices(self):
        return len(self.vertex_ids)

    @property
    def indicator(self):
        return indicator_matrix(self.vertex_ids, self.n_body)


# --- rotations -------------------------------------------------------------

def _skew(v):
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def rodrigues(rotvecs):
    """Axis-angle vectors ``(..., 3)`` to rotation matrices ``(..., 3, 3)``."""
    r = np.asarray(rotvecs, dtype=np.float64)
    angle = np.linalg.norm(r, axis=-1)[..., None, None]
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    k = _skew(r)
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_vjp(rotvecs, rotations, grad_rot):
    """Gradient with respect to axis-angle vectors given dL/dR."""
    v = np.asarray(rotvecs, dtype=np.float64)
    eye = np.eye(3)
    n2 = (v * v).sum(-1)
    small = n2 < 1e-16
    # dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2, and [e_i]x at the identity
    cols = np.einsum("jab,bi->jia", eye - rotations, eye)            # (J, 3, 3): (I - R) e_i
    cr = np.cross(v[:, None, :], cols)                                 # (J, 3, 3)
    d = (v[:, :, None, None] * _skew(v)[:, None] + _skew(cr)) @ rotations[:, None]
    d = d / np.where(small, 1.0, n2)[:, None, None, None]
    d = np.where(small[:, None, None, None], _skew(eye)[None], d)
    return np.einsum("jab,jiab->ji", grad_rot, d)


# --- body evaluation --------------------------------------------------------

def _check_params(model, params):
    if params.beta.shape != (model.n_betas,):
        raise ModelError(f"beta must have {model.n_betas} entries, got {params.beta.shape}")
    if params.theta.shape != (3 * model.n_joints,):
        raise ModelError(f"theta must have {3 * model.n_joints} entries, got {params.theta.shape}")
    if params.offsets is not None and np.shape(params.offsets) != (model.n_vertices, 3):
        raise ModelError("offsets must be n x 3")


def pose_feature(rotations):
    return (rotations[1:] - np.eye(3)).reshape(-1)


def shaped(model, beta):
    return model.template + model.shape_dirs @ np.asarray(beta, dtype=np.float64)


def joint_locations(model, beta):
    return model.joints + model.joint_shape_dirs @ np.asarray(beta, dtype=np.float64)


def unposed(model, params):
    """Rest-pose vertices T(beta, theta, D)."""
    _check_params(model, params)
    rot = rodrigues(params.theta.reshape(-1, 3))
    v = shaped(model, params.beta) + model.pose_dirs @ pose_feature(rot)
    if params.offsets is not None:
        v = v + params.offsets
    return v


def global_transforms(parents, joints, rotations):
    """World rotation and translation of every joint frame."""
    nj = len(parents)
    g_rot = np.empty((nj, 3, 3))
    g_t = np.empty((nj, 3))
    g_rot[0] = rotations[0]
    g_t[0] = joints[0]
    for j in range(1, nj):
        p = parents[j]
        g_rot[j] = g_rot[p] @ rotations[j]
        g_t[j] = g_rot[p] @ (joints[j] - joints[p]) + g_t[p]
    return g_rot, g_t


def skinning_transforms(parents, joints, rotations):
    """Per-joint affine maps (J, 3, 4) taking rest points to posed points."""
    g_rot, g_t = global_transforms(parents, joints, rotations)
    a = np.empty((len(parents), 3, 4))
    a[:, :, :3] = g_rot
    a[:, :, 3] = g_t - np.einsum("jab,jb->ja", g_rot, joints)
    return a


def blend(weights, transforms):
    """Per-vertex blended affine maps (n, 3, 4)."""
    return np.einsum("vj,jab->vab", weights, transforms)


def apply_blend(blended, vertices):
    return np.einsum("vab,vb->va", blended[:, :, :3], vertices) + blended[:, :, 3]


def lbs(vertices, weights, parents, joints, rotations):
    return apply_blend(blend(weights, skinning_transforms(parents, joints, rotations)), vertices)


def skin(model, params):
    """Posed body mesh (linear blend skinning of the unposed vertices)."""
    rest = unposed(model, params)
    rot = rodrigues(params.theta.reshape(-1, 3))
    posed = lbs(rest, model.blend_weights, model.parents, joint_locations(model, params.beta), rot)
    return Mesh(posed, model.faces)


def garment_template(model, garment, params):
    """``I^g T(beta, theta, 0)``: the garment's share of the unposed body."""
    if garment.n_body != model.n_vertices:
        raise ModelError("garment indicator width does not match the body")
    rest = unposed(model, BodyParams(params.beta, params.theta, None))
    return garment.indicator @ rest


def garment_skin(model, garment, beta, theta, d_g):
    """Garment mesh G(beta, theta, D^g) skinned with the associated body weights."""
    d_g = np.asarray(d_g, dtype=np.float64)
    if d_g.shape != (garment.n_vertices, 3):
        raise ModelError(f"d_g must be {garment.n_vertices} x 3, got {d_g.shape}")
    params = BodyParams(beta, theta, None)
    rest = garment_template(model, garment, params) + d_g
    rot = rodrigues(params.theta.reshape(-1, 3))
    weights = model.blend_weights[garment.vertex_ids]
    posed = lbs(rest, weights, model.parents, joint_locations(model, params.beta), rot)
    return Mesh(posed, garment.faces)


def garment_blend(model, garment, beta, theta):
    """Blended affine maps of the garment vertices; posed = A[:, :, :3] @ rest + A[:, :, 3]."""
    rot = rodrigues(np.asarray(theta, dtype=np.float64).reshape(-1, 3))
    a = skinning_transforms(model.parents, joint_locations(model, beta), rot)
    return blend(model.blend_weights[garment.vertex_ids], a)


def unpose_garment(model, garment, beta, theta, posed_vertices):
    """Invert garment skinning: the D^g that reproduces ``posed_vertices``."""
    a = garment_blend(model, garment, beta, theta)
    rest = np.linalg.solve(a[:, :, :3], (posed_vertices - a[:, :, 3])[..., None])[..., 0]
    return rest - garment_template(model, garment, BodyParams(beta, theta, None))


def unpose_body(model, beta, theta, posed_vertices):
    """Invert full-body skinning: the per-vertex offsets D with ``skin(beta, theta, D) == posed_vertices``."""
    rot = rodrigues(np.asarray(theta, dtype=np.float64).reshape(-1, 3))
    a = blend(model.blend_weights, skinning_transforms(model.parents, joint_locations(model, beta), rot))
    rest = np.linalg.solve(a[:, :, :3], (np.asarray(posed_vertices) - a[:, :, 3])[..., None])[..., 0]
    return rest - shaped(model, beta)


def skin_vjp(model, params, grad_vertices):
    """Reverse-mode gradient of ``skin(model, params).vertices``.

    Returns ``(d_beta, d_theta, d_offsets)`` for upstream ``grad_vertices``.
    """
    _check_params(model, params)
    g = np.asarray(grad_vertices, dtype=np.float64)
    thetas = params.theta.reshape(-1, 3)
    rot = rodrigues(thetas)
    joints = joint_locations(model, params.beta)
    rest = unposed(model, params)
    parents = model.parents
    g_rot, g_t = global_transforms(parents, joints, rot)
    a = np.empty((len(parents), 3, 4))
    a[:, :, :3] = g_rot
    a[:, :, 3] = g_t - np.einsum("jab,jb->ja", g_rot, joints)
    blended = blend(model.blend_weights, a)

    d_rest = np.einsum("vab,va->vb", blended[:, :, :3], g)
    d_blend = np.empty_like(blended)
    d_blend[:, :, :3] = g[:, :, None] * rest[:, None, :]
    d_blend[:, :, 3] = g
    d_a = np.einsum("vj,vab->jab", model.blend_weights, d_blend)

    nj = len(parents)
    d_grot = d_a[:, :, :3] - np.einsum("ja,jb->jab", d_a[:, :, 3], joints)
    d_gt = d_a[:, :, 3].copy()
    d_joints = -np.einsum("jba,jb->ja", g_rot, d_a[:, :, 3])
    d_rot = np.zeros((nj, 3, 3))
    for j in range(nj - 1, 0, -1):
        p = parents[j]
        d_grot[p] += d_grot[j] @ rot[j].T + np.outer(d_gt[j], joints[j] - joints[p])
        d_rot[j] += g_rot[p].T @ d_grot[j]
        step = g_rot[p].T @ d_gt[j]
        d_joints[j] += step
        d_joints[p] -= step
        d_gt[p] += d_gt[j]
    d_rot[0] += d_grot[0]
    d_joints[0] += d_gt[0]

    d_pose_feat = np.einsum("vcp,vc->p", model.pose_dirs, d_rest)
    d_rot[1:] += d_pose_feat.reshape(-1, 3, 3)
    d_theta = rodrigues_vjp(thetas, rot, d_rot).ravel()
    d_beta = np.einsum("vck,vc->k", model.shape_dirs, d_rest) + np.einsum("jck,jc->k", model.joint_shape_dirs, d_joints)
    return d_beta, d_theta, d_rest


# --- persistence -------------------------------------------------------------

_ARRAYS = ("template", "faces", "joints", "parents", "blend_weights", "shape_dirs", "pose_dirs",
           "joint_shape_dirs", "shape_sigmas")
_INT_ARRAYS = {"faces", "parents"}


def save_model(model, directory):
    """Write the model as GFTENSOR files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _ARRAYS:
        io.save_tensor(d / f"{name}.gft", getattr(model, name), "i64" if name in _INT_ARRAYS else "f64")
    if model.skin_mask is not None:
        io.save_tensor(d / "skin_mask.gft", model.skin_mask.astype(np.uint8), "u8")
    garments = {}
    for name, g in sorted(model.garments.items()):
        io.save_tensor(d / f"garment_{name}_vertex_ids.gft", g.vertex_ids, "i64")
        io.save_tensor(d / f"garment_{name}_faces.gft", g.faces, "i64")
        garments[name] = {"layer": g.layer, "n_vertices": int(g.n_vertices)}
    io.write_json(d / "manifest.json", {
        "format": "garmentforge-body/1",
        "n_vertices": int(model.n_vertices),
        "joint_names": list(model.joint_names),
        "parents": [int(p) for p in model.parents],
        "garments": garments,
    })


def load_model(directory):
    """Load a model directory (also accepts externally produced tensors)."""
    d = Path(directory)
    manifest = io.read_json(d / "manifest.json")
    arrays = {name: io.load_tensor(d / f"{name}.gft") for name in _ARRAYS}
    n = len(arrays["template"])
    garments = {}
    for name, info in manifest.get("garments", {}).items():
        garments[name] = GarmentTemplate(
            class_name=name,
            layer=info["layer"],
            vertex_ids=io.load_tensor(d / f"garment_{name}_vertex_ids.gft").astype(np.int64),
            faces=io.load_tensor(d / f"garment_{name}_faces.gft").astype(np.int64),
            n_body=n,
        )
    skin_mask = None
    if (d / "skin_mask.gft").exists():
        skin_mask = io.load_tensor(d / "skin_mask.gft").astype(bool)
    arrays["faces"] = arrays["faces"].astype(np.int64)
    arrays["parents"] = arrays["parents"].astype(np.int64)
    for k in _ARRAYS:
        if k not in _INT_ARRAYS:
            arrays[k] = arrays[k].astype(np.float64)
    return BodyModel(**arrays, joint_names=tuple(manifest.get("joint_names", ())), garments=garments,
                     skin_mask=skin_mask)


def scatter_rows(rows, vertex_ids, n):
    """``I^T x``: place garment rows back on their body vertices."""
    return sparse.csr_matrix(indicator_matrix(vertex_ids, n).T) @ np.asarray(rows)
