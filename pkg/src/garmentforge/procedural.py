"""Deterministic low-poly humanoid in a relaxed A-pose.

The surface is box-modeled as a closed quad cage (a torso box with extruded
neck/head, arms and legs), refined once with Catmull-Clark and triangulated.
A 250-quad genus-0 cage refines to exactly 4 * 250 + 2 = 1002 vertices.
"""

import numpy as np

from garmentforge.body import BodyModel, GarmentTemplate
from garmentforge.mesh import Mesh, submesh

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14])

TORSO_BONES = (0, 1)
ARM_BONES = {"l": (4, 5, 6), "r": (7, 8, 9)}
LEG_BONES = {"l": (10, 11, 12), "r": (13, 14, 15)}

# (z, half width, half depth) of the torso cage rows, hips to shoulders
_TORSO_ROWS = ((0.88, 0.165, 0.105), (1.02, 0.145, 0.095), (1.17, 0.16, 0.105),
               (1.30, 0.175, 0.10), (1.43, 0.17, 0.085))
_ARM_ROOT = np.array([0.22, 0.0, 1.36])
_ARM_DIR = np.array([np.sqrt(0.5), 0.0, -np.sqrt(0.5)])
_ARM_STEPS = ((0.0, 0.06, 0.055), (0.10, 0.05, 0.05), (0.20, 0.045, 0.045), (0.28, 0.04, 0.04),
              (0.40, 0.037, 0.037), (0.50, 0.033, 0.03), (0.62, 0.018, 0.045))
_LEG_STEPS = (((0.100, 0.0, 0.80), 0.085, 0.095), ((0.105, 0.0, 0.66), 0.075, 0.08),
              ((0.110, 0.0, 0.52), 0.06, 0.065), ((0.115, 0.0, 0.40), 0.055, 0.06),
              ((0.120, 0.0, 0.24), 0.045, 0.05), ((0.125, 0.0, 0.10), 0.035, 0.04),
              ((0.125, 0.03, 0.03), 0.045, 0.08))
_HEAD_STEPS = (((0.0, 0.0, 1.49), 0.06, 0.06), ((0.0, 0.0, 1.55), 0.05, 0.055),
               ((0.0, 0.01, 1.62), 0.075, 0.085), ((0.0, 0.0, 1.71), 0.085, 0.095),
               ((0.0, 0.0, 1.80), 0.05, 0.06))

HEM_Z = 0.96
WAIST_Z = 1.04
SLEEVE_T = 0.5
SHORTS_T = 0.55


class _Cage:
    def __init__(self):
        self.verts = []
        self.quads = []

    def add(self, p):
        self.verts.append(np.asarray(p, dtype=np.float64))
        return len(self.verts) - 1

    def quad(self, q, outward):
        p = [self.verts[i] for i in q]
        n = np.cross(p[2] - p[0], p[3] - p[1])
        if n @ outward < 0:
            q = q[::-1]
        self.quads.append(list(q))
        return len(self.quads) - 1

    def extrude(self, region, positions):
        """Extrude quads ``region``; ``positions`` maps old cap vertex -> new position."""
        old = sorted({v for f in region for v in self.quads[f]})
        new = {v: self.add(positions[v]) for v in old}
        directed = {(self.quads[f][k], self.quads[f][(k + 1) % 4]) for f in region for k in range(4)}
        boundary = [(a, b) for (a, b) in directed if (b, a) not in directed]
        for f in region:
            self.quads[f] = [new[v] for v in self.quads[f]]
        for a, b in sorted(boundary):
            self.quads.append([a, b, new[b], new[a]])
        return new


def _frame(axis, ref):
    u = axis / np.linalg.norm(axis)
    e1 = ref - (ref @ u) * u
    e1 /= np.linalg.norm(e1)
    return u, e1, np.cross(u, e1)


def _build_limb(cage, region, start_axis, steps, ref):
    """``steps``: sequence of (center, axis, r1, r2); ring angles come from the root cap."""
    cap = sorted({v for f in region for v in cage.quads[f]})
    pts = np.array([cage.verts[v] for v in cap])
    c0 = pts.mean(0)
    _, e1, e2 = _frame(start_axis, ref)
    angle = {v: np.arctan2((p - c0) @ e2, (p - c0) @ e1) for v, p in zip(cap, pts)}
    for center, axis, r1, r2 in steps:
        _, e1, e2 = _frame(axis, ref)
        positions = {v: center + r1 * np.cos(angle[v]) * e1 + r2 * np.sin(angle[v]) * e2 for v in cap}
        new = cage.extrude(region, positions)
        angle = {new[v]: a for v, a in angle.items()}
        cap = [new[v] for v in cap]


def _torso_cage():
    cage = _Cage()
    nx, ny, nz = 3, 2, 4
    xs = np.linspace(-1, 1, nx + 1)
    ys = np.linspace(-1, 1, ny + 1)
    index = {}
    for k in range(nz + 1):
        z, hx, hy = _TORSO_ROWS[k]
        for j in range(ny + 1):
            for i in range(nx + 1):
                if i in (0, nx) or j in (0, ny) or k in (0, nz):
                    corner = 0.82 if (i in (0, nx) and j in (0, ny)) else 1.0
                    index[i, j, k] = cage.add((xs[i] * hx * corner, ys[j] * hy * corner, z))
    faces = {}
    for side, fixed, outward in (("x0", 0, (-1, 0, 0)), ("x1", nx, (1, 0, 0))):
        for j in range(ny):
            for k in range(nz):
                q = [index[fixed, j, k], index[fixed, j + 1, k], index[fixed, j + 1, k + 1], index[fixed, j, k + 1]]
                faces[side, j, k] = cage.quad(q, np.array(outward, float))
    for side, fixed, outward in (("y0", 0, (0, -1, 0)), ("y1", ny, (0, 1, 0))):
        for i in range(nx):
            for k in range(nz):
                q = [index[i, fixed, k], index[i + 1, fixed, k], index[i + 1, fixed, k + 1], index[i, fixed, k + 1]]
                faces[side, i, k] = cage.quad(q, np.array(outward, float))
    for side, fixed, outward in (("z0", 0, (0, 0, -1)), ("z1", nz, (0, 0, 1))):
        for i in range(nx):
            for j in range(ny):
                q = [index[i, j, fixed], index[i + 1, j, fixed], index[i + 1, j + 1, fixed], index[i, j + 1, fixed]]
                faces[side, i, j] = cage.quad(q, np.array(outward, float))
    return cage, faces


def _arm_path(sign):
    root = _ARM_ROOT * np.array([sign, 1.0, 1.0])
    direction = _ARM_DIR * np.array([sign, 1.0, 1.0])
    return root, direction


def build_cage():
    cage, faces = _torso_cage()
    y = np.array([0.0, 1.0, 0.0])
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, 0.0, 1.0])
    head = [faces["z1", 1, 0], faces["z1", 1, 1]]
    _build_limb(cage, head, z, [(np.array(c), z, r1, r2) for c, r1, r2 in _HEAD_STEPS], x)
    for sign, side in ((1.0, "x1"), (-1.0, "x0")):
        root, direction = _arm_path(sign)
        steps = [(root + d * direction, (sign * x) if d == 0.0 else direction, r1, r2) for d, r1, r2 in _ARM_STEPS]
        _build_limb(cage, [faces[side, 0, 3], faces[side, 1, 3]], sign * x, steps, y)
    for sign, column in ((1.0, 2), (-1.0, 0)):
        steps = [(np.array(c) * np.array([sign, 1.0, 1.0]), -z, r1, r2) for c, r1, r2 in _LEG_STEPS]
        _build_limb(cage, [faces["z0", column, 0], faces["z0", column, 1]], -z, steps, x)
    return np.array(cage.verts), np.array(cage.quads)


def catmull_clark(verts, quads):
    """One Catmull-Clark step on a closed quad mesh.

    New vertex order: original vertices, edge points, face points.
    """
    nv, nf = len(verts), len(quads)
    face_pts = verts[quads].mean(1)
    edge_list = np.sort(np.stack([quads, np.roll(quads, -1, axis=1)], -1).reshape(-1, 2), axis=1)
    edges, inverse = np.unique(edge_list, axis=0, return_inverse=True)
    inverse = inverse.reshape(nf, 4)
    ne = len(edges)
    edge_faces = [[] for _ in range(ne)]
    for f in range(nf):
        for k in range(4):
            edge_faces[inverse[f, k]].append(f)
    if any(len(ef) != 2 for ef in edge_faces):
        raise ValueError("cage is not a closed 2-manifold")
    ef = np.array(edge_faces)
    edge_pts = (verts[edges[:, 0]] + verts[edges[:, 1]] + face_pts[ef[:, 0]] + face_pts[ef[:, 1]]) / 4.0

    valence = np.zeros(nv)
    np.add.at(valence, edges.ravel(), 1.0)
    mid_sum = np.zeros((nv, 3))
    mids = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    np.add.at(mid_sum, edges[:, 0], mids)
    np.add.at(mid_sum, edges[:, 1], mids)
    face_sum = np.zeros((nv, 3))
    face_count = np.zeros(nv)
    for k in range(4):
        np.add.at(face_sum, quads[:, k], face_pts)
        np.add.at(face_count, quads[:, k], 1.0)
    q = face_sum / face_count[:, None]
    r = mid_sum / valence[:, None]
    n = valence[:, None]
    new_verts = np.concatenate([(q + 2.0 * r + (n - 3.0) * verts) / n, edge_pts, face_pts])

    new_quads = []
    for f in range(nf):
        fp = nv + ne + f
        for k in range(4):
            v = quads[f, k]
            e_next = nv + inverse[f, k]
            e_prev = nv + inverse[f, (k - 1) % 4]
            new_quads.append([v, e_next, fp, e_prev])
    return new_verts, np.array(new_quads)


def triangulate_quads(quads):
    return np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])


def _joints():
    j = np.zeros((16, 3))
    j[0] = (0.0, 0.0, 0.95)
    j[1] = (0.0, 0.0, 1.18)
    j[2] = (0.0, 0.0, 1.46)
    j[3] = (0.0, 0.0, 1.58)
    for sign, (s, e, w) in ((1.0, ARM_BONES["l"]), (-1.0, ARM_BONES["r"])):
        root, direction = _arm_path(sign)
        j[s] = root - np.array([sign * 0.03, 0.0, 0.0])
        j[e] = root + 0.28 * direction
        j[w] = root + 0.50 * direction
    for sign, (h, k, a) in ((1.0, LEG_BONES["l"]), (-1.0, LEG_BONES["r"])):
        j[h] = (sign * 0.10, 0.0, 0.86)
        j[k] = (sign * 0.11, 0.0, 0.46)
        j[a] = (sign * 0.125, 0.0, 0.10)
    return j


def _bone_ends(joints):
    ends = np.zeros_like(joints)
    ends[0], ends[1], ends[2] = joints[1], joints[2], joints[3]
    ends[3] = (0.0, 0.0, 1.78)
    for sign, (s, e, w) in ((1.0, ARM_BONES["l"]), (-1.0, ARM_BONES["r"])):
        root, direction = _arm_path(sign)
        ends[s], ends[e], ends[w] = joints[e], joints[w], root + 0.62 * direction
    for sign, (h, k, a) in ((1.0, LEG_BONES["l"]), (-1.0, LEG_BONES["r"])):
        ends[h], ends[k] = joints[k], joints[a]
        ends[a] = (sign * 0.125, 0.08, 0.03)
    return ends


def bone_distances(points, joints, ends):
    """Distance from each point to each bone segment and the segment parameter."""
    seg = ends - joints
    length2 = (seg ** 2).sum(1)
    rel = points[:, None, :] - joints[None, :, :]
    t = np.clip((rel * seg[None]).sum(-1) / length2[None], 0.0, 1.0)
    closest = joints[None] + t[..., None] * seg[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1), t


def _blend_weights(points, joints, ends, scale=0.05):
    d, _ = bone_distances(points, joints, ends)
    d = d - d.min(1, keepdims=True)
    w = np.exp(-(d / scale) ** 2)
    w[w < 1e-4] = 0.0
    return w / w.sum(1, keepdims=True)


def _radial(points, origin, axis):
    rel = points - origin
    return rel - (rel @ axis)[:, None] * axis


def _shape_fields(points, joints, ends, soft):
    """Displacement of ``points`` for each unit shape component: (p, 3, 10).

    ``soft`` (p, J) blends the per-bone field functions; passing one-hot rows
    evaluates each joint's own bone function, which yields the joint deltas.
    """
    axes = ends - joints
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    nj = len(joints)
    z_floor, z_top = 0.0, 1.8
    fields = np.zeros((len(points), 3, 10))
    x_hat = np.array([1.0, 0.0, 0.0])
    z_hat = np.array([0.0, 0.0, 1.0])

    def per_bone(fn):
        out = np.zeros((len(points), 3))
        for j in range(nj):
            w = soft[:, j]
            if np.any(w):
                out += w[:, None] * fn(j)
        return out

    # 0 height: stretch along z about the floor
    fields[:, :, 0] = 0.03 * ((points[:, 2] - z_floor) / (z_top - z_floor))[:, None] * z_hat * 1.8
    # 1 girth: radial about each bone, strongest on the torso
    girth = {0: 0.08, 1: 0.08, 4: 0.04, 5: 0.03, 7: 0.04, 8: 0.03, 10: 0.05, 11: 0.03, 13: 0.05, 14: 0.03}
    fields[:, :, 1] = per_bone(lambda j: girth.get(j, 0.0) * _radial(points, joints[j], axes[j]))
    # 2 limb length: translate distal joints, stretch along each limb bone
    limb_len = 0.04

    def length_fn(j):
        for chain in (*ARM_BONES.values(), *LEG_BONES.values()):
            if j in chain:
                root = chain[0]
                along = ((points - joints[j]) @ axes[j])[:, None] * axes[j]
                return limb_len * ((joints[j] - joints[root]) + along)
        return np.zeros_like(points)
    fields[:, :, 2] = per_bone(length_fn)
    # 3 torso taper: wider shoulders, narrower hips
    taper = 0.25

    def taper_at(p):
        return taper * ((p[:, 2] - 1.15) * p[:, 0])[:, None] * x_hat

    def taper_fn(j):
        if j in TORSO_BONES or j in (2, 3):
            return taper_at(points)
        for chain in (*ARM_BONES.values(), *LEG_BONES.values()):
            if j in chain:
                return np.broadcast_to(taper_at(joints[chain[0]][None]), points.shape)
        return np.zeros_like(points)
    fields[:, :, 3] = per_bone(taper_fn)
    # 4 belly: forward bulge of the lower torso
    def belly_fn(j):
        if j not in TORSO_BONES:
            return np.zeros_like(points)
        bump = np.exp(-((points[:, 2] - 1.05) / 0.12) ** 2) * np.clip(points[:, 1] / 0.1, 0.0, None)
        return 0.03 * bump[:, None] * np.array([0.0, 1.0, 0.0])
    fields[:, :, 4] = per_bone(belly_fn)
    # 5 shoulder width: arms move outward
    def shoulder_fn(j):
        for side, chain in ARM_BONES.items():
            if j in chain:
                return np.broadcast_to((0.025 if side == "l" else -0.025) * x_hat, points.shape)
        return np.zeros_like(points)
    fields[:, :, 5] = per_bone(shoulder_fn)
    # 6 leg girth
    fields[:, :, 6] = per_bone(lambda j: (0.07 if j in (10, 11, 13, 14) else 0.0) * _radial(points, joints[j], axes[j]))
    # 7 arm girth
    fields[:, :, 7] = per_bone(lambda j: (0.08 if j in (4, 5, 7, 8) else 0.0) * _radial(points, joints[j], axes[j]))
    # 8 head size: scale about the head joint
    fields[:, :, 8] = per_bone(lambda j: (0.06 * (points - joints[3])) if j == 3 else np.zeros_like(points))
    # 9 hip width: pelvis widens, legs follow the hip joints
    def hip_fn(j):
        if j == 0:
            return 0.2 * points[:, 0:1] * x_hat
        for chain in LEG_BONES.values():
            if j in chain:
                return np.broadcast_to(0.2 * joints[chain[0], 0] * x_hat, points.shape)
        return np.zeros_like(points)
    fields[:, :, 9] = per_bone(hip_fn)
    return fields


def _garment_faces(vertices, faces, joints, ends):
    centroids = vertices[faces].mean(1)
    d, t = bone_distances(centroids, joints, ends)
    nearest = d.argmin(1)
    tn = t[np.arange(len(faces)), nearest]
    z = centroids[:, 2]
    torso = np.isin(nearest, TORSO_BONES)
    sleeve = np.isin(nearest, (4, 7)) & (tn <= SLEEVE_T)
    thigh = np.isin(nearest, (10, 13)) & (tn <= SHORTS_T)
    upper = (torso & (z >= HEM_Z)) | sleeve
    lower = (torso & (z < WAIST_Z)) | thigh
    return upper, lower


def build_humanoid():
    """The default procedural body model with tshirt and shorts registered."""
    cage_v, cage_q = build_cage()
    verts, quads = catmull_clark(cage_v, cage_q)
    faces = triangulate_quads(quads)
    joints = _joints()
    ends = _bone_ends(joints)
    weights = _blend_weights(verts, joints, ends)
    fields = _shape_fields(verts, joints, ends, weights)
    joint_fields = _shape_fields(joints, joints, ends, np.eye(len(joints)))
    sigmas = np.sqrt((fields ** 2).sum(1).mean(0)) * 100.0
    upper, lower = _garment_faces(verts, faces, joints, ends)
    body_mesh = Mesh(verts, faces)
    garments = {}
    covered = np.zeros(len(verts), dtype=bool)
    for name, layer, mask in (("tshirt", "upper", upper), ("shorts", "lower", lower)):
        sub, ids = submesh(body_mesh, mask)
        garments[name] = GarmentTemplate(name, layer, ids, sub.faces, len(verts))
        covered[ids] = True
    n = len(verts)
    return BodyModel(
        template=verts,
        faces=faces,
        joints=joints,
        parents=PARENTS.copy(),
        blend_weights=weights,
        shape_dirs=fields,
        pose_dirs=np.zeros((n, 3, 9 * (len(joints) - 1))),
        joint_shape_dirs=joint_fields,
        shape_sigmas=sigmas,
        joint_names=JOINT_NAMES,
        garments=garments,
        skin_mask=~covered,
    )
