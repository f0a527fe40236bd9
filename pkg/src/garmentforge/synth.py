"""Deterministic synthetic multi-layer dataset: bodies, sized garments, single meshes.

Per subject: a shape ``beta`` and a smooth outward skin detail field. Per
scan (subject x size): a small A-pose jitter, then for every garment class a
cloth surface ``C = body + offset * normal`` whose offset grows with a
looseness that depends nonlinearly on size and body girth, plus band-limited
wrinkles. The ground-truth garment samples that surface at points slid
downward along it (looser garments hang lower), so the garment is a sparse
convex combination of single-mesh vertices. The single mesh is the detailed
body with each garment's cloth surface written onto its vertices, the upper
layer winning where both garments overlap.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from garmentforge import body as bm
from garmentforge import io
from garmentforge.losses import make_skin_weighting, penetration_depth
from garmentforge.mesh import Mesh, boundary_vertices, geodesic_distances, mesh_edges, smooth_field, vertex_normals

logger = logging.getLogger(__name__)

SIZES = ("S", "M", "L", "XL")
GIRTH, BELLY, HIP = 1, 4, 9


class DatasetError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_subjects: int = 60
    sizes_per_subject: int = 3
    seed: int = 0
    beta_clip: float = 2.5
    pose_jitter: float = 0.03
    skin_detail_mm: tuple = (1.0, 3.0)
    base_offset_mm: float = 6.0
    loose_mm: float = 6.0
    wrinkle_mm: float = 2.5
    wrinkle_smoothing: int = 5
    slide_mm: float = 60.0
    slide_radius: float = 0.08
    min_offset_mm: float = 4.0
    layer_gap_mm: float = 3.0
    clearance_mm: float = 1.0
    max_projection_iters: int = 20
    holdout_subjects: float = 0.1
    holdout_sizes: float = 0.1

    def __post_init__(self):
        if self.n_subjects < 1:
            raise DatasetError("n_subjects must be positive")
        if not 1 <= self.sizes_per_subject <= len(SIZES):
            raise DatasetError(f"sizes_per_subject must be in [1, {len(SIZES)}]")
        for name in ("holdout_subjects", "holdout_sizes"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must be a fraction in [0, 1]")
        self.skin_detail_mm = tuple(float(x) for x in self.skin_detail_mm)

    def to_dict(self):
        d = asdict(self)
        d["skin_detail_mm"] = list(self.skin_detail_mm)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GarmentInstance:
    class_name: str
    size: int
    d_g: np.ndarray      # (m, 3) rest-frame displacement from the garment template
    posed: np.ndarray    # (m, 3) ground-truth posed garment


@dataclass
class Scan:
    scan_id: str
    subject: int
    size: int
    beta: np.ndarray
    theta: np.ndarray
    single: np.ndarray   # (n, 3) posed single-layer mesh vertices
    body: np.ndarray     # (n, 3) posed detailed body under clothing
    garments: dict = field(default_factory=dict)


@dataclass
class Dataset:
    model: object
    config: SynthConfig
    subjects: list       # dicts with id, beta, skin_detail
    scans: list
    undressed: list      # Scan objects with single == body and no garments
    split: dict

    def scan(self, scan_id):
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise KeyError(scan_id)

    def pool(self, name):
        ids = set(self.split[name]) if name != "test" else set(self.split["test_unseen_subject"]) | set(
            self.split["test_unseen_size"])
        return [s for s in self.scans if s.scan_id in ids]

    def subject_scans(self, subject):
        return sorted((s for s in self.scans if s.subject == subject), key=lambda s: s.size)


def scan_id(subject, size):
    return f"{subject:03d}_{SIZES[size]}"


def softplus(x):
    return np.log1p(np.exp(-abs(x))) + max(x, 0.0)


def looseness(class_name, size, beta):
    extra = BELLY if class_name == "tshirt" else HIP
    return softplus(size + 0.5 - 0.3 * beta[GIRTH] - 0.2 * beta[extra])


def slide_amount(loose, slide_mm):
    return 1e-3 * slide_mm * loose ** 2 / (1.0 + loose)


# --- per-class geometry -------------------------------------------------------

def _boundary_loops(faces):
    """Connected components of boundary vertices (edges used by one face)."""
    f = np.asarray(faces)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    bedges = uniq[counts == 1]
    parent = {}

    def find(a):
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a
    for a, b in bedges:
        parent[find(a)] = find(b)
    loops = {}
    for v in np.unique(bedges):
        loops.setdefault(find(v), []).append(v)
    return [np.array(sorted(v)) for v in loops.values()]


@dataclass
class GarmentGeometry:
    """Fixed per-class fields on the garment template."""

    class_name: str
    vertex_ids: np.ndarray
    faces: np.ndarray
    profile: np.ndarray      # looseness profile in [0.6, 1], loosest at the openings
    slide_weight: np.ndarray  # 0 at the top (supporting) opening and near the lower openings
    vertex_faces: np.ndarray  # (m, r) incident faces per vertex, padded by repetition


def garment_geometry(model, garment, slide_radius=0.08):
    verts = model.template[garment.vertex_ids]
    mesh = Mesh(verts, garment.faces)
    loops = _boundary_loops(garment.faces)
    if len(loops) < 2:
        raise DatasetError(f"garment {garment.class_name} needs a top and a bottom opening")
    heights = [verts[lp, 2].mean() for lp in loops]
    top = loops[int(np.argmax(heights))]
    bottom = np.concatenate([lp for i, lp in enumerate(loops) if i != int(np.argmax(heights))])
    d_top = geodesic_distances(mesh, top)
    d_bottom = geodesic_distances(mesh, bottom)
    profile = 1.0 - 0.4 * np.minimum(d_bottom / 0.15, 1.0)
    slide = np.minimum(d_top / slide_radius, 1.0) * np.minimum(d_bottom / slide_radius, 1.0)
    incident = [[] for _ in range(len(verts))]
    for f, tri in enumerate(garment.faces):
        for v in tri:
            incident[v].append(f)
    width = max(len(x) for x in incident)
    vertex_faces = np.array([x + [x[0]] * (width - len(x)) for x in incident])
    return GarmentGeometry(garment.class_name, garment.vertex_ids, garment.faces, profile, slide, vertex_faces)


# --- closest point on the cloth surface --------------------------------------

def closest_on_triangles(points, tri):
    """Closest point of each query on any of its triangles.

    ``tri`` is ``(F, 3, 3)`` shared by all queries or ``(P, F, 3, 3)`` per
    query. Returns the winning triangle slot and its barycentric coordinates.
    """
    if tri.ndim == 3:
        tri = tri[None]
    a, b, c = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
    p = points[:, None, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast_shapes(d1.shape, (len(points), tri.shape[1]))
    d1, d2, d3, d4, d5, d6, va, vb, vc = np.broadcast_arrays(d1, d2, d3, d4, d5, d6, va, vb, vc)
    bary = np.zeros(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def put(mask, u, v, w):
        nonlocal done
        m = mask & ~done
        bary[m] = np.stack([u, v, w], -1)[m]
        done |= m
    one, zero = np.ones(shape), np.zeros(shape)
    put((d1 <= 0) & (d2 <= 0), one, zero, zero)
    put((d3 >= 0) & (d4 <= d3), zero, one, zero)
    put((d6 >= 0) & (d5 <= d6), zero, zero, one)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        t = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(~done, 1 - v - w, v, w)
    q = np.einsum("pfk,pfkc->pfc", bary, np.broadcast_to(tri, shape + (3, 3)))
    dist = ((q - points[:, None, :]) ** 2).sum(-1)
    best = dist.argmin(1)
    return best, bary[np.arange(len(points)), best]


# --- generation ----------------------------------------------------------------

def _detail_field(model, rng, lo_mm, hi_mm):
    """Smooth outward displacement magnitude in [lo, hi] millimeters."""
    raw = smooth_field(rng.normal(size=model.n_vertices), model.faces, model.n_vertices, 15)
    raw = (raw - raw.min()) / max(raw.max() - raw.min(), 1e-12)
    return 1e-3 * (lo_mm + (hi_mm - lo_mm) * raw)


def _wrinkles(geom, rng, iterations):
    w = smooth_field(rng.normal(size=len(geom.vertex_ids)), geom.faces, len(geom.vertex_ids), iterations)
    return w / max(w.std(), 1e-12)


def _project_outside(points, bodies, clearance, max_iters):
    """Push points out along the nearest body normal until they clear every body."""
    p = points.copy()
    for _ in range(max_iters):
        moved = False
        for verts, normals in bodies:
            h, idx = penetration_depth(p, verts, normals)
            bad = h < clearance
            if bad.any():
                p[bad] += (clearance - h[bad] + 1e-6)[:, None] * normals[idx[bad]]
                moved = True
        if not moved:
            return p, True
    return p, False


def _slide_onto(cloth, geom, target, normals, min_cos=0.3):
    """Closest cloth point to each target among nearby triangles facing the same way as the source vertex.

    Cloth slides along a connected sheet; without the facing test a target
    between two facing surfaces (the inner thighs) could snap across the gap.
    Vertices with no admissible triangle stay where they are.
    """
    _, near = cKDTree(cloth).query(target, k=8)
    cand = geom.vertex_faces[near].reshape(len(target), -1)
    tri = cloth[geom.faces[cand]]
    fn = np.cross(tri[:, :, 1] - tri[:, :, 0], tri[:, :, 2] - tri[:, :, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=-1, keepdims=True), 1e-12)
    ok = (np.einsum("pfc,pc->pf", fn, normals) >= min_cos)
    far = target[:, None, None, :] + 1e3
    tri = np.where(ok[..., None, None], tri, far)
    slot, bary = closest_on_triangles(target, tri)
    out = np.einsum("pk,pkc->pc", bary, tri[np.arange(len(target)), slot])
    stay = ~ok.any(1)
    out[stay] = cloth[stay]
    return out


def _generate_scan(model, geoms, cfg, subject, size, beta, detail, rng):
    theta = cfg.pose_jitter * rng.normal(size=3 * model.n_joints)
    zero = np.zeros(3 * model.n_joints)
    smooth_rest = bm.unposed(model, bm.BodyParams(beta, zero))
    n_rest = vertex_normals(model.mesh(smooth_rest))
    detailed_rest = smooth_rest + detail[:, None] * n_rest
    posed_smooth = bm.skin(model, bm.BodyParams(beta, theta)).vertices
    posed_body = bm.skin(model, bm.BodyParams(beta, theta, detailed_rest - smooth_rest)).vertices
    bodies = [(posed_smooth, vertex_normals(model.mesh(posed_smooth))),
              (posed_body, vertex_normals(model.mesh(posed_body)))]

    single_rest = detailed_rest.copy()
    offsets = {}
    garments = {}
    order = sorted(geoms, key=lambda c: model.garments[c].layer != "lower")  # lower layer first
    for cname in order:
        geom = geoms[cname]
        ids = geom.vertex_ids
        loose = looseness(cname, size, beta)
        wr = 1e-3 * cfg.wrinkle_mm * (0.5 + 0.5 * loose) * _wrinkles(geom, rng, cfg.wrinkle_smoothing)
        off = 1e-3 * (cfg.base_offset_mm + cfg.loose_mm * loose * geom.profile) + wr
        off = np.maximum(off, 1e-3 * cfg.min_offset_mm)
        if model.garments[cname].layer == "upper":
            for other, (oids, ooff) in offsets.items():
                shared, a, b = np.intersect1d(ids, oids, return_indices=True)
                off[a] = np.maximum(off[a], ooff[b] + 1e-3 * cfg.layer_gap_mm)
        offsets[cname] = (ids, off)
        cloth = detailed_rest[ids] + off[:, None] * n_rest[ids]
        single_rest[ids] = cloth

        down = np.array([0.0, 0.0, -1.0])
        tangent = down - (n_rest[ids] @ down)[:, None] * n_rest[ids]
        tn = np.linalg.norm(tangent, axis=1, keepdims=True)
        tangent = np.where(tn > 1e-6, tangent / np.maximum(tn, 1e-12), 0.0)
        target = cloth + (slide_amount(loose, cfg.slide_mm) * geom.slide_weight)[:, None] * tangent
        g_rest = _slide_onto(cloth, geom, target, n_rest[ids])

        garment = model.garments[cname]
        template = bm.garment_template(model, garment, bm.BodyParams(beta, zero))
        posed = bm.garment_skin(model, garment, beta, theta, g_rest - template).vertices
        posed, ok = _project_outside(posed, bodies, 1e-3 * cfg.clearance_mm, cfg.max_projection_iters)
        if not ok:
            return None
        d_g = bm.unpose_garment(model, garment, beta, theta, posed)
        garments[cname] = GarmentInstance(cname, size, d_g, posed)

    single = bm.skin(model, bm.BodyParams(beta, theta, single_rest - smooth_rest)).vertices
    return Scan(scan_id(subject, size), subject, size, beta, theta, single, posed_body, garments)


def make_split(subject_sizes, cfg):
    """Two disjoint test pools: unseen subjects and one unseen size of seen subjects."""
    subjects = sorted(subject_sizes)
    rng = np.random.default_rng([cfg.seed, 7919])
    order = list(rng.permutation(subjects))
    n_unseen = int(round(cfg.holdout_subjects * len(subjects)))
    unseen = sorted(int(s) for s in order[:n_unseen])
    rest = order[n_unseen:]
    n_size = int(round(cfg.holdout_sizes * len(rest)))
    size_subjects = [int(s) for s in rest[:n_size] if len(subject_sizes[s]) > 1]
    test_subject = [scan_id(s, z) for s in unseen for z in subject_sizes[s]]
    test_size = []
    for s in sorted(size_subjects):
        z = subject_sizes[s][int(rng.integers(len(subject_sizes[s])))]
        test_size.append(scan_id(s, z))
    held = set(test_subject) | set(test_size)
    train = [scan_id(s, z) for s in subjects for z in subject_sizes[s] if scan_id(s, z) not in held]
    return {"train": train, "test_unseen_subject": test_subject, "test_unseen_size": sorted(test_size)}


def split(dataset, holdout_subjects, holdout_sizes):
    if not (0.0 <= holdout_subjects <= 1.0 and 0.0 <= holdout_sizes <= 1.0):
        raise DatasetError("holdout fractions must lie in [0, 1]")
    cfg = SynthConfig(**{**dataset.config.to_dict(), "holdout_subjects": holdout_subjects,
                         "holdout_sizes": holdout_sizes})
    sizes = {}
    for s in dataset.scans:
        sizes.setdefault(s.subject, []).append(s.size)
    return make_split({k: sorted(v) for k, v in sizes.items()}, cfg)


def generate(model, cfg):
    """Build the dataset in memory."""
    geoms = {name: garment_geometry(model, g, cfg.slide_radius) for name, g in sorted(model.garments.items())}
    subjects, scans, undressed = [], [], []
    for sid in range(cfg.n_subjects):
        rng = np.random.default_rng([cfg.seed, sid])
        beta = np.clip(rng.normal(size=model.n_betas), -cfg.beta_clip, cfg.beta_clip)
        detail = _detail_field(model, rng, *cfg.skin_detail_mm)
        first = int(rng.integers(0, len(SIZES) - cfg.sizes_per_subject + 1))
        subjects.append({"id": sid, "beta": beta, "skin_detail": detail,
                         "sizes": list(range(first, first + cfg.sizes_per_subject))})
        for size in range(first, first + cfg.sizes_per_subject):
            for attempt in range(10):
                srng = np.random.default_rng([cfg.seed, sid, size, attempt])
                scan = _generate_scan(model, geoms, cfg, sid, size, beta, detail, srng)
                if scan is not None:
                    break
                logger.warning("scan %s rejected (projection failed), resampling", scan_id(sid, size))
            else:
                raise DatasetError(f"could not generate scan {scan_id(sid, size)}")
            scans.append(scan)
        urng = np.random.default_rng([cfg.seed, sid, 99])
        theta = cfg.pose_jitter * urng.normal(size=3 * model.n_joints)
        body = bm.skin(model, bm.BodyParams(beta, theta)).vertices
        undressed.append(Scan(f"{sid:03d}_undressed", sid, -1, beta, theta, body, body, {}))
    split_ids = make_split({s["id"]: s["sizes"] for s in subjects}, cfg)
    return Dataset(model, cfg, subjects, scans, undressed, split_ids)


# --- persistence ----------------------------------------------------------------

def save_dataset(ds, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bm.save_model(ds.model, d / "body")
    weighting = make_skin_weighting(ds.model.mesh(), ds.model.skin_mask)
    io.save_tensor(d / "skin_rows.gft", weighting.skin_ids, "i64")
    io.save_tensor(d / "skin_w_geo.gft", weighting.w_geo, "f64")
    for s in ds.subjects:
        sd = d / "subjects" / f"{s['id']:03d}"
        sd.mkdir(parents=True, exist_ok=True)
        io.write_json(sd / "params.json", {"id": s["id"], "beta": [float(x) for x in s["beta"]],
                                           "sizes": [SIZES[z] for z in s["sizes"]]})
        io.save_tensor(sd / "skin_detail.gft", s["skin_detail"], "f64")
    for u in ds.undressed:
        ud = d / "subjects" / f"{u.subject:03d}"
        io.save_tensor(ud / "undressed_theta.gft", u.theta, "f64")
        io.save_tensor(ud / "undressed_body.gft", u.body, "f64")
    pools = {i: name for name, ids in ds.split.items() for i in ids}
    instances = []
    for scan in ds.scans:
        for cname, inst in sorted(scan.garments.items()):
            name = f"{scan.scan_id}_{cname}_{SIZES[inst.size]}"
            idir = d / "instances" / name
            idir.mkdir(parents=True, exist_ok=True)
            g = ds.model.garments[cname]
            io.save_obj(idir / "single.obj", Mesh(scan.single, ds.model.faces))
            io.save_obj(idir / "garment.obj", Mesh(inst.posed, g.faces))
            io.save_obj(idir / "body.obj", Mesh(scan.body, ds.model.faces))
            io.save_tensor(idir / "d_g.gft", inst.d_g, "f64")
            io.save_tensor(idir / "garment_posed.gft", inst.posed, "f64")
            io.save_tensor(idir / "single.gft", scan.single, "f64")
            io.save_tensor(idir / "body.gft", scan.body, "f64")
            io.write_json(idir / "meta.json", {
                "scan": scan.scan_id, "subject": scan.subject, "class": cname, "size": SIZES[inst.size],
                "theta": [float(x) for x in scan.theta], "beta": [float(x) for x in scan.beta],
                "pool": pools.get(scan.scan_id, "train"),
            })
            instances.append(name)
    io.write_json(d / "manifest.json", {
        "format": "garmentforge-dataset/1",
        "config": ds.config.to_dict(),
        "config_hash": io.config_hash(ds.config.to_dict()),
        "classes": sorted(ds.model.garments),
        "sizes": list(SIZES),
        "instances": instances,
        "skin_indicator": "skin_rows.gft",
    })
    io.write_json(d / "split.json", ds.split)


def load_dataset(directory):
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise DatasetError(f"{d} is not a dataset directory (manifest.json missing)")
    manifest = io.read_json(d / "manifest.json")
    model = bm.load_model(d / "body")
    cfg = SynthConfig.from_dict(manifest["config"])
    subjects, undressed = [], []
    for sd in sorted((d / "subjects").iterdir()):
        p = io.read_json(sd / "params.json")
        beta = np.array(p["beta"])
        subjects.append({"id": p["id"], "beta": beta, "skin_detail": io.load_tensor(sd / "skin_detail.gft"),
                         "sizes": [SIZES.index(z) for z in p["sizes"]]})
        body = io.load_tensor(sd / "undressed_body.gft")
        undressed.append(Scan(f"{p['id']:03d}_undressed", p["id"], -1, beta,
                              io.load_tensor(sd / "undressed_theta.gft"), body, body, {}))
    scans = {}
    for name in manifest["instances"]:
        idir = d / "instances" / name
        meta = io.read_json(idir / "meta.json")
        sid = meta["scan"]
        if sid not in scans:
            scans[sid] = Scan(sid, meta["subject"], SIZES.index(meta["size"]), np.array(meta["beta"]),
                              np.array(meta["theta"]), io.load_tensor(idir / "single.gft"),
                              io.load_tensor(idir / "body.gft"))
        scans[sid].garments[meta["class"]] = GarmentInstance(
            meta["class"], SIZES.index(meta["size"]), io.load_tensor(idir / "d_g.gft"),
            io.load_tensor(idir / "garment_posed.gft"))
    ordered = sorted(scans.values(), key=lambda s: (s.subject, s.size))
    return Dataset(model, cfg, subjects, ordered, undressed, io.read_json(d / "split.json"))


def generate_dataset(cfg, out_dir, model=None):
    """Generate and write a dataset directory; returns the in-memory dataset."""
    if model is None:
        from garmentforge.procedural import build_humanoid

        model = build_humanoid()
    ds = generate(model, cfg)
    save_dataset(ds, out_dir)
    return ds


__all__ = ["SIZES", "SynthConfig", "Dataset", "Scan", "GarmentInstance", "generate", "generate_dataset",
           "load_dataset", "save_dataset", "split", "make_split", "looseness", "closest_on_triangles",
           "mesh_edges", "boundary_vertices"]
