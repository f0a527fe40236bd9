import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentforge import parser as P
from garmentforge.mesh import Mesh
from garmentforge.nn import DenseNet
from garmentforge.parser import ParserConfig, ParserError
from garmentforge.training import MetricLog

TINY = dict(k=6, pose_hidden=8, hidden=8, pose_epochs=1, augment_bodies=4, init_epochs=3, joint_epochs=1,
            finetune_epochs=1, body_epochs=1, dtype="float64")


@pytest.fixture(scope="module")
def bundle(humanoid):
    return P.build_bundle(humanoid, ParserConfig(**TINY))


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    b = P.build_bundle(tiny_dataset.model, ParserConfig(**TINY))
    log = P.train_parser(b, tiny_dataset.pool("train"), tiny_dataset.undressed)
    return b, log


class TestFeatures:
    def test_layout(self, humanoid):
        mesh = humanoid.mesh()
        f = P.mesh_features(mesh)
        assert f.shape == (6 * humanoid.n_vertices,)
        pos = f[:3 * humanoid.n_vertices].reshape(-1, 3)
        np.testing.assert_allclose(pos.mean(0), 0, atol=1e-12)
        nrm = f[3 * humanoid.n_vertices:].reshape(-1, 3)
        np.testing.assert_allclose(np.linalg.norm(nrm, axis=1), 1, atol=1e-9)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    @settings(max_examples=20, deadline=None)
    def test_translation_invariant(self, humanoid, t):
        mesh = humanoid.mesh()
        moved = Mesh(mesh.vertices + np.array(t), mesh.faces)
        np.testing.assert_allclose(P.mesh_features(moved), P.mesh_features(mesh), atol=1e-9)

    def test_wrong_vertex_count(self, humanoid):
        with pytest.raises(ParserError):
            P.mesh_features(humanoid.mesh(), humanoid.n_vertices + 1)

    def test_scaler_floor(self):
        x = np.zeros((5, 3))
        x[:, 0] = np.arange(5)
        s = P.FeatureScaler.fit(x)
        assert s.std[1] == pytest.approx(1e-3)
        np.testing.assert_allclose(s(x)[:, 0].std(), 1.0)


class TestNeighborhoods:
    def test_associated_vertex_first(self, humanoid):
        for g in humanoid.garments.values():
            nb = P.garment_neighborhoods(humanoid, g.vertex_ids, 12)
            np.testing.assert_array_equal(nb[:, 0], g.vertex_ids)
            assert all(len(set(row)) == 12 for row in nb)

    def test_k_clipped_to_mesh(self, humanoid):
        g = humanoid.garments["shorts"]
        nb = P.garment_neighborhoods(humanoid, g.vertex_ids[:3], 10 ** 6)
        assert nb.shape == (3, humanoid.n_vertices)

    def test_bad_k(self):
        with pytest.raises(ParserError):
            ParserConfig(k=0)


class TestRegressor:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_rows_convex(self, bundle, seed):
        rng = np.random.default_rng(seed)
        nb = bundle.neighborhoods["tshirt"]
        net = DenseNet([12, 8, nb.size], rng=rng, out_scale=rng.uniform(0.1, 50))
        reg = P.predict_regressor(net, rng.normal(size=(1, 12)) * 10, nb)
        assert reg.values.min() >= 0
        np.testing.assert_allclose(reg.values.sum(1), 1, atol=1e-12)

    def test_dominant_slot_zero_is_cut_out(self, humanoid, bundle):
        nb = bundle.neighborhoods["shorts"]
        logits = np.zeros(nb.shape)
        logits[:, 0] = 60.0
        reg = P.regressor_from_logits(logits, nb)
        v = humanoid.template
        np.testing.assert_allclose(reg.apply(v), v[humanoid.garments["shorts"].vertex_ids], atol=1e-20)

    def test_nonfinite_logits(self, bundle):
        nb = bundle.neighborhoods["shorts"]
        with pytest.raises(Exception):
            P.regressor_from_logits(np.full(nb.shape, np.nan), nb)


class TestInit:
    def test_reaches_cut_out(self, tiny_dataset):
        b = P.build_bundle(tiny_dataset.model, ParserConfig(**{**TINY, "init_epochs": 200, "init_lr": 1e-2}))
        items = P._items(b, tiny_dataset.pool("train"))
        dev, err = P.init_to_indicator(b, b.garment_nets["tshirt"], b.neighborhoods["tshirt"], items,
                                       np.random.default_rng(0), MetricLog(), "init",
                                       tiny_dataset.model.garments["tshirt"].vertex_ids)
        assert dev < b.config.init_target and err < b.config.init_tolerance
        cut = tiny_dataset.model.garments["tshirt"].vertex_ids
        for it in items:
            reg = P.predict_regressor(b.garment_nets["tshirt"], it.x[None], b.neighborhoods["tshirt"])
            assert np.abs(reg.apply(it.single) - it.single[cut]).max() < 2e-3

    def test_rejects_wrong_slot(self, tiny_dataset, bundle):
        items = P._items(bundle, tiny_dataset.pool("train")[:1])
        nb = bundle.neighborhoods["tshirt"][:, ::-1].copy()
        with pytest.raises(ParserError):
            P.init_to_indicator(bundle, bundle.garment_nets["tshirt"], nb, items, np.random.default_rng(0),
                                MetricLog(), garment_ids=tiny_dataset.model.garments["tshirt"].vertex_ids)

    def test_cross_entropy_of_one_hot(self):
        p = np.zeros((3, 4))
        p[:, 0] = 1
        assert P.indicator_cross_entropy(p) == 0.0


class TestTraining:
    def test_stages_logged(self, trained):
        _, log = trained
        stages = {r["stage"] for r in log.records}
        assert {"pose_shape", "init_tshirt", "init_shorts", "joint", "body"} <= stages
        assert any(s.startswith("finetune_") for s in stages)
        assert all(np.isfinite(v) for r in log.records for k, v in r.items() if k not in ("stage", "epoch"))

    def test_deterministic(self, tiny_dataset, trained):
        b = P.build_bundle(tiny_dataset.model, ParserConfig(**TINY))
        log = P.train_parser(b, tiny_dataset.pool("train"), tiny_dataset.undressed)
        assert log.to_text() == trained[1].to_text()

    def test_garment_loss_decreases(self, tiny_dataset):
        b = P.build_bundle(tiny_dataset.model, ParserConfig(**{**TINY, "init_epochs": 0}))
        items = P._items(b, tiny_dataset.pool("train"))
        from garmentforge.nn import Adam

        opts = {c: Adam(b.garment_nets[c].params(), lr=1e-3) for c in b.classes}
        log = MetricLog()
        P.train_garment_nets(b, items, ["shorts"], 4, np.random.default_rng(0), log, "smoke", opts)
        losses = [r["loss_shorts"] for r in log.stage("smoke")]
        assert losses[-1] < losses[0]

    def test_no_scans(self, bundle):
        with pytest.raises(ParserError):
            P.train_parser(bundle, [])


class TestParse:
    def test_outputs(self, trained, tiny_dataset):
        b, _ = trained
        s = tiny_dataset.scans[0]
        out = P.parse(b, tiny_dataset.model.mesh(s.single))
        assert out["upper"] is out["tshirt"] and out["lower"] is out["shorts"]
        assert out["theta"].shape == (3 * tiny_dataset.model.n_joints,)
        assert out["body"].n_vertices == tiny_dataset.model.n_vertices
        np.testing.assert_array_equal(out["tshirt"].faces, tiny_dataset.model.garments["tshirt"].faces)

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_translation_equivariant(self, trained, tiny_dataset, t):
        b, _ = trained
        mesh = tiny_dataset.model.mesh(tiny_dataset.scans[1].single)
        out = P.parse(b, mesh)
        moved = P.parse(b, Mesh(mesh.vertices + np.array(t), mesh.faces))
        for c in b.classes:
            np.testing.assert_allclose(moved[c].vertices, out[c].vertices + np.array(t), atol=1e-9)

    def test_skin_rows_blend_towards_input(self, trained, tiny_dataset):
        b, _ = trained
        s = tiny_dataset.scans[2]
        out = P.parse(b, tiny_dataset.model.mesh(s.single))
        untouched = np.setdiff1d(np.arange(tiny_dataset.model.n_vertices), b.weighting.skin_ids)
        np.testing.assert_array_equal(out["body"].vertices[untouched], out["smooth_body"].vertices[untouched])


class TestPersistence:
    def test_roundtrip(self, trained, tiny_dataset, tmp_path):
        b, _ = trained
        P.save_bundle(b, tmp_path)
        back = P.load_bundle(tmp_path)
        mesh = tiny_dataset.model.mesh(tiny_dataset.scans[0].single)
        a, c = P.parse(b, mesh), P.parse(back, mesh)
        for key in ("tshirt", "shorts", "body"):
            np.testing.assert_array_equal(a[key].vertices, c[key].vertices)
        assert back.config == b.config

    def test_missing(self, tmp_path):
        with pytest.raises(ParserError):
            P.load_bundle(tmp_path)


def test_chain_gradcheck():
    report = P.check_parser_chain(np.random.default_rng(5))
    assert report.max_rel < 1e-4
