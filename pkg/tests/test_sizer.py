import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from garmentforge import sizer as SZ
from garmentforge.losses import LossWeights
from garmentforge.mesh import vertex_normals
from garmentforge.parser import garment_laplacian
from garmentforge.sizer import SizerError
from garmentforge.synth import SIZES

TINY = dict(latent=4, hidden=16, epochs=4, batch_size=4, lr=1e-3, dtype="float64",
            weights=LossWeights(w_lap=0.01).to_dict())


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    sz = SZ.build_sizer(tiny_dataset.model, "shorts", SZ.SizerConfig(**TINY))
    log = SZ.train_sizer(sz, tiny_dataset.pool("train"))
    return sz, log


class TestSizeLabel:
    @given(st.integers(0, len(SIZES) - 1))
    def test_forms_agree(self, k):
        one = SZ.size_label(k)
        assert one.sum() == 1 and one[k] == 1
        np.testing.assert_array_equal(SZ.size_label(SIZES[k]), one)
        np.testing.assert_array_equal(SZ.size_label(one), one)

    @given(st.integers().filter(lambda k: not 0 <= k < len(SIZES)))
    def test_out_of_range(self, k):
        with pytest.raises(SizerError):
            SZ.size_label(k)

    @pytest.mark.parametrize("bad", ["XXL", [1, 1, 0, 0], [0.5, 0.5, 0, 0], [1, 0, 0]])
    def test_bad_labels(self, bad):
        with pytest.raises(SZ.SizerError):
            SZ.size_label(bad)



class TestArchitecture:
    def test_zero_last_layer_gives_mean_offsets(self, humanoid, rng):
        m = humanoid.garments["tshirt"].n_vertices
        mean = rng.normal(size=(m, 3)) * 0.01
        sz = SZ.build_sizer(humanoid, "tshirt", SZ.SizerConfig(latent=3, hidden=8), offset_mean=mean)
        for p in sz.decoder[2].params():
            p[...] = 0
        g = SZ.unposed_garment(humanoid, "tshirt", np.zeros(humanoid.n_betas), mean)
        out = SZ.predict_offsets(sz, g, np.zeros(humanoid.n_betas), "S", "L")
        np.testing.assert_array_equal(out, mean)

    def test_backward_matches_finite_differences(self, humanoid, rng):
        cfg = SZ.SizerConfig(latent=3, hidden=6, dtype="float64", output_scale=1.0)
        sz = SZ.build_sizer(humanoid, "shorts", cfg, rng=rng)
        m = sz.garment.n_vertices
        x = rng.normal(size=(2, 3 * m))
        betas = rng.normal(size=(2, humanoid.n_betas))
        d_in = np.stack([SZ.size_label(0), SZ.size_label(2)])
        d_out = np.stack([SZ.size_label(1), SZ.size_label(3)])
        probe = rng.normal(size=(2, m, 3))

        def value():
            return float((SZ.forward(sz, x, betas, d_in, d_out)[0] * probe).sum())
        _, cache = SZ.forward(sz, x, betas, d_in, d_out)
        grads = SZ.backward(sz, cache, probe)
        eps = 1e-6
        for p, g in zip(sz.params(), grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for j in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + eps
                up = value()
                flat[j] = old - eps
                down = value()
                flat[j] = old
                assert (up - down) / (2 * eps) == pytest.approx(gflat[j], rel=1e-5, abs=1e-8)

    def test_chain_gradcheck(self):
        assert SZ.check_sizer_chain(np.random.default_rng(2)).max_rel < 1e-4

    def test_input_validation(self, humanoid):
        sz = SZ.build_sizer(humanoid, "shorts", SZ.SizerConfig(latent=3, hidden=8))
        m = sz.garment.n_vertices
        with pytest.raises(SizerError):
            SZ.predict_offsets(sz, np.zeros((m + 1, 3)), np.zeros(humanoid.n_betas), 0, 1)
        with pytest.raises(SizerError):
            SZ.predict_offsets(sz, np.zeros((m, 3)), np.zeros(humanoid.n_betas + 1), 0, 1)
        with pytest.raises(SizerError):
            SZ.build_sizer(humanoid, "hat")


class TestRedrapedLoss:
    def test_gradient_wrt_offsets(self, tiny_dataset, rng):
        model = tiny_dataset.model
        s = tiny_dataset.scans[0]
        g = model.garments["shorts"]
        w = LossWeights(w_lap=0.01)
        w.w_w = 0.0
        lap = garment_laplacian(model, "shorts")
        normals = vertex_normals(model.mesh(s.body))
        d = s.garments["shorts"].d_g + rng.normal(scale=0.005, size=(g.n_vertices, 3))
        args = (s.beta, s.theta, s.garments["shorts"].posed, lap, s.body, normals, w, 0.02)
        _, grad, _ = SZ.redraped_loss(model, g, d, *args)
        eps = 1e-6
        for i, c in [(0, 0), (5, 1), (g.n_vertices - 1, 2), (17, 2)]:
            dp, dm = d.copy(), d.copy()
            dp[i, c] += eps
            dm[i, c] -= eps
            fd = (SZ.redraped_loss(model, g, dp, *args)[0] - SZ.redraped_loss(model, g, dm, *args)[0]) / (2 * eps)
            assert fd == pytest.approx(grad[i, c], rel=1e-4, abs=1e-9)


class TestTraining:
    def test_pairs(self, tiny_dataset):
        train = tiny_dataset.pool("train")
        counts = {}
        for s in train:
            counts[s.subject] = counts.get(s.subject, 0) + 1
        assert len(SZ.size_pairs(train)) == sum(n * n for n in counts.values())
        assert len(SZ.size_pairs(train, identity=False)) == sum(n * (n - 1) for n in counts.values())
        assert all(p.source.subject == p.target.subject for p in SZ.size_pairs(train))

    def test_normalization(self, trained, tiny_dataset):
        sz, _ = trained
        train = tiny_dataset.pool("train")
        un = np.stack([SZ.unposed_garment(sz.body_model, "shorts", s.beta, s.garments["shorts"].d_g) for s in train])
        x = SZ._inputs(sz, un)
        np.testing.assert_allclose(x.mean(0), 0, atol=1e-9)
        assert np.sqrt((x ** 2).mean()) == pytest.approx(1.0)

    def test_loss_decreases(self, trained):
        _, log = trained
        losses = [r["loss"] for r in log.stage("sizer_shorts")]
        assert len(losses) == TINY["epochs"] and losses[-1] < losses[0]

    def test_deterministic(self, trained, tiny_dataset):
        sz = SZ.build_sizer(tiny_dataset.model, "shorts", SZ.SizerConfig(**TINY))
        log = SZ.train_sizer(sz, tiny_dataset.pool("train"))
        assert log.to_text() == trained[1].to_text()

    def test_needs_scans(self, humanoid):
        with pytest.raises(SizerError):
            SZ.train_sizer(SZ.build_sizer(humanoid, "shorts", SZ.SizerConfig(**TINY)), [])


class TestResize:
    def test_output_mesh(self, trained, tiny_dataset):
        sz, _ = trained
        s = tiny_dataset.scans[0]
        un = SZ.unposed_garment(sz.body_model, "shorts", s.beta, s.garments["shorts"].d_g)
        out = SZ.resize(sz, un, s.beta, s.size, "XL", s.theta)
        np.testing.assert_array_equal(out.faces, sz.garment.faces)
        assert np.isfinite(out.vertices).all()

    def test_persistence(self, trained, tiny_dataset, tmp_path):
        sz, _ = trained
        SZ.save_sizer({"shorts": sz}, tmp_path)
        back = SZ.load_sizer(tmp_path)["shorts"]
        s = tiny_dataset.scans[1]
        un = SZ.unposed_garment(sz.body_model, "shorts", s.beta, s.garments["shorts"].d_g)
        np.testing.assert_array_equal(SZ.predict_offsets(back, un, s.beta, 0, 2), SZ.predict_offsets(sz, un, s.beta, 0, 2))
        assert back.config == sz.config

    def test_load_missing(self, tmp_path):
        with pytest.raises(SizerError):
            SZ.load_sizer(tmp_path)
