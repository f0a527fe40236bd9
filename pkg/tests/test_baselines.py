import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentforge import baselines as B
from garmentforge import parser as P
from garmentforge.losses import LossWeights
from garmentforge.mesh import Mesh, surface_area
from garmentforge.training import MetricLog


def _kkt_violation(X, y, w, alpha):
    """Largest violation of the LASSO subgradient optimality conditions."""
    g = X.T @ (y - X @ w) / X.shape[0]
    active = w != 0
    viol = np.abs(g[active] - alpha * np.sign(w[active]))
    inactive = np.maximum(np.abs(g[~active]) - alpha, 0)
    return max(viol.max(initial=0), inactive.max(initial=0))


class TestLasso:
    def test_orthogonal_design_closed_form(self, rng):
        n, p = 40, 6
        q, _ = np.linalg.qr(rng.normal(size=(n, p)))
        X = q * np.sqrt(n)  # X^T X / n = I
        y = rng.normal(size=n)
        alpha = 0.3
        expected = B.soft_threshold(X.T @ y / n, alpha)
        w = B.lasso_fista(X[None], y[None], alpha, iterations=500)[0]
        np.testing.assert_allclose(w, expected, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(1e-3, 0.5))
    def test_kkt(self, seed, alpha):
        r = np.random.default_rng(seed)
        X = r.normal(size=(3, 30, 5))
        Y = np.einsum("bnp,bp->bn", X, r.normal(size=(3, 5)))
        Y += 0.1 * r.normal(size=Y.shape)
        W = B.lasso_fista(X, Y, alpha, iterations=5000, tol=1e-14)
        for b in range(3):
            assert _kkt_violation(X[b], Y[b], W[b], alpha) < 1e-6

    def test_tiny_alpha_matches_least_squares(self, rng):
        X = rng.normal(size=(1, 50, 4))
        y = rng.normal(size=(1, 50))
        w = B.lasso_fista(X, y, 1e-12, iterations=5000, tol=1e-15)[0]
        np.testing.assert_allclose(w, np.linalg.lstsq(X[0], y[0], rcond=None)[0], atol=1e-7)

    def test_objective_not_above_zero_start(self, rng):
        X = rng.normal(size=(2, 20, 3))
        Y = rng.normal(size=(2, 20))
        w = B.lasso_fista(X, Y, 0.05)
        assert (B.lasso_objective(X, Y, w, 0.05) <= B.lasso_objective(X, Y, np.zeros((2, 3)), 0.05)).all()

    def test_large_alpha_gives_zero(self, rng):
        X = rng.normal(size=(1, 20, 3))
        Y = rng.normal(size=(1, 20))
        assert not B.lasso_fista(X, Y, 1e3).any()


class TestLinearParser:
    def test_recovers_indicator_when_target_is_cut_out(self, humanoid, rng):
        g = humanoid.garments["shorts"]
        nb = P.garment_neighborhoods(humanoid, g.vertex_ids, 8)
        singles = [humanoid.template + rng.normal(scale=0.05, size=humanoid.template.shape) for _ in range(6)]
        lp = B.fit_linear_parser("shorts", nb, singles, [s[g.vertex_ids] for s in singles], alpha=1e-9,
                                 iterations=20000)
        expected = np.zeros(nb.shape)
        expected[:, 0] = 1
        np.testing.assert_allclose(lp.weights, expected, atol=1e-3)
        for s in singles:
            np.testing.assert_allclose(lp.predict(s), s[g.vertex_ids], atol=1e-4)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_prediction_is_weighted_sum(self, seed):
        r = np.random.default_rng(seed)
        nb = r.integers(0, 20, size=(5, 4))
        w = r.normal(size=(5, 4))
        v = r.normal(size=(20, 3))
        lp = B.LinearParser("x", nb, w)
        expected = np.array([sum(w[i, j] * v[nb[i, j]] for j in range(4)) for i in range(5)])
        np.testing.assert_allclose(lp.predict(v), expected)

    def test_no_meshes(self):
        with pytest.raises(ValueError):
            B.fit_linear_parser("x", np.zeros((2, 2), int), [], [])


class TestScaling:
    def test_fit_factor_from_area_ratio(self):
        s = B.fit_scaling({("tshirt", 0, 1): [(1.0, 1.21), (2.0, 2.42)]})
        assert s[("tshirt", 0, 1)] == pytest.approx(1.1)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.5, 2.0), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_apply_scales_area_and_moves_centroid(self, humanoid, s, c):
        g = humanoid.garments["tshirt"]
        v = humanoid.template[g.vertex_ids]
        out = B.apply_scaling(v, s, np.array(c))
        np.testing.assert_allclose(out.mean(0), c, atol=1e-12)
        assert surface_area(Mesh(out, g.faces)) == pytest.approx(s * s * surface_area(Mesh(v, g.faces)))


class TestFC:
    @pytest.fixture(scope="class")
    @classmethod
    def fitted(cls, tiny_dataset):
        ds = tiny_dataset
        bundle = P.build_bundle(ds.model, P.ParserConfig(k=6, pose_hidden=8, hidden=8))
        train = ds.pool("train")
        feats = np.stack([bundle.features(ds.model.mesh(s.single)) for s in train])
        params = [(s.theta, s.beta) for s in train]
        cfg = B.FCConfig(hidden=16, epochs=4, dtype="float64", weights=LossWeights(w_lap=0.01).to_dict())
        log = MetricLog()
        fc = B.train_fc_parser(ds.model, "shorts", feats, params, train, P.garment_laplacian(ds.model, "shorts"),
                               cfg, log)
        return fc, log, feats, train

    def test_loss_decreases(self, fitted):
        _, log, _, _ = fitted
        losses = [r["loss"] for r in log.stage("fc_shorts")]
        assert losses[-1] < losses[0]

    def test_prediction_shape(self, fitted, tiny_dataset):
        fc, _, feats, train = fitted
        out = B.predict_fc(tiny_dataset.model, fc, feats[:1], train[0].theta, train[0].beta)
        assert out.vertices.shape == (tiny_dataset.model.garments["shorts"].n_vertices, 3)
        assert np.isfinite(out.vertices).all()

    def test_persistence(self, fitted, tmp_path, humanoid):
        fc, _, feats, _ = fitted
        nb = P.garment_neighborhoods(humanoid, humanoid.garments["shorts"].vertex_ids, 4)
        lp = B.LinearParser("shorts", nb, np.random.default_rng(0).normal(size=nb.shape))
        B.save_baselines(tmp_path, {"shorts": fc}, {"shorts": lp}, B.FCConfig())
        fcs, lins = B.load_baselines(tmp_path)
        np.testing.assert_array_equal(fcs["shorts"].offsets(feats[:2]), fc.offsets(feats[:2]))
        np.testing.assert_array_equal(lins["shorts"].weights, lp.weights)
        np.testing.assert_array_equal(lins["shorts"].neighborhoods, nb)

    def test_load_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            B.load_baselines(tmp_path)
