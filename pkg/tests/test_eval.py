import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from garmentforge import evaluate as E
from garmentforge import synth
from garmentforge.mesh import Mesh, vertex_normals

finite = st.floats(-1.0, 1.0, allow_nan=False)


@pytest.fixture(scope="module")
def two_size_dataset(humanoid):
    return synth.generate(humanoid, synth.SynthConfig(n_subjects=4, sizes_per_subject=2, seed=5,
                                                      holdout_subjects=0.25, holdout_sizes=0.0))


class TestMetrics:
    def test_one_centimetre_shift(self, humanoid):
        v = humanoid.template
        assert E.v_err(v + [0.01, 0, 0], v) == pytest.approx(10.0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(finite, min_size=3, max_size=3))
    def test_translation_error_is_its_length(self, humanoid, t):
        v = humanoid.template
        assert E.v_err(v + np.array(t), v) == pytest.approx(1000 * np.linalg.norm(t), abs=1e-9)

    def test_area_error_of_ten_percent_scale(self, humanoid):
        m = humanoid.mesh()
        assert E.a_err(Mesh(1.1 * m.vertices, m.faces), m) == pytest.approx(21.0)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.2, 3.0))
    def test_area_error_symmetric_in_sign(self, humanoid, s):
        m = humanoid.mesh()
        assert E.a_err(Mesh(s * m.vertices, m.faces), m) == pytest.approx(100 * abs(s * s - 1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.v_err(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_zero_area_truth(self):
        m = Mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            E.a_err(m, m)


class TestReport:
    def test_aggregates_and_csv(self):
        r = E.MetricReport(seed=7)
        r.add("tshirt", "fc", "test_unseen_size", "a", 1.0, 2.0)
        r.add("tshirt", "fc", "test_unseen_subject", "b", 3.0, 4.0)
        assert r.aggregate("tshirt", "fc") == (2.0, 3.0, 2)
        assert r.aggregate("tshirt", "fc", "test_unseen_size") == (1.0, 2.0, 1)
        assert np.isnan(r.aggregate("shorts", "fc")[0])
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert tuple(rows[0]) == E.CSV_COLUMNS
        pooled = [x for x in rows[1:] if x[2] == "test"]
        assert pooled == [["tshirt", "fc", "test", "2.000000", "3.000000", "2", "7"]]
        assert len(r.instances_csv().splitlines()) == 3

    def test_write(self, tmp_path):
        r = E.MetricReport()
        r.add("shorts", "linear", "test_unseen_size", "a", 1.0, 2.0)
        E.write_report(r, tmp_path, "parsing", E.parse_table(r))
        assert {p.name for p in tmp_path.iterdir()} == {"parsing.csv", "parsing_instances.csv", "parsing.txt"}
        assert "shorts" in (tmp_path / "parsing.txt").read_text()


class TestResizingBaselines:
    def test_average_is_half_the_margin_for_two_sizes(self, two_size_dataset):
        ds = two_size_dataset
        margin = E.baseline_error_margin(ds, subjects=sorted({s.subject for s in ds.scans}))
        avg = E.baseline_average_prediction(ds, targets=ds.scans)
        for c in ds.model.garments:
            for rec in margin.select(c):
                a, b = rec.instance.split("->")
                for target in (a, b):
                    half = [r for r in avg.select(c) if r.instance == target]
                    assert half[0].v_err_mm == pytest.approx(rec.v_err_mm / 2, rel=1e-12)

    def test_pairs_share_subject(self, tiny_dataset):
        pairs = E.test_pairs(tiny_dataset)
        test_ids = {s.scan_id for s in tiny_dataset.pool("test")}
        assert pairs
        for p in pairs:
            assert p.source.subject == p.target.subject and p.source.size != p.target.size
            assert p.target.scan_id in test_ids

    def test_margin_only_consecutive(self, tiny_dataset):
        rep = E.baseline_error_margin(tiny_dataset)
        for r in rep.records:
            a, b = r.instance.split("->")
            sa = next(s for s in tiny_dataset.scans if s.scan_id == a)
            sb = next(s for s in tiny_dataset.scans if s.scan_id == b)
            assert sb.size == sa.size + 1 and sa.subject == sb.subject

    def test_linear_scaling_factor_grows_with_size(self, tiny_dataset):
        f = E.fit_linear_scaling(tiny_dataset)
        for c in tiny_dataset.model.garments:
            assert f[(c, 0, 1)] > 1.0 > f[(c, 1, 0)]
            assert f[(c, 0, 0)] == pytest.approx(1.0)

    def test_linear_scaling_beats_identity_on_area(self, tiny_dataset):
        rep = E.baseline_linear_scaling(tiny_dataset, E.fit_linear_scaling(tiny_dataset))
        ident = E.baseline_linear_scaling(tiny_dataset, {})
        for c in tiny_dataset.model.garments:
            assert rep.aggregate(c, "linear_scaling")[1] < ident.aggregate(c, "linear_scaling")[1]


class TestInterpenetration:
    def test_outside_and_inside(self, humanoid):
        body = humanoid.mesh()
        n = vertex_normals(body)
        assert E.interpenetration_fraction(body.vertices + 0.005 * n, body) == 0.0
        assert E.interpenetration_fraction(body.vertices - 0.005 * n, body) == 1.0

    def test_split_of(self, tiny_dataset):
        for name in E.TEST_SPLITS:
            for sid in tiny_dataset.split[name]:
                assert E.split_of(tiny_dataset, sid) == name
        assert E.split_of(tiny_dataset, tiny_dataset.pool("train")[0].scan_id) == "train"


class TestTables:
    def test_resize_table_has_real_scan_rows(self):
        r = E.MetricReport()
        for m in E.RESIZE_METHODS:
            r.add("tshirt", m, "test_unseen_size", "x", 1.0, 2.0)
        text = E.resize_table(r)
        assert "tshirt" in text and "real" in text
        assert text.count("1.00 /  2.00") == len(E.RESIZE_METHODS)

    def test_parse_table_marks_missing(self):
        r = E.MetricReport()
        r.add("shorts", "parsernet", "test_unseen_size", "x", 5.0, 1.0)
        line = E.parse_table(r).splitlines()[2]
        assert line.split()[1:4] == ["-", "-", "5.00"]
