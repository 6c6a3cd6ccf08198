import json

import numpy as np
import pytest

from multiscale_ot import io
from multiscale_ot.cli import main
from multiscale_ot.labeling import LabelSet
from multiscale_ot.measures import DensityMap, DiscreteMeasure
from multiscale_ot.synthetic import U_CLASSES, u_bundle


def write(path, text):
    path.write_text(text)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestReaders:
    def test_points_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = DiscreteMeasure(rng.random((5, 3)), rng.random(5) + 0.1)
        io.write_points(tmp_path / "p.txt", m)
        r = io.read_points(tmp_path / "p.txt")
        np.testing.assert_array_equal(r.points, m.points)
        np.testing.assert_array_equal(r.weights, m.weights)

    def test_points_comments(self, tmp_path):
        p = write(tmp_path / "p.txt", "# header\n\n1 0 0  # first\n2 1 1\n")
        m = io.read_points(p)
        assert m.n == 2 and m.dim == 2 and m.mass == 3.0

    @pytest.mark.parametrize("text,line", [
        ("1 0 0\n1 2\n", 2),
        ("1 0 0\nx 1 1\n", 2),
        ("-1 0 0\n", 1),
        ("1 nan 0\n", 1),
    ])
    def test_points_errors(self, tmp_path, text, line):
        p = write(tmp_path / "bad.txt", text)
        with pytest.raises(io.ParseError) as e:
            io.read_points(p)
        assert e.value.line == line
        assert f"bad.txt:{line}:" in str(e.value)

    def test_fibers_roundtrip(self, tmp_path):
        fibers, _ = u_bundle(2, n_vertices=5)
        io.write_fibers(tmp_path / "f.txt", fibers)
        back = io.read_fibers(tmp_path / "f.txt")
        assert len(back) == len(fibers)
        for f, g in zip(fibers, back):
            np.testing.assert_array_equal(f, g)

    @pytest.mark.parametrize("text,line", [
        ("fiber 3\n0 0 0\n1 1 1\nfiber 2\n", 4),
        ("0 0 0\n", 1),
        ("fiber 1\n0 0 0\n", 1),
        ("fiber 2\n0 0\n", 2),
    ])
    def test_fiber_errors(self, tmp_path, text, line):
        with pytest.raises(io.ParseError) as e:
            io.read_fibers(write(tmp_path / "f.txt", text))
        assert e.value.line == line

    def test_density_roundtrip(self, tmp_path):
        v = np.zeros((3, 2, 2))
        v[1, 0, 1] = 2.5
        v[2, 1, 0] = 0.5
        d = DensityMap(v, voxel_size=1.5, origin=(1.0, 2.0, 3.0))
        io.write_density(tmp_path / "d.txt", d)
        r = io.read_density(tmp_path / "d.txt")
        np.testing.assert_array_equal(r.values, v)
        assert r.voxel_size == 1.5 and tuple(r.origin) == (1.0, 2.0, 3.0)

    def test_density_outside_grid(self, tmp_path):
        p = write(tmp_path / "d.txt", "density 2 2 2 1 0 0 0\n2 0 0 1.0\n")
        with pytest.raises(io.ParseError, match="outside"):
            io.read_density(p)

    def test_labels(self, tmp_path):
        p = write(tmp_path / "l.txt", "1 af\n0 cst\n2 af\n")
        ls = io.read_labels(p, 3)
        assert [ls.names[k] for k in ls.assignments] == ["cst", "af", "af"]
        io.write_labels(tmp_path / "l2.txt", ls)
        ls2 = io.read_labels(tmp_path / "l2.txt", 3)
        assert [ls2.names[k] for k in ls2.assignments] == ["cst", "af", "af"]

    @pytest.mark.parametrize("text,match", [
        ("0 a\n0 b\n", "twice"),
        ("0 a\n", "no label"),
        ("0 OUTLIER\n1 a\n", "reserved"),
        ("5 a\n", "outside"),
    ])
    def test_label_errors(self, tmp_path, text, match):
        with pytest.raises(io.ParseError, match=match):
            io.read_labels(write(tmp_path / "l.txt", text), 2)

    def test_assignments_roundtrip(self, tmp_path):
        lines = io.format_assignments(np.array([0, -1]), np.array([0.9, 0.0]), np.array([1.0, 1e-5]), ("a",))
        p = write(tmp_path / "a.txt", "\n".join(lines) + "\n")
        names, conf, mass = io.read_assignments(p)
        assert names == ["a", "OUTLIER"]
        np.testing.assert_allclose(conf, [0.9, 0.0])
        np.testing.assert_allclose(mass, [1.0, 1e-5])


@pytest.fixture
def diracs(tmp_path):
    return write(tmp_path / "d0.txt", "1 0 0 0\n"), write(tmp_path / "d2.txt", "1 2 0 0\n")


class TestDivergenceCommand:
    def test_dirac_shift(self, capsys, diracs):
        code, out, _ = run(capsys, "divergence", *diracs, "--blur", "0.01", "--format", "json")
        assert code == 0
        rec = json.loads(out)
        assert rec["value"] == pytest.approx(2.0, rel=1e-6)
        assert rec["atoms"] == [1, 1]

    def test_identical(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "p.txt"
        io.write_points(p, DiscreteMeasure(rng.random((50, 3))))
        code, out, _ = run(capsys, "divergence", p, p, "--blur", "0.05", "--format", "json")
        assert code == 0
        assert abs(json.loads(out)["value"]) < 1e-9

    def test_multiscale_flag(self, capsys, tmp_path):
        rng = np.random.default_rng(1)
        pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
        io.write_points(pa, DiscreteMeasure(rng.random((200, 2))))
        io.write_points(pb, DiscreteMeasure(rng.random((200, 2))))
        vals = []
        for k in ("0", "14"):
            code, out, _ = run(capsys, "divergence", pa, pb, "--blur", "0.05", "--clusters", k,
                               "--format", "json")
            assert code == 0
            vals.append(json.loads(out)["value"])
        assert vals[1] == pytest.approx(vals[0], rel=1e-3)

    def test_text_output_file(self, capsys, diracs, tmp_path):
        out = tmp_path / "o.txt"
        code, _, _ = run(capsys, "divergence", *diracs, "--blur", "0.01", "--out", out)
        assert code == 0
        assert out.read_text().startswith("divergence ")

    def test_missing_file(self, capsys, diracs, tmp_path):
        code, _, err = run(capsys, "divergence", diracs[0], tmp_path / "nope.txt", "--blur", "0.1")
        assert code == 3
        assert "nope.txt" in err

    def test_bad_line(self, capsys, diracs, tmp_path):
        bad = write(tmp_path / "bad.txt", "1 0 0 0\n1 zz 0 0\n")
        code, _, err = run(capsys, "divergence", diracs[0], bad, "--blur", "0.1")
        assert code == 3
        assert "bad.txt:2:" in err

    def test_dimension_mismatch(self, capsys, diracs, tmp_path):
        flat = write(tmp_path / "flat.txt", "1 0 0\n")
        code, _, _ = run(capsys, "divergence", diracs[0], flat, "--blur", "0.1")
        assert code == 3

    @pytest.mark.parametrize("flags", [["--blur", "-1"], ["--blur", "0.1", "--p", "3"],
                                       ["--blur", "0.1", "--scaling", "1.5"], []])
    def test_usage_errors(self, capsys, diracs, flags):
        with pytest.raises(SystemExit) as e:
            code = main(["divergence", *map(str, diracs), *flags])
            raise SystemExit(code)
        assert e.value.code == 2


class TestPlanCommand:
    def test_dirac_plan(self, capsys, diracs):
        code, out, _ = run(capsys, "plan", *diracs, "--blur", "0.01")
        assert code == 0
        i, j, m = out.split()
        assert (i, j) == ("0", "0") and float(m) == pytest.approx(1.0, rel=1e-6)

    def test_threshold(self, capsys, tmp_path):
        a = write(tmp_path / "a.txt", "1 0\n1 10\n")
        b = write(tmp_path / "b.txt", "1 0.1\n1 10.1\n")
        code, out, _ = run(capsys, "plan", a, b, "--blur", "0.1", "--format", "json")
        entries = json.loads(out)["entries"]
        assert sorted((i, j) for i, j, _ in entries) == [(0, 0), (1, 1)]


def write_u_files(tmp_path, subject_fibers):
    fa, ca = u_bundle(20, seed=0)
    atlas = tmp_path / "atlas.txt"
    io.write_fibers(atlas, fa)
    io.write_labels(tmp_path / "labels.txt", LabelSet(U_CLASSES, ca))
    subj = tmp_path / "subject.txt"
    io.write_fibers(subj, subject_fibers)
    return subj, atlas, tmp_path / "labels.txt", ca


class TestTransferCommand:
    def test_u_bundle(self, capsys, tmp_path):
        fs, cs = u_bundle(20, seed=1, outlier=True, random_orientation=True)
        subj, atlas, labels, _ = write_u_files(tmp_path, fs)
        code, out, err = run(capsys, "transfer", subj, atlas, labels, "--format", "json")
        assert code == 0
        rec = json.loads(out)
        assert rec["labels"][:-1] == [U_CLASSES[k] for k in cs[:-1]]
        assert rec["labels"][-1] == "OUTLIER"
        assert "OUTLIER 1" in err

    def test_identity(self, capsys, tmp_path):
        fa, ca = u_bundle(20, seed=0)
        subj, atlas, labels, _ = write_u_files(tmp_path, fa)
        out = tmp_path / "assign.txt"
        code, summary, _ = run(capsys, "transfer", subj, atlas, labels, "--out", out)
        assert code == 0
        names, conf, _ = io.read_assignments(out)
        assert names == [U_CLASSES[k] for k in ca]
        assert conf.min() > 0.9
        assert "OUTLIER 0" in summary

    def test_reversed_subject(self, capsys, tmp_path):
        fa, ca = u_bundle(20, seed=0)
        subj, atlas, labels, _ = write_u_files(tmp_path, [f[::-1] for f in fa])
        code, out, _ = run(capsys, "transfer", subj, atlas, labels, "--format", "json")
        assert json.loads(out)["labels"] == [U_CLASSES[k] for k in ca]

    def test_label_count_mismatch(self, capsys, tmp_path):
        fs, _ = u_bundle(2, seed=1)
        subj, atlas, labels, _ = write_u_files(tmp_path, fs)
        write(labels, "0 u_bundle\n")
        code, _, err = run(capsys, "transfer", subj, atlas, labels)
        assert code == 3 and "labels.txt" in err


class TestBarycenterCommand:
    def test_midpoint(self, capsys, diracs, tmp_path):
        out = tmp_path / "bar.txt"
        code, _, _ = run(capsys, "barycenter", *diracs, "--blur", "0.01", "--out", out, "--iterations", "30")
        assert code == 0
        np.testing.assert_allclose(io.read_points(out).points, [[1.0, 0.0, 0.0]], atol=0.01)

    def test_single_input(self, capsys, tmp_path):
        rng = np.random.default_rng(2)
        p = tmp_path / "p.txt"
        m = DiscreteMeasure(rng.random((40, 2)))
        io.write_points(p, m)
        code, out, _ = run(capsys, "barycenter", p, "--blur", "0.05", "--iterations", "5",
                           "--format", "json", "--out", tmp_path / "o.txt")
        assert code == 0
        losses = json.loads(out)["losses"]
        assert losses[0] < 1e-9

    def test_density_zero_iterations(self, capsys, tmp_path):
        v = np.zeros((4, 4, 4))
        v[1, 1, 1] = 1.0
        w = np.zeros((4, 4, 4))
        w[2, 1, 1] = 1.0
        pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
        io.write_density(pa, DensityMap(v))
        io.write_density(pb, DensityMap(w))
        out = tmp_path / "o.txt"
        code, _, _ = run(capsys, "barycenter", pa, pb, "--iterations", "0", "--out", out)
        assert code == 0
        m = io.read_points(out)
        assert m.n == 2 and m.mass == pytest.approx(1.0)


class TestOtherCommands:
    def test_bench(self, capsys):
        code, out, _ = run(capsys, "bench", "--sizes", "300,600", "--blur", "0.05", "--format", "json")
        assert code == 0
        rec = json.loads(out)
        assert rec["linear_memory"]
        for r in rec["rows"]:
            assert r["multiscale_value"] == pytest.approx(r["dense_value"], rel=1e-2)

    def test_bench_bad_sizes(self, capsys):
        code, _, _ = run(capsys, "bench", "--sizes", "0")
        assert code == 2

    def test_verify(self, capsys, tmp_path):
        rng = np.random.default_rng(3)
        pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
        io.write_points(pa, DiscreteMeasure(rng.random((20, 2))))
        io.write_points(pb, DiscreteMeasure(rng.random((20, 2)) + 0.5))
        code, out, _ = run(capsys, "verify", pa, pb, "--blur", "0.001", "--scaling", "0.99",
                           "--format", "json")
        assert code == 0
        assert json.loads(out)["relative_error"] < 1e-2

    def test_verify_needs_balanced(self, capsys, diracs):
        code, _, _ = run(capsys, "verify", *diracs, "--blur", "0.1", "--reach", "1")
        assert code == 2

    def test_cluster(self, capsys, tmp_path):
        rng = np.random.default_rng(4)
        p = tmp_path / "p.txt"
        io.write_points(p, DiscreteMeasure(rng.random((100, 2))))
        out = tmp_path / "c.txt"
        code, _, _ = run(capsys, "cluster", p, "--clusters", "7", "--out", out)
        assert code == 0
        c = io.read_points(out)
        assert c.n == 7 and c.mass == pytest.approx(1.0)
