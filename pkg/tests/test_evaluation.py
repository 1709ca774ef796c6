
import numpy as np
import pytest

from morphdict.evaluation import (REPORT_HEADER, MetricsReport, clip01, dilation_approx_error,
                                  emit_report, evaluate, mean_code_sparsity, montage,
                                  parse_report, pgm_bytes, read_pgm, reconstruction_error,
                                  write_montage)
from morphdict.morphology import Dictionary, dilate, disk_se


def test_clip():
    np.testing.assert_array_equal(clip01([1.3, -0.2, 0.4]), [1.0, 0.0, 0.4])


def test_reconstruction_error_cases(rng):
    X = rng.random((4, 9))
    assert reconstruction_error(X, X) == 0.0
    assert reconstruction_error(X, clip01(X)) == 0.0
    assert reconstruction_error(np.zeros((3, 5)), np.full((3, 5), 0.1)) == pytest.approx(0.01)
    # clipping happens before comparison
    assert reconstruction_error(np.ones((1, 2)), np.full((1, 2), 5.0)) == 0.0
    assert reconstruction_error(np.ones((1, 2)), np.full((1, 2), 5.0), clip=False) == 16.0
    with pytest.raises(ValueError):
        reconstruction_error(np.ones((2, 3)), np.ones((2, 4)))


def test_code_sparsity_cases():
    assert mean_code_sparsity(np.eye(4)) == 1.0
    assert mean_code_sparsity(np.full((3, 4), 0.2)) == pytest.approx(0.0, abs=1e-15)
    H = np.array([[1.0, 0, 0], [0, 0, 0], [1, 1, 1]])
    with pytest.warns(RuntimeWarning, match="1 all-zero"):
        assert mean_code_sparsity(H) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        mean_code_sparsity(np.zeros((2, 3)))


def _disjoint_case():
    atoms = np.zeros((3, 10, 10))
    atoms[0, 1:3, 1:3] = [[0.2, 0.9], [0.5, 0.1]]
    atoms[1, 6:8, 1:4] = 0.6
    atoms[2, 2:4, 6:9] = [[0.3, 0.0, 0.7], [0.8, 0.4, 0.2]]
    H = np.array([[1.0, 0.5, 0.0], [0.3, 1.2, 0.9], [0.0, 0.0, 1.1]])
    X = np.tensordot(H, atoms, 1)
    return X, H, Dictionary(atoms)


def test_disjoint_construction_is_exact():
    X, H, d = _disjoint_case()
    assert dilation_approx_error(X, H, d, disk_se(1)) <= 1e-12


def test_zero_codes(rng):
    X = rng.random((2, 6, 6))
    d = Dictionary(rng.random((3, 6, 6)))
    se = disk_se(1)
    expected = np.mean(dilate(X, se) ** 2)
    assert dilation_approx_error(X, np.zeros((2, 3)), d, se) == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        dilation_approx_error(X, np.zeros((3, 3)), d, se)


def test_workers_do_not_change_result(rng):
    X = rng.random((9, 8, 8))
    H = rng.random((9, 4))
    d = Dictionary(rng.random((4, 8, 8)) * 0.3)
    se = disk_se(1.5)
    base = dilation_approx_error(X, H, d, se)
    assert dilation_approx_error(X, H, d, se, workers=4) == base


def test_metrics_are_permutation_invariant(rng):
    X = rng.random((10, 64))
    H = rng.random((10, 5))
    d = Dictionary(rng.random((5, 8, 8)) * 0.2)
    perm = rng.permutation(10)
    R = H @ d.as_matrix()
    a = evaluate("m", "s", X, H, R, d, disk_se(1))
    b = evaluate("m", "s", X[perm], H[perm], R[perm], d, disk_se(1))
    assert a.reconstruction_error == pytest.approx(b.reconstruction_error, rel=1e-14)
    assert a.mean_code_sparsity == pytest.approx(b.mean_code_sparsity, rel=1e-14)
    assert a.dilation_approx_error == pytest.approx(b.dilation_approx_error, rel=1e-14)


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport("m", "d", 3, -1.0, 0.5, 0.1)
    with pytest.raises(ValueError):
        MetricsReport("m", "d", 3, 0.1, 1.5, 0.1)


class TestCsv:
    def test_header_only(self):
        assert emit_report([]) == ",".join(REPORT_HEADER) + "\n"

    def test_one_row(self):
        text = emit_report([MetricsReport("sparse-nmf", "mnist", 100, 0.0108581234, 0.66, 0.0125)])
        lines = text.splitlines()
        assert len(lines) == 2
        assert lines[1] == "sparse-nmf,mnist,100,0.0108581,0.66,0.0125"

    def test_round_trip(self, rng):
        reps = [MetricsReport(f"m{i}", "d", i + 1, *map(float, rng.random(3))) for i in range(4)]
        text = emit_report(reps)
        back = parse_report(text)
        assert emit_report(back) == text
        for r, b in zip(reps, back):
            assert b.reconstruction_error == pytest.approx(r.reconstruction_error, rel=5e-6)
            assert b.k == r.k

    def test_bad_header(self):
        with pytest.raises(ValueError):
            parse_report("a,b\n")


class TestMontage:
    def test_single_image_no_separators(self, rng):
        img = rng.random((5, 4))
        grid = montage(img[None], cols=3)
        assert grid.shape == (5, 4)
        assert grid.min() == 0.0 and grid.max() == 1.0

    def test_grid_geometry(self, rng):
        grid = montage(rng.random((16, 6, 6)), cols=4)
        assert grid.shape == (4 * 6 + 3, 4 * 6 + 3)
        assert np.all(grid[6, :] == 0.5) and np.all(grid[:, 13] == 0.5)
        assert montage(rng.random((5, 3, 3)), cols=1).shape == (5 * 3 + 4, 3)

    def test_constant_tile_is_mid_grey(self):
        grid = montage(np.full((2, 3, 3), 0.9), cols=2)
        assert np.all(grid == 0.5)

    def test_raw_scale(self):
        grid = montage(np.full((1, 2, 2), 1.7), cols=1, normalize=False)
        assert np.all(grid == 1.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            montage(np.zeros((0, 3, 3)), 2)
        with pytest.raises(ValueError):
            montage(np.zeros((2, 3, 3)), 0)

    def test_pgm_bytes(self, tmp_path, rng):
        img = rng.random((7, 9))
        raw = pgm_bytes(img)
        assert raw.startswith(b"P5\n9 7\n255\n") and len(raw) == 11 + 63
        np.testing.assert_allclose(read_pgm(raw), np.rint(img * 255) / 255)
        path = tmp_path / "m.pgm"
        data = write_montage(rng.random((4, 3, 3)), 2, path)
        assert path.read_bytes() == data
        assert read_pgm(data).shape == (7, 7)


def test_pgm_survives_whitespace_pixels():
    img = np.array([[10, 32, 9], [13, 0, 255]]) / 255.0
    np.testing.assert_allclose(read_pgm(pgm_bytes(img)), img)


def test_single_atom_codes_are_fully_sparse():
    assert mean_code_sparsity(np.array([[0.3], [2.0]])) == 1.0
