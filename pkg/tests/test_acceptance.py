"""Acceptance suite: one verdict line per criterion.

The MNIST criteria need the IDX files (``$MORPHDICT_DATA_DIR``); AC5 and
AC8 take minutes and carry the ``slow`` marker.
"""

import math
import time
import warnings

import numpy as np
import pytest
from sklearn.exceptions import ConvergenceWarning

from conftest import record
from morphdict import asymae as ae
from morphdict.cli import main
from morphdict.dataset import load_split
from morphdict.evaluation import dilation_approx_error, mean_code_sparsity, reconstruction_error
from morphdict.morphology import Dictionary, dilate, disk_se, erode, opening
from morphdict.nmf import NmfConfig, factorize
from morphdict.sparsity import hoyer_sigma, project_sparseness


# --- independent oracles -----------------------------------------------------

def naive_dilate(img, offsets):
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            out[y, x] = max(img[y - dy, x - dx] if 0 <= y - dy < h and 0 <= x - dx < w else 0.0
                            for dy, dx in offsets)
    return out


def naive_erode(img, offsets):
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            out[y, x] = min(img[y + dy, x + dx] if 0 <= y + dy < h and 0 <= x + dx < w else 1.0
                            for dy, dx in offsets)
    return out


def sigma_oracle(v):
    p = len(v)
    l1 = sum(abs(t) for t in v)
    l2 = math.sqrt(sum(t * t for t in v))
    return (math.sqrt(p) - l1 / l2) / (math.sqrt(p) - 1)


# --- criteria -----------------------------------------------------------------

def test_ac1_morphology_oracle():
    rng = np.random.default_rng(1)
    imgs = rng.random((200, 16, 16))
    bad = 0
    for r in (0, 1, 1.5, 2):
        se = disk_se(r)
        d, e, o = dilate(imgs, se), erode(imgs, se), opening(imgs, se)
        for i in range(200):
            ref_e = naive_erode(imgs[i], se.offsets)
            bad += not np.array_equal(d[i], naive_dilate(imgs[i], se.offsets))
            bad += not np.array_equal(e[i], ref_e)
            bad += not np.array_equal(o[i], naive_dilate(ref_e, se.offsets))
    assert record("AC1 morphology oracle", bad == 0,
                  f"{bad} mismatches over 200 images x 4 radii x 3 operators (bit-exact)")


def test_ac2_lattice_properties():
    rng = np.random.default_rng(2)
    failures = 0
    for i in range(100):
        se = disk_se([0, 1, 1.5, 2, 3][i % 5])
        x, y = rng.random((2, 16, 16))
        # half the pairs are built so that dilate(x) <= y holds
        if i % 2:
            y = np.maximum(y, dilate(x, se))
        dx, ex = dilate(x, se), erode(x, se)
        failures += bool(np.all(dx <= y)) != bool(np.all(x <= erode(y, se)))
        failures += not (np.all(dx >= x) and np.all(ex <= x))
        failures += not np.array_equal(dilate(np.maximum(x, y), se),
                                       np.maximum(dx, dilate(y, se)))
    assert record("AC2 adjunction/lattice", failures == 0,
                  f"{failures} violations over 100 random pairs (exact)")


def _separated_dictionary(rng, k, radius, size=40):
    """k random blobs on a grid, gaps wider than twice the radius."""
    reach = int(math.ceil(radius))
    cell = 3 + 2 * reach + 1
    per_row = size // cell
    atoms = np.zeros((k, size, size))
    for j in range(k):
        r, c = divmod(j, per_row)
        y, x = r * cell + reach, c * cell + reach
        atoms[j, y:y + 3, x:x + 3] = rng.random((3, 3)) * (rng.random((3, 3)) > 0.3)
    return Dictionary(atoms)


def test_ac3_disjoint_support_commutation():
    rng = np.random.default_rng(3)
    worst = 0.0
    for radius in (1, 1.5, 2):
        for _ in range(10):
            d = _separated_dictionary(rng, 12, radius)
            H = rng.random((8, 12)) * (rng.random((8, 12)) > 0.4)
            # rescale codes so every image stays in [0, 1]
            peak = np.tensordot(H, d.atoms, 1).max(axis=(1, 2))
            H = H / np.maximum(peak, 1.0)[:, None]
            X = np.tensordot(H, d.atoms, 1)
            worst = max(worst, dilation_approx_error(X, H, d, disk_se(radius)))
    assert record("AC3 disjoint-support commutation", worst <= 1e-12,
                  f"max dilation_approx_error {worst:.3e} (tol 1e-12)")


def test_ac4_hoyer():
    rng = np.random.default_rng(4)
    exact = (hoyer_sigma([0, 0, 5.0, 0]) == 1.0 and hoyer_sigma([0.3] * 7) == 0.0)
    worst_sigma = worst_l2 = 0.0
    start = time.perf_counter()
    for _ in range(1000):
        p = int(rng.integers(2, 257))
        v = rng.random(p) * (rng.random(p) > 0.2) + 1e-3 * rng.random(p)
        target = float(rng.uniform(0.05, 1.0))
        out = project_sparseness(v, target)
        assert out.min() >= 0
        worst_sigma = max(worst_sigma, abs(sigma_oracle(out) - target))
        worst_l2 = max(worst_l2, abs(np.linalg.norm(out) / np.linalg.norm(v) - 1))
    ok = exact and worst_sigma <= 1e-6 and worst_l2 <= 1e-9
    assert record("AC4 Hoyer measure/projection", ok,
                  f"exact cases {'ok' if exact else 'WRONG'}; max |sigma-target| "
                  f"{worst_sigma:.2e} (tol 1e-6); max L2 rel. change {worst_l2:.2e} (tol 1e-9); "
                  f"{time.perf_counter() - start:.1f}s")


@pytest.mark.slow
def test_ac5_sparse_nmf_mnist(data_dir):
    X = load_split(data_dir, "test").as_matrix()
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        fac = factorize(X, NmfConfig(k=100, s_H=0.6, max_iter=500, seed=0))
    elapsed = time.perf_counter() - start
    rec = reconstruction_error(X, fac.H @ fac.W)
    spars = mean_code_sparsity(fac.H)
    dil = dilation_approx_error(X, fac.H, Dictionary.from_matrix(fac.W, (28, 28)), disk_se(1))
    monotone = bool(np.all(np.diff(fac.objective_trace) <= 1e-10))
    ok = rec <= 0.015 and spars >= 0.55 and dil <= 0.030 and monotone and elapsed <= 1800
    assert record("AC5 sparse NMF on MNIST", ok,
                  f"rec {rec:.5f} (<=0.015), row sparsity {spars:.4f} (>=0.55), "
                  f"dilation {dil:.5f} (<=0.030), trace monotone={monotone}, "
                  f"{fac.n_iter} iterations in {elapsed:.0f}s (<=1800s)")


def test_ac6_grad_check(capsys):
    start = time.perf_counter()
    codes = {prec: main(["grad-check", "--precision", str(prec)]) for prec in (64, 32)}
    out = capsys.readouterr().out
    elapsed = time.perf_counter() - start
    worst = [line.split()[3] for line in out.splitlines() if line.startswith("worst")]
    ok = codes == {64: 0, 32: 0} and elapsed < 60
    assert record("AC6 AsymAE gradient check", ok,
                  f"64-bit worst {worst[0]} (<=1e-5), 32-bit worst {worst[1]} (<=1e-3), "
                  f"{elapsed:.1f}s")


def test_ac7_decoder_non_negativity(data_dir):
    X = load_split(data_dir, "train").as_matrix()[:1000]
    cfg = ae.AsymAeConfig(epochs=3, early_stop_patience=None, seed=0)
    model = ae.build_model(cfg, (28, 28))
    mins = []

    def check(m, step):
        low = float(m.decoder_weights.min())
        assert low >= 0.0, f"negative decoder weight {low} after step {step}"
        mins.append(low)

    ae.train(model, X, cfg, on_step=check)
    expected_steps = 3 * math.ceil(1000 / cfg.batch_size)
    ok = len(mins) == expected_steps and min(mins) >= 0.0
    assert record("AC7 decoder non-negativity", ok,
                  f"{len(mins)} steps checked in-loop, min weight {min(mins):.3g} (>=0 exactly)")


@pytest.mark.slow
def test_ac8_asymae_desk_scale(data_dir):
    X_train = load_split(data_dir, "train").as_matrix()[:10000]
    X_test = load_split(data_dir, "test").as_matrix()
    cfg = ae.AsymAeConfig(k=100, p=0.05, beta=0.001, epochs=30, early_stop_patience=None, seed=0)
    start = time.perf_counter()
    model, _ = ae.train(ae.build_model(cfg, (28, 28)), X_train, cfg)
    elapsed = time.perf_counter() - start
    H = ae.encode(model, X_test)
    rec = reconstruction_error(X_test, ae.decode(model, H))
    spars = mean_code_sparsity(H)
    ok = rec <= 0.015 and spars >= 0.35 and elapsed <= 7200
    assert record("AC8 AsymAE desk scale", ok,
                  f"test rec {rec:.5f} (<=0.015), code sparsity {spars:.4f} (>=0.35), "
                  f"training {elapsed / 60:.1f} min (<=120)")


def test_ac9_metric_definitions():
    rng = np.random.default_rng(9)
    X = rng.random((10, 64))
    H = rng.random((10, 5)) * (rng.random((10, 5)) > 0.3)
    H[:, 0] += 0.01
    W = rng.random((5, 64)) * 0.3
    R = rng.random((10, 64)) * 1.4 - 0.2
    se = disk_se(1)
    offsets = se.offsets

    def clip(t):
        return min(max(t, 0.0), 1.0)

    rec_ref = sum((X[i, n] - clip(R[i, n])) ** 2 for i in range(10) for n in range(64)) / 640
    sp_ref = sum(sigma_oracle(list(H[i])) for i in range(10)) / 10
    dil_ref = 0.0
    dilated_atoms = [naive_dilate(W[j].reshape(8, 8), offsets) for j in range(5)]
    for i in range(10):
        target = naive_dilate(X[i].reshape(8, 8), offsets)
        for y in range(8):
            for x in range(8):
                approx = sum(H[i, j] * dilated_atoms[j][y, x] for j in range(5))
                dil_ref += (clip(approx) - target[y, x]) ** 2
    dil_ref /= 640
    d = Dictionary.from_matrix(W, (8, 8))
    errs = (abs(reconstruction_error(X, R) - rec_ref),
            abs(mean_code_sparsity(H) - sp_ref),
            abs(dilation_approx_error(X, H, d, se) - dil_ref))
    assert record("AC9 metric definitions", max(errs) <= 1e-12,
                  "abs deviations rec {:.1e}, sparsity {:.1e}, dilation {:.1e} (tol 1e-12)"
                  .format(*errs))


def test_ac10_reproducible_reports(data_dir, tmp_path, capsys):
    runs = {}
    commands = {
        "train-nmf": ["--limit", "1000", "--k", "20", "--max-iter", "60"],
        "train-asymae": ["--limit", "300", "--eval-limit", "300", "--k", "10", "--epochs", "2"],
    }
    for name, extra in commands.items():
        for attempt in (0, 1):
            out = tmp_path / f"{name}-{attempt}"
            code = main([name, "--data-dir", data_dir, "--out", str(out), "--seed", "3",
                         "--workers", "1", *extra])
            assert code == 0
            (report,) = (out / "reports").iterdir()
            runs[name, attempt] = report.read_bytes()
    capsys.readouterr()
    same = [runs[n, 0] == runs[n, 1] for n in commands]
    assert record("AC10 reproducible CSV", all(same),
                  ", ".join(f"{n}: {'identical' if s else 'DIFFERENT'}"
                            for n, s in zip(commands, same)))
