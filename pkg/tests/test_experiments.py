import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logit_invert import experiments as ex

finite = st.floats(-100, 100, allow_nan=False)


class MeanClassifier:
    """Toy classifier whose every logit is the image mean: ``mean(x) * 1``."""

    def __init__(self, n_classes=3):
        self.n_classes = n_classes

    def decision_function(self, X):
        m = np.asarray(X, dtype=np.float64).reshape(len(X), -1).mean(axis=1)
        return np.repeat(m[:, None], self.n_classes, axis=1)


class LinearClassifier:
    """Linear logits ``W x + b`` exposed both as a torch module and as an estimator."""

    def __init__(self, W, b):
        self.module_ = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(W.shape[1], W.shape[0]))
        with torch.no_grad():
            self.module_[1].weight.copy_(torch.as_tensor(W))
            self.module_[1].bias.copy_(torch.as_tensor(b))
        self.module_.double()
        self.W, self.b = W, b

    def decision_function(self, X):
        return np.asarray(X, dtype=np.float64).reshape(len(X), -1) @ self.W.T + self.b


class ToyGenerator:
    """Deterministic ``(z, noise) -> image`` map for 4x4 single-channel images."""

    n_z = 5

    def __init__(self, n_classes=3, seed=0):
        rng = np.random.default_rng(seed)
        self.A = rng.normal(size=(n_classes, 16))
        self.B = rng.normal(size=(self.n_z, 16))

    def __call__(self, z, noise):
        h = np.asarray(z) @ self.A + 0.1 * np.asarray(noise, dtype=np.float64) @ self.B
        return np.tanh(h).reshape(-1, 4, 4, 1).astype(np.float32)


# --- logit-space operations ---------------------------------------------------


def test_shift_examples_and_softmax_invariance(rng):
    z = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ex.logit_shift(z, 0.0), z)
    np.testing.assert_array_equal(ex.logit_shift(z, 0.5), [1.5, 2.5, 3.5])
    for _ in range(100):
        z = rng.normal(size=10) * 5
        c = rng.uniform(-3, 3)
        assert np.abs(ex.softmax(ex.logit_shift(z, c)) - ex.softmax(z)).max() <= 1e-12


def test_scale_examples():
    z = np.array([1.0, 2.0])
    np.testing.assert_array_equal(ex.logit_scale(z, 1.0), z)
    np.testing.assert_array_equal(ex.logit_scale(z, 2.0), [2.0, 4.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite, unique=True), st.floats(1e-3, 1e3))
def test_scale_preserves_argmax(z, s):
    assert np.argmax(ex.logit_scale(z, s)) == np.argmax(z)


def test_reference_manipulation_values():
    assert ex.SHIFT_VALUES["robust"] == (-0.30, -0.15, 0.0, 0.15, 0.30)
    assert ex.SHIFT_VALUES["standard"] == (-0.1, -0.05, 0.0, 0.05, 0.1)
    np.testing.assert_allclose(np.log10(ex.SCALE_FACTORS), [-0.3, -0.15, 0.0, 0.15, 0.3], atol=1e-15)
    assert ex.PERTURB_SIGMA_SQ == 0.55


def test_perturb_identity_and_determinism():
    z = np.arange(4.0)
    np.testing.assert_array_equal(ex.logit_perturb(z, 0.0, 1), z)
    np.testing.assert_array_equal(ex.logit_perturb(z, 0.55, 7), ex.logit_perturb(z, 0.55, 7))
    with pytest.raises(ValueError):
        ex.logit_perturb(z, -1.0, 0)


def test_perturb_noise_statistics():
    eta = ex.logit_perturb(np.zeros(10_000), 0.55, 3)
    sigma = math.sqrt(0.55)
    assert abs(eta.mean()) <= 4 * sigma / math.sqrt(10_000)
    assert abs(eta.var() - 0.55) / 0.55 < 0.05


def test_interpolate_examples():
    a, b = np.array([0.0, 2.0]), np.array([2.0, 0.0])
    np.testing.assert_array_equal(ex.logit_interpolate(a, b, 0.0), a)
    np.testing.assert_array_equal(ex.logit_interpolate(a, b, 1.0), b)
    np.testing.assert_array_equal(ex.logit_interpolate(a, b, 0.5), [1.0, 1.0])
    with pytest.raises(ValueError):
        ex.logit_interpolate(a, b, 1.5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
@example(np.full(5, -0.0), np.zeros(5))
def test_interpolation_endpoints_are_exact(a, b):
    assert ex.logit_interpolate(a, b, 0.0).tobytes() == a.tobytes()
    assert ex.logit_interpolate(a, b, 1.0).tobytes() == b.tobytes()


def test_manipulation_spec_validation():
    with pytest.raises(ValueError):
        ex.ManipulationSpec("rotate")
    with pytest.raises(ValueError):
        ex.ManipulationSpec("shift", (0.1,), hold_noise=False)
    with pytest.raises(ValueError):
        ex.ManipulationSpec("interpolate", (1.2,))
    with pytest.warns(UserWarning):
        ex.ManipulationSpec("scale", (-1.0,))


# --- best fits ------------------------------------------------------------------


def test_best_fit_examples(rng):
    z = rng.normal(size=10)
    assert ex.best_fit_shift(z, z) == 0.0
    assert abs(ex.best_fit_shift(z, z - 3) - 3) < 1e-12
    assert ex.best_fit_scale(z, z) == 1.0
    assert abs(ex.best_fit_scale(z, z / 2) - 2) < 1e-12
    with pytest.raises(ValueError):
        ex.best_fit_scale(z, np.zeros(10))
    with pytest.raises(ValueError):
        ex.best_fit_shift(z, z[:3])


def test_best_fits_match_grid_search(rng):
    grid = np.round(np.arange(-10, 10 + 1e-9, 1e-3), 3)
    for _ in range(5):
        z_orig, z_adj = rng.normal(size=8) * 2, rng.normal(size=8) * 2 + rng.uniform(-5, 5)
        sse = ((z_orig[None] - z_adj[None] - grid[:, None]) ** 2).sum(1)
        assert abs(ex.best_fit_shift(z_orig, z_adj) - grid[sse.argmin()]) <= 1e-3
        sse = ((z_orig[None] - grid[:, None] * z_adj[None]) ** 2).sum(1)
        assert abs(ex.best_fit_scale(z_orig, z_adj) - grid[sse.argmin()]) <= 1e-3


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-10, 10)), st.floats(-5, 5), st.floats(0.1, 10))
def test_fits_invert_synthetic_transforms(z, c, s):
    assert abs(ex.best_fit_shift(z, z - c) - c) < 1e-10
    if np.abs(z).max() > 1e-3:
        assert abs(ex.best_fit_scale(z, z / s) - s) < 1e-10 * max(1.0, s)


# --- class spread -----------------------------------------------------------------


def naive_spread(sets):
    per = {}
    for label, Z in sets.items():
        n, d = len(Z), len(Z[0])
        mean = [sum(Z[i][j] for i in range(n)) / n for j in range(d)]
        per[label] = sum(math.sqrt(sum((Z[i][j] - mean[j]) ** 2 for j in range(d))) for i in range(n)) / n
    return per, sum(per.values()) / len(per)


def test_class_spread_examples():
    assert ex.class_spread({0: np.ones((4, 3))}) == ({0: 0.0}, 0.0)
    per, overall = ex.class_spread({0: np.array([[1.0], [-1.0]])})
    assert per[0] == 1.0 and overall == 1.0


def test_class_spread_matches_naive_loops(rng):
    sets = {c: rng.normal(size=(rng.integers(2, 9), 5)) * 3 for c in range(4)}
    per, overall = ex.class_spread(sets)
    ref_per, ref_overall = naive_spread({c: Z.tolist() for c, Z in sets.items()})
    for c in sets:
        assert abs(per[c] - ref_per[c]) < 1e-10
    assert abs(overall - ref_overall) < 1e-10


def test_class_spread_excludes_singletons():
    with pytest.warns(UserWarning):
        per, _ = ex.class_spread({0: np.zeros((1, 2)), 1: np.array([[1.0, 0], [-1.0, 0]])})
    assert list(per) == [1]
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ex.class_spread({0: np.zeros((1, 2))})


def test_group_by_class_seeded_subset(rng):
    z = rng.normal(size=(30, 3))
    labels = np.arange(30) % 6
    a = ex.group_by_class(z, labels, 3, seed=1)
    assert a.keys() == ex.group_by_class(z, labels, 3, seed=1).keys()
    assert len(a) == 3
    for c, Z in a.items():
        np.testing.assert_array_equal(Z, z[labels == c])


# --- stability ------------------------------------------------------------------------


def test_agreement_fraction_example():
    assert ex.agreement_fraction([1, 1, 2], [1, 2, 2]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        ex.agreement_fraction([], [])


def linear_setup(rng, n=40):
    W = rng.normal(size=(3, 16))
    clf = LinearClassifier(W, rng.normal(size=3))
    X = rng.uniform(-1, 1, (n, 4, 4, 1)).astype(np.float32)
    y = rng.integers(0, 3, n)
    return clf, X, y


def test_ideal_inverter_is_perfectly_stable(rng):
    clf, X, y = linear_setup(rng)
    Z = clf.decision_function(X)

    class Lookup:
        n_z = 2

        def __call__(self, z, noise):
            idx = [int(np.argmin(np.abs(Z - row).sum(1))) for row in z]
            return X[idx]

    for part in ("correct", "incorrect"):
        assert ex.iterative_stability(clf, Lookup(), X, y, part).fraction == 1.0


def test_constant_generator_reduces_to_class_frequency(rng):
    clf, X, y = linear_setup(rng)
    const = X[0]

    class Constant:
        n_z = 2

        def __call__(self, z, noise):
            return np.repeat(const[None], len(z), axis=0)

    res = ex.iterative_stability(clf, Constant(), X, y, "correct")
    c = np.argmax(clf.decision_function(const[None])[0])
    pred = np.argmax(clf.decision_function(X), 1)
    keep = pred == y
    assert res.fraction == pytest.approx(np.mean(pred[keep] == c), abs=1e-12)


def test_stability_matches_naive_loop(rng):
    clf, X, y = linear_setup(rng)
    gen = ToyGenerator()
    res = ex.iterative_stability(clf, gen, X, y, "correct", seed=4, batch_size=7)
    noise = ex.sample_noise(len(X), gen.n_z, 4)
    hits = total = 0
    for i in range(len(X)):
        z = clf.decision_function(X[i : i + 1])
        p = int(np.argmax(z[0]))
        if p != y[i]:
            continue
        total += 1
        recon = gen(z, noise[i : i + 1])
        hits += int(np.argmax(clf.decision_function(recon)[0])) == p
    assert abs(res.fraction - hits / total) < 1e-10


def test_stability_empty_partition(rng):
    clf, X, _ = linear_setup(rng)
    pred = np.argmax(clf.decision_function(X), 1)
    with pytest.raises(ValueError):
        ex.iterative_stability(clf, ToyGenerator(), X, pred, "incorrect")
    with pytest.raises(ValueError):
        ex.iterative_stability(clf, ToyGenerator(), X, pred, "both")


# --- grids ------------------------------------------------------------------------------


def test_manipulate_grid_holds_noise(rng):
    clf, X, _ = linear_setup(rng, 3)
    gen = ToyGenerator()
    spec = ex.ManipulationSpec("shift", ex.SHIFT_VALUES["robust"], seed=2)
    grid = ex.manipulate(clf, gen, X, spec)
    assert (grid.rows, grid.cols) == (3, 5)
    z = clf.decision_function(X)
    noise = ex.sample_noise(3, gen.n_z, 2)
    for i in range(3):
        for j, c in enumerate(spec.values):
            np.testing.assert_array_equal(grid.tile(i, j), gen(z[i : i + 1] + c, noise[i : i + 1])[0])
    perturbed = ex.manipulate(clf, gen, X, ex.ManipulationSpec("perturb", draws=4, seed=2))
    assert (perturbed.rows, perturbed.cols) == (3, 4)
    again = ex.manipulate(clf, gen, X, ex.ManipulationSpec("perturb", draws=4, seed=2))
    assert all(np.array_equal(a, b) for a, b in zip(perturbed.tiles, again.tiles))


def test_logit_interpolation_endpoints_match_direct_generation(tiny_inverter, tiny_classifier, toy_data):
    X, _ = toy_data
    grid = ex.interpolate_logits(tiny_classifier, tiny_inverter, X[0], X[1], 5, seed=3)
    z = tiny_classifier.decision_function(X[:2])
    noise = ex.sample_noise(1, tiny_inverter.n_z, 3)
    assert grid.tiles[0].tobytes() == tiny_inverter.generate(z[:1], noise)[0].tobytes()
    assert grid.tiles[-1].tobytes() == tiny_inverter.generate(z[1:], noise)[0].tobytes()
    with pytest.raises(ValueError):
        ex.interpolate_logits(tiny_classifier, tiny_inverter, X[0], X[1], 1)


def test_noise_interpolation(tiny_inverter):
    z = np.array([[1.0, -2.0, 0.5]])
    a, b = ex.sample_noise(1, tiny_inverter.n_z, 0), ex.sample_noise(1, tiny_inverter.n_z, 1)
    grid = ex.noise_interpolate(tiny_inverter, z, a, b, 6)
    assert grid.tiles[0].tobytes() == tiny_inverter.generate(z, a)[0].tobytes()
    assert grid.tiles[-1].tobytes() == tiny_inverter.generate(z, b)[0].tobytes()
    flat = ex.noise_interpolate(tiny_inverter, z, a, a, 4)
    assert all(t.tobytes() == flat.tiles[0].tobytes() for t in flat.tiles)
    assert len(ex.noise_interpolate(tiny_inverter, z, a, b, 2).tiles) == 2
    with pytest.raises(ValueError):
        ex.noise_interpolate(tiny_inverter, z, a, b, 1)


def test_resample_grid_layout_and_determinism(tiny_inverter, tiny_classifier, toy_data):
    X, _ = toy_data
    grid = ex.resample_grid(tiny_classifier, tiny_inverter, X[3], 8, seed=5)
    assert (grid.rows, grid.cols) == (3, 3)
    np.testing.assert_array_equal(grid.tiles[0], X[3])
    assert all(t.shape == (16, 16, 1) for t in grid.tiles)
    again = ex.resample_grid(tiny_classifier, tiny_inverter, X[3], 8, seed=5)
    assert all(np.array_equal(a, b) for a, b in zip(grid.tiles, again.tiles))
    assert (ex.resample_grid(tiny_classifier, tiny_inverter, X[3], 4).rows,) == (1,)
    with pytest.raises(ValueError):
        ex.resample_grid(tiny_classifier, tiny_inverter, X[3], 0)


def test_grid_artifact_validation():
    with pytest.raises(ValueError):
        ex.GridArtifact([np.zeros((2, 2, 1))] * 3, 2, 2)
    with pytest.raises(ValueError):
        ex.GridArtifact([np.zeros((2, 2, 1)), np.zeros((3, 3, 1))], 1, 2)


# --- image transforms and sweeps ----------------------------------------------------------


def test_brightness_examples(rng):
    X = rng.uniform(-1, 1, (3, 4, 4, 1))
    np.testing.assert_allclose(ex.brightness_adjust(X, 1.0), X, atol=1e-15)
    np.testing.assert_array_equal(ex.brightness_adjust(X, 0.0), -np.ones_like(X))
    np.testing.assert_array_equal(ex.brightness_adjust(np.zeros((1, 2, 2, 1)), 2.0), np.ones((1, 2, 2, 1)))
    with pytest.raises(ValueError):
        ex.brightness_adjust(X, -0.5)


def naive_blur(x):
    n, h, w, c = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    acc = 0.0
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            acc += x[b, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1), k]
                    out[b, i, j, k] = acc / 9
    return out


def test_sharpness_examples(rng):
    X = rng.uniform(-1, 1, (2, 5, 5, 2)).astype(np.float32)
    assert ex.sharpness_adjust(X, 1.0).tobytes() == X.tobytes()
    X64 = X.astype(np.float64)
    np.testing.assert_allclose(ex.sharpness_adjust(X64, 0.0), naive_blur(X64), atol=1e-12)
    const = np.full((1, 5, 5, 1), 0.3)
    for f in (0.0, 0.5, 2.0):
        np.testing.assert_allclose(ex.sharpness_adjust(const, f), const, atol=1e-15)
    assert ex.sharpness_adjust(X, 5.0).max() <= 1


def test_sweep_identity_row_and_shape(tiny_classifier, toy_data):
    X, _ = toy_data
    factors = (0.9, 0.95, 1.0, 1.05, 1.1)
    for transform in ("brightness", "sharpness"):
        rows = ex.shift_scale_sweep(tiny_classifier, X[:10], transform, factors)
        assert [r[0] for r in rows] == list(factors)
        f, shift, scale = rows[2]
        assert abs(shift) < 1e-6 and abs(scale - 1) < 1e-6
    with pytest.raises(ValueError):
        ex.shift_scale_sweep(tiny_classifier, X[:10], "brightness", (0.9, 1.1))


def test_sweep_on_mean_classifier_recovers_analytic_shift(rng):
    # Without clipping, brightness f maps x -> f (x + 1) - 1, so each logit
    # moves by (f - 1)(mean x + 1) and the fitted shift is (1 - f)(mean x + 1).
    # Images are float32, so pixels carry ~1e-7 rounding.
    X = rng.uniform(-1, 0, (6, 4, 4, 1)).astype(np.float32)
    K = X.astype(np.float64).reshape(6, -1).mean(1).mean() + 1
    rows = ex.shift_scale_sweep(MeanClassifier(), X, "brightness", (0.5, 0.8, 1.0, 1.5, 2.0))
    for f, shift, _ in rows:
        assert abs(shift - (1 - f) * K) < 1e-6


def test_sweep_matches_naive_loop(rng):
    clf, X, _ = linear_setup(rng, 5)
    factors = (0.8, 1.0, 1.3)
    rows = ex.shift_scale_sweep(clf, X, "sharpness", factors)
    ref = clf.decision_function(ex.sharpness_adjust(X, 1.0))
    for (f, shift, scale) in rows:
        adj = clf.decision_function(ex.sharpness_adjust(X, f))
        shifts, scales = [], []
        for a, b in zip(ref, adj):
            shifts.append(sum(a[j] - b[j] for j in range(3)) / 3)
            scales.append(sum(a[j] * b[j] for j in range(3)) / sum(b[j] ** 2 for j in range(3)))
        assert abs(shift - sum(shifts) / 5) < 1e-10
        assert abs(scale - sum(scales) / 5) < 1e-10


# --- rotation -------------------------------------------------------------------------------


def test_rotation_group(rng):
    X = rng.uniform(-1, 1, (2, 6, 6, 1))
    assert ex.rotate90(X, 4).tobytes() == X.tobytes()
    assert ex.rotate90(ex.rotate90(X), -1).tobytes() == X.tobytes()
    with pytest.raises(ValueError):
        ex.rotate90(np.zeros((1, 4, 6, 1)))


def test_rotation_study_layout(tiny_inverter, tiny_classifier, toy_data):
    X, _ = toy_data
    grid = ex.rotation_study(tiny_classifier, tiny_inverter, X[:3])
    assert (grid.rows, grid.cols) == (3, 3)
    np.testing.assert_array_equal(grid.tile(1, 0), X[1])


# --- perceptual distance ----------------------------------------------------------------------


def test_perceptual_distance_pseudometric(tiny_classifier, toy_data, rng):
    X, _ = toy_data
    Y = np.clip(X[:6] + rng.normal(0, 0.3, X[:6].shape), -1, 1).astype(np.float32)
    assert ex.perceptual_distance(tiny_classifier, X[:6], X[:6]) == 0.0
    d_xy = ex.perceptual_distances(tiny_classifier, X[:6], Y)
    d_yx = ex.perceptual_distances(tiny_classifier, Y, X[:6])
    assert np.all(d_xy >= 0)
    assert np.abs(d_xy - d_yx).max() <= 1e-12
    with pytest.raises(ValueError):
        ex.perceptual_distance(tiny_classifier, X[:2], X[:3])


def test_perceptual_distance_matches_naive_loop(tiny_classifier, toy_data, rng):
    X, _ = toy_data
    Y = np.clip(X[:2] + rng.normal(0, 0.3, X[:2].shape), -1, 1).astype(np.float32)
    for n in range(2):
        fa = tiny_classifier.features(X[n : n + 1])
        fb = tiny_classifier.features(Y[n : n + 1])
        per_tap = []
        for tap in fa:
            a = fa[tap][0].double().numpy()
            b = fb[tap][0].double().numpy()
            C, H, W = a.shape
            acc = 0.0
            for i in range(H):
                for j in range(W):
                    na = math.sqrt(sum(a[c, i, j] ** 2 for c in range(C))) + 1e-10
                    nb = math.sqrt(sum(b[c, i, j] ** 2 for c in range(C))) + 1e-10
                    acc += sum((a[c, i, j] / na - b[c, i, j] / nb) ** 2 for c in range(C))
            per_tap.append(acc / (H * W))
        got = ex.perceptual_distances(tiny_classifier, X[n : n + 1], Y[n : n + 1])[0]
        assert abs(got - sum(per_tap) / len(per_tap)) < 1e-10


# --- studies ------------------------------------------------------------------------------------


def test_ood_reconstruct_layout_and_degenerate_case(tiny_inverter, tiny_classifier, toy_data):
    X, _ = toy_data
    pipes = {"robust": (tiny_classifier, tiny_inverter), "standard": (tiny_classifier, tiny_inverter)}
    grid, summary, dist = ex.ood_reconstruct(tiny_classifier, pipes, X[:4], seed=2)
    assert (grid.rows, grid.cols) == (4, 3)
    noise = ex.sample_noise(4, tiny_inverter.n_z, 2)
    recon = np.stack([tiny_inverter.generate(tiny_classifier.decision_function(X[i : i + 1]),
                                             noise[i : i + 1])[0] for i in range(4)])
    direct = ex.perceptual_distances(tiny_classifier, X[:4], recon)
    assert np.abs(dist["robust"] - direct).max() <= 1e-6
    assert summary["robust"] == summary["standard"]


def test_adversarial_study_filter_and_budget(tiny_inverter, tiny_classifier, toy_data):
    X, y = toy_data
    grid = ex.adversarial_reconstruction_study(tiny_classifier, tiny_classifier, tiny_inverter,
                                               tiny_inverter, X[:30], y[:30], 0.5)
    assert grid.cols == 8 and grid.rows == len(grid.meta["kept"])
    for cap in grid.captions:
        assert cap["predicted"] != cap["attacked"]
    assert all(v <= 0.5 for v in grid.meta["linf"].values())
    with pytest.raises(ValueError):
        ex.adversarial_reconstruction_study(tiny_classifier, tiny_classifier, tiny_inverter,
                                            tiny_inverter, X[:5], y[:5], 0.0)


def test_adversarial_study_saturates_on_a_linear_model(rng):
    # With W = [w, -w] and b = 0 the margin is 2 w.x; the corner the attack
    # reaches at eps = 2 flips every prediction.
    w = rng.normal(size=16)
    clf = LinearClassifier(np.stack([w, -w]), np.zeros(2))
    X = rng.uniform(-1, 1, (12, 4, 4, 1))
    y = np.argmax(clf.decision_function(X), 1)
    grid = ex.adversarial_reconstruction_study(clf, clf, ToyGenerator(2), ToyGenerator(2), X, y, 2.0)
    assert grid.rows == 12
