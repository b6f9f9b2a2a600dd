"""Analyses over frozen classifier/inverter pairs.

Every procedure here is pure given its seed: models are only evaluated,
never updated. A *generator* argument is either a fitted
:class:`~logit_invert.trainer.LogitInverter` or any callable
``(z, noise) -> images``. A *classifier* needs ``decision_function``;
perceptual distances also need ``features``.

Grids are evaluated one tile at a time so that a tile never depends on
which other tiles share its batch.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_images, check_logits
from .attacks import fgsm
from .classifier import predict_from_logits

# Reference manipulation values.
SHIFT_VALUES = {
    "robust": (-0.30, -0.15, 0.0, 0.15, 0.30),
    "standard": (-0.1, -0.05, 0.0, 0.05, 0.1),
}
SCALE_FACTORS = tuple(10.0**p for p in (-0.3, -0.15, 0.0, 0.15, 0.3))
PERTURB_SIGMA_SQ = 0.55

# ImageNet-scale anchors; orderings only, not desk-scale comparable.
REFERENCE = {
    "class_spread": {"standard": 42.33, "robust": 43.78},
    "stability": {
        "robust": {"correct": 0.54, "incorrect": 0.35},
        "standard": {"correct": 0.493, "incorrect": 0.299},
    },
    "perceptual_distance": {"robust": 0.3138, "standard": 0.3755, "inception": 0.3881},
}


@dataclass
class ManipulationSpec:
    kind: str
    values: tuple = ()
    sigma_sq: float = PERTURB_SIGMA_SQ
    draws: int = 5
    seed: int = 0
    hold_noise: bool = True

    def __post_init__(self):
        if self.kind not in ("shift", "scale", "perturb", "interpolate"):
            raise ValueError(f"unknown manipulation {self.kind!r}")
        if not self.hold_noise:
            raise ValueError("logit manipulations always hold the generator noise fixed")
        self.values = tuple(float(v) for v in self.values)
        if self.kind == "scale" and any(v <= 0 for v in self.values):
            warnings.warn("non-positive scale factors fall outside the reference protocol")
        if self.kind == "interpolate" and any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("interpolation weights must lie in [0, 1]")
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be non-negative")
        if self.kind == "perturb" and self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass
class GridArtifact:
    """Row-major image tiles with per-tile provenance."""

    tiles: list
    rows: int
    cols: int
    captions: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rows * self.cols != len(self.tiles):
            raise ValueError(f"{self.rows}x{self.cols} grid cannot hold {len(self.tiles)} tiles")
        shapes = {np.shape(t) for t in self.tiles}
        if len(shapes) > 1:
            raise ValueError(f"tiles have mixed geometry: {sorted(shapes)}")
        if self.captions and len(self.captions) != len(self.tiles):
            raise ValueError("one caption per tile")

    def tile(self, r, c):
        return self.tiles[r * self.cols + c]


# --- logit-space operations -------------------------------------------------


def logit_shift(z, c):
    return np.asarray(z, dtype=np.float64) + c


def logit_scale(z, s):
    return np.asarray(z, dtype=np.float64) * s


def logit_perturb(z, sigma_sq, rng):
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    rng = np.random.default_rng(rng)
    if sigma_sq == 0:
        return z.copy()
    return z + rng.normal(0.0, math.sqrt(sigma_sq), size=z.shape)


def logit_interpolate(z_a, z_b, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    # Endpoints are copied: the blend turns -0.0 into +0.0.
    if t == 0.0:
        return z_a.copy()
    if t == 1.0:
        return z_b.copy()
    return (1.0 - t) * z_a + t * z_b


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def best_fit_shift(z_orig, z_adj):
    """Least-squares ``c`` in ``z_orig = z_adj + c``."""
    z_orig, z_adj = _pair(z_orig, z_adj)
    return float(np.mean(z_orig - z_adj))


def best_fit_scale(z_orig, z_adj):
    """Least-squares ``s`` in ``z_orig = s * z_adj``."""
    z_orig, z_adj = _pair(z_orig, z_adj)
    denom = float(np.dot(z_adj, z_adj))
    if denom == 0.0:
        raise ValueError("cannot fit a scale to an all-zero logit vector")
    return float(np.dot(z_adj, z_orig)) / denom


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def class_spread(logit_sets):
    """Mean L2 distance to the class mean, per class and averaged over classes.

    ``logit_sets`` maps a class label to an (n, n_c) array. Classes with
    fewer than two vectors are skipped with a warning.
    """
    per_class = {}
    for label, Z in logit_sets.items():
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] < 2:
            warnings.warn(f"class {label!r} has fewer than 2 logit vectors; excluded")
            continue
        per_class[label] = float(np.linalg.norm(Z - Z.mean(axis=0), axis=1).mean())
    if not per_class:
        raise ValueError("no class has at least 2 logit vectors")
    return per_class, float(np.mean(list(per_class.values())))


def group_by_class(z, labels, n_classes_sample=None, seed=0):
    """Split logits by label, optionally keeping a seeded random subset of classes."""
    z = check_logits(z)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if n_classes_sample is not None and n_classes_sample < len(classes):
        classes = np.sort(np.random.default_rng(seed).choice(classes, n_classes_sample, replace=False))
    return {int(c): z[labels == c] for c in classes}


# --- generation helpers ------------------------------------------------------


def sample_noise(n, n_z, seed):
    return np.random.default_rng(seed).standard_normal((n, n_z)).astype(np.float32)


def _n_z(generator):
    n_z = getattr(generator, "n_z", None)
    if n_z is None:
        raise ValueError("generator must expose n_z")
    return n_z


def _generate(generator, z, noise):
    z = check_logits(z)
    noise = np.asarray(noise, dtype=np.float32).reshape(z.shape[0], -1)
    if hasattr(generator, "generate"):
        return generator.generate(z, noise)
    return np.asarray(generator(z, noise))


def _generate_each(generator, z, noise):
    z = check_logits(z)
    noise = np.asarray(noise, dtype=np.float32).reshape(z.shape[0], -1)
    return [_generate(generator, z[i : i + 1], noise[i : i + 1])[0] for i in range(z.shape[0])]


def _logits(classifier, X):
    return np.asarray(classifier.decision_function(X), dtype=np.float64)


def _predict(classifier, X):
    return predict_from_logits(_logits(classifier, X))


def reconstruct(classifier, generator, X, noise):
    """``G(classifier(X), noise)`` in one batch."""
    return _generate(generator, _logits(classifier, X), noise)


def _caption(**kw):
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in kw.items()}


def _apply(z, spec, value, rng=None):
    if spec.kind == "shift":
        return logit_shift(z, value)
    if spec.kind == "scale":
        return logit_scale(z, value)
    if spec.kind == "perturb":
        return logit_perturb(z, spec.sigma_sq, rng)
    raise ValueError(f"{spec.kind} is not a single-vector manipulation")


def manipulate(classifier, generator, X, spec, source_indices=None):
    """One row per source image, one column per manipulation value.

    The generator noise of each row is drawn once from ``spec.seed`` and held
    across columns. Perturbations draw ``spec.draws`` columns.
    """
    X = check_images(X)
    z = _logits(classifier, X)
    n = X.shape[0]
    idx = np.arange(n) if source_indices is None else np.asarray(source_indices)
    noise = sample_noise(n, _n_z(generator), spec.seed)
    rng = np.random.default_rng(spec.seed + 1)
    columns = spec.values if spec.kind != "perturb" else tuple(range(spec.draws))
    tiles, captions = [], []
    for i in range(n):
        for value in columns:
            zi = _apply(z[i], spec, value, rng)
            img = _generate(generator, zi[None], noise[i : i + 1])[0]
            tiles.append(img)
            captions.append(_caption(source_index=int(idx[i]), kind=spec.kind, value=value,
                                     predicted=int(_predict(classifier, img[None])[0])))
    return GridArtifact(tiles, n, len(columns), captions, {"noise": noise, "logits": z})


def interpolate_logits(classifier, generator, x_a, x_b, steps, seed=0):
    """Row of reconstructions along the segment between two images' logits."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    z = _logits(classifier, np.stack([x_a, x_b]))
    noise = sample_noise(1, _n_z(generator), seed)
    tiles, captions = [], []
    for t in np.linspace(0.0, 1.0, steps):
        zt = logit_interpolate(z[0], z[1], float(t))
        tiles.append(_generate(generator, zt[None], noise)[0])
        captions.append(_caption(t=float(t)))
    return GridArtifact(tiles, 1, steps, captions, {"noise": noise})


def noise_interpolate(generator, z, eps_a, eps_b, steps):
    """Row of ``G(z, (1 - t) eps_a + t eps_b)`` over evenly spaced t."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    z = check_logits(z)[:1]
    eps_a = np.asarray(eps_a, dtype=np.float32).reshape(1, -1)
    eps_b = np.asarray(eps_b, dtype=np.float32).reshape(1, -1)
    tiles, captions = [], []
    for t in np.linspace(0.0, 1.0, steps):
        eps = ((1.0 - t) * eps_a.astype(np.float64) + t * eps_b).astype(np.float32)
        tiles.append(_generate(generator, z, eps)[0])
        captions.append(_caption(t=float(t)))
    return GridArtifact(tiles, 1, steps, captions)


def _grid_shape(n):
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def resample_grid(classifier, generator, x, k, seed=0, source_index=0):
    """Source image followed by ``k`` reconstructions with fresh noise."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = check_images(x[None] if np.ndim(x) == 3 else x)[:1]
    z = np.repeat(_logits(classifier, x), k, axis=0)
    noise = sample_noise(k, _n_z(generator), seed)
    tiles = [x[0]] + _generate_each(generator, z, noise)
    captions = [_caption(source_index=source_index, tile="input")] + [
        _caption(source_index=source_index, tile="sample", draw=i) for i in range(k)
    ]
    rows, cols = _grid_shape(k + 1)
    return GridArtifact(tiles, rows, cols, captions, {"noise": noise})


# --- stability --------------------------------------------------------------


def agreement_fraction(pred_a, pred_b):
    pred_a, pred_b = np.asarray(pred_a), np.asarray(pred_b)
    if pred_a.size == 0:
        raise ValueError("empty partition")
    return float(np.mean(pred_a == pred_b))


@dataclass
class StabilityResult:
    fraction: float
    indices: np.ndarray
    pred_original: np.ndarray
    pred_reconstruction: np.ndarray


def iterative_stability(classifier, generator, X, y, partition="correct", seed=0, batch_size=256):
    """Fraction of reconstructions classified like their source image.

    ``partition`` selects correctly or incorrectly classified sources. Each
    source gets one fixed noise draw, indexed by its position in ``X``.
    """
    if partition not in ("correct", "incorrect"):
        raise ValueError("partition must be 'correct' or 'incorrect'")
    X = check_images(X)
    y = np.asarray(y)
    z = _logits(classifier, X)
    pred = predict_from_logits(z)
    noise = sample_noise(X.shape[0], _n_z(generator), seed)
    keep = np.flatnonzero((pred == y) if partition == "correct" else (pred != y))
    if keep.size == 0:
        raise ValueError(f"empty {partition} partition")
    recon_pred = np.empty(keep.size, dtype=np.int64)
    for s in range(0, keep.size, batch_size):
        sel = keep[s : s + batch_size]
        recon = _generate(generator, z[sel], noise[sel])
        recon_pred[s : s + batch_size] = _predict(classifier, recon)
    return StabilityResult(agreement_fraction(recon_pred, pred[keep]), keep, pred[keep], recon_pred)


# --- image-space transforms -------------------------------------------------


def brightness_adjust(X, factor):
    """Scale brightness in [0, 1] space: ``clip(p * factor, 0, 1)``."""
    if factor < 0:
        raise ValueError("factor must be non-negative")
    X = np.asarray(X)
    p = (X.astype(np.float64) + 1.0) / 2.0
    return (np.clip(p * factor, 0.0, 1.0) * 2.0 - 1.0).astype(X.dtype)


def box_blur(X):
    """3x3 mean filter with edge replication, computed in float64."""
    X = np.asarray(X, dtype=np.float64)
    P = np.pad(X, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = X.shape[1:3]
    acc = np.zeros_like(X)
    for dy in range(3):
        for dx in range(3):
            acc += P[:, dy : dy + h, dx : dx + w]
    return acc / 9.0


def sharpness_adjust(X, factor):
    """Unsharp-mask blend ``blur + factor * (x - blur)``, clipped to [-1, 1].

    Written as ``x + (factor - 1) * (x - blur)`` so factor 1 is exact.
    """
    if factor < 0:
        raise ValueError("factor must be non-negative")
    X = np.asarray(X)
    x = X.astype(np.float64)
    out = x + (factor - 1.0) * (x - box_blur(x))
    return np.clip(out, -1.0, 1.0).astype(X.dtype)


TRANSFORMS = {"brightness": brightness_adjust, "sharpness": sharpness_adjust}


def shift_scale_sweep(classifier, X, transform, factors):
    """Rows ``(factor, mean best-fit shift, mean best-fit scale)``.

    Fits are per image against the logits at factor 1.0 (the identity).
    """
    fn = TRANSFORMS[transform] if isinstance(transform, str) else transform
    factors = [float(f) for f in factors]
    if 1.0 not in factors:
        raise ValueError("factors must include the identity factor 1.0")
    X = check_images(X)
    z_ref = _logits(classifier, fn(X, 1.0))
    rows = []
    for f in factors:
        z_adj = _logits(classifier, fn(X, f))
        shifts = [best_fit_shift(a, b) for a, b in zip(z_ref, z_adj)]
        scales = [best_fit_scale(a, b) for a, b in zip(z_ref, z_adj)]
        rows.append((f, float(np.mean(shifts)), float(np.mean(scales))))
    return rows


def rotate90(X, k=1):
    X = np.asarray(X)
    if X.shape[1] != X.shape[2]:
        raise ValueError("rotation needs square images")
    return np.ascontiguousarray(np.rot90(X, k, axes=(1, 2)))


def rotation_study(classifier, generator, X, seed=0, source_indices=None):
    """Per image: input, its reconstruction, and the reconstruction of the
    90-degree rotated input rotated back."""
    X = check_images(X)
    if X.shape[1] != X.shape[2]:
        raise ValueError("rotation needs square images")
    n = X.shape[0]
    idx = np.arange(n) if source_indices is None else np.asarray(source_indices)
    noise = sample_noise(n, _n_z(generator), seed)
    plain = _generate_each(generator, _logits(classifier, X), noise)
    turned = _generate_each(generator, _logits(classifier, rotate90(X)), noise)
    tiles, captions = [], []
    for i in range(n):
        tiles += [X[i], plain[i], rotate90(turned[i][None], -1)[0]]
        captions += [_caption(source_index=int(idx[i]), tile=t)
                     for t in ("input", "reconstruction", "rotated_reconstruction")]
    return GridArtifact(tiles, n, 3, captions, {"noise": noise})


# --- perceptual distance ------------------------------------------------------


def _unit(f, eps=1e-10):
    return f / (np.sqrt((f * f).sum(axis=1, keepdims=True)) + eps)


def perceptual_distances(classifier, X, X_hat):
    """Per-image distance: mean over feature taps of the spatially averaged
    squared difference of channel-normalized activations."""
    X = check_images(X)
    X_hat = check_images(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError(f"geometry mismatch: {X.shape} vs {X_hat.shape}")
    fa = classifier.features(X)
    fb = classifier.features(X_hat)
    per_tap = []
    for name in fa:
        a = _unit(np.asarray(fa[name], dtype=np.float64))
        b = _unit(np.asarray(fb[name], dtype=np.float64))
        per_tap.append(((a - b) ** 2).sum(axis=1).mean(axis=(1, 2)))
    return np.mean(per_tap, axis=0)


def perceptual_distance(classifier, X, X_hat):
    return float(np.mean(perceptual_distances(classifier, X, X_hat)))


# --- studies ----------------------------------------------------------------


def ood_reconstruct(judge, pipelines, X, seed=0, source_indices=None):
    """Reconstruct out-of-distribution images through each pipeline.

    ``pipelines`` is an ordered mapping ``name -> (classifier, generator)``,
    conventionally robust then standard. Returns a grid whose rows are
    ``input | reconstruction per pipeline`` and the per-image distances
    under ``judge``.
    """
    X = check_images(X)
    n = X.shape[0]
    idx = np.arange(n) if source_indices is None else np.asarray(source_indices)
    noise = sample_noise(n, _n_z(next(iter(pipelines.values()))[1]), seed)
    recons, distances = {}, {}
    for name, (clf, gen) in pipelines.items():
        recons[name] = np.stack(_generate_each(gen, _logits(clf, X), noise))
        distances[name] = perceptual_distances(judge, X, recons[name])
    tiles, captions = [], []
    for i in range(n):
        tiles.append(X[i])
        captions.append(_caption(source_index=int(idx[i]), tile="input"))
        for name in pipelines:
            tiles.append(recons[name][i])
            captions.append(_caption(source_index=int(idx[i]), tile=name,
                                     distance=float(distances[name][i])))
    grid = GridArtifact(tiles, n, 1 + len(pipelines), captions, {"noise": noise})
    summary = {name: float(d.mean()) for name, d in distances.items()}
    return grid, summary, distances


def adversarial_reconstruction_study(classifier_r, classifier_s, generator_r, generator_s,
                                     X, y, epsilon, seed=0, source_indices=None):
    """FGSM each classifier; keep images whose prediction flips for both.

    Each kept row holds, per pipeline (robust first): original,
    its reconstruction, adversarial image, its reconstruction.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X = check_images(X)
    y = np.asarray(y)
    n = X.shape[0]
    idx = np.arange(n) if source_indices is None else np.asarray(source_indices)
    pipes = {"robust": (classifier_r, generator_r), "standard": (classifier_s, generator_s)}
    adv, pred, pred_adv = {}, {}, {}
    for name, (clf, _) in pipes.items():
        adv[name] = fgsm(clf, X, y, epsilon)
        pred[name] = _predict(clf, X)
        pred_adv[name] = _predict(clf, adv[name])
    keep = np.flatnonzero((pred["robust"] != pred_adv["robust"])
                          & (pred["standard"] != pred_adv["standard"]))
    if keep.size == 0:
        raise ValueError("no image was flipped by the attack on both classifiers")
    noise = sample_noise(n, _n_z(generator_r), seed)
    tiles, captions = [], []
    for i in keep:
        for name, (clf, gen) in pipes.items():
            rec = _generate_each(gen, _logits(clf, np.stack([X[i], adv[name][i]])),
                                 np.stack([noise[i], noise[i]]))
            tiles += [X[i], rec[0], adv[name][i], rec[1]]
            common = dict(source_index=int(idx[i]), pipeline=name, true_label=int(y[i]),
                          predicted=int(pred[name][i]), attacked=int(pred_adv[name][i]))
            captions += [_caption(tile=t, **common)
                         for t in ("original", "reconstruction", "adversarial",
                                   "adversarial_reconstruction")]
    meta = {"noise": noise[keep], "kept": keep,
            "linf": {k: np.abs(adv[k][keep] - X[keep]).max() for k in adv}}
    return GridArtifact(tiles, keep.size, 8, captions, meta)


def incorrect_resample(classifier, generator, X, y, k=8, limit=4, seed=0):
    """Resample grids for misclassified sources (filter + resample composition)."""
    X = check_images(X)
    wrong = np.flatnonzero(_predict(classifier, X) != np.asarray(y))[:limit]
    if wrong.size == 0:
        raise ValueError("no misclassified images")
    return [resample_grid(classifier, generator, X[i], k, seed + int(i), int(i)) for i in wrong]
