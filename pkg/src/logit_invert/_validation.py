"""Input validation helpers shared by the estimators and experiment procedures."""

import numpy as np
import torch


def check_images(X, *, dtype=np.float32, allow_uint8=True, name="X"):
    """Return ``X`` as a channels-last float array with values in [-1, 1].

    Unsigned-byte input is normalized with ``x / 127.5 - 1``. Rank-3 input
    is treated as a batch of single-channel images.
    """
    X = np.asarray(X)
    if X.dtype == np.uint8:
        if not allow_uint8:
            raise ValueError(f"{name} must be a float array in [-1, 1], got uint8")
        from .datasets import normalize

        X = normalize(X, dtype=dtype)
    elif not np.issubdtype(X.dtype, np.floating):
        raise TypeError(f"{name} must be uint8 or floating point, got {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (N, H, W, C), got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one image")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < -1.0 or X.max() > 1.0:
        raise ValueError(f"{name} must lie in [-1, 1]; got [{X.min()}, {X.max()}]")
    return np.ascontiguousarray(X, dtype=dtype)


def check_geometry(X, expected, name="X"):
    """Raise if the (H, W, C) of an image batch differs from ``expected``."""
    got = tuple(X.shape[1:])
    if got != tuple(expected):
        raise ValueError(f"{name} has geometry {got}, model expects {tuple(expected)}")


def check_logits(z, n_classes=None, name="z"):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2:
        raise ValueError(f"{name} must be (n_samples, n_classes), got shape {z.shape}")
    if n_classes is not None and z.shape[1] != n_classes:
        raise ValueError(f"{name} has width {z.shape[1]}, expected {n_classes}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    return z


def check_labels(y, n_samples, name="y"):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"{name} must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(np.mod(y, 1) != 0):
            raise ValueError(f"{name} must hold integer class indices")
    return y.astype(np.int64)


def to_nchw(X, dtype=torch.float32):
    """Channels-last numpy batch -> NCHW torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(X, -1, 1))).to(dtype)


def to_nhwc(t):
    """NCHW torch tensor -> channels-last numpy batch."""
    return np.ascontiguousarray(t.detach().cpu().permute(0, 2, 3, 1).numpy())
