"""Spectrally normalized layers, conditional batch norm and self-attention."""

import contextlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_FLOOR = 1e-12


def _l2normalize(v, eps=1e-12):
    return v / v.norm().clamp_min(eps)


def spectral_normalize(W, u, n_power_iterations=1):
    """Divide ``W`` by its power-iteration estimate of the top singular value.

    Convolution kernels are flattened to (out, in*kh*kw). Runs
    ``n_power_iterations`` updates of ``u`` and returns
    ``(W / sigma, u, sigma)`` with sigma = u^T W v. The power iteration
    itself is not differentiated through; with zero iterations ``u`` is
    used as stored.
    """
    W_mat = W.reshape(W.shape[0], -1)
    with torch.no_grad():
        for _ in range(n_power_iterations):
            v = _l2normalize(W_mat.t() @ u)
            u = _l2normalize(W_mat @ v)
        u = u.clone()
        v = _l2normalize(W_mat.t() @ u)
    sigma = torch.dot(u, W_mat @ v).clamp_min(SIGMA_FLOOR)
    return W / sigma, u, sigma


class _SpectralNorm:
    """Mixin holding the power-iteration vector of ``self.weight``."""

    def _init_sn(self, n_power_iterations):
        self.n_power_iterations = n_power_iterations
        self.power_iteration = True
        out = self.weight.shape[0]
        u = torch.randn(out)
        self.register_buffer("sn_u", _l2normalize(u))
        self.register_buffer("sn_sigma", torch.ones(()))

    def normalized_weight(self):
        if not (self.training and self.power_iteration):
            return spectral_normalize(self.weight, self.sn_u, 0)[0]
        w_bar, u, sigma = spectral_normalize(self.weight, self.sn_u, self.n_power_iterations)
        with torch.no_grad():
            self.sn_u.copy_(u)
            self.sn_sigma.copy_(sigma)
        return w_bar


class SNLinear(nn.Linear, _SpectralNorm):
    def __init__(self, in_features, out_features, bias=True, n_power_iterations=1):
        super().__init__(in_features, out_features, bias)
        self._init_sn(n_power_iterations)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SNConv2d(nn.Conv2d, _SpectralNorm):
    def __init__(self, in_channels, out_channels, kernel_size, padding=0, bias=True,
                 n_power_iterations=1):
        super().__init__(in_channels, out_channels, kernel_size, padding=padding, bias=bias)
        self._init_sn(n_power_iterations)

    def forward(self, x):
        return self._conv_forward(x, self.normalized_weight(), self.bias)


@contextlib.contextmanager
def frozen_power_iteration(*modules):
    """Temporarily stop spectral-norm state updates (for finite differences)."""
    layers = [m for mod in modules for m in mod.modules() if isinstance(m, _SpectralNorm)]
    saved = [m.power_iteration for m in layers]
    for m in layers:
        m.power_iteration = False
    try:
        yield
    finally:
        for m, flag in zip(layers, saved):
            m.power_iteration = flag


def spectral_norm_modules(module):
    return [m for m in module.modules() if isinstance(m, _SpectralNorm)]


# --- batch standardization ------------------------------------------------


def cond_batchnorm(y, gamma, beta, eps=1e-5):
    """Standardize each channel with batch statistics, then modulate.

    ``gamma`` and ``beta`` are (B, C) tensors, one row per example.
    Statistics run over the batch and all spatial positions.
    """
    if y.shape[0] < 2:
        raise ValueError("conditional batch norm needs batch size >= 2 in training mode")
    dims = [0] + list(range(2, y.dim()))
    var, mean = torch.var_mean(y, dim=dims, unbiased=False, keepdim=True)
    y_hat = (y - mean) / torch.sqrt(var + eps)
    shape = (y.shape[0], y.shape[1]) + (1,) * (y.dim() - 2)
    return y_hat * gamma.reshape(shape) + beta.reshape(shape)


class _Standardize(nn.Module):
    """Batch statistics while training (no moving averages); frozen statistics
    from a calibration pass in eval mode."""

    def __init__(self, num_features, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.calibrating = False
        self.register_buffer("calib_mean", torch.zeros(num_features))
        self.register_buffer("calib_var", torch.ones(num_features))
        self.register_buffer("calib_count", torch.zeros((), dtype=torch.long))

    def _standardize(self, y):
        if not self.training:
            return F.batch_norm(y, self.calib_mean, self.calib_var, training=False, eps=self.eps)
        if y.shape[0] < 2:
            raise ValueError("batch norm needs batch size >= 2 in training mode")
        if self.calibrating:
            with torch.no_grad():
                var, mean = torch.var_mean(y, dim=(0, 2, 3), unbiased=False)
                k = self.calib_count.item()
                self.calib_mean.mul_(k / (k + 1)).add_(mean / (k + 1))
                self.calib_var.mul_(k / (k + 1)).add_(var / (k + 1))
                self.calib_count.add_(1)
        return F.batch_norm(y, None, None, training=True, eps=self.eps)

    def reset_calibration(self):
        self.calib_mean.zero_()
        self.calib_var.fill_(1.0)
        self.calib_count.zero_()


class BatchNorm(_Standardize):
    """Unconditional batch norm with learned gain and bias."""

    def __init__(self, num_features, eps=1e-5):
        super().__init__(num_features, eps)
        self.gain = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))

    def forward(self, y):
        return self._standardize(y) * self.gain[None, :, None, None] + self.bias[None, :, None, None]


class ConditioningHead(nn.Module):
    """Two-layer perceptron from the conditioning vector to per-channel values.

    The output layer starts with zero weights and bias ``init_bias`` so the
    head emits a constant at initialization.
    """

    def __init__(self, cond_dim, num_features, hidden=128, init_bias=0.0):
        super().__init__()
        self.hidden = SNLinear(cond_dim, hidden)
        self.out = nn.Linear(hidden, num_features)
        nn.init.zeros_(self.out.weight)
        nn.init.constant_(self.out.bias, init_bias)

    def forward(self, c):
        return self.out(F.relu(self.hidden(c)))


class ConditionalBatchNorm(_Standardize):
    def __init__(self, num_features, cond_dim, hidden=128, eps=1e-5):
        super().__init__(num_features, eps)
        self.gamma = ConditioningHead(cond_dim, num_features, hidden, init_bias=1.0)
        self.beta = ConditioningHead(cond_dim, num_features, hidden, init_bias=0.0)

    def forward(self, y, c):
        gamma = self.gamma(c)[:, :, None, None]
        beta = self.beta(c)[:, :, None, None]
        return self._standardize(y) * gamma + beta


@contextlib.contextmanager
def calibrating(model):
    """Accumulate per-layer batch statistics during forward passes in training mode."""
    layers = [m for m in model.modules() if isinstance(m, _Standardize)]
    for m in layers:
        m.reset_calibration()
        m.calibrating = True
    try:
        yield
    finally:
        for m in layers:
            m.calibrating = False


class SelfAttention(nn.Module):
    """Non-local block with spectrally normalized 1x1 projections."""

    def __init__(self, channels):
        super().__init__()
        self.theta = SNConv2d(channels, channels // 8, 1, bias=False)
        self.phi = SNConv2d(channels, channels // 8, 1, bias=False)
        self.g = SNConv2d(channels, channels // 2, 1, bias=False)
        self.o = SNConv2d(channels // 2, channels, 1, bias=False)
        self.gain = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        n, c, h, w = x.shape
        theta = self.theta(x).flatten(2)
        phi = F.max_pool2d(self.phi(x), 2).flatten(2)
        g = F.max_pool2d(self.g(x), 2).flatten(2)
        attn = F.softmax(theta.transpose(1, 2) @ phi / math.sqrt(theta.shape[1]), dim=-1)
        o = self.o((g @ attn.transpose(1, 2)).reshape(n, c // 2, h, w))
        return x + self.gain * o
