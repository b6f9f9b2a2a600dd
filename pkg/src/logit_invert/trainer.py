"""Adversarial training of the logit inverter.

One call to :func:`train_step` performs ``disc_steps_per_gen`` discriminator
updates and a single generator update, then refreshes the exponential
moving average (EMA) copy of the generator. :class:`LogitInverter` wraps the
loop behind a scikit-learn transformer: ``fit`` on images, ``transform``
images into reconstructions of their logits.
"""

import copy
import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from ._validation import check_geometry, check_images, check_logits, to_nchw, to_nhwc
from .classifier import weights_digest
from .inversion_gan import Discriminator, Generator, orthogonal_init
from .layers import calibrating, frozen_power_iteration

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ("step", "d_loss", "g_loss", "mean_real", "mean_fake", "wallclock")


class TrainingDivergedError(FloatingPointError):
    pass


def d_loss(scores_real, scores_fake):
    """Discriminator hinge loss ``mean(max(-1, fake) - min(1, real))``."""
    if scores_real.shape != scores_fake.shape:
        raise ValueError("real and fake score batches must have equal size")
    return (torch.clamp(scores_fake, min=-1.0) - torch.clamp(scores_real, max=1.0)).mean()


def g_loss(scores_fake):
    return -scores_fake.mean()


@dataclass
class GanTrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 5e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.999
    disc_steps_per_gen: int = 2
    ema_decay: float = 0.9999
    ema_start: int = 1000
    batch_size: int = 128
    total_steps: int = 30000
    seed: int = 0
    init: str = "orthogonal"

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.disc_steps_per_gen < 1:
            raise ValueError("disc_steps_per_gen must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.init not in ("orthogonal", "default"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class ModelSpec:
    """Architecture of the generator/discriminator pair."""

    n_classes: int
    image_channels: int
    n_z: int = 120
    g_channels: tuple = (128, 128, 64, 32)
    d_channels: tuple = (32, 64, 128, 128)
    embed_dim: int = 128
    cond_hidden: int = 128
    attention_res: int | None = None

    def __post_init__(self):
        self.g_channels = tuple(int(c) for c in self.g_channels)
        self.d_channels = tuple(int(c) for c in self.d_channels)
        if len(self.g_channels) != len(self.d_channels):
            raise ValueError("generator and discriminator must work at the same resolution")

    @property
    def resolution(self):
        return 4 * 2 ** (len(self.g_channels) - 1)


@dataclass
class TrainState:
    config: GanTrainConfig
    spec: ModelSpec
    generator: Generator
    generator_ema: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    z_mean: torch.Tensor
    z_scale: torch.Tensor
    step: int = 0
    last_checkpoint: str | None = None
    history: list = field(default_factory=list)

    def condition(self, z):
        return (z - self.z_mean) / self.z_scale

    def config_digest(self):
        # The step budget may grow when a run is resumed; it is not part of the identity.
        train = {k: v for k, v in asdict(self.config).items() if k != "total_steps"}
        return ckpt.config_hash({"train": train, "model": asdict(self.spec)})


def build_state(config, spec, z_mean=None, z_scale=None):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        G = Generator(spec.n_classes, spec.n_z, spec.g_channels, spec.image_channels,
                      spec.embed_dim, spec.cond_hidden, spec.attention_res)
        D = Discriminator(spec.n_classes, spec.image_channels, spec.d_channels, spec.attention_res)
        if config.init == "orthogonal":
            orthogonal_init(G)
            orthogonal_init(D)
    G_ema = copy.deepcopy(G)
    G_ema.eval()
    betas = (float(config.adam_beta1), float(config.adam_beta2))
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_g, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=betas)
    rng = torch.Generator().manual_seed(config.seed + 1)
    z_mean = torch.zeros(spec.n_classes) if z_mean is None else torch.as_tensor(z_mean, dtype=torch.float32)
    z_scale = torch.ones(spec.n_classes) if z_scale is None else torch.as_tensor(z_scale, dtype=torch.float32)
    return TrainState(config, spec, G, G_ema, D, opt_g, opt_d, rng, z_mean, z_scale)


def _ema_buffers(module):
    # Spectral-norm state follows the live generator; calibration statistics do not.
    return [(n, b) for n, b in module.named_buffers() if n.endswith(("sn_u", "sn_sigma"))]


def update_ema(state):
    decay = 0.0 if state.step < state.config.ema_start else state.config.ema_decay
    G, E = state.generator, state.generator_ema
    with torch.no_grad():
        for pe, p in zip(E.parameters(), G.parameters()):
            if decay == 0.0:
                pe.copy_(p)
            else:
                pe.mul_(decay).add_(p, alpha=1.0 - decay)
        for (_, be), (_, b) in zip(_ema_buffers(E), _ema_buffers(G)):
            be.copy_(b)


def _check_finite(state, loss, which):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite {which} loss at step {state.step}; "
            f"last good checkpoint: {state.last_checkpoint or 'none'}"
        )


def classifier_logits(classifier, x):
    module = getattr(classifier, "module_", classifier)
    module.eval()
    with torch.no_grad():
        return module(x).float()


def discriminator_step(state, real, classifier):
    """One discriminator update on a real batch and fakes from the same logits.

    Returns ``(z, loss, mean real score, mean fake score)``.
    """
    G, D = state.generator, state.discriminator
    z = state.condition(classifier_logits(classifier, real))
    eps = torch.randn(real.shape[0], state.spec.n_z, generator=state.rng)
    with torch.no_grad():
        fake = G(z, eps)
    scores = D(torch.cat([real, fake]), torch.cat([z, z]))
    s_real, s_fake = scores.split(real.shape[0])
    loss = d_loss(s_real, s_fake)
    _check_finite(state, loss, "discriminator")
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    return z, loss.item(), s_real.mean().item(), s_fake.mean().item()


def generator_step(state, z):
    """One generator update against the frozen discriminator (weights and u vectors)."""
    G, D = state.generator, state.discriminator
    eps = torch.randn(z.shape[0], state.spec.n_z, generator=state.rng)
    D.requires_grad_(False)
    try:
        with frozen_power_iteration(D):
            loss = g_loss(D(G(z, eps), z))
        _check_finite(state, loss, "generator")
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_g.step()
    finally:
        D.requires_grad_(True)
    return loss.item()


def train_step(state, real_batch, classifier):
    """One generator update preceded by ``disc_steps_per_gen`` discriminator updates.

    ``real_batch`` is an NCHW tensor holding ``disc_steps_per_gen`` disjoint
    real batches; each discriminator step gets its own. The generator step
    reuses the logits of the last one. Returns a dict of scalar diagnostics.
    """
    k = state.config.disc_steps_per_gen
    if real_batch.shape[0] % k or real_batch.shape[0] // k < 2:
        raise ValueError(f"real batch of {real_batch.shape[0]} cannot be split into {k} batches")
    state.generator.train()
    state.discriminator.train()
    d_losses, real_means, fake_means = [], [], []
    for real in real_batch.chunk(k):
        z, loss, m_real, m_fake = discriminator_step(state, real, classifier)
        d_losses.append(loss)
        real_means.append(m_real)
        fake_means.append(m_fake)
    loss_g = generator_step(state, z)
    update_ema(state)
    state.step += 1
    return {
        "step": state.step,
        "d_loss": float(np.mean(d_losses)),
        "g_loss": loss_g,
        "mean_real": float(np.mean(real_means)),
        "mean_fake": float(np.mean(fake_means)),
    }


def sample_real(state, images):
    """Draw ``disc_steps_per_gen * batch_size`` training images with replacement."""
    n = state.config.disc_steps_per_gen * state.config.batch_size
    idx = torch.randint(0, images.shape[0], (n,), generator=state.rng)
    return images[idx].contiguous(memory_format=torch.channels_last)


def calibrate(state, images, classifier, n_batches=16, batch_size=None):
    """Freeze the EMA generator's batch statistics from ``n_batches`` forward passes.

    Uses a private RNG so that calibration never perturbs training.
    """
    batch_size = batch_size or state.config.batch_size
    rng = torch.Generator().manual_seed(state.config.seed + 2)
    E = state.generator_ema
    E.train()
    with torch.no_grad(), frozen_power_iteration(E), calibrating(E):
        for _ in range(n_batches):
            idx = torch.randint(0, images.shape[0], (batch_size,), generator=rng)
            z = state.condition(classifier_logits(classifier, images[idx]))
            E(z, torch.randn(batch_size, state.spec.n_z, generator=rng))
    E.eval()


class DiagnosticsLog:
    """Append-only CSV of per-step diagnostics."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(DIAGNOSTIC_COLUMNS)

    def append(self, row):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                    for c in DIAGNOSTIC_COLUMNS])


def read_diagnostics(path, include_wallclock=False):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not include_wallclock:
        for r in rows:
            r.pop("wallclock", None)
    return rows


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(state, path):
    sections = {
        "meta": {
            "train_config": ckpt.json_record(asdict(state.config)),
            "model_spec": ckpt.json_record(asdict(state.spec)),
            "z_mean": state.z_mean.numpy(),
            "z_scale": state.z_scale.numpy(),
        },
        "generator": ckpt.module_records(state.generator),
        "discriminator": ckpt.module_records(state.discriminator),
        "generator_ema": ckpt.module_records(state.generator_ema),
        "opt_g": ckpt.optimizer_records(state.opt_g),
        "opt_d": ckpt.optimizer_records(state.opt_d),
        "rng": {"torch": state.rng.get_state().numpy()},
    }
    ckpt.write(path, state.config_digest(), state.step, sections)
    state.last_checkpoint = str(path)
    return path


def load_checkpoint(path, expected=None):
    """Rebuild a :class:`TrainState`. ``expected`` is an optional state or
    digest; a mismatching configuration hash only warns."""
    digest, step, sections = ckpt.read(path)
    meta = sections["meta"]
    spec_d = ckpt.from_json_record(meta["model_spec"])
    config = GanTrainConfig(**ckpt.from_json_record(meta["train_config"]))
    spec = ModelSpec(**spec_d)
    state = build_state(config, spec, meta["z_mean"], meta["z_scale"])
    if digest != state.config_digest():
        warnings.warn("checkpoint config hash does not match its stored configuration")
    if expected is not None:
        want = expected.config_digest() if isinstance(expected, TrainState) else expected
        if want != digest:
            warnings.warn("checkpoint was written under a different configuration")
    ckpt.load_module_records(state.generator, sections["generator"])
    ckpt.load_module_records(state.discriminator, sections["discriminator"])
    ckpt.load_module_records(state.generator_ema, sections["generator_ema"])
    ckpt.load_optimizer_records(state.opt_g, sections["opt_g"])
    ckpt.load_optimizer_records(state.opt_d, sections["opt_d"])
    state.rng.set_state(torch.from_numpy(sections["rng"]["torch"]))
    state.step = step
    state.last_checkpoint = str(path)
    return state


# --- estimator ------------------------------------------------------------


class LogitInverter(TransformerMixin, BaseEstimator):
    """Generative inverse of a frozen classifier's logits.

    Parameters
    ----------
    classifier : fitted LogitClassifier
        Never updated during training.
    n_z : int
        Noise width, split evenly across the generator's conditioning sites.
    g_channels, d_channels : tuple of int
        Generator and discriminator widths; both define the image side
        ``4 * 2**(len - 1)``, which must match the classifier input.
    standardize_logits : bool
        Shift and scale every logit coordinate by its training-set mean and
        standard deviation before conditioning.
    checkpoint_dir, checkpoint_every : periodic ``step-XXXXXXX.ckpt`` files.
    diagnostics_path : per-step CSV log.
    """

    def __init__(self, classifier=None, n_z=120, g_channels=(128, 128, 64, 32),
                 d_channels=(32, 64, 128, 128), embed_dim=128, cond_hidden=128,
                 attention_res=None, standardize_logits=False, lr_g=1e-4, lr_d=5e-4,
                 adam_beta1=0.0, adam_beta2=0.999, disc_steps_per_gen=2, ema_decay=0.9999,
                 ema_start=1000, batch_size=128, total_steps=30000, seed=0, init="orthogonal",
                 calibration_batches=16, checkpoint_dir=None, checkpoint_every=0,
                 diagnostics_path=None, resume=True, verbose=0):
        self.classifier = classifier
        self.n_z = n_z
        self.g_channels = g_channels
        self.d_channels = d_channels
        self.embed_dim = embed_dim
        self.cond_hidden = cond_hidden
        self.attention_res = attention_res
        self.standardize_logits = standardize_logits
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.disc_steps_per_gen = disc_steps_per_gen
        self.ema_decay = ema_decay
        self.ema_start = ema_start
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.seed = seed
        self.init = init
        self.calibration_batches = calibration_batches
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        self.diagnostics_path = diagnostics_path
        self.resume = resume
        self.verbose = verbose

    def _train_config(self):
        names = {f.name for f in fields(GanTrainConfig)}
        return GanTrainConfig(**{k: v for k, v in self.get_params(deep=False).items() if k in names})

    def _model_spec(self):
        check_is_fitted(self.classifier, "module_")
        shape = self.classifier.input_shape_
        spec = ModelSpec(self.classifier.n_classes_, shape[-1], self.n_z, self.g_channels,
                         self.d_channels, self.embed_dim, self.cond_hidden, self.attention_res)
        if shape[:2] != (spec.resolution, spec.resolution):
            raise ValueError(f"networks produce {spec.resolution}px images, classifier expects {shape}")
        return spec

    def _latest_checkpoint(self):
        if not self.checkpoint_dir:
            return None
        found = sorted(Path(self.checkpoint_dir).glob("step-*.ckpt"))
        return found[-1] if found else None

    def fit(self, X, y=None):
        if self.classifier is None:
            raise ValueError("LogitInverter needs a fitted classifier")
        X = check_images(X)
        spec = self._model_spec()
        config = self._train_config()
        images = to_nchw(X)
        z_mean = z_scale = None
        if self.standardize_logits:
            z = self.classifier.decision_function(X)
            z_mean, z_scale = z.mean(0), np.maximum(z.std(0), 1e-6)

        latest = self._latest_checkpoint() if self.resume else None
        if latest is not None:
            state = load_checkpoint(latest)
            if state.config_digest() != build_state(config, spec, z_mean, z_scale).config_digest():
                warnings.warn(f"resuming from {latest} written under a different configuration")
            logger.info("resumed from %s at step %d", latest, state.step)
        else:
            state = build_state(config, spec, z_mean, z_scale)
        self.state_ = state
        if self.checkpoint_dir:
            Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        log = DiagnosticsLog(self.diagnostics_path)
        digest = weights_digest(self.classifier.module_)
        t0 = time.time()
        while state.step < config.total_steps:
            row = train_step(state, sample_real(state, images), self.classifier)
            row["wallclock"] = round(time.time() - t0, 3)
            log.append(row)
            if self.verbose and state.step % max(1, self.verbose) == 0:
                logger.info("step %(step)d d %(d_loss).4f g %(g_loss).4f", row)
            if self.checkpoint_every and state.step % self.checkpoint_every == 0:
                self._save_periodic(state)
        if weights_digest(self.classifier.module_) != digest:
            raise RuntimeError("classifier weights changed during inverter training")
        self.calibrate(X)
        if self.checkpoint_dir:
            self._save_periodic(state)
        return self

    def _save_periodic(self, state):
        path = Path(self.checkpoint_dir) / f"step-{state.step:07d}.ckpt"
        save_checkpoint(state, path)

    def calibrate(self, X, n_batches=None):
        check_is_fitted(self, "state_")
        X = check_images(X)
        calibrate(self.state_, to_nchw(X), self.classifier,
                  n_batches or self.calibration_batches)
        return self

    # -- inference ----------------------------------------------------------

    def sample_noise(self, n, seed=None):
        """Standard-normal noise of shape (n, n_z), float32."""
        rng = np.random.default_rng(seed)
        return rng.standard_normal((n, self.n_z)).astype(np.float32)

    def generate(self, z, noise=None, seed=None, batch_size=256):
        """Images (N, H, W, C) in [-1, 1] from logits ``z`` via the EMA generator."""
        check_is_fitted(self, "state_")
        z = check_logits(z, self.state_.spec.n_classes)
        if noise is None:
            noise = self.sample_noise(z.shape[0], seed)
        noise = np.asarray(noise, dtype=np.float32)
        if noise.shape != (z.shape[0], self.n_z):
            raise ValueError(f"noise must have shape {(z.shape[0], self.n_z)}, got {noise.shape}")
        E = self.state_.generator_ema
        E.eval()
        out = []
        with torch.no_grad():
            for s in range(0, z.shape[0], batch_size):
                zt = self.state_.condition(torch.from_numpy(z[s : s + batch_size]).float())
                out.append(E(zt, torch.from_numpy(noise[s : s + batch_size])))
        return to_nhwc(torch.cat(out)) if out else np.zeros((0,) + self.classifier.input_shape_, np.float32)

    def transform(self, X, noise=None, seed=None):
        """Reconstruct each image from its classifier logits."""
        X = check_images(X)
        check_geometry(X, self.classifier.input_shape_)
        return self.generate(self.classifier.decision_function(X), noise, seed)

    reconstruct = transform

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_checkpoint(self.state_, path)

    @classmethod
    def load(cls, path, classifier):
        state = load_checkpoint(path)
        params = {**asdict(state.config)}
        spec = state.spec
        est = cls(classifier=classifier, n_z=spec.n_z, g_channels=spec.g_channels,
                  d_channels=spec.d_channels, embed_dim=spec.embed_dim,
                  cond_hidden=spec.cond_hidden, attention_res=spec.attention_res, **params)
        est._model_spec()
        est.state_ = state
        return est
