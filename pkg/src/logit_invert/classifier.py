"""The frozen classifier whose logits condition the inverter.

:class:`LogitClassifier` wraps a small residual CNN (or a mixed-branch
Inception-style variant) behind the scikit-learn classifier API. Logits are
exposed through :meth:`LogitClassifier.decision_function`. With
``robust=True`` every training batch is replaced by its PGD counterpart.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_geometry, check_images, check_labels, to_nchw
from .attacks import AttackSpec, pgd_tensor
from .datasets import augment

logger = logging.getLogger(__name__)


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class MixedBlock(nn.Module):
    """Parallel 1x1, 3x3, double-3x3 and pooled branches, concatenated."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        b = out_ch // 4

        def cbr(cin, cout, k, s=1):
            return nn.Sequential(
                nn.Conv2d(cin, cout, k, s, k // 2, bias=False), nn.BatchNorm2d(cout), nn.ReLU()
            )

        self.b1 = cbr(in_ch, b, 1, stride)
        self.b3 = nn.Sequential(cbr(in_ch, b, 1), cbr(b, b, 3, stride))
        self.b33 = nn.Sequential(cbr(in_ch, b, 1), cbr(b, b, 3), cbr(b, b, 3, stride))
        self.pool = nn.Sequential(nn.AvgPool2d(3, stride, 1), cbr(in_ch, out_ch - 3 * b, 1))

    def forward(self, x):
        return torch.cat([self.b1(x), self.b3(x), self.b33(x), self.pool(x)], dim=1)


class ClassifierNet(nn.Module):
    """Four-stage CNN; the first three stage outputs are exposed as feature taps."""

    tap_names = ("stage1", "stage2", "stage3")

    def __init__(self, in_channels, n_classes, widths=(16, 32, 64, 128), arch="resnet"):
        super().__init__()
        if arch not in ("resnet", "inception"):
            raise ValueError(f"unknown arch {arch!r}")
        block = BasicBlock if arch == "resnet" else MixedBlock
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        stages, prev = [], widths[0]
        for i, w in enumerate(widths):
            stages.append(block(prev, w, stride=1 if i == 0 else 2))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(prev, n_classes)
        self.n_classes = n_classes

    def forward(self, x, return_taps=False):
        h = self.stem(x)
        taps = {}
        for name, stage in zip(("stage1", "stage2", "stage3", "stage4"), self.stages):
            h = stage(h)
            taps[name] = h
        logits = self.head(h.mean(dim=(2, 3)))
        if return_taps:
            return logits, {k: taps[k] for k in self.tap_names}
        return logits


def weights_digest(module):
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class LogitClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional classifier trained with momentum SGD and cosine decay.

    Parameters
    ----------
    arch : {"resnet", "inception"}
    widths : tuple of int
        Channel width of each of the four stages.
    robust : bool
        Train on PGD examples with budget ``attack_epsilon`` (in [-1, 1]
        pixel units), ``attack_steps`` steps of size ``2.5 * eps / steps``.
    flip_prob, crop_pad : augmentation applied to training batches.
    """

    def __init__(self, arch="resnet", widths=(16, 32, 64, 128), learning_rate=0.05,
                 momentum=0.9, weight_decay=5e-4, epochs=3, batch_size=128, robust=False,
                 attack_epsilon=0.1, attack_steps=7, flip_prob=0.5, crop_pad=4, seed=0,
                 verbose=0):
        self.arch = arch
        self.widths = widths
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.robust = robust
        self.attack_epsilon = attack_epsilon
        self.attack_steps = attack_steps
        self.flip_prob = flip_prob
        self.crop_pad = crop_pad
        self.seed = seed
        self.verbose = verbose

    def _build(self, input_shape, n_classes):
        torch.manual_seed(self.seed)
        self.module_ = ClassifierNet(input_shape[-1], n_classes, tuple(self.widths), self.arch)
        self.input_shape_ = tuple(input_shape)
        self.classes_ = np.arange(n_classes)
        self.n_classes_ = n_classes

    def fit(self, X, y, n_classes=None):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        if self.robust and (self.attack_epsilon < 0 or self.attack_steps < 1):
            raise ValueError("robust training needs attack_epsilon >= 0 and attack_steps >= 1")
        n_classes = n_classes or int(y.max()) + 1
        self._build(X.shape[1:], n_classes)
        model = self.module_
        opt = torch.optim.SGD(
            model.parameters(), lr=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay,
        )
        steps_per_epoch = math.ceil(X.shape[0] / self.batch_size)
        total = steps_per_epoch * self.epochs
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda t: 0.5 * (1 + math.cos(math.pi * min(t, total) / total))
        )
        spec = AttackSpec(self.attack_epsilon, self.attack_steps) if self.robust else None
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        model.train()
        step = 0
        for epoch in range(self.epochs):
            order = rng.permutation(X.shape[0])
            seen = correct = 0
            loss_sum = 0.0
            for start in range(0, X.shape[0], self.batch_size):
                idx = order[start : start + self.batch_size]
                xb = augment(X[idx], rng, self.flip_prob, self.crop_pad)
                xb = to_nchw(xb).contiguous(memory_format=torch.channels_last)
                yb = torch.from_numpy(y[idx])
                if spec is not None:
                    xb = self._attack_in_train_mode(xb, yb, spec)
                logits = model(xb)
                loss = F.cross_entropy(logits, yb)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite classifier loss at epoch {epoch}, step {step}"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                step += 1
                loss_sum += loss.item() * len(idx)
                correct += (logits.argmax(1) == yb).sum().item()
                seen += len(idx)
            self.history_.append({"epoch": epoch, "loss": loss_sum / seen, "train_accuracy": correct / seen})
            if self.verbose:
                logger.info("epoch %d loss %.4f acc %.4f", epoch, loss_sum / seen, correct / seen)
        model.eval()
        return self

    def _attack_in_train_mode(self, xb, yb, spec):
        # Batch-norm running statistics must not see the attack's forward passes.
        saved = {k: v.clone() for k, v in self.module_.named_buffers()}
        x_adv = pgd_tensor(self.module_, xb, yb, spec)
        with torch.no_grad():
            for k, v in self.module_.named_buffers():
                v.copy_(saved[k])
        return x_adv

    def _forward_batches(self, X, batch_size=500):
        check_is_fitted(self, "module_")
        X = check_images(X, dtype=self._np_dtype())
        check_geometry(X, self.input_shape_)
        self.module_.eval()
        dtype = next(self.module_.parameters()).dtype
        out = []
        with torch.no_grad():
            for start in range(0, X.shape[0], batch_size):
                out.append(self.module_(to_nchw(X[start : start + batch_size], dtype)))
        return torch.cat(out)

    def _np_dtype(self):
        return torch.empty((), dtype=next(self.module_.parameters()).dtype).numpy().dtype

    def decision_function(self, X):
        """Logit vectors, shape (n_samples, n_classes)."""
        return self._forward_batches(X).double().numpy()

    logits = decision_function

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return predict_from_logits(self.decision_function(X))

    def features(self, X, batch_size=500):
        """Feature-tap activations as NCHW tensors keyed by tap name."""
        check_is_fitted(self, "module_")
        X = check_images(X, dtype=self._np_dtype())
        check_geometry(X, self.input_shape_)
        self.module_.eval()
        dtype = next(self.module_.parameters()).dtype
        taps = {name: [] for name in ClassifierNet.tap_names}
        with torch.no_grad():
            for start in range(0, X.shape[0], batch_size):
                _, t = self.module_(to_nchw(X[start : start + batch_size], dtype), return_taps=True)
                for name, value in t.items():
                    taps[name].append(value)
        return {name: torch.cat(v) for name, v in taps.items()}

    def weights_digest(self):
        check_is_fitted(self, "module_")
        return weights_digest(self.module_)

    def save(self, path):
        """Write parameters and weights to a binary checkpoint file."""
        from . import checkpoint as ckpt

        check_is_fitted(self, "module_")
        params = self.get_params(deep=False)
        params["widths"] = list(params["widths"])
        meta = {"params": params, "input_shape": list(self.input_shape_), "n_classes": self.n_classes_}
        ckpt.write(path, ckpt.config_hash(meta), 0, {
            "meta": {"classifier": ckpt.json_record(meta)},
            "classifier": ckpt.module_records(self.module_),
        })
        return path

    @classmethod
    def load(cls, path):
        from . import checkpoint as ckpt

        _, _, sections = ckpt.read(path)
        meta = ckpt.from_json_record(sections["meta"]["classifier"])
        params = meta["params"]
        params["widths"] = tuple(params["widths"])
        clf = cls(**params)
        clf._build(tuple(meta["input_shape"]), meta["n_classes"])
        ckpt.load_module_records(clf.module_, sections["classifier"])
        clf.module_.eval()
        return clf


def predict_from_logits(z):
    """Arg-max over the last axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(z), axis=-1)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 128
    weight_decay: float = 5e-4
    robust: bool = False
    attack_epsilon: float = 0.1
    attack_steps: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.attack_epsilon < 0:
            raise ValueError("attack_epsilon must be non-negative")
        if self.robust and self.attack_steps < 1:
            raise ValueError("attack_steps must be >= 1 when robust")


def _train(config, data, **estimator_params):
    from .datasets import normalize

    clf = LogitClassifier(**asdict(config), **estimator_params)
    return clf.fit(normalize(data.images), data.labels, n_classes=data.n_classes)


def train_standard(config, data, **estimator_params):
    if config.robust:
        raise ValueError("train_standard needs config.robust = False")
    return _train(config, data, **estimator_params)


def train_robust(config, data, **estimator_params):
    if not config.robust:
        raise ValueError("train_robust needs config.robust = True")
    return _train(config, data, **estimator_params)
