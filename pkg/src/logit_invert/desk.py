"""Desk-scale reference pipeline on MNIST at 32x32x1.

Trains (or reuses) a standard classifier, an adversarially robust one, an
independent judge network for perceptual distances, and one inverter per
classifier. Every artifact lives under :func:`desk_home` and training
resumes from the newest checkpoint, so the pipeline can be interrupted.

Run as ``python -m logit_invert.desk``.
"""

import logging
import os
import sys
from pathlib import Path

import numpy as np

from .classifier import LogitClassifier
from .datasets import load_dataset, normalize, to_geometry
from .trainer import LogitInverter

logger = logging.getLogger(__name__)

SIZE = 32

CLASSIFIERS = {
    "standard": dict(arch="resnet", widths=(16, 32, 64, 128), epochs=3, batch_size=128,
                     flip_prob=0.0, crop_pad=2, seed=0),
    "robust": dict(arch="resnet", widths=(16, 32, 64, 128), epochs=3, batch_size=128,
                   flip_prob=0.0, crop_pad=2, seed=0, robust=True, attack_epsilon=0.1,
                   attack_steps=7),
    "judge": dict(arch="inception", widths=(16, 32, 64, 128), epochs=2, batch_size=128,
                  flip_prob=0.0, crop_pad=2, seed=7),
}

INVERTER = dict(n_z=120, g_channels=(64, 32, 16, 8), d_channels=(8, 16, 32, 64),
                embed_dim=128, cond_hidden=128, batch_size=32, total_steps=30000,
                ema_start=1000, ema_decay=0.9999, seed=0, checkpoint_every=1000)


def desk_home():
    return Path(os.environ.get("LOGIT_INVERT_DESK", Path.home() / ".cache" / "logit_invert" / "desk"))


def mnist32(split):
    raw = load_dataset("mnist", split)
    X = to_geometry(normalize(raw.images), SIZE, 1)
    return X, raw.labels.astype(np.int64)


def classifier(kind, X=None, y=None):
    path = desk_home() / f"classifier-{kind}.ckpt"
    if path.exists():
        return LogitClassifier.load(path)
    if X is None:
        X, y = mnist32("train")
    logger.info("training %s classifier", kind)
    clf = LogitClassifier(**CLASSIFIERS[kind], verbose=1).fit(X, y, n_classes=10)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.save(path)
    return clf


def inverter_dir(kind):
    return desk_home() / f"inverter-{kind}"


def inverter(kind, X=None, train=True, **overrides):
    """Fitted inverter for the ``kind`` classifier; trains or resumes if needed."""
    clf = classifier(kind)
    params = {**INVERTER, **overrides}
    d = inverter_dir(kind)
    final = d / f"step-{params['total_steps']:07d}.ckpt"
    if final.exists():
        return LogitInverter.load(final, clf)
    if not train:
        raise FileNotFoundError(f"no finished inverter at {final}")
    if X is None:
        X, _ = mnist32("train")
    inv = LogitInverter(classifier=clf, checkpoint_dir=str(d),
                        diagnostics_path=str(d / "diagnostics.csv"), verbose=500, **params)
    return inv.fit(X)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    kinds = (argv if argv is not None else sys.argv[1:]) or ["standard", "robust"]
    X, y = mnist32("train")
    for kind in ("standard", "robust", "judge"):
        classifier(kind, X, y)
    for kind in kinds:
        inverter(kind, X)


if __name__ == "__main__":
    main()
