"""Flat ``section.key = value`` configuration files.

Every key has a documented default in :data:`DEFAULTS`; the default's type
decides how a value is parsed. Unknown keys are rejected.
"""

import math
from pathlib import Path


class ConfigError(ValueError):
    pass


# (default, type) per key. Types: int, float, bool, str, ints, floats, optint.
DEFAULTS = {
    "run.seed": (0, "int"),
    "run.out": ("runs", "str"),
    "data.name": ("mnist", "str"),
    "data.root": ("", "str"),
    "data.size": (32, "int"),
    "data.channels": (1, "int"),
    "data.n_train": (0, "int"),
    "data.n_eval": (256, "int"),
    "data.ood": ("patches", "str"),
    "classifier.arch": ("resnet", "str"),
    "classifier.widths": ((16, 32, 64, 128), "ints"),
    "classifier.learning_rate": (0.05, "float"),
    "classifier.momentum": (0.9, "float"),
    "classifier.weight_decay": (5e-4, "float"),
    "classifier.epochs": (3, "int"),
    "classifier.batch_size": (128, "int"),
    "classifier.robust": (False, "bool"),
    "classifier.attack_epsilon": (0.1, "float"),
    "classifier.attack_steps": (7, "int"),
    "classifier.flip_prob": (0.0, "float"),
    "classifier.crop_pad": (2, "int"),
    "classifier.checkpoint": ("", "str"),
    "inverter.n_z": (120, "int"),
    "inverter.g_channels": ((64, 32, 16, 8), "ints"),
    "inverter.d_channels": ((8, 16, 32, 64), "ints"),
    "inverter.embed_dim": (128, "int"),
    "inverter.cond_hidden": (128, "int"),
    "inverter.attention_res": (None, "optint"),
    "inverter.standardize_logits": (False, "bool"),
    "inverter.calibration_batches": (16, "int"),
    "inverter.checkpoint": ("", "str"),
    "trainer.lr_g": (1e-4, "float"),
    "trainer.lr_d": (5e-4, "float"),
    "trainer.adam_beta1": (0.0, "float"),
    "trainer.adam_beta2": (0.999, "float"),
    "trainer.disc_steps_per_gen": (2, "int"),
    "trainer.ema_decay": (0.9999, "float"),
    "trainer.ema_start": (1000, "int"),
    "trainer.batch_size": (128, "int"),
    "trainer.total_steps": (30000, "int"),
    "trainer.init": ("orthogonal", "str"),
    "trainer.checkpoint_every": (1000, "int"),
    "attack.method": ("fgsm", "str"),
    "attack.epsilon": (0.1, "float"),
    "attack.steps": (7, "int"),
    "attack.step_size": (None, "optfloat"),
    "manipulation.kind": ("shift", "str"),
    "manipulation.values": ((), "floats"),
    "manipulation.sigma_sq": (0.55, "float"),
    "manipulation.draws": (5, "int"),
    "experiment.n_images": (4, "int"),
    "experiment.k": (8, "int"),
    "experiment.steps": (8, "int"),
    "experiment.partition": ("both", "str"),
    "experiment.filter": ("all", "str"),
    "experiment.kind": ("brightness", "str"),
    "experiment.factors": ((0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2), "floats"),
    "experiment.spread_classes": (10, "int"),
    "pipeline.robust_classifier": ("", "str"),
    "pipeline.robust_inverter": ("", "str"),
    "pipeline.standard_classifier": ("", "str"),
    "pipeline.standard_inverter": ("", "str"),
    "pipeline.judge": ("", "str"),
    "report.run": ("", "str"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse(key, text, kind):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError("non-finite")
            return v
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("expected true/false")
        if kind == "str":
            return text
        if kind in ("optint", "optfloat"):
            if text.lower() in ("", "none"):
                return None
            return int(text) if kind == "optint" else float(text)
        if kind in ("ints", "floats"):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(int(p) if kind == "ints" else float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    raise AssertionError(kind)


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(lines, source="<config>"):
    """Return ``{key: raw text}`` from config lines, rejecting unknown keys."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = value
    return out


def load(path=None, overrides=(), text=None):
    """Effective configuration: defaults, then file, then ``key=value`` overrides."""
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_lines(p.read_text().splitlines(), str(path)))
    if text is not None:
        raw.update(parse_lines(text.splitlines()))
    raw.update(parse_lines(list(overrides), "--override"))
    for key, value in raw.items():
        cfg[key] = _parse(key, value, DEFAULTS[key][1])
    return cfg


def dump(cfg):
    return {k: format_value(cfg[k]) for k in sorted(cfg)}


def section(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
