"""``logit-invert`` command line.

Every invocation creates ``<out>/<subcommand>-<UTC timestamp>-<seed>/``
holding PNG grids, CSV tables, ``summary.csv`` and ``manifest.txt``.
Exit status: 0 success, 1 runtime failure, 2 configuration error,
3 missing checkpoint.
"""

import argparse
import datetime as dt
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import artifacts, config
from . import experiments as ex
from .attacks import AttackSpec, fgsm, pgd
from .checkpoint import CheckpointError
from .classifier import LogitClassifier, predict_from_logits
from .datasets import N_CLASSES, fetch, load_dataset, natural_patches, normalize, to_geometry
from .trainer import LogitInverter

logger = logging.getLogger("logit_invert")

SUBCOMMANDS = (
    "fetch-data", "train-classifier", "train-inverter", "attack", "reconstruct", "resample",
    "interp-noise", "interp-logits", "manipulate", "spread", "stability", "sweep", "rotate",
    "ood", "report",
)


class MissingCheckpoint(FileNotFoundError):
    pass


# --- helpers ----------------------------------------------------------------


def _load_split(cfg, split, limit):
    raw = load_dataset(cfg["data.name"], split, cfg["data.root"] or None)
    n = raw.images.shape[0] if limit <= 0 else min(limit, raw.images.shape[0])
    X = to_geometry(normalize(raw.images[:n]), cfg["data.size"], cfg["data.channels"])
    return X, raw.labels[:n].astype(np.int64)


def _eval_data(cfg):
    return _load_split(cfg, "test", cfg["data.n_eval"])


def _checkpoint_path(key, value):
    if not value:
        raise MissingCheckpoint(f"{key} is not set")
    path = Path(value)
    if not path.is_file():
        raise MissingCheckpoint(f"{key}: no checkpoint at {path}")
    return path


def _classifier(cfg, key="classifier.checkpoint"):
    return LogitClassifier.load(_checkpoint_path(key, cfg[key]))


def _inverter(cfg, clf, key="inverter.checkpoint"):
    return LogitInverter.load(_checkpoint_path(key, cfg[key]), clf)


def _pipeline(cfg, name):
    clf = _classifier(cfg, f"pipeline.{name}_classifier")
    return clf, _inverter(cfg, clf, f"pipeline.{name}_inverter")


def _spec(cfg):
    return AttackSpec(cfg["attack.epsilon"], cfg["attack.steps"], cfg["attack.step_size"])


def _save_grid(run, name, grid):
    artifacts.write_grid(grid, run / f"{name}.png")
    artifacts.write_captions(run / f"{name}-tiles.csv", grid)


def _pred(clf, X):
    return predict_from_logits(clf.decision_function(X))


# --- subcommands --------------------------------------------------------------
# Each handler writes its tables into ``run`` and returns a dict of extra
# manifest entries.


def cmd_fetch_data(cfg, run, args):
    directory = fetch(cfg["data.name"], cfg["data.root"] or None)
    raw = load_dataset(cfg["data.name"], "test", cfg["data.root"] or None)
    artifacts.write_csv(run / "data.csv", ["name", "directory", "test_images"],
                        [[cfg["data.name"], str(directory), raw.images.shape[0]]])
    return {}


def cmd_train_classifier(cfg, run, args):
    X, y = _load_split(cfg, "train", cfg["data.n_train"])
    params = config.section(cfg, "classifier")
    params.pop("checkpoint")
    clf = LogitClassifier(seed=cfg["run.seed"], **params).fit(X, y, n_classes=N_CLASSES[cfg["data.name"]])
    clf.save(run / "classifier.ckpt")
    artifacts.write_csv(run / "history.csv", ["epoch", "loss", "train_accuracy"],
                        [[h["epoch"], h["loss"], h["train_accuracy"]] for h in clf.history_])
    Xe, ye = _eval_data(cfg)
    adv = fgsm(clf, Xe, ye, cfg["attack.epsilon"])
    artifacts.write_csv(run / "evaluation.csv", ["index", "label", "pred", "pred_fgsm"],
                        zip(range(len(ye)), ye, _pred(clf, Xe), _pred(clf, adv)))
    return {"classifier.sha256": clf.weights_digest()}


def cmd_train_inverter(cfg, run, args):
    clf = _classifier(cfg)
    X, _ = _load_split(cfg, "train", cfg["data.n_train"])
    inv_params = config.section(cfg, "inverter")
    inv_params.pop("checkpoint")
    train_params = config.section(cfg, "trainer")
    inv = LogitInverter(classifier=clf, seed=cfg["run.seed"], checkpoint_dir=str(run / "checkpoints"),
                        diagnostics_path=str(run / "diagnostics.csv"), resume=False,
                        **inv_params, **train_params)
    inv.fit(X)
    inv.save(run / "inverter.ckpt")
    return {"classifier.sha256": clf.weights_digest()}


def cmd_attack(cfg, run, args):
    clf = _classifier(cfg)
    X, y = _eval_data(cfg)
    method = cfg["attack.method"]
    if method == "fgsm":
        adv = fgsm(clf, X, y, cfg["attack.epsilon"])
    elif method == "pgd":
        adv = pgd(clf, X, y, _spec(cfg))
    else:
        raise config.ConfigError(f"attack.method must be fgsm or pgd, got {method!r}")
    linf = np.abs(adv - X).reshape(len(X), -1).max(axis=1)
    artifacts.write_csv(run / "attack.csv", ["index", "label", "pred", "pred_adv", "linf"],
                        zip(range(len(y)), y, _pred(clf, X), _pred(clf, adv), linf.astype(np.float64)))
    n = min(cfg["experiment.n_images"], len(X))
    tiles = [t for i in range(n) for t in (X[i], adv[i])]
    _save_grid(run, "attack", ex.GridArtifact(tiles, n, 2, [{"index": i // 2} for i in range(2 * n)]))
    return {"classifier.sha256": clf.weights_digest()}


def cmd_reconstruct(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, y = _eval_data(cfg)
    noise = ex.sample_noise(len(X), inv.n_z, cfg["run.seed"])
    rec = ex.reconstruct(clf, inv, X, noise)
    header, cols = ["index", "label", "pred", "pred_recon"], [range(len(y)), y, _pred(clf, X), _pred(clf, rec)]
    if cfg["pipeline.judge"]:
        judge = _classifier(cfg, "pipeline.judge")
        header.append("distance")
        cols.append(ex.perceptual_distances(judge, X, rec))
    artifacts.write_csv(run / "reconstruct.csv", header, zip(*cols))
    n = min(cfg["experiment.n_images"], len(X))
    tiles = [t for i in range(n) for t in (X[i], rec[i])]
    _save_grid(run, "reconstruct", ex.GridArtifact(tiles, n, 2, [{"index": i // 2} for i in range(2 * n)]))
    return {"classifier.sha256": clf.weights_digest(), "noise.sha256": artifacts.sha256_array(noise)}


def cmd_resample(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, y = _eval_data(cfg)
    k, n, seed = cfg["experiment.k"], cfg["experiment.n_images"], cfg["run.seed"]
    if cfg["experiment.filter"] == "incorrect":
        grids = ex.incorrect_resample(clf, inv, X, y, k, n, seed)
    elif cfg["experiment.filter"] == "all":
        grids = [ex.resample_grid(clf, inv, X[i], k, seed + i, i) for i in range(min(n, len(X)))]
    else:
        raise config.ConfigError("experiment.filter must be all or incorrect")
    rows = []
    for g in grids:
        src = g.captions[0]["source_index"]
        _save_grid(run, f"resample-{src:05d}", g)
        preds = _pred(clf, np.stack(g.tiles))
        rows += [[src, i - 1, int(y[src]), int(preds[0]), int(p)] for i, p in enumerate(preds) if i > 0]
    artifacts.write_csv(run / "samples.csv", ["index", "draw", "label", "pred", "pred_sample"], rows)
    return {}


def cmd_interp_noise(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, _ = _eval_data(cfg)
    z = clf.decision_function(X)
    rows = []
    for i in range(min(cfg["experiment.n_images"], len(X))):
        eps = ex.sample_noise(2, inv.n_z, cfg["run.seed"] + i)
        g = ex.noise_interpolate(inv, z[i], eps[0], eps[1], cfg["experiment.steps"])
        _save_grid(run, f"interp-noise-{i:05d}", g)
        preds = _pred(clf, np.stack(g.tiles))
        rows += [[i, c["t"], int(p)] for c, p in zip(g.captions, preds)]
    artifacts.write_csv(run / "interpolation.csv", ["index", "t", "pred"], rows)
    return {}


def cmd_interp_logits(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, _ = _eval_data(cfg)
    rows = []
    for i in range(min(cfg["experiment.n_images"], len(X) - 1)):
        g = ex.interpolate_logits(clf, inv, X[i], X[i + 1], cfg["experiment.steps"], cfg["run.seed"] + i)
        _save_grid(run, f"interp-logits-{i:05d}", g)
        preds = _pred(clf, np.stack(g.tiles))
        rows += [[i, c["t"], int(p)] for c, p in zip(g.captions, preds)]
    artifacts.write_csv(run / "interpolation.csv", ["index", "t", "pred"], rows)
    return {}


def cmd_manipulate(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, _ = _eval_data(cfg)
    kind = cfg["manipulation.kind"]
    values = cfg["manipulation.values"]
    if not values and kind == "shift":
        values = ex.SHIFT_VALUES["robust" if clf.robust else "standard"]
    elif not values and kind == "scale":
        values = ex.SCALE_FACTORS
    if kind not in ("shift", "scale", "perturb"):
        raise config.ConfigError("manipulation.kind must be shift, scale or perturb")
    spec = ex.ManipulationSpec(kind, values, cfg["manipulation.sigma_sq"], cfg["manipulation.draws"],
                               cfg["run.seed"])
    n = min(cfg["experiment.n_images"], len(X))
    grid = ex.manipulate(clf, inv, X[:n], spec)
    _save_grid(run, f"manipulate-{kind}", grid)
    src_pred = _pred(clf, X[:n])
    rows = [[c["source_index"], c["value"], int(src_pred[c["source_index"]]), c["predicted"]]
            for c in grid.captions]
    artifacts.write_csv(run / "manipulation.csv", ["index", "value", "pred", "pred_manipulated"], rows)
    noise = grid.meta["noise"]
    artifacts.write_csv(run / "noise.csv", ["index"] + [f"eps{j}" for j in range(noise.shape[1])],
                        [[i] + [float(v) for v in row] for i, row in enumerate(noise)])
    return {"manipulation.kind": kind, "manipulation.values": config.format_value(spec.values),
            "noise.sha256": artifacts.sha256_array(noise)}


def cmd_spread(cfg, run, args):
    clf = _classifier(cfg)
    X, y = _eval_data(cfg)
    groups = ex.group_by_class(clf.decision_function(X), y, cfg["experiment.spread_classes"], cfg["run.seed"])
    per_class, _ = ex.class_spread(groups)
    artifacts.write_csv(run / "spread.csv", ["class", "n", "spread"],
                        [[c, len(groups[c]), per_class[c]] for c in sorted(per_class)])
    return {"spread.classes": ",".join(str(c) for c in sorted(groups))}


def cmd_stability(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, y = _eval_data(cfg)
    parts = ("correct", "incorrect") if cfg["experiment.partition"] == "both" else (cfg["experiment.partition"],)
    rows = []
    for part in parts:
        try:
            r = ex.iterative_stability(clf, inv, X, y, part, cfg["run.seed"])
        except ValueError as exc:
            logger.warning("%s", exc)
            continue
        rows += [[int(i), part, int(y[i]), int(a), int(b)]
                 for i, a, b in zip(r.indices, r.pred_original, r.pred_reconstruction)]
    rows.sort()
    artifacts.write_csv(run / "stability.csv", ["index", "partition", "label", "pred", "pred_recon"], rows)
    return {}


def cmd_sweep(cfg, run, args):
    clf = _classifier(cfg)
    X, _ = _eval_data(cfg)
    kind = cfg["experiment.kind"]
    if kind not in ex.TRANSFORMS:
        raise config.ConfigError("experiment.kind must be brightness or sharpness")
    rows = ex.shift_scale_sweep(clf, X, kind, cfg["experiment.factors"])
    artifacts.write_csv(run / "sweep.csv", ["factor", "mean_shift", "mean_scale"], rows)
    return {"sweep.kind": kind}


def cmd_rotate(cfg, run, args):
    clf = _classifier(cfg)
    inv = _inverter(cfg, clf)
    X, _ = _eval_data(cfg)
    n = min(cfg["experiment.n_images"], len(X))
    grid = ex.rotation_study(clf, inv, X[:n], cfg["run.seed"])
    _save_grid(run, "rotate", grid)
    preds = _pred(clf, np.stack(grid.tiles)).reshape(n, 3)
    artifacts.write_csv(run / "rotation.csv", ["index", "pred", "pred_recon", "pred_rotated_recon"],
                        [[i] + list(map(int, p)) for i, p in enumerate(preds)])
    return {}


def _ood_images(cfg):
    n, size, ch = cfg["data.n_eval"], cfg["data.size"], cfg["data.channels"]
    if cfg["data.ood"] == "patches":
        return natural_patches(n, size, ch, cfg["run.seed"])
    raw = load_dataset(cfg["data.ood"], "test", cfg["data.root"] or None)
    return to_geometry(normalize(raw.images[:n]), size, ch)


def cmd_ood(cfg, run, args):
    pipes = {name: _pipeline(cfg, name) for name in ("robust", "standard")}
    judge = _classifier(cfg, "pipeline.judge")
    X = _ood_images(cfg)
    grid, _, dist = ex.ood_reconstruct(judge, pipes, X, cfg["run.seed"])
    n = min(cfg["experiment.n_images"], len(X))
    _save_grid(run, "ood", ex.GridArtifact(grid.tiles[: 3 * n], n, 3, grid.captions[: 3 * n]))
    artifacts.write_csv(run / "ood.csv", ["index", "pipeline", "distance"],
                        [[i, name, float(dist[name][i])] for i in range(len(X)) for name in pipes])
    return {"judge.sha256": judge.weights_digest()}


def cmd_report(cfg, run, args):
    target = Path(args.run or cfg["report.run"] or "")
    if not (target / "manifest.txt").is_file():
        raise config.ConfigError(f"report needs a run directory with a manifest, got {str(target)!r}")
    manifest = artifacts.read_manifest(target / "manifest.txt")
    sub = manifest["run"]["subcommand"]
    rows = summarize(sub, target)
    artifacts.write_csv(run / "summary.csv", ["metric", "value"], rows)
    lines = [f"run: {target}", f"subcommand: {sub}", ""]
    lines += [f"{m:<32} {v}" for m, v in rows]
    lines += ["", "reference anchors (ImageNet scale, not desk-scale comparable):"]
    for name, value in _flatten(ex.REFERENCE):
        lines.append(f"  {name:<40} {value}")
    (run / "report.txt").write_text("\n".join(lines) + "\n")
    return {"report.target": str(target)}


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


# --- summaries ----------------------------------------------------------------


def _frac(rows, a, b):
    return float(np.mean([r[a] == r[b] for r in rows])) if rows else float("nan")


def summarize(sub, run):
    """Summary metrics derived only from a run directory's CSV tables."""
    run = Path(run)

    def rows(name):
        path = run / name
        return artifacts.read_csv(path) if path.is_file() else []

    if sub == "train-classifier":
        ev = rows("evaluation.csv")
        return [("test_accuracy", _frac(ev, "label", "pred")),
                ("fgsm_accuracy", _frac(ev, "label", "pred_fgsm"))]
    if sub == "train-inverter":
        diag = rows("diagnostics.csv")
        last = diag[-1] if diag else {}
        return [("steps", len(diag)), ("final_d_loss", float(last.get("d_loss", "nan"))),
                ("final_g_loss", float(last.get("g_loss", "nan")))]
    if sub == "attack":
        r = rows("attack.csv")
        return [("clean_accuracy", _frac(r, "label", "pred")),
                ("adversarial_accuracy", _frac(r, "label", "pred_adv")),
                ("max_linf", max((float(x["linf"]) for x in r), default=float("nan")))]
    if sub == "reconstruct":
        r = rows("reconstruct.csv")
        out = [("agreement", _frac(r, "pred", "pred_recon"))]
        if r and "distance" in r[0]:
            out.append(("mean_distance", float(np.mean([float(x["distance"]) for x in r]))))
        return out
    if sub == "resample":
        return [("sample_agreement", _frac(rows("samples.csv"), "pred", "pred_sample"))]
    if sub in ("interp-noise", "interp-logits"):
        r = rows("interpolation.csv")
        return [("tiles", len(r)), ("distinct_predictions", len({x["pred"] for x in r}))]
    if sub == "manipulate":
        r = rows("manipulation.csv")
        out = []
        for v in sorted({float(x["value"]) for x in r}):
            sel = [x for x in r if float(x["value"]) == v]
            out.append((f"agreement@{v!r}", _frac(sel, "pred", "pred_manipulated")))
        return out
    if sub == "spread":
        r = rows("spread.csv")
        return [(f"spread.class{x['class']}", float(x["spread"])) for x in r] + [
            ("spread.mean", float(np.mean([float(x["spread"]) for x in r])) if r else float("nan"))]
    if sub == "stability":
        r = rows("stability.csv")
        return [(f"stability.{p}", _frac([x for x in r if x["partition"] == p], "pred", "pred_recon"))
                for p in ("correct", "incorrect")]
    if sub == "sweep":
        r = rows("sweep.csv")
        f = np.array([float(x["factor"]) for x in r])
        s = np.array([float(x["mean_shift"]) for x in r])
        out = [(f"shift@{float(a)!r}", float(b)) for a, b in zip(f, s)]
        if len(r) > 2 and np.std(s) > 0:
            out.append(("pearson_factor_shift", float(np.corrcoef(f, s)[0, 1])))
        return out
    if sub == "rotate":
        r = rows("rotation.csv")
        return [("recon_agreement", _frac(r, "pred", "pred_recon")),
                ("rotated_recon_agreement", _frac(r, "pred", "pred_rotated_recon"))]
    if sub == "ood":
        r = rows("ood.csv")
        names = list(dict.fromkeys(x["pipeline"] for x in r))
        return [(f"distance.{n}", float(np.mean([float(x["distance"]) for x in r if x["pipeline"] == n])))
                for n in names]
    return []


# --- entry point --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="logit-invert", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="parent directory for the run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--kind", help="manipulate: shift|scale|perturb; sweep: brightness|sharpness")
    p.add_argument("--values", help="comma-separated manipulation values")
    p.add_argument("--run", help="report: run directory to summarize")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    out = list(args.override)
    if args.seed is not None:
        out.append(f"run.seed={args.seed}")
    if args.out is not None:
        out.append(f"run.out={args.out}")
    if args.kind is not None:
        key = "manipulation.kind" if args.subcommand == "manipulate" else "experiment.kind"
        out.append(f"{key}={args.kind}")
    if args.values is not None:
        out.append(f"manipulation.values={args.values}")
    return out


def make_run_dir(out, sub, seed):
    stamp = dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run = Path(out) / f"{sub}-{stamp}-{seed}"
    run.mkdir(parents=True, exist_ok=False)
    return run


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in SUBCOMMANDS}


def run(argv=None):
    """Parse ``argv``, execute one subcommand and return ``(exit status, run dir)``."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load(args.config, _overrides(args))
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2, None
    import torch

    torch.manual_seed(cfg["run.seed"])
    run_dir = make_run_dir(cfg["run.out"], args.subcommand, cfg["run.seed"])
    try:
        extra = HANDLERS[args.subcommand](cfg, run_dir, args) or {}
        if args.subcommand != "report":
            artifacts.write_csv(run_dir / "summary.csv", ["metric", "value"],
                                summarize(args.subcommand, run_dir))
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2, run_dir
    except (MissingCheckpoint, CheckpointError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        (run_dir / "error.txt").write_text(f"{exc}\n")
        return 3, run_dir
    except Exception as exc:  # noqa: BLE001 - any failure becomes exit status 1
        print(f"error: {exc}", file=sys.stderr)
        (run_dir / "error.txt").write_text(traceback.format_exc())
        return 1, run_dir
    outputs = {p.name: artifacts.sha256_file(p) for p in sorted(run_dir.iterdir())
               if p.is_file() and p.suffix in (".png", ".csv", ".ckpt")}
    artifacts.write_manifest(run_dir / "manifest.txt", {
        "run": {"subcommand": args.subcommand, "seed": cfg["run.seed"],
                "config_file": args.config or "none"},
        "config": config.dump(cfg),
        "provenance": extra,
        "outputs": outputs,
    })
    return 0, run_dir


def main(argv=None):
    status, run_dir = run(argv)
    if run_dir is not None and status == 0:
        print(run_dir)
    return status


if __name__ == "__main__":
    sys.exit(main())
