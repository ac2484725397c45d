"""Command-line interface: synth, train, predict, evaluate, crossval."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError
from .features import FeatureConfig
from .ferns import TrainConfig, classify_image
from .formats import (load_model, read_covariance_raster, read_label_map, read_posteriors,
                      save_model, write_covariance_raster, write_label_map, write_posteriors)
from .metrics import (calibration_curve, confusion, entropy_histogram, format_report,
                      metrics)
from .optimize import IterConfig, PreselectConfig, write_trace_csv
from .pipeline import STRATEGIES, evaluate_on_mask, fit_model, stripe_masks
from .polsar import precompute_image
from .synth import LAYOUTS, PRESETS, generate_scene, load_preset

log = logging.getLogger("polferns")

MANIFEST = "run.manifest"


class UsageError(Exception):
    """Flag combinations argparse cannot check on its own; exit code 2."""


# helpers

class _Run:
    """Collects manifest entries and per-step timings for one command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.config: dict = {}
        self.timings: dict[str, float] = {}
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str, name: str) -> Path:
        p = self.out / name
        self.outputs[key] = str(p)
        return p

    def timed(self, key: str):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[key] = round(time.perf_counter() - self.t, 6)

        return _T()

    def write_manifest(self) -> None:
        flags = {k: v for k, v in vars(self.args).items() if k != "func"}
        doc = {
            "command": self.args.command,
            "version": __version__,
            "seed": flags.get("seed"),
            "flags": flags,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_s": self.timings,
        }
        with open(self.out / MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _load_scene(run: _Run, args):
    run.inputs.update(image=str(args.image), labels=str(args.labels))
    with run.timed("load"):
        img = precompute_image(read_covariance_raster(args.image))
        labels = read_label_map(args.labels, args.classes)
    if labels.labels.shape != img.shape:
        raise ConfigurationError(
            f"label map is {labels.width}x{labels.height} but image is {img.width}x{img.height}")
    return img, labels


def _train_configs(args) -> tuple[TrainConfig, PreselectConfig, IterConfig]:
    feats = FeatureConfig(r_max=args.r_max, s_max=args.s_max)
    tc = TrainConfig(num_ferns=args.ferns, fern_size=args.fern_size,
                     samples_per_class=args.samples_per_class, smoothing_u=args.smoothing,
                     seed=args.seed, features=feats, prior=args.prior)
    pc = PreselectConfig(num_ferns=args.ferns, fern_size=args.fern_size,
                         pool_size=args.pool_size, ig_threshold=args.ig_min,
                         corr_threshold=args.corr_max)
    ic = IterConfig(it_min=args.it_min, delta_patience=args.patience)
    return tc, pc, ic


def _config_dict(tc: TrainConfig, pc: PreselectConfig, ic: IterConfig, args) -> dict:
    d = {"train": {k: getattr(tc, k) for k in ("num_ferns", "fern_size", "samples_per_class",
                                                "smoothing_u", "seed", "prior")},
         "features": vars(tc.features).copy(), "strategy": args.optimize}
    if args.optimize in ("preselect", "both"):
        d["preselect"] = vars(pc).copy()
    if args.optimize in ("iterative", "both"):
        d["iterative"] = vars(ic).copy()
        d["val_fraction"] = args.val_fraction
    return d


# commands

def cmd_synth(args) -> None:
    run = _Run(args)
    preset = load_preset(args.preset)
    cfg = preset.scene_config(args.width, args.height, args.seed, looks=args.looks,
                              layout=args.layout)
    if args.classes is not None:
        if not 2 <= args.classes <= len(cfg.signatures):
            raise UsageError(f"--classes must lie in 2..{len(cfg.signatures)} for this preset")
        sigs = cfg.signatures[:args.classes]
        rc = cfg.ribbon_class if cfg.ribbon_class and cfg.ribbon_class <= args.classes else None
        cfg = preset.scene_config(args.width, args.height, args.seed, looks=args.looks,
                                  layout=args.layout, signatures=sigs, ribbon_class=rc,
                                  ribbons=cfg.ribbons if rc else 0)
    run.config = {"preset": preset.name, "width": cfg.width, "height": cfg.height,
                  "looks": cfg.looks, "layout": cfg.layout, "seed": cfg.seed,
                  "classes": len(cfg.signatures), "seeds": cfg.seeds, "ribbons": cfg.ribbons,
                  "class_names": [s.name for s in cfg.signatures],
                  "precision": args.precision}
    with run.timed("generate"):
        img, labels = generate_scene(cfg)
    with run.timed("write"):
        write_covariance_raster(img.cov, run.path("image", "scene.psc"), args.precision)
        write_label_map(labels, run.path("labels", "labels.pgm"))
    run.write_manifest()
    print(f"wrote {run.outputs['image']} and {run.outputs['labels']}")


def cmd_train(args) -> None:
    run = _Run(args)
    img, labels = _load_scene(run, args)
    tc, pc, ic = _train_configs(args)
    run.config = _config_dict(tc, pc, ic, args)
    run.config["classes"] = labels.num_classes
    with run.timed("train"):
        fit = fit_model(img, labels, tc, args.optimize, pc, ic, args.val_fraction)
    save_model(fit.model, run.path("model", "model.txt"))
    if fit.trace:
        write_trace_csv(fit.trace, run.path("trace", "trace.csv"))
    run.config["result"] = {"ferns": len(fit.model.ferns),
                            "features": fit.model.num_features}
    run.write_manifest()
    print(f"trained M={len(fit.model.ferns)} N={fit.model.num_features}; "
          f"wrote {run.outputs['model']}")


def cmd_predict(args) -> None:
    run = _Run(args)
    run.inputs.update(model=str(args.model), image=str(args.image))
    with run.timed("load"):
        model = load_model(args.model)
        img = precompute_image(read_covariance_raster(args.image))
    if args.classes is not None and args.classes != model.num_classes:
        raise ConfigurationError(
            f"model has {model.num_classes} classes but {args.classes} were requested")
    run.config = {"classes": model.num_classes, "ferns": len(model.ferns)}
    with run.timed("classify"):
        pred, post = classify_image(model, img, threads=args.threads)
    write_label_map(pred, run.path("prediction", "prediction.pgm"))
    if args.posteriors:
        write_posteriors(post, run.path("posteriors", "posteriors.npy"))
    run.write_manifest()
    print(f"wrote {run.outputs['prediction']}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "nan" if v != v else repr(float(v))


def cmd_evaluate(args) -> None:
    run = _Run(args)
    if args.calibration and not args.posteriors:
        raise UsageError("--calibration needs --posteriors")
    run.inputs.update(prediction=str(args.pred), reference=str(args.ref))
    ref = read_label_map(args.ref, args.classes)
    L = ref.num_classes
    pred = read_label_map(args.pred, L)
    if pred.labels.shape != ref.labels.shape:
        raise ConfigurationError(f"prediction is {pred.width}x{pred.height} but reference is "
                                 f"{ref.width}x{ref.height}")
    cm = confusion(pred.labels, ref.labels, L)
    report = metrics(cm)
    names = args.class_names.split(",") if args.class_names else None
    if names and len(names) != L:
        raise UsageError(f"--class-names lists {len(names)} names for {L} classes")
    run.config = {"classes": L, "bins": args.bins}
    with open(run.path("report", "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(report, cm, names))
    with open(run.path("metrics", "metrics.kv"), "w", encoding="utf-8") as fh:
        for k, v in report.as_dict().items():
            fh.write(f"{k}={_fmt(v)}\n")
    header = ["reference"] + [f"pred_{c}" for c in range(1, L + 1)]
    _write_csv(run.path("confusion", "confusion.csv"), header,
               [[c] + [int(v) for v in row] for c, row in enumerate(cm, start=1)])
    if args.posteriors:
        run.inputs["posteriors"] = str(args.posteriors)
        post = read_posteriors(args.posteriors)
        if post.shape != ref.labels.shape + (L,):
            raise ConfigurationError(f"posterior raster has shape {post.shape}, "
                                     f"expected {ref.labels.shape + (L,)}")
        probs, edges = entropy_histogram(post, args.bins)
        _write_csv(run.path("entropy", "entropy_histogram.csv"),
                   ["bin_lo", "bin_hi", "probability"],
                   [[_fmt(a), _fmt(b), _fmt(p)] for a, b, p in zip(edges[:-1], edges[1:], probs)])
        if args.calibration:
            cc = calibration_curve(post, pred.labels, ref.labels, args.bins)
            _write_csv(run.path("calibration", "calibration.csv"),
                       ["bin_lo", "bin_hi", "confidence", "accuracy", "count"],
                       [[_fmt(a), _fmt(b), _fmt(c), _fmt(acc), int(n)] for a, b, c, acc, n in
                        zip(cc.edges[:-1], cc.edges[1:], cc.confidence, cc.accuracy, cc.count)])
    run.write_manifest()
    print(format_report(report, cm, names), end="")


CROSSVAL_METRICS = ("oa", "aa", "kappa", "f1_macro", "miou")


def cmd_crossval(args) -> None:
    run = _Run(args)
    if args.folds < 2:
        raise UsageError("--folds must be >= 2")
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    img, labels = _load_scene(run, args)
    tc, pc, ic = _train_configs(args)
    run.config = _config_dict(tc, pc, ic, args)
    run.config.update(folds=args.folds, repeats=args.repeats, classes=labels.num_classes)
    masks = stripe_masks(img.width, img.height, args.folds)
    rows = []
    with run.timed("crossval"):
        for k, test in enumerate(masks):
            for rep in range(args.repeats):
                seed = args.seed + k * args.repeats + rep
                cfg = TrainConfig(tc.num_ferns, tc.fern_size, tc.samples_per_class,
                                  tc.smoothing_u, seed, tc.features, tc.prior)
                fit = fit_model(img, labels, cfg, args.optimize, pc, ic, args.val_fraction,
                                mask=~test)
                report = evaluate_on_mask(fit.model, img, labels, test, args.threads)[0]
                rows.append([k, rep, seed] + [getattr(report, m) for m in CROSSVAL_METRICS])
                log.info("fold %d repeat %d: AA=%.4f", k, rep, report.aa)
    _write_csv(run.path("folds", "crossval_folds.csv"),
               ["fold", "repeat", "seed"] + list(CROSSVAL_METRICS),
               [r[:3] + [_fmt(v) for v in r[3:]] for r in rows])
    vals = np.array([r[3:] for r in rows], dtype=np.float64)
    mean = vals.mean(axis=0)
    std = vals.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros_like(mean)
    lines = [f"{m} = {mu:.4f} +- {sd:.4f}" for m, mu, sd in zip(CROSSVAL_METRICS, mean, std)]
    with open(run.path("summary", "crossval_summary.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    run.write_manifest()
    print("\n".join(lines))


# parser

def _add_scene_inputs(p) -> None:
    p.add_argument("--image", required=True, help="covariance raster (.psc)")
    p.add_argument("--labels", required=True, help="reference label map (.pgm)")
    p.add_argument("--classes", type=int, help="class count L (default: largest label)")


def _add_train_flags(p) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--ferns", type=int, default=30, help="number of ferns M")
    g.add_argument("--fern-size", type=int, default=8, help="features per fern")
    g.add_argument("--samples-per-class", type=int, default=3000)
    g.add_argument("--smoothing", type=float, default=1.0, help="Laplace constant u")
    g.add_argument("--prior", choices=("uniform", "empirical"), default="uniform")
    g.add_argument("--r-max", type=float, default=25.0, help="max region offset (px)")
    g.add_argument("--s-max", type=int, default=9, help="max region side (px)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--optimize", choices=STRATEGIES, default="none")
    g = p.add_argument_group("preselection")
    g.add_argument("--pool-size", type=int, default=2000)
    g.add_argument("--ig-min", type=float, default=0.01)
    g.add_argument("--corr-max", type=float, default=0.9)
    g = p.add_argument_group("iterative search")
    g.add_argument("--it-min", type=int, default=30)
    g.add_argument("--patience", type=int, default=15)
    g.add_argument("--val-fraction", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polferns",
                                     description="Random Ferns for PolSAR covariance images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="max worker threads for classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--preset", choices=sorted(PRESETS), default="five-class")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--classes", type=int, help="use the first L preset classes")
    p.add_argument("--looks", type=int, default=None)
    p.add_argument("--layout", choices=LAYOUTS, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_scene_inputs(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify an image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", type=int, help="expected class count")
    p.add_argument("--posteriors", action="store_true", help="also write posteriors.npy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a prediction against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--posteriors", help="posterior raster (.npy) for entropy/calibration")
    p.add_argument("--calibration", action="store_true")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--class-names", help="comma-separated names for the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="vertical-stripe cross-validation")
    _add_scene_inputs(p)
    _add_train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("polferns: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"polferns: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"polferns: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
