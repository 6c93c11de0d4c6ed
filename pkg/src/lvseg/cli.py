"""Command-line entry point (``lvseg``).

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .classifier import (ForestHyper, classification_report, cross_validate, load_model,
                         save_model, train_forest)
from .errors import IoFailure, LengthMismatch, LvSegError, MissingLabels
from .features import read_features_csv, slice_features, write_features_csv
from .metrics import METRIC_ROWS, evaluate_masks
from .phantom import PhantomSpec, generate_dataset
from .volume_io import extract_slices, load_ground_truth, load_volume, read_pgm, write_mask_pgm

log = logging.getLogger("lvseg")

EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> pl.PipelineConfig:
    return pl.load_config(args.config) if getattr(args, "config", None) else pl.PipelineConfig()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    spec = PhantomSpec(n_slices=args.slices, image_size=(args.rows, args.cols),
                       noise_sigma=args.noise_sigma, basal_fraction=args.basal_fraction,
                       mid_fraction=args.mid_fraction, apical_fraction=args.apical_fraction,
                       cavity_intensity=args.cavity, myocardium_intensity=args.myocardium,
                       background_intensity=args.background, seed=args.seed)
    spec.validate()
    paths = generate_dataset(args.out, args.cases, spec)
    print(f"wrote {len(paths)} phantom cases to {args.out}")


def cmd_config(args):
    pl.save_config(pl.PipelineConfig(), args.out)
    print(f"wrote default config to {args.out}")


def cmd_label(args):
    if args.every < 1:
        raise UsageError("--every must be >= 1")
    rows = []
    sources = pl.discover_cases(args.inp)
    for src in sources[:: args.every]:
        vol = load_volume(src.image)
        labels = vol.labels or [""] * vol.n_slices
        for k, lab in enumerate(labels):
            rows.append((src.case_id, k + 1, vol.n_slices, pl.SliceClass.parse(lab) if lab else None))
    pl.write_classes_csv(args.out, rows)
    blank = sum(r[3] is None for r in rows)
    print(f"{len(rows)} slices from {len(sources[:: args.every])} cases; {blank} await manual labels")


def cmd_features(args):
    cfg = _config(args)
    table = pl.read_classes_csv(args.labels)
    feats = []
    for src in pl.discover_cases(args.inp):
        if src.case_id not in table:
            continue
        labels = table[src.case_id]
        vol = load_volume(src.image)
        vol.case_id = src.case_id
        if len(labels) != vol.n_slices:
            raise MissingLabels(f"{src.case_id}: {len(labels)} labels for {vol.n_slices} slices")
        for f in slice_features(extract_slices(vol), cfg.daisy, cfg.working_size, labels):
            if f.label is not None:
                feats.append(f)
    if not feats:
        raise MissingLabels("no labelled slices matched the dataset")
    write_features_csv(args.out, feats)
    print(f"wrote {len(feats)} feature vectors of length {len(feats[0].values)}")


def cmd_train(args):
    data = read_features_csv(args.features)
    hyper = ForestHyper(n_trees=args.trees, seed=args.seed)
    model = train_forest(data, hyper, workers=args.workers)
    save_model(model, args.out)
    print(f"trained {len(model.trees)} trees on {len(data)} samples")


def cmd_cross_validate(args):
    data = read_features_csv(args.features)
    rep = cross_validate(data, args.k, ForestHyper(n_trees=args.trees, seed=args.seed),
                         workers=args.workers)
    for i, acc in enumerate(rep.fold_accuracies, 1):
        print(f"fold {i}: {acc:.4f}")
    print(f"mean accuracy: {rep.mean_accuracy:.4f}")


def cmd_classify(args):
    cfg = _config(args)
    model = load_model(args.model)
    rows = []
    for src in pl.discover_cases(args.inp):
        vol = load_volume(src.image)
        for k, c in enumerate(pl.run_phase1(vol, model, cfg)):
            rows.append((src.case_id, k + 1, vol.n_slices, c))
    pl.write_classes_csv(args.out, rows)
    if args.report:
        table = pl.read_classes_csv(args.report)
        pred, truth = [], []
        for case_id, p, _, c in rows:
            t = table.get(case_id, [])
            if p <= len(t) and t[p - 1] is not None:
                pred.append(c)
                truth.append(t[p - 1])
        for cls, m in classification_report(pred, truth).items():
            print(f"{cls.value:<14} precision {m['precision']:.3f} recall {m['recall']:.3f} "
                  f"f1 {m['f1']:.3f}")
    print(f"classified {len(rows)} slices")


def cmd_segment(args):
    cfg = pl.load_config(args.config)
    if not args.classes and not args.oracle_classes:
        raise UsageError("segment needs --classes or --oracle-classes")
    table = pl.read_classes_csv(args.classes) if args.classes else None
    report = pl.run_study(args.inp, cfg, args.gt, classes=table, oracle=args.oracle_classes,
                          ablation=args.ablation, workers=args.workers,
                          keep_masks=args.dump_masks)
    written = pl.emit_report(report, args.out, figures=not args.no_figures)
    if args.dump_masks:
        for case_id, masks in report.masks.items():
            d = Path(args.out) / "masks" / case_id
            d.mkdir(parents=True, exist_ok=True)
            for k, m in enumerate(masks, 1):
                write_mask_pgm(d / f"mask_{k:03d}.pgm", m)
    print(pl.summary_text(report), end="")
    print(f"wrote {len(written)} report files to {args.out}")


def cmd_tune(args):
    if not args.gt:
        raise UsageError("tune requires --gt (tuning scores against ground truth)")
    cfg = _config(args)
    grids = pl.load_grid(args.grid)
    cases = [pl.load_case(src, cfg, True) for src in pl.discover_cases(args.inp)]
    scores: dict = {}
    registry = pl.grid_search_params(cases, grids, cfg, workers=args.workers, scores=scores)
    for cls, rows in scores.items():
        p = registry.params[cls]
        print(f"{cls.value}: lambda1={p.lambda1} lambda2={p.lambda2} nu={p.nu} "
              f"shrink={registry.shrink[cls]} (best mean Dice "
              f"{max(d for _, d in rows):.4f} over {len(rows)} points)")
    pl.save_registry(registry, args.out)


def _pred_masks(d: Path) -> list[np.ndarray]:
    files = sorted(d.glob("mask_*.pgm"))
    if not files:
        raise IoFailure(f"no mask_NNN.pgm files in {d}")
    return [read_pgm(f) > 0 for f in files]


def cmd_evaluate(args):
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    gt_sources = {s.case_id: s for s in pl.discover_cases(gt_root)}
    case_dirs = sorted(p for p in pred_root.iterdir() if p.is_dir())
    if not case_dirs:
        raise IoFailure(f"no case directories under {pred_root}")
    rows = []
    for d in case_dirs:
        src = gt_sources.get(d.name)
        if src is None or src.gt is None:
            log.warning("no ground truth for %s", d.name)
            continue
        masks = _pred_masks(d)
        gt = load_ground_truth(src.gt, args.lv_label, size=masks[0].shape)
        if len(gt) != len(masks):
            raise LengthMismatch(f"{d.name}: {len(masks)} masks vs {len(gt)} label slices")
        for k, (m, g) in enumerate(zip(masks, gt), 1):
            if g.pixels.any():
                rows.append((d.name, k, evaluate_masks(m, g.pixels)))
    if not rows:
        raise MissingLabels("no prediction matched a non-empty ground-truth slice")
    try:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case_id", "p"] + pl.METRIC_FIELDS)
            for case_id, p, rep in rows:
                w.writerow([case_id, p] + [repr(float(v)) for v in rep.as_dict().values()])
    except OSError as exc:
        raise IoFailure(f"cannot write {args.out}: {exc}") from exc
    for key, title in METRIC_ROWS.items():
        vals = np.array([getattr(r, key) for _, _, r in rows])
        vals = vals[np.isfinite(vals)]
        print(f"{title:<36}{vals.mean() if len(vals) else float('nan'):.4f}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lvseg", description="Two-phase LV segmentation of short-axis CMR.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write seeded phantom studies")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--slices", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=200)
    p.add_argument("--cols", type=int, default=200)
    p.add_argument("--noise-sigma", type=float, default=8.0)
    p.add_argument("--basal-fraction", type=float, default=0.3)
    p.add_argument("--mid-fraction", type=float, default=0.5)
    p.add_argument("--apical-fraction", type=float, default=0.2)
    p.add_argument("--cavity", type=float, default=200.0)
    p.add_argument("--myocardium", type=float, default=30.0)
    p.add_argument("--background", type=float, default=60.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="write the default pipeline config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("label", help="list slices of every k-th case for manual labelling")
    p.add_argument("--every", type=int, default=5)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("features", help="compute DAISY+IPI vectors for labelled slices")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the slice classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cross-validate", help="stratified k-fold accuracy")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("classify", help="predict slice classes for every case")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--report", help="labels CSV to score the predictions against")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("segment", help="seed, segment and report")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--classes")
    p.add_argument("--oracle-classes", action="store_true",
                   help="use the labels stored with each case instead of --classes")
    p.add_argument("--gt", action="store_true")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("tune", help="grid-search the per-class parameters")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--gt", action="store_true")
    p.add_argument("--grid", required=True)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", help="score dumped masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lv-label", type=int, default=3)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"lvseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # bad option values caught by dataclass validation
        print(f"lvseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LvSegError as exc:
        print(f"lvseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"lvseg {args.command}: {exc}", file=sys.stderr)
        return IoFailure.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
