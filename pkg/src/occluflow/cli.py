"""Command-line entry point: ``occluflow <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 a processing stage failed.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .configs import enumerate_configurations
from .experiment import (BASELINE, WORKERS_ENV, ExperimentPlan, PlanError, StageError, format_summary, load_plan,
                         run_plan, stage)
from .features import (FeatureParams, GmdTable, apply_occlusion, compute_table, read_gmd_csv, read_mfb,
                       sequence_gmd, write_gmd_csv)
from .fusion import build_expression_subsets, load_stack, save_stack, split_dataset, train_stack
from .regions import NO_OCCLUSION, load_layout, load_masks, validate_mask, visible_regions
from .svm import Hyper, block_indices, cross_validate, save_model, train
from .synth import load_spec, write_dataset
from .weights import (FacialFramework, read_weight_maps, score_catalog, select_framework, weight_map,
                      write_framework, write_scores, write_weight_maps)

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3


def _layout(args):
    return load_layout(None if args.layout == "default" else args.layout)


def _mask(args, layout):
    if args.mask in (None, "none"):
        return NO_OCCLUSION
    masks = load_masks(None if args.mask_file == "default" else args.mask_file, layout)
    if args.mask not in masks:
        raise PlanError(f"unknown mask {args.mask!r}; available {sorted(masks)}")
    return validate_mask(layout, masks[args.mask])


def _hyper(args) -> Hyper:
    return Hyper(args.C, None if args.gamma == "auto" else float(args.gamma))


def _params(args) -> FeatureParams:
    return FeatureParams(args.bins, args.patch_size, args.tau, args.min_magnitude)


def _sequences(paths):
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            with open(p / "manifest.csv", newline="") as f:
                for row in csv.DictReader(f):
                    out.append(read_mfb(p / f"{row['sequence_id']}.mfb", row["label"], row["sequence_id"]))
        else:
            out.append(read_mfb(p))
    if not out:
        raise PlanError("no input sequences")
    return out


def _regions_arg(args, layout) -> list[int]:
    if args.framework:
        from .weights import read_framework

        return read_framework(args.framework).regions
    if args.regions:
        return [layout.check(int(t)) for t in args.regions.split(",")]
    return list(layout.ids)


def _emit(rows, header, out=None):
    f = open(out, "w", newline="") if out else sys.stdout
    try:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
    finally:
        if out:
            f.close()


# -- commands ---------------------------------------------------------------------

def cmd_enumerate(args) -> int:
    layout = _layout(args)
    mask = _mask(args, layout)
    with stage("enumerate"):
        cat = enumerate_configurations(layout, args.max_size, visible_regions(layout, mask))
    _emit(sorted(cat.counts().items()) + [("total", cat.total)], ["size", "count"])
    if args.output:
        cat.write(args.output)
    return EXIT_OK


def cmd_features(args) -> int:
    layout = _layout(args)
    params = _params(args)
    seqs = _sequences(list(args.inputs) + args.extra_inputs)
    mask = _mask(args, layout)
    with stage("features"):
        if mask.occluded:
            seqs = [apply_occlusion(s, layout, mask, args.noise_sigma, args.seed + i) for i, s in enumerate(seqs)]
        table = compute_table(seqs, layout, params)
        write_gmd_csv(args.output, table)
    print(f"{len(table)} sequences, {table.values.shape[1]} dims -> {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    layout = _layout(args)
    spec = load_spec(args.spec)
    if args.sequences_per_class is not None:
        spec = replace(spec, sequences_per_class=args.sequences_per_class)
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    if args.decay is not None:
        spec = spec.with_decay(args.decay)
    with stage("synth"):
        manifest = write_dataset(spec, layout, args.output)
    print(f"{len(spec.archetypes) * spec.sequences_per_class} sequences -> {manifest.parent}")
    return EXIT_OK


def _expressions(table: GmdTable, wanted: str):
    classes = sorted(set(table.labels))
    if wanted == "all":
        return classes
    if wanted not in classes:
        raise PlanError(f"expression {wanted!r} not in data; have {classes}")
    return [wanted]


def cmd_weights(args) -> int:
    layout = _layout(args)
    table = read_gmd_csv(args.gmd)
    masks = [NO_OCCLUSION] if args.mask is None else [_mask(args, layout)]
    exprs = _expressions(table, args.expression)
    hyper = _hyper(args)
    with stage("score"):
        cat = enumerate_configurations(layout, args.max_size)
        subsets = build_expression_subsets(table.labels, table.ids, range(len(table)), args.seed)
        maps, fws = [], []
        for e in exprs:
            sub = subsets[e]
            res = score_catalog(table.values[sub.rows], sub.positive, cat, hyper, args.folds, args.seed,
                                [table.ids[i] for i in sub.rows], args.bins, layout.ids, _workers(args))
            if args.scores_out:
                write_scores(Path(args.scores_out) / f"scores_{e}.csv", e, res)
            for m in masks:
                wm, _ = weight_map(res, m, layout, e)
                maps.append(wm)
                if args.frameworks_out:
                    fws.append(select_framework(wm, args.n_best, m))
    write_weight_maps(args.output, maps)
    for fw in fws:
        out = Path(args.frameworks_out)
        out.mkdir(parents=True, exist_ok=True)
        write_framework(out / f"framework_{fw.expression}_{fw.occlusion}.csv", fw)
    print(f"{len(maps)} weight maps -> {args.output}")
    return EXIT_OK


def _workers(args) -> int:
    return ExperimentPlan(workers=args.workers).effective_workers()


def _binary_rows(table: GmdTable, expression: str, seed: int):
    sub = build_expression_subsets(table.labels, table.ids, range(len(table)), seed)[expression]
    return sub.rows, sub.positive


def cmd_train(args) -> int:
    layout = _layout(args)
    table = read_gmd_csv(args.gmd)
    (expr,) = _expressions(table, args.expression)
    sel = block_indices(_regions_arg(args, layout), args.bins, layout.ids)
    with stage("train"):
        rows, y = _binary_rows(table, expr, args.seed)
        model = train(table.values[rows], y, _hyper(args), args.seed, [table.ids[i] for i in rows], selected=sel)
        save_model(args.output, model)
    print(f"{expr}: {len(model.dual_coef)} support vectors, converged={model.converged} -> {args.output}")
    return EXIT_OK


def cmd_cv(args) -> int:
    layout = _layout(args)
    table = read_gmd_csv(args.gmd)
    sel = block_indices(_regions_arg(args, layout), args.bins, layout.ids)
    rows_out = []
    with stage("cv"):
        for expr in _expressions(table, args.expression):
            rows, y = _binary_rows(table, expr, args.seed)
            res = cross_validate(table.values[rows], y, args.folds, _hyper(args), args.seed,
                                 [table.ids[i] for i in rows], selected=sel)
            rows_out.append((expr, args.folds, repr(res.mean)))
    _emit(rows_out, ["expression", "folds", "accuracy"])
    return EXIT_OK


def _read_plan_frameworks(path, method, occlusion):
    fws: dict[str, list[tuple[int, int]]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            if row["method"] == method and row["occlusion"] == occlusion:
                fws.setdefault(row["expression"], []).append((int(row["rank"]), int(row["region"])))
    if not fws:
        raise PlanError(f"{path}: no frameworks for method {method!r}, occlusion {occlusion!r}")
    fw_occ = "none" if method == BASELINE else occlusion
    return {e: FacialFramework(e, fw_occ, [r for _, r in sorted(v)]) for e, v in fws.items()}


def cmd_fuse_train(args) -> int:
    layout = _layout(args)
    table = read_gmd_csv(args.gmd)
    mask = _mask(args, layout)
    if args.frameworks:
        fws = _read_plan_frameworks(args.frameworks, args.method, mask.name)
    elif args.weights:
        maps = {(w.expression, w.occlusion): w for w in read_weight_maps(args.weights)}
        classes = sorted(set(table.labels))
        missing = [c for c in classes if (c, mask.name) not in maps]
        if missing:
            raise PlanError(f"{args.weights}: no weight map for {missing} under {mask.name!r}")
        fws = {c: select_framework(maps[(c, mask.name)], args.n_best, mask) for c in classes}
    else:
        fws = {c: FacialFramework(c, mask.name, [r for r in layout.ids if r not in mask.occluded])
               for c in sorted(set(table.labels))}
    with stage("fuse"):
        first, second = split_dataset(table.labels, table.ids, args.fraction, args.seed)
        stack = train_stack(table.values, table.labels, table.ids, first, second, fws, _hyper(args), args.seed,
                            None if args.method == BASELINE else mask, args.bins, layout.ids)
        save_stack(stack, args.output)
    print(f"stack for {stack.occlusion!r} ({len(stack.classes)} classes) -> {args.output}")
    return EXIT_OK


def cmd_predict(args) -> int:
    layout = _layout(args)
    stack = load_stack(args.bundle)
    params = _params(args)
    if args.gmd:
        t = read_gmd_csv(args.gmd)
        ids, X = t.ids, t.values
    else:
        seqs = _sequences(args.inputs)
        ids = [s.sequence_id for s in seqs]
        with stage("features"):
            X = np.array([sequence_gmd(s, layout, params) for s in seqs])
    with stage("predict"):
        labels, proba = stack.predict_gmd(X)
    _emit([(i, lab, *map(repr, map(float, p))) for i, lab, p in zip(ids, labels, proba)],
          ["sequence_id", "predicted"] + [f"p_{c}" for c in stack.classes], args.output)
    return EXIT_OK


def cmd_run_plan(args) -> int:
    plan = load_plan(args.plan)
    if args.output:
        plan = replace(plan, output=str(Path(args.output).resolve()))
    if args.runs is not None:
        plan = replace(plan, runs=args.runs)
    if args.no_figures:
        plan = replace(plan, figures=False)
    report = run_plan(plan)
    print(format_summary(report))
    print(f"report -> {report.output / 'report.csv'}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from .report import emit_heatmap

    layout = _layout(args)
    occ = args.mask or "none"
    maps = {(w.expression, w.occlusion): w for w in read_weight_maps(args.weights)}
    exprs = sorted({e for e, o in maps if o == occ}) if args.expression == "all" else [args.expression]
    if not exprs or any((e, occ) not in maps for e in exprs):
        raise PlanError(f"{args.weights}: no weight map for {args.expression!r} under {occ!r}")
    out = Path(args.output)
    with stage("report"):
        for e in exprs:
            pgm, _ = emit_heatmap(maps[(e, occ)], layout, out / f"{e}_{occ}")
            print(pgm)
        if args.png:
            from .report import plot_heatmaps

            print(plot_heatmaps(maps, layout, exprs, [occ], out / f"heatmaps_{occ}.png"))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occluflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def layout_opts(sp, mask=True):
        sp.add_argument("--layout", default="default", help="layout file (default: shipped 25-region layout)")
        if mask:
            sp.add_argument("--mask", default=None, help="occlusion mask name")
            sp.add_argument("--mask-file", default="default")

    def feature_opts(sp):
        d = FeatureParams()
        sp.add_argument("--bins", type=int, default=d.bins)
        sp.add_argument("--patch-size", type=int, default=d.patch_size)
        sp.add_argument("--tau", type=float, default=d.tau)
        sp.add_argument("--min-magnitude", type=float, default=d.min_magnitude)

    def model_opts(sp):
        sp.add_argument("--C", type=float, default=1.0)
        sp.add_argument("--gamma", default="auto")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("enumerate", help="count connected region configurations")
    layout_opts(sp)
    sp.add_argument("--max-size", type=int, default=8)
    sp.add_argument("--output", help="write the catalog, one configuration per line")
    sp.set_defaults(func=cmd_enumerate)

    sp = sub.add_parser("features", help="motion sequences -> GMD table")
    layout_opts(sp)
    feature_opts(sp)
    sp.add_argument("inputs", nargs="*", help=".mfb files or dataset directories")
    sp.add_argument("--in", dest="extra_inputs", action="append", default=[], help="input file (repeatable)")
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("synth", help="write a synthetic motion dataset")
    layout_opts(sp, mask=False)
    sp.add_argument("--spec", default="default", help="TOML dataset description")
    sp.add_argument("--sequences-per-class", type=int)
    sp.add_argument("--decay", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("weights", help="score configurations and transfer region weights")
    layout_opts(sp)
    model_opts(sp)
    sp.add_argument("--gmd", "--features", dest="gmd", required=True)
    sp.add_argument("--expression", "--expr", dest="expression", default="all")
    sp.add_argument("--max-size", type=int, default=4)
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--bins", type=int, default=12)
    sp.add_argument("--n-best", type=int, default=6)
    sp.add_argument("--workers", type=int, default=1, help=f"process count ({WORKERS_ENV} overrides)")
    sp.add_argument("--scores-out", help="directory for per-expression configuration accuracies")
    sp.add_argument("--frameworks-out", help="directory for the n-best frameworks")
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.set_defaults(func=cmd_weights)

    for name, func, hlp in (("train", cmd_train, "train one expression-vs-rest model"),
                            ("cv", cmd_cv, "k-fold accuracy of expression-vs-rest models")):
        sp = sub.add_parser(name, help=hlp)
        layout_opts(sp, mask=False)
        model_opts(sp)
        sp.add_argument("--gmd", "--features", dest="gmd", required=True)
        sp.add_argument("--expression", "--expr", dest="expression", required=(name == "train"), default="all")
        sp.add_argument("--framework", help="framework CSV restricting the regions")
        sp.add_argument("--regions", help="comma-separated region ids")
        sp.add_argument("--bins", type=int, default=12)
        if name == "train":
            sp.add_argument("--output", "--out", dest="output", required=True)
        else:
            sp.add_argument("--folds", type=int, default=10)
        sp.set_defaults(func=func)

    sp = sub.add_parser("fuse-train", help="train a two-layer stack for one mask")
    layout_opts(sp)
    model_opts(sp)
    sp.add_argument("--gmd", "--features", dest="gmd", required=True)
    sp.add_argument("--frameworks", help="frameworks.csv from run-plan")
    sp.add_argument("--method", default="fixed-6")
    sp.add_argument("--weights", help="weights.csv; top --n-best regions per expression")
    sp.add_argument("--n-best", type=int, default=6)
    sp.add_argument("--fraction", type=float, default=0.4)
    sp.add_argument("--bins", type=int, default=12)
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.set_defaults(func=cmd_fuse_train)

    sp = sub.add_parser("predict", help="classify sequences with a stack bundle")
    layout_opts(sp, mask=False)
    feature_opts(sp)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--gmd", help="precomputed GMD table instead of sequences")
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--output", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("run-plan", help="run a full experiment plan")
    sp.add_argument("plan", help="plan file, or 'default'")
    sp.add_argument("--output", help="override the plan's output directory")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_run_plan)

    sp = sub.add_parser("heatmap", help="render weight maps as 5x5 graymaps")
    layout_opts(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--expression", default="all")
    sp.add_argument("--png", action="store_true", help="also draw a matplotlib panel")
    sp.add_argument("--output", required=True, help="output directory")
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "predict" and not (args.gmd or args.inputs):
        print("occluflow: error: predict needs --gmd or input sequences", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except StageError as exc:
        print(f"occluflow: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, OSError, KeyError) as exc:
        print(f"occluflow: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
