"""Experiment plans and the end-to-end protocol.

A plan is a flat ``key = value`` text file.  Relative paths inside it are
resolved against the plan file's directory.  Running a plan does, per mask
(plus the unoccluded case): configuration scoring, weight transfer,
framework selection, then ``runs`` seeded 40/60 splits, each training one
stack per method and cross-validating its fusion layer on the second part.

Methods:

* ``fixed-<n_best>``: the n_best top-weighted visible regions per expression
* ``best-n``: the framework size with the best cross-validated accuracy
* ``baseline``: all regions, trained unoccluded, tested on occluded data
"""
from __future__ import annotations

import contextlib
import csv
import os
import shutil
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .configs import ConfigurationCatalog, enumerate_configurations
from .features import (FeatureParams, GmdTable, MotionSequence, apply_occlusion, compute_table, occlude_gmd,
                       read_gmd_csv, read_mfb, write_gmd_csv)
from .fusion import (FusionStack, build_expression_subsets, evaluate_fusion_cv_many, save_stack,
                     split_dataset, train_stack)
from .regions import NO_OCCLUSION, FacialLayout, OcclusionMask, load_layout, load_masks, validate_mask
from .svm import Hyper, block_indices, cross_validate
from .synth import generate_dataset, load_spec
from .weights import (FacialFramework, WeightMap, score_catalog, select_framework, selectable_regions,
                      sweep_framework_sizes, weight_map, write_weight_maps)

WORKERS_ENV = "OCCLUFLOW_WORKERS"
BASELINE = "baseline"
BEST_N = "best-n"


class PlanError(ValueError):
    """Invalid plan: bad key, value, or referenced file (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentPlan:
    dataset: str = "synthetic"
    synth_spec: str = "default"
    sequences_per_class: int | None = None
    decay: float | None = None
    layout: str = "default"
    mask_file: str = "default"
    masks: tuple[str, ...] = ("Occ1", "Occ2", "Occ3", "Occ4", "Occ5")
    max_size: int = 4
    n_best: int = 6
    C: float = 1.0
    gamma: float | None = None
    master_seed: int = 2019
    runs: int = 10
    folds: int = 10
    first_fraction: float = 0.4
    noise_sigma: float = 0.0
    bins: int = 12
    patch_size: int = 8
    tau: float = 0.7
    min_magnitude: float = 0.5
    workers: int = 1
    figures: bool = True
    output: str = "results"
    base_dir: str = field(default=".", repr=False)

    @property
    def hyper(self) -> Hyper:
        return Hyper(self.C, self.gamma)

    @property
    def feature_params(self) -> FeatureParams:
        return FeatureParams(self.bins, self.patch_size, self.tau, self.min_magnitude)

    @property
    def fixed_method(self) -> str:
        return f"fixed-{self.n_best}"

    @property
    def methods(self) -> tuple[str, ...]:
        return (self.fixed_method, BEST_N, BASELINE)

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.output)

    def effective_workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        if env is None or env == "":
            return self.workers
        try:
            n = int(env)
        except ValueError:
            raise PlanError(f"{WORKERS_ENV}={env!r} is not an integer") from None
        if n < 1:
            raise PlanError(f"{WORKERS_ENV} must be >= 1")
        return n

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif v is None:
                v = "auto" if f.name == "gamma" else "default"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"max_size", "n_best", "master_seed", "runs", "folds", "bins", "patch_size", "workers"}
_FLOAT_KEYS = {"C", "first_fraction", "noise_sigma", "tau", "min_magnitude"}


def _convert(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "gamma":
        return None if raw.lower() == "auto" else float(raw)
    if key == "sequences_per_class":
        return None if raw.lower() == "default" else int(raw)
    if key == "decay":
        return None if raw.lower() == "default" else float(raw)
    if key == "masks":
        return tuple(m.strip() for m in raw.split(",") if m.strip())
    if key == "figures":
        if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError("expected a boolean")
        return raw.lower() in ("true", "yes", "1")
    return raw


def parse_plan(text: str, base_dir: str | Path = ".") -> ExperimentPlan:
    known = {f.name for f in fields(ExperimentPlan)} - {"base_dir"}
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"line {n}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in known:
            raise PlanError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise PlanError(f"line {n}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise PlanError(f"line {n}: bad value for {key!r}: {raw!r} ({exc})") from None
    plan = ExperimentPlan(**values, base_dir=str(base_dir))
    check_plan(plan)
    return plan


def load_plan(path: str | Path) -> ExperimentPlan:
    if str(path) == "default":
        from importlib import resources

        text = resources.files("occluflow.data").joinpath("default_plan.txt").read_text()
        return parse_plan(text, ".")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise PlanError(f"cannot read plan {p}: {exc}") from None
    return parse_plan(text, p.parent)


def check_plan(plan: ExperimentPlan) -> None:
    if not 1 <= plan.max_size <= 25:
        raise PlanError("max_size must lie in [1, 25]")
    if plan.n_best < 1:
        raise PlanError("n_best must be >= 1")
    if plan.runs < 1:
        raise PlanError("runs must be >= 1")
    if plan.folds < 2:
        raise PlanError("folds must be >= 2")
    if not 0 < plan.first_fraction < 1:
        raise PlanError("first_fraction must lie in (0, 1)")
    if plan.noise_sigma < 0:
        raise PlanError("noise_sigma must be non-negative")
    if plan.workers < 1:
        raise PlanError("workers must be >= 1")
    if len(set(plan.masks)) != len(plan.masks):
        raise PlanError("mask names must be unique")
    if "none" in plan.masks:
        raise PlanError("'none' is implicit and cannot be listed")
    try:
        plan.hyper
        plan.feature_params
    except ValueError as exc:
        raise PlanError(str(exc)) from None
    for key in ("layout", "mask_file", "synth_spec"):
        v = getattr(plan, key)
        if v != "default" and not plan.resolve(v).is_file():
            raise PlanError(f"{key}: file {plan.resolve(v)} not found")
    if plan.dataset != "synthetic" and not plan.resolve(plan.dataset).exists():
        raise PlanError(f"dataset {plan.resolve(plan.dataset)} not found")


def derive_seeds(master: int, count: int) -> list[int]:
    """``count`` independent 32-bit seeds from one master seed."""
    return [int(s) for s in np.random.SeedSequence(master).generate_state(count, dtype=np.uint32)]


# -- inputs ---------------------------------------------------------------------

@dataclass
class PlanInputs:
    layout: FacialLayout
    masks: list[OcclusionMask]
    table: GmdTable
    sequences: list[MotionSequence] | None

    @property
    def occlusions(self) -> list[OcclusionMask]:
        return [NO_OCCLUSION] + self.masks


def _read_sequence_dir(d: Path) -> list[MotionSequence]:
    manifest = d / "manifest.csv"
    if not manifest.is_file():
        raise PlanError(f"{d}: directory dataset needs a manifest.csv")
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    return [read_mfb(d / f"{r['sequence_id']}.mfb", r["label"], r["sequence_id"]) for r in rows]


def load_inputs(plan: ExperimentPlan) -> PlanInputs:
    """Layout, masks and the GMD table (computing features when needed)."""
    try:
        layout = load_layout(None if plan.layout == "default" else plan.resolve(plan.layout))
        all_masks = load_masks(None if plan.mask_file == "default" else plan.resolve(plan.mask_file), layout)
        missing = [m for m in plan.masks if m not in all_masks]
        if missing:
            raise PlanError(f"unknown masks {missing}; available {sorted(all_masks)}")
        masks = [validate_mask(layout, all_masks[m]) for m in plan.masks]
    except PlanError:
        raise
    except (ValueError, OSError) as exc:
        raise PlanError(str(exc)) from None

    seqs = None
    if plan.dataset == "synthetic":
        try:
            spec = load_spec(None if plan.synth_spec == "default" else plan.resolve(plan.synth_spec))
        except (ValueError, OSError) as exc:
            raise PlanError(f"synth spec: {exc}") from None
        if plan.sequences_per_class is not None:
            from dataclasses import replace

            spec = replace(spec, sequences_per_class=plan.sequences_per_class)
        if plan.decay is not None:
            spec = spec.with_decay(plan.decay)
        with stage("synth"):
            seqs = generate_dataset(spec, layout)
    else:
        src = plan.resolve(plan.dataset)
        if src.is_dir():
            with stage("load"):
                seqs = _read_sequence_dir(src)
        else:
            with stage("load"):
                table = read_gmd_csv(src)
            if plan.noise_sigma > 0:
                raise PlanError("noise_sigma > 0 needs motion sequences, not a GMD table")
    if seqs is not None:
        with stage("features"):
            table = compute_table(seqs, layout, plan.feature_params)
    if table.values.shape[1] != len(layout.ids) * plan.bins:
        raise PlanError(f"GMD width {table.values.shape[1]} does not match {len(layout.ids)} regions x {plan.bins}")
    return PlanInputs(layout, masks, table, seqs)


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except (StageError, PlanError):
        raise
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported with its name
        raise StageError(name, exc) from exc


def occluded_features(plan: ExperimentPlan, inputs: PlanInputs, mask: OcclusionMask, index: int) -> np.ndarray:
    X = inputs.table.values
    if not mask.occluded:
        return X
    if plan.noise_sigma == 0:
        return occlude_gmd(X, inputs.layout, mask, plan.bins)
    seeds = np.random.SeedSequence([plan.master_seed, index]).generate_state(len(inputs.sequences), dtype=np.uint32)
    occ = [apply_occlusion(s, inputs.layout, mask, plan.noise_sigma, int(sd)) for s, sd in zip(inputs.sequences, seeds)]
    return compute_table(occ, inputs.layout, plan.feature_params).values


def _k_for(labels: Sequence, k: int) -> int:
    _, counts = np.unique(np.asarray([str(v) for v in labels]), return_counts=True)
    return max(2, min(k, int(counts.min())))


# -- results ----------------------------------------------------------------------

@dataclass
class RunRecord:
    occlusion: str
    method: str
    run: int
    seed: int
    accuracy: float
    binary: dict[str, float]
    confusion: np.ndarray
    ids: list[str]
    truth: list[str]
    predictions: list[str]


@dataclass
class ResultsReport:
    classes: list[str]
    occlusions: list[str]
    methods: list[str]
    counts: dict[int, int]
    weight_maps: dict[tuple[str, str], WeightMap]
    frameworks: dict[tuple[str, str], dict[str, FacialFramework]]
    curves: dict[tuple[str, str], list[tuple[int, float]]]
    runs: list[RunRecord]
    output: Path | None = None

    def accuracies(self, occlusion: str, method: str) -> list[float]:
        return [r.accuracy for r in self.runs if r.occlusion == occlusion and r.method == method]

    def mean_accuracy(self, occlusion: str, method: str) -> float:
        return float(np.mean(self.accuracies(occlusion, method)))

    def summary(self) -> dict[tuple[str, str], float]:
        return {(o, m): self.mean_accuracy(o, m) for o in self.occlusions for m in self.methods
                if self.accuracies(o, m)}


# -- protocol -----------------------------------------------------------------------

def score_expressions(plan: ExperimentPlan, inputs: PlanInputs, catalog: ConfigurationCatalog, seed: int):
    """Balanced expression subsets of the whole dataset and their configuration accuracies."""
    t = inputs.table
    rows = list(range(len(t)))
    subsets = build_expression_subsets(t.labels, t.ids, rows, seed)
    results = {}
    for expr, sub in subsets.items():
        X = t.values[sub.rows]
        ids = [t.ids[i] for i in sub.rows]
        k = _k_for(sub.positive, plan.folds)
        results[expr] = score_catalog(X, sub.positive, catalog, plan.hyper, k, seed, ids, plan.bins,
                                      inputs.layout.ids, plan.effective_workers())
    return subsets, results


def select_frameworks(plan: ExperimentPlan, inputs: PlanInputs, subsets, results, seed: int):
    t = inputs.table
    maps, frameworks, curves = {}, {}, {}
    full = {expr: FacialFramework(expr, "none", list(inputs.layout.ids)) for expr in subsets}
    for mask in inputs.occlusions:
        fixed, best = {}, {}
        for expr, sub in subsets.items():
            wm, _ = weight_map(results[expr], mask, inputs.layout, expr)
            maps[(expr, mask.name)] = wm
            visible = selectable_regions(wm, mask)
            fixed[expr] = select_framework(wm, min(plan.n_best, len(visible)), mask)
            k = _k_for(sub.positive, plan.folds)
            curve = sweep_framework_sizes(wm, t.values[sub.rows], sub.positive, plan.hyper, k, seed,
                                          [t.ids[i] for i in sub.rows], mask, plan.bins, inputs.layout.ids)
            curves[(expr, mask.name)] = curve
            top = max(a for _, a in curve)
            n_star = min(n for n, a in curve if a == top)
            best[expr] = select_framework(wm, n_star, mask)
        frameworks[(plan.fixed_method, mask.name)] = fixed
        frameworks[(BEST_N, mask.name)] = best
        frameworks[(BASELINE, mask.name)] = full
    return maps, frameworks, curves


def _binary_accuracies(plan, inputs, stack: FusionStack, first, seed, X_eval) -> dict[str, float]:
    t = inputs.table
    subsets = build_expression_subsets(t.labels, t.ids, first, seed, stack.classes)
    out = {}
    for expr, sub in subsets.items():
        sel = block_indices(stack.frameworks[expr].regions, plan.bins, inputs.layout.ids)
        k = _k_for(sub.positive, plan.folds)
        res = cross_validate(t.values[sub.rows], sub.positive, k, plan.hyper, seed, [t.ids[i] for i in sub.rows],
                             selected=sel, X_eval=X_eval[sub.rows])
        out[expr] = res.mean
    return out


def evaluate_runs(plan: ExperimentPlan, inputs: PlanInputs, frameworks, run_seeds: Sequence[int],
                  methods: Sequence[str] | None = None, model_dir: Path | None = None) -> list[RunRecord]:
    t = inputs.table
    methods = list(methods or plan.methods)
    X = t.values
    X_occ = {m.name: occluded_features(plan, inputs, m, i) for i, m in enumerate(inputs.occlusions)}
    records = []
    for run, seed in enumerate(run_seeds):
        first, second = split_dataset(t.labels, t.ids, plan.first_fraction, seed)
        sec_labels = [t.labels[i] for i in second]
        sec_ids = [t.ids[i] for i in second]
        k = _k_for(sec_labels, plan.folds)
        for method in methods:
            # the baseline stack does not depend on the mask: train it once per run
            groups = [[m] for m in inputs.occlusions] if method != BASELINE else [inputs.occlusions]
            for group in groups:
                fw_mask = group[0] if method != BASELINE else NO_OCCLUSION
                fws = frameworks[(method, fw_mask.name)]
                stack = train_stack(X, t.labels, t.ids, first, second, fws, plan.hyper, seed,
                                    fw_mask if method != BASELINE else None, plan.bins, inputs.layout.ids)
                V_train = stack.vectors(X[second])
                tests = {m.name: stack.vectors(X_occ[m.name][second]) for m in group}
                evals = evaluate_fusion_cv_many(V_train, tests, sec_labels, sec_ids, stack.classes, plan.hyper,
                                                k, seed)
                for m in group:
                    ev = evals[m.name]
                    binary = _binary_accuracies(plan, inputs, stack, first, seed, X_occ[m.name])
                    records.append(RunRecord(m.name, method, run, seed, ev.accuracy, binary, ev.confusion,
                                             ev.ids, ev.truth, ev.predictions))
                    if model_dir is not None and run == 0:
                        save_stack(stack, model_dir / m.name / method)
    order = {(m.name): i for i, m in enumerate(inputs.occlusions)}
    morder = {m: i for i, m in enumerate(methods)}
    records.sort(key=lambda r: (order[r.occlusion], morder[r.method], r.run))
    return records


def baseline_unadapted(plan: ExperimentPlan, inputs: PlanInputs | None = None) -> dict[str, float]:
    """Mean fused accuracy per mask of the all-region stack trained unoccluded."""
    inputs = inputs or load_inputs(plan)
    seeds = derive_seeds(plan.master_seed, plan.runs + 1)
    classes = sorted(set(inputs.table.labels))
    full = {c: FacialFramework(c, "none", list(inputs.layout.ids)) for c in classes}
    with stage("evaluate"):
        recs = evaluate_runs(plan, inputs, {(BASELINE, "none"): full}, seeds[1:], [BASELINE])
    return {m.name: float(np.mean([r.accuracy for r in recs if r.occlusion == m.name])) for m in inputs.occlusions}


def run_plan(plan: ExperimentPlan, inputs: PlanInputs | None = None, write: bool = True) -> ResultsReport:
    check_plan(plan)
    out = plan.output_dir if write else None
    if out is not None:
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        (out / "plan.txt").write_text(plan.to_text())
    inputs = inputs or load_inputs(plan)
    if out is not None:
        with stage("features"):
            write_gmd_csv(out / "gmd.csv", inputs.table)
    seeds = derive_seeds(plan.master_seed, plan.runs + 1)

    with stage("enumerate"):
        catalog = enumerate_configurations(inputs.layout, plan.max_size)
        if out is not None:
            catalog.write(out / "configurations.txt")
            _write_rows(out / "config_counts.csv", ["size", "count"], sorted(catalog.counts().items()))
    with stage("score"):
        subsets, results = score_expressions(plan, inputs, catalog, seeds[0])
        if out is not None:
            _write_rows(out / "scores.csv", ["expression", "size", "configuration", "accuracy"],
                        [(e, len(c), " ".join(map(str, c)), repr(float(a))) for e in results for c, a in results[e]])
    with stage("weights"):
        maps, frameworks, curves = select_frameworks(plan, inputs, subsets, results, seeds[0])
        if out is not None:
            write_weight_maps(out / "weights.csv", maps.values())
            _write_frameworks(out / "frameworks.csv", frameworks)
            _write_rows(out / "curves.csv", ["expression", "occlusion", "n", "accuracy"],
                        [(e, o, n, repr(float(a))) for (e, o), pts in curves.items() for n, a in pts])
    with stage("evaluate"):
        records = evaluate_runs(plan, inputs, frameworks, seeds[1:], plan.methods,
                                out / "models" if out is not None else None)
    report = ResultsReport(sorted(subsets), [m.name for m in inputs.occlusions], list(plan.methods),
                           catalog.counts(), maps, frameworks, curves, records, out)
    if out is not None:
        with stage("report"):
            write_report(report, inputs.layout, plan.figures)
    return report


# -- report files -----------------------------------------------------------------

def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _write_frameworks(path: Path, frameworks) -> None:
    rows = []
    for (method, occ), fws in frameworks.items():
        for expr, fw in fws.items():
            rows.extend((method, occ, expr, i, r) for i, r in enumerate(fw.regions, 1))
    _write_rows(path, ["method", "occlusion", "expression", "rank", "region"], rows)


def write_report(report: ResultsReport, layout: FacialLayout, figures: bool = True) -> Path:
    from . import report as rep

    out = report.output
    _write_rows(out / "runs.csv", ["occlusion", "method", "run", "seed", "accuracy"],
                [(r.occlusion, r.method, r.run, r.seed, repr(r.accuracy)) for r in report.runs])
    _write_rows(out / "binary.csv", ["occlusion", "method", "run", "expression", "accuracy"],
                [(r.occlusion, r.method, r.run, e, repr(a)) for r in report.runs for e, a in r.binary.items()])
    _write_rows(out / "confusion.csv", ["occlusion", "method", "run", "truth"] + report.classes,
                [(r.occlusion, r.method, r.run, c, *r.confusion[i].tolist())
                 for r in report.runs for i, c in enumerate(report.classes)])
    _write_rows(out / "predictions.csv", ["occlusion", "method", "run", "sequence_id", "truth", "predicted"],
                [(r.occlusion, r.method, r.run, sid, t, p)
                 for r in report.runs for sid, t, p in zip(r.ids, r.truth, r.predictions)])
    rows = []
    for o in report.occlusions:
        for m in report.methods:
            acc = np.array(report.accuracies(o, m))
            if len(acc):
                rows.append((o, m, len(acc), repr(float(acc.mean())), repr(float(acc.std())),
                             repr(float(acc.min())), repr(float(acc.max()))))
    _write_rows(out / "report.csv", ["occlusion", "method", "runs", "mean", "std", "min", "max"], rows)

    for (expr, occ), wm in report.weight_maps.items():
        rep.emit_heatmap(wm, layout, out / "heatmaps" / f"{expr}_{occ}")
    if figures:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        rep.plot_heatmaps(report.weight_maps, layout, report.classes, report.occlusions, fig_dir / "heatmaps.png")
        for occ in report.occlusions:
            rep.plot_curves(report.curves, report.classes, occ, fig_dir / f"curves_{occ}.png")
        rep.plot_comparison(report.summary(), report.occlusions, report.methods, fig_dir / "comparison.png")
    return out / "report.csv"


def format_summary(report: ResultsReport) -> str:
    """Fixed-width accuracy table, one row per method, one column per occlusion."""
    summary = report.summary()
    head = "method".ljust(10) + "".join(o.rjust(9) for o in report.occlusions)
    lines = [head]
    for m in report.methods:
        cells = "".join(f"{summary[(o, m)]:9.4f}" if (o, m) in summary else " " * 9 for o in report.occlusions)
        lines.append(m.ljust(10) + cells)
    return "\n".join(lines)
