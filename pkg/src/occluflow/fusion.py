"""Two-layer recognizer: per-expression binary models, then a fusion model.

The first layer holds one binary model per expression, each restricted to
its own facial framework.  Their probability pairs form a 12-dimensional
vector (for six expressions) on which the fusion layer, a one-vs-rest set
of the same kernel classifier, is trained with the first layer frozen.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureParams, MotionSequence, sequence_gmd
from .regions import FacialLayout, OcclusionMask
from .svm import (ClassifierError, Hyper, TrainedModel, block_indices, load_model, model_to_bytes,
                  save_model, stratified_folds, train)
from .weights import FacialFramework, read_framework, write_framework


class FusionError(ValueError):
    pass


def _class_rows(labels: Sequence[str], ids: Sequence[str], rows: Sequence[int] | None = None) -> dict[str, list[int]]:
    rows = range(len(labels)) if rows is None else rows
    out: dict[str, list[int]] = {}
    for i in rows:
        out.setdefault(labels[i], []).append(i)
    return {c: sorted(v, key=lambda i: ids[i]) for c, v in sorted(out.items())}


def split_dataset(labels: Sequence[str], ids: Sequence[str], fraction: float = 0.4,
                  seed: int = 0) -> tuple[list[int], list[int]]:
    """Stratified split; the first part gets ``floor(fraction * n)`` rows per class."""
    if not 0 < fraction < 1:
        raise FusionError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c, rows in _class_rows(labels, ids).items():
        if len(rows) < 5:
            raise FusionError(f"class {c!r} has {len(rows)} sequences, at least 5 required")
        perm = [rows[i] for i in rng.permutation(len(rows))]
        cut = int(np.floor(fraction * len(rows)))
        first.extend(perm[:cut])
        second.extend(perm[cut:])
    return sorted(first), sorted(second)


@dataclass
class ExpressionSubset:
    expression: str
    rows: list[int]
    positive: np.ndarray               # bool per entry of ``rows``
    quotas: dict[str, int] = field(default_factory=dict)


def negative_quotas(m: int, others: Sequence[str]) -> dict[str, int]:
    """Per-class negative counts: equal shares, remainder dealt round-robin."""
    base, rem = divmod(m, len(others))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(others)}


def build_expression_subsets(labels: Sequence[str], ids: Sequence[str], rows: Sequence[int],
                             seed: int = 0, classes: Sequence[str] | None = None) -> dict[str, ExpressionSubset]:
    by_class = _class_rows(labels, ids, rows)
    classes = list(classes) if classes is not None else sorted(by_class)
    missing = [c for c in classes if c not in by_class]
    if missing:
        raise FusionError(f"classes {missing} absent from the first stage")
    children = np.random.SeedSequence(seed).spawn(len(classes))
    out = {}
    for expr, child in zip(classes, children):
        rng = np.random.default_rng(child)
        pos = by_class[expr]
        others = [c for c in classes if c != expr]
        quotas = negative_quotas(len(pos), others)
        neg = []
        for c in others:
            pool = by_class[c]
            if len(pool) < quotas[c]:
                raise FusionError(f"class {c!r} has {len(pool)} rows, quota {quotas[c]} for {expr!r}")
            pick = rng.permutation(len(pool))[:quotas[c]]
            neg.extend(pool[i] for i in sorted(pick))
        sel = pos + neg
        out[expr] = ExpressionSubset(expr, sel, np.array([True] * len(pos) + [False] * len(neg)), quotas)
    return out


@dataclass
class OneVsRest:
    classes: list[str]
    models: dict[str, TrainedModel]

    def scores(self, X: np.ndarray) -> np.ndarray:
        return np.column_stack([self.models[c].predict_proba(X)[:, 0] for c in self.classes])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        s = self.scores(X)
        tot = s.sum(axis=1, keepdims=True)
        uniform = np.full_like(s, 1.0 / len(self.classes))
        return np.where(tot > 0, s / np.where(tot > 0, tot, 1.0), uniform)

    def predict(self, X: np.ndarray) -> list[str]:
        return [self.classes[i] for i in np.argmax(self.predict_proba(X), axis=1)]


def train_one_vs_rest(V: np.ndarray, labels: Sequence[str], hyper: Hyper = Hyper(), seed: int = 0,
                      ids: Sequence[str] | None = None, classes: Sequence[str] | None = None) -> OneVsRest:
    labels = list(labels)
    classes = list(classes) if classes is not None else sorted(set(labels))
    lab = np.array(labels)
    models = {c: train(V, lab == c, hyper, seed, ids) for c in classes}
    return OneVsRest(classes, models)


def fusion_vectors(models: Mapping[str, TrainedModel], classes: Sequence[str], X: np.ndarray) -> np.ndarray:
    """``[p_1, 1 - p_1, ..., p_c, 1 - p_c]`` per row of GMD features."""
    return np.column_stack([models[c].predict_proba(X) for c in classes])


@dataclass
class FusionStack:
    classes: list[str]
    frameworks: dict[str, FacialFramework]
    binary: dict[str, TrainedModel]
    fusion: OneVsRest
    occlusion: str
    manifest: dict = field(default_factory=dict)

    def vectors(self, X: np.ndarray) -> np.ndarray:
        return fusion_vectors(self.binary, self.classes, np.atleast_2d(X))

    def predict_gmd(self, X: np.ndarray) -> tuple[list[str], np.ndarray]:
        proba = self.fusion.predict_proba(self.vectors(X))
        return [self.classes[i] for i in np.argmax(proba, axis=1)], proba


def check_frameworks(frameworks: Mapping[str, FacialFramework], mask: OcclusionMask | None = None) -> str:
    names = {fw.occlusion for fw in frameworks.values()}
    if len(names) != 1:
        raise FusionError(f"frameworks mix occlusions {sorted(names)}")
    occ = names.pop()
    if mask is not None:
        if mask.name != occ:
            raise FusionError(f"frameworks built for {occ!r}, stack requested for {mask.name!r}")
        for fw in frameworks.values():
            bad = set(fw.regions) & set(mask.occluded)
            if bad:
                raise FusionError(f"{fw.expression} framework uses occluded regions {sorted(bad)}")
    return occ


def train_binary_layer(X: np.ndarray, labels: Sequence[str], ids: Sequence[str],
                       subsets: Mapping[str, ExpressionSubset], frameworks: Mapping[str, FacialFramework],
                       hyper: Hyper, seed: int, bins: int = 12,
                       region_ids: Sequence[int] | None = None) -> dict[str, TrainedModel]:
    models = {}
    for expr, sub in subsets.items():
        sel = block_indices(frameworks[expr].regions, bins, region_ids)
        models[expr] = train(X[sub.rows], sub.positive, hyper, seed, [ids[i] for i in sub.rows], selected=sel)
    return models


def train_stack(X: np.ndarray, labels: Sequence[str], ids: Sequence[str], first: Sequence[int],
                second: Sequence[int], frameworks: Mapping[str, FacialFramework], hyper: Hyper = Hyper(),
                seed: int = 0, mask: OcclusionMask | None = None, bins: int = 12,
                region_ids: Sequence[int] | None = None, classes: Sequence[str] | None = None) -> FusionStack:
    occ = check_frameworks(frameworks, mask)
    labels = list(labels)
    ids = [str(i) for i in ids]
    subsets = build_expression_subsets(labels, ids, first, seed, classes)
    classes = list(subsets)
    binary = train_binary_layer(X, labels, ids, subsets, frameworks, hyper, seed, bins, region_ids)
    second = list(second)
    V = fusion_vectors(binary, classes, X[second])
    fusion = train_one_vs_rest(V, [labels[i] for i in second], hyper, seed, [ids[i] for i in second], classes)
    manifest = {"occlusion": occ, "seed": seed, "hyper": hyper.describe(), "bins": bins, "classes": classes}
    return FusionStack(classes, dict(frameworks), binary, fusion, occ, manifest)


def predict(stack: FusionStack, seq: MotionSequence, layout: FacialLayout,
            params: FeatureParams = FeatureParams()) -> tuple[str, np.ndarray]:
    labels, proba = stack.predict_gmd(sequence_gmd(seq, layout, params)[None])
    return labels[0], proba[0]


@dataclass
class FusionEvaluation:
    accuracy: float
    predictions: list[str]
    truth: list[str]
    ids: list[str]
    confusion: np.ndarray


def confusion_matrix(truth: Sequence[str], pred: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[pos[t], pos[p]] += 1
    return cm


def evaluate_fusion_cv(V_train: np.ndarray, V_test: np.ndarray, labels: Sequence[str], ids: Sequence[str],
                       classes: Sequence[str], hyper: Hyper = Hyper(), k: int = 10, seed: int = 0) -> FusionEvaluation:
    """k-fold evaluation of the fusion layer over second-stage vectors.

    Each fold trains on ``V_train`` rows and predicts the held-out rows of
    ``V_test`` (the same sequences, possibly occluded).  Accuracy is pooled
    over all held-out predictions.
    """
    return evaluate_fusion_cv_many(V_train, {"": V_test}, labels, ids, classes, hyper, k, seed)[""]


def evaluate_fusion_cv_many(V_train: np.ndarray, V_tests: Mapping[str, np.ndarray], labels: Sequence[str],
                            ids: Sequence[str], classes: Sequence[str], hyper: Hyper = Hyper(), k: int = 10,
                            seed: int = 0) -> dict[str, FusionEvaluation]:
    """Same fold models for several test versions of the second stage."""
    labels = list(labels)
    ids = [str(i) for i in ids]
    folds = stratified_folds(labels, k, seed, ids)
    preds = {name: [""] * len(labels) for name in V_tests}
    lab = np.array(labels)
    for f in range(k):
        tr, te = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
        if len(set(lab[tr])) < len(classes):
            raise FusionError("a training fold lacks a class; reduce k")
        ovr = train_one_vs_rest(V_train[tr], lab[tr], hyper, seed, [ids[i] for i in tr], classes)
        for name, V in V_tests.items():
            for i, p in zip(te, ovr.predict(V[te])):
                preds[name][i] = p
    out = {}
    for name, pred in preds.items():
        cm = confusion_matrix(labels, pred, classes)
        out[name] = FusionEvaluation(float(np.trace(cm) / cm.sum()), pred, labels, ids, cm)
    return out


# -- bundles ------------------------------------------------------------------

def save_stack(stack: FusionStack, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for c in stack.classes:
        save_model(out / f"binary_{c}.model", stack.binary[c])
        write_framework(out / f"framework_{c}.csv", stack.frameworks[c])
        save_model(out / f"fusion_{c}.model", stack.fusion.models[c])
        hashes[c] = hashlib.sha256(model_to_bytes(stack.binary[c])).hexdigest()
    manifest = dict(stack.manifest, classes=stack.classes, occlusion=stack.occlusion, binary_sha256=hashes)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_stack(path: str | Path) -> FusionStack:
    p = Path(path)
    try:
        manifest = json.loads((p / "manifest.json").read_text())
    except FileNotFoundError:
        raise FusionError(f"{p}: not a stack bundle (manifest.json missing)") from None
    classes = manifest["classes"]
    binary = {c: load_model(p / f"binary_{c}.model") for c in classes}
    fws = {c: read_framework(p / f"framework_{c}.csv") for c in classes}
    fusion = OneVsRest(classes, {c: load_model(p / f"fusion_{c}.model") for c in classes})
    return FusionStack(classes, fws, binary, fusion, manifest["occlusion"], manifest)
