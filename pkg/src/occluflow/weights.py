"""Region importance from configuration accuracies, and framework selection.

Each configuration's cross-validated accuracy is turned into a score

    omega = exp((res - mean_i) / std_i) / exp(i)

where ``mean_i`` and ``std_i`` summarize the accuracies of all scored
configurations of the same size ``i``.  A region's weight is the sum of the
scores of configurations containing it divided by how many such
configurations there are.  Under an occlusion only configurations made
exclusively of visible regions take part, so occluded regions end at zero.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .configs import Configuration, ConfigurationCatalog
from .regions import FacialLayout, OcclusionMask
from .svm import Hyper, RegionCVScorer, block_indices, cross_validate


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class ConfigurationScore:
    configuration: Configuration
    res: float
    omega: float

    def __post_init__(self):
        if not 0.0 <= self.res <= 1.0:
            raise WeightError(f"accuracy {self.res} outside [0, 1]")
        if self.omega < 0:
            raise WeightError("omega must be non-negative")


SizeStats = Mapping[int, tuple[float, float]]


def size_stats(results: Iterable[tuple[Configuration, float]]) -> dict[int, tuple[float, float]]:
    """Mean and population standard deviation of accuracy per configuration size.

    Summation runs in canonical configuration order so the result does not
    depend on how the scores were produced.
    """
    groups: dict[int, list[float]] = {}
    for conf, res in sorted(results, key=lambda t: (len(t[0]), t[0])):
        groups.setdefault(len(conf), []).append(res)
    return {i: (float(np.mean(v)), float(np.std(v))) for i, v in sorted(groups.items())}


def score_configuration(res: float, size: int, stats: SizeStats) -> float:
    if size not in stats:
        raise WeightError(f"no statistics for configuration size {size}")
    mean, std = stats[size]
    z = 0.0 if std == 0 else (res - mean) / std
    return math.exp(z) / math.exp(size)


@dataclass
class WeightMap:
    expression: str
    occlusion: str
    weights: dict[int, float]
    apparitions: dict[int, int]

    def vector(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self.weights[r] for r in ids])


def transfer_weights(scores: Sequence[ConfigurationScore], mask: OcclusionMask, layout: FacialLayout,
                     expression: str = "") -> WeightMap:
    totals = {r: 0.0 for r in layout.ids}
    counts = {r: 0 for r in layout.ids}
    occluded = set(mask.occluded)
    for s in sorted(scores, key=lambda s: (len(s.configuration), s.configuration)):
        if occluded.intersection(s.configuration):
            raise WeightError(f"configuration {s.configuration} intersects mask {mask.name!r}")
        for r in s.configuration:
            totals[layout.check(r)] += s.omega
            counts[r] += 1
    weights = {r: (totals[r] / counts[r] if counts[r] else 0.0) for r in layout.ids}
    for r in occluded:
        weights[r] = 0.0
        counts[r] = 0
    return WeightMap(expression, mask.name, weights, counts)


def weight_map(results: Sequence[tuple[Configuration, float]], mask: OcclusionMask, layout: FacialLayout,
               expression: str = "") -> tuple[WeightMap, list[ConfigurationScore]]:
    """Filter by the mask, compute size statistics on what remains, score and transfer."""
    occluded = set(mask.occluded)
    kept = [(c, r) for c, r in results if not occluded.intersection(c)]
    if not kept:
        raise WeightError(f"mask {mask.name!r} leaves no configuration")
    stats = size_stats(kept)
    scores = [ConfigurationScore(c, r, score_configuration(r, len(c), stats)) for c, r in kept]
    return transfer_weights(scores, mask, layout, expression), scores


def rank_regions(wm: WeightMap) -> list[int]:
    return sorted(wm.weights, key=lambda r: (-wm.weights[r], r))


@dataclass
class FacialFramework:
    expression: str
    occlusion: str
    regions: list[int]

    @property
    def n(self) -> int:
        return len(self.regions)


def selectable_regions(wm: WeightMap, mask: OcclusionMask | None = None) -> list[int]:
    """Ranked regions that took part in at least one scored configuration.

    Every visible region appears at least in its own singleton
    configuration, so this is exactly the visible set.
    """
    occluded = set(mask.occluded) if mask is not None else set()
    return [r for r in rank_regions(wm) if r not in occluded and wm.apparitions.get(r, 0) > 0]


def select_framework(wm: WeightMap, n: int = 6, mask: OcclusionMask | None = None) -> FacialFramework:
    visible = selectable_regions(wm, mask)
    if not 1 <= n <= len(visible):
        raise WeightError(f"n={n} outside [1, {len(visible)}] visible regions")
    return FacialFramework(wm.expression, wm.occlusion, visible[:n])


def sweep_framework_sizes(wm: WeightMap, X: np.ndarray, y, hyper: Hyper = Hyper(), k: int = 10, seed: int = 0,
                          ids=None, mask: OcclusionMask | None = None, bins: int = 12,
                          region_ids: Sequence[int] | None = None, max_n: int | None = None) -> list[tuple[int, float]]:
    """Cross-validated accuracy using the top-n ranked regions, for every n."""
    order = selectable_regions(wm, mask)
    limit = len(order) if max_n is None else min(max_n, len(order))
    curve = []
    for n in range(1, limit + 1):
        sel = block_indices(order[:n], bins, region_ids)
        res = cross_validate(X, y, k, hyper, seed, ids, selected=sel)
        curve.append((n, res.mean))
    return curve


# -- configuration scoring ----------------------------------------------------

def _score_chunk(args):
    X, y, k, hyper, seed, ids, bins, region_ids, confs = args
    scorer = RegionCVScorer(X, y, k, hyper, seed, ids, bins, region_ids)
    return [scorer.score(c) for c in confs]


def score_catalog(X: np.ndarray, y, catalog: ConfigurationCatalog | Sequence[Configuration], hyper: Hyper = Hyper(),
                  k: int = 10, seed: int = 0, ids=None, bins: int = 12, region_ids: Sequence[int] | None = None,
                  workers: int = 1) -> list[tuple[Configuration, float]]:
    """Cross-validated accuracy of every configuration, in catalog order."""
    confs = list(catalog)
    if workers <= 1 or len(confs) < 2 * workers:
        scorer = RegionCVScorer(X, y, k, hyper, seed, ids, bins, region_ids)
        return [(c, scorer.score(c)) for c in confs]
    chunks = [confs[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_score_chunk, [(X, y, k, hyper, seed, ids, bins, region_ids, ch) for ch in chunks]))
    res: dict[Configuration, float] = {}
    for ch, vals in zip(chunks, parts):
        res.update(zip(ch, vals))
    return [(c, res[c]) for c in confs]


# -- files --------------------------------------------------------------------

def write_weight_maps(path: str | Path, maps: Iterable[WeightMap]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["expression", "occlusion", "region", "weight", "apparitions"])
        for wm in maps:
            for r in sorted(wm.weights):
                wr.writerow([wm.expression, wm.occlusion, r, repr(float(wm.weights[r])), wm.apparitions[r]])


def read_weight_maps(path: str | Path) -> list[WeightMap]:
    maps: dict[tuple[str, str], WeightMap] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["expression"], row["occlusion"])
            wm = maps.setdefault(key, WeightMap(key[0], key[1], {}, {}))
            r = int(row["region"])
            wm.weights[r] = float(row["weight"])
            wm.apparitions[r] = int(row["apparitions"])
    return list(maps.values())


def write_scores(path: str | Path, expression: str, results: Sequence[tuple[Configuration, float]]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["expression", "size", "configuration", "accuracy"])
        for c, r in results:
            wr.writerow([expression, len(c), " ".join(map(str, c)), repr(float(r))])


def read_scores(path: str | Path) -> dict[str, list[tuple[Configuration, float]]]:
    out: dict[str, list[tuple[Configuration, float]]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            conf = tuple(int(t) for t in row["configuration"].split())
            out.setdefault(row["expression"], []).append((conf, float(row["accuracy"])))
    return out


def write_framework(path: str | Path, fw: FacialFramework) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["expression", "occlusion", "rank", "region"])
        for i, r in enumerate(fw.regions, 1):
            wr.writerow([fw.expression, fw.occlusion, i, r])


def read_framework(path: str | Path) -> FacialFramework:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise WeightError(f"{path}: empty framework file")
    rows.sort(key=lambda r: int(r["rank"]))
    return FacialFramework(rows[0]["expression"], rows[0]["occlusion"], [int(r["region"]) for r in rows])
