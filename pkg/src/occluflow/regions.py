"""Facial region layout, adjacency graph and occlusion masks.

A layout is a set of 25 axis-aligned rectangles in normalized face-box
coordinates together with an undirected adjacency graph.  Layouts and masks
are plain text files; the defaults ship in ``occluflow/data``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

N_REGIONS = 25


class LayoutError(ValueError):
    """Raised for malformed layouts, masks or unknown region ids."""


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    @property
    def centroid(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2


@dataclass(frozen=True)
class FacialLayout:
    regions: Mapping[int, Rect]
    edges: frozenset[frozenset[int]]
    _adj: Mapping[int, frozenset[int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: dict[int, set[int]] = {r: set() for r in self.regions}
        for e in self.edges:
            a, b = tuple(e)
            adj[a].add(b)
            adj[b].add(a)
        object.__setattr__(self, "_adj", {r: frozenset(v) for r, v in adj.items()})

    @property
    def ids(self) -> list[int]:
        return sorted(self.regions)

    def check(self, r: int) -> int:
        if r not in self.regions:
            raise LayoutError(f"unknown region id {r!r}")
        return r

    def adjacency(self) -> Mapping[int, frozenset[int]]:
        return self._adj

    def distances(self, sources: Iterable[int]) -> dict[int, float]:
        """Unweighted shortest-path distance from the nearest source region."""
        dist: dict[int, float] = {r: np.inf for r in self.regions}
        queue = deque()
        for s in sorted(set(sources)):
            self.check(s)
            dist[s] = 0
            queue.append(s)
        while queue:
            u = queue.popleft()
            for v in sorted(self._adj[u]):
                if dist[v] == np.inf:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def pixel_bounds(self, r: int, width: int, height: int) -> tuple[int, int, int, int]:
        """Pixel rectangle ``(row0, row1, col0, col1)`` (half-open) whose pixel
        centers fall inside region ``r``'s rectangle."""
        rect = self.regions[self.check(r)]
        col0 = int(np.ceil(rect.x * width - 0.5))
        col1 = int(np.floor((rect.x + rect.w) * width - 0.5)) + 1
        row0 = int(np.ceil(rect.y * height - 0.5))
        row1 = int(np.floor((rect.y + rect.h) * height - 0.5)) + 1
        return max(row0, 0), min(row1, height), max(col0, 0), min(col1, width)

    def label_map(self, width: int, height: int) -> np.ndarray:
        """Region id per pixel (0 where no region); overlaps on shared
        boundaries resolve to the lowest id."""
        labels = np.zeros((height, width), dtype=np.int32)
        for r in sorted(self.regions, reverse=True):
            r0, r1, c0, c1 = self.pixel_bounds(r, width, height)
            labels[r0:r1, c0:c1] = r
        return labels

    def grid_cell(self, r: int, size: int = 5) -> tuple[int, int]:
        cx, cy = self.regions[self.check(r)].centroid
        return min(int(cy * size), size - 1), min(int(cx * size), size - 1)


@dataclass(frozen=True)
class OcclusionMask:
    name: str
    occluded: frozenset[int] = frozenset()


NO_OCCLUSION = OcclusionMask("none", frozenset())


def validate_layout(layout: FacialLayout, expected_regions: int | None = N_REGIONS) -> FacialLayout:
    ids = layout.ids
    if expected_regions is not None and len(ids) != expected_regions:
        raise LayoutError(f"layout has {len(ids)} regions, expected {expected_regions}")
    for r, rect in layout.regions.items():
        if rect.w <= 0 or rect.h <= 0:
            raise LayoutError(f"region {r} has a degenerate rectangle")
        if rect.x < 0 or rect.y < 0 or rect.x + rect.w > 1 + 1e-9 or rect.y + rect.h > 1 + 1e-9:
            raise LayoutError(f"region {r} leaves the unit square")
    for i, a in enumerate(ids):
        ra = layout.regions[a]
        for b in ids[i + 1:]:
            rb = layout.regions[b]
            ox = min(ra.x + ra.w, rb.x + rb.w) - max(ra.x, rb.x)
            oy = min(ra.y + ra.h, rb.y + rb.h) - max(ra.y, rb.y)
            if ox > 1e-12 and oy > 1e-12:
                raise LayoutError(f"regions {a} and {b} overlap")
    for e in layout.edges:
        if len(e) != 2:
            raise LayoutError(f"self-loop on region {next(iter(e))}")
        for r in e:
            layout.check(r)
    if len(ids) > 1 and not is_graph_connected(layout, ids):
        raise LayoutError("adjacency graph is not connected")
    return layout


def is_graph_connected(layout: FacialLayout, regions: Iterable[int]) -> bool:
    nodes = set(regions)
    if not nodes:
        return False
    adj = layout.adjacency()
    start = min(nodes)
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v in nodes and v not in seen:
                seen.add(v)
                stack.append(v)
    return seen == nodes


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_layout(text: str, expected_regions: int | None = N_REGIONS) -> FacialLayout:
    regions: dict[int, Rect] = {}
    edges: set[frozenset[int]] = set()
    in_edges = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line.lower() == "edges":
            in_edges = True
            continue
        parts = line.split()
        try:
            if in_edges:
                if len(parts) != 2:
                    raise ValueError
                a, b = int(parts[0]), int(parts[1])
                if a == b:
                    raise LayoutError(f"line {lineno}: self-loop on region {a}")
                edge = frozenset((a, b))
                if edge in edges:
                    raise LayoutError(f"line {lineno}: duplicate edge {a} {b}")
                edges.add(edge)
            else:
                if len(parts) != 5:
                    raise ValueError
                r = int(parts[0])
                if r in regions:
                    raise LayoutError(f"line {lineno}: duplicate region {r}")
                if not 1 <= r <= N_REGIONS:
                    raise LayoutError(f"line {lineno}: region id {r} outside [1, {N_REGIONS}]")
                regions[r] = Rect(*(float(p) for p in parts[1:]))
        except ValueError as exc:
            if isinstance(exc, LayoutError):
                raise
            raise LayoutError(f"line {lineno}: cannot parse {raw!r}") from None
    for e in edges:
        for r in e:
            if r not in regions:
                raise LayoutError(f"edge references unknown region {r}")
    return validate_layout(FacialLayout(regions, frozenset(edges)), expected_regions)


def load_layout(path: str | Path | None = None) -> FacialLayout:
    if path is None or str(path) == "default":
        return default_layout()
    return parse_layout(Path(path).read_text())


def default_layout() -> FacialLayout:
    text = resources.files("occluflow.data").joinpath("default_layout.txt").read_text()
    return parse_layout(text)


def parse_masks(text: str, layout: FacialLayout | None = None) -> dict[str, OcclusionMask]:
    masks: dict[str, OcclusionMask] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        name, sep, body = line.partition(":")
        name = name.strip()
        if not sep or not name:
            raise LayoutError(f"line {lineno}: expected 'name: id,id,...'")
        if name in masks or name == "none":
            raise LayoutError(f"line {lineno}: duplicate or reserved mask name {name!r}")
        try:
            ids = frozenset(int(t) for t in body.replace(" ", "").split(",") if t)
        except ValueError:
            raise LayoutError(f"line {lineno}: bad region list {body!r}") from None
        mask = OcclusionMask(name, ids)
        if layout is not None:
            validate_mask(layout, mask)
        masks[name] = mask
    return masks


def load_masks(path: str | Path | None = None, layout: FacialLayout | None = None) -> dict[str, OcclusionMask]:
    if path is None or str(path) == "default":
        text = resources.files("occluflow.data").joinpath("default_masks.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_masks(text, layout)


def default_masks(layout: FacialLayout | None = None) -> dict[str, OcclusionMask]:
    return load_masks(None, layout)


def validate_mask(layout: FacialLayout, mask: OcclusionMask) -> OcclusionMask:
    unknown = sorted(r for r in mask.occluded if r not in layout.regions)
    if unknown:
        raise LayoutError(f"mask {mask.name!r} references unknown regions {unknown}")
    if len(mask.occluded) >= len(layout.regions):
        raise LayoutError(f"mask {mask.name!r} leaves no visible region")
    return mask


def neighbors(layout: FacialLayout, r: int) -> set[int]:
    return set(layout.adjacency()[layout.check(r)])


def visible_regions(layout: FacialLayout, mask: OcclusionMask) -> set[int]:
    validate_mask(layout, mask)
    return set(layout.regions) - set(mask.occluded)


def region_of_pixel(layout: FacialLayout, x: float, y: float) -> int | None:
    """Region containing the normalized point, lowest id on shared borders."""
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise LayoutError(f"point ({x}, {y}) outside the unit square")
    for r in layout.ids:
        if layout.regions[r].contains(x, y):
            return r
    return None
