"""Enumeration of connected region configurations."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .regions import FacialLayout, LayoutError, is_graph_connected

Configuration = tuple[int, ...]


@dataclass
class ConfigurationCatalog:
    by_size: dict[int, list[Configuration]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.by_size.values())

    def counts(self) -> dict[int, int]:
        return {s: len(v) for s, v in sorted(self.by_size.items())}

    def __iter__(self) -> Iterator[Configuration]:
        for size in sorted(self.by_size):
            yield from self.by_size[size]

    def __len__(self) -> int:
        return self.total

    def restricted(self, visible: Iterable[int]) -> "ConfigurationCatalog":
        """Sub-catalog of configurations lying entirely inside ``visible``."""
        vis = set(visible)
        return ConfigurationCatalog({
            s: [c for c in confs if vis.issuperset(c)] for s, confs in self.by_size.items()
        })

    def write(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for conf in self:
                f.write(",".join(map(str, conf)) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "ConfigurationCatalog":
        confs = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                confs.append(tuple(sorted(int(t) for t in line.split(","))))
        return cls.from_configurations(confs)

    @classmethod
    def from_configurations(cls, confs: Iterable[Configuration]) -> "ConfigurationCatalog":
        by_size: dict[int, list[Configuration]] = {}
        for c in sorted(set(tuple(sorted(c)) for c in confs), key=lambda c: (len(c), c)):
            by_size.setdefault(len(c), []).append(c)
        return cls(by_size)


def is_connected(layout: FacialLayout, regions: Iterable[int]) -> bool:
    nodes = set(regions)
    if not nodes:
        raise LayoutError("connectivity of an empty region set is undefined")
    for r in nodes:
        layout.check(r)
    return is_graph_connected(layout, nodes)


def enumerate_configurations(layout: FacialLayout, max_size: int = 8,
                             restrict_to: Iterable[int] | None = None) -> ConfigurationCatalog:
    """All connected vertex subsets of size 1..max_size of the graph induced
    on ``restrict_to`` (default: every region).

    Each subset is grown from its smallest member (the anchor); the
    extension set only ever admits vertices larger than the anchor that are
    not already adjacent to the current subset, so every connected subset is
    produced exactly once.
    """
    nodes = set(layout.regions) if restrict_to is None else set(restrict_to)
    if not nodes:
        raise LayoutError("restrict_to must be non-empty")
    for r in nodes:
        layout.check(r)
    limit = max(25, len(layout.regions))
    if not 1 <= max_size <= limit:
        raise LayoutError(f"max_size must lie in [1, {limit}], got {max_size}")
    adj = {r: frozenset(v for v in layout.adjacency()[r] if v in nodes) for r in nodes}
    found: list[Configuration] = []

    def extend(sub: frozenset[int], ext: frozenset[int], anchor: int, closed: frozenset[int]):
        found.append(tuple(sorted(sub)))
        if len(sub) == max_size:
            return
        remaining = sorted(ext)
        while remaining:
            w = remaining.pop()
            new = frozenset(u for u in adj[w] if u > anchor and u not in closed)
            extend(sub | {w}, frozenset(remaining) | new, anchor, closed | new)

    for v in sorted(nodes):
        ext = frozenset(u for u in adj[v] if u > v)
        extend(frozenset((v,)), ext, v, ext | {v})
    return ConfigurationCatalog.from_configurations(found)
