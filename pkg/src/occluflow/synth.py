"""Seeded generator of labeled motion sequences.

Each expression has one or more epicenter regions.  Motion magnitude decays
exponentially with the graph distance to the nearest epicenter and ramps up
linearly from the first (neutral) frame to the last (apex) frame.  Angles
are in degrees, measured with ``atan2(dy, dx)`` in image coordinates, so
270 points up the face.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import MotionSequence, write_mfb
from .regions import FacialLayout, LayoutError

EXPRESSIONS = ("happiness", "sadness", "disgust", "fear", "surprise", "anger")


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ExpressionArchetype:
    label: str
    epicenters: tuple[int, ...]
    base_direction: tuple[float, ...]
    amplitude: float = 3.0
    decay: float = 1.5
    direction_jitter: float = 20.0
    frames: int = 10
    amplitude_jitter: float = 0.4
    pixel_noise: float = 0.5

    def __post_init__(self):
        if not self.epicenters:
            raise SynthSpecError(f"{self.label}: epicenters must be non-empty")
        if len(self.base_direction) != len(self.epicenters):
            raise SynthSpecError(f"{self.label}: one base direction per epicenter required")
        if self.amplitude <= 0:
            raise SynthSpecError(f"{self.label}: amplitude must be positive")
        if self.decay < 0:
            raise SynthSpecError(f"{self.label}: decay must be non-negative")
        if self.frames < 1:
            raise SynthSpecError(f"{self.label}: frames must be >= 1")
        if not 0 <= self.amplitude_jitter < 1:
            raise SynthSpecError(f"{self.label}: amplitude_jitter must lie in [0, 1)")
        if self.direction_jitter < 0 or self.pixel_noise < 0:
            raise SynthSpecError(f"{self.label}: jitter and noise must be non-negative")


# Confusable pairs share regions: anger/disgust the nose wrinkle, fear/surprise
# the raised brows, happiness/sadness the lip corners (opposite directions).
DEFAULT_ARCHETYPES = (
    ExpressionArchetype("happiness", (18, 19), (225.0, 315.0)),
    ExpressionArchetype("sadness", (3, 18, 19), (270.0, 135.0, 45.0)),
    ExpressionArchetype("disgust", (6, 14, 15), (250.0, 290.0, 270.0)),
    ExpressionArchetype("fear", (2, 4, 17, 20), (270.0, 270.0, 180.0, 0.0)),
    ExpressionArchetype("surprise", (2, 4, 23), (270.0, 270.0, 90.0)),
    ExpressionArchetype("anger", (2, 4, 6, 14), (45.0, 135.0, 250.0, 290.0)),
)


@dataclass(frozen=True)
class SynthDatasetSpec:
    archetypes: tuple[ExpressionArchetype, ...] = DEFAULT_ARCHETYPES
    sequences_per_class: int = 60
    rng_seed: int = 2019
    width: int = 144
    height: int = 144

    def __post_init__(self):
        labels = [a.label for a in self.archetypes]
        if len(set(labels)) != len(labels):
            raise SynthSpecError("one archetype per class required")
        if not self.archetypes:
            raise SynthSpecError("no archetypes given")
        if self.sequences_per_class < 1:
            raise SynthSpecError("sequences_per_class must be >= 1")
        if self.width < 1 or self.height < 1:
            raise SynthSpecError("image size must be positive")

    def with_decay(self, decay: float) -> "SynthDatasetSpec":
        return replace(self, archetypes=tuple(replace(a, decay=decay) for a in self.archetypes))


def _nearest_epicenter(layout: FacialLayout, arch: ExpressionArchetype):
    """Graph distance and governing epicenter index for every region."""
    adj = layout.adjacency()
    dist = {r: np.inf for r in layout.regions}
    origin: dict[int, int] = {}
    frontier = []
    for k, e in sorted(enumerate(arch.epicenters), key=lambda t: t[1]):
        if dist[e] == 0:
            continue
        dist[e] = 0
        origin[e] = k
        frontier.append(e)
    while frontier:
        nxt = []
        for u in frontier:
            for v in sorted(adj[u]):
                if dist[v] == np.inf:
                    dist[v] = dist[u] + 1
                    origin[v] = origin[u]
                    nxt.append(v)
        frontier = nxt
    return dist, origin


def generate_sequence(arch: ExpressionArchetype, layout: FacialLayout, seed: int,
                      width: int = 144, height: int = 144, sequence_id: str | None = None) -> MotionSequence:
    for e in arch.epicenters:
        if e not in layout.regions:
            raise LayoutError(f"{arch.label}: epicenter {e} not in layout")
    rng = np.random.default_rng(seed)
    scale = 1.0 + rng.uniform(-arch.amplitude_jitter, arch.amplitude_jitter)
    ids = layout.ids
    jitter = rng.normal(0.0, arch.direction_jitter, size=len(ids))
    dist, origin = _nearest_epicenter(layout, arch)
    labels = layout.label_map(width, height)

    unit = np.zeros((height, width, 2))
    for k, r in enumerate(ids):
        if dist[r] == np.inf:
            continue
        theta = np.deg2rad(arch.base_direction[origin[r]] + jitter[k])
        peak = arch.amplitude * scale * np.exp(-arch.decay * dist[r])
        unit[labels == r] = (peak * np.cos(theta), peak * np.sin(theta))

    inside = labels > 0
    T = arch.frames
    ramp = np.linspace(0.0, 1.0, T) if T > 1 else np.ones(1)
    flow = ramp[:, None, None, None] * unit[None]
    if arch.pixel_noise > 0:
        noise = rng.normal(0.0, arch.pixel_noise, size=(T, int(inside.sum()), 2))
        flow[:, inside] += noise
    return MotionSequence(flow.astype(np.float32), arch.label, sequence_id, {"seed": seed})


def sequence_seeds(spec: SynthDatasetSpec) -> list[tuple[str, str, int]]:
    """(sequence_id, label, seed) for every sequence of the dataset."""
    children = np.random.SeedSequence(spec.rng_seed).spawn(len(spec.archetypes))
    out = []
    for arch, child in zip(spec.archetypes, children):
        seeds = child.generate_state(spec.sequences_per_class, dtype=np.uint32)
        for i, s in enumerate(seeds):
            out.append((f"{arch.label}_{i:03d}", arch.label, int(s)))
    return out


def generate_dataset(spec: SynthDatasetSpec, layout: FacialLayout) -> list[MotionSequence]:
    by_label = {a.label: a for a in spec.archetypes}
    return [
        generate_sequence(by_label[label], layout, seed, spec.width, spec.height, sid)
        for sid, label, seed in sequence_seeds(spec)
    ]


def write_dataset(spec: SynthDatasetSpec, layout: FacialLayout, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_label = {a.label: a for a in spec.archetypes}
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["sequence_id", "label", "seed"])
        for sid, label, seed in sequence_seeds(spec):
            seq = generate_sequence(by_label[label], layout, seed, spec.width, spec.height, sid)
            write_mfb(out / f"{sid}.mfb", seq)
            wr.writerow([sid, label, seed])
    return manifest


# -- spec files ---------------------------------------------------------------

def _archetype_from_table(label: str, table: dict, defaults: dict) -> ExpressionArchetype:
    merged = {**defaults, **table}
    try:
        return ExpressionArchetype(
            label=label,
            epicenters=tuple(int(e) for e in merged["epicenters"]),
            base_direction=tuple(float(d) for d in merged["base_direction"]),
            **{k: type(getattr(DEFAULT_ARCHETYPES[0], k))(merged[k])
               for k in ("amplitude", "decay", "direction_jitter", "frames", "amplitude_jitter", "pixel_noise")
               if k in merged},
        )
    except KeyError as exc:
        raise SynthSpecError(f"archetype {label!r} missing key {exc.args[0]!r}") from None


def parse_spec(text: str) -> SynthDatasetSpec:
    """Parse a TOML dataset description.

    Top-level keys: ``sequences_per_class``, ``rng_seed``, ``width``,
    ``height``, plus archetype defaults (``amplitude``, ``decay`` ...).
    Each ``[archetype.<label>]`` table needs ``epicenters`` and
    ``base_direction``; without any tables the built-in archetypes are used
    with the top-level overrides applied.
    """
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib

    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SynthSpecError(f"bad spec file: {exc}") from None
    arch_keys = ("amplitude", "decay", "direction_jitter", "frames", "amplitude_jitter", "pixel_noise")
    defaults = {k: doc[k] for k in arch_keys if k in doc}
    tables = doc.get("archetype", {})
    if tables:
        archetypes = tuple(_archetype_from_table(lab, t, defaults) for lab, t in tables.items())
    else:
        archetypes = tuple(
            replace(a, **{k: type(getattr(a, k))(v) for k, v in defaults.items()}) for a in DEFAULT_ARCHETYPES
        )
    kwargs = {k: int(doc[k]) for k in ("sequences_per_class", "rng_seed", "width", "height") if k in doc}
    return SynthDatasetSpec(archetypes=archetypes, **kwargs)


def load_spec(path: str | Path | None) -> SynthDatasetSpec:
    if path is None or str(path) == "default":
        return SynthDatasetSpec()
    return parse_spec(Path(path).read_text())
