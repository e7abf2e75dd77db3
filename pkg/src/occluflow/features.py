"""Motion-direction descriptors computed from dense flow fields.

Pipeline per frame and region: the region's pixels are tiled into square
patches, each patch yields a direction-count histogram, patches coherent
with the seed patch (nearest the region centroid) are collected by a
breadth-first walk and summed.  Summing those region histograms over the
frames of a sequence and concatenating the regions in ascending id order
gives the global descriptor (GMD).
"""
from __future__ import annotations

import csv
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .regions import FacialLayout, LayoutError, OcclusionMask, validate_mask


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureParams:
    bins: int = 12
    patch_size: int = 8
    tau: float = 0.7
    min_magnitude: float = 0.5

    def __post_init__(self):
        if self.bins < 1 or self.patch_size < 1:
            raise FeatureError("bins and patch_size must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise FeatureError("tau must lie in [0, 1]")
        if self.min_magnitude < 0:
            raise FeatureError("min_magnitude must be non-negative")


@dataclass
class MotionSequence:
    """``flow`` has shape (frames, height, width, 2) holding (dx, dy)."""
    flow: np.ndarray
    label: str | None = None
    sequence_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        flow = np.asarray(self.flow)
        if flow.ndim == 3:
            flow = flow[None]
        if flow.ndim != 4 or flow.shape[-1] != 2 or flow.shape[0] < 1:
            raise FeatureError(f"flow must have shape (T, H, W, 2), got {flow.shape}")
        if not np.all(np.isfinite(flow)):
            raise FeatureError("flow contains non-finite values")
        self.flow = flow

    @property
    def frames(self) -> int:
        return self.flow.shape[0]

    @property
    def height(self) -> int:
        return self.flow.shape[1]

    @property
    def width(self) -> int:
        return self.flow.shape[2]

    def concat(self, other: "MotionSequence") -> "MotionSequence":
        if other.flow.shape[1:] != self.flow.shape[1:]:
            raise FeatureError("frame dimension mismatch")
        return MotionSequence(np.concatenate([self.flow, other.flow]), self.label, self.sequence_id)


def direction_bins(field_: np.ndarray, bins: int, min_magnitude: float) -> np.ndarray:
    """Bin index per pixel, or -1 where the magnitude is below the gate."""
    f = np.asarray(field_, dtype=np.float64)
    dx, dy = f[..., 0], f[..., 1]
    mag = np.hypot(dx, dy)
    angle = np.degrees(np.arctan2(dy, dx)) % 360.0
    idx = np.floor(angle / (360.0 / bins)).astype(np.int64)
    idx %= bins
    idx[(mag < min_magnitude) | (mag == 0)] = -1
    return idx


def patch_histogram(field_: np.ndarray, patch: tuple[int, int, int, int],
                    min_magnitude: float = 0.5, bins: int = 12) -> np.ndarray:
    """Direction-count histogram of one pixel rectangle ``(row0, row1, col0, col1)``."""
    r0, r1, c0, c1 = patch
    h, w = np.asarray(field_).shape[:2]
    if r1 <= r0 or c1 <= c0:
        raise FeatureError("empty patch")
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise FeatureError("patch outside field bounds")
    idx = direction_bins(np.asarray(field_)[r0:r1, c0:c1], bins, min_magnitude).ravel()
    return np.bincount(idx[idx >= 0], minlength=bins).astype(np.float64)


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FeatureError(f"histogram length mismatch {a.shape} vs {b.shape}")
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def coherent(a: np.ndarray, b: np.ndarray, tau: float = 0.7) -> bool:
    return similarity(a, b) >= tau


def _patch_grid(bin_idx: np.ndarray, bounds, p: int, bins: int) -> np.ndarray:
    r0, r1, c0, c1 = bounds
    nr, nc = (r1 - r0) // p, (c1 - c0) // p
    if nr < 1 or nc < 1:
        raise FeatureError("region smaller than one patch")
    block = bin_idx[r0:r0 + nr * p, c0:c0 + nc * p]
    patch_id = (np.arange(nr)[:, None] * nc + np.arange(nc)[None, :])
    patch_id = np.repeat(np.repeat(patch_id, p, axis=0), p, axis=1)
    keep = block >= 0
    flat = patch_id[keep] * bins + block[keep]
    return np.bincount(flat, minlength=nr * nc * bins).reshape(nr, nc, bins).astype(np.float64)


def _coherent_sum(hists: np.ndarray, bounds, p: int, tau: float) -> np.ndarray:
    nr, nc, bins = hists.shape
    r0, r1, c0, c1 = bounds
    cy, cx = (r0 + r1) / 2.0, (c0 + c1) / 2.0
    best = None
    for i in range(nr):
        for j in range(nc):
            d = (r0 + (i + 0.5) * p - cy) ** 2 + (c0 + (j + 0.5) * p - cx) ** 2
            if best is None or d < best[0] - 1e-12:
                best = (d, i, j)
    _, si, sj = best
    seed = hists[si, sj]
    if not seed.any():
        return np.zeros(bins)
    admitted = np.zeros((nr, nc), dtype=bool)
    admitted[si, sj] = True
    total = seed.copy()
    queue = deque([(si, sj)])
    while queue:
        i, j = queue.popleft()
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni < nr and 0 <= nj < nc and not admitted[ni, nj]:
                if coherent(hists[ni, nj], seed, tau):
                    admitted[ni, nj] = True
                    total += hists[ni, nj]
                    queue.append((ni, nj))
    return total


def region_md(field_: np.ndarray, layout: FacialLayout, region: int,
              params: FeatureParams = FeatureParams(), bin_idx: np.ndarray | None = None) -> np.ndarray:
    """Coherence-filtered sum of patch histograms inside one region."""
    field_ = np.asarray(field_)
    h, w = field_.shape[:2]
    bounds = layout.pixel_bounds(region, w, h)
    if bounds[1] <= bounds[0] or bounds[3] <= bounds[2]:
        raise FeatureError(f"region {region} covers no pixels")
    if bin_idx is None:
        bin_idx = direction_bins(field_, params.bins, params.min_magnitude)
    hists = _patch_grid(bin_idx, bounds, params.patch_size, params.bins)
    return _coherent_sum(hists, bounds, params.patch_size, params.tau)


def frame_md(field_: np.ndarray, layout: FacialLayout, params: FeatureParams = FeatureParams()) -> np.ndarray:
    bin_idx = direction_bins(field_, params.bins, params.min_magnitude)
    return np.concatenate([region_md(field_, layout, r, params, bin_idx) for r in layout.ids])


def sequence_gmd(seq: MotionSequence, layout: FacialLayout, params: FeatureParams = FeatureParams()) -> np.ndarray:
    """Per-region histograms summed over frames, concatenated by region id."""
    if seq.frames < 1:
        raise FeatureError("empty sequence")
    total = np.zeros(len(layout.ids) * params.bins)
    for t in range(seq.frames):
        total += frame_md(seq.flow[t], layout, params)
    return total


def gmd_block(region_index: int, bins: int) -> slice:
    """Slot range of the ``region_index``-th region (1-based) in a GMD."""
    return slice((region_index - 1) * bins, region_index * bins)


def apply_occlusion(seq: MotionSequence, layout: FacialLayout, mask: OcclusionMask,
                    noise_sigma: float = 0.0, seed: int = 0) -> MotionSequence:
    """Replace flow inside occluded regions by zero-mean isotropic noise."""
    validate_mask(layout, mask)
    flow = seq.flow.copy()
    if mask.occluded:
        labels = layout.label_map(seq.width, seq.height)
        inside = np.isin(labels, sorted(mask.occluded))
        if noise_sigma > 0:
            rng = np.random.default_rng(seed)
            noise = rng.normal(0.0, noise_sigma, size=(seq.frames, int(inside.sum()), 2))
            flow[:, inside] = noise.astype(flow.dtype)
        else:
            flow[:, inside] = 0
    return MotionSequence(flow, seq.label, seq.sequence_id, dict(seq.meta))


def occlude_gmd(gmd: np.ndarray, layout: FacialLayout, mask: OcclusionMask, bins: int = 12) -> np.ndarray:
    """Feature-level occlusion: zero the occluded regions' slots.

    Equals ``sequence_gmd(apply_occlusion(seq, layout, mask, 0))`` because
    the region histograms are computed independently per region.
    """
    out = np.array(gmd, dtype=np.float64, copy=True)
    ids = layout.ids
    for r in mask.occluded:
        k = ids.index(r) + 1
        out[..., gmd_block(k, bins)] = 0.0
    return out


# -- motion-field sequence files ---------------------------------------------

MFB_MAGIC = b"OFMF"
MFB_VERSION = 1
_MFB_HEADER = struct.Struct("<4sIIII")


def write_mfb(path: str | Path, seq: MotionSequence) -> None:
    header = _MFB_HEADER.pack(MFB_MAGIC, MFB_VERSION, seq.width, seq.height, seq.frames)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(seq.flow, dtype="<f4").tobytes())


def read_mfb(path: str | Path, label: str | None = None, sequence_id: str | None = None) -> MotionSequence:
    data = Path(path).read_bytes()
    if len(data) < _MFB_HEADER.size:
        raise FeatureError(f"{path}: truncated header")
    magic, version, width, height, frames = _MFB_HEADER.unpack_from(data)
    if magic != MFB_MAGIC:
        raise FeatureError(f"{path}: bad magic {magic!r}")
    if version != MFB_VERSION:
        raise FeatureError(f"{path}: unsupported version {version}")
    expected = frames * height * width * 2 * 4
    body = data[_MFB_HEADER.size:]
    if len(body) != expected:
        raise FeatureError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    flow = np.frombuffer(body, dtype="<f4").reshape(frames, height, width, 2).astype(np.float32)
    if sequence_id is None:
        sequence_id = Path(path).stem
    return MotionSequence(flow, label, sequence_id)


# -- GMD tables ---------------------------------------------------------------

@dataclass
class GmdTable:
    ids: list[str]
    labels: list[str]
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, rows: Sequence[int]) -> "GmdTable":
        rows = list(rows)
        return GmdTable([self.ids[i] for i in rows], [self.labels[i] for i in rows], self.values[rows])


def write_gmd_csv(path: str | Path, table: GmdTable) -> None:
    dims = table.values.shape[1]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["sequence_id", "label"] + [f"v{i + 1}" for i in range(dims)])
        for sid, lab, row in zip(table.ids, table.labels, table.values):
            wr.writerow([sid, lab or ""] + [repr(float(v)) for v in row])


def read_gmd_csv(path: str | Path) -> GmdTable:
    ids, labels, rows = [], [], []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header is None or header[:2] != ["sequence_id", "label"]:
            raise FeatureError(f"{path}: missing 'sequence_id,label,...' header")
        for line in rd:
            if not line:
                continue
            if len(line) != len(header):
                raise FeatureError(f"{path}: row {line[0]!r} has {len(line)} fields, expected {len(header)}")
            ids.append(line[0])
            labels.append(line[1])
            rows.append([float(v) for v in line[2:]])
    return GmdTable(ids, labels, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2))


def compute_table(seqs: Iterable[MotionSequence], layout: FacialLayout,
                  params: FeatureParams = FeatureParams()) -> GmdTable:
    ids, labels, rows = [], [], []
    for i, s in enumerate(seqs):
        ids.append(s.sequence_id or f"seq{i:05d}")
        labels.append(s.label or "")
        rows.append(sequence_gmd(s, layout, params))
    return GmdTable(ids, labels, np.array(rows).reshape(len(rows), len(layout.ids) * params.bins))
