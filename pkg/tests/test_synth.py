from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occluflow.regions import LayoutError, default_layout
from occluflow.synth import (EXPRESSIONS, ExpressionArchetype, SynthDatasetSpec, SynthSpecError, generate_dataset,
                             generate_sequence, parse_spec, write_dataset)

QUIET = dict(pixel_noise=0.0, amplitude_jitter=0.0, direction_jitter=0.0)


def region_magnitudes(seq, layout, frame=-1):
    lab = layout.label_map(seq.width, seq.height)
    mag = np.hypot(seq.flow[frame, ..., 0], seq.flow[frame, ..., 1]).astype(np.float64)
    return {r: float(mag[lab == r].mean()) for r in layout.ids}


def test_large_decay_leaves_only_epicenters(layout):
    arch = ExpressionArchetype("x", (12,), (0.0,), decay=50.0, **QUIET)
    m = region_magnitudes(generate_sequence(arch, layout, 1), layout)
    assert m[12] == pytest.approx(3.0, rel=1e-6)
    assert max(v for r, v in m.items() if r != 12) < 1e-12


def test_zero_decay_is_flat(layout):
    arch = ExpressionArchetype("x", (3, 20), (0.0, 90.0), decay=0.0, **QUIET)
    seq = generate_sequence(arch, layout, 2)
    for t in range(seq.frames):
        m = region_magnitudes(seq, layout, t)
        assert max(m.values()) - min(m.values()) < 1e-5


def test_unit_decay_neighbor_ratio(layout):
    arch = ExpressionArchetype("x", (12,), (270.0,), decay=1.0, pixel_noise=0.0)
    seq = generate_sequence(arch, layout, 3)
    m = region_magnitudes(seq, layout)
    for n in (6, 8, 14, 15):
        assert m[n] / m[12] == pytest.approx(np.exp(-1.0), rel=1e-5)


def test_unit_decay_ratio_with_noise(layout):
    # pixel noise biases magnitudes upward; averaged over many sequences
    # the ratio stays near e^-1
    arch = ExpressionArchetype("x", (12,), (270.0,), decay=1.0, pixel_noise=0.1)
    ratios = []
    for s in range(20):
        m = region_magnitudes(generate_sequence(arch, layout, s), layout)
        ratios.append(np.mean([m[n] for n in (6, 8, 14, 15)]) / m[12])
    assert np.mean(ratios) == pytest.approx(np.exp(-1.0), abs=0.03)


def test_ramp_neutral_to_apex(layout):
    arch = ExpressionArchetype("x", (12,), (0.0,), **QUIET)
    seq = generate_sequence(arch, layout, 4)
    mags = [region_magnitudes(seq, layout, t)[12] for t in range(seq.frames)]
    assert mags[0] == 0.0
    assert np.all(np.diff(mags) > 0)
    assert mags[-1] == pytest.approx(3.0, rel=1e-6)


def test_margins_have_no_flow(layout):
    seq = generate_sequence(ExpressionArchetype("x", (12,), (0.0,)), layout, 5)
    lab = layout.label_map(seq.width, seq.height)
    assert not seq.flow[:, lab == 0].any()


def test_unknown_epicenter(layout):
    with pytest.raises(LayoutError):
        generate_sequence(ExpressionArchetype("x", (40,), (0.0,)), layout, 0)


def test_archetype_validation():
    with pytest.raises(SynthSpecError):
        ExpressionArchetype("x", (), ())
    with pytest.raises(SynthSpecError):
        ExpressionArchetype("x", (1, 2), (0.0,))
    with pytest.raises(SynthSpecError):
        ExpressionArchetype("x", (1,), (0.0,), amplitude=0.0)
    with pytest.raises(SynthSpecError):
        ExpressionArchetype("x", (1,), (0.0,), frames=0)


def test_zero_sequences_rejected():
    with pytest.raises(SynthSpecError):
        SynthDatasetSpec(sequences_per_class=0)


def test_default_dataset_counts(layout):
    spec = SynthDatasetSpec()
    from occluflow.synth import sequence_seeds

    seeds = sequence_seeds(spec)
    assert len(seeds) == 360
    assert Counter(label for _, label, _ in seeds) == {e: 60 for e in EXPRESSIONS}
    assert len({sid for sid, _, _ in seeds}) == 360


def test_dataset_deterministic(layout, tmp_path):
    spec = SynthDatasetSpec(sequences_per_class=2, rng_seed=7)
    write_dataset(spec, layout, tmp_path / "a")
    write_dataset(spec, layout, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 13
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = write_dataset(replace(spec, rng_seed=8), layout, tmp_path / "c").parent
    assert (other / "anger_000.mfb").read_bytes() != (tmp_path / "a" / "anger_000.mfb").read_bytes()


def test_generate_dataset_labels(layout):
    seqs = generate_dataset(SynthDatasetSpec(sequences_per_class=1), layout)
    assert [s.label for s in seqs] == list(EXPRESSIONS)
    assert all(s.flow.dtype == np.float32 and s.flow.shape == (10, 144, 144, 2) for s in seqs)


@settings(max_examples=25, deadline=None)
@given(st.sets(st.integers(1, 25), min_size=1, max_size=3), st.floats(0.05, 3.0), st.integers(0, 2**31))
def test_propagation_signature(epicenters, decay, seed):
    layout = default_layout()
    eps = tuple(sorted(epicenters))
    arch = ExpressionArchetype("x", eps, tuple(float(40 * i) for i in range(len(eps))), decay=decay,
                               pixel_noise=0.0, frames=3)
    m = region_magnitudes(generate_sequence(arch, layout, seed), layout)
    dist = layout.distances(eps)
    by_d = {}
    for r, v in m.items():
        by_d.setdefault(dist[r], []).append(v)
    ds = sorted(by_d)
    for a, b in zip(ds, ds[1:]):
        assert max(by_d[b]) <= min(by_d[a]) * (1 + 1e-6)


def test_parse_spec_tables():
    spec = parse_spec("""
sequences_per_class = 4
rng_seed = 3
decay = 2.0

[archetype.joy]
epicenters = [18, 19]
base_direction = [225, 315]

[archetype.grim]
epicenters = [2]
base_direction = [90]
amplitude = 5.0
""")
    assert spec.sequences_per_class == 4 and spec.rng_seed == 3
    assert [a.label for a in spec.archetypes] == ["joy", "grim"]
    assert spec.archetypes[0].decay == 2.0 and spec.archetypes[1].amplitude == 5.0


def test_parse_spec_overrides_defaults():
    spec = parse_spec("pixel_noise = 0.1\n")
    assert len(spec.archetypes) == 6
    assert all(a.pixel_noise == 0.1 for a in spec.archetypes)


def test_parse_spec_errors():
    with pytest.raises(SynthSpecError):
        parse_spec("[archetype.x]\nepicenters = [1]\n")
    with pytest.raises(SynthSpecError):
        parse_spec("this is = = not toml")
