from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from occluflow.features import FeatureParams, compute_table
from occluflow.regions import FacialLayout, Rect, default_layout
from occluflow.synth import SynthDatasetSpec, generate_dataset


def strip_layout(n: int, edges) -> FacialLayout:
    """``n`` side-by-side rectangles numbered 1..n with the given edges."""
    w = 1.0 / n
    regions = {i + 1: Rect(i * w + 0.01 * w, 0.1, 0.98 * w, 0.8) for i in range(n)}
    return FacialLayout(regions, frozenset(frozenset(e) for e in edges))


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture
def path3():
    return strip_layout(3, [(1, 2), (2, 3)])


@pytest.fixture
def triangle():
    return strip_layout(3, [(1, 2), (2, 3), (1, 3)])


def blobs(n_per_class=50, d=4, sep=6.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0, (n_per_class, d))
    b = rng.normal(0.0, 1.0, (n_per_class, d)) + sep
    X = np.vstack([a, b])
    y = np.array([True] * n_per_class + [False] * n_per_class)
    return X, y


@pytest.fixture(scope="session")
def small_spec():
    return SynthDatasetSpec(sequences_per_class=12, rng_seed=11)


@pytest.fixture(scope="session")
def small_sequences(small_spec, layout):
    return generate_dataset(small_spec, layout)


@pytest.fixture(scope="session")
def small_table(small_sequences, layout):
    return compute_table(small_sequences, layout, FeatureParams())


@pytest.fixture(scope="session")
def quiet_spec():
    """Generator settings without noise or jitter, for exact magnitude checks."""
    base = SynthDatasetSpec(sequences_per_class=2, rng_seed=5)
    return replace(base, archetypes=tuple(
        replace(a, pixel_noise=0.0, amplitude_jitter=0.0, direction_jitter=0.0) for a in base.archetypes))
