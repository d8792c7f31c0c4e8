"""Shared synthetic-dataset fixtures (session-scoped; generation is cheap but not free)."""

import pytest

from rgbdfuse.data import generate_synthetic, load_manifest


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    """3 classes x 6 pairs of 16x16 images; enough to exercise the loops."""
    root = tmp_path_factory.mktemp("micro")
    return load_manifest(generate_synthetic(root, classes=3, per_class=6, size=16, seed=11))


@pytest.fixture(scope="session")
def separable_manifest(tmp_path_factory):
    """2 well-separated classes for the learning sanity checks."""
    root = tmp_path_factory.mktemp("separable")
    return load_manifest(generate_synthetic(root, classes=2, per_class=12, size=16, seed=12))
