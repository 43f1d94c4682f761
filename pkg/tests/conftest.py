import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from qroar.evaluator import OutlierSpec, synth_model
from qroar.quant import QuantSpec

ECHO_BACKEND = os.path.join(os.path.dirname(__file__), "backends", "echo_backend.py")
GOLDEN_PROTOCOL = os.path.join(os.path.dirname(__file__), "fixtures", "protocol_golden.jsonl")


@pytest.fixture(scope="session")
def desk_bundle():
    """The default desk-scale model: 4 heads of dim 16, PI x8, per-tensor W4."""
    return synth_model(0, lengths=(128, 512, 2048))


@pytest.fixture(scope="session")
def small_bundle():
    """A fast bundle for search tests: 2 heads of dim 12 (6 pairs), short caches."""
    return synth_model(
        7,
        d_model=32,
        num_heads=2,
        head_dim=12,
        train_window=64,
        pi_factor=4.0,
        lengths=(32, 128, 256),
        outliers=OutlierSpec(channels=(3, 11), target_pairs=(1, 2), row_gain=8.0),
        quant=QuantSpec(4, "per_tensor"),
        min_samples=256,
    )


def random_cache(rng, num_pairs=4, d_model=16, short_length=32, long_length=96, min_samples=64):
    """A fully random activation cache for oracle tests; no model behind it."""
    from qroar.diagnostics import ActivationCache

    n_short_runs = max(1, -(-min_samples // short_length))
    n_long_runs = max(1, -(-min_samples // long_length))
    ns = n_short_runs * short_length
    nl = n_long_runs * long_length
    pair_ns = max(ns, min_samples)
    pair_nl = max(nl, min_samples)
    return ActivationCache(
        short_hidden=rng.normal(size=(ns, d_model)),
        long_hidden=rng.normal(size=(nl, d_model)) * rng.uniform(0.5, 2.0),
        short_pair_values=rng.normal(size=(num_pairs, pair_ns, 2)),
        short_pair_positions=rng.integers(0, short_length, size=pair_ns).astype(float),
        long_pair_values=rng.normal(size=(num_pairs, pair_nl, 2)) * rng.uniform(0.5, 3.0),
        long_pair_positions=rng.integers(0, long_length, size=pair_nl).astype(float),
        short_length=short_length,
        long_length=long_length,
        n_short_runs=n_short_runs,
        n_long_runs=n_long_runs,
        min_samples=min_samples,
    )
