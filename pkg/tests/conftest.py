from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cirfuse import bundle as bundle_mod


@pytest.fixture(scope="session")
def planted_bundle():
    """Small planted-target bundle shared by read-only tests."""
    return bundle_mod.synth_bundle(gallery_count=100, query_count=10, dim=32, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


def make_bundle(q_v, q_f, q_m, t_v, t_c, annotations, protocol="multi_gt",
                categories=None, dataset="fixture"):
    """Assemble a Bundle from raw float arrays (cast to the storage dtype)."""
    f4 = lambda a: np.ascontiguousarray(a, dtype="<f4")
    q_v, q_f, q_m, t_v, t_c = map(f4, (q_v, q_f, q_m, t_v, t_c))
    manifest = bundle_mod.Manifest(
        dataset_name=dataset, dim=q_v.shape[1],
        gallery_count=t_v.shape[0], query_count=q_v.shape[0],
        captions_per_target=t_c.shape[1], captions_per_query=q_m.shape[1],
        protocol=protocol,
        categories=None if categories is None else tuple(categories))
    return bundle_mod.Bundle(
        manifest=manifest,
        queries=bundle_mod.QueryChannels(q_v=q_v, q_f=q_f, q_m_raw=q_m),
        gallery=bundle_mod.GalleryChannels(t_v=t_v, t_c_raw=t_c),
        annotations=tuple(annotations))
