from __future__ import annotations

import json

import pytest

from cirextract.adapters import load_cirr, load_circo, load_dataset, load_fashioniq
from cirextract.errors import ConfigError

from minidata import build_mini_circo, build_mini_cirr, build_mini_fashioniq


def test_cirr_mini_layout(tmp_path):
    build_mini_cirr(tmp_path, n_images=12, n_queries=4)
    view = load_cirr(tmp_path, "val")
    assert view.protocol == "single_gt"
    assert len(view.gallery_names) == 12
    assert list(view.gallery_names) == sorted(view.gallery_names)
    assert len(view.queries) == 4
    q = view.queries[0]
    assert q.gt_names[0] in view.gallery_names
    assert q.reference_name in q.subset_names
    assert view.image_paths[q.reference_name].is_file()


def test_fashioniq_mini_layout(tmp_path):
    build_mini_fashioniq(tmp_path, per_category=2)
    view = load_fashioniq(tmp_path, "val")
    assert view.categories == (("dress", 0, 2), ("shirt", 2, 4), ("toptee", 4, 6))
    assert len(view.queries) == 6
    assert " and " in view.queries[0].modification
    assert view.protocol == "single_gt"


def test_circo_mini_layout(tmp_path):
    build_mini_circo(tmp_path, n_images=10, n_queries=3)
    view = load_circo(tmp_path, "val")
    assert view.protocol == "multi_gt"
    assert len(view.queries) == 3
    assert all(len(q.gt_names) == 2 for q in view.queries)
    assert view.queries[0].subset_names is None


def test_load_dataset_dispatch(tmp_path):
    build_mini_cirr(tmp_path, n_images=12, n_queries=2)
    view = load_dataset("CIRR", tmp_path, "val")
    assert view.dataset_id == "cirr-val"
    with pytest.raises(ConfigError, match="unknown adapter"):
        load_dataset("nope", tmp_path)


def test_missing_files_reported(tmp_path):
    with pytest.raises(ConfigError, match="missing"):
        load_cirr(tmp_path, "val")


def test_gt_outside_gallery_rejected(tmp_path):
    build_mini_cirr(tmp_path, n_images=12, n_queries=2)
    cap_path = tmp_path / "captions" / "cap.rc2.val.json"
    records = json.loads(cap_path.read_text())
    records[1]["target_hard"] = "not-a-real-image"
    cap_path.write_text(json.dumps(records))
    with pytest.raises(ConfigError, match="ground truth"):
        load_dataset("CIRR", tmp_path, "val")
