"""Builds miniature benchmark-layout datasets for extractor tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def _write_png(path: Path, rng: np.random.Generator) -> None:
    pixels = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(path, format="PNG")


def build_mini_cirr(root: Path, n_images: int = 20, n_queries: int = 5,
                    seed: int = 0) -> Path:
    """CIRR-layout directory: images + split map + caption records."""
    assert n_images >= 2 * n_queries
    rng = np.random.default_rng(seed)
    names = [f"mini-{i:03d}" for i in range(n_images)]
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        _write_png(img_dir / f"{name}.png", rng)

    split = {name: f"./img/{name}.png" for name in names}
    (root / "image_splits").mkdir(exist_ok=True)
    (root / "image_splits" / "split.rc2.val.json").write_text(json.dumps(split))

    mods = ["make it red", "add a dog", "show two of them", "put it outdoors",
            "remove the background"]
    records = []
    for i in range(n_queries):
        reference = names[i]
        target = names[n_queries + i]
        others = [names[(2 * n_queries + i + j) % n_images] for j in range(3)]
        records.append({
            "pairid": i,
            "reference": reference,
            "target_hard": target,
            "caption": mods[i % len(mods)],
            "img_set": {"id": i, "members": [reference, target, *others]},
        })
    (root / "captions").mkdir(exist_ok=True)
    (root / "captions" / "cap.rc2.val.json").write_text(json.dumps(records))
    return root


def build_mini_fashioniq(root: Path, per_category: int = 3, seed: int = 1) -> Path:
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "image_splits").mkdir(exist_ok=True)
    (root / "captions").mkdir(exist_ok=True)
    for cat in ("dress", "shirt", "toptee"):
        names = [f"{cat}-{i}" for i in range(2 * per_category)]
        for name in names:
            _write_png(root / "images" / f"{name}.jpg", rng)
        (root / "image_splits" / f"split.{cat}.val.json").write_text(json.dumps(names))
        records = [{"candidate": names[i], "target": names[per_category + i],
                    "captions": [f"is more {cat}", "has longer sleeves"]}
                   for i in range(per_category)]
        (root / "captions" / f"cap.{cat}.val.json").write_text(json.dumps(records))
    return root


def build_mini_circo(root: Path, n_images: int = 12, n_queries: int = 3,
                     seed: int = 2) -> Path:
    rng = np.random.default_rng(seed)
    pool = root / "COCO2017_unlabeled" / "unlabeled2017"
    pool.mkdir(parents=True, exist_ok=True)
    ids = list(range(1, n_images + 1))
    for img_id in ids:
        _write_png(pool / f"{img_id:012d}.jpg", rng)
    (root / "annotations").mkdir(exist_ok=True)
    records = [{"reference_img_id": ids[i],
                "relative_caption": f"variation {i}",
                "gt_img_ids": [ids[n_queries + i], ids[n_queries + i + 1]]}
               for i in range(n_queries)]
    (root / "annotations" / "val.json").write_text(json.dumps(records))
    return root
