"""Dataset adapters: map benchmark on-disk layouts to one normalized view.

Every adapter yields gallery image names (deterministically sorted), a
name -> file map, and per-query records (reference image, modification
text, ground-truth names, optional candidate-subset names).  Categories,
when a dataset has them, are contiguous query ranges over one shared
gallery (the bundle model carries a single gallery per directory).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class QueryRecord:
    reference_name: str
    modification: str
    gt_names: tuple[str, ...]
    subset_names: tuple[str, ...] | None = None


@dataclass(frozen=True)
class DatasetView:
    dataset_id: str
    protocol: str
    gallery_names: tuple[str, ...]
    image_paths: dict[str, Path]
    queries: tuple[QueryRecord, ...]
    categories: tuple[tuple[str, int, int], ...] | None = None


def _read_json(path: Path):
    if not path.is_file():
        raise ConfigError(f"dataset file missing: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"malformed dataset file {path}: {exc}") from exc


def load_cirr(root: str | Path, split: str = "val") -> DatasetView:
    """CIRR layout: captions/cap.rc2.<split>.json + image_splits/split.rc2.<split>.json."""
    root = Path(root)
    name_to_rel = _read_json(root / "image_splits" / f"split.rc2.{split}.json")
    records = _read_json(root / "captions" / f"cap.rc2.{split}.json")
    gallery_names = tuple(sorted(name_to_rel))
    paths = {name: (root / rel).resolve() for name, rel in name_to_rel.items()}
    queries = []
    for rec in records:
        members = tuple(str(m) for m in rec["img_set"]["members"])
        queries.append(QueryRecord(
            reference_name=str(rec["reference"]),
            modification=str(rec["caption"]),
            gt_names=(str(rec["target_hard"]),),
            subset_names=members))
    return DatasetView(dataset_id=f"cirr-{split}", protocol="single_gt",
                       gallery_names=gallery_names, image_paths=paths,
                       queries=tuple(queries))


def load_circo(root: str | Path, split: str = "val") -> DatasetView:
    """CIRCO layout: annotations/<split>.json + COCO unlabeled image pool."""
    root = Path(root)
    records = _read_json(root / "annotations" / f"{split}.json")
    pool = root / "COCO2017_unlabeled" / "unlabeled2017"
    if not pool.is_dir():
        raise ConfigError(f"image pool missing: {pool}")
    files = sorted(p.name for p in pool.iterdir() if p.suffix.lower() in (".jpg", ".png"))
    paths = {name: pool / name for name in files}

    def name_of(img_id) -> str:
        return f"{int(img_id):012d}.jpg"

    queries = []
    for rec in records:
        gts = rec.get("gt_img_ids") or [rec["target_img_id"]]
        queries.append(QueryRecord(
            reference_name=name_of(rec["reference_img_id"]),
            modification=str(rec["relative_caption"]),
            gt_names=tuple(name_of(g) for g in gts)))
    return DatasetView(dataset_id=f"circo-{split}", protocol="multi_gt",
                       gallery_names=tuple(files), image_paths=paths,
                       queries=tuple(queries))


FASHIONIQ_CATEGORIES = ("dress", "shirt", "toptee")


def load_fashioniq(root: str | Path, split: str = "val") -> DatasetView:
    """FashionIQ layout: captions/cap.<cat>.<split>.json + image_splits + images/.

    The three category galleries are merged into one shared gallery; the
    category query ranges are recorded so reports can average per category.
    """
    root = Path(root)
    names: set[str] = set()
    queries: list[QueryRecord] = []
    ranges: list[tuple[str, int, int]] = []
    for cat in FASHIONIQ_CATEGORIES:
        names.update(str(n) for n in _read_json(
            root / "image_splits" / f"split.{cat}.{split}.json"))
        start = len(queries)
        for rec in _read_json(root / "captions" / f"cap.{cat}.{split}.json"):
            two = [str(c).strip() for c in rec["captions"]]
            queries.append(QueryRecord(
                reference_name=str(rec["candidate"]),
                modification=" and ".join(c for c in two if c),
                gt_names=(str(rec["target"]),)))
        ranges.append((cat, start, len(queries)))
    gallery_names = tuple(sorted(names))
    paths = {name: root / "images" / f"{name}.jpg" for name in gallery_names}
    return DatasetView(dataset_id=f"fashioniq-{split}", protocol="single_gt",
                       gallery_names=gallery_names, image_paths=paths,
                       queries=tuple(queries), categories=tuple(ranges))


_LOADERS = {"CIRR": load_cirr, "CIRCO": load_circo, "FashionIQ": load_fashioniq}


def load_dataset(adapter: str, root: str | Path, split: str = "val") -> DatasetView:
    try:
        loader = _LOADERS[adapter]
    except KeyError:
        raise ConfigError(f"unknown adapter {adapter!r}; expected one of "
                          f"{sorted(_LOADERS)}") from None
    view = loader(root, split)
    _check_view(view)
    return view


def _check_view(view: DatasetView) -> None:
    if not view.gallery_names:
        raise ConfigError(f"{view.dataset_id}: empty gallery")
    if not view.queries:
        raise ConfigError(f"{view.dataset_id}: no queries")
    known = set(view.gallery_names)
    for i, q in enumerate(view.queries):
        for gt in q.gt_names:
            if gt not in known:
                raise ConfigError(
                    f"{view.dataset_id}: query {i} ground truth {gt!r} not in gallery")
        if q.subset_names is not None:
            for s in q.subset_names:
                if s not in known:
                    raise ConfigError(
                        f"{view.dataset_id}: query {i} subset member {s!r} not in gallery")
        if not q.modification:
            raise ConfigError(f"{view.dataset_id}: query {i} has empty modification text")
