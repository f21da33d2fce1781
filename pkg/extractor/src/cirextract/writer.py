"""Bundle-directory writer.

Writes the retrieval engine's on-disk interchange format:

    manifest.json, annotations.json, gallery.img.bin, gallery.cap.bin,
    query.qv.bin, query.qf.bin, query.qm.bin

Matrix files are raw row-major float32 little-endian scalars; manifest and
annotations are canonical JSON (sorted keys, two-space indent, trailing
newline), so rewriting identical data produces identical bytes.  This
module deliberately does not import the engine package: the directory
format is the only coupling between the two.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ExtractorError

SCALAR = "<f4"


@dataclass(frozen=True)
class BundleArrays:
    t_v: np.ndarray                 # (K, d)
    t_c: np.ndarray                 # (K, N_t, d)
    q_v: np.ndarray                 # (Q, d)
    q_f: np.ndarray                 # (Q, d)
    q_m: np.ndarray                 # (Q, N_q, d)


@dataclass(frozen=True)
class BundleAnnotation:
    gt_ids: tuple[int, ...]
    reference_id: int | None
    subset_ids: tuple[int, ...] | None


def write_bundle_dir(out: str | Path,
                     dataset: str,
                     protocol: str,
                     arrays: BundleArrays,
                     annotations: list[BundleAnnotation],
                     categories: list[tuple[str, int, int]] | None = None,
                     extra_channels: dict[str, np.ndarray] | None = None) -> Path:
    """Write one bundle directory; returns its path.

    ``extra_channels`` maps a logical name (e.g. ``query_qf_noadd``) to an
    additional matrix stored alongside the standard channels; the engine
    ignores unknown logical names, so variants never break validation.
    """
    out = Path(out)
    k, d = arrays.t_v.shape
    q = arrays.q_v.shape[0]
    n_t = arrays.t_c.shape[1]
    n_q = arrays.q_m.shape[1]
    expected = {"t_v": (k, d), "t_c": (k, n_t, d), "q_v": (q, d),
                "q_f": (q, d), "q_m": (q, n_q, d)}
    for name, shape in expected.items():
        got = tuple(getattr(arrays, name).shape)
        if got != shape:
            raise ExtractorError(f"{name}: shape {got} does not match {shape}")
    if len(annotations) != q:
        raise ExtractorError(f"{len(annotations)} annotations for {q} queries")

    files = {"gallery_img": "gallery.img.bin",
             "query_qv": "query.qv.bin",
             "query_qf": "query.qf.bin",
             "annotations": "annotations.json"}
    matrices = {"gallery_img": arrays.t_v,
                "query_qv": arrays.q_v,
                "query_qf": arrays.q_f}
    if n_t > 0:
        files["gallery_cap"] = "gallery.cap.bin"
        matrices["gallery_cap"] = arrays.t_c
    if n_q > 0:
        files["query_qm"] = "query.qm.bin"
        matrices["query_qm"] = arrays.q_m
    for logical, arr in (extra_channels or {}).items():
        files[logical] = logical.replace("_", ".") + ".bin"
        matrices[logical] = arr

    manifest = {
        "format_version": 1,
        "dataset": dataset,
        "dim": int(d),
        "gallery_count": int(k),
        "query_count": int(q),
        "captions_per_target": int(n_t),
        "captions_per_query": int(n_q),
        "protocol": protocol,
        "files": files,
    }
    if categories:
        manifest["categories"] = [{"name": name, "start": start, "end": end}
                                  for name, start, end in categories]
    ann_doc = [{"gt_ids": list(a.gt_ids),
                "reference_id": a.reference_id,
                "subset_ids": None if a.subset_ids is None else list(a.subset_ids)}
               for a in annotations]

    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_bytes(_canonical(manifest))
    (out / files["annotations"]).write_bytes(_canonical(ann_doc))
    for logical, arr in matrices.items():
        data = np.ascontiguousarray(arr, dtype=SCALAR)
        (out / files[logical]).write_bytes(data.tobytes())
    return out


def _canonical(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")
