"""Embedding-bundle data model and its bit-exact on-disk format.

A bundle is a directory:

    manifest.json        format_version=1, dataset, dim, gallery_count,
                         query_count, captions_per_target, captions_per_query,
                         protocol, optional categories, files (logical -> name)
    gallery.img.bin      K*d  float32 little-endian, row-major
    gallery.cap.bin      K*N_t*d, index order (item, caption, dim)
    query.qv.bin         Q*d
    query.qf.bin         Q*d
    query.qm.bin         Q*N_q*d, order (query, caption, dim)
    annotations.json     per query: gt_ids, reference_id, subset_ids

Caption channels are stored per caption row (not pre-averaged) so caption-
count sweeps run without re-extraction; a bundle with N_t or N_q equal to 0
simply omits the corresponding file.  Matrix files carry raw scalars only;
byte length must equal rows*cols*4 exactly.  Writing the same bundle twice
produces byte-identical directories.

Bundles are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import fusion
from .errors import DomainError, FormatError
from .fusion import Channel, FusionWeights

__all__ = [
    "FORMAT_VERSION",
    "PROTOCOLS",
    "CategoryRange",
    "Manifest",
    "QueryChannels",
    "GalleryChannels",
    "Annotation",
    "Bundle",
    "Violation",
    "ValidationReport",
    "load_bundle",
    "validate",
    "write_bundle",
    "synth_bundle",
    "bundles_identical",
]

FORMAT_VERSION = 1
PROTOCOLS = ("single_gt", "multi_gt")
SCALAR = np.dtype("<f4")
MANIFEST_FILE = "manifest.json"

# logical name -> (default filename, manifest count giving the middle axis)
_MATRIX_FILES = {
    "gallery_img": "gallery.img.bin",
    "gallery_cap": "gallery.cap.bin",
    "query_qv": "query.qv.bin",
    "query_qf": "query.qf.bin",
    "query_qm": "query.qm.bin",
}
_ANNOTATIONS_KEY = "annotations"
_ANNOTATIONS_FILE = "annotations.json"


@dataclass(frozen=True)
class CategoryRange:
    """Half-open query-index range belonging to one named category."""

    name: str
    start: int
    end: int


@dataclass(frozen=True)
class Manifest:
    dataset_name: str
    dim: int
    gallery_count: int
    query_count: int
    captions_per_target: int
    captions_per_query: int
    protocol: str = "multi_gt"
    categories: tuple[CategoryRange, ...] | None = None
    format_version: int = FORMAT_VERSION

    def files(self) -> dict[str, str]:
        """Logical-name -> filename map; caption files only when present."""
        out = {"gallery_img": _MATRIX_FILES["gallery_img"],
               "query_qv": _MATRIX_FILES["query_qv"],
               "query_qf": _MATRIX_FILES["query_qf"],
               _ANNOTATIONS_KEY: _ANNOTATIONS_FILE}
        if self.captions_per_target > 0:
            out["gallery_cap"] = _MATRIX_FILES["gallery_cap"]
        if self.captions_per_query > 0:
            out["query_qm"] = _MATRIX_FILES["query_qm"]
        return out

    def shape_of(self, logical: str) -> tuple[int, ...]:
        k, q, d = self.gallery_count, self.query_count, self.dim
        return {
            "gallery_img": (k, d),
            "gallery_cap": (k, self.captions_per_target, d),
            "query_qv": (q, d),
            "query_qf": (q, d),
            "query_qm": (q, self.captions_per_query, d),
        }[logical]


@dataclass(frozen=True, eq=False)
class QueryChannels:
    q_v: np.ndarray            # (Q, d) float32
    q_f: np.ndarray            # (Q, d) float32
    q_m_raw: np.ndarray        # (Q, N_q, d) float32, N_q may be 0


@dataclass(frozen=True, eq=False)
class GalleryChannels:
    t_v: np.ndarray            # (K, d) float32
    t_c_raw: np.ndarray        # (K, N_t, d) float32, N_t may be 0


@dataclass(frozen=True)
class Annotation:
    gt_ids: tuple[int, ...]
    reference_id: int | None = None
    subset_ids: tuple[int, ...] | None = None


@dataclass(frozen=True, eq=False)
class Bundle:
    manifest: Manifest
    queries: QueryChannels
    gallery: GalleryChannels
    annotations: tuple[Annotation, ...]


@dataclass(frozen=True)
class Violation:
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


def bundles_identical(a: Bundle, b: Bundle) -> bool:
    """Field-for-field equality with bit-exact array comparison."""
    if a.manifest != b.manifest or a.annotations != b.annotations:
        return False
    pairs = [(a.queries.q_v, b.queries.q_v), (a.queries.q_f, b.queries.q_f),
             (a.queries.q_m_raw, b.queries.q_m_raw),
             (a.gallery.t_v, b.gallery.t_v), (a.gallery.t_c_raw, b.gallery.t_c_raw)]
    return all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs)


# ---------------------------------------------------------------------------
# load / validate / write
# ---------------------------------------------------------------------------

def _read_manifest(path: Path) -> tuple[Manifest, dict[str, str]]:
    mf_path = path / MANIFEST_FILE
    if not mf_path.is_file():
        raise FormatError(f"missing manifest: {mf_path}")
    try:
        raw = json.loads(mf_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"unreadable manifest {mf_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"manifest {mf_path} is not a JSON object")
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        categories = None
        if raw.get("categories") is not None:
            categories = tuple(CategoryRange(str(c["name"]), int(c["start"]), int(c["end"]))
                               for c in raw["categories"])
        manifest = Manifest(
            dataset_name=str(raw["dataset"]),
            dim=int(raw["dim"]),
            gallery_count=int(raw["gallery_count"]),
            query_count=int(raw["query_count"]),
            captions_per_target=int(raw["captions_per_target"]),
            captions_per_query=int(raw["captions_per_query"]),
            protocol=str(raw["protocol"]),
            categories=categories,
        )
        files = {str(k): str(v) for k, v in raw["files"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest {mf_path}: {exc!r}") from exc
    if manifest.dim <= 0 or manifest.gallery_count <= 0 or manifest.query_count <= 0:
        raise FormatError("manifest dims/counts must be positive")
    if manifest.captions_per_target < 0 or manifest.captions_per_query < 0:
        raise FormatError("caption counts must be non-negative")
    if manifest.protocol not in PROTOCOLS:
        raise FormatError(f"unknown protocol {manifest.protocol!r}")
    return manifest, files


def _read_matrix(path: Path, filename: str, shape: tuple[int, ...]) -> np.ndarray:
    fpath = path / filename
    if not fpath.is_file():
        raise FormatError(f"missing matrix file: {fpath}")
    expected = int(np.prod(shape)) * SCALAR.itemsize
    actual = fpath.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{filename}: size mismatch, expected {expected} bytes for shape "
            f"{shape}, found {actual}")
    if expected == 0:
        return np.zeros(shape, dtype=SCALAR)
    data = np.fromfile(fpath, dtype=SCALAR)
    return data.reshape(shape)


def _read_annotations(path: Path, filename: str, manifest: Manifest) -> tuple[Annotation, ...]:
    fpath = path / filename
    if not fpath.is_file():
        raise FormatError(f"missing annotations file: {fpath}")
    try:
        raw = json.loads(fpath.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"unreadable annotations {fpath}: {exc}") from exc
    if not isinstance(raw, list):
        raise FormatError("annotations must be a JSON list")
    if len(raw) != manifest.query_count:
        raise FormatError(
            f"annotations hold {len(raw)} records for {manifest.query_count} queries")
    out = []
    for i, rec in enumerate(raw):
        try:
            gt = tuple(int(g) for g in rec["gt_ids"])
            ref = rec.get("reference_id")
            ref = None if ref is None else int(ref)
            subset = rec.get("subset_ids")
            subset = None if subset is None else tuple(int(s) for s in subset)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"annotations[{i}]: malformed record ({exc!r})") from exc
        out.append(Annotation(gt_ids=gt, reference_id=ref, subset_ids=subset))
    return tuple(out)


def load_bundle(path: str | Path, check: bool = True) -> Bundle:
    """Load a bundle directory into memory.

    Structural problems (missing files, byte-length mismatches, bad JSON,
    wrong format version) raise FormatError.  With ``check`` (default) the
    loaded scalars must all be finite; the first offending coordinate is
    reported.  The on-disk data is never modified.
    """
    path = Path(path)
    if not path.is_dir():
        raise FormatError(f"bundle directory not found: {path}")
    manifest, files = _read_manifest(path)
    expected_files = manifest.files()
    for logical in expected_files:
        if logical not in files:
            raise FormatError(f"manifest files map lacks entry {logical!r}")

    def load(logical: str) -> np.ndarray:
        return _read_matrix(path, files[logical], manifest.shape_of(logical))

    q_v = load("query_qv")
    q_f = load("query_qf")
    t_v = load("gallery_img")
    if manifest.captions_per_query > 0:
        q_m = load("query_qm")
    else:
        q_m = np.zeros(manifest.shape_of("query_qm"), dtype=SCALAR)
    if manifest.captions_per_target > 0:
        t_c = load("gallery_cap")
    else:
        t_c = np.zeros(manifest.shape_of("gallery_cap"), dtype=SCALAR)
    annotations = _read_annotations(path, files[_ANNOTATIONS_KEY], manifest)
    bundle = Bundle(manifest=manifest,
                    queries=QueryChannels(q_v=q_v, q_f=q_f, q_m_raw=q_m),
                    gallery=GalleryChannels(t_v=t_v, t_c_raw=t_c),
                    annotations=annotations)
    if check:
        for name, arr in _channel_arrays(bundle):
            coord = _first_nonfinite(arr)
            if coord is not None:
                raise FormatError(
                    f"{name}{list(coord)}: non-finite value in {_file_for_channel(files, name)}")
    return bundle


def _file_for_channel(files: Mapping[str, str], channel: str) -> str:
    logical = {"q_v": "query_qv", "q_f": "query_qf", "q_m": "query_qm",
               "t_v": "gallery_img", "t_c": "gallery_cap"}[channel]
    return files.get(logical, logical)


def _channel_arrays(bundle: Bundle) -> list[tuple[str, np.ndarray]]:
    return [("q_v", bundle.queries.q_v), ("q_f", bundle.queries.q_f),
            ("q_m", bundle.queries.q_m_raw), ("t_v", bundle.gallery.t_v),
            ("t_c", bundle.gallery.t_c_raw)]


def _first_nonfinite(arr: np.ndarray) -> tuple[int, ...] | None:
    finite = np.isfinite(arr)
    if finite.all():
        return None
    flat = int(np.flatnonzero(~finite.ravel())[0])
    return tuple(int(x) for x in np.unravel_index(flat, arr.shape))


def validate(bundle: Bundle) -> ValidationReport:
    """Check every bundle invariant; returns a report instead of raising.

    An empty violation list means the bundle is valid.
    """
    v: list[Violation] = []
    m = bundle.manifest

    if m.format_version != FORMAT_VERSION:
        v.append(Violation("manifest.format_version",
                           f"unsupported version {m.format_version}"))
    if m.dim <= 0:
        v.append(Violation("manifest.dim", f"must be positive, got {m.dim}"))
    if m.gallery_count <= 0:
        v.append(Violation("manifest.gallery_count", f"must be positive, got {m.gallery_count}"))
    if m.query_count <= 0:
        v.append(Violation("manifest.query_count", f"must be positive, got {m.query_count}"))
    if m.captions_per_target < 0:
        v.append(Violation("manifest.captions_per_target", "must be non-negative"))
    if m.captions_per_query < 0:
        v.append(Violation("manifest.captions_per_query", "must be non-negative"))
    if m.protocol not in PROTOCOLS:
        v.append(Violation("manifest.protocol", f"unknown protocol {m.protocol!r}"))

    expected_shapes = {
        "q_v": (m.query_count, m.dim),
        "q_f": (m.query_count, m.dim),
        "q_m": (m.query_count, m.captions_per_query, m.dim),
        "t_v": (m.gallery_count, m.dim),
        "t_c": (m.gallery_count, m.captions_per_target, m.dim),
    }
    for name, arr in _channel_arrays(bundle):
        if arr.dtype != SCALAR:
            v.append(Violation(name, f"dtype {arr.dtype} is not little-endian float32"))
        if tuple(arr.shape) != expected_shapes[name]:
            v.append(Violation(
                name, f"shape {tuple(arr.shape)} does not match manifest "
                      f"{expected_shapes[name]}"))
            continue
        coord = _first_nonfinite(arr)
        if coord is not None:
            v.append(Violation(f"{name}{list(coord)}", "non-finite value"))

    if len(bundle.annotations) != m.query_count:
        v.append(Violation("annotations",
                           f"{len(bundle.annotations)} records for {m.query_count} queries"))
    k = m.gallery_count
    for i, a in enumerate(bundle.annotations):
        loc = f"annotations[{i}]"
        if not a.gt_ids:
            v.append(Violation(f"{loc}.gt_ids", "must be non-empty"))
            continue
        if len(set(a.gt_ids)) != len(a.gt_ids):
            v.append(Violation(f"{loc}.gt_ids", "contains duplicates"))
        bad = [g for g in a.gt_ids if not 0 <= g < k]
        if bad:
            v.append(Violation(f"{loc}.gt_ids", f"index {bad[0]} out of range [0, {k})"))
        if m.protocol == "single_gt" and len(a.gt_ids) != 1:
            v.append(Violation(f"{loc}.gt_ids",
                               f"protocol single_gt requires exactly one ground truth, got {len(a.gt_ids)}"))
        if a.reference_id is not None and not 0 <= a.reference_id < k:
            v.append(Violation(f"{loc}.reference_id",
                               f"index {a.reference_id} out of range [0, {k})"))
        if a.subset_ids is not None:
            if len(set(a.subset_ids)) != len(a.subset_ids):
                v.append(Violation(f"{loc}.subset_ids", "contains duplicates"))
            bad = [s for s in a.subset_ids if not 0 <= s < k]
            if bad:
                v.append(Violation(f"{loc}.subset_ids",
                                   f"index {bad[0]} out of range [0, {k})"))
            elif not set(a.subset_ids) & set(a.gt_ids):
                v.append(Violation(f"{loc}.subset_ids",
                                   "subset contains no ground-truth id"))

    if m.categories is not None:
        spans = sorted((c.start, c.end, c.name) for c in m.categories)
        names = [c.name for c in m.categories]
        if len(set(names)) != len(names):
            v.append(Violation("manifest.categories", "duplicate category names"))
        cursor = 0
        broken = False
        for start, end, name in spans:
            if start != cursor or end <= start:
                broken = True
                break
            cursor = end
        if broken or cursor != m.query_count:
            v.append(Violation(
                "manifest.categories",
                f"ranges must partition [0, {m.query_count}) without overlap"))

    return ValidationReport(violations=tuple(v))


def _canonical_json(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def write_bundle(bundle: Bundle, path: str | Path) -> None:
    """Write a bundle directory; refuses invalid bundles.

    Output bytes are a pure function of the bundle contents, so identical
    bundles produce identical directories.
    """
    report = validate(bundle)
    if not report.ok:
        raise DomainError(f"refusing to write invalid bundle:\n{report}")
    path = Path(path)
    m = bundle.manifest
    files = m.files()
    manifest_doc = {
        "format_version": m.format_version,
        "dataset": m.dataset_name,
        "dim": m.dim,
        "gallery_count": m.gallery_count,
        "query_count": m.query_count,
        "captions_per_target": m.captions_per_target,
        "captions_per_query": m.captions_per_query,
        "protocol": m.protocol,
        "files": files,
    }
    if m.categories is not None:
        manifest_doc["categories"] = [
            {"name": c.name, "start": c.start, "end": c.end} for c in m.categories]
    ann_doc = [{"gt_ids": list(a.gt_ids),
                "reference_id": a.reference_id,
                "subset_ids": None if a.subset_ids is None else list(a.subset_ids)}
               for a in bundle.annotations]
    arrays = {
        "gallery_img": bundle.gallery.t_v,
        "gallery_cap": bundle.gallery.t_c_raw,
        "query_qv": bundle.queries.q_v,
        "query_qf": bundle.queries.q_f,
        "query_qm": bundle.queries.q_m_raw,
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / MANIFEST_FILE).write_bytes(_canonical_json(manifest_doc))
        (path / files[_ANNOTATIONS_KEY]).write_bytes(_canonical_json(ann_doc))
        for logical, filename in files.items():
            if logical == _ANNOTATIONS_KEY:
                continue
            arr = np.ascontiguousarray(arrays[logical], dtype=SCALAR)
            (path / filename).write_bytes(arr.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write bundle to {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic bundles with planted targets
# ---------------------------------------------------------------------------

_MIN_DIM = 8
_PLANT_MARGIN = 5e-3          # required score gap planted vs. best distractor
_LATENT_SEP = 0.6             # max |cos| allowed between query latent directions
_MAX_ROUNDS = 200


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    norms = np.sqrt(np.einsum("nd,nd->n", rows, rows))
    # standard normal rows are zero with probability 0; regenerate defensively
    while (norms == 0.0).any():
        bad = norms == 0.0
        rows[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.sqrt(np.einsum("nd,nd->n", rows, rows))
    rows /= norms[:, None]
    return rows


def _noisy_copy(rng: np.random.Generator, base: np.ndarray, fraction: float,
                n: int) -> np.ndarray:
    noise = _unit_rows(rng, n, base.shape[-1])
    mixed = fraction * base[None, :] + (1.0 - fraction) * noise
    return mixed / np.sqrt((mixed * mixed).sum(axis=1, keepdims=True))


def _default_weights_for(n_t: int, n_q: int) -> FusionWeights:
    w = FusionWeights()
    drop = set()
    if n_q == 0:
        drop.add(Channel.QM)
    if n_t == 0:
        drop.add(Channel.TC)
    if drop:
        w = fusion.apply_ablation(w, drop)
    return w


def synth_bundle(gallery_count: int,
                 query_count: int,
                 dim: int,
                 captions_per_target: int = 3,
                 captions_per_query: int = 3,
                 protocol: str = "multi_gt",
                 planted_fraction: float = 0.9,
                 seed: int = 0,
                 dataset_name: str = "synthetic") -> Bundle:
    """Deterministic random bundle with one planted target per query.

    Every query's channels are noisy unit copies of a per-query latent
    direction; the planted gallery row's channels are noisy unit copies of
    the query's fused direction under default weights.  ``planted_fraction``
    is the signal share of those mixtures.  A verification pass then
    guarantees the planted row ranks strictly first for its query under
    default weights (distractors too close are deterministically
    resampled), which also makes the construction robust across weight
    settings at comfortable dimensions.
    """
    if dim < _MIN_DIM:
        raise DomainError(f"dim={dim} too small to guarantee separation (minimum {_MIN_DIM})")
    if gallery_count < 1 or query_count < 1:
        raise DomainError("gallery_count and query_count must be positive")
    if gallery_count < query_count:
        raise DomainError(
            f"need one planted gallery row per query: gallery_count={gallery_count} "
            f"< query_count={query_count}")
    if captions_per_target < 0 or captions_per_query < 0:
        raise DomainError("caption counts must be non-negative")
    if protocol not in PROTOCOLS:
        raise DomainError(f"unknown protocol {protocol!r}")
    if not 0.0 < planted_fraction <= 1.0:
        raise DomainError(f"planted_fraction must lie in (0, 1], got {planted_fraction}")

    k, q, d = int(gallery_count), int(query_count), int(dim)
    n_t, n_q = int(captions_per_target), int(captions_per_query)
    root = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x43495246])
    ss_latent, ss_query, ss_plant, ss_fill, ss_fix, ss_annot = (
        np.random.default_rng(s) for s in root.spawn(6))

    # Per-query latent directions, resampled until pairwise separated so that
    # one query's planted row cannot collide with another query's ranking.
    latents = _unit_rows(ss_latent, q, d)
    for round_no in range(_MAX_ROUNDS):
        gram = np.abs(latents @ latents.T)
        np.fill_diagonal(gram, 0.0)
        clash = np.flatnonzero((np.triu(gram) > _LATENT_SEP).any(axis=0))
        if clash.size == 0:
            break
        latents[clash] = _unit_rows(ss_latent, clash.size, d)
    else:
        raise DomainError(
            f"could not separate {q} query directions at dim={d}; increase dim")

    pf = float(planted_fraction)
    q_v = np.empty((q, d))
    q_f = np.empty((q, d))
    q_m = np.empty((q, n_q, d))
    for i in range(q):
        q_v[i] = _noisy_copy(ss_query, latents[i], pf, 1)[0]
        q_f[i] = _noisy_copy(ss_query, latents[i], pf, 1)[0]
        if n_q:
            q_m[i] = _noisy_copy(ss_query, latents[i], pf, n_q)

    q_v32 = q_v.astype(SCALAR)
    q_f32 = q_f.astype(SCALAR)
    q_m32 = q_m.astype(SCALAR)
    del q_v, q_f, q_m

    # Fused query directions under default weights, from the stored scalars.
    weights = _default_weights_for(n_t, n_q)
    qm_mean = fusion.mean_caption_matrix(q_m32, None) if n_q else None
    fused_q = fusion.fuse_query(qm_mean,
                                fusion.normalize_rows(q_f32, "q_f"),
                                fusion.normalize_rows(q_v32, "q_v"),
                                weights)
    fused_q = fusion.normalize_rows(fused_q, "fused query")

    perm = ss_annot.permutation(k)
    planted = perm[:q].copy()
    t_v = _unit_rows(ss_fill, k, d)
    t_c = _unit_rows(ss_fill, k * n_t, d).reshape(k, n_t, d) if n_t \
        else np.empty((k, 0, d))
    for i in range(q):
        row = planted[i]
        t_v[row] = _noisy_copy(ss_plant, fused_q[i], pf, 1)[0]
        if n_t:
            t_c[row] = _noisy_copy(ss_plant, fused_q[i], pf, n_t)

    t_v32 = t_v.astype(SCALAR)
    t_c32 = t_c.astype(SCALAR)
    del t_v, t_c

    # Verification: under default weights the planted row must beat every
    # other row by _PLANT_MARGIN.  Too-close distractors are resampled from
    # a dedicated stream; a too-close planted row of another query cannot be
    # fixed without breaking that query, so it is a hard error (only
    # reachable with aggressive noise settings).
    planted_set = set(int(p) for p in planted)
    for round_no in range(_MAX_ROUNDS):
        fused_g = _fuse_gallery(t_v32, t_c32, weights, n_t)
        scores = fused_g @ fused_q.T                      # (K, Q)
        own = scores[planted, np.arange(q)]
        scores[planted, np.arange(q)] = -np.inf
        offender_rows = np.flatnonzero((scores >= (own[None, :] - _PLANT_MARGIN)).any(axis=1))
        if offender_rows.size == 0:
            break
        bad_planted = [int(r) for r in offender_rows if int(r) in planted_set]
        if bad_planted:
            raise DomainError(
                "planted rows of different queries collide; raise planted_fraction "
                "or dim")
        fresh_v = _unit_rows(ss_fix, offender_rows.size, d)
        t_v32[offender_rows] = fresh_v.astype(SCALAR)
        if n_t:
            fresh_c = _unit_rows(ss_fix, offender_rows.size * n_t, d)
            t_c32[offender_rows] = fresh_c.reshape(offender_rows.size, n_t, d).astype(SCALAR)
    else:
        raise DomainError(
            "could not separate planted targets from distractors; raise "
            "planted_fraction or dim")

    annotations = []
    ref_ids = perm[q:2 * q] if k >= 2 * q else None
    pool_base = [int(x) for x in perm[q:q + 128]]
    for i in range(q):
        gt = int(planted[i])
        ref = int(ref_ids[i]) if ref_ids is not None else None
        # subset: the ground truth plus a few distractors (never the reference)
        pool = [x for x in pool_base if x != ref][:64]
        extra = ss_annot.permutation(len(pool))[:min(5, len(pool))]
        subset = tuple(sorted({gt, *(pool[int(e)] for e in extra)}))
        annotations.append(Annotation(gt_ids=(gt,), reference_id=ref, subset_ids=subset))

    manifest = Manifest(dataset_name=dataset_name, dim=d, gallery_count=k,
                        query_count=q, captions_per_target=n_t,
                        captions_per_query=n_q, protocol=protocol)
    return Bundle(manifest=manifest,
                  queries=QueryChannels(q_v=q_v32, q_f=q_f32, q_m_raw=q_m32),
                  gallery=GalleryChannels(t_v=t_v32, t_c_raw=t_c32),
                  annotations=tuple(annotations))


def _fuse_gallery(t_v32: np.ndarray, t_c32: np.ndarray, weights: FusionWeights,
                  n_t: int) -> np.ndarray:
    tc_mean = fusion.mean_caption_matrix(t_c32, None) if n_t else None
    fused = fusion.fuse_target(tc_mean, fusion.normalize_rows(t_v32, "t_v"),
                               weights.gamma, weights.channel_mask)
    return fusion.normalize_rows(fused, "fused gallery")
