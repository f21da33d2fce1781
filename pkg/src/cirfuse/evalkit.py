"""Evaluation runs, weight-grid sweeps, channel ablations, caption-count sweeps.

``evaluate`` is the single pipeline everything else reuses:

    caption rows -> per-item means -> channel normalization -> weighted
    fusion -> batched cosine ranking -> metrics -> report

Reports are a pure function of (bundle bytes, config): worker counts,
gallery-fusion caching, and sweep order are unobservable in the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import fusion, metrics as metrics_mod, search
from .bundle import Bundle
from .errors import DomainError
from .fusion import Channel, FusionWeights
from .metrics import DEFAULT_K_LISTS, METRIC_NAMES, EvalReport

__all__ = [
    "RunConfig",
    "SweepResult",
    "ABLATION_PRESET",
    "evaluate",
    "sweep",
    "ablate",
    "ncap_sweep",
    "grid_values",
]

EXCLUSION_POLICIES = ("none", "exclude_reference")

# The standard ablation rows: baseline, no visual extraction, no semantic
# extraction, then the five single-channel drops.
ABLATION_PRESET: tuple[frozenset[Channel], ...] = (
    frozenset(),
    frozenset({Channel.QF, Channel.QV, Channel.TV}),
    frozenset({Channel.QM, Channel.TC}),
    frozenset({Channel.QV}),
    frozenset({Channel.QF}),
    frozenset({Channel.QM}),
    frozenset({Channel.TV}),
    frozenset({Channel.TC}),
)


@dataclass(frozen=True)
class RunConfig:
    """Everything an evaluation run depends on besides the bundle itself.

    ``exclusion`` is ``"none"``, ``"exclude_reference"``, or ``None`` to
    auto-resolve (exclude whenever the bundle carries reference ids).
    ``metrics`` of ``None`` requests map + recall, plus subset recall when
    every query has a candidate subset.  ``threads`` caps ranking
    parallelism and never affects results.
    """

    weights: FusionWeights = field(default_factory=FusionWeights)
    metrics: tuple[str, ...] | None = None
    k_lists: Mapping[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_K_LISTS))
    exclusion: str | None = None
    normalize_inputs: bool = True
    kernel: str = "blocked"
    threads: int = 1

    def __post_init__(self) -> None:
        if self.metrics is not None:
            bad = [m for m in self.metrics if m not in METRIC_NAMES]
            if bad:
                raise DomainError(f"unknown metrics {bad}; expected subset of {METRIC_NAMES}")
            object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.exclusion is not None and self.exclusion not in EXCLUSION_POLICIES:
            raise DomainError(
                f"unknown exclusion policy {self.exclusion!r}; expected one of "
                f"{EXCLUSION_POLICIES} or None for auto")
        if self.kernel not in search.KERNELS:
            raise DomainError(f"unknown kernel {self.kernel!r}")
        if self.threads < 1:
            raise DomainError(f"threads must be >= 1, got {self.threads}")
        norm_k = {}
        for name, ks in self.k_lists.items():
            if name not in METRIC_NAMES:
                raise DomainError(f"k list for unknown metric {name!r}")
            ks = tuple(int(k) for k in ks)
            if not ks or any(k < 1 for k in ks):
                raise DomainError(f"k list for {name} must contain positive integers")
            norm_k[name] = ks
        object.__setattr__(self, "k_lists", norm_k)


@dataclass(frozen=True, eq=False)
class _Prepared:
    """Normalized channel matrices (float64) ready for fusion."""

    q_m: np.ndarray | None
    q_f: np.ndarray
    q_v: np.ndarray
    t_c: np.ndarray | None
    t_v: np.ndarray


def _resolve_metrics(bundle: Bundle, cfg: RunConfig) -> tuple[str, ...]:
    if cfg.metrics is not None:
        return cfg.metrics
    has_subsets = all(a.subset_ids is not None for a in bundle.annotations)
    return ("map", "recall", "recall_subset") if has_subsets else ("map", "recall")


def _resolve_exclusion(bundle: Bundle, cfg: RunConfig) -> str:
    if cfg.exclusion is not None:
        return cfg.exclusion
    has_refs = any(a.reference_id is not None for a in bundle.annotations)
    return "exclude_reference" if has_refs else "none"


def _check_compat(bundle: Bundle, cfg: RunConfig, requested: tuple[str, ...]) -> None:
    m = bundle.manifest
    w = cfg.weights
    if m.captions_per_query == 0 and w.query_weights()[Channel.QM] != 0.0:
        raise DomainError(
            "bundle has no query captions; mask QM or set alpha to 0")
    if m.captions_per_target == 0 and w.target_weights()[Channel.TC] != 0.0:
        raise DomainError(
            "bundle has no gallery captions; mask TC or set gamma to 0")
    if w.n_query_captions_used is not None and w.n_query_captions_used > m.captions_per_query:
        raise DomainError(
            f"n_query_captions_used={w.n_query_captions_used} exceeds bundle's "
            f"{m.captions_per_query}")
    if w.n_target_captions_used is not None and w.n_target_captions_used > m.captions_per_target:
        raise DomainError(
            f"n_target_captions_used={w.n_target_captions_used} exceeds bundle's "
            f"{m.captions_per_target}")
    if "recall_subset" in requested:
        missing = [i for i, a in enumerate(bundle.annotations) if a.subset_ids is None]
        if missing:
            raise DomainError(
                f"recall_subset requested but query {missing[0]} has no subset annotation")


def _prepare(bundle: Bundle, cfg: RunConfig) -> _Prepared:
    m = bundle.manifest
    w = cfg.weights
    norm = cfg.normalize_inputs

    def rows(arr: np.ndarray, name: str) -> np.ndarray:
        arr64 = np.asarray(arr, dtype=np.float64)
        if not norm:
            return arr64
        return fusion.normalize_rows(arr64, name)

    q_m = None
    if m.captions_per_query > 0:
        q_m = fusion.mean_caption_matrix(bundle.queries.q_m_raw,
                                         w.n_query_captions_used, normalize=norm)
    t_c = None
    if m.captions_per_target > 0:
        t_c = fusion.mean_caption_matrix(bundle.gallery.t_c_raw,
                                         w.n_target_captions_used, normalize=norm)
    return _Prepared(q_m=q_m,
                     q_f=rows(bundle.queries.q_f, "q_f"),
                     q_v=rows(bundle.queries.q_v, "q_v"),
                     t_c=t_c,
                     t_v=rows(bundle.gallery.t_v, "t_v"))


def _fuse_gallery(prep: _Prepared, w: FusionWeights) -> np.ndarray:
    return fusion.fuse_target(prep.t_c, prep.t_v, w.gamma, w.channel_mask)


def _config_echo(bundle: Bundle, cfg: RunConfig, requested: tuple[str, ...],
                 exclusion: str) -> dict:
    w = cfg.weights
    # Caption counts are echoed only when the channel actually contributes
    # (weight 0 means the rows were never read), resolved to the count used.
    n_query = None
    if w.query_weights()[Channel.QM] != 0.0:
        n_query = w.n_query_captions_used or bundle.manifest.captions_per_query
    n_target = None
    if w.target_weights()[Channel.TC] != 0.0:
        n_target = w.n_target_captions_used or bundle.manifest.captions_per_target
    return {
        "weights": {name: round(value, 6) for name, value in w.effective().items()},
        "n_query_captions_used": n_query,
        "n_target_captions_used": n_target,
        "normalize_inputs": cfg.normalize_inputs,
        "exclusion_policy": exclusion,
        "metrics": {name: list(cfg.k_lists[name]) for name in requested},
        "protocol": bundle.manifest.protocol,
    }


def evaluate(bundle: Bundle, config: RunConfig | None = None) -> EvalReport:
    """Run the full pipeline on one bundle under one configuration."""
    cfg = config or RunConfig()
    _check_compat(bundle, cfg, _resolve_metrics(bundle, cfg))
    prep = _prepare(bundle, cfg)
    fused_g = _fuse_gallery(prep, cfg.weights)
    return _evaluate_prepared(bundle, cfg, prep, fused_g)


def _evaluate_prepared(bundle: Bundle, cfg: RunConfig, prep: _Prepared,
                       fused_g: np.ndarray) -> EvalReport:
    requested = _resolve_metrics(bundle, cfg)
    exclusion = _resolve_exclusion(bundle, cfg)
    _check_compat(bundle, cfg, requested)
    m = bundle.manifest

    fused_q = fusion.fuse_query(prep.q_m, prep.q_f, prep.q_v, cfg.weights)

    if exclusion == "exclude_reference":
        excl: list[Iterable[int] | None] | None = [
            None if a.reference_id is None else (a.reference_id,)
            for a in bundle.annotations]
    else:
        excl = None

    per_query: dict[str, dict[int, np.ndarray]] = {}
    global_ks = sorted({k for name in requested if name != "recall_subset"
                        for k in cfg.k_lists[name]})
    if global_ks:
        k_fetch = min(max(global_ks), m.gallery_count)
        rankings = search.batch_rank(fused_q, fused_g, k=k_fetch, exclusions=excl,
                                     kernel=cfg.kernel, workers=cfg.threads)
        if "map" in requested:
            per_query["map"] = {k: metrics_mod.per_query_ap(rankings, bundle.annotations, k)
                                for k in cfg.k_lists["map"]}
        if "recall" in requested:
            per_query["recall"] = {k: metrics_mod.per_query_hit(rankings, bundle.annotations, k)
                                   for k in cfg.k_lists["recall"]}

    if "recall_subset" in requested:
        if exclusion == "exclude_reference":
            subsets = []
            for i, a in enumerate(bundle.annotations):
                kept = tuple(s for s in a.subset_ids if s != a.reference_id)
                if not kept:
                    raise DomainError(
                        f"query {i}: subset contains only the excluded reference")
                subsets.append(kept)
        else:
            subsets = [a.subset_ids for a in bundle.annotations]
        sub_rankings = search.batch_rank(fused_q, fused_g, subsets=subsets,
                                         kernel=cfg.kernel, workers=cfg.threads)
        per_query["recall_subset"] = {
            k: metrics_mod.per_query_hit(sub_rankings, bundle.annotations, k)
            for k in cfg.k_lists["recall_subset"]}

    return metrics_mod.aggregate_report(
        per_query,
        query_count=m.query_count,
        dataset=m.dataset_name,
        config=_config_echo(bundle, cfg, requested, exclusion),
        categories=m.categories)


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------

def grid_values(step: float) -> list[float]:
    """Grid points {0, step, 2*step, ..., 1}; step must divide 1 evenly."""
    if not 0.0 < step <= 1.0:
        raise DomainError(f"grid step must lie in (0, 1], got {step}")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise DomainError(f"grid step {step} does not divide 1 evenly")
    return [i / n for i in range(n + 1)]


@dataclass(frozen=True)
class SweepResult:
    """Evaluations over a weight grid, in enumeration order (gamma outer)."""

    cells: tuple[tuple[FusionWeights, EvalReport], ...]
    grid: dict

    def best(self, metric: str, k: int) -> list[tuple[FusionWeights, EvalReport]]:
        """Cells achieving the maximum value, ties kept in cell order."""
        if not self.cells:
            raise DomainError("sweep produced no cells")
        values = [rep.value(metric, k) for _, rep in self.cells]
        top = max(values)
        return [cell for cell, v in zip(self.cells, values) if v == top]

    def to_csv(self, metric: str | None = None, k: int | None = None) -> str:
        """CSV rows ``alpha,beta,gamma,metric,k,value`` per cell-metric-k."""
        lines = ["alpha,beta,gamma,metric,k,value"]
        for weights, report in self.cells:
            for name in sorted(report.metrics):
                if metric is not None and name != metric:
                    continue
                for kk in sorted(report.metrics[name]):
                    if k is not None and kk != k:
                        continue
                    lines.append(
                        f"{weights.alpha:.6f},{weights.beta:.6f},{weights.gamma:.6f},"
                        f"{name},{kk},{report.metrics[name][kk]:.6f}")
        return "\n".join(lines) + "\n"


def sweep(bundle: Bundle,
          grid_step: float = 0.1,
          gamma_values: Sequence[float] = (0.2,),
          base_config: RunConfig | None = None,
          alphas: Sequence[float] | None = None,
          betas: Sequence[float] | None = None,
          reuse_gallery_fusion: bool = True) -> SweepResult:
    """Evaluate every admissible (alpha, beta, gamma) grid cell.

    Cells satisfy alpha + beta <= 1.  Explicit ``alphas``/``betas`` override
    the step grid (a single-cell sweep equals one ``evaluate``).  Gallery
    fusion is computed once per gamma and shared across (alpha, beta) cells;
    disabling ``reuse_gallery_fusion`` must not change any output.
    """
    cfg = base_config or RunConfig()
    a_values = list(alphas) if alphas is not None else grid_values(grid_step)
    b_values = list(betas) if betas is not None else grid_values(grid_step)
    g_values = list(gamma_values)
    if not a_values or not b_values or not g_values:
        raise DomainError("sweep grid is empty")

    cells = []
    base_prep: _Prepared | None = None
    for gamma in g_values:
        fused_g: np.ndarray | None = None
        for alpha in a_values:
            for beta in b_values:
                if alpha + beta > 1.0 + 1e-9:
                    continue
                w = replace(cfg.weights, alpha=float(alpha), beta=float(beta),
                            gamma=float(gamma))
                cell_cfg = replace(cfg, weights=w)
                if base_prep is None:
                    _check_compat(bundle, cell_cfg, _resolve_metrics(bundle, cell_cfg))
                    base_prep = _prepare(bundle, cell_cfg)
                if fused_g is None or not reuse_gallery_fusion:
                    fused_g = _fuse_gallery(base_prep, w)
                cells.append((w, _evaluate_prepared(bundle, cell_cfg, base_prep, fused_g)))
    if not cells:
        raise DomainError("no admissible (alpha, beta) cells in the grid")
    return SweepResult(cells=tuple(cells),
                       grid={"alphas": a_values, "betas": b_values,
                             "gammas": g_values,
                             "step": None if alphas is not None else grid_step})


def ablate(bundle: Bundle,
           base_config: RunConfig | None = None,
           drop_sets: Sequence[Iterable[Channel]] = ABLATION_PRESET,
           ) -> list[tuple[frozenset[Channel], EvalReport]]:
    """Evaluate the bundle once per drop set (empty set = baseline)."""
    cfg = base_config or RunConfig()
    out = []
    for raw in drop_sets:
        drop = frozenset(raw)
        w = fusion.apply_ablation(cfg.weights, drop) if drop else cfg.weights
        out.append((drop, evaluate(bundle, replace(cfg, weights=w))))
    return out


def ncap_sweep(bundle: Bundle,
               n_values: Sequence[int],
               side: str = "target",
               config: RunConfig | None = None) -> list[tuple[int, EvalReport]]:
    """Evaluate while varying how many caption rows feed the averages."""
    cfg = config or RunConfig()
    if side not in ("query", "target"):
        raise DomainError(f"side must be 'query' or 'target', got {side!r}")
    avail = (bundle.manifest.captions_per_query if side == "query"
             else bundle.manifest.captions_per_target)
    n_list = [int(n) for n in n_values]
    if not n_list:
        raise DomainError("no caption counts requested")
    for n in n_list:
        if not 1 <= n <= avail:
            raise DomainError(f"n={n} out of range [1, {avail}] for {side} captions")
    out = []
    for n in n_list:
        if side == "query":
            w = replace(cfg.weights, n_query_captions_used=n)
        else:
            w = replace(cfg.weights, n_target_captions_used=n)
        out.append((n, evaluate(bundle, replace(cfg, weights=w))))
    return out
