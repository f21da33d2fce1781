"""Channel-fusion retrieval engine for composed image retrieval bundles."""

from .bundle import (
    Annotation,
    Bundle,
    CategoryRange,
    GalleryChannels,
    Manifest,
    QueryChannels,
    ValidationReport,
    Violation,
    bundles_identical,
    load_bundle,
    synth_bundle,
    validate,
    write_bundle,
)
from .errors import DomainError, EngineError, FormatError
from .evalkit import ABLATION_PRESET, RunConfig, SweepResult, ablate, evaluate, ncap_sweep, sweep
from .fusion import (
    Channel,
    FusionWeights,
    apply_ablation,
    fuse_query,
    fuse_target,
    mean_caption_features,
    unit_normalize,
)
from .metrics import (
    EvalReport,
    aggregate_report,
    ap_at_k,
    map_at_k,
    recall_at_k,
    recall_subset_at_k,
)
from .search import RankedList, batch_rank, cosine, rank_full, rank_subset, top_k

__version__ = "0.1.0"
