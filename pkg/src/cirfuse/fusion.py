"""Channel weights, caption averaging, and weighted query/gallery fusion.

A retrieval run combines up to five feature channels:

  query side:   QM  averaged modified-caption features
                QF  fine-grained prompt features
                QV  reference-image features
  gallery side: TC  averaged caption features
                TV  gallery-image features

The query is fused as ``alpha*QM + beta*QF + (1 - alpha - beta)*QV`` and
each gallery row as ``gamma*TC + (1 - gamma)*TV``.  Channels can be masked
out (for ablations or because a bundle carries no captions); the surviving
weights are renormalized to sum to 1 while preserving their ratios, so a
masked channel contributes exactly 0.

Constituent vectors are unit-normalized before fusion by the evaluation
pipeline (switchable there); fused outputs are intentionally *not*
re-normalized because the downstream cosine is scale-invariant.  All
accumulation happens in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .errors import DomainError

__all__ = [
    "Channel",
    "QUERY_CHANNELS",
    "TARGET_CHANNELS",
    "ALL_CHANNELS",
    "FusionWeights",
    "unit_normalize",
    "normalize_rows",
    "mean_caption_features",
    "mean_caption_matrix",
    "fuse_query",
    "fuse_target",
    "apply_ablation",
]

_WEIGHT_TOL = 1e-9


class Channel(str, Enum):
    """The five feature channels participating in fusion."""

    QM = "QM"
    QF = "QF"
    QV = "QV"
    TC = "TC"
    TV = "TV"


QUERY_CHANNELS = (Channel.QM, Channel.QF, Channel.QV)
TARGET_CHANNELS = (Channel.TC, Channel.TV)
ALL_CHANNELS = frozenset(Channel)


def parse_channels(names: Iterable[str]) -> frozenset[Channel]:
    """Parse channel names (case-insensitive) into a channel set."""
    out = set()
    for name in names:
        try:
            out.add(Channel(str(name).strip().upper()))
        except ValueError:
            raise DomainError(f"unknown channel {name!r}; expected one of "
                              f"{sorted(c.value for c in Channel)}") from None
    return frozenset(out)


@dataclass(frozen=True)
class FusionWeights:
    """Fusion coefficients plus the set of enabled channels.

    ``alpha`` weights QM, ``beta`` weights QF and the residual
    ``1 - alpha - beta`` weights QV; ``gamma`` weights TC against TV.
    ``alpha + beta > 1`` (a negative QV coefficient) is rejected unless
    ``allow_negative_residual`` is set, since such configurations are
    outside the evaluated regime.

    ``n_query_captions_used`` / ``n_target_captions_used`` select a prefix
    of the per-item caption rows before averaging; ``None`` means all rows.
    """

    alpha: float = 0.6
    beta: float = 0.4
    gamma: float = 0.2
    channel_mask: frozenset[Channel] = ALL_CHANNELS
    n_query_captions_used: int | None = None
    n_target_captions_used: int | None = None
    allow_negative_residual: bool = False

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or not (0.0 <= v <= 1.0):
                raise DomainError(f"{name} must lie in [0, 1], got {v!r}")
        if self.alpha + self.beta > 1.0 + _WEIGHT_TOL and not self.allow_negative_residual:
            raise DomainError(
                f"alpha + beta = {self.alpha + self.beta:g} > 1 would give the "
                "reference-image channel a negative weight; pass "
                "allow_negative_residual to override")
        mask = frozenset(self.channel_mask)
        unknown = mask - ALL_CHANNELS
        if unknown:
            raise DomainError(f"unknown channels in mask: {sorted(unknown)}")
        object.__setattr__(self, "channel_mask", mask)
        for name in ("n_query_captions_used", "n_target_captions_used"):
            n = getattr(self, name)
            if n is not None and (not isinstance(n, int) or n < 1):
                raise DomainError(f"{name} must be a positive integer or None, got {n!r}")

    def query_weights(self) -> dict[Channel, float]:
        """Effective query-side weights: masked channels 0, survivors renormalized."""
        nominal = {
            Channel.QM: self.alpha,
            Channel.QF: self.beta,
            Channel.QV: 1.0 - self.alpha - self.beta,
        }
        return _renormalize(nominal, self.channel_mask, "query")

    def target_weights(self) -> dict[Channel, float]:
        """Effective gallery-side weights: masked channels 0, survivors renormalized."""
        nominal = {Channel.TC: self.gamma, Channel.TV: 1.0 - self.gamma}
        return _renormalize(nominal, self.channel_mask, "target")

    def effective(self) -> dict[str, float]:
        """All five effective channel weights keyed by lower-case channel name."""
        w = {**self.query_weights(), **self.target_weights()}
        return {c.value.lower(): w[c] for c in Channel}


def _renormalize(nominal: Mapping[Channel, float],
                 mask: frozenset[Channel],
                 group: str) -> dict[Channel, float]:
    surviving = {c: w for c, w in nominal.items() if c in mask}
    if not surviving:
        raise DomainError(f"all {group} channels are masked")
    total = sum(surviving.values())
    if total <= _WEIGHT_TOL:
        raise DomainError(
            f"surviving {group} channels have zero total weight; "
            "nothing can be renormalized")
    return {c: (nominal[c] / total if c in mask else 0.0) for c in nominal}


def unit_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to Euclidean norm 1 (float64).

    Raises DomainError on a zero or non-finite vector instead of silently
    producing NaN.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DomainError(f"expected a 1-D vector, got shape {v.shape}")
    norm = np.sqrt((v * v).sum())
    if not np.isfinite(norm):
        raise DomainError("cannot normalize a vector with non-finite entries")
    if norm == 0.0:
        raise DomainError("cannot normalize the zero vector")
    return v / norm


def _row_norms(arr: np.ndarray, name: str) -> np.ndarray:
    """Euclidean norms along the last axis; rejects zero and non-finite rows.

    A row's norm is non-finite exactly when the row holds a NaN or Inf (the
    float64 square-sum of float32 data cannot overflow), so checking norms
    checks the rows.
    """
    norms = np.sqrt(np.einsum("...d,...d->...", arr, arr))
    if not np.isfinite(norms).all():
        bad = np.unravel_index(int(np.flatnonzero(~np.isfinite(norms).ravel())[0]),
                               norms.shape)
        raise DomainError(f"{name}{list(bad)}: non-finite values")
    if (norms == 0.0).any():
        bad = np.unravel_index(int(np.flatnonzero((norms == 0.0).ravel())[0]),
                               norms.shape)
        raise DomainError(f"{name}{list(bad)}: zero vector cannot be normalized")
    return norms


def normalize_rows(arr: np.ndarray, name: str = "rows") -> np.ndarray:
    """Unit-normalize along the last axis (float64), erroring on zero rows."""
    out = np.asarray(arr).astype(np.float64)  # always a fresh owned copy
    out /= _row_norms(out, name)[..., None]
    return out


def mean_caption_features(rows: np.ndarray,
                          n_used: int | None = None,
                          normalize: bool = True) -> np.ndarray:
    """Average the first ``n_used`` caption feature rows into one vector.

    With ``normalize`` (the default) every row is unit-normalized before
    averaging and the mean is unit-normalized afterwards; without it the
    raw arithmetic mean is returned.  Accumulation is float64.  Delegates
    to :func:`mean_caption_matrix` so single-item and batched averaging are
    bitwise identical.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise DomainError(f"expected an N x d matrix of caption rows, got shape {rows.shape}")
    return mean_caption_matrix(rows[None, :, :], n_used, normalize)[0]


def mean_caption_matrix(tensor: np.ndarray,
                        n_used: int | None = None,
                        normalize: bool = True) -> np.ndarray:
    """Vectorized :func:`mean_caption_features` over an M x N x d tensor.

    Bitwise-identical to calling the scalar form per item.
    """
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise DomainError(f"expected an M x N x d tensor, got shape {tensor.shape}")
    n_rows = tensor.shape[1]
    n = n_rows if n_used is None else n_used
    if not 1 <= n <= n_rows:
        raise DomainError(f"n_used={n} out of range [1, {n_rows}]")
    used = tensor[:, :n, :]
    if normalize:
        if n == 1:
            # the mean of one unit row is that row
            return normalize_rows(used[:, 0, :], "caption row")
        used = normalize_rows(used, "caption row")
        return normalize_rows(used.mean(axis=1), "caption mean")
    used = np.asarray(used, dtype=np.float64)
    if not np.isfinite(used).all():
        raise DomainError("caption rows contain non-finite values")
    return used.mean(axis=1)


def _weighted_sum(parts: Mapping[Channel, np.ndarray | None],
                  weights: Mapping[Channel, float],
                  group: str) -> np.ndarray:
    out = None
    for channel, weight in weights.items():
        if weight == 0.0:
            continue
        arr = parts[channel]
        if arr is None:
            raise DomainError(
                f"{group} channel {channel.value} has weight {weight:g} but no data; "
                "mask it or set its weight to 0")
        term = weight * np.asarray(arr, dtype=np.float64)
        if out is None:
            out = term
        elif out.shape != term.shape:
            raise DomainError(f"{group} channel shapes disagree: "
                              f"{out.shape} vs {term.shape}")
        else:
            out += term
    if out is None:
        raise DomainError(f"no {group} channel carries weight")
    # weights are finite and nonzero, so any NaN/Inf in an active channel
    # survives into the sum; one output scan checks every input
    if not np.isfinite(out).all():
        raise DomainError(f"a weighted {group} channel contains non-finite values")
    return out


def fuse_query(q_m: np.ndarray | None,
               q_f: np.ndarray | None,
               q_v: np.ndarray | None,
               weights: FusionWeights) -> np.ndarray:
    """Weighted sum of the query channels under ``weights``.

    Accepts single vectors or stacked ``Q x d`` matrices.  Channels may be
    ``None`` only when their effective weight is 0.  The result is not
    re-normalized.
    """
    w = weights.query_weights()
    return _weighted_sum({Channel.QM: q_m, Channel.QF: q_f, Channel.QV: q_v}, w, "query")


def fuse_target(t_c: np.ndarray | None,
                t_v: np.ndarray | None,
                gamma: float,
                channel_mask: frozenset[Channel] = ALL_CHANNELS) -> np.ndarray:
    """Weighted sum ``gamma*t_c + (1 - gamma)*t_v``, row-wise over a gallery.

    Masked channels get weight 0 with the survivor renormalized, so a
    caption-less gallery is fused with ``channel_mask`` excluding TC.
    """
    if not np.isfinite(gamma) or not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma!r}")
    nominal = {Channel.TC: float(gamma), Channel.TV: 1.0 - float(gamma)}
    w = _renormalize(nominal, frozenset(channel_mask), "target")
    return _weighted_sum({Channel.TC: t_c, Channel.TV: t_v}, w, "target")


def apply_ablation(weights: FusionWeights, drop: Iterable[Channel]) -> FusionWeights:
    """Mask out ``drop`` and renormalize the surviving weights per group.

    The returned weights carry the renormalized coefficients explicitly,
    so e.g. dropping QM from (alpha=0.6, beta=0.4) yields beta=1.0.  At
    least one query channel and one target channel must survive with
    positive total weight.
    """
    drop = frozenset(drop)
    unknown = drop - ALL_CHANNELS
    if unknown:
        raise DomainError(f"unknown channels in drop set: {sorted(unknown)}")
    new_mask = weights.channel_mask - drop
    if not new_mask & set(QUERY_CHANNELS):
        raise DomainError("ablation would drop every query channel")
    if not new_mask & set(TARGET_CHANNELS):
        raise DomainError("ablation would drop every target channel")
    trial = replace(weights, channel_mask=new_mask)
    eff_q = trial.query_weights()
    eff_t = trial.target_weights()
    return replace(weights,
                   alpha=eff_q[Channel.QM],
                   beta=eff_q[Channel.QF],
                   gamma=eff_t[Channel.TC],
                   channel_mask=new_mask)
