from __future__ import annotations

import numpy as np
import pytest

from cirfuse.errors import DomainError
from cirfuse.fusion import (
    ALL_CHANNELS,
    Channel,
    FusionWeights,
    apply_ablation,
    fuse_query,
    fuse_target,
    mean_caption_features,
    mean_caption_matrix,
    normalize_rows,
    unit_normalize,
)

from oracles import mean_then_normalize_longdouble


def test_unit_normalize_345_triangle():
    out = unit_normalize(np.array([3.0, 4.0]))
    assert out == pytest.approx([0.6, 0.8], abs=1e-12)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-6


def test_unit_normalize_identity_on_basis_vector():
    e1 = np.array([1.0, 0.0, 0.0])
    assert np.array_equal(unit_normalize(e1), e1)


def test_unit_normalize_rejects_zero_and_nonfinite():
    with pytest.raises(DomainError):
        unit_normalize(np.zeros(2))
    with pytest.raises(DomainError):
        unit_normalize(np.array([1.0, np.nan]))


def test_mean_caption_two_orthogonal_rows():
    rows = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = mean_caption_features(rows, 2)
    assert out == pytest.approx([1 / np.sqrt(2), 1 / np.sqrt(2)], abs=1e-12)


def test_mean_caption_single_row_is_normalized_first_row():
    rows = np.array([[3.0, 4.0], [9.0, 9.0]])
    assert mean_caption_features(rows, 1) == pytest.approx([0.6, 0.8], abs=1e-12)


def test_mean_caption_matches_longdouble_oracle(rng):
    # frozen derived check: 15 random rows vs an independent 80-bit oracle
    rows = rng.standard_normal((15, 64))
    got = mean_caption_features(rows, 15)
    want = mean_then_normalize_longdouble(rows, 15)
    assert np.abs(got - want).max() < 1e-6


def test_mean_caption_range_and_zero_errors():
    rows = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DomainError):
        mean_caption_features(rows, 0)
    with pytest.raises(DomainError):
        mean_caption_features(rows, 3)
    cancel = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DomainError):
        mean_caption_features(cancel, 2)


def test_mean_caption_matrix_matches_per_row_calls(rng):
    tensor = rng.standard_normal((7, 5, 16))
    stacked = mean_caption_matrix(tensor, 4)
    for i in range(7):
        single = mean_caption_features(tensor[i], 4)
        assert stacked[i].tobytes() == single.tobytes()


def test_mean_caption_unnormalized_mode_is_raw_mean(rng):
    rows = rng.standard_normal((6, 8))
    got = mean_caption_features(rows, 6, normalize=False)
    assert np.allclose(got, rows.mean(axis=0), atol=0, rtol=0)


def test_fuse_query_default_weights_drops_reference_channel(rng):
    q_m = unit_normalize(rng.standard_normal(16))
    q_f = unit_normalize(rng.standard_normal(16))
    w = FusionWeights(alpha=0.6, beta=0.4)
    # residual weight is exactly 0, so the reference channel may be absent
    fused = fuse_query(q_m, q_f, None, w)
    assert np.allclose(fused, 0.6 * q_m + 0.4 * q_f, atol=0, rtol=0)


def test_fuse_query_identity_channel(rng):
    q_m = unit_normalize(rng.standard_normal(8))
    other = unit_normalize(rng.standard_normal(8))
    fused = fuse_query(q_m, other, other, FusionWeights(alpha=1.0, beta=0.0))
    assert np.array_equal(fused, q_m)


def test_fuse_query_equal_inputs_convex_combination(rng):
    u = unit_normalize(rng.standard_normal(12))
    fused = fuse_query(u, u, u, FusionWeights(alpha=1 / 3, beta=1 / 3))
    assert fused == pytest.approx(u, abs=1e-15)


def test_fused_norm_bounded_by_one(rng):
    for _ in range(50):
        a = rng.uniform(0, 1)
        b = rng.uniform(0, 1 - a)
        w = FusionWeights(alpha=a, beta=b, gamma=rng.uniform(0, 1))
        vs = [unit_normalize(rng.standard_normal(24)) for _ in range(3)]
        fused = fuse_query(vs[0], vs[1], vs[2], w)
        assert np.linalg.norm(fused) <= 1.0 + 1e-12
        t = fuse_target(vs[0], vs[1], w.gamma)
        assert np.linalg.norm(t) <= 1.0 + 1e-12


def test_fuse_target_gamma_endpoints(rng):
    t_c = unit_normalize(rng.standard_normal(8))
    t_v = unit_normalize(rng.standard_normal(8))
    assert np.array_equal(fuse_target(t_c, t_v, 0.0), t_v)
    assert np.array_equal(fuse_target(t_c, t_v, 1.0), t_c)


def test_fuse_target_fashion_weight_arithmetic():
    out = fuse_target(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.2)
    assert out == pytest.approx([0.2, 0.8], abs=1e-15)


def test_fuse_target_rowwise_over_gallery(rng):
    t_c = normalize_rows(rng.standard_normal((9, 6)))
    t_v = normalize_rows(rng.standard_normal((9, 6)))
    full = fuse_target(t_c, t_v, 0.3)
    for i in range(9):
        assert np.array_equal(full[i], fuse_target(t_c[i], t_v[i], 0.3))


def test_weights_reject_alpha_beta_above_one():
    with pytest.raises(DomainError):
        FusionWeights(alpha=0.7, beta=0.5)
    w = FusionWeights(alpha=0.7, beta=0.5, allow_negative_residual=True)
    assert w.query_weights()[Channel.QV] == pytest.approx(-0.2)


def test_weights_reject_out_of_range_values():
    with pytest.raises(DomainError):
        FusionWeights(alpha=-0.1)
    with pytest.raises(DomainError):
        FusionWeights(gamma=1.5)
    with pytest.raises(DomainError):
        FusionWeights(n_query_captions_used=0)


def test_ablation_drop_target_captions_forces_gamma_zero():
    w = apply_ablation(FusionWeights(), {Channel.TC})
    assert w.gamma == 0.0
    assert w.target_weights() == {Channel.TC: 0.0, Channel.TV: 1.0}


def test_ablation_drop_reference_is_noop_for_standard_weights():
    base = FusionWeights(alpha=0.6, beta=0.4)
    dropped = apply_ablation(base, {Channel.QV})
    assert dropped.alpha == base.alpha
    assert dropped.beta == base.beta
    assert dropped.query_weights() == base.query_weights()


def test_ablation_drop_qm_renormalizes_to_hand_value():
    # surviving mass is beta = 0.4, so QF takes 0.4 / 0.4 = 1.0
    w = apply_ablation(FusionWeights(alpha=0.6, beta=0.4), {Channel.QM})
    assert w.query_weights()[Channel.QF] == pytest.approx(1.0, abs=0)
    assert w.alpha == 0.0


def test_ablation_preserves_weight_ratios():
    w = apply_ablation(FusionWeights(alpha=0.5, beta=0.25), {Channel.QV})
    eff = w.query_weights()
    assert eff[Channel.QM] == pytest.approx(2 / 3)
    assert eff[Channel.QF] == pytest.approx(1 / 3)
    assert eff[Channel.QV] == 0.0


def test_ablation_guards():
    with pytest.raises(DomainError):
        apply_ablation(FusionWeights(), {Channel.QM, Channel.QF, Channel.QV})
    with pytest.raises(DomainError):
        apply_ablation(FusionWeights(), {Channel.TC, Channel.TV})
    # dropping the only weighted query channels leaves zero mass
    with pytest.raises(DomainError):
        apply_ablation(FusionWeights(alpha=0.6, beta=0.4), {Channel.QM, Channel.QF})


def test_masked_channels_contribute_exactly_zero(rng):
    w = FusionWeights(channel_mask=ALL_CHANNELS - {Channel.QM})
    eff = w.query_weights()
    assert eff[Channel.QM] == 0.0
    assert eff[Channel.QF] + eff[Channel.QV] == pytest.approx(1.0)
    # QM data may be garbage or missing once masked
    q_f = unit_normalize(rng.standard_normal(8))
    q_v = unit_normalize(rng.standard_normal(8))
    fused_none = fuse_query(None, q_f, q_v, w)
    fused_nan = fuse_query(np.full(8, np.nan), q_f, q_v, w)
    assert np.array_equal(fused_none, fused_nan)


def test_fuse_rejects_nonfinite_active_channel(rng):
    q = unit_normalize(rng.standard_normal(8))
    with pytest.raises(DomainError):
        fuse_query(np.full(8, np.nan), q, q, FusionWeights())
