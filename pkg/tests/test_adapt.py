import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spkadapt.adapt import (EMB_DIM, FEAT_DIM, JOINT_DIM, AdaptConfig, DownProjection, ScopeError, adapt_frontend,
                            down_project, inject, join, l2_normalize, prepare_batch, split)
from spkadapt.specaug import SpecAugPolicy, apply_freq_masks, apply_time_masks, draw_masks
from spkadapt.speaker_embed import SpeakerEmbedding

NO_AUG = SpecAugPolicy(enabled=False)


def _emb(scope="speaker", seed=0):
    return SpeakerEmbedding(np.random.default_rng(seed).standard_normal(EMB_DIM), scope, "spk000")


def _proj(seed=0):
    torch.manual_seed(seed)
    return DownProjection().double()


def test_join_split_widths():
    f = np.random.default_rng(0).standard_normal((10, FEAT_DIM))
    e = np.arange(EMB_DIM, dtype=float)
    j = join(f, e)
    assert j.shape == (10, JOINT_DIM) == (10, 595)
    assert np.array_equal(j[:, FEAT_DIM:], np.broadcast_to(e, (10, EMB_DIM)))
    f2, e2 = split(j)
    assert np.array_equal(f2, f) and e2.shape == (10, EMB_DIM)


def test_join_rejects_bad_shapes():
    with pytest.raises(ValueError):
        join(np.zeros((3, 80)), np.zeros(EMB_DIM))
    with pytest.raises(ValueError):
        join(np.zeros((3, FEAT_DIM)), np.zeros(500))


def test_f_norm_unit_length_and_idempotent():
    e = np.random.default_rng(1).standard_normal((3, 7, EMB_DIM)) * 5
    n = l2_normalize(e, "F")
    assert np.max(np.abs(np.linalg.norm(n, axis=2) - 1)) <= 1e-6
    assert np.max(np.abs(l2_normalize(n, "F") - n)) <= 1e-6


def test_t_norm_of_constant_embedding_is_sign_over_root_t():
    rng = np.random.default_rng(2)
    vec = rng.standard_normal(EMB_DIM)
    for t in (1, 5, 37):
        e = np.broadcast_to(vec, (1, t, EMB_DIM))
        n = l2_normalize(e, "T")
        assert np.max(np.abs(n - np.sign(vec) / np.sqrt(t))) <= 1e-6


def test_t_norm_ignores_padding():
    vec = np.random.default_rng(3).standard_normal(EMB_DIM)
    e = np.zeros((2, 10, EMB_DIM))
    e[0, :10] = vec
    e[1, :4] = vec
    e[1, 4:] = 99.0  # garbage in padding
    n = l2_normalize(e, "T", lengths=[10, 4])
    assert np.max(np.abs(n[1, :4] - np.sign(vec) / 2)) <= 1e-6
    assert np.all(n[1, 4:] == 0)


def test_b_norm_single_utterance_degenerates_with_warning():
    e = np.random.default_rng(4).standard_normal((1, 6, EMB_DIM))
    with pytest.warns(RuntimeWarning):
        n = l2_normalize(e, "B")
    assert np.max(np.abs(np.abs(n) - 1)) <= 1e-6


def test_b_norm_batch_of_two_has_unit_columns():
    e = np.random.default_rng(5).standard_normal((2, 4, EMB_DIM))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        n = l2_normalize(e, "B")
    np.testing.assert_allclose(np.linalg.norm(n, axis=0), 1.0, atol=1e-6)


def test_down_projection_shapes():
    p = DownProjection()
    assert p.weight.shape == (FEAT_DIM, EMB_DIM) and p.bias.shape == (FEAT_DIM,)
    out = p(torch.randn(4, 9, EMB_DIM))
    assert out.shape == (4, 9, FEAT_DIM)


def test_down_projection_is_affine():
    p = _proj()
    e = torch.randn(EMB_DIM, dtype=torch.float64)
    expected = p.weight.detach() @ e + p.bias.detach()
    assert torch.allclose(down_project(e, p), expected)


def test_inject_add_and_cat():
    f = torch.randn(12, FEAT_DIM)
    assert torch.equal(inject(f, torch.zeros(FEAT_DIM), "add"), f)
    cat = inject(f, torch.ones(FEAT_DIM), "cat")
    assert cat.shape == (12, 166)
    assert torch.equal(cat[:, :FEAT_DIM], f)
    with pytest.raises(ValueError):
        inject(f, torch.ones(FEAT_DIM), "none")


def test_mode_none_without_specaug_is_bitwise_identity():
    f = np.random.default_rng(6).standard_normal((20, FEAT_DIM))
    out = adapt_frontend(f, None, AdaptConfig(mode="none"), None, None, training=False)
    assert torch.equal(out, torch.as_tensor(f, dtype=out.dtype))
    assert out.dtype == torch.get_default_dtype()
    x64 = adapt_frontend(f, None, AdaptConfig(mode="none"), None, None, training=True, policy=NO_AUG)
    assert np.array_equal(x64.double().numpy(), f.astype(np.float32).astype(np.float64))


def test_cat_with_f_norm_matches_manual_composition():
    f = np.random.default_rng(7).standard_normal((15, FEAT_DIM))
    emb, proj = _emb("utterance"), _proj()
    out = adapt_frontend(f, emb, AdaptConfig(mode="cat", norm_axis="F"), proj, None, training=False)
    assert out.shape == (15, 166)
    v = emb.vector / max(np.linalg.norm(emb.vector), 1e-8)
    right = proj.weight.detach().numpy() @ v + proj.bias.detach().numpy()
    np.testing.assert_allclose(out[:, FEAT_DIM:].detach().numpy(), np.broadcast_to(right, (15, FEAT_DIM)),
                               atol=1e-12)
    np.testing.assert_array_equal(out[:, :FEAT_DIM].detach().numpy(), f)


def test_add_with_mask_in_embedding_dims():
    """A frequency mask inside [83, 595) touches the output only through the projection."""
    f = np.random.default_rng(8).standard_normal((25, FEAT_DIM))
    emb, proj = _emb(), _proj()
    policy = SpecAugPolicy(n_freq_masks=1, max_freq_width=194, scale_freq_width=False, n_time_masks=0)
    seed = next(s for s in range(10000)
                if (lambda m: m[0][1] > 0 and m[0][0] >= FEAT_DIM)(
                    draw_masks(JOINT_DIM, 1, 194, np.random.default_rng(s))))
    start, width = draw_masks(JOINT_DIM, 1, 194, np.random.default_rng(seed))[0]
    cfg = AdaptConfig(mode="add", norm_axis="T")
    out = adapt_frontend(f, emb, cfg, proj, np.random.default_rng(seed), training=True, policy=policy)
    clean = adapt_frontend(f, SpeakerEmbedding(emb.vector, "utterance", "u"), cfg, proj, None, training=False)
    # manual composition
    t = f.shape[0]
    e = np.broadcast_to(emb.vector, (t, EMB_DIM)) / np.maximum(np.sqrt(t) * np.abs(emb.vector), 1e-8)
    joint = apply_freq_masks(join(f, e), [(start, width)])
    f_m, e_m = split(joint)
    assert np.array_equal(f_m, f)
    assert np.all(e_m[:, start - FEAT_DIM:start - FEAT_DIM + width] == 0)
    w, b = proj.weight.detach().numpy(), proj.bias.detach().numpy()
    expected = f + e_m @ w.T + b
    np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-10)
    diff = (out - clean).detach().numpy()
    masked_part = -(e[:, start - FEAT_DIM:start - FEAT_DIM + width] @ w[:, start - FEAT_DIM:start - FEAT_DIM + width].T)
    np.testing.assert_allclose(diff, masked_part, atol=1e-10)


def test_scope_rule():
    f = np.zeros((10, FEAT_DIM))
    cfg = AdaptConfig(mode="add")
    with pytest.raises(ScopeError):
        adapt_frontend(f, _emb("utterance"), cfg, _proj(), None, training=True, policy=NO_AUG)
    with pytest.raises(ScopeError):
        adapt_frontend(f, _emb("speaker"), cfg, _proj(), None, training=False)


def test_invalid_mode_lists_valid_modes():
    with pytest.raises(ValueError, match="none, add, cat"):
        AdaptConfig(mode="concat")
    with pytest.raises(ValueError):
        AdaptConfig(norm_axis="X")


@settings(max_examples=60, deadline=None)
@given(t=st.integers(1, 60), mode=st.sampled_from(["none", "add", "cat"]), axis=st.sampled_from(["none", "T", "F"]),
       training=st.booleans(), seed=st.integers(0, 1000))
def test_width_contract(t, mode, axis, training, seed):
    f = np.random.default_rng(seed).standard_normal((t, FEAT_DIM))
    emb = _emb("speaker" if training else "utterance", seed)
    policy = SpecAugPolicy(n_time_masks=1, max_time_width=3)
    out = adapt_frontend(f, emb, AdaptConfig(mode=mode, norm_axis=axis), _proj(), np.random.default_rng(seed),
                         training=training, policy=policy)
    assert out.shape == (t, {"none": 83, "add": 83, "cat": 166}[mode])


def test_embedding_contribution_constant_over_frames():
    f = np.random.default_rng(9).standard_normal((30, FEAT_DIM))
    for axis in ("none", "T", "F"):
        out = adapt_frontend(f, _emb("utterance"), AdaptConfig(mode="add", norm_axis=axis), _proj(), None,
                             training=False).detach().numpy()
        contrib = out - f
        assert np.allclose(contrib, contrib[0])


def test_zero_projection_reproduces_baseline():
    f = np.random.default_rng(10).standard_normal((12, FEAT_DIM))
    proj = _proj()
    with torch.no_grad():
        proj.weight.zero_()
    out = adapt_frontend(f, _emb("utterance"), AdaptConfig(mode="add"), proj, None, training=False)
    assert np.array_equal(out.detach().numpy(), f)


def test_norm_after_specaug_flag_changes_order():
    f = np.random.default_rng(11).standard_normal((20, FEAT_DIM))
    e = [np.random.default_rng(12).standard_normal(EMB_DIM)]
    policy = SpecAugPolicy(n_freq_masks=2, n_time_masks=2, max_time_width=5)
    before = prepare_batch([f], e, AdaptConfig(mode="add", norm_axis="F"), policy, [np.random.default_rng(0)], True)
    after = prepare_batch([f], e, AdaptConfig(mode="add", norm_axis="F", norm_before_specaug=False), policy,
                          [np.random.default_rng(0)], True)
    # normalising after masking gives unit rows wherever anything survives
    rows = np.linalg.norm(after[1][0], axis=1)
    assert np.all((np.abs(rows - 1) < 1e-6) | (rows == 0))
    assert not np.allclose(before[1][0], after[1][0])


def test_specaug_joint_off_leaves_embedding_unmasked():
    f = np.random.default_rng(13).standard_normal((40, FEAT_DIM))
    e = [np.random.default_rng(14).standard_normal(EMB_DIM)]
    cfg = AdaptConfig(mode="cat", norm_axis="none", specaug_joint=False)
    feats, embs = prepare_batch([f], e, cfg, SpecAugPolicy(max_time_width=10), [np.random.default_rng(1)], True)
    assert np.array_equal(embs[0], np.broadcast_to(e[0], (40, EMB_DIM)))
    assert not np.array_equal(feats[0], f)


def test_time_mask_hits_both_halves_of_joint_matrix():
    f = np.random.default_rng(15).standard_normal((40, FEAT_DIM)) + 3
    e = [np.abs(np.random.default_rng(16).standard_normal(EMB_DIM)) + 1]
    policy = SpecAugPolicy(n_freq_masks=0, n_time_masks=1, max_time_width=20)
    rng_seed = next(s for s in range(1000) if draw_masks(40, 1, 20, np.random.default_rng(s))[0][1] > 0)
    feats, embs = prepare_batch([f], e, AdaptConfig(mode="add", norm_axis="none"), policy,
                                [np.random.default_rng(rng_seed)], True)
    start, w = draw_masks(40, 1, 20, np.random.default_rng(rng_seed))[0]
    expect = apply_time_masks(join(f, e[0]), [(start, w)])
    assert np.array_equal(feats[0], expect[:, :FEAT_DIM])
    assert np.array_equal(embs[0], expect[:, FEAT_DIM:])


def test_projection_receives_gradient_embedding_does_not():
    f = torch.randn(1, 20, FEAT_DIM, dtype=torch.float64)
    e = torch.randn(1, 20, EMB_DIM, dtype=torch.float64)
    proj = _proj()
    out = inject(f, down_project(e, proj), "cat")
    out.pow(2).sum().backward()
    assert proj.weight.grad is not None and proj.weight.grad.abs().sum() > 0
    assert proj.bias.grad.abs().sum() > 0
    assert e.grad is None
