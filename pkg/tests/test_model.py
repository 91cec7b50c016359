import numpy as np
import pytest

from upix import autodiff as ad
from upix.autodiff import Tensor, finite_difference_check
from upix.model import (
    ModelConfig, check_params, embed_batch, forward_model, forward_packed, init_params,
    param_shapes, reassemble, rmsnorm, swiglu_mlp, transformer_block,
)
from upix.tokens import (
    SegmentKind, assemble_sequence, encode_text, make_generation_tokens, patchify, timestep_token,
)
from upix.attention import build_hybrid_mask


def make_seq(params, cfg, caption=b"ab", res=4, t=0.4, seed=0, width=None):
    rng = np.random.default_rng(seed)
    shape = (res, width or res, 3)
    x, e = rng.uniform(-1, 1, shape), rng.normal(size=shape)
    _, gen = make_generation_tokens(x, e, t, params, cfg.patch_size)
    return assemble_sequence(None, encode_text(caption, params["text_embed"]), timestep_token(t, params), gen)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(heads=0)
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_param_shapes_depend_on_config_only():
    cfg = ModelConfig(layers=3, dim=32, heads=4)
    params = init_params(cfg, 5)
    assert {k: v.shape for k, v in params.items()} == param_shapes(cfg)
    check_params(cfg, params)
    bad = dict(params)
    bad["blocks.0.wq"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        check_params(cfg, bad)


def test_rmsnorm_examples():
    np.testing.assert_allclose(rmsnorm(np.array([[3.0, 4.0]]), np.ones(2)).data, [[0.8485, 1.1314]], atol=1e-3)
    # eps shifts the result by about eps / mean(x^2), so use rows well above unit scale
    x = 100 * np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(rmsnorm(7 * x, np.ones(5)).data, rmsnorm(x, np.ones(5)).data, rtol=0, atol=1e-9)
    assert not rmsnorm(x, np.zeros(5)).data.any()


def test_swiglu_zero_cases_and_gradient():
    rng = np.random.default_rng(1)
    wg, wu, wd = rng.normal(size=(8, 16)), rng.normal(size=(8, 16)), rng.normal(size=(16, 8))
    assert not swiglu_mlp(np.zeros((4, 8)), wg, wu, wd).data.any()
    assert not swiglu_mlp(rng.normal(size=(4, 8)), np.zeros((8, 16)), wu, wd).data.any()
    x = rng.normal(size=(4, 8))
    err = finite_difference_check(lambda p: ad.sum_(swiglu_mlp(p["x"], p["g"], p["u"], p["d"]) ** 2),
                                  {"x": x, "g": wg, "u": wu, "d": wd})
    assert err <= 1e-5


def test_block_identity_at_init():
    cfg = ModelConfig(layers=1, dim=16, heads=2)
    params = init_params(cfg, 0)
    x = np.random.default_rng(2).normal(size=(6, 16))
    kinds = [SegmentKind.TEXT] * 3 + [SegmentKind.GENERATION] * 3
    pos = np.stack([np.arange(6), [-1, -1, -1, 0, 0, 1], [-1, -1, -1, 0, 1, 0]], 1)
    out = transformer_block(x, build_hybrid_mask(kinds), pos, params, cfg, "blocks.0.")
    np.testing.assert_array_equal(out.data, x)


def test_zero_layers_is_linear_pipeline():
    cfg = ModelConfig(layers=0, dim=16, heads=2)
    params = init_params(cfg, 3)
    seq = make_seq(params, cfg)
    out = forward_model(seq, params, cfg)
    emb = seq.embeddings.data
    normed = emb / np.sqrt(np.mean(emb**2, -1, keepdims=True) + 1e-6) * params["final_norm"]
    gen = [k == SegmentKind.GENERATION for k in seq.kinds]
    np.testing.assert_allclose(out.patches.data[0], normed[gen] @ params["patch_head"], atol=1e-12)
    txt = [k == SegmentKind.TEXT for k in seq.kinds]
    np.testing.assert_allclose(out.text_logits.data, normed[txt] @ params["text_head"], atol=1e-12)


def test_head_fan_out(tiny_cfg, tiny_params):
    seq = make_seq(tiny_params, tiny_cfg, b"xyz")
    out = forward_model(seq, tiny_params, tiny_cfg)
    assert out.patches.shape == (1, seq.count(SegmentKind.GENERATION), tiny_cfg.patch_dim)
    assert out.text_logits.shape == (seq.count(SegmentKind.TEXT), 259)


def test_no_generation_tokens_rejected(tiny_cfg, tiny_params):
    seq = assemble_sequence(None, encode_text(b"a", tiny_params["text_embed"]), None, None,
                            require_generation=False)
    with pytest.raises(ValueError):
        forward_model(seq, tiny_params, tiny_cfg)
    assert forward_model(seq, tiny_params, tiny_cfg, want_patches=False).text_logits.shape == (3, 259)


def test_causal_rows_ignore_later_tokens(tiny_cfg, tiny_params):
    seq = make_seq(tiny_params, tiny_cfg, b"abc")
    base = forward_model(seq, tiny_params, tiny_cfg).hidden.data[0]
    emb = seq.embeddings.data.copy()
    emb[-1] += 5.0  # a generation token, invisible to every causal row
    seq.embeddings = Tensor(emb)
    moved = forward_model(seq, tiny_params, tiny_cfg).hidden.data[0]
    causal = [k != SegmentKind.GENERATION for k in seq.kinds]
    np.testing.assert_array_equal(base[causal], moved[causal])
    assert not np.array_equal(base[-1], moved[-1])


def test_packing_does_not_leak_between_samples(tiny_cfg, tiny_params):
    a = make_seq(tiny_params, tiny_cfg, b"a", res=4, seed=1)
    b = make_seq(tiny_params, tiny_cfg, b"longer caption", res=4, seed=2)
    alone = forward_model(a, tiny_params, tiny_cfg)
    packed = forward_model([a, b], tiny_params, tiny_cfg)
    np.testing.assert_allclose(packed.patches.data[0], alone.patches.data[0], atol=1e-12)


def test_embed_batch_matches_token_assembly(tiny_cfg, tiny_params):
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 8, 8, 3))
    t = np.array([0.2, 0.7])
    conds = [[rng.uniform(-1, 1, (8, 8, 3))], []]
    fast = forward_packed(tiny_params, tiny_cfg, embed_batch(tiny_params, tiny_cfg, captions=[b"p", b"qq"],
                                                               noisy=x, t=t, conditions=conds))
    from upix.tokens import encode_condition, patchify_tensor, timestep_token
    seqs = []
    for i, cap in enumerate([b"p", b"qq"]):
        cond = [encode_condition(c, tiny_params, tiny_cfg.cond_stride, tiny_cfg.patch_size) for c in conds[i]]
        emb = patchify_tensor(x[i], 2) @ tiny_params["patch_embed"]
        from upix.tokens import TokenSequence, grid_positions
        gen = TokenSequence(emb, [SegmentKind.GENERATION] * 16, grid_positions(4, 4))
        seqs.append(assemble_sequence(cond, encode_text(cap, tiny_params["text_embed"]),
                                      timestep_token(t[i], tiny_params), gen))
    slow = forward_model(seqs, tiny_params, tiny_cfg)
    np.testing.assert_allclose(fast.patches.data, slow.patches.data, atol=1e-12)
    np.testing.assert_allclose(fast.text_logits.data, slow.text_logits.data, atol=1e-12)


def test_full_model_gradient_six_tokens():
    cfg = ModelConfig(layers=1, dim=16, heads=2, mlp_ratio=2)
    rng = np.random.default_rng(0)
    params = {k: v + 0.02 * rng.standard_normal(v.shape) for k, v in init_params(cfg, 0).items()}
    # BOS, one byte, EOS, the timestep, and two patches
    seq_fn = lambda p: make_seq(p, cfg, b"a", res=2, width=4, t=0.5)  # noqa: E731
    frozen = ("cond.", "text_embed", "text_head")
    used = {k: v for k, v in params.items() if not k.startswith(frozen)}
    target = rng.uniform(-1, 1, (1, 2, 12))

    def loss(p):
        p = {**params, **p}
        out = forward_model(seq_fn(p), p, cfg)
        d = out.patches - target
        return ad.mean(d * d) + ad.mean(out.text_logits * out.text_logits) * 0.01

    assert len(seq_fn(params)) == 6
    assert finite_difference_check(loss, used) <= 1e-5


def test_reassemble_inverts_patchify():
    img = np.random.default_rng(5).normal(size=(6, 4, 3))
    np.testing.assert_array_equal(reassemble(patchify(img, 2)), img)
    one = patchify(img[:2, :2], 2)
    np.testing.assert_array_equal(reassemble(one), one.patches.reshape(2, 2, 3))
