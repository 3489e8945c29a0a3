import numpy as np
import pytest

from cgmoe_ad import tensor as T
from cgmoe_ad.model import (ConfigError, EncoderConfig, ModelBundle, ModelConfig, cgmoe_forward,
                            decode, encode, ffn, forward, mix_experts, noisy_bottleneck, route)
from cgmoe_ad.tensor import ContractError, DimensionError, Tensor
from cgmoe_ad.training import reconstruction_loss
from conftest import desk_config
from oracles import softmax_direct


def _image(rng, size=32):
    return rng.random((size, size, 3))


def _gelu_np(x):
    from math import erf
    return x * 0.5 * (1 + np.vectorize(erf)(x / np.sqrt(2)))


def _ffn_np(x, w1, w2):
    return _gelu_np(x @ w1.T) @ w2.T


# config -------------------------------------------------------------------

def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        EncoderConfig(depth=4, feature_layers=(0, 2))
    assert EncoderConfig(depth=8).resolved_layers() == (3, 4, 5, 6)
    assert EncoderConfig(depth=8).layer_groups() == [(3, 4), (5, 6)]
    assert EncoderConfig(depth=2).resolved_layers() == (1, 2)


def test_decoder_depth_must_split_into_levels():
    with pytest.raises(ConfigError):
        ModelConfig(decoder_depth=3)


# encode -------------------------------------------------------------------

def test_encode_deterministic_across_instances(rng):
    img = _image(rng)
    a = encode(img, ModelBundle(desk_config()))
    b = encode(img, ModelBundle(desk_config()))
    for x, y in zip(a.features, b.features):
        assert np.array_equal(x, y)
    assert np.array_equal(a.z_cls, b.z_cls)


def test_encode_token_count():
    model = ModelBundle(ModelConfig(encoder=EncoderConfig(image_size=64, patch_size=8, d=16,
                                                          depth=2), hidden=8,
                                    bottleneck_hidden=8))
    enc = encode(np.zeros((64, 64, 3)), model)
    assert len(enc.features) == 2
    assert all(f.shape == (1, 64, 16) for f in enc.features)


def test_encode_pixel_perturbation_changes_cls(desk_model, rng):
    img = _image(rng)
    z0 = encode(img, desk_model).z_cls
    img2 = img.copy()
    img2[5, 7, 1] += 0.3
    assert not np.array_equal(z0, encode(img2, desk_model).z_cls)


def test_encode_size_mismatch(desk_model):
    with pytest.raises(DimensionError):
        encode(np.zeros((64, 64, 3)), desk_model)


# route --------------------------------------------------------------------

def test_route_single_expert():
    g = route(Tensor(np.random.default_rng(0).normal(size=5)), Tensor(np.ones((1, 5))))
    assert g.data.tolist() == [1.0]


def test_route_zero_context_is_uniform():
    g = route(Tensor(np.zeros(6)), Tensor(np.random.default_rng(0).normal(size=(4, 6))))
    assert np.all(g.data == 0.25)


def test_route_matches_direct_softmax(rng):
    W, z = rng.normal(size=(8, 16)), rng.normal(size=16)
    g = route(Tensor(z), Tensor(W))
    np.testing.assert_allclose(g.data, softmax_direct(W @ z), rtol=0, atol=1e-12)


def test_route_dimension_mismatch():
    with pytest.raises(DimensionError):
        route(Tensor(np.zeros(5)), Tensor(np.zeros((3, 4))))


# cgmoe --------------------------------------------------------------------

def _bank(rng, K, h=12, d=6):
    return rng.normal(size=(K, h, d)), rng.normal(size=(K, d, h))


def test_identical_experts_collapse_to_single_ffn(rng):
    w1, w2 = _bank(rng, 1)
    W1, W2 = np.repeat(w1, 5, 0), np.repeat(w2, 5, 0)
    x = rng.normal(size=(7, 6))
    g = softmax_direct(rng.normal(size=5))
    out = cgmoe_forward(Tensor(x), Tensor(g), Tensor(W1), Tensor(W2)).data
    np.testing.assert_allclose(out, _ffn_np(x, w1[0], w2[0]), atol=1e-10)


def test_one_hot_selects_expert(rng):
    W1, W2 = _bank(rng, 4)
    x = rng.normal(size=(7, 6))
    out = cgmoe_forward(Tensor(x), Tensor(np.eye(4)[2]), Tensor(W1), Tensor(W2)).data
    np.testing.assert_allclose(out, _ffn_np(x, W1[2], W2[2]), atol=1e-10)


def test_explicit_mixing_oracle(rng):
    W1, W2 = _bank(rng, 3)
    g = np.array([0.2, 0.3, 0.5])
    x = rng.normal(size=(9, 6))
    m1 = sum(g[k] * W1[k] for k in range(3))
    m2 = sum(g[k] * W2[k] for k in range(3))
    out = cgmoe_forward(Tensor(x), Tensor(g), Tensor(W1), Tensor(W2)).data
    np.testing.assert_allclose(out, _ffn_np(x, m1, m2), atol=1e-6)


def test_cgmoe_permutation_equivariance(rng):
    W1, W2 = _bank(rng, 5)
    g = softmax_direct(rng.normal(size=5))
    x = rng.normal(size=(4, 6))
    perm = rng.permutation(5)
    a = cgmoe_forward(Tensor(x), Tensor(g), Tensor(W1), Tensor(W2)).data
    b = cgmoe_forward(Tensor(x), Tensor(g[perm]), Tensor(W1[perm]), Tensor(W2[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cgmoe_rejects_off_simplex(rng):
    W1, W2 = _bank(rng, 2)
    with pytest.raises(ContractError):
        cgmoe_forward(Tensor(np.ones((3, 6))), Tensor([0.7, 0.7]), Tensor(W1), Tensor(W2))


def test_cgmoe_batched_uses_per_image_routing(rng):
    W1, W2 = _bank(rng, 3)
    x = rng.normal(size=(2, 4, 6))
    g = np.stack([softmax_direct(rng.normal(size=3)) for _ in range(2)])
    out = cgmoe_forward(Tensor(x), Tensor(g), Tensor(W1), Tensor(W2)).data
    for b in range(2):
        single = cgmoe_forward(Tensor(x[b]), Tensor(g[b]), Tensor(W1), Tensor(W2)).data
        np.testing.assert_allclose(out[b], single, atol=1e-12)


def test_token_path_cost_independent_of_expert_count(rng):
    counts = {}
    for K in (2, 8):
        W1, W2 = _bank(rng, K, h=32, d=16)
        g = Tensor(softmax_direct(rng.normal(size=K))[None])
        x = Tensor(rng.normal(size=(1, 64, 16)))
        with T.count_ops() as whole:
            cgmoe_forward(x, g, Tensor(W1), Tensor(W2))
        m1, m2 = mix_experts(g, Tensor(W1), Tensor(W2))
        with T.count_ops() as tok:
            ffn(x, m1, m2)
        counts[K] = (whole.ops, tok.ops, tok.total_flops)
    assert counts[2] == counts[8]


# bottleneck ---------------------------------------------------------------

def test_bottleneck_zero_drop_equals_eval(desk_model, rng):
    f = Tensor(rng.normal(size=(1, 16, 16)))
    a = noisy_bottleneck(f, desk_model, True, 0.0, np.random.default_rng(0)).data
    b = noisy_bottleneck(f, desk_model, False, 0.2).data
    assert np.array_equal(a, b)


def test_bottleneck_eval_deterministic(desk_model, rng):
    f = Tensor(rng.normal(size=(1, 16, 16)))
    assert np.array_equal(noisy_bottleneck(f, desk_model, False, 0.2).data,
                          noisy_bottleneck(f, desk_model, False, 0.2).data)


def test_bottleneck_seeded_noise_replays(desk_model, rng):
    f = Tensor(rng.normal(size=(1, 16, 16)))
    a = noisy_bottleneck(f, desk_model, True, 0.2, np.random.default_rng(5)).data
    b = noisy_bottleneck(f, desk_model, True, 0.2, np.random.default_rng(5)).data
    c = noisy_bottleneck(f, desk_model, True, 0.2, np.random.default_rng(6)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert not np.array_equal(a, noisy_bottleneck(f, desk_model, False, 0.2).data)


# decode -------------------------------------------------------------------

def test_decode_alignment(desk_model, rng):
    out = forward(_image(rng), desk_model)
    assert len(out.f_D) == len(out.f_E) == 2
    assert all(d.shape == e.shape for d, e in zip(out.f_D, out.f_E))


def test_decode_zeroed_blocks_are_identity(rng):
    model = ModelBundle(desk_config())
    for name, p in model.params.items():
        if name.endswith("attn.o.weight") or name.endswith("attn.o.bias") \
                or name.endswith("experts.w2"):
            p.data = np.zeros_like(p.data)
    x = rng.normal(size=(1, 16, 16))
    g = Tensor(np.full((1, 4), 0.25))
    for out in decode(Tensor(x), g, model):
        np.testing.assert_array_equal(out.data, x)


def _reference_decoder(model, x, g):
    # plain numpy transformer with a single FFN whose weights are the mixed expert weights
    def ln(v, gain, bias):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-6) * gain + bias

    P = {k: p.data for k, p in model.params.items()}
    heads = model.config.decoder_heads
    outs = []
    for i in range(model.config.decoder_depth):
        pre = f"decoder.blocks.{i}."
        h = ln(x, P[pre + "ln1.gain"], P[pre + "ln1.bias"])
        N, d = h.shape
        dh = d // heads
        q = (h @ P[pre + "attn.q.weight"].T + P[pre + "attn.q.bias"]).reshape(N, heads, dh)
        k = (h @ P[pre + "attn.k.weight"].T + P[pre + "attn.k.bias"]).reshape(N, heads, dh)
        v = (h @ P[pre + "attn.v.weight"].T + P[pre + "attn.v.bias"]).reshape(N, heads, dh)
        att = np.zeros((N, heads, dh))
        for hd in range(heads):
            s = q[:, hd] @ k[:, hd].T / np.sqrt(dh)
            s = np.exp(s - s.max(1, keepdims=True))
            s /= s.sum(1, keepdims=True)
            att[:, hd] = s @ v[:, hd]
        x = x + att.reshape(N, d) @ P[pre + "attn.o.weight"].T + P[pre + "attn.o.bias"]
        h = ln(x, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
        w1 = np.tensordot(g, P[pre + "experts.w1"], 1)
        w2 = np.tensordot(g, P[pre + "experts.w2"], 1)
        x = x + _ffn_np(h, w1, w2)
        outs.append(x)
    return outs


def test_single_expert_decoder_matches_reference(rng):
    model = ModelBundle(desk_config(experts=1))
    x = rng.normal(size=(16, 16))
    got = decode(Tensor(x[None]), Tensor(np.ones((1, 1))), model)
    ref = _reference_decoder(model, x, np.ones(1))
    for a, b in zip(got, ref):
        np.testing.assert_allclose(a.data[0], b, atol=1e-6)


def test_mixture_decoder_matches_reference(rng):
    model = ModelBundle(desk_config(experts=4))
    x = rng.normal(size=(16, 16))
    g = softmax_direct(rng.normal(size=4))
    got = decode(Tensor(x[None]), Tensor(g[None]), model)
    for a, b in zip(got, _reference_decoder(model, x, g)):
        np.testing.assert_allclose(a.data[0], b, atol=1e-6)


# forward ------------------------------------------------------------------

def _loss_and_grads(model, images, seed=0, q=0.0):
    model.zero_grad()
    out = forward(images, model, training=True, rng=np.random.default_rng(seed))
    loss, _ = reconstruction_loss(out.f_E, out.f_D, q)
    loss.backward()
    return loss, out


def test_encoder_receives_no_gradient(desk_model, rng):
    _loss_and_grads(desk_model, rng.random((2, 32, 32, 3)))
    for name, p in desk_model.encoder_params().items():
        assert not p.requires_grad
        assert p.grad is None or not np.any(p.grad), name


def test_trainable_parameters_receive_gradient(desk_model, rng):
    _loss_and_grads(desk_model, rng.random((2, 32, 32, 3)))
    for name in ("gate.weight", "bottleneck.fc1.weight", "bottleneck.fc2.weight",
                 "decoder.blocks.0.experts.w1", "decoder.blocks.1.experts.w2"):
        assert np.abs(desk_model[name].grad).max() > 0, name


def test_routing_is_shared_and_per_image(desk_model, rng):
    imgs = rng.random((3, 32, 32, 3))
    out = forward(imgs, desk_model)
    assert out.g.shape == (3, 4)
    np.testing.assert_allclose(out.g.data.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.g.data, softmax_direct_rows(
        out.z_cls.data @ desk_model["gate.weight"].data.T), atol=1e-12)


def softmax_direct_rows(m):
    return np.stack([softmax_direct(r) for r in m])


def test_decoder_cls_routing_differs(rng):
    img = rng.random((1, 32, 32, 3))
    g_enc = forward(img, ModelBundle(desk_config(routing="encoder_cls"))).g.data
    dec_model = ModelBundle(desk_config(routing="decoder_cls"))
    g_dec = forward(img, dec_model).g.data
    assert not np.allclose(g_enc, g_dec)
    np.testing.assert_allclose(g_dec.sum(1), 1.0, atol=1e-12)
    _loss_and_grads(dec_model, img)
    assert np.abs(dec_model["decoder.cls"].grad).max() > 0


def test_load_encoder_weights_checks_topology(desk_model):
    blobs = {k: v.data * 2 for k, v in desk_model.encoder_params().items()}
    desk_model.load_encoder_weights(blobs)
    assert np.array_equal(desk_model["encoder.patch.weight"].data, blobs["encoder.patch.weight"])
    assert not desk_model["encoder.patch.weight"].requires_grad
    blobs.pop("encoder.cls")
    with pytest.raises(ConfigError):
        desk_model.load_encoder_weights(blobs)
