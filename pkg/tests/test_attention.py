import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from glaucoma_tribranch.attention import CBAM, KECBAM, ChannelAttention, KnowledgeProjection, make_attention
from glaucoma_tribranch.backbone import init_weights
from glaucoma_tribranch.errors import BatchMismatch, ConfigError, DimMismatch
from glaucoma_tribranch.gradcheck import check_gradients


def _randomize(module, seed=0, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# --- naive reference implementations ----------------------------------------


def _conv2d_loops(x, w, b, pad):
    """x: C x H x W, w: O x C x k x k (numpy), same-size output."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for r in range(h):
            for q in range(wd):
                s = 0.0 if b is None else float(b[oc])
                for ic in range(c):
                    for u in range(k):
                        for v in range(k):
                            rr, qq = r + u - pad, q + v - pad
                            if 0 <= rr < h and 0 <= qq < wd:
                                s += w[oc, ic, u, v] * x[ic, rr, qq]
                out[oc, r, q] = s
    return out


def _cbam_oracle(x, m: CBAM):
    c, h, w = x.shape
    w1 = m.channel.mlp[0].weight.detach().double().numpy()[:, :, 0, 0]
    b1 = m.channel.mlp[0].bias.detach().double().numpy()
    w2 = m.channel.mlp[2].weight.detach().double().numpy()[:, :, 0, 0]
    b2 = m.channel.mlp[2].bias.detach().double().numpy()

    def mlp(d):
        hid = [max(sum(w1[j, i] * d[i] for i in range(c)) + b1[j], 0.0) for j in range(w1.shape[0])]
        return [sum(w2[i, j] * hid[j] for j in range(len(hid))) + b2[i] for i in range(c)]

    avg = [x[i].mean() for i in range(c)]
    mx = [x[i].max() for i in range(c)]
    cw = np.array([_sig(a + b) for a, b in zip(mlp(avg), mlp(mx))])
    xc = x * cw[:, None, None]
    desc = np.stack([xc.mean(axis=0), xc.max(axis=0)])
    ks = m.spatial.conv.weight.detach().double().numpy()
    sw = np.vectorize(_sig)(_conv2d_loops(desc, ks, None, ks.shape[-1] // 2)[0])
    return xc * sw[None], cw, sw


def _projection_oracle(f, p: KnowledgeProjection):
    w1 = p.w1.weight.detach().double().numpy()
    w2 = p.w2.weight.detach().double().numpy()
    hidden = [max(sum(w1[j, i] * f[i] for i in range(len(f))), 0.0) for j in range(w1.shape[0])]
    return np.array([_sig(sum(w2[c, j] * hidden[j] for j in range(len(hidden)))) for c in range(w2.shape[0])])


# --- CBAM -----------------------------------------------------------------


def test_cbam_zero_params_quarter_output():
    m = _zero(CBAM(8, 2))
    x = torch.randn(2, 8, 5, 5)
    out, maps = m(x)
    assert torch.all(maps.channel_weights == 0.5) and torch.all(maps.spatial_weights == 0.5)
    torch.testing.assert_close(out, 0.25 * x, rtol=0, atol=0)


def test_cbam_matches_loop_oracle():
    torch.manual_seed(0)
    m = _randomize(CBAM(4, 2, kernel_size=3), seed=1).double()
    x = torch.randn(1, 4, 4, 5, dtype=torch.float64)
    out, maps = m(x)
    want, cw, sw = _cbam_oracle(x[0].numpy(), m)
    np.testing.assert_allclose(out[0].detach().numpy(), want, atol=1e-10)
    np.testing.assert_allclose(maps.channel_weights[0].detach().numpy(), cw, atol=1e-12)
    np.testing.assert_allclose(maps.spatial_weights[0, 0].detach().numpy(), sw, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 7), st.integers(2, 7))
def test_channel_attention_permutation_invariant(seed, h, w):
    g = torch.Generator().manual_seed(seed)
    m = _randomize(ChannelAttention(8, 4), seed=seed % 1000)
    x = torch.randn(2, 8, h, w, generator=g)
    perm = torch.randperm(h * w, generator=g)
    xp = x.flatten(2)[:, :, perm].reshape(2, 8, h, w)
    torch.testing.assert_close(m(x), m(xp), rtol=0, atol=1e-6)


def test_spatial_weights_follow_flip_with_symmetric_kernel():
    m = _randomize(CBAM(8, 4), seed=3)
    with torch.no_grad():
        k = m.spatial.conv.weight
        k.copy_((k + k.flip(-1)) / 2)
    x = torch.randn(1, 8, 6, 6)
    _, a = m(x)
    _, b = m(x.flip(-1))
    torch.testing.assert_close(a.channel_weights, b.channel_weights, rtol=0, atol=1e-6)
    torch.testing.assert_close(a.spatial_weights.flip(-1), b.spatial_weights, rtol=0, atol=1e-6)


# --- knowledge projection ----------------------------------------------------


def test_projection_zero_matrices_half():
    p = KnowledgeProjection(6, 8, 2)
    with torch.no_grad():
        p.w1.weight.zero_()
    torch.testing.assert_close(p(torch.randn(3, 6)), torch.full((3, 8), 0.5))
    p = _randomize(KnowledgeProjection(6, 8, 2))
    with torch.no_grad():
        p.w2.weight.zero_()
    torch.testing.assert_close(p(torch.randn(3, 6)), torch.full((3, 8), 0.5))


def test_projection_rank_one_saturates_monotonically():
    p = KnowledgeProjection(5, 4, 2)
    with torch.no_grad():
        p.w1.weight.fill_(1.0)
        p.w2.weight.fill_(1.0)
    scales = torch.linspace(0.0, 0.8, 25)
    w = torch.stack([p(s * torch.ones(1, 5))[0, 0] for s in scales])
    assert torch.all(w[1:] > w[:-1])
    assert w[0] == 0.5 and w[-1] > 0.999
    assert p(10 * torch.ones(1, 5)).min() > 0.999


def test_projection_matches_scalar_loops():
    p = _randomize(KnowledgeProjection(7, 6, 3), seed=5).double()
    f = torch.randn(2, 7, dtype=torch.float64)
    got = p(f).detach().numpy()
    for b in range(2):
        np.testing.assert_allclose(got[b], _projection_oracle(f[b].numpy(), p), atol=1e-12)


def test_projection_dim_mismatch():
    p = KnowledgeProjection(7, 6, 3)
    with pytest.raises(DimMismatch):
        p(torch.randn(2, 8))
    with pytest.raises(DimMismatch):
        KnowledgeProjection(7, 6, 4)


# --- KE-CBAM ---------------------------------------------------------------


def test_ke_cbam_zero_fusion_half_of_cbam():
    m = KECBAM(8, 10, 2)
    init_weights(m, 0.5)
    _zero(m.fuse_in)
    _zero(m.fuse_out)
    x, prior = torch.randn(2, 8, 5, 5), torch.randn(2, 10)
    out, maps = m(x, prior)
    f_cbam, _ = m.cbam(x)
    assert torch.all(maps.fused == 0.5)
    assert torch.equal(out, 0.5 * f_cbam)


def _ke_oracle(x, f_rf, m: KECBAM):
    """Steps 1-5 by explicit loops, float64 numpy."""
    f_cbam, _, _ = _cbam_oracle(x, m.cbam)
    c, h, w = f_cbam.shape
    w_global = _projection_oracle(f_rf, m.projection)
    g_exp = np.broadcast_to(w_global[:, None, None], (c, h, w))
    cat = np.concatenate([f_cbam, g_exp], axis=0)
    wi = m.fuse_in.weight.detach().double().numpy()
    bi = m.fuse_in.bias.detach().double().numpy()
    hidden = np.maximum(_conv2d_loops(cat, wi, bi, 0), 0.0)
    wo = m.fuse_out.weight.detach().double().numpy()
    bo = m.fuse_out.bias.detach().double().numpy()
    fused = np.vectorize(_sig)(_conv2d_loops(hidden, wo, bo, wo.shape[-1] // 2)[0])
    out = np.empty_like(f_cbam)
    for ch in range(c):
        for r in range(h):
            for q in range(w):
                out[ch, r, q] = f_cbam[ch, r, q] * fused[r, q]
    return out, w_global, fused


def test_ke_cbam_matches_hand_rolled_oracle():
    m = _randomize(KECBAM(4, 5, 2), seed=7).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    f = torch.randn(1, 5, dtype=torch.float64)
    out, maps = m(x, f)
    want, wg, fused = _ke_oracle(x[0].numpy(), f[0].numpy(), m)
    np.testing.assert_allclose(out[0].detach().numpy(), want, atol=1e-10)
    np.testing.assert_allclose(maps.knowledge_weights[0].detach().numpy(), wg, atol=1e-12)
    np.testing.assert_allclose(maps.fused[0, 0].detach().numpy(), fused, atol=1e-12)


def test_ke_cbam_identical_inputs_identical_outputs():
    m = _randomize(KECBAM(8, 6, 4), seed=2)
    x = torch.randn(1, 8, 4, 4)
    f = torch.randn(1, 6)
    a, _ = m(torch.cat([x, x]), torch.cat([f, f]))
    torch.testing.assert_close(a[0], a[1], rtol=0, atol=0)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["cbam", "ke_cbam"]))
def test_maps_in_open_unit_interval_and_gating_shrinks(seed, mode):
    g = torch.Generator().manual_seed(seed)
    m = make_attention(mode, 8, prior_dim=6, reduction=4)
    _randomize(m, seed=seed % 997, scale=0.3)
    x = torch.randn(2, 8, 4, 5, generator=g) * 3
    prior = torch.randn(2, 6, generator=g)
    out, maps = m(x, prior)
    for t in maps.all_maps():
        assert torch.all(t > 0) and torch.all(t < 1)
    assert maps.channel_weights.shape == (2, 8) and maps.spatial_weights.shape == (2, 1, 4, 5)
    if mode == "ke_cbam":
        f_cbam, _ = m.cbam(x)
        assert maps.knowledge_weights.shape == (2, 8) and maps.fused.shape == (2, 1, 4, 5)
        assert torch.all(out.abs() <= f_cbam.abs())


def test_ke_cbam_errors():
    m = KECBAM(8, 6, 4)
    with pytest.raises(DimMismatch):
        m(torch.randn(2, 8, 3, 3), None)
    with pytest.raises(DimMismatch):
        m(torch.randn(2, 8, 3, 3), torch.randn(2, 5))
    with pytest.raises(BatchMismatch):
        m(torch.randn(2, 8, 3, 3), torch.randn(3, 6))
    with pytest.raises(ConfigError):
        make_attention("se", 8)


def test_ke_cbam_finite_differences():
    torch.manual_seed(0)
    m = _randomize(KECBAM(4, 5, 2, kernel_size=3), seed=11, scale=0.4).double()
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    f = torch.randn(2, 5, dtype=torch.float64)
    target = torch.randn(2, 4, 3, 3, dtype=torch.float64)

    def loss():
        out, _ = m(x, f)
        return ((out - target) ** 2).sum()

    res = check_gradients(loss, list(m.parameters()), n_coords=80, eps=1e-3, seed=0)
    assert res.pass_rate(1e-2) >= 0.95, res.rel_error
