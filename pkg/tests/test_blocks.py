import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from nervseg.blocks import (
    AttentionGate,
    CrossAttentionSkip,
    DoubleConv,
    Down,
    UpStage,
    bicubic_upsample2x,
    init_weights,
)

from conftest import autograd_grad, central_diff_grad, rel_error


def _zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestDoubleConv:
    @pytest.mark.parametrize("shape,out", [((1, 3, 256, 256), 64), ((2, 64, 128, 128), 128)])
    def test_shape(self, shape, out):
        # big shapes: only the shape algebra matters, so run on meta tensors
        block = DoubleConv(shape[1], out).to("meta")
        assert block(torch.empty(shape, device="meta")).shape == (shape[0], out, *shape[2:])

    def test_zero_input_zero_bias_gives_zero(self):
        block = init_weights(DoubleConv(3, 8))
        out = block(torch.zeros(2, 3, 16, 16))
        assert torch.equal(out, torch.zeros_like(out))

    def test_rejects_tiny_spatial(self):
        with pytest.raises(ValueError):
            DoubleConv(3, 4)(torch.zeros(1, 3, 2, 8))

    def test_output_finite(self):
        torch.manual_seed(0)
        block = init_weights(DoubleConv(3, 8))
        assert torch.isfinite(block(torch.randn(2, 3, 16, 16) * 100)).all()


class TestDown:
    def test_shape(self):
        assert Down()(torch.zeros(1, 64, 256, 256)).shape == (1, 64, 128, 128)

    def test_window_max(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
        assert Down()(x).item() == 4.0

    def test_constant(self):
        x = torch.full((1, 2, 8, 8), 3.5)
        assert torch.equal(Down()(x), torch.full((1, 2, 4, 4), 3.5))

    def test_odd_rejected(self):
        with pytest.raises(ValueError):
            Down()(torch.zeros(1, 1, 5, 4))


class TestUpsampling:
    @pytest.mark.parametrize("value", [0.0, 1.0, -3.25, 117.0])
    def test_bicubic_preserves_constants(self, value):
        x = torch.full((1, 3, 8, 8), value)
        up = bicubic_upsample2x(x)
        assert up.shape == (1, 3, 16, 16)
        assert (up - value).abs().max() < 1e-5

    def test_interior_matches_plain_bicubic(self):
        torch.manual_seed(0)
        x = torch.randn(1, 1, 12, 12, dtype=torch.float64)
        plain = nn.functional.interpolate(x, scale_factor=2, mode="bicubic", align_corners=False)
        ours = bicubic_upsample2x(x)
        # taps reach 2 source pixels out, so 4 output pixels per side differ
        assert torch.allclose(ours[..., 4:-4, 4:-4], plain[..., 4:-4, 4:-4], atol=1e-12)

    def test_reflect_boundary(self):
        # mirrored and clamped border taps disagree on a ramp
        x = torch.arange(6, dtype=torch.float64).view(1, 1, 1, 6).repeat(1, 1, 6, 1)
        up = bicubic_upsample2x(x)
        plain = nn.functional.interpolate(x, scale_factor=2, mode="bicubic", align_corners=False)
        assert not torch.allclose(up[..., 0], plain[..., 0])

    @pytest.mark.parametrize("x_shape,skip_shape,out", [
        ((1, 1024, 16, 16), (1, 512, 32, 32), 512),
        ((1, 128, 64, 64), (1, 64, 128, 128), 64),
    ])
    def test_up_stage_shape(self, x_shape, skip_shape, out):
        stage = UpStage(x_shape[1], skip_shape[1], out).to("meta")
        y = stage(torch.empty(x_shape, device="meta"), torch.empty(skip_shape, device="meta"))
        assert y.shape == (skip_shape[0], out, *skip_shape[2:])

    def test_up_stage_mismatch(self):
        stage = UpStage(8, 4, 4)
        with pytest.raises(ValueError):
            stage(torch.zeros(1, 8, 4, 4), torch.zeros(1, 4, 10, 10))


class TestAttentionGate:
    def test_zero_params_half(self):
        gate = AttentionGate(4, 6)
        _zero_params(gate)
        x = torch.randn(2, 4, 8, 8)
        out = gate(x, torch.randn(2, 6, 4, 4))
        assert torch.allclose(out, 0.5 * x)

    def test_zero_input(self):
        torch.manual_seed(0)
        gate = init_weights(AttentionGate(4, 4))
        out = gate(torch.zeros(1, 4, 8, 8), torch.randn(1, 4, 8, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_scalar_oracle(self):
        x_val, g_val = 1.5, -0.7
        w_x, w_g, b_g, psi, b_psi = 0.8, 1.3, 0.2, -0.9, 0.1
        gate = AttentionGate(1, 1, inter_channels=1).double()
        with torch.no_grad():
            gate.W_x.weight.fill_(w_x)
            gate.W_g.weight.fill_(w_g)
            gate.W_g.bias.fill_(b_g)
            gate.psi.weight.fill_(psi)
            gate.psi.bias.fill_(b_psi)
        out = gate(torch.full((1, 1, 1, 1), x_val, dtype=torch.float64),
                   torch.full((1, 1, 1, 1), g_val, dtype=torch.float64))
        q = max(0.0, w_x * x_val + w_g * g_val + b_g)
        alpha = 1.0 / (1.0 + math.exp(-(psi * q + b_psi)))
        assert abs(out.item() - x_val * alpha) < 1e-6

    def test_coefficients_in_open_interval(self):
        torch.manual_seed(1)
        gate = init_weights(AttentionGate(8, 16))
        a = gate.coefficients(torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8))
        assert a.shape == (2, 1, 16, 16)
        assert ((a > 0) & (a < 1)).all()

    def test_gradients(self):
        torch.manual_seed(2)
        gate = init_weights(AttentionGate(2, 3)).double()
        g = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        x = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        f = lambda t: gate(t, g).sum()  # noqa: E731
        assert rel_error(autograd_grad(f, x), central_diff_grad(f, x)) < 1e-3
        params = dict(gate.named_parameters())
        for name in ("W_x.weight", "W_g.weight", "psi.weight", "psi.bias"):
            def f_p(t, name=name):
                return functional_call(gate, {**params, name: t}, (x, g)).sum()

            w = params[name].detach()
            assert rel_error(autograd_grad(f_p, w), central_diff_grad(f_p, w)) < 1e-3, name


def _bilinear_1x2_to_2x4(v0, v1):
    # align_corners=False sampling positions -0.25, 0.25, 0.75, 1.25 clamp to [0, 1]
    row = [v0, 0.75 * v0 + 0.25 * v1, 0.25 * v0 + 0.75 * v1, v1]
    return [row, row]


class TestCrossAttentionSkip:
    def test_shape(self):
        torch.manual_seed(0)
        mod = init_weights(CrossAttentionSkip(64, 128))
        assert mod(torch.randn(1, 64, 32, 32), torch.randn(1, 128, 16, 16)).shape == (1, 64, 32, 32)

    def test_zero_skip(self):
        torch.manual_seed(0)
        mod = init_weights(CrossAttentionSkip(4, 8))
        out = mod(torch.zeros(1, 4, 8, 8), torch.randn(1, 8, 4, 4))
        assert torch.equal(out, torch.zeros_like(out))

    def test_gate_range(self):
        torch.manual_seed(3)
        mod = init_weights(CrossAttentionSkip(8, 16, max_grid=4))
        g = mod.gate_values(torch.randn(2, 8, 16, 16), torch.randn(2, 16, 8, 8))
        assert ((g > 0) & (g < 1)).all()

    def test_channel_mismatch(self):
        mod = CrossAttentionSkip(4, 8)
        with pytest.raises(ValueError):
            mod(torch.zeros(1, 5, 8, 8), torch.zeros(1, 8, 4, 4))

    def test_two_token_oracle(self):
        torch.manual_seed(5)
        c = 2
        mod = CrossAttentionSkip(c, 2 * c).double()
        for p in mod.parameters():
            nn.init.normal_(p, std=0.7)
        skip = torch.randn(1, c, 2, 4, dtype=torch.float64)
        deeper = torch.randn(1, 2 * c, 1, 2, dtype=torch.float64)
        out = mod(skip, deeper).detach().numpy()[0]

        P = {k: v.detach().numpy() for k, v in mod.named_parameters()}
        s, d = skip.numpy()[0], deeper.numpy()[0]
        # pooled skip tokens: mean of each 2x2 block
        kv_in = [s[:, :, 2 * t:2 * t + 2].mean(axis=(1, 2)) for t in range(2)]
        q_in = [d[:, 0, t] for t in range(2)]
        q_tok = [P["q_proj.weight"][:, :, 0, 0] @ q + P["q_proj.bias"] for q in q_in]
        kv_tok = [P["kv_proj.weight"][:, :, 0, 0] @ k + P["kv_proj.bias"] for k in kv_in]
        Q = [P["attn.W_q.weight"] @ q + P["attn.W_q.bias"] for q in q_tok]
        K = [P["attn.W_k.weight"] @ k + P["attn.W_k.bias"] for k in kv_tok]
        V = [P["attn.W_v.weight"] @ v + P["attn.W_v.bias"] for v in kv_tok]
        gates = []
        for qi in Q:
            scores = [float(qi @ kj) / math.sqrt(c) for kj in K]
            m = max(scores)
            e = [math.exp(x - m) for x in scores]
            w = [x / sum(e) for x in e]
            att = sum(wj * vj for wj, vj in zip(w, V))
            o = P["attn.W_o.weight"] @ att + P["attn.W_o.bias"]
            z = P["gate.weight"][:, :, 0, 0] @ o + P["gate.bias"]
            gates.append(1.0 / (1.0 + np.exp(-z)))
        expected = np.zeros_like(s)
        for ch in range(c):
            up = _bilinear_1x2_to_2x4(gates[0][ch], gates[1][ch])
            expected[ch] = s[ch] * np.array(up)
        np.testing.assert_allclose(out, expected, atol=1e-6)


class TestBlockGradients:
    def test_double_conv_input_and_weight(self):
        torch.manual_seed(7)
        block = init_weights(DoubleConv(2, 3)).double()
        x = torch.randn(2, 2, 6, 6, dtype=torch.float64)
        f = lambda t: block(t).pow(2).sum()  # noqa: E731
        assert rel_error(autograd_grad(f, x), central_diff_grad(f, x)) < 1e-3

    def test_up_stage_input(self):
        torch.manual_seed(8)
        stage = init_weights(UpStage(4, 2, 2)).double()
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        skip = torch.randn(2, 2, 8, 8, dtype=torch.float64)
        f = lambda t: stage(t, skip).pow(2).sum()  # noqa: E731
        assert rel_error(autograd_grad(f, x), central_diff_grad(f, x)) < 1e-3

    def test_cross_attention_skip_input(self):
        torch.manual_seed(9)
        mod = init_weights(CrossAttentionSkip(2, 4, max_grid=2)).double()
        skip = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        deeper = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        f = lambda t: mod(skip, t).sum()  # noqa: E731
        assert rel_error(autograd_grad(f, deeper), central_diff_grad(f, deeper)) < 1e-3
        g = lambda t: mod(t, deeper).sum()  # noqa: E731
        assert rel_error(autograd_grad(g, skip), central_diff_grad(g, skip)) < 1e-3
