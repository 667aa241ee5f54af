"""Encoder/decoder building blocks shared by every architecture."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def _check_rank4(x, name="x"):
    if x.dim() != 4:
        raise ValueError(f"{name} must be rank-4 (B, C, H, W), got shape {tuple(x.shape)}")


class DoubleConv(nn.Module):
    """(conv3x3 -> BN -> ReLU) x 2 with size-preserving padding."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ValueError("channel counts must be positive")
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        _check_rank4(x)
        if x.shape[-1] < 3 or x.shape[-2] < 3:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} smaller than the 3x3 kernel")
        return self.block(x)


class Down(nn.Module):
    """2x2 max-pool; rejects odd spatial sizes instead of silently flooring."""

    def forward(self, x):
        _check_rank4(x)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"down_stage needs even spatial dims, got {h}x{w}")
        return F.max_pool2d(x, 2)


def bicubic_upsample2x(x):
    """Bicubic x2 upsampling with reflect edge handling.

    The input is reflect-padded by two pixels (the bicubic support), upsampled,
    and the padded frame is cropped away. With ``align_corners=False`` the crop
    lands exactly on the unpadded sampling grid, so interior values equal plain
    bicubic interpolation and border taps read mirrored pixels instead of
    clamped ones.
    """
    _check_rank4(x)
    pad = 2 if min(x.shape[-2:]) > 2 else min(x.shape[-2:]) - 1
    if pad > 0:
        xp = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    else:
        xp = x
    up = F.interpolate(xp, scale_factor=2, mode="bicubic", align_corners=False)
    if pad > 0:
        up = up[..., 2 * pad:-2 * pad, 2 * pad:-2 * pad]
    return up


class UpConv(nn.Module):
    """Bicubic x2 upsample followed by conv3x3 -> BN -> ReLU channel reduction."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.conv(bicubic_upsample2x(x))


class UpStage(nn.Module):
    """Decoder stage: upsample ``x``, concatenate skip(s), double conv.

    ``skip_channels`` is the total channel count of all skips concatenated at
    this stage (``C`` for single-path nets, ``2C`` when both encoders feed the
    decoder).
    """

    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.up = UpConv(in_channels, out_channels)
        self.conv = DoubleConv(out_channels + skip_channels, out_channels)

    def forward(self, x, *skips):
        up = self.up(x)
        for s in skips:
            if s.shape[-2:] != up.shape[-2:]:
                raise ValueError(
                    f"skip spatial dims {tuple(s.shape[-2:])} do not match upsampled {tuple(up.shape[-2:])}")
        return self.conv(torch.cat([up, *skips], dim=1))


class AttentionGate(nn.Module):
    """Additive attention gate.

    alpha = sigmoid(psi(relu(W_x x + W_g g + b_g)) + b_psi), output x * alpha.
    ``W_x`` carries no bias; ``b_g`` lives on the ``W_g`` map. ``g`` is
    bilinearly resampled to the grid of ``x`` when the two differ.
    """

    def __init__(self, x_channels, g_channels, inter_channels=None):
        super().__init__()
        inter_channels = inter_channels or max(x_channels // 2, 1)
        self.W_x = nn.Conv2d(x_channels, inter_channels, kernel_size=1, bias=False)
        self.W_g = nn.Conv2d(g_channels, inter_channels, kernel_size=1, bias=True)
        self.psi = nn.Conv2d(inter_channels, 1, kernel_size=1, bias=True)

    def coefficients(self, x, g):
        _check_rank4(x)
        _check_rank4(g, "g")
        if x.shape[0] != g.shape[0]:
            raise ValueError("batch size mismatch between x and g")
        if g.shape[-2:] != x.shape[-2:]:
            g = F.interpolate(g, size=x.shape[-2:], mode="bilinear", align_corners=False)
        q = F.relu(self.W_x(x) + self.W_g(g))
        return torch.sigmoid(self.psi(q))

    def forward(self, x, g):
        return x * self.coefficients(x, g)


class CrossAttentionSkip(nn.Module):
    """Single-head cross-attention gate on a skip connection.

    Queries come from the deeper (coarser) decoder features, keys and values
    from the skip. Attention runs on a token grid equal to the deeper
    feature's grid, capped at ``max_grid`` per side by average pooling so the
    top stages stay tractable. The attended values are projected, passed
    through a sigmoid, bilinearly resampled to the skip's resolution and
    multiplied into the skip per pixel and per channel.
    """

    def __init__(self, skip_channels, deeper_channels, heads=1, max_grid=16):
        super().__init__()
        # local import keeps blocks importable without the fusion module
        from .fusion import MultiHeadAttention

        self.max_grid = max_grid
        self.q_proj = nn.Conv2d(deeper_channels, skip_channels, kernel_size=1)
        self.kv_proj = nn.Conv2d(skip_channels, skip_channels, kernel_size=1)
        self.attn = MultiHeadAttention(skip_channels, heads)
        self.gate = nn.Conv2d(skip_channels, skip_channels, kernel_size=1)

    def token_grid(self, deeper):
        h, w = deeper.shape[-2:]
        return min(h, self.max_grid), min(w, self.max_grid)

    def gate_values(self, skip, deeper):
        _check_rank4(skip, "skip")
        _check_rank4(deeper, "deeper")
        if skip.shape[0] != deeper.shape[0]:
            raise ValueError("batch size mismatch between skip and deeper")
        if self.q_proj.in_channels != deeper.shape[1] or self.kv_proj.in_channels != skip.shape[1]:
            raise ValueError("channel counts do not match the module's projections")
        grid = self.token_grid(deeper)
        q = self.q_proj(F.adaptive_avg_pool2d(deeper, grid))
        kv = self.kv_proj(F.adaptive_avg_pool2d(skip, grid))
        b, c, h, w = q.shape
        q_tok = q.flatten(2).transpose(1, 2)
        kv_tok = kv.flatten(2).transpose(1, 2)
        out = self.attn(q_tok, kv_tok, kv_tok)
        out = out.transpose(1, 2).reshape(b, c, h, w)
        gate = torch.sigmoid(self.gate(out))
        if gate.shape[-2:] != skip.shape[-2:]:
            gate = F.interpolate(gate, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return gate

    def forward(self, skip, deeper):
        return skip * self.gate_values(skip, deeper)


def init_weights(module):
    """He-uniform weights, zero biases, unit/zero norm affine parameters."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return module

