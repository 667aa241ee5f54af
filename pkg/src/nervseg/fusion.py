"""Bottleneck fusion for dual-modality networks.

Three strategies share one contract: two per-modality bottleneck maps of
shape (B, C, h, w) go in, one fused map comes out. By default the fused map
has ``2C`` channels and feeds the bottleneck double conv directly; pass
``out_channels`` to append a 1x1 projection instead.

Tokens are spatial positions (h*w of them) with channels as features. No
positional encoding is added, so the cross-modal block is equivariant to a
permutation of the context tokens.

The co-learn weights are full spatial maps, one per fused channel. A
per-channel scalar variant would replace the 3x3 conv with a pooled MLP.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def scaled_dot_attention(q, k, v, return_weights=False):
    """softmax(q k^T / sqrt(d_k)) v over the last two dims.

    q: (..., Tq, d_k), k: (..., Tk, d_k), v: (..., Tk, d_v).
    """
    d_k = q.shape[-1]
    if d_k == 0 or k.shape[-1] != d_k:
        raise ValueError(f"query/key feature dims must match and be > 0, got {d_k} and {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys and values need equal token counts, got {k.shape[-2]} and {v.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim, heads=1):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise ValueError(f"heads={heads} must divide feature dim {dim}")
        self.dim = dim
        self.heads = heads
        self.W_q = nn.Linear(dim, dim)
        self.W_k = nn.Linear(dim, dim)
        self.W_v = nn.Linear(dim, dim)
        self.W_o = nn.Linear(dim, dim)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query, key, value):
        if query.shape[0] != key.shape[0] or key.shape[0] != value.shape[0]:
            raise ValueError("batch size mismatch between query and key/value sequences")
        if query.shape[-1] != self.dim or key.shape[-1] != self.dim or value.shape[-1] != self.dim:
            raise ValueError(f"token feature dim must be {self.dim}")
        q = self._split(self.W_q(query))
        k = self._split(self.W_k(key))
        v = self._split(self.W_v(value))
        out = scaled_dot_attention(q, k, v)
        b, _, t, _ = out.shape
        return self.W_o(out.transpose(1, 2).reshape(b, t, self.dim))


def flatten_tokens(x):
    """(B, C, h, w) -> (B, h*w, C)."""
    return x.flatten(2).transpose(1, 2)


def unflatten_tokens(seq, h, w):
    """(B, h*w, C) -> (B, C, h, w)."""
    b, t, c = seq.shape
    if t != h * w:
        raise ValueError(f"{t} tokens cannot fill a {h}x{w} grid")
    return seq.transpose(1, 2).reshape(b, c, h, w)


class CrossModalTransformerBlock(nn.Module):
    """Queries from the primary sequence, keys/values from the context.

    y1 = LN(primary + drop(MHA(primary, context, context)))
    y2 = LN(y1 + drop(FFN(y1)))

    FFN has two hidden layers of width ff_mult*d with ReLU after each.

    Dropout draws from the optional ``generator`` so training runs are
    reproducible without touching the global RNG; ``training`` is explicit.
    """

    def __init__(self, dim, heads=4, dropout_p=0.1, ff_mult=2):
        super().__init__()
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ff_1 = nn.Linear(dim, ff_mult * dim)
        self.ff_2 = nn.Linear(ff_mult * dim, ff_mult * dim)
        self.ff_3 = nn.Linear(ff_mult * dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout_p = dropout_p

    def _dropout(self, x, training, generator):
        if not training or self.dropout_p == 0.0:
            return x
        keep = 1.0 - self.dropout_p
        mask = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) < keep
        return x * mask / keep

    def forward(self, primary, context, training=None, generator=None):
        if primary.shape[0] != context.shape[0]:
            raise ValueError(
                f"primary and context batch sizes differ: {primary.shape[0]} vs {context.shape[0]}")
        training = self.training if training is None else training
        attn = self.attn(primary, context, context)
        y1 = self.norm1(primary + self._dropout(attn, training, generator))
        ff = self.ff_3(F.relu(self.ff_2(F.relu(self.ff_1(y1)))))
        return self.norm2(y1 + self._dropout(ff, training, generator))


def _check_pair(a, b):
    if a.dim() != 4 or a.shape != b.shape:
        raise ValueError(f"modality bottlenecks must share a rank-4 shape, got {tuple(a.shape)} and {tuple(b.shape)}")


class LateConcatFusion(nn.Module):
    def __init__(self, channels, out_channels=None):
        super().__init__()
        self.channels = channels
        self.proj = nn.Conv2d(2 * channels, out_channels, kernel_size=1) if out_channels else None

    def forward(self, jet, rgb):
        _check_pair(jet, rgb)
        fused = torch.cat([jet, rgb], dim=1)
        return self.proj(fused) if self.proj is not None else fused


class CoLearnFusion(nn.Module):
    """Learned spatial weight maps over the stacked modalities.

    A 3x3 conv over the concatenated features produces one sigmoid weight map
    per fused channel; the stacked features are scaled by those maps. Passing
    ``weights`` to ``forward`` bypasses the learned maps (used to pin the
    weighting in tests and ablations).
    """

    def __init__(self, channels, out_channels=None):
        super().__init__()
        self.channels = channels
        self.weight_conv = nn.Conv2d(2 * channels, 2 * channels, kernel_size=3, padding=1)
        self.proj = nn.Conv2d(2 * channels, out_channels, kernel_size=1) if out_channels else None

    def weight_maps(self, jet, rgb):
        return torch.sigmoid(self.weight_conv(torch.cat([jet, rgb], dim=1)))

    def forward(self, jet, rgb, weights=None):
        _check_pair(jet, rgb)
        stacked = torch.cat([jet, rgb], dim=1)
        if weights is None:
            weights = self.weight_maps(jet, rgb)
        elif isinstance(weights, tuple):
            w_jet, w_rgb = weights
            weights = torch.cat([torch.full_like(jet, float(w_jet)), torch.full_like(rgb, float(w_rgb))], dim=1)
        fused = stacked * weights
        return self.proj(fused) if self.proj is not None else fused


class DXMFusion(nn.Module):
    """Dual cross-modal transformer fusion.

    Two blocks run in opposite directions (jet attends to rgb, rgb attends
    to jet); both outputs are unflattened and concatenated along channels.
    """

    def __init__(self, channels, heads=4, dropout_p=0.1, out_channels=None, ff_mult=2):
        super().__init__()
        self.channels = channels
        self.block_ab = CrossModalTransformerBlock(channels, heads, dropout_p, ff_mult)
        self.block_ba = CrossModalTransformerBlock(channels, heads, dropout_p, ff_mult)
        self.proj = nn.Conv2d(2 * channels, out_channels, kernel_size=1) if out_channels else None

    def fused_tokens(self, jet, rgb, training=None, generator=None):
        _check_pair(jet, rgb)
        h, w = jet.shape[-2:]
        jet_seq, rgb_seq = flatten_tokens(jet), flatten_tokens(rgb)
        jet_out = self.block_ab(jet_seq, rgb_seq, training, generator)
        rgb_out = self.block_ba(rgb_seq, jet_seq, training, generator)
        return torch.cat([unflatten_tokens(jet_out, h, w), unflatten_tokens(rgb_out, h, w)], dim=1)

    def forward(self, jet, rgb, training=None, generator=None):
        fused = self.fused_tokens(jet, rgb, training, generator)
        return self.proj(fused) if self.proj is not None else fused
