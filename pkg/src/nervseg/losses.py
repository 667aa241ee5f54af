"""Positively weighted BCE plus Sobel edge loss."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    edge: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {"bce": self.bce.item(), "edge": self.edge.item(), "total": self.total.item()}


class SobelBank:
    """Fixed, untrained 3x3 edge kernels (horizontal and vertical Sobel by default)."""

    def __init__(self, kernels=(SOBEL_X, SOBEL_Y)):
        self.kernels = torch.stack([torch.as_tensor(k, dtype=torch.float64) for k in kernels])
        if self.kernels.shape[1:] != (3, 3):
            raise ValueError("Sobel kernels must be 3x3")

    def __len__(self):
        return self.kernels.shape[0]

    def apply(self, x):
        """(B, 1, H, W) -> (B, K, H, W) edge responses, reflect padded."""
        w = self.kernels.to(dtype=x.dtype, device=x.device).unsqueeze(1)
        return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), w)


DEFAULT_BANK = SobelBank()


def positive_weight(masks):
    """Background / foreground pixel ratio over an iterable of masks."""
    fg = 0
    total = 0
    for m in masks:
        m = torch.as_tensor(m)
        fg += int((m > 0).sum())
        total += m.numel()
    if fg == 0:
        raise ZeroDivisionError("training masks contain no foreground pixels; positive weight is undefined")
    return (total - fg) / fg


def _check_target(logits, target):
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target must be binary")


def weighted_bce(logits, target, w_p):
    """-(1/N) sum[w_p y log p + (1-y) log(1-p)] with p = sigmoid(logits).

    Uses log(sigmoid(x)) = -softplus(-x) and log(1 - sigmoid(x)) = -softplus(x).
    """
    _check_target(logits, target)
    if w_p < 0:
        raise ValueError("w_p must be non-negative")
    target = target.to(logits.dtype)
    loss = w_p * target * F.softplus(-logits) + (1.0 - target) * F.softplus(logits)
    return loss.mean()


def edge_loss(probs, target, bank=DEFAULT_BANK, norm="pixel"):
    """Mean edge-response discrepancy between prediction and label.

    ``norm="pixel"`` averages |E_k(y) - E_k(p)| over classes, kernels and
    pixels. ``norm="image"`` takes the L2 norm of each image's edge-response
    difference per kernel, divides by the pixel count and averages over the
    batch and kernels.
    """
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    target = target.to(probs.dtype)
    b, c, h, w = probs.shape
    diff = bank.apply(target.reshape(b * c, 1, h, w)) - bank.apply(probs.reshape(b * c, 1, h, w))
    if norm == "pixel":
        return diff.abs().mean()
    if norm == "image":
        per_image = diff.flatten(2).norm(dim=2)
        return per_image.mean() / (h * w)
    raise ValueError(f"unknown edge norm {norm!r}")


def total_loss(logits, target, w_p, bank=DEFAULT_BANK, edge_norm="pixel"):
    bce = weighted_bce(logits, target, w_p)
    edge = edge_loss(torch.sigmoid(logits), target, bank, edge_norm)
    return LossBreakdown(bce=bce, edge=edge, total=bce + edge)
