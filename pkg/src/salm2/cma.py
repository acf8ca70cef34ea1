"""Cross-modal channel attention: semantic channels query image channels."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError


def pool_keys(img: torch.Tensor) -> torch.Tensor:
    """Bring the image feature onto the semantic grid (2x2 average)."""
    return F.avg_pool2d(img, 2)


def _check(sem, img):
    if sem.dim() != 4 or img.dim() != 4:
        raise ContractError(f"expected 4-D features, got {tuple(sem.shape)} and {tuple(img.shape)}")
    if sem.shape[:2] != img.shape[:2]:
        raise ContractError(f"batch/channel mismatch: semantic {tuple(sem.shape)} vs image {tuple(img.shape)}")
    h1, w1 = sem.shape[-2:]
    h2, w2 = img.shape[-2:]
    if (h2, w2) != (2 * h1, 2 * w1):
        raise ContractError(f"image grid {h2}x{w2} must be twice the semantic grid {h1}x{w1}")


def channel_scores(sem, img):
    """``M[b, i, j] = Q_i . K_j`` with Q from ``sem`` and K from pooled ``img``."""
    _check(sem, img)
    B, C = sem.shape[:2]
    q = sem.reshape(B, C, -1)
    k = pool_keys(img).reshape(B, C, -1).transpose(1, 2)
    return torch.bmm(q, k)


def normalize_affinity(scores: torch.Tensor) -> torch.Tensor:
    """Turn scores ``M[i, j]`` into ``S[j, i] = s_ji``, each row summing to one over i.

    Softmax runs over the i axis of every column j, shifted by the column max.
    """
    shifted = scores - scores.amax(dim=-2, keepdim=True)
    e = torch.exp(shifted)
    s = e / e.sum(dim=-2, keepdim=True)
    return s.transpose(-1, -2)


def channel_affinity(sem, img):
    return normalize_affinity(channel_scores(sem, img))


class CrossModalAttention(nn.Module):
    """``out_j = gamma * sum_i s_ji V_i + img_j`` with a single scalar ``gamma`` starting at 0."""

    def __init__(self):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, sem, img):
        affinity = channel_affinity(sem, img)
        B, C, H, W = img.shape
        fused = torch.bmm(affinity, img.reshape(B, C, H * W)).reshape(B, C, H, W)
        return self.gamma * fused + img


def cma_fuse(sem, img, params: CrossModalAttention):
    return params(sem, img)
