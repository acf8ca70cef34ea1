"""Top-down branch: frozen scene embedding and its projection onto the deepest feature grid."""
from __future__ import annotations

import logging
import os
import warnings
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AdapterUnavailableError, ConfigError, ContractError

log = logging.getLogger(__name__)

CLIP_WEIGHTS_ENV = "SALM2_CLIP_WEIGHTS"
# CLIP preprocessing constants (RGB)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class SemanticEncoder(nn.Module):
    """Frozen image -> unit-norm token ``[B, T]``. Subclasses implement ``_embed``."""

    provider = "base"

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def _embed(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            token = self._embed(image)
            if token.dim() != 2 or token.shape[1] != self.dim:
                raise ContractError(f"{self.provider} encoder produced {tuple(token.shape)}, expected [B, {self.dim}]")
            token = F.normalize(token.to(image.dtype), dim=1, eps=1e-12)
        return token.detach()


class StubEncoder(SemanticEncoder):
    """Seeded fixed random projection of the 16x16 average-pooled grayscale frame."""

    provider = "stub"

    def __init__(self, dim: int = 768, seed: int = 0, grid: int = 16):
        super().__init__(dim)
        self.seed = seed
        self.grid = grid
        g = torch.Generator().manual_seed(seed)
        proj = torch.randn(grid * grid, dim, generator=g, dtype=torch.float64) / grid
        self.register_buffer("projection", proj.float(), persistent=False)

    def _embed(self, image):
        gray = image.mean(1, keepdim=True)
        pooled = F.adaptive_avg_pool2d(gray, self.grid).flatten(1)
        return pooled @ self.projection.to(pooled.dtype)


class ClipAdapter(SemanticEncoder):
    """Pretrained CLIP image tower loaded from a TorchScript archive.

    Accepts the archives published with the original CLIP release (which
    expose ``encode_image`` and ``visual.input_resolution``) or any scripted
    module mapping ``[B, 3, R, R]`` CLIP-normalized frames to ``[B, T]``.
    Inputs arrive standardized with mean 0.5 / scale 0.5 and are re-normalized
    with the CLIP constants.
    """

    provider = "clip"

    def __init__(self, weights: str | os.PathLike, dim: int = 768, resolution: int | None = None):
        super().__init__(dim)
        path = Path(weights)
        if not path.is_file():
            raise AdapterUnavailableError(
                f"CLIP weights not found at {path}; pass a valid --clip-weights or use the stub encoder"
            )
        try:
            with warnings.catch_warnings():
                # released CLIP weights are TorchScript archives
                warnings.simplefilter("ignore", DeprecationWarning)
                net = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:  # torch raises several unrelated types here
            raise AdapterUnavailableError(
                f"could not load CLIP weights from {path} ({exc}); use the stub encoder instead"
            ) from exc
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.weights_path = str(path)
        if resolution is None:
            visual = getattr(net, "visual", None)
            resolution = int(getattr(visual, "input_resolution", 224)) if visual is not None else 224
        self.resolution = resolution
        self.register_buffer("mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(CLIP_STD).view(1, 3, 1, 1), persistent=False)

    def _embed(self, image):
        x = image.float() * 0.5 + 0.5
        x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bicubic", align_corners=False)
        x = (x - self.mean) / self.std
        if hasattr(self.net, "encode_image"):
            out = self.net.encode_image(x)
        else:
            out = self.net(x)
        return out.float()


def make_encoder(provider: str = "stub", dim: int = 768, seed: int = 0,
                 clip_weights: str | os.PathLike | None = None) -> SemanticEncoder:
    """Build the requested provider; ``clip`` falls back to ``$SALM2_CLIP_WEIGHTS``."""
    if provider == "stub":
        return StubEncoder(dim, seed=seed)
    if provider == "clip":
        weights = clip_weights or os.environ.get(CLIP_WEIGHTS_ENV)
        if not weights:
            raise AdapterUnavailableError(
                f"no CLIP weights given (--clip-weights or ${CLIP_WEIGHTS_ENV}); use the stub encoder instead"
            )
        return ClipAdapter(weights, dim=dim)
    raise ConfigError(f"unknown semantic provider {provider!r}")


def select_provider(clip_weights: str | None) -> tuple[str, str | None]:
    """Pick ``clip`` when weights are configured, else ``stub`` with a logged notice."""
    weights = clip_weights or os.environ.get(CLIP_WEIGHTS_ENV)
    if weights:
        return "clip", weights
    log.info("no CLIP weights configured; using the deterministic stub semantic encoder")
    return "stub", None


def encode_semantics(image: torch.Tensor, encoder: SemanticEncoder) -> torch.Tensor:
    return encoder(image)


class SemanticProjector(nn.Module):
    """Fold ``[B, T]`` into ``[B, T/N1, H1, W1]`` row-major, then a 1x1 conv to C channels."""

    def __init__(self, token_dim: int, out_channels: int, grid: tuple[int, int]):
        super().__init__()
        h1, w1 = grid
        n1 = h1 * w1
        if token_dim % n1:
            raise ConfigError(f"token width {token_dim} not divisible by semantic grid {h1}x{w1}={n1}")
        self.token_dim = token_dim
        self.grid = (h1, w1)
        self.in_channels = token_dim // n1
        self.conv = nn.Conv2d(self.in_channels, out_channels, 1)

    def forward(self, token):
        if token.dim() != 2 or token.shape[1] != self.token_dim:
            raise ContractError(f"expected token [B, {self.token_dim}], got {tuple(token.shape)}")
        x = token.reshape(token.shape[0], self.in_channels, *self.grid)
        return self.conv(x)


def project_semantics(token, projector: SemanticProjector):
    return projector(token)
