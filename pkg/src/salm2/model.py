"""Full network, parameter/FLOP audit and the portable checkpoint archive."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .cma import CrossModalAttention
from .errors import CheckpointVersionError, ConfigError, ContractError, CorruptCheckpointError
from .fileio import atomic_write_bytes
from .semantic import SemanticProjector, make_encoder

FORMAT_VERSION = 1
SCAN_MACS_PER_STATE = 4

# reference budget of the published model
REFERENCE_BACKBONE_PARAMS = 75_900
REFERENCE_TOTAL_PARAMS = 80_000
REFERENCE_FLOPS_G = {256: 4.45, 512: 4.72}


@dataclass
class ModelConfig:
    channel_ladder: tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    stem_stages: int = 3
    scpm_downsample: tuple[bool, ...] = (True, True, False)
    input_size: int = 256
    semantic_dim: int = 768
    state_size: int = 8
    expand: int = 2
    conv_kernel: int = 4
    branch_split: str | list = "halving"
    skip_scale_init: float = 1.0
    semantic_provider: str = "stub"
    seed: int = 0

    def __post_init__(self):
        self.channel_ladder = tuple(int(c) for c in self.channel_ladder)
        self.scpm_downsample = tuple(bool(d) for d in self.scpm_downsample)
        if not isinstance(self.branch_split, str):
            self.branch_split = tuple(tuple(int(c) for c in w) for w in self.branch_split)
        elif self.branch_split != "halving":
            raise ConfigError(f"branch_split must be 'halving' or explicit widths, got {self.branch_split!r}")
        n_scpm = len(self.channel_ladder) - self.stem_stages
        if self.stem_stages < 1 or n_scpm < 1:
            raise ConfigError("ladder needs at least one stem stage and one SCPM stage")
        if len(self.scpm_downsample) != n_scpm:
            raise ConfigError(f"{n_scpm} SCPM stages but {len(self.scpm_downsample)} downsample flags")
        factor = 2 ** self.n_downsamples
        if self.input_size % factor:
            raise ConfigError(f"input size {self.input_size} not divisible by {factor}")
        if self.deepest_size % 2:
            raise ConfigError(f"deepest grid {self.deepest_size} must be even for the semantic grid")
        n1 = self.semantic_grid ** 2
        if self.semantic_dim % n1:
            raise ConfigError(f"semantic width {self.semantic_dim} not divisible by N1={n1}")

    @property
    def n_downsamples(self) -> int:
        return self.stem_stages + sum(self.scpm_downsample)

    @property
    def deepest_size(self) -> int:
        return self.input_size // 2 ** self.n_downsamples

    @property
    def semantic_grid(self) -> int:
        return self.deepest_size // 2

    def backbone_config(self) -> BackboneConfig:
        scpm = self.channel_ladder[self.stem_stages:]
        if self.branch_split == "halving":
            widths = None
        else:
            widths = self.branch_split
        return BackboneConfig(
            stem_channels=self.channel_ladder[: self.stem_stages],
            scpm_channels=scpm,
            scpm_downsample=self.scpm_downsample,
            d_state=self.state_size,
            expand=self.expand,
            d_conv=self.conv_kernel,
            skip_scale_init=self.skip_scale_init,
            branch_widths=widths,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_ladder"] = list(self.channel_ladder)
        d["scpm_downsample"] = list(self.scpm_downsample)
        if not isinstance(self.branch_split, str):
            d["branch_split"] = [list(w) for w in self.branch_split]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SalM2(nn.Module):
    """Image -> saliency map in (0, 1), with the semantic branch fused at the deepest level."""

    def __init__(self, config: ModelConfig | None = None, clip_weights=None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.backbone = Backbone(cfg.backbone_config())
            g = cfg.semantic_grid
            self.projector = SemanticProjector(cfg.semantic_dim, self.backbone.deepest_channels, (g, g))
            self.cma = CrossModalAttention()
        self.encoder = make_encoder(cfg.semantic_provider, cfg.semantic_dim, seed=cfg.seed,
                                    clip_weights=clip_weights)

    def _check_input(self, image):
        size = self.config.input_size
        if image.dim() != 4 or image.shape[1] != 3:
            raise ContractError(f"expected [B, 3, {size}, {size}] image batch, got {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != (size, size):
            raise ContractError(
                f"model expects {size}x{size} input, got {image.shape[-2]}x{image.shape[-1]}"
            )

    def logits(self, image, semantic: bool = True):
        self._check_input(image)
        deepest, skips = self.backbone.encode(image)
        if semantic:
            token = self.encoder(image)
            sem = self.projector(token)
            deepest = self.cma(sem, deepest)
        return self.backbone.decode(deepest, skips)

    def forward(self, image, semantic: bool = True):
        return torch.sigmoid(self.logits(image, semantic=semantic))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def count_trainable_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def param_breakdown(model: SalM2) -> dict[str, int]:
    bb = model.backbone
    parts = {
        "stem": count_trainable_params(bb.stem),
        "scpm_stages": count_trainable_params(bb.stages),
        "skip_attention": count_trainable_params(bb.skip_attention),
        "decoder": count_trainable_params(bb.decoder) - count_trainable_params(bb.skip_attention),
        "projector": count_trainable_params(model.projector),
        "cma": count_trainable_params(model.cma),
        "semantic_encoder": count_trainable_params(model.encoder),
    }
    parts["total"] = count_trainable_params(model)
    return parts


# ---------------------------------------------------------------- FLOPs


def conv2d_macs(in_channels, out_channels, kernel, out_h, out_w, groups=1):
    return out_h * out_w * out_channels * (in_channels // groups) * kernel * kernel


def mamba_macs(d, L, d_state, expand, d_conv, dt_rank=None):
    E = expand * d
    R = dt_rank or math.ceil(d / 16)
    return L * (
        d * 2 * E                            # in_proj
        + E * d_conv                         # causal depthwise conv
        + E * (R + 2 * d_state)              # x_proj
        + R * E                              # dt_proj
        + SCAN_MACS_PER_STATE * E * d_state  # scan
        + E * d                              # out_proj
    )


def estimate_macs(model: SalM2, input_size: int | None = None) -> dict[str, int]:
    """Analytic multiply-accumulate count per component for one image.

    Counts convolutions, pointwise maps, scan steps and the attention
    matmuls; norms, activations and resampling are left out.
    """
    cfg = model.config
    size = input_size or cfg.input_size
    if size % (2 ** cfg.n_downsamples):
        raise ConfigError(f"input size {size} not divisible by {2 ** cfg.n_downsamples}")
    bcfg = model.backbone.cfg
    out = {"stem": 0, "scpm_stages": 0, "skip_attention": 0, "decoder": 0, "projector": 0, "cma": 0}

    s = size
    c_prev = bcfg.in_channels
    sizes, chans = [], []
    for c in bcfg.stem_channels:
        s //= 2
        out["stem"] += conv2d_macs(c_prev, c, 3, s, s)
        sizes.append(s)
        chans.append(c)
        c_prev = c
    for scfg in bcfg.scpm_configs():
        if scfg.downsample:
            s //= 2
        for c in scfg.branch_out_channels:
            out["scpm_stages"] += conv2d_macs(c_prev, c, 3, s, s)
            out["scpm_stages"] += mamba_macs(c, s * s, scfg.d_state, scfg.expand, scfg.d_conv)
        sizes.append(s)
        chans.append(scfg.out_channels)
        c_prev = scfg.out_channels

    deepest = s
    skip_sizes, skip_chans = sizes[:-1], chans[:-1]
    x_c, x_s = chans[-1], deepest
    att = model.backbone.skip_attention
    k_sp = att.spatial.kernel_size[0]
    k_ch = att.channel.kernel_size[0]
    for ss, sc in zip(reversed(skip_sizes), reversed(skip_chans)):
        out["decoder"] += conv2d_macs(x_c, x_c, 3, x_s, x_s, groups=x_c) + conv2d_macs(x_c, sc, 1, x_s, x_s)
        out["skip_attention"] += conv2d_macs(2, 1, k_sp, ss, ss) + sc * k_ch
        x_c, x_s = sc, ss
    out["decoder"] += conv2d_macs(x_c, 1, 1, x_s, x_s)

    n1 = (deepest // 2) ** 2
    n2 = deepest * deepest
    c_deep = chans[-1]
    out["projector"] = cfg.semantic_dim * c_deep
    out["cma"] = c_deep * c_deep * (n1 + n2)
    out["total"] = sum(out.values())
    return out


def estimate_flops(model: SalM2, input_size: int | None = None) -> int:
    """FLOPs for one image, counted as 2 x MACs."""
    return 2 * estimate_macs(model, input_size)["total"]


# ---------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    metrics: dict = field(default_factory=dict)


def _checkpoint_bytes(model: SalM2, step: int, metrics: dict | None) -> bytes:
    index = []
    blobs = []
    offset = 0
    for name, p in model.named_trainable_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        data = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(p.shape), "dtype": "float32",
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "parameters": index,
        "step": int(step),
        "metrics": metrics or {},
        "weights_nbytes": offset,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for arcname, payload in (("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()),
                                 ("weights.bin", b"".join(blobs))):
            info = zipfile.ZipInfo(arcname, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)
    return buf.getvalue()


def save_checkpoint(model: SalM2, path, step: int = 0, metrics: dict | None = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, _checkpoint_bytes(model, step, metrics))
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
            weights = zf.read("weights.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint archive ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version!r}, this build reads {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise CheckpointVersionError(f"{path}: incompatible model config ({exc})") from exc
    expected = manifest.get("weights_nbytes", sum(e["nbytes"] for e in manifest["parameters"]))
    if len(weights) != expected:
        raise CorruptCheckpointError(f"{path}: weights.bin has {len(weights)} bytes, manifest declares {expected}")
    tensors = {}
    for entry in manifest["parameters"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(weights) or n != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise CorruptCheckpointError(f"{path}: blob for {entry['name']} out of range or mis-sized")
        tensors[entry["name"]] = np.frombuffer(weights, dtype="<f4", count=n // 4, offset=start).reshape(entry["shape"])
    return Checkpoint(config, tensors, manifest.get("step", 0), manifest.get("metrics", {}))


def load_checkpoint(path, clip_weights=None) -> SalM2:
    ckpt = read_checkpoint(path)
    model = SalM2(ckpt.config, clip_weights=clip_weights)
    own = dict(model.named_trainable_parameters())
    missing = sorted(set(own) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(own))
    if missing or extra:
        raise CheckpointVersionError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, p in own.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointVersionError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.astype(np.float32)))
    model.eval()
    return model
