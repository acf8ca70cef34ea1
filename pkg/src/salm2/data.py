"""Fixation dataset layout, preprocessing and the synthetic generator.

On-disk layout::

    root/<split>/images/<id>.png     RGB frame
    root/<split>/salmaps/<id>.png    8-bit grayscale saliency map (required)
    root/<split>/fixmaps/<id>.png    8-bit binary fixation mask (optional, >=128 is a fixation)
"""
from __future__ import annotations

import shutil
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ContractError
from .fileio import atomic_write_bytes, atomic_write_json

IMAGE_SIZE = 256
NORM_MEAN = 0.5
NORM_SCALE = 0.5
DEFAULT_SIGMA = 10.0
FIXATION_THRESHOLD = 128
# saturated colours, all far from the [0.3, 0.6] background range
OBJECT_COLORS = np.array([[1, 0, 0], [0, 0, 1], [1, 1, 0], [0, 0, 0], [1, 1, 1]], dtype=np.float32)


class DatasetError(RuntimeError):
    pass


@dataclass
class FrameSample:
    sample_id: str
    image: np.ndarray                  # [3, H, W] float32 in [0, 1]
    saliency_gt: np.ndarray            # [H, W] float32 in [0, 1]
    fixation: np.ndarray | None = None  # [H, W] bool

    @property
    def has_fixations(self) -> bool:
        return self.fixation is not None


@dataclass
class DatasetManifest:
    root: str
    split: str
    ids: list[str]
    has_fixations: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"root": self.root, "split": self.split, "ids": self.ids,
                "has_fixations": self.has_fixations, **self.extra}


# decoded modes accepted for frames; alpha is dropped, gray is never expanded
FRAME_MODES = ("RGB", "RGBA")


def read_frame(path) -> np.ndarray:
    """Decode a colour frame to H x W x 3 uint8; single-channel files are rejected."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in FRAME_MODES:
                raise DatasetError(f"{path}: expected a 3-channel colour image, got mode {im.mode}")
            return np.asarray(im.convert("RGB"))
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def _read_png(path: Path, mode: str) -> np.ndarray:
    if mode == "RGB":
        return read_frame(path)
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode))
    except Exception as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def scan_split(root, split: str) -> DatasetManifest:
    base = Path(root) / split
    img_dir, sal_dir, fix_dir = base / "images", base / "salmaps", base / "fixmaps"
    if not img_dir.is_dir():
        raise DatasetError(f"missing images directory {img_dir}")
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    missing = [i for i in ids if not (sal_dir / f"{i}.png").is_file()]
    if missing:
        raise DatasetError(f"missing saliency maps in {sal_dir} for ids: {', '.join(missing)}")
    has_fix = fix_dir.is_dir()
    if has_fix:
        missing = [i for i in ids if not (fix_dir / f"{i}.png").is_file()]
        if missing:
            raise DatasetError(f"missing fixation maps in {fix_dir} for ids: {', '.join(missing)}")
    return DatasetManifest(str(root), split, ids, has_fix)


class FixationDataset(Sequence):
    """Lazily decoded, id-sorted samples of one split."""

    def __init__(self, root, split: str = "train"):
        self.manifest = scan_split(root, split)
        self.base = Path(root) / split

    def __len__(self):
        return len(self.manifest.ids)

    @property
    def ids(self) -> list[str]:
        return list(self.manifest.ids)

    @property
    def has_fixations(self) -> bool:
        return self.manifest.has_fixations

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        sid = self.manifest.ids[index]
        image = _read_png(self.base / "images" / f"{sid}.png", "RGB")
        sal = _read_png(self.base / "salmaps" / f"{sid}.png", "L").astype(np.float32) / 255.0
        fix = None
        if self.has_fixations:
            fix = _read_png(self.base / "fixmaps" / f"{sid}.png", "L") >= FIXATION_THRESHOLD
        return FrameSample(sid, image.transpose(2, 0, 1).astype(np.float32) / 255.0, sal, fix)


def load_dataset(root, split: str = "train") -> FixationDataset:
    return FixationDataset(root, split)


# ------------------------------------------------------------ preprocess


def _to_chw_float(image) -> torch.Tensor:
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise ContractError(f"expected an RGB image, got mode {image.mode}")
        image = np.asarray(image)
    if isinstance(image, torch.Tensor):
        t = image.detach().float()
        if t.dim() != 3 or t.shape[0] != 3:
            raise ContractError(f"expected a [3, H, W] tensor, got {tuple(t.shape)}")
        return t
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ContractError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def resize_map(x: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear, antialiased resize of a ``[..., H, W]`` tensor to ``size`` x ``size``."""
    if tuple(x.shape[-2:]) == (size, size):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    out = F.interpolate(flat, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out.reshape(*lead, size, size)


def preprocess(image, size: int = IMAGE_SIZE) -> torch.Tensor:
    """H x W x 3 frame (uint8, or float in [0, 1]) -> standardized ``[3, size, size]`` tensor."""
    x = resize_map(_to_chw_float(image), size)
    return (x - NORM_MEAN) / NORM_SCALE


def standardize(image_chw: np.ndarray | torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Same as :func:`preprocess` for a ``[3, H, W]`` array in [0, 1]."""
    return preprocess(torch.as_tensor(np.asarray(image_chw, dtype=np.float32)), size)


def resize_fixations(mask: np.ndarray, size: int) -> np.ndarray:
    """Move each fixated pixel to its scaled location; never drops a fixation."""
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask.astype(bool)
    out = np.zeros((size, size), dtype=bool)
    rows, cols = np.nonzero(mask)
    out[np.minimum(rows * size // h, size - 1), np.minimum(cols * size // w, size - 1)] = True
    return out


def sample_targets(sample: FrameSample, size: int = IMAGE_SIZE):
    """(standardized image, saliency at model size, fixations at model size or None)."""
    image = standardize(sample.image, size)
    sal = resize_map(torch.from_numpy(sample.saliency_gt), size).clamp(0, 1)
    fix = None if sample.fixation is None else resize_fixations(sample.fixation, size)
    return image, sal, fix


# ------------------------------------------------------------- synthesis


def blur_fixations(fixation: np.ndarray, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian-blurred fixation mask, max-normalized to [0, 1]."""
    mask = np.asarray(fixation).astype(np.float64)
    if not mask.any():
        raise ContractError("cannot blur an empty fixation mask")
    sal = gaussian_filter(mask, sigma=sigma, mode="constant")
    return sal / sal.max()


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(3, 4, 4)).astype(np.float32)
    t = F.interpolate(torch.from_numpy(coarse)[None], size=(size, size), mode="bicubic",
                      align_corners=False)[0]
    return t.clamp(0, 1).numpy()


def synthesize_frame(rng: np.random.Generator, size: int = IMAGE_SIZE, sigma: float = DEFAULT_SIGMA):
    """One (image [3,H,W], fixation mask, saliency map, blob centers) tuple."""
    image = _smooth_background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    n_blobs = int(rng.integers(1, 4))
    centers = []
    margin = size // 8
    while len(centers) < n_blobs:
        c = rng.integers(margin, size - margin, size=2)
        if all(np.hypot(*(c - p)) > size / 5 for p in centers):
            centers.append(c)
    for cy, cx in centers:
        radius = rng.uniform(size / 24, size / 12)
        color = OBJECT_COLORS[rng.integers(len(OBJECT_COLORS))]
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2
        image[:, disc] = color[:, None]
    fixation = np.zeros((size, size), dtype=bool)
    picks = rng.integers(0, n_blobs, size=3)
    for k in picks:
        cy, cx = centers[k]
        fixation[cy, cx] = True
    sal = blur_fixations(fixation, sigma)
    return image, fixation, sal, np.array(centers)


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    import io
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def generate_synthetic(n: int, seed: int, out_root, split: str = "train", size: int = IMAGE_SIZE,
                       sigma: float = DEFAULT_SIGMA) -> DatasetManifest:
    """Write ``n`` deterministic frame/fixation/saliency triplets under ``out_root/split``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_root = Path(out_root)
    base = out_root / split
    for sub in ("images", "salmaps", "fixmaps"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    centers = {}
    for i in range(n):
        sid = f"{i:05d}"
        image, fix, sal, c = synthesize_frame(rng, size, sigma)
        atomic_write_bytes(base / "images" / f"{sid}.png", _png_bytes(to_uint8(image.transpose(1, 2, 0)), "RGB"))
        atomic_write_bytes(base / "salmaps" / f"{sid}.png", _png_bytes(to_uint8(sal), "L"))
        atomic_write_bytes(base / "fixmaps" / f"{sid}.png", _png_bytes(fix.astype(np.uint8) * 255, "L"))
        ids.append(sid)
        centers[sid] = c.tolist()
    manifest = DatasetManifest(str(out_root), split, ids, True,
                               {"generator": {"n": n, "seed": seed, "size": size, "sigma": sigma},
                                "blob_centers": centers})
    m = manifest.to_dict()
    m["root"] = "."
    atomic_write_json(out_root / "manifest.json", {"splits": {split: m}})
    return manifest


def drop_fixations(root, split: str = "train") -> None:
    """Remove a split's fixmaps directory (turns it into a fixation-absent dataset)."""
    shutil.rmtree(Path(root) / split / "fixmaps", ignore_errors=True)
