"""BCE objective, the optimizer recipe, and deterministic train / validate loops."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import sample_targets
from .errors import ContractError, TrainingDivergedError
from .metrics import MetricConfig, MetricReport, cc, evaluate_all
from .model import SalM2

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    clamp_eps: float = 1e-7

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "weight_decay", "epochs", "batch_size", "clamp_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clamp_eps >= 1e-3:
            raise ValueError("clamp_eps must be < 1e-3")


def bce_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy over every pixel; predictions clamped to [eps, 1 - eps]."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if torch.isnan(pred).any() or torch.isnan(gt).any():
        raise ContractError("NaN in loss inputs")
    p = pred.clamp(eps, 1 - eps)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def make_optimizer(model: SalM2, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with decoupled decay; the fusion weight gamma is exempt from decay."""
    gamma = model.cma.gamma
    decayed = [p for p in model.trainable_parameters() if p is not gamma]
    return torch.optim.AdamW(
        [{"params": decayed}, {"params": [gamma], "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
    )


def stack_dataset(dataset, size: int):
    """Preprocess every sample once: images [N,3,S,S], saliency [N,1,S,S], fixations list, ids."""
    images, sals, fixes, ids = [], [], [], []
    for sample in dataset:
        img, sal, fix = sample_targets(sample, size)
        images.append(img)
        sals.append(sal)
        fixes.append(fix)
        ids.append(sample.sample_id)
    if not images:
        raise ValueError("dataset is empty")
    return torch.stack(images), torch.stack(sals).unsqueeze(1), fixes, ids


@dataclass
class TrainResult:
    history: list[dict]
    best_state: dict
    best_epoch: int
    steps: int
    config: dict = field(default_factory=dict)


def _batch_cc(pred: torch.Tensor, gt: torch.Tensor) -> list[float]:
    out = []
    for p, g in zip(pred.detach().double().numpy(), gt.double().numpy()):
        try:
            out.append(cc(p[0], g[0]))
        except ValueError:
            out.append(float("nan"))
    return out


def train(model: SalM2, dataset, cfg: TrainConfig | None = None, val_dataset=None,
          callback=None) -> TrainResult:
    """Train in place; returns per-epoch history and the best parameter snapshot.

    Each history record holds the epoch's mean BCE and a CC score: validation
    CC when ``val_dataset`` is given, otherwise the mean CC of the training
    predictions seen during the epoch. The snapshot with the highest such CC
    is retained.
    """
    cfg = cfg or TrainConfig()
    size = model.config.input_size
    images, sals, _, _ = stack_dataset(dataset, size)
    images, sals = images.to(_dtype(model)), sals.to(_dtype(model))
    val = None
    if val_dataset is not None:
        v_img, v_sal, _, _ = stack_dataset(val_dataset, size)
        val = (v_img.to(_dtype(model)), v_sal.to(_dtype(model)))

    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = images.shape[0]
    history = []
    best_cc, best_state, best_epoch = -math.inf, None, -1
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=gen)
        total, seen, ccs = 0.0, 0, []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = images[idx], sals[idx]
            pred = model(x)
            if not torch.isfinite(pred).all():
                raise TrainingDivergedError(step, float("nan"))
            loss = bce_loss(pred, y, cfg.clamp_eps)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, loss.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            total += loss.item() * len(idx)
            seen += len(idx)
            if val is None:
                ccs.extend(_batch_cc(pred, y))
        if val is not None:
            ccs = _batch_cc(predict_batches(model, val[0], cfg.batch_size), val[1])
        score = float(np.nanmean(ccs)) if ccs and not np.all(np.isnan(ccs)) else float("nan")
        rec = {"epoch": epoch, "loss": total / seen, "cc": score,
               "cc_source": "validation" if val is not None else "train", "steps": step,
               "gamma": model.cma.gamma.item(), "seconds": time.perf_counter() - t0}
        history.append(rec)
        if score > best_cc:
            best_cc, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d loss %.5f cc %.4f", epoch, rec["loss"], score)
        if callback is not None:
            callback(rec)
    if best_state is None:
        best_state, best_epoch = copy.deepcopy(model.state_dict()), cfg.epochs - 1
    model.eval()
    return TrainResult(history, best_state, best_epoch, step, asdict(cfg))


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_batches(model: SalM2, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    model.train(was_training)
    return torch.cat(out)


def validate(model: SalM2, dataset, config: MetricConfig | None = None, batch_size: int = 16) -> MetricReport:
    """Forward every sample and score it; parameters are not touched."""
    size = model.config.input_size
    images, sals, fixes, ids = stack_dataset(dataset, size)
    preds = predict_batches(model, images.to(_dtype(model)), batch_size)
    predictions = {sid: p[0].double().numpy() for sid, p in zip(ids, preds)}
    samples = [{"sample_id": sid, "saliency_gt": s[0].double().numpy(), "fixation": f}
               for sid, s, f in zip(ids, sals, fixes)]
    return evaluate_all(samples, predictions, config)
