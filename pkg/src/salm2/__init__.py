"""Semantic-guided lightweight Mamba network for driver saliency prediction."""
from .cma import CrossModalAttention, channel_affinity, cma_fuse
from .metrics import MetricReport, auc_borji, auc_judd, cc, evaluate_all, kld, nss, sim
from .model import (ModelConfig, SalM2, count_trainable_params, estimate_flops, load_checkpoint,
                    save_checkpoint)
from .ssm import MambaBlock, ScanInputs, parallel_scan, sequential_scan

__version__ = "0.1.0"

__all__ = [
    "CrossModalAttention", "channel_affinity", "cma_fuse",
    "MetricReport", "auc_borji", "auc_judd", "cc", "evaluate_all", "kld", "nss", "sim",
    "ModelConfig", "SalM2", "count_trainable_params", "estimate_flops", "load_checkpoint", "save_checkpoint",
    "MambaBlock", "ScanInputs", "parallel_scan", "sequential_scan",
]
