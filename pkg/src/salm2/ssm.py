"""Selective state-space scan and the Mamba-style sequence block.

The recurrence evaluated everywhere in this module is

    h_t = decay_t * h_{t-1} + drive_t
    y_t = sum_s readout_t[..., s] * h_t[..., s] + passthrough * x_t

over a time axis of length L, with per-channel (D) and per-state (S) gates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

__all__ = [
    "ScanInputs",
    "sequential_scan",
    "parallel_scan",
    "scan_states_sequential",
    "scan_states_parallel",
    "MambaBlock",
    "mamba_block",
]


def _as_tensor(a, dtype=None):
    if isinstance(a, torch.Tensor):
        return a if dtype is None else a.to(dtype)
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@dataclass
class ScanInputs:
    """Gates of one selective scan.

    Shapes are ``[L, D, S]`` for ``decay``, ``drive`` and ``readout``, ``[D]``
    for ``passthrough`` and ``[D, S]`` for ``initial_state``. ``x`` is the raw
    ``[L, D]`` input that feeds the passthrough term; without it that term is
    dropped. Extra leading batch axes are allowed as long as every array
    carries them.
    """

    decay: torch.Tensor
    drive: torch.Tensor
    readout: torch.Tensor
    passthrough: torch.Tensor | None = None
    initial_state: torch.Tensor | None = None
    x: torch.Tensor | None = None

    def __post_init__(self):
        self.decay = _as_tensor(self.decay)
        dtype = self.decay.dtype
        self.drive = _as_tensor(self.drive, dtype)
        self.readout = _as_tensor(self.readout, dtype)
        if self.decay.dim() < 3:
            raise ContractError(f"decay must be [..., L, D, S], got shape {tuple(self.decay.shape)}")
        shape = self.decay.shape
        for name in ("drive", "readout"):
            if getattr(self, name).shape != shape:
                raise ContractError(
                    f"{name} shape {tuple(getattr(self, name).shape)} != decay shape {tuple(shape)}"
                )
        *lead, L, D, S = shape
        if L < 1 or D < 1 or S < 1:
            raise ContractError(f"empty scan dimensions L={L}, D={D}, S={S}")
        if self.passthrough is None:
            self.passthrough = torch.zeros(D, dtype=dtype)
        self.passthrough = _as_tensor(self.passthrough, dtype)
        if self.passthrough.shape != (D,):
            raise ContractError(f"passthrough must be [{D}], got {tuple(self.passthrough.shape)}")
        if self.initial_state is None:
            self.initial_state = torch.zeros(*lead, D, S, dtype=dtype)
        self.initial_state = _as_tensor(self.initial_state, dtype)
        if self.initial_state.shape[-2:] != (D, S):
            raise ContractError(
                f"initial_state must end in [{D}, {S}], got {tuple(self.initial_state.shape)}"
            )
        if self.x is not None:
            self.x = _as_tensor(self.x, dtype)
            if self.x.shape != (*lead, L, D):
                raise ContractError(f"x must be {(*lead, L, D)}, got {tuple(self.x.shape)}")
        for name in ("decay", "drive", "readout", "passthrough", "initial_state", "x"):
            v = getattr(self, name)
            if v is not None and not torch.isfinite(v).all():
                bad = int((~torch.isfinite(v)).sum())
                raise ContractError(f"{name} contains {bad} non-finite value(s)")

    @property
    def length(self) -> int:
        return self.decay.shape[-3]


def scan_states_sequential(decay, drive, h0):
    """Hidden states by the plain left-to-right loop. Time is axis -3."""
    h = h0
    states = []
    for t in range(decay.shape[-3]):
        h = decay[..., t, :, :] * h + drive[..., t, :, :]
        states.append(h)
    return torch.stack(states, dim=-3)


def _prefix_scan_(a, b):
    """In-place inclusive scan of ``b_t <- a_t * b_{t-1} + b_t`` along axis -3; ``a`` is consumed."""
    L = a.shape[-3]
    offset = 1
    while offset < L:
        b[..., offset:, :, :] += a[..., offset:, :, :] * b[..., :-offset, :, :]
        if 2 * offset < L:
            a[..., offset:, :, :] = a[..., offset:, :, :] * a[..., :-offset, :, :]
        offset *= 2
    return b


class _ParallelScan(torch.autograd.Function):
    # backward is the same recurrence run in reverse time:
    # G_t = dL/dh_t + decay_{t+1} * G_{t+1}

    @staticmethod
    def forward(ctx, decay, drive, h0):
        b = drive.clone()
        b[..., 0, :, :] += decay[..., 0, :, :] * h0
        states = _prefix_scan_(decay.clone(), b)
        ctx.save_for_backward(decay, h0, states)
        return states

    @staticmethod
    def backward(ctx, grad_states):
        decay, h0, states = ctx.saved_tensors
        shifted = torch.cat([decay[..., 1:, :, :], torch.ones_like(decay[..., :1, :, :])], dim=-3)
        G = _prefix_scan_(shifted.flip(-3), grad_states.flip(-3).clone()).flip(-3)
        h_prev = torch.cat([h0.unsqueeze(-3).expand_as(states[..., :1, :, :]), states[..., :-1, :, :]], dim=-3)
        grad_decay = G * h_prev
        grad_h0 = decay[..., 0, :, :] * G[..., 0, :, :]
        if grad_h0.shape != h0.shape:
            grad_h0 = grad_h0.sum_to_size(h0.shape)
        return grad_decay, G, grad_h0


def scan_states_parallel(decay, drive, h0):
    """Hidden states by a log-depth inclusive prefix scan. Time is axis -3.

    Pairs ``(a, b)`` compose as ``(a1, b1) then (a2, b2) = (a1*a2, a2*b1 + b2)``;
    the initial state is folded into the first drive term. Gradients come from
    the reverse-time scan, not from differentiating the doubling steps.
    """
    h0 = h0.expand(*decay.shape[:-3], *decay.shape[-2:]) if h0.dim() < decay.dim() - 1 else h0
    return _ParallelScan.apply(decay, drive, h0)


def _readout(inputs: ScanInputs, states):
    y = (inputs.readout * states).sum(-1)
    if inputs.x is not None:
        y = y + inputs.passthrough * inputs.x
    return y


def sequential_scan(inputs: ScanInputs) -> torch.Tensor:
    """Reference evaluation of the scan, one time step after another."""
    states = scan_states_sequential(inputs.decay, inputs.drive, inputs.initial_state)
    return _readout(inputs, states)


def parallel_scan(inputs: ScanInputs) -> torch.Tensor:
    """Same output as :func:`sequential_scan` via associative prefix combination."""
    states = scan_states_parallel(inputs.decay, inputs.drive, inputs.initial_state)
    return _readout(inputs, states)


class MambaBlock(nn.Module):
    """Selective SSM block on ``[B, L, D]`` sequences.

    expand -> causal depthwise conv over L -> SiLU -> selective scan -> gate by
    SiLU(z) -> contract back to D. Discretization is zero-order hold on the
    decay (``exp(delta * A)`` with ``A < 0``) and Euler on the input
    (``delta * B * x``).
    """

    def __init__(self, d_model: int, d_state: int = 8, expand: int = 2, d_conv: int = 4,
                 dt_rank: int | None = None):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = expand * d_model
        self.d_conv = d_conv
        self.dt_rank = dt_rank or math.ceil(d_model / 16)

        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, bias=False)
        self.conv1d = nn.Conv1d(self.d_inner, self.d_inner, d_conv, groups=self.d_inner,
                                padding=d_conv - 1)
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner)
        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(self.d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(self.d_inner))
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

        # dt initialised so softplus(bias) spans [1e-3, 1e-1], as in the reference Mamba.
        with torch.no_grad():
            dt = torch.exp(torch.rand(self.d_inner) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def _gates(self, u):
        dbc = self.x_proj(u)
        dt, Bm, Cm = torch.split(dbc, [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))                      # [B, L, E]
        A = -torch.exp(self.A_log)                                 # [E, S]
        decay = torch.exp(delta.unsqueeze(-1) * A)                 # [B, L, E, S]
        drive = (delta * u).unsqueeze(-1) * Bm.unsqueeze(-2)       # [B, L, E, S]
        return decay, drive, Cm                                    # Cm: [B, L, S]

    def scan_inputs(self, u: torch.Tensor) -> ScanInputs:
        """Input-dependent gates for the post-convolution sequence ``u`` ``[B, L, E]``."""
        decay, drive, Cm = self._gates(u)
        return ScanInputs(decay, drive, Cm.unsqueeze(-2).expand_as(drive), passthrough=self.D, x=u)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ContractError(f"expected [B, L, {self.d_model}] input, got {tuple(x.shape)}")
        L = x.shape[1]
        u, z = self.in_proj(x).chunk(2, dim=-1)
        u = self.conv1d(u.transpose(1, 2))[..., :L].transpose(1, 2)
        u = F.silu(u)
        decay, drive, readout = self._gates(u)
        h0 = u.new_zeros(u.shape[0], self.d_inner, self.d_state)
        states = scan_states_parallel(decay, drive, h0)
        y = (states * readout.unsqueeze(-2)).sum(-1) + self.D * u
        return self.out_proj(y * F.silu(z))


def mamba_block(x: torch.Tensor, params: MambaBlock) -> torch.Tensor:
    return params(x)
