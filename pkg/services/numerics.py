"""
Numerics
Differentiable primitives of the Q-network: softmax, LayerNorm, causal
multi-head attention, the position-wise feedforward network, the combine
step, sinusoidal encodings and a finite-difference gradient checker.

All functions are pure over the tensors they receive. Weight matrices use
the "row vector times matrix" convention, e.g. Q = H @ W_q.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from services.errors import ConfigError, DiagnosticError, InvalidArgument

LAYER_NORM_EPS = 1e-5
FFN_MULTIPLIER = 4
COMBINE_KINDS = ("residual", "gru_gate", "passthrough")


class AttentionWeights(NamedTuple):
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor


class FFNWeights(NamedTuple):
    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor


class GateWeights(NamedTuple):
    """GRU gate: residual stream is the hidden state, sublayer output the input"""
    w_r: torch.Tensor
    u_r: torch.Tensor
    w_z: torch.Tensor
    u_z: torch.Tensor
    w_g: torch.Tensor
    u_g: torch.Tensor
    b_g: torch.Tensor


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax along `dim`; shifts by the max so adding a constant is a no-op"""
    if x.dim() == 0 or x.shape[dim] == 0:
        raise InvalidArgument("softmax needs at least one entry")
    shifted = x - x.amax(dim=dim, keepdim=True)
    return torch.softmax(shifted, dim=dim)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Normalize over the last (feature) dimension, then scale and shift"""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise InvalidArgument(
            f"layer_norm length mismatch: x has {d} features, gain {tuple(gain.shape)}, bias {tuple(bias.shape)}"
        )
    return F.layer_norm(x, (d,), gain, bias, LAYER_NORM_EPS)


def causal_mask(k: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """Boolean k x k mask, True where column > row (future positions)"""
    return torch.ones(k, k, dtype=torch.bool, device=device).triu(diagonal=1)


def causal_mha(
    h: torch.Tensor, weights: AttentionWeights, n_heads: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked multi-head self-attention.

    h: (..., k, d). Returns the (..., k, d) output and the attention weights
    of shape (..., n_heads, k, k); masked entries are exactly 0.
    """
    d = h.shape[-1]
    if n_heads < 1 or d % n_heads != 0:
        raise ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")
    for name, w in zip(weights._fields, weights):
        if w.shape != (d, d):
            raise ConfigError(f"attention weight {name} has shape {tuple(w.shape)}, expected ({d}, {d})")

    d_k = d // n_heads
    k = h.shape[-2]
    lead = h.shape[:-2]

    def split_heads(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*lead, k, n_heads, d_k).transpose(-3, -2)

    q = split_heads(h @ weights.w_q)
    key = split_heads(h @ weights.w_k)
    v = split_heads(h @ weights.w_v)

    scores = (q @ key.transpose(-2, -1)) / math.sqrt(d_k)
    scores = scores.masked_fill(causal_mask(k, h.device), float("-inf"))
    attention = softmax(scores, dim=-1)

    heads = attention @ v
    concat = heads.transpose(-3, -2).reshape(*lead, k, d)
    return concat @ weights.w_o, attention


def ffn(h: torch.Tensor, weights: FFNWeights) -> torch.Tensor:
    """Position-wise feedforward: ReLU between two affine maps"""
    d = h.shape[-1]
    w1, b1, w2, b2 = weights
    hidden = w1.shape[-1] if w1.dim() == 2 else -1
    if w1.shape != (d, hidden) or b1.shape != (hidden,) or w2.shape != (hidden, d) or b2.shape != (d,):
        raise ConfigError(
            f"ffn weights do not fit d_model={d}: w1 {tuple(w1.shape)}, b1 {tuple(b1.shape)}, "
            f"w2 {tuple(w2.shape)}, b2 {tuple(b2.shape)}"
        )
    return torch.relu(h @ w1 + b1) @ w2 + b2


def combine(
    sub_out: torch.Tensor,
    residual_in: torch.Tensor,
    kind: str,
    gate: Optional[GateWeights] = None,
) -> torch.Tensor:
    """Merge a sublayer's output back into the residual stream"""
    if sub_out.shape != residual_in.shape:
        raise ConfigError(f"combine shape mismatch: {tuple(sub_out.shape)} vs {tuple(residual_in.shape)}")
    if kind == "residual":
        return sub_out + residual_in
    if kind == "passthrough":
        return sub_out
    if kind == "gru_gate":
        if gate is None:
            raise ConfigError("gru_gate combine needs gate weights")
        x, y = residual_in, sub_out
        r = torch.sigmoid(y @ gate.w_r + x @ gate.u_r)
        # b_g > 0 closes the update gate, so the gate starts near identity
        z = torch.sigmoid(y @ gate.w_z + x @ gate.u_z - gate.b_g)
        candidate = torch.tanh(y @ gate.w_g + (r * x) @ gate.u_g)
        return (1.0 - z) * x + z * candidate
    raise ConfigError(f"unknown combine kind '{kind}' (expected one of {', '.join(COMBINE_KINDS)})")


def sinusoidal_table(k: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Closed-form sin/cos position table of shape (k, d)"""
    position = torch.arange(k, dtype=torch.float64).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(k, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term[: d // 2])
    return table.to(dtype)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: Optional[float] = None,
    max_coords: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Compare autograd gradients of scalar f() against central differences.

    `f` must close over `params` (leaf tensors requiring grad) and be
    deterministic. Returns max |analytic - numeric| / max(1, |analytic|, |numeric|)
    over the checked coordinates; `max_coords` samples that many coordinates
    per tensor instead of checking all of them.
    """
    params = list(params)
    if eps is None:
        eps = 1e-6 if params and params[0].dtype == torch.float64 else 1e-4

    value = f()
    if not torch.isfinite(value).all():
        raise DiagnosticError(f"grad_check: f returned non-finite value {value.item()}")
    grads = torch.autograd.grad(value, params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic_flat = (torch.zeros_like(p) if g is None else g).reshape(-1)
            flat = p.view(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = torch.randperm(n, generator=generator)[:max_coords].tolist()
            else:
                coords = range(n)
            for idx in coords:
                original = flat[idx].item()
                flat[idx] = original + eps
                plus = f().item()
                flat[idx] = original - eps
                minus = f().item()
                flat[idx] = original
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise DiagnosticError(f"grad_check: non-finite value while perturbing coordinate {idx}")
                numeric = (plus - minus) / (2.0 * eps)
                analytic = analytic_flat[idx].item()
                err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                worst = max(worst, err)
    return worst
