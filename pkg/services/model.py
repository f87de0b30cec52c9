"""
Model
Transformer-decoder Q-network over a window of recent observations, plus the
memoryless MLP and single-block attention baselines
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from services.environments import ObservationSpec
from services.errors import ConfigError, ContractViolation
from services.numerics import (
    COMBINE_KINDS,
    FFN_MULTIPLIER,
    AttentionWeights,
    FFNWeights,
    GateWeights,
    causal_mha,
    combine,
    ffn,
    layer_norm,
    sinusoidal_table,
)

logger = logging.getLogger(__name__)

MODEL_KINDS = ("dtqn", "attn", "dqn_mlp")
POS_KINDS = ("learned", "sinusoidal", "none")
NORM_PLACEMENTS = ("post", "identity_map")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape and variant switches.

    Defaults follow the published gridverse hyperparameters; the smaller
    domains run with d_model=64 (see config/catalog.py).
    """
    obs_spec: ObservationSpec
    action_count: int
    kind: str = "dtqn"
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 2
    context_len: int = 50
    embed_per_feature: int = 8
    pos_kind: str = "learned"
    combine_kind: str = "residual"
    norm_placement: str = "post"
    use_layer_norm: bool = True
    gate_bias: float = 2.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind '{self.kind}' (expected one of {', '.join(MODEL_KINDS)})")
        if self.pos_kind not in POS_KINDS:
            raise ConfigError(f"unknown pos_kind '{self.pos_kind}' (expected one of {', '.join(POS_KINDS)})")
        if self.combine_kind not in COMBINE_KINDS:
            raise ConfigError(
                f"unknown combine_kind '{self.combine_kind}' (expected one of {', '.join(COMBINE_KINDS)})"
            )
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ConfigError(
                f"unknown norm_placement '{self.norm_placement}' (expected one of {', '.join(NORM_PLACEMENTS)})"
            )
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.context_len < 1:
            raise ConfigError(f"context_len must be >= 1, got {self.context_len}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.embed_per_feature < 1:
            raise ConfigError(f"embed_per_feature must be >= 1, got {self.embed_per_feature}")
        if self.action_count < 1:
            raise ConfigError(f"action_count must be >= 1, got {self.action_count}")

    def effective(self) -> "ModelConfig":
        """Apply the switches a baseline kind implies"""
        if self.kind == "attn":
            return replace(self, n_layers=1, use_layer_norm=False, combine_kind="passthrough")
        return self


class QOutput(NamedTuple):
    q: torch.Tensor  # (..., L, |A|)
    attention: Optional[Tuple[torch.Tensor, ...]]  # per layer, (..., heads, L, L)


def _uniform(shape: Tuple[int, ...], fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound))


class ObservationEmbedding(nn.Module):
    """Maps (..., L, F) observations to (..., L, d_model)"""

    def __init__(self, obs_spec: ObservationSpec, d_model: int, embed_per_feature: int):
        super().__init__()
        self.obs_spec = obs_spec
        if obs_spec.is_discrete:
            self.tables = nn.ModuleList(nn.Embedding(vocab, embed_per_feature) for vocab in obs_spec.vocab_sizes)
            for table, vocab in zip(self.tables, obs_spec.vocab_sizes):
                bound = 1.0 / math.sqrt(vocab)
                nn.init.uniform_(table.weight, -bound, bound)
            self.register_buffer(
                "vocab", torch.tensor(obs_spec.vocab_sizes, dtype=torch.long), persistent=False
            )
            self.project = nn.Linear(obs_spec.feature_count * embed_per_feature, d_model)
        else:
            self.tables = None
            self.project = nn.Linear(obs_spec.feature_count, d_model)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != self.obs_spec.feature_count:
            raise ContractViolation(
                f"observation has {obs.shape[-1]} features, expected {self.obs_spec.feature_count}"
            )
        if self.tables is None:
            return self.project(obs.to(self.project.weight.dtype))
        codes = obs.long()
        if bool((codes < 0).any()) or bool((codes >= self.vocab).any()):
            raise ContractViolation(f"observation code outside vocabularies {self.obs_spec.vocab_sizes}")
        pieces = [table(codes[..., i]) for i, table in enumerate(self.tables)]
        return self.project(torch.cat(pieces, dim=-1))


class PositionalEncoding(nn.Module):
    """Additive position vectors: learned (zero init), sinusoidal or none"""

    def __init__(self, kind: str, context_len: int, d_model: int):
        super().__init__()
        self.kind = kind
        self.context_len = context_len
        self.d_model = d_model
        if kind == "learned":
            self.table = nn.Parameter(torch.zeros(context_len, d_model))
        else:
            self.table = None
        # kept in float64 outside the module state; cast on use
        self._sinusoid = sinusoidal_table(context_len, d_model, torch.float64) if kind == "sinusoidal" else None

    def vectors(self, length: Optional[int] = None, dtype: torch.dtype = torch.float32) -> Optional[torch.Tensor]:
        length = self.context_len if length is None else length
        if self.kind == "learned":
            return self.table[:length]
        if self.kind == "sinusoidal":
            return self._sinusoid[:length].to(dtype)
        return None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length = x.shape[-2]
        if length > self.context_len:
            raise ContractViolation(f"window of {length} exceeds context length {self.context_len}")
        pos = self.vectors(length, x.dtype)
        return x if pos is None else x + pos


class TransformerLayer(nn.Module):
    """Masked self-attention then a position-wise FFN, each merged by `combine`.

    post:         x = LN(combine(sub(x), x))
    identity_map: x = combine(sub(LN(x)), x)
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        hidden = FFN_MULTIPLIER * d
        self.n_heads = config.n_heads
        self.combine_kind = config.combine_kind
        self.norm_placement = config.norm_placement
        self.use_layer_norm = config.use_layer_norm

        self.w_q = _uniform((d, d), d)
        self.w_k = _uniform((d, d), d)
        self.w_v = _uniform((d, d), d)
        self.w_o = _uniform((d, d), d)
        self.w1 = _uniform((d, hidden), d)
        self.b1 = _uniform((hidden,), d)
        self.w2 = _uniform((hidden, d), hidden)
        self.b2 = _uniform((d,), hidden)
        if self.use_layer_norm:
            self.ln_gain = nn.Parameter(torch.ones(2, d))
            self.ln_bias = nn.Parameter(torch.zeros(2, d))
        if self.combine_kind == "gru_gate":
            self.gate_w = nn.Parameter(torch.empty(2, 6, d, d).uniform_(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d)))
            self.gate_b = nn.Parameter(torch.full((2, d), float(config.gate_bias)))

    def _norm(self, x: torch.Tensor, which: int) -> torch.Tensor:
        if not self.use_layer_norm:
            return x
        return layer_norm(x, self.ln_gain[which], self.ln_bias[which])

    def _gate(self, which: int) -> Optional[GateWeights]:
        if self.combine_kind != "gru_gate":
            return None
        return GateWeights(*self.gate_w[which], self.gate_b[which])

    def _sublayer(self, x: torch.Tensor, which: int, fn):
        identity_map = self.norm_placement == "identity_map"
        out, extra = fn(self._norm(x, which) if identity_map else x)
        x = combine(out, x, self.combine_kind, self._gate(which))
        if not identity_map:
            x = self._norm(x, which)
        return x, extra

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attention_weights = AttentionWeights(self.w_q, self.w_k, self.w_v, self.w_o)
        ffn_weights = FFNWeights(self.w1, self.b1, self.w2, self.b2)
        x, attention = self._sublayer(x, 0, lambda h: causal_mha(h, attention_weights, self.n_heads))
        x, _ = self._sublayer(x, 1, lambda h: (ffn(h, ffn_weights), None))
        return x, attention


class DTQN(nn.Module):
    """Embedding + positions -> N transformer layers -> affine head, one Q row per position"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.effective()
        self.embedding = ObservationEmbedding(config.obs_spec, config.d_model, config.embed_per_feature)
        self.positions = PositionalEncoding(config.pos_kind, config.context_len, config.d_model)
        self.layers = nn.ModuleList(TransformerLayer(self.config) for _ in range(self.config.n_layers))
        self.head = nn.Linear(config.d_model, config.action_count)

    def embed(self, obs: torch.Tensor) -> torch.Tensor:
        return self.positions(self.embedding(obs))

    def forward(self, obs: torch.Tensor, capture_attention: bool = False) -> QOutput:
        x = self.embed(obs)
        captured = []
        for layer in self.layers:
            x, attention = layer(x)
            captured.append(attention)
        return QOutput(self.head(x), tuple(captured) if capture_attention else None)


class DQNMLP(nn.Module):
    """Memoryless baseline: the same MLP applied to each observation on its own"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embedding = ObservationEmbedding(config.obs_spec, d, config.embed_per_feature)
        self.hidden = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU())
        self.head = nn.Linear(d, config.action_count)

    def forward(self, obs: torch.Tensor, capture_attention: bool = False) -> QOutput:
        return QOutput(self.head(self.hidden(self.embedding(obs))), None)


QNetwork = Union[DTQN, DQNMLP]


def make_model(config: ModelConfig) -> QNetwork:
    if config.kind == "dqn_mlp":
        model = DQNMLP(config)
    else:
        model = DTQN(config)
    logger.debug(f"Built {config.kind} with {param_count(config)} parameters")
    return model


def make_baseline(kind: str, config: ModelConfig) -> QNetwork:
    """ATTN (one block, no LayerNorm, no skip) or the memoryless MLP, shaped like `config`"""
    if kind not in ("attn", "dqn_mlp"):
        raise ConfigError(f"unknown baseline '{kind}' (expected attn or dqn_mlp)")
    return make_model(replace(config, kind=kind))


def param_count(config: ModelConfig) -> int:
    """Trainable parameter count, computed from the config alone"""
    config = config.effective()
    d = config.d_model
    spec = config.obs_spec
    if spec.is_discrete:
        embed = sum(vocab * config.embed_per_feature for vocab in spec.vocab_sizes)
        embed += spec.feature_count * config.embed_per_feature * d + d
    else:
        embed = spec.feature_count * d + d
    head = d * config.action_count + config.action_count
    if config.kind == "dqn_mlp":
        return embed + 2 * (d * d + d) + head

    hidden = FFN_MULTIPLIER * d
    layer = 4 * d * d + (d * hidden + hidden + hidden * d + d)
    if config.use_layer_norm:
        layer += 4 * d
    if config.combine_kind == "gru_gate":
        layer += 2 * (6 * d * d + d)
    pos = config.context_len * d if config.pos_kind == "learned" else 0
    return embed + pos + config.n_layers * layer + head


def q_last(output: QOutput, last_valid: int) -> torch.Tensor:
    """Q row of the last valid position (not the padded tail)"""
    rows = output.q.shape[-2]
    if last_valid < 0:
        raise ContractViolation("q_last needs at least one valid position")
    if last_valid >= rows:
        raise ContractViolation(f"last valid index {last_valid} outside a window of {rows} rows")
    return output.q[..., last_valid, :]


def window_tensor(history, context_len: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Most recent `context_len` observations as an unpadded (1, L, F) tensor"""
    recent = np.asarray(list(history)[-context_len:], dtype=np.float64)
    if recent.size == 0:
        raise ContractViolation("history is empty")
    return torch.as_tensor(recent, dtype=dtype).unsqueeze(0)


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype
