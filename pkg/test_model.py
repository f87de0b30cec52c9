#!/usr/bin/env python3
"""
Tests for the Q-network: embeddings, causal forward pass, variant cells,
baselines, parameter counts and gradients
"""

import itertools
import math
import sys

import numpy as np
import torch
from torch import nn

from services.agent import intermediate_q_loss
from services.environments import ObservationSpec
from services.errors import ConfigError, ContractViolation
from services.model import (
    DQNMLP,
    DTQN,
    ModelConfig,
    make_baseline,
    make_model,
    param_count,
    q_last,
    window_tensor,
)
from services.numerics import LAYER_NORM_EPS, grad_check, sinusoidal_table

DT = torch.float64
SPEC = ObservationSpec(2, (5, 4))
CELLS = list(itertools.product(("learned", "sinusoidal", "none"), ("residual", "gru_gate"), ("post", "identity_map")))


def _model(seed=0, **overrides):
    fields = dict(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, n_layers=2, context_len=6, embed_per_feature=4)
    fields.update(overrides)
    torch.manual_seed(seed)
    model = make_model(ModelConfig(**fields)).to(DT)
    if isinstance(model, DTQN) and model.positions.table is not None:
        nn.init.normal_(model.positions.table, std=0.5)
    return model


def _obs(batch, length, generator, spec=SPEC):
    codes = [torch.randint(vocab, (batch, length), generator=generator) for vocab in spec.vocab_sizes]
    return torch.stack(codes, dim=-1).to(DT)


# -- straight-line reference ----------------------------------------------


def _np_layer_norm(x, gain, bias):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        out[i] = (row - mean) / math.sqrt(var + LAYER_NORM_EPS) * gain + bias
    return out


def _np_attention(h, w_q, w_k, w_v, w_o, n_heads):
    k, d = h.shape
    d_k = d // n_heads
    q, key, v = h @ w_q, h @ w_k, h @ w_v
    out = np.zeros_like(h)
    for i in range(k):
        for head in range(n_heads):
            cols = slice(head * d_k, (head + 1) * d_k)
            scores = [float(q[i, cols] @ key[j, cols]) / math.sqrt(d_k) for j in range(i + 1)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(i + 1):
                out[i, cols] += weights[j] / total * v[j, cols]
    return out @ w_o


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _reference_forward(model, obs):
    """Loop-based float64 evaluation of one (k, F) window from the model's state_dict"""
    p = {name: t.detach().numpy() for name, t in model.state_dict().items()}
    config = model.config
    identity_map = config.norm_placement == "identity_map"

    rows = []
    for t, observation in enumerate(obs):
        pieces = [p[f"embedding.tables.{i}.weight"][int(code)] for i, code in enumerate(observation)]
        e = np.concatenate(pieces) @ p["embedding.project.weight"].T + p["embedding.project.bias"]
        if config.pos_kind == "learned":
            e = e + p["positions.table"][t]
        elif config.pos_kind == "sinusoidal":
            e = e + sinusoidal_table(config.context_len, config.d_model, DT).numpy()[t]
        rows.append(e)
    x = np.array(rows)

    for n in range(config.n_layers):
        w = {name[len(f"layers.{n}."):]: value for name, value in p.items() if name.startswith(f"layers.{n}.")}

        def norm(v, which):
            return _np_layer_norm(v, w["ln_gain"][which], w["ln_bias"][which])

        def merge(out, residual, which):
            if config.combine_kind == "residual":
                return out + residual
            w_r, u_r, w_z, u_z, w_g, u_g = w["gate_w"][which]
            r = _np_sigmoid(out @ w_r + residual @ u_r)
            z = _np_sigmoid(out @ w_z + residual @ u_z - w["gate_b"][which])
            candidate = np.tanh(out @ w_g + (r * residual) @ u_g)
            return (1 - z) * residual + z * candidate

        sublayers = (
            lambda h: _np_attention(h, w["w_q"], w["w_k"], w["w_v"], w["w_o"], config.n_heads),
            lambda h: np.maximum(h @ w["w1"] + w["b1"], 0.0) @ w["w2"] + w["b2"],
        )
        for which, fn in enumerate(sublayers):
            merged = merge(fn(norm(x, which) if identity_map else x), x, which)
            x = merged if identity_map else norm(merged, which)

    return x @ p["head.weight"].T + p["head.bias"]


# -- tests ------------------------------------------------------------------


def test_config_validation():
    for bad in (
        dict(d_model=10, n_heads=3),
        dict(context_len=0),
        dict(n_layers=0),
        dict(pos_kind="rotary"),
        dict(combine_kind="highway"),
        dict(norm_placement="pre"),
        dict(kind="lstm"),
    ):
        try:
            ModelConfig(obs_spec=SPEC, action_count=3, **bad)
        except ConfigError:
            continue
        raise AssertionError(f"{bad} was accepted")


def test_embedding_positions():
    generator = torch.Generator().manual_seed(0)
    obs = _obs(1, 1, generator).repeat(1, 4, 1)

    flat = _model(pos_kind="none").embed(obs)[0]
    assert torch.max(torch.abs(flat[0] - flat[3])) <= 1e-12

    learned = _model(pos_kind="learned")
    e = learned.embed(obs)[0]
    table = learned.positions.table
    assert torch.max(torch.abs((e[3] - e[1]) - (table[3] - table[1]))) <= 1e-12

    sinusoid = _model(pos_kind="sinusoidal")
    e = sinusoid.embed(obs)[0]
    base = sinusoid.embedding(obs)[0]
    assert torch.max(torch.abs(e - base - sinusoidal_table(6, 8, DT)[:4])) <= 1e-12


def test_learned_table_starts_at_zero():
    torch.manual_seed(0)
    model = make_model(ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, context_len=6))
    assert not model.positions.table.detach().any()


def test_embedding_rejects_bad_input():
    model = _model()
    for obs in (
        torch.tensor([[[5.0, 0.0]]], dtype=DT),
        torch.tensor([[[0.0, -1.0]]], dtype=DT),
        torch.zeros(1, 2, 3, dtype=DT),
        torch.zeros(1, 7, 2, dtype=DT),
    ):
        try:
            model(obs)
        except ContractViolation:
            continue
        raise AssertionError(f"{obs.shape} input was accepted")


def test_real_valued_observations():
    spec = ObservationSpec(3, None)
    torch.manual_seed(0)
    model = make_model(ModelConfig(obs_spec=spec, action_count=3, d_model=8, n_heads=2, context_len=5)).to(DT)
    out = model(torch.randn(2, 5, 3, dtype=DT))
    assert out.q.shape == (2, 5, 3)
    assert torch.isfinite(out.q).all()


def test_single_layer_last_row_ignores_prefix_order():
    generator = torch.Generator().manual_seed(1)
    for combine_kind, norm_placement in itertools.product(("residual", "gru_gate"), ("post", "identity_map")):
        model = _model(n_layers=1, pos_kind="none", combine_kind=combine_kind, norm_placement=norm_placement)
        for _ in range(10):
            obs = _obs(1, 6, generator)
            order = torch.cat([torch.randperm(5, generator=generator), torch.tensor([5])])
            a = model(obs).q[0, -1]
            b = model(obs[:, order]).q[0, -1]
            assert torch.max(torch.abs(a - b)) <= 1e-12


def test_causality_every_cell():
    generator = torch.Generator().manual_seed(2)
    trials = 0
    for seed, (pos_kind, combine_kind, norm_placement) in enumerate(CELLS):
        model = _model(seed, pos_kind=pos_kind, combine_kind=combine_kind, norm_placement=norm_placement)
        for _ in range(84):
            obs = _obs(1, 6, generator)
            j = int(torch.randint(1, 6, (1,), generator=generator))
            perturbed = obs.clone()
            perturbed[0, j:] = _obs(1, 6 - j, generator)[0]
            before = model(obs).q[0, :j]
            after = model(perturbed).q[0, :j]
            assert torch.max(torch.abs(before - after)) <= 1e-12
            trials += 1
    assert trials >= 1000


def test_matches_straight_line_reference():
    generator = torch.Generator().manual_seed(3)
    for seed, (pos_kind, combine_kind, norm_placement) in enumerate(CELLS):
        model = _model(
            seed, context_len=3, n_layers=1, action_count=2,
            pos_kind=pos_kind, combine_kind=combine_kind, norm_placement=norm_placement,
        )
        obs = _obs(1, 3, generator)
        expected = _reference_forward(model, obs[0].numpy())
        actual = model(obs).q[0].detach().numpy()
        assert np.max(np.abs(actual - expected)) <= 1e-10, (pos_kind, combine_kind, norm_placement)


def test_two_layer_reference():
    model = _model(7, context_len=4, n_layers=2, combine_kind="gru_gate")
    obs = _obs(1, 4, torch.Generator().manual_seed(4))
    expected = _reference_forward(model, obs[0].numpy())
    assert np.max(np.abs(model(obs).q[0].detach().numpy() - expected)) <= 1e-10


def test_q_last():
    model = _model(context_len=6)
    generator = torch.Generator().manual_seed(5)
    obs = _obs(2, 6, generator)
    output = model(obs)
    assert torch.equal(q_last(output, 5), output.q[:, 5])

    padded = obs.clone()
    padded[:, 2:] = 0.0
    row = q_last(model(padded), 1)
    truncated = model(obs[:, :2]).q[:, -1]
    assert torch.max(torch.abs(row - truncated)) <= 1e-12

    for index in (-1, 6):
        try:
            q_last(output, index)
        except ContractViolation:
            continue
        raise AssertionError(f"index {index} was accepted")


def test_q_last_two_valid_of_fifty():
    model = _model(context_len=50, n_layers=1)
    obs = torch.zeros(1, 50, 2, dtype=DT)
    obs[0, :2] = _obs(1, 2, torch.Generator().manual_seed(6))[0]
    output = model(obs)
    assert torch.equal(q_last(output, 1), output.q[:, 1])


def test_window_tensor():
    history = [np.array([i, 0]) for i in range(10)]
    window = window_tensor(history, 4, DT)
    assert window.shape == (1, 4, 2)
    assert window[0, :, 0].tolist() == [6.0, 7.0, 8.0, 9.0]
    try:
        window_tensor([], 4)
    except ContractViolation:
        return
    raise AssertionError("empty history was accepted")


def test_attention_capture():
    model = _model(context_len=6)
    obs = _obs(3, 6, torch.Generator().manual_seed(7))
    assert model(obs).attention is None
    captured = model(obs, capture_attention=True).attention
    assert len(captured) == 2
    mask = torch.ones(6, 6, dtype=torch.bool).triu(diagonal=1)
    for weights in captured:
        assert weights.shape == (3, 2, 6, 6)
        assert (weights.masked_select(mask) == 0).all()
        assert torch.max(torch.abs(weights.sum(dim=-1) - 1.0)) <= 1e-6


def test_attn_baseline_matches_switched_dtqn():
    config = ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, n_layers=2, context_len=5)
    torch.manual_seed(8)
    attn = make_baseline("attn", config).to(DT)
    assert len(attn.layers) == 1
    assert not hasattr(attn.layers[0], "ln_gain")

    switched = DTQN(ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, n_layers=1, context_len=5,
                                use_layer_norm=False, combine_kind="passthrough")).to(DT)
    nn.init.normal_(attn.positions.table)
    switched.load_state_dict(attn.state_dict())
    obs = _obs(2, 5, torch.Generator().manual_seed(9))
    assert torch.equal(attn(obs).q, switched(obs).q)


def test_attn_single_step_is_embedding_value_ffn_head():
    config = ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, context_len=5, pos_kind="none")
    torch.manual_seed(10)
    attn = make_baseline("attn", config).to(DT)
    obs = _obs(1, 1, torch.Generator().manual_seed(11))
    output = attn(obs, capture_attention=True)
    assert torch.equal(output.attention[0], torch.ones(1, 2, 1, 1, dtype=DT))
    layer = attn.layers[0]
    e = attn.embedding(obs)
    mixed = e @ layer.w_v @ layer.w_o
    expected = attn.head(torch.relu(mixed @ layer.w1 + layer.b1) @ layer.w2 + layer.b2)
    assert torch.max(torch.abs(output.q - expected)) <= 1e-12


def test_mlp_baseline_only_sees_latest_observation():
    config = ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, context_len=5)
    torch.manual_seed(12)
    mlp = make_baseline("dqn_mlp", config).to(DT)
    assert isinstance(mlp, DQNMLP)
    generator = torch.Generator().manual_seed(13)
    obs = _obs(1, 5, generator)
    other = obs.clone()
    other[0, :4] = _obs(1, 4, generator)[0]
    latest = mlp(obs).q[0, -1]
    assert torch.max(torch.abs(latest - mlp(other).q[0, -1])) <= 1e-12
    assert torch.max(torch.abs(latest - mlp(obs[:, -1:]).q[0, 0])) <= 1e-12


def test_unknown_baseline_rejected():
    config = ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2)
    try:
        make_baseline("drqn", config)
    except ConfigError:
        return
    raise AssertionError("unknown baseline was accepted")


def test_param_count_golden():
    gv_memory = ModelConfig(obs_spec=ObservationSpec(6, (6,) * 6), action_count=6)
    assert param_count(gv_memory) == 409_254


def test_param_count_matches_built_models():
    configs = [
        ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, context_len=6,
                    pos_kind=pos_kind, combine_kind=combine_kind, norm_placement=norm_placement)
        for pos_kind, combine_kind, norm_placement in CELLS
    ]
    configs += [
        ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, kind="attn"),
        ModelConfig(obs_spec=SPEC, action_count=3, d_model=8, n_heads=2, kind="dqn_mlp"),
        ModelConfig(obs_spec=ObservationSpec(3, None), action_count=3, d_model=64),
        ModelConfig(obs_spec=ObservationSpec(6, (6,) * 6), action_count=6),
    ]
    for config in configs:
        built = sum(p.numel() for p in make_model(config).parameters())
        assert built == param_count(config), config


def test_loss_gradients_every_cell():
    generator = torch.Generator().manual_seed(14)
    for seed, (pos_kind, combine_kind, norm_placement) in enumerate(CELLS):
        model = _model(seed, context_len=4, pos_kind=pos_kind, combine_kind=combine_kind,
                       norm_placement=norm_placement)
        obs = _obs(2, 4, generator)
        targets = torch.randn(2, 4, generator=generator, dtype=DT)
        actions = torch.randint(3, (2, 4), generator=generator)
        valid = torch.tensor([[True, True, True, True], [True, True, False, False]])

        def loss():
            return intermediate_q_loss(model(obs).q, targets, actions, valid)

        error = grad_check(loss, list(model.parameters()), max_coords=6, generator=generator)
        assert error <= 1e-4, (pos_kind, combine_kind, norm_placement, error)


def main():
    """Run all tests"""
    print("🧠 Model Tests")
    print("=" * 50)

    tests = [
        test_config_validation,
        test_embedding_positions,
        test_learned_table_starts_at_zero,
        test_embedding_rejects_bad_input,
        test_real_valued_observations,
        test_single_layer_last_row_ignores_prefix_order,
        test_causality_every_cell,
        test_matches_straight_line_reference,
        test_two_layer_reference,
        test_q_last,
        test_q_last_two_valid_of_fifty,
        test_window_tensor,
        test_attention_capture,
        test_attn_baseline_matches_switched_dtqn,
        test_attn_single_step_is_embedding_value_ffn_head,
        test_mlp_baseline_only_sees_latest_observation,
        test_unknown_baseline_rejected,
        test_param_count_golden,
        test_param_count_matches_built_models,
        test_loss_gradients_every_cell,
    ]

    passed = 0
    for test in tests:
        try:
            test()
            print(f"  ✅ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"  ❌ {test.__name__}: {e!r}")

    print("\n" + "=" * 50)
    print(f"📋 Test Results: {passed}/{len(tests)} tests passed")
    return 0 if passed == len(tests) else 1


if __name__ == "__main__":
    sys.exit(main())
