#!/usr/bin/env python3
"""
Tests for the differentiable primitives: softmax, LayerNorm, causal attention,
FFN, combine step, sinusoidal table and the gradient checker
"""

import math
import sys

import numpy as np
import torch

from services.errors import ConfigError, DiagnosticError, InvalidArgument
from services.numerics import (
    AttentionWeights,
    FFNWeights,
    GateWeights,
    causal_mha,
    combine,
    ffn,
    grad_check,
    layer_norm,
    sinusoidal_table,
    softmax,
)

DT = torch.float64


def _attention_weights(d, generator):
    return AttentionWeights(*(torch.randn(d, d, generator=generator, dtype=DT) / math.sqrt(d) for _ in range(4)))


def _gate_weights(d, generator, bias=2.0):
    matrices = [torch.randn(d, d, generator=generator, dtype=DT) / math.sqrt(d) for _ in range(6)]
    return GateWeights(*matrices, torch.full((d,), bias, dtype=DT))


def test_softmax_values():
    """Closed-form cases, shift invariance and a naive exp/sum oracle"""
    assert torch.allclose(softmax(torch.zeros(3, dtype=DT)), torch.full((3,), 1 / 3, dtype=DT), atol=1e-12)
    halves = softmax(torch.tensor([0.0, math.log(2)], dtype=DT))
    assert torch.allclose(halves, torch.tensor([1 / 3, 2 / 3], dtype=DT), atol=1e-12)
    x = torch.randn(5, generator=torch.Generator().manual_seed(1), dtype=DT)
    naive = torch.exp(x) / torch.exp(x).sum()
    assert torch.max(torch.abs(softmax(x) - naive)) <= 1e-12
    assert torch.max(torch.abs(softmax(x + 1000.0) - naive)) <= 1e-12
    assert abs(softmax(x).sum().item() - 1.0) <= 1e-9


def test_softmax_empty_rejected():
    try:
        softmax(torch.zeros(0, dtype=DT))
    except InvalidArgument:
        return
    raise AssertionError("empty softmax input was accepted")


def test_layer_norm_statistics():
    d = 16
    ones, zeros = torch.ones(d, dtype=DT), torch.zeros(d, dtype=DT)
    assert torch.equal(layer_norm(torch.full((d,), 3.0, dtype=DT), ones, zeros), torch.zeros(d, dtype=DT))
    pair = layer_norm(torch.tensor([1.0, -1.0], dtype=DT), torch.ones(2, dtype=DT), torch.zeros(2, dtype=DT))
    assert torch.allclose(pair, torch.tensor([1.0, -1.0], dtype=DT), atol=1e-4)

    g = torch.Generator().manual_seed(2)
    x = torch.randn(d, generator=g, dtype=DT) * 10 + 1
    out = layer_norm(x, ones, zeros)
    assert abs(out.mean().item()) <= 1e-6
    assert abs(out.var(unbiased=False).item() - 1.0) <= 1e-6
    gain, bias = torch.randn(d, generator=g, dtype=DT), torch.randn(d, generator=g, dtype=DT)
    assert torch.allclose(layer_norm(x, gain, bias), gain * out + bias, atol=1e-12)


def test_layer_norm_length_mismatch():
    try:
        layer_norm(torch.ones(4, dtype=DT), torch.ones(3, dtype=DT), torch.zeros(4, dtype=DT))
    except InvalidArgument:
        return
    raise AssertionError("length mismatch was accepted")


def test_attention_single_token():
    g = torch.Generator().manual_seed(3)
    weights = _attention_weights(8, g)
    h = torch.randn(1, 8, generator=g, dtype=DT)
    out, attention = causal_mha(h, weights, 2)
    assert torch.equal(attention, torch.ones(2, 1, 1, dtype=DT))
    assert torch.allclose(out, (h @ weights.w_v) @ weights.w_o, atol=1e-12)


def test_attention_identical_keys():
    d = 4
    weights = AttentionWeights(*(torch.eye(d, dtype=DT) for _ in range(4)))
    h = torch.tensor([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]], dtype=DT)
    _, attention = causal_mha(h, weights, 1)
    assert torch.allclose(attention[0, 1], torch.tensor([0.5, 0.5], dtype=DT), atol=1e-12)


def test_attention_matches_per_row_loop():
    """Independent per-row evaluation in numpy"""
    g = torch.Generator().manual_seed(4)
    k, d, n_heads = 3, 8, 2
    weights = _attention_weights(d, g)
    h = torch.randn(k, d, generator=g, dtype=DT)
    out, attention = causal_mha(h, weights, n_heads)

    H = h.numpy()
    Wq, Wk, Wv, Wo = (w.numpy() for w in weights)
    d_k = d // n_heads
    expected = np.zeros((k, d))
    for i in range(k):
        heads = []
        for head in range(n_heads):
            cols = slice(head * d_k, (head + 1) * d_k)
            q = H[i] @ Wq[:, cols]
            keys = H[: i + 1] @ Wk[:, cols]
            values = H[: i + 1] @ Wv[:, cols]
            scores = keys @ q / math.sqrt(d_k)
            p = np.exp(scores - scores.max())
            p /= p.sum()
            assert np.allclose(attention[head, i, : i + 1].numpy(), p, atol=1e-12)
            heads.append(p @ values)
        expected[i] = np.concatenate(heads) @ Wo
    assert np.max(np.abs(out.numpy() - expected)) <= 1e-10


def test_attention_rows_and_mask():
    g = torch.Generator().manual_seed(5)
    k, d = 6, 8
    _, attention = causal_mha(torch.randn(3, k, d, generator=g, dtype=DT), _attention_weights(d, g), 4)
    upper = torch.ones(k, k, dtype=torch.bool).triu(diagonal=1)
    assert torch.all(attention[..., upper] == 0.0)
    assert torch.max(torch.abs(attention.sum(dim=-1) - 1.0)) <= 1e-9


def test_attention_causality():
    g = torch.Generator().manual_seed(6)
    k, d = 5, 8
    weights = _attention_weights(d, g)
    for _ in range(50):
        h = torch.randn(k, d, generator=g, dtype=DT)
        j = int(torch.randint(k, (1,), generator=g))
        perturbed = h.clone()
        perturbed[j] += torch.randn(d, generator=g, dtype=DT)
        a, _ = causal_mha(h, weights, 2)
        b, _ = causal_mha(perturbed, weights, 2)
        assert torch.max(torch.abs(a[:j] - b[:j])).item() <= 1e-12 if j else True


def test_attention_head_split_error():
    g = torch.Generator().manual_seed(7)
    try:
        causal_mha(torch.randn(2, 6, generator=g, dtype=DT), _attention_weights(6, g), 4)
    except ConfigError:
        return
    raise AssertionError("d=6 with 4 heads was accepted")


def test_ffn_position_wise():
    g = torch.Generator().manual_seed(8)
    d, hidden = 4, 16
    zero = FFNWeights(torch.zeros(d, hidden, dtype=DT), torch.zeros(hidden, dtype=DT),
                      torch.zeros(hidden, d, dtype=DT), torch.zeros(d, dtype=DT))
    assert torch.equal(ffn(torch.randn(3, d, generator=g, dtype=DT), zero), torch.zeros(3, d, dtype=DT))

    weights = FFNWeights(torch.randn(d, hidden, generator=g, dtype=DT), torch.randn(hidden, generator=g, dtype=DT),
                         torch.randn(hidden, d, generator=g, dtype=DT), torch.randn(d, generator=g, dtype=DT))
    h = torch.randn(5, d, generator=g, dtype=DT)
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert torch.allclose(ffn(h[perm], weights), ffn(h, weights)[perm], atol=1e-12)

    W1, b1, W2, b2 = (w.numpy() for w in weights)
    for row in range(5):
        x = h[row].numpy()
        hidden_units = [max(0.0, sum(x[i] * W1[i, j] for i in range(d)) + b1[j]) for j in range(hidden)]
        expected = [sum(hidden_units[j] * W2[j, c] for j in range(hidden)) + b2[c] for c in range(d)]
        assert np.max(np.abs(ffn(h, weights)[row].numpy() - np.array(expected))) <= 1e-12


def test_ffn_shape_error():
    try:
        bad = FFNWeights(*(torch.ones(*shape, dtype=DT) for shape in ((3, 8), (8,), (8, 4), (4,))))
        ffn(torch.ones(2, 4, dtype=DT), bad)
    except ConfigError:
        return
    raise AssertionError("mis-shaped ffn weights were accepted")


def test_combine_kinds():
    g = torch.Generator().manual_seed(9)
    a, b = torch.randn(3, 4, generator=g, dtype=DT), torch.randn(3, 4, generator=g, dtype=DT)
    assert torch.equal(combine(a, b, "residual"), a + b)
    assert torch.equal(combine(a, b, "passthrough"), a)
    # update-gate bias +10 with unscaled weights: small inputs keep z near sigmoid(-10)
    gate = _gate_weights(4, g, bias=10.0)
    small_a, small_b = 0.1 * a, 0.1 * b
    z = torch.sigmoid(small_a @ gate.w_z + small_b @ gate.u_z - gate.b_g)
    assert torch.max(z) <= torch.sigmoid(torch.tensor(-8.0, dtype=DT))
    saturated = combine(small_a, small_b, "gru_gate", gate)
    assert torch.max(torch.abs(saturated - small_b)) <= 1e-3
    zero = torch.zeros(3, 4, dtype=DT)
    assert torch.equal(combine(zero, zero, "gru_gate", gate), zero)
    for kind, gate in (("sum", None), ("gru_gate", None)):
        try:
            combine(a, b, kind, gate)
        except ConfigError:
            continue
        raise AssertionError(f"combine accepted kind={kind} gate={gate}")


def test_gru_gate_matches_scalar_loop():
    g = torch.Generator().manual_seed(10)
    d = 3
    gate = _gate_weights(d, g)
    y, x = torch.randn(2, d, generator=g, dtype=DT), torch.randn(2, d, generator=g, dtype=DT)
    out = combine(y, x, "gru_gate", gate).numpy()
    Wr, Ur, Wz, Uz, Wg, Ug = (w.numpy() for w in gate[:6])
    bg = gate.b_g.numpy()

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    for row in range(2):
        xr, yr = x[row].numpy(), y[row].numpy()
        r = [sigmoid(sum(yr[i] * Wr[i, j] + xr[i] * Ur[i, j] for i in range(d))) for j in range(d)]
        z = [sigmoid(sum(yr[i] * Wz[i, j] + xr[i] * Uz[i, j] for i in range(d)) - bg[j]) for j in range(d)]
        cand = [math.tanh(sum(yr[i] * Wg[i, j] + r[i] * xr[i] * Ug[i, j] for i in range(d))) for j in range(d)]
        expected = [(1 - z[j]) * xr[j] + z[j] * cand[j] for j in range(d)]
        assert np.max(np.abs(out[row] - np.array(expected))) <= 1e-12


def test_sinusoidal_closed_form():
    k, d = 10, 8
    table = sinusoidal_table(k, d, torch.float64).numpy()
    for pos in range(k):
        for i in range(d // 2):
            angle = pos / (10000.0 ** (2 * i / d))
            assert abs(table[pos, 2 * i] - math.sin(angle)) <= 1e-12
            assert abs(table[pos, 2 * i + 1] - math.cos(angle)) <= 1e-12


def test_grad_check_simple_functions():
    x = torch.tensor([1.0], dtype=DT, requires_grad=True)
    assert grad_check(lambda: (x ** 2).sum(), [x]) <= 1e-8

    g = torch.Generator().manual_seed(11)
    logits = torch.randn(6, generator=g, dtype=DT, requires_grad=True)
    fixed = torch.randn(6, generator=g, dtype=DT)
    assert grad_check(lambda: (softmax(logits) * fixed).sum(), [logits]) <= 1e-5


def test_grad_check_attention_block():
    """Random configurations of attention, FFN and both combine kinds"""
    g = torch.Generator().manual_seed(12)
    for trial in range(20):
        k, d, heads = 3, 4, 2
        attn = [w.requires_grad_() for w in _attention_weights(d, g)]
        gate = [w.requires_grad_() for w in _gate_weights(d, g)]
        ffn_w = [torch.randn(*shape, generator=g, dtype=DT).requires_grad_() for shape in ((d, 8), (8,), (8, d), (d,))]
        gain, bias = torch.ones(d, requires_grad=True, dtype=DT), torch.zeros(d, requires_grad=True, dtype=DT)
        h = torch.randn(k, d, generator=g, dtype=DT)
        kind = "gru_gate" if trial % 2 else "residual"

        def f():
            out, _ = causal_mha(h, AttentionWeights(*attn), heads)
            x = layer_norm(combine(out, h, kind, GateWeights(*gate)), gain, bias)
            return combine(ffn(x, FFNWeights(*ffn_w)), x, kind, GateWeights(*gate)).pow(2).sum()

        params = attn + ffn_w + [gain, bias] + (gate if kind == "gru_gate" else [])
        assert grad_check(f, params) <= 1e-4


def test_grad_check_catches_wrong_gradient():
    class WrongSquare(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x * x

        @staticmethod
        def backward(ctx, grad):
            (x,) = ctx.saved_tensors
            return 3.0 * x * grad

    x = torch.tensor([1.5], dtype=DT, requires_grad=True)
    assert grad_check(lambda: WrongSquare.apply(x).sum(), [x]) > 0.1


def test_grad_check_non_finite():
    x = torch.tensor([0.0], dtype=DT, requires_grad=True)
    try:
        grad_check(lambda: (torch.log(x) * 0 + 1 / x).sum(), [x])
    except DiagnosticError:
        return
    raise AssertionError("non-finite f was not reported")


def main():
    """Run all tests"""
    print("🧮 Numerics Tests")
    print("=" * 50)

    tests = [
        test_softmax_values,
        test_softmax_empty_rejected,
        test_layer_norm_statistics,
        test_layer_norm_length_mismatch,
        test_attention_single_token,
        test_attention_identical_keys,
        test_attention_matches_per_row_loop,
        test_attention_rows_and_mask,
        test_attention_causality,
        test_attention_head_split_error,
        test_ffn_position_wise,
        test_ffn_shape_error,
        test_combine_kinds,
        test_gru_gate_matches_scalar_loop,
        test_sinusoidal_closed_form,
        test_grad_check_simple_functions,
        test_grad_check_attention_block,
        test_grad_check_catches_wrong_gradient,
        test_grad_check_non_finite,
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
