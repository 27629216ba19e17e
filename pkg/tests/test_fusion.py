"""Cross-attention adapters, zero gates, and the fused forward pass."""

import numpy as np
import pytest

from adapterfuse.errors import FusionShapeError
from adapterfuse.experts import ExpertConfig
from adapterfuse.fusion import (
    AdapterBank,
    AdapterState,
    ExpertQuery,
    fused_forward,
    merge_layer,
    query_to_tok,
)
from adapterfuse.numerics import (
    Parameter,
    Tape,
    grad_check,
    mul,
    param_or_value,
    seeded_rng,
    sum_entries,
)
from adapterfuse.pipeline import FusedPipeline
from adapterfuse.transformer import ModelConfig, embed_tokens, transformer_forward


def make_state(seed=0, d_emb=6, std=0.4) -> AdapterState:
    return AdapterState.create("adapter.layer0.percept", d_emb, seeded_rng(seed, "state"), std)


def small_pipeline(seed=0, d_emb=8) -> FusedPipeline:
    return FusedPipeline.build(
        ModelConfig(d_emb=d_emb, n_layers=2, max_seq=16, seed=seed, init_std=0.2),
        ExpertConfig(d_yolos=8, d_clip=8, n_det=2, prefix_len=2, n_percept=3),
    )


def test_gate_initialized_to_exactly_zero():
    bank = AdapterBank.build(n_layers=3, d_emb=4, seed=5)
    for layer in range(3):
        for modality in ("percept", "detect"):
            gate = bank.state(layer, modality).gate
            assert gate.value.shape == (1, 1)
            assert gate.value[0, 0] == 0.0


def test_query_to_tok_single_token_broadcasts():
    state = make_state()
    rng = seeded_rng(1, "m1")
    z = rng.uniform(-1.0, 1.0, (3, 6))
    q = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (1, 6)))
    tok = query_to_tok(state, z, q)
    # M=1: softmax weights are all 1; every row is W_o(W_v(Q))
    expected_row = (q.tokens @ state.w_v.value) @ state.w_o.value
    assert np.allclose(tok, np.repeat(expected_row, 3, axis=0), atol=1e-14)


def test_query_to_tok_zero_output_projection():
    state = make_state()
    state.w_o.value[...] = 0.0
    rng = seeded_rng(2, "wo0")
    z = rng.uniform(-1.0, 1.0, (2, 6))
    q = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (4, 6)))
    assert np.array_equal(query_to_tok(state, z, q), np.zeros((2, 6)))


def test_query_to_tok_shape_contract():
    state = make_state()
    rng = seeded_rng(3, "shapes")
    z = rng.uniform(-1.0, 1.0, (5, 6))
    for m in (1, 7, 24):
        q = ExpertQuery("detect", rng.uniform(-1.0, 1.0, (m, 6)))
        assert query_to_tok(state, z, q).shape == (5, 6)


def test_query_to_tok_dim_mismatch():
    state = make_state()
    z = np.zeros((3, 6))
    with pytest.raises(FusionShapeError):
        query_to_tok(state, z, ExpertQuery("percept", np.zeros((2, 5))))


def test_query_to_tok_gradients_all_four_weights():
    state = make_state(seed=4)
    rng = seeded_rng(4, "grads")
    z = rng.uniform(-1.0, 1.0, (3, 6))
    q = rng.uniform(-1.0, 1.0, (4, 6))
    probe = rng.uniform(-1.0, 1.0, (3, 6))

    def objective(tape):
        hidden = z if tape is None else tape.constant(z)
        tok = query_to_tok(state, hidden, ExpertQuery("percept", q))
        return sum_entries(mul(tok, probe))

    assert grad_check(objective, [state.w_q, state.w_k, state.w_v, state.w_o]) < 1e-5


def test_merge_layer_zero_gates_identity():
    rng = seeded_rng(5, "merge")
    block = rng.uniform(-1.0, 1.0, (4, 6))
    tok_p = rng.uniform(-1.0, 1.0, (4, 6))
    tok_d = rng.uniform(-1.0, 1.0, (4, 6))
    out = merge_layer(block, tok_p, tok_d, 0.0, 0.0)
    assert np.array_equal(out, block)


def test_merge_layer_unit_gate():
    rng = seeded_rng(6, "merge1")
    block = rng.uniform(-1.0, 1.0, (4, 6))
    tok_p = rng.uniform(-1.0, 1.0, (4, 6))
    out = merge_layer(block, tok_p, np.zeros((4, 6)), 1.0, 1.0)
    assert np.allclose(out, block + tok_p, atol=1e-15)


def test_merge_layer_shape_mismatch():
    with pytest.raises(FusionShapeError):
        merge_layer(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)), 0.0, 0.0)


def test_merge_layer_gate_gradient_matches_finite_differences():
    rng = seeded_rng(7, "gategrad")
    block = rng.uniform(-1.0, 1.0, (3, 5))
    tok_p = rng.uniform(-1.0, 1.0, (3, 5))
    tok_d = rng.uniform(-1.0, 1.0, (3, 5))
    probe = rng.uniform(-1.0, 1.0, (3, 5))
    g_p = Parameter("g_p", np.array([[0.3]]))
    g_d = Parameter("g_d", np.array([[-0.2]]))

    def objective(tape):
        merged = merge_layer(
            block, tok_p, tok_d, param_or_value(g_p, tape), param_or_value(g_d, tape)
        )
        return sum_entries(mul(merged, probe))

    assert grad_check(objective, [g_p, g_d]) < 1e-5


def test_fused_forward_zero_gate_identity_bit_exact():
    for seed in range(3):
        pipeline = small_pipeline(seed=seed)
        rng = seeded_rng(seed, "identity")
        ids = list(rng.integers(0, 259, size=7))
        q_p = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (2, 8)))
        q_d = ExpertQuery("detect", rng.uniform(-1.0, 1.0, (18, 8)))
        base = transformer_forward(pipeline.model, ids)
        fused = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d, ids)
        assert base.tobytes() == fused.tobytes()


def test_fused_forward_hand_fixture():
    """Single layer, N=2, M=1 per modality; expected rows computed with a
    straight-numpy oracle of Eq-style block + g_p*tok_p + g_d*tok_d."""
    config = ModelConfig(d_seq=4, d_emb=2, d_vocab=4, n_layers=1, max_seq=2, seed=0)
    pipeline = FusedPipeline.build(
        config, ExpertConfig(d_yolos=4, d_clip=4, n_det=1, prefix_len=1, n_percept=1)
    )
    model = pipeline.model
    model.f_init_tok.value[...] = [[0.1, 0.2], [0.3, -0.1], [-0.2, 0.4], [0.5, 0.0]]
    model.f_init_pos.value[...] = [[0.01, -0.02], [0.03, 0.04]]
    layer = model.layers[0]
    layer.w_q.value[...] = [[0.5, -0.3], [0.2, 0.1]]
    layer.w_k.value[...] = [[-0.1, 0.4], [0.3, 0.2]]
    layer.w_v.value[...] = [[0.2, 0.2], [-0.4, 0.5]]
    layer.w_o.value[...] = [[1.0, -0.5], [0.25, 0.75]]
    layer.b_q.value[...] = [[0.05, -0.05]]
    layer.b_k.value[...] = [[0.0, 0.1]]
    layer.b_v.value[...] = [[-0.1, 0.0]]
    layer.b_o.value[...] = [[0.02, 0.03]]
    p_state = pipeline.adapters.state(0, "percept")
    d_state = pipeline.adapters.state(0, "detect")
    p_state.w_q.value[...] = [[0.3, 0.1], [-0.2, 0.4]]
    p_state.w_k.value[...] = [[0.6, -0.1], [0.2, 0.2]]
    p_state.w_v.value[...] = [[0.5, 0.0], [0.1, -0.3]]
    p_state.w_o.value[...] = [[0.7, 0.2], [-0.1, 0.9]]
    d_state.w_q.value[...] = [[0.2, -0.4], [0.3, 0.1]]
    d_state.w_k.value[...] = [[-0.3, 0.5], [0.4, 0.0]]
    d_state.w_v.value[...] = [[0.1, 0.6], [-0.2, 0.2]]
    d_state.w_o.value[...] = [[0.8, -0.3], [0.05, 0.45]]
    p_state.gate.value[...] = 0.5
    d_state.gate.value[...] = 0.25
    q_p = ExpertQuery("percept", np.array([[0.4, -0.6]]))
    q_d = ExpertQuery("detect", np.array([[0.2, 0.1]]))
    fused = fused_forward(model, pipeline.adapters, q_p, q_d, [1, 3])
    expected = np.array(
        [
            [0.38225, 0.017249999999999988],
            [0.6077184948484041, 0.22845499721687373],
        ]
    )
    assert np.allclose(fused, expected, atol=1e-15)


def test_fused_forward_detect_query_gated_off():
    pipeline = small_pipeline(seed=2)
    rng = seeded_rng(2, "gating")
    ids = [4, 8, 15]
    q_p = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (2, 8)))
    q_d1 = ExpertQuery("detect", rng.uniform(-1.0, 1.0, (5, 8)))
    q_d2 = ExpertQuery("detect", rng.uniform(-1.0, 1.0, (5, 8)))
    out1 = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d1, ids)
    out2 = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d2, ids)
    assert np.array_equal(out1, out2)  # g_detect == 0: q_d cannot matter
    for layer in range(2):
        pipeline.adapters.state(layer, "detect").gate.value[...] = 0.7
    out3 = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d1, ids)
    out4 = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d2, ids)
    assert not np.array_equal(out3, out4)


def test_gate_monotone_influence_single_layer():
    config = ModelConfig(d_emb=8, n_layers=1, max_seq=8, seed=3, init_std=0.2)
    pipeline = FusedPipeline.build(
        config, ExpertConfig(d_yolos=8, d_clip=8, n_det=1, prefix_len=1, n_percept=1)
    )
    rng = seeded_rng(3, "monotone")
    ids = [1, 2, 3]
    q_p = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (4, 8)))
    zero_d = ExpertQuery("detect", np.zeros((4, 8)))
    base = transformer_forward(pipeline.model, ids)
    state = pipeline.adapters.state(0, "percept")
    layer_input = embed_tokens(pipeline.model, ids)
    tok = query_to_tok(state, layer_input, q_p)
    for g in (0.25, -0.5, 2.0):
        state.gate.value[...] = g
        fused = fused_forward(pipeline.model, pipeline.adapters, q_p, zero_d, ids)
        diff_norm = np.linalg.norm(fused - base)
        assert diff_norm == pytest.approx(abs(g) * np.linalg.norm(tok), rel=1e-12)


def test_gate_attenuation_dilutes_perturbation_influence():
    """Shrinking one modality's gate attenuates how much a perturbation of
    that modality's query can move the output."""
    pipeline = small_pipeline(seed=6)
    rng = seeded_rng(6, "attenuate")
    ids = [2, 4, 6, 8]
    q_p = ExpertQuery("percept", rng.uniform(-1.0, 1.0, (2, 8)))
    q_d = ExpertQuery("detect", rng.uniform(-1.0, 1.0, (6, 8)))
    q_d_poisoned = ExpertQuery("detect", q_d.tokens + rng.uniform(-0.5, 0.5, (6, 8)))
    for layer in range(2):
        pipeline.adapters.state(layer, "percept").gate.value[...] = 0.8
    deltas = []
    for g_d in (1.0, 0.5, 0.25, 0.0):
        for layer in range(2):
            pipeline.adapters.state(layer, "detect").gate.value[...] = g_d
        clean = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d, ids)
        poisoned = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d_poisoned, ids)
        deltas.append(float(np.linalg.norm(poisoned - clean)))
    assert deltas[0] > deltas[1] > deltas[2] > deltas[3] == 0.0


def test_full_gradient_flow_through_all_adapter_parameters():
    pipeline = small_pipeline(seed=7)
    rng = seeded_rng(7, "flow")
    ids = [3, 5, 7]
    for layer in range(2):
        for modality in ("percept", "detect"):
            pipeline.adapters.state(layer, modality).gate.value[...] = 0.5
    tape = Tape()
    q_p = ExpertQuery("percept", tape.constant(rng.uniform(-1.0, 1.0, (2, 8))))
    q_d = ExpertQuery("detect", tape.constant(rng.uniform(-1.0, 1.0, (6, 8))))
    z = fused_forward(pipeline.model, pipeline.adapters, q_p, q_d, ids, tape)
    loss = sum_entries(mul(z, rng.uniform(-1.0, 1.0, (3, 8))))
    tape.backward(loss)
    for p in pipeline.adapters.parameters():
        assert np.abs(p.grad).max() > 0.0, f"no gradient reached {p.name}"


def test_expert_query_validation():
    with pytest.raises(ValueError):
        ExpertQuery("lidar", np.zeros((2, 4)))
    with pytest.raises(FusionShapeError):
        ExpertQuery("percept", np.zeros((0, 4)))
