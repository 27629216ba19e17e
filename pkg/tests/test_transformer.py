"""Decoder block, forward pass, prediction, generation, and checkpoints."""

import numpy as np
import pytest

from adapterfuse.checkpoint import (
    CHECKPOINT_MAGIC,
    dumps_checkpoint,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
)
from adapterfuse.errors import CapacityError, CheckpointError, VocabularyError
from adapterfuse.experts import ExpertConfig
from adapterfuse.numerics import seeded_rng
from adapterfuse.pipeline import FusedPipeline
from adapterfuse.transformer import (
    ByteVocabulary,
    LanguageModel,
    ModelConfig,
    block_forward,
    generate,
    predict_next,
    transformer_forward,
)


def zeroed_model(**overrides) -> LanguageModel:
    config = ModelConfig(**{"d_seq": 8, "d_emb": 4, "d_vocab": 8, "n_layers": 2,
                            "max_seq": 6, "seed": 0, **overrides})
    model = LanguageModel.build(config)
    for p in model.parameters():
        p.value[...] = 0.0
    return model


def small_model(seed=0, **overrides) -> LanguageModel:
    config = ModelConfig(**{"d_seq": 16, "d_emb": 6, "d_vocab": 16, "n_layers": 2,
                            "max_seq": 10, "seed": seed, "init_std": 0.2, **overrides})
    return LanguageModel.build(config)


def test_block_forward_zero_weights_is_identity():
    model = zeroed_model()
    z = seeded_rng(1, "blk").uniform(-1.0, 1.0, (3, 4))
    out = block_forward(model.layers[0], z)
    assert np.array_equal(out, z)


def test_block_forward_single_token_matches_direct_formula():
    model = small_model()
    layer = model.layers[0]
    z = seeded_rng(2, "blk1").uniform(-1.0, 1.0, (1, 6))
    out = block_forward(layer, z)
    # N=1: softmax of the single score is 1, so out = z + W_o(W_v(z))
    v = z @ layer.w_v.value + layer.b_v.value
    expected = z + v @ layer.w_o.value + layer.b_o.value
    assert np.allclose(out, expected, atol=1e-14)


def test_block_forward_causality_last_row_ignores_future():
    model = small_model(seed=3)
    layer = model.layers[0]
    rng = seeded_rng(3, "causal")
    z3 = rng.uniform(-1.0, 1.0, (3, 6))
    z4 = np.vstack([z3, rng.uniform(-1.0, 1.0, (1, 6))])
    out3 = block_forward(layer, z3)
    out4 = block_forward(layer, z4)
    assert np.array_equal(out3, out4[:3])


def test_block_forward_capacity_error():
    model = small_model()
    z = np.zeros((11, 6))
    with pytest.raises(CapacityError):
        block_forward(model.layers[0], z, max_seq=10)


def test_transformer_forward_zero_model_returns_embeddings():
    model = zeroed_model()
    rng = seeded_rng(4, "emb")
    model.f_init_tok.value[...] = rng.uniform(-1.0, 1.0, model.f_init_tok.shape)
    model.f_init_pos.value[...] = rng.uniform(-1.0, 1.0, model.f_init_pos.shape)
    ids = [1, 5, 2]
    z = transformer_forward(model, ids)
    expected = model.f_init_tok.value[ids] + model.f_init_pos.value[:3]
    assert np.array_equal(z, expected)


def test_transformer_forward_hand_fixture():
    """One layer, d_emb 2, two tokens; expected values from a straight-numpy
    evaluation of z + W_o(softmax(causal(q k^T / sqrt(2))) v) + b_o."""
    config = ModelConfig(d_seq=4, d_emb=2, d_vocab=4, n_layers=1, max_seq=2, seed=0)
    model = LanguageModel.build(config)
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
    z = transformer_forward(model, [1, 3])
    expected = np.array(
        [
            [0.3405, -0.09350000000000001],
            [0.5659684948484041, 0.11770499721687373],
        ]
    )
    assert np.allclose(z, expected, atol=1e-15)


def test_transformer_forward_shape_contract():
    model = small_model()
    for n in (1, 4, 10):
        z = transformer_forward(model, list(range(n)))
        assert z.shape == (n, 6)


def test_transformer_forward_prefix_causality():
    model = small_model(seed=9)
    ids = [3, 1, 4, 1, 5]
    full = transformer_forward(model, ids)
    for cut in range(1, len(ids) + 1):
        prefix = transformer_forward(model, ids[:cut])
        assert np.array_equal(prefix, full[:cut])


def test_transformer_forward_unknown_token():
    model = small_model()
    with pytest.raises(VocabularyError):
        transformer_forward(model, [0, 99])


def test_transformer_forward_too_long():
    model = small_model()
    with pytest.raises(CapacityError):
        transformer_forward(model, list(range(11)))


def test_predict_next_zero_head_uniform_and_lowest_id():
    model = small_model()
    model.head.value[...] = 0.0
    z = seeded_rng(5, "pred").uniform(-1.0, 1.0, (3, 6))
    assert predict_next(model, z, mode="greedy") == 0


def test_predict_next_dominant_column():
    model = small_model()
    z = np.zeros((2, 6))
    z[-1, 0] = 1.0
    model.head.value[...] = 0.0
    model.head.value[0, 11] = 10.0  # logit of token 11 dominates
    assert predict_next(model, z, mode="greedy") == 11


def test_predict_next_softmax_normalized():
    from adapterfuse.transformer import softmax_1d

    rng = seeded_rng(6, "softmax1d")
    probs = softmax_1d(rng.uniform(-5.0, 5.0, 16))
    assert abs(probs.sum() - 1.0) < 1e-12


def test_predict_next_sampling_reproducible():
    model = small_model(seed=8)
    z = seeded_rng(8, "sample").uniform(-1.0, 1.0, (2, 6))
    draws_a = [predict_next(model, z, mode="sample", rng=123) for _ in range(5)]
    draws_b = [predict_next(model, z, mode="sample", rng=123) for _ in range(5)]
    assert draws_a == draws_b


def test_generate_max_new_zero_returns_prompt():
    model = small_model()
    assert generate(model, [1, 2, 3], max_new=0) == [1, 2, 3]


def test_generate_stops_at_eos():
    # constant embeddings + zero layers + head pointing at [eos] emit [eos]
    config = ModelConfig(n_layers=1, d_emb=4, max_seq=8, seed=0)
    model = LanguageModel.build(config)
    for p in model.parameters():
        p.value[...] = 0.0
    model.f_init_pos.value[...] = 0.5
    model.head.value[:, model.vocab.eos_id] = 5.0
    out = generate(model, [model.vocab.bos_id], max_new=6)
    assert out == [model.vocab.bos_id, model.vocab.eos_id]


def test_generate_greedy_deterministic():
    model = small_model(seed=10)
    a = generate(model, [1, 2], max_new=5)
    b = generate(model, [1, 2], max_new=5)
    assert a == b


def test_generate_propagates_capacity_error():
    model = small_model()
    with pytest.raises(CapacityError):
        generate(model, list(range(10)), max_new=3)


def test_vocabulary_round_trip():
    vocab = ByteVocabulary()
    text = "where is the cyclist? <16.0,48.0>"
    assert vocab.decode(vocab.encode(text)) == text
    assert vocab.size == 259
    assert {vocab.bos_id, vocab.eos_id, vocab.pad_id} == {256, 257, 258}


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_vocab=1)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(d_seq=10, d_vocab=20)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    pipeline = FusedPipeline.build(
        ModelConfig(d_emb=8, n_layers=2, max_seq=12, seed=4),
        ExpertConfig(d_yolos=8, d_clip=8, n_det=2, prefix_len=2, n_percept=3),
    )
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, pipeline)
    restored = load_checkpoint(path)
    assert restored.model.config == pipeline.model.config
    original = pipeline.named_parameters()
    for name, p in restored.named_parameters().items():
        assert p.value.tobytes() == original[name].value.tobytes(), name
    # identical pipelines serialize to identical bytes
    assert dumps_checkpoint(restored) == dumps_checkpoint(pipeline)


def test_checkpoint_magic_header(tmp_path):
    pipeline = FusedPipeline.build(
        ModelConfig(d_emb=4, n_layers=1, max_seq=8, seed=0),
        ExpertConfig(d_yolos=4, d_clip=4, n_det=1, prefix_len=1, n_percept=1),
    )
    text = dumps_checkpoint(pipeline)
    assert text.startswith(CHECKPOINT_MAGIC + "\n")
    with pytest.raises(CheckpointError):
        loads_checkpoint("NOT-A-CHECKPOINT\n{}")


def test_checkpoint_rejects_mismatched_params():
    pipeline = FusedPipeline.build(
        ModelConfig(d_emb=4, n_layers=1, max_seq=8, seed=0),
        ExpertConfig(d_yolos=4, d_clip=4, n_det=1, prefix_len=1, n_percept=1),
    )
    text = dumps_checkpoint(pipeline)
    import json

    magic, body = text.split("\n", 1)
    payload = json.loads(body)
    payload["params"].pop("lm.head")
    with pytest.raises(CheckpointError):
        loads_checkpoint(magic + "\n" + json.dumps(payload))
