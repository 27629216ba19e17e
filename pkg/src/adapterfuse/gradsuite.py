"""Named finite-difference checks over every differentiable path.

Each entry rebuilds a small scalar objective from fresh seeded parameters
and reports grad_check's worst relative error; the CLI `gradcheck` command
prints one line per entry.
"""

from __future__ import annotations

from .dataset import QAPair
from .experts import CameraFeatureSet, ExpertConfig
from .fusion import AdapterState, ExpertQuery, query_to_tok
from .numerics import (
    Parameter,
    cross_entropy,
    grad_check,
    matmul,
    mul,
    param_or_value,
    row_softmax,
    seeded_rng,
    sum_entries,
)
from .pipeline import FusedPipeline
from .training import FreezePlan, answer_loss
from .transformer import LanguageModel, ModelConfig, transformer_forward


def random_feature_set(rng, config: ExpertConfig) -> CameraFeatureSet:
    cameras = [rng.normal(0.0, 1.0, (config.n_det, config.d_yolos)) for _ in range(6)]
    perception = rng.normal(0.0, 1.0, (config.n_percept, config.d_clip))
    return CameraFeatureSet(cameras, perception)


def check_matmul(seed: int = 0) -> float:
    rng = seeded_rng(seed, "gradsuite-matmul")
    a = Parameter("a", rng.uniform(-1.0, 1.0, (4, 5)))
    b = Parameter("b", rng.uniform(-1.0, 1.0, (5, 3)))

    def objective(tape):
        return sum_entries(matmul(param_or_value(a, tape), param_or_value(b, tape)))

    return grad_check(objective, [a, b])


def check_row_softmax(seed: int = 0) -> float:
    rng = seeded_rng(seed, "gradsuite-softmax")
    m = Parameter("m", rng.uniform(-1.0, 1.0, (2, 4)))
    probe = rng.uniform(-1.0, 1.0, (2, 4))

    def objective(tape):
        return sum_entries(mul(row_softmax(param_or_value(m, tape)), probe))

    return grad_check(objective, [m])


def check_transformer_loss(seed: int = 0) -> float:
    config = ModelConfig(d_seq=16, d_emb=8, d_vocab=16, n_layers=2, max_seq=8, seed=seed)
    model = LanguageModel.build(config)
    ids = [1, 5, 9, 13]
    targets = [5, 9, 13, 2]

    def objective(tape):
        z = transformer_forward(model, ids, tape)
        logits = matmul(z, param_or_value(model.head, tape))
        return cross_entropy(logits, targets, list(range(len(ids))))

    return grad_check(objective, model.parameters())


def check_query_to_tok(seed: int = 0) -> float:
    rng = seeded_rng(seed, "gradsuite-xattn")
    d_emb = 6
    state = AdapterState.create("adapter.layer0.percept", d_emb, rng, 0.4)
    z = rng.uniform(-1.0, 1.0, (3, d_emb))
    q = rng.uniform(-1.0, 1.0, (4, d_emb))
    probe = rng.uniform(-1.0, 1.0, (3, d_emb))

    def objective(tape):
        hidden = z if tape is None else tape.constant(z)
        tok = query_to_tok(state, hidden, ExpertQuery("percept", q))
        return sum_entries(mul(tok, probe))

    return grad_check(objective, [state.w_q, state.w_k, state.w_v, state.w_o])


def check_fused_answer_loss(seed: int = 0, d_emb: int = 16, n_det: int = 2) -> float:
    """Full fused answer loss over every stage-1 trainable parameter.

    Uses 2 layers, an 8-token input sequence, and a detect query of
    6 + 6 * 2 = 18 rows; gates are moved off zero so every adapter and
    expert parameter sees gradient.
    """
    config = ModelConfig(d_emb=d_emb, n_layers=2, max_seq=8, seed=seed)
    experts = ExpertConfig(d_yolos=8, d_clip=8, n_det=n_det, prefix_len=2, n_percept=3)
    pipeline = FusedPipeline.build(config, experts)
    rng = seeded_rng(seed, "gradsuite-fused")
    feats = random_feature_set(rng, experts)
    for layer in range(config.n_layers):
        for modality in ("percept", "detect"):
            pipeline.adapters.state(layer, modality).gate.value[...] = 0.5
    qa = QAPair(id="g", question="abc", answer="de5?", tag=0, feature_ref="unused")
    named = pipeline.named_parameters()
    FreezePlan.default(config.n_layers).apply(1, named)
    trainable = [p for p in named.values() if p.trainable]

    def objective(tape):
        return answer_loss(pipeline, qa, feats, tape)

    return grad_check(objective, trainable)


def run_gradient_suite(seed: int = 0) -> dict[str, float]:
    return {
        "matmul": check_matmul(seed),
        "row_softmax": check_row_softmax(seed),
        "transformer_cross_entropy": check_transformer_loss(seed),
        "query_to_tok": check_query_to_tok(seed),
        "fused_answer_loss": check_fused_answer_loss(seed),
    }
