"""Zero-gated cross-attention fusion of expert queries into decoder layers.

Each (layer, modality) pair owns its own cross-attention weights plus one
scalar gate initialized to exactly 0.0, so a freshly built adapter bank
leaves the base model's forward pass bit-for-bit unchanged. The expert
queries themselves are computed once per sample and shared by every layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FusionShapeError
from .numerics import (
    Parameter,
    Tape,
    Tensor,
    add,
    as_matrix,
    attention_normalize,
    matmul,
    mul,
    param_or_value,
    seeded_rng,
    transpose,
)
from .transformer import LanguageModel, block_forward, embed_tokens

MODALITIES = ("percept", "detect")


@dataclass
class ExpertQuery:
    """A fixed-length stack of expert tokens in embedding space (M x d_emb)."""

    modality: str
    tokens: "np.ndarray | Tensor"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not isinstance(self.tokens, Tensor):
            self.tokens = as_matrix(self.tokens, f"{self.modality} query")
        if self.tokens.shape[0] < 1:
            raise FusionShapeError(f"{self.modality} query needs at least one token row")


@dataclass
class AdapterState:
    """Cross-attention weights and the scalar zero gate for one (layer, modality)."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    gate: Parameter

    @classmethod
    def create(
        cls, prefix: str, d_emb: int, rng: np.random.Generator, init_std: float
    ) -> "AdapterState":
        def weight(tag: str) -> Parameter:
            return Parameter(f"{prefix}.w_{tag}", rng.normal(0.0, init_std, (d_emb, d_emb)))

        return cls(
            weight("q"), weight("k"), weight("v"), weight("o"),
            Parameter(f"{prefix}.gate", np.zeros((1, 1))),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.gate]


class AdapterBank:
    """One AdapterState per (layer, modality), keyed by layer index."""

    def __init__(self, states: dict[tuple[int, str], AdapterState], n_layers: int):
        self._states = states
        self.n_layers = n_layers

    @classmethod
    def build(cls, n_layers: int, d_emb: int, seed: int, init_std: float | None = None) -> "AdapterBank":
        rng = seeded_rng(seed, "adapters")
        std = init_std if init_std is not None else 1.0 / np.sqrt(d_emb)
        states = {
            (layer, modality): AdapterState.create(
                f"adapter.layer{layer}.{modality}", d_emb, rng, std
            )
            for layer in range(n_layers)
            for modality in MODALITIES
        }
        return cls(states, n_layers)

    def state(self, layer: int, modality: str) -> AdapterState:
        return self._states[(layer, modality)]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer in range(self.n_layers):
            for modality in MODALITIES:
                params.extend(self._states[(layer, modality)].parameters())
        return params


@dataclass
class FusedContext:
    """Everything `generate` needs to run the adapter-fused forward pass."""

    adapters: AdapterBank
    q_percept: ExpertQuery
    q_detect: ExpertQuery


def query_to_tok(state: AdapterState, z, query: ExpertQuery):
    """Cross-attend hidden rows over expert tokens: W_o(normalize(W_q(z) W_k(Q)^T) W_v(Q)).

    No causal mask (every position sees every expert token) and no residual;
    the output keeps the hidden state's N x d_emb shape for any M.
    """
    zd = z.data if isinstance(z, Tensor) else z
    qd = query.tokens.data if isinstance(query.tokens, Tensor) else query.tokens
    if zd.ndim != 2 or qd.ndim != 2 or zd.shape[1] != qd.shape[1]:
        raise FusionShapeError(
            f"hidden state {tuple(zd.shape)} and {query.modality} query "
            f"{tuple(qd.shape)} disagree on embedding width"
        )
    d_emb = zd.shape[1]
    tape = z.tape if isinstance(z, Tensor) else None
    wq = matmul(z, param_or_value(state.w_q, tape))
    wk = matmul(query.tokens, param_or_value(state.w_k, tape))
    wv = matmul(query.tokens, param_or_value(state.w_v, tape))
    att = attention_normalize(matmul(wq, transpose(wk)), d_emb, causal=False)
    return matmul(matmul(att, wv), param_or_value(state.w_o, tape))


def merge_layer(block_out, tok_percept, tok_detect, g_percept, g_detect):
    """block_out + g_percept * tok_percept + g_detect * tok_detect.

    Gates may be floats, 1x1 matrices, or traced gate parameters; with both
    gates zero the output equals block_out exactly.
    """
    shapes = {
        tuple((x.data if isinstance(x, Tensor) else np.asarray(x)).shape)
        for x in (block_out, tok_percept, tok_detect)
    }
    if len(shapes) != 1:
        raise FusionShapeError(f"merge_layer shape mismatch: {sorted(shapes)}")

    def as_gate(g):
        if isinstance(g, (int, float)):
            return np.array([[float(g)]])
        return g

    merged = add(block_out, mul(tok_percept, as_gate(g_percept)))
    return add(merged, mul(tok_detect, as_gate(g_detect)))


def fused_forward(
    model: LanguageModel,
    adapters: AdapterBank,
    q_percept: ExpertQuery,
    q_detect: ExpertQuery,
    token_ids,
    tape: Tape | None = None,
):
    """Layer stack where every block output is merged with both gated expert tokens."""
    if adapters.n_layers != model.config.n_layers:
        raise FusionShapeError(
            f"adapter bank covers {adapters.n_layers} layers, model has "
            f"{model.config.n_layers}"
        )
    h = embed_tokens(model, token_ids, tape)
    for index, layer in enumerate(model.layers):
        block_out = block_forward(layer, h, causal=True, max_seq=model.config.max_seq)
        p_state = adapters.state(index, "percept")
        d_state = adapters.state(index, "detect")
        tok_p = query_to_tok(p_state, h, q_percept)
        tok_d = query_to_tok(d_state, h, q_detect)
        h = merge_layer(
            block_out,
            tok_p,
            tok_d,
            param_or_value(p_state.gate, tape),
            param_or_value(d_state.gate, tape),
        )
    return h
