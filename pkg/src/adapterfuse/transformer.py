"""Decoder-only toy language model: byte vocabulary, attention-only blocks.

A block is single-head attention with a residual connection and causal
masking folded into the normalizer; there is no feed-forward sublayer and no
layer norm. The initial projection is a token-embedding row lookup plus
learned absolute position embeddings, and the prediction head is one
d_emb x d_vocab matrix applied to the final row.

A model is immutable during inference, so concurrent forward passes over a
shared snapshot are fine; training mutates parameters and needs exclusive
access.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityError, VocabularyError
from .numerics import (
    Parameter,
    Tape,
    Tensor,
    add,
    add_bias,
    attention_normalize,
    gather_rows,
    matmul,
    param_or_value,
    seeded_rng,
    slice_rows,
    transpose,
)


class ByteVocabulary:
    """Byte-level vocabulary: ids 0..255 are raw bytes, then the reserved ids.

    encode/decode round-trip exactly on UTF-8 text; reserved ids are dropped
    when decoding.
    """

    bos_id = 256
    eos_id = 257
    pad_id = 258
    size = 259

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        raw = bytes(i for i in ids if 0 <= i < 256)
        return raw.decode("utf-8", errors="replace")

    def is_reserved(self, token_id: int) -> bool:
        return token_id in (self.bos_id, self.eos_id, self.pad_id)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seed of the toy decoder-only model.

    d_seq is the one-hot input dimension indexed by token ids, so it must be
    at least d_vocab. The defaults give a byte-level model (256 symbols plus
    [bos]/[eos]/[pad]).
    """

    d_seq: int = ByteVocabulary.size
    d_emb: int = 32
    d_vocab: int = ByteVocabulary.size
    n_layers: int = 2
    max_seq: int = 64
    seed: int = 0
    init_std: float = 0.02
    head_init_std: float | None = None

    def __post_init__(self):
        if min(self.d_seq, self.d_emb, self.n_layers, self.max_seq) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.d_vocab < 2:
            raise ValueError("d_vocab must be >= 2")
        if self.d_seq < self.d_vocab:
            raise ValueError("d_seq must be >= d_vocab (token ids index f_init rows)")

    @property
    def head_std(self) -> float:
        if self.head_init_std is not None:
            return self.head_init_std
        return 1.0 / float(np.sqrt(self.d_emb))


@dataclass
class DecoderLayer:
    """One attention block: four square projections plus their bias rows.

    Also reused as the bidirectional adaptation encoder of the expert paths
    (same parameters, no causal mask there).
    """

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    b_q: Parameter
    b_k: Parameter
    b_v: Parameter
    b_o: Parameter

    @classmethod
    def create(
        cls, prefix: str, dim: int, rng: np.random.Generator, init_std: float
    ) -> "DecoderLayer":
        def weight(tag: str) -> Parameter:
            return Parameter(f"{prefix}.w_{tag}", rng.normal(0.0, init_std, (dim, dim)))

        def bias(tag: str) -> Parameter:
            return Parameter(f"{prefix}.b_{tag}", np.zeros((1, dim)))

        return cls(
            weight("q"), weight("k"), weight("v"), weight("o"),
            bias("q"), bias("k"), bias("v"), bias("o"),
        )

    def parameters(self) -> list[Parameter]:
        return [
            self.w_q, self.w_k, self.w_v, self.w_o,
            self.b_q, self.b_k, self.b_v, self.b_o,
        ]


def block_forward(
    layer: DecoderLayer,
    z,
    *,
    causal: bool = True,
    max_seq: int | None = None,
):
    """z + W_o(normalize(W_q(z) W_k(z)^T) W_v(z)) over an N x d_emb input.

    The normalizer scales by 1/sqrt(d_emb) and, when causal, lets position i
    attend only to positions <= i. With all-zero weights the block is the
    identity (the residual path).
    """
    zd = z.data if isinstance(z, Tensor) else z
    n, d = zd.shape
    if max_seq is not None and n > max_seq:
        raise CapacityError(f"sequence length {n} exceeds max_seq {max_seq}")
    tape = z.tape if isinstance(z, Tensor) else None
    q = add_bias(matmul(z, param_or_value(layer.w_q, tape)), param_or_value(layer.b_q, tape))
    k = add_bias(matmul(z, param_or_value(layer.w_k, tape)), param_or_value(layer.b_k, tape))
    v = add_bias(matmul(z, param_or_value(layer.w_v, tape)), param_or_value(layer.b_v, tape))
    att = attention_normalize(matmul(q, transpose(k)), d, causal=causal)
    ctx = matmul(att, v)
    out = add_bias(matmul(ctx, param_or_value(layer.w_o, tape)), param_or_value(layer.b_o, tape))
    return add(z, out)


@dataclass
class LanguageModel:
    """Config, byte vocabulary, and every named parameter of the base model."""

    config: ModelConfig
    vocab: ByteVocabulary
    f_init_tok: Parameter
    f_init_pos: Parameter
    layers: list[DecoderLayer]
    head: Parameter

    @classmethod
    def build(cls, config: ModelConfig) -> "LanguageModel":
        rng = seeded_rng(config.seed, "lm")
        layers = [
            DecoderLayer.create(f"lm.layer{i}", config.d_emb, rng, config.init_std)
            for i in range(config.n_layers)
        ]
        head_std = config.head_std
        return cls(
            config=config,
            vocab=ByteVocabulary(),
            f_init_tok=Parameter(
                "lm.f_init.tok", rng.normal(0.0, config.init_std, (config.d_seq, config.d_emb))
            ),
            f_init_pos=Parameter(
                "lm.f_init.pos", rng.normal(0.0, config.init_std, (config.max_seq, config.d_emb))
            ),
            layers=layers,
            head=Parameter(
                "lm.head", rng.normal(0.0, head_std, (config.d_emb, config.d_vocab))
            ),
        )

    def parameters(self) -> list[Parameter]:
        params = [self.f_init_tok, self.f_init_pos]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.append(self.head)
        return params


def validate_token_ids(model: LanguageModel, token_ids: Sequence[int]) -> list[int]:
    ids = [int(t) for t in token_ids]
    if not ids:
        raise VocabularyError("token sequence is empty")
    for t in ids:
        if not 0 <= t < model.config.d_vocab:
            raise VocabularyError(
                f"token id {t} outside vocabulary of size {model.config.d_vocab}"
            )
    if len(ids) > model.config.max_seq:
        raise CapacityError(
            f"sequence length {len(ids)} exceeds max_seq {model.config.max_seq}"
        )
    return ids


def embed_tokens(model: LanguageModel, token_ids: Sequence[int], tape: Tape | None = None):
    """f_init: token embedding rows plus learned position embeddings."""
    ids = validate_token_ids(model, token_ids)
    tok = gather_rows(param_or_value(model.f_init_tok, tape), ids)
    pos = slice_rows(param_or_value(model.f_init_pos, tape), 0, len(ids))
    return add(tok, pos)


def transformer_forward(model: LanguageModel, token_ids: Sequence[int], tape: Tape | None = None):
    """Final N x d_emb embedding of the stacked causal decoder blocks."""
    h = embed_tokens(model, token_ids, tape)
    for layer in model.layers:
        h = block_forward(layer, h, causal=True, max_seq=model.config.max_seq)
    return h


def softmax_1d(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def predict_next(
    model: LanguageModel,
    z_final,
    mode: str = "greedy",
    rng: "np.random.Generator | int | None" = None,
) -> int:
    """Next-token id from the last row of z_final: argmax or seeded sample.

    Greedy ties break toward the lowest token id.
    """
    zd = z_final.data if isinstance(z_final, Tensor) else np.asarray(z_final)
    if zd.size == 0:
        raise VocabularyError("predict_next needs a non-empty final embedding")
    logits = zd[-1] @ model.head.value
    probs = softmax_1d(logits)
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng or integer seed")
        if isinstance(rng, (int, np.integer)):
            rng = seeded_rng(int(rng), "sample")
        return int(rng.choice(probs.size, p=probs / probs.sum()))
    raise ValueError(f"unknown prediction mode {mode!r}")


def generate(
    model: LanguageModel,
    prompt: Sequence[int],
    fused_context=None,
    max_new: int = 32,
    mode: str = "greedy",
    rng: "np.random.Generator | int | None" = None,
) -> list[int]:
    """Autoregressive decoding from a prompt, stopping at [eos] or max_new.

    With a `FusedContext` the loop runs the adapter-fused forward pass;
    exceeding max_seq propagates the capacity error from the forward pass.
    """
    tokens = list(prompt)
    if not tokens:
        raise VocabularyError("prompt must be non-empty")
    if isinstance(rng, (int, np.integer)):
        rng = seeded_rng(int(rng), "generate")
    for _ in range(max_new):
        if fused_context is None:
            z = transformer_forward(model, tokens)
        else:
            from .fusion import fused_forward

            z = fused_forward(
                model,
                fused_context.adapters,
                fused_context.q_percept,
                fused_context.q_detect,
                tokens,
            )
        nxt = predict_next(model, z, mode=mode, rng=rng)
        tokens.append(nxt)
        if nxt == model.vocab.eos_id:
            break
    return tokens
