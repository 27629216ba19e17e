"""Dense float64 linear algebra with a reverse-mode tape.

Everything in the package is a 2-D C-order float64 numpy array ("matrix").
Operations come in one polymorphic flavor: called on plain arrays they just
compute; called on `Tensor` nodes they also record a backward closure on the
node's `Tape`, so one forward implementation serves both inference and
training. Gradients are validated against central finite differences
(`grad_check`, eps 1e-5, relative error |a-b|/max(1, |a|, |b|)).

Randomness: every consumer derives its generator through `seeded_rng`, which
fans a single integer seed out per label via SHA-256 into numpy's PCG64.
Runs are therefore bit-reproducible for a fixed seed.

A tape is single-threaded; matrices are plain value arrays, and distinct
tapes may run in parallel as long as they work on disjoint parameter
snapshots.
"""

from __future__ import annotations

import functools
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EvaluationError, NonFiniteError, ShapeError

Matrix = np.ndarray

GRAD_CHECK_EPS = 1e-5


def seeded_rng(seed: int, label: str = "") -> np.random.Generator:
    """PCG64 generator derived from (seed, label) via SHA-256 fan-out."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def check_finite(data: Matrix, what: str = "matrix") -> Matrix:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{what} contains non-finite entries")
    return data


def as_matrix(data, what: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D float64 array (copying only when needed)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {arr.shape}")
    return check_finite(np.ascontiguousarray(arr), what)


class Parameter:
    """A named matrix with a gradient buffer and a trainable flag.

    `grad` always has the same shape as `value`. The optimizer contract for
    `trainable=False` is that `value` stays bit-identical across steps; the
    gradient such a parameter exposes to the optimizer is all-zero.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = as_matrix(value, f"parameter {name!r}")
        self.grad = np.zeros_like(self.value)
        self.trainable = bool(trainable)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def optimizer_grad(self) -> Matrix:
        """Gradient as the optimizer sees it: exactly zero when frozen."""
        return self.grad if self.trainable else np.zeros_like(self.grad)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        r, c = self.shape
        return f"Parameter({self.name!r}, {r}x{c}, trainable={self.trainable})"


class Tensor:
    """A value on a tape: data plus an accumulated-gradient buffer."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data: Matrix, tape: "Tape"):
        self.data = data
        self.grad = np.zeros_like(data)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


class Tape:
    """Ordered record of the primitive ops applied during one forward pass.

    `backward` replays the record once, in reverse order, accumulating
    gradients into every node (and, through aliased buffers, into every
    `Parameter` wrapped via `param`). A tape is single-use: run backward at
    most once per forward pass.
    """

    def __init__(self):
        self._ops: list[tuple[str, Callable[[], None]]] = []
        self._param_nodes: dict[int, Tensor] = {}
        self.last_backward: list[str] = []

    def record(self, name: str, backward: Callable[[], None]) -> None:
        self._ops.append((name, backward))

    @property
    def op_names(self) -> list[str]:
        return [name for name, _ in self._ops]

    def constant(self, data) -> Tensor:
        return Tensor(as_matrix(data), self)

    def param(self, p: Parameter) -> Tensor:
        """Wrap a Parameter as a leaf whose gradient buffer is p.grad itself."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = Tensor(p.value, self)
            node.grad = p.grad  # alias: backward accumulates straight into p
            self._param_nodes[id(p)] = node
        return node

    def backward(self, output: Tensor, seed: float = 1.0) -> None:
        if output.tape is not self:
            raise ValueError("output tensor does not belong to this tape")
        output.grad += seed
        self.last_backward = []
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for name, fn in reversed(self._ops):
                fn()
                self.last_backward.append(name)


def _quiet(fn):
    """Non-finite results raise NonFiniteError; keep numpy's warnings out of it."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return fn(*args, **kwargs)

    return wrapper


def _raw(x) -> Matrix:
    return x.data if isinstance(x, Tensor) else x


def _tape_of(*xs) -> "Tape | None":
    tapes = {x.tape for x in xs if isinstance(x, Tensor)}
    if len(tapes) > 1:
        raise ValueError("operands live on different tapes")
    return tapes.pop() if tapes else None


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def param_or_value(p: Parameter, tape: "Tape | None"):
    """The traced node for `p` when a tape is active, else its raw value."""
    return tape.param(p) if tape is not None else p.value


def _product(a: Matrix, b: Matrix) -> Matrix:
    # einsum (not BLAS) so each output element accumulates over k in a fixed
    # order regardless of the other dimensions; this keeps prefix forwards
    # bit-identical to full-sequence forwards
    return np.einsum("ij,jk->ik", a, b)


@_quiet
def matmul(a, b):
    """Matrix product with the standard gradient rules g·bᵀ and aᵀ·g."""
    ad, bd = _raw(a), _raw(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {tuple(ad.shape)} x {tuple(bd.shape)}"
        )
    out_data = check_finite(_product(ad, bd), "matmul result")
    tape = _tape_of(a, b)
    if tape is None:
        return out_data
    at, bt = _lift(a, tape), _lift(b, tape)
    out = Tensor(out_data, tape)

    def backward():
        at.grad += _product(out.grad, bd.T)
        bt.grad += _product(ad.T, out.grad)

    tape.record("matmul", backward)
    return out


@_quiet
def add(a, b):
    """Elementwise sum of two same-shape matrices."""
    ad, bd = _raw(a), _raw(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"add shape mismatch: {tuple(ad.shape)} vs {tuple(bd.shape)}")
    out_data = check_finite(ad + bd, "add result")
    tape = _tape_of(a, b)
    if tape is None:
        return out_data
    at, bt = _lift(a, tape), _lift(b, tape)
    out = Tensor(out_data, tape)

    def backward():
        at.grad += out.grad
        bt.grad += out.grad

    tape.record("add", backward)
    return out


@_quiet
def add_bias(m, bias):
    """Add a 1 x cols bias row to every row of m."""
    md, bd = _raw(m), _raw(bias)
    if bd.shape != (1, md.shape[1]):
        raise ShapeError(
            f"bias shape {tuple(bd.shape)} does not broadcast over {tuple(md.shape)}"
        )
    out_data = check_finite(md + bd, "add_bias result")
    tape = _tape_of(m, bias)
    if tape is None:
        return out_data
    mt, bt = _lift(m, tape), _lift(bias, tape)
    out = Tensor(out_data, tape)

    def backward():
        mt.grad += out.grad
        bt.grad += out.grad.sum(axis=0, keepdims=True)

    tape.record("add_bias", backward)
    return out


@_quiet
def mul(a, b):
    """Elementwise product; either operand may be a 1x1 scalar matrix."""
    ad, bd = _raw(a), _raw(b)
    if ad.shape != bd.shape and ad.shape != (1, 1) and bd.shape != (1, 1):
        raise ShapeError(f"mul shape mismatch: {tuple(ad.shape)} vs {tuple(bd.shape)}")
    out_data = check_finite(ad * bd, "mul result")
    tape = _tape_of(a, b)
    if tape is None:
        return out_data
    at, bt = _lift(a, tape), _lift(b, tape)
    out = Tensor(out_data, tape)

    def backward():
        ga = out.grad * bd
        gb = out.grad * ad
        at.grad += ga.sum().reshape(1, 1) if ad.shape == (1, 1) else ga
        bt.grad += gb.sum().reshape(1, 1) if bd.shape == (1, 1) else gb

    tape.record("mul", backward)
    return out


@_quiet
def scale(m, factor: float):
    """Multiply by a plain (non-trainable) scalar."""
    md = _raw(m)
    out_data = check_finite(md * factor, "scale result")
    tape = _tape_of(m)
    if tape is None:
        return out_data
    mt = _lift(m, tape)
    out = Tensor(out_data, tape)

    def backward():
        mt.grad += out.grad * factor

    tape.record("scale", backward)
    return out


def transpose(m):
    md = _raw(m)
    out_data = np.ascontiguousarray(md.T)
    tape = _tape_of(m)
    if tape is None:
        return out_data
    mt = _lift(m, tape)
    out = Tensor(out_data, tape)

    def backward():
        mt.grad += out.grad.T

    tape.record("transpose", backward)
    return out


def gather_rows(m, ids: Sequence[int]):
    """Select rows m[ids]; the backward pass scatter-adds into those rows."""
    md = _raw(m)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= md.shape[0]:
        raise ShapeError(
            f"gather_rows index out of range for {md.shape[0]} rows: "
            f"[{idx.min()}, {idx.max()}]"
        )
    out_data = md[idx]
    tape = _tape_of(m)
    if tape is None:
        return out_data
    mt = _lift(m, tape)
    out = Tensor(out_data, tape)

    def backward():
        np.add.at(mt.grad, idx, out.grad)

    tape.record("gather_rows", backward)
    return out


def slice_rows(m, start: int, stop: int):
    md = _raw(m)
    if not (0 <= start < stop <= md.shape[0]):
        raise ShapeError(
            f"slice_rows [{start}:{stop}] invalid for {md.shape[0]} rows"
        )
    out_data = md[start:stop].copy()
    tape = _tape_of(m)
    if tape is None:
        return out_data
    mt = _lift(m, tape)
    out = Tensor(out_data, tape)

    def backward():
        mt.grad[start:stop] += out.grad

    tape.record("slice_rows", backward)
    return out


def concat_rows(parts: Iterable):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    datas = [_raw(p) for p in parts]
    cols = {d.shape[1] for d in datas}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column mismatch: {sorted(cols)}")
    out_data = np.concatenate(datas, axis=0)
    tape = _tape_of(*parts)
    if tape is None:
        return out_data
    nodes = [_lift(p, tape) for p in parts]
    out = Tensor(out_data, tape)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def backward():
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            node.grad += out.grad[lo:hi]

    tape.record("concat_rows", backward)
    return out


def _softmax_rows(x: Matrix) -> Matrix:
    # max-subtraction keeps exp in range; the max term always contributes 1
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@_quiet
def row_softmax(m):
    """Row-wise softmax with max-subtraction; every row sums to 1."""
    md = _raw(m)
    if md.size == 0:
        raise ShapeError("row_softmax needs a non-empty matrix")
    out_data = _softmax_rows(md)
    tape = _tape_of(m)
    if tape is None:
        return out_data
    mt = _lift(m, tape)
    out = Tensor(out_data, tape)

    def backward():
        p, g = out_data, out.grad
        mt.grad += p * (g - (p * g).sum(axis=1, keepdims=True))

    tape.record("row_softmax", backward)
    return out


@_quiet
def attention_normalize(scores, d_model: int, causal: bool = False):
    """Scaled row softmax of attention scores: softmax(scores / sqrt(d_model)).

    With `causal=True` row i only distributes mass over columns <= i (the
    masked cells come out exactly 0); this requires at least as many columns
    as rows.
    """
    sd = _raw(scores)
    if sd.size == 0:
        raise ShapeError("attention_normalize needs a non-empty matrix")
    if d_model < 1:
        raise ShapeError(f"attention_normalize needs d_model >= 1, got {d_model}")
    n, k = sd.shape
    if causal and k < n:
        raise ShapeError(f"causal mask needs cols >= rows, got {n}x{k}")
    scaled = sd / np.sqrt(float(d_model))
    if causal:
        scaled = np.where(np.triu(np.ones((n, k), dtype=bool), k=1), -np.inf, scaled)
    out_data = _softmax_rows(scaled)
    tape = _tape_of(scores)
    if tape is None:
        return out_data
    st = _lift(scores, tape)
    out = Tensor(out_data, tape)
    inv_sqrt = 1.0 / np.sqrt(float(d_model))

    def backward():
        p, g = out_data, out.grad
        # masked cells have p == 0, so they receive exactly zero gradient
        st.grad += inv_sqrt * p * (g - (p * g).sum(axis=1, keepdims=True))

    tape.record("attention_normalize", backward)
    return out


@_quiet
def sum_entries(m):
    """Sum of all entries as a 1x1 matrix (float on the untraced path)."""
    md = _raw(m)
    total = float(md.sum())
    tape = _tape_of(m)
    if tape is None:
        return total
    mt = _lift(m, tape)
    out = Tensor(np.array([[total]]), tape)

    def backward():
        mt.grad += out.grad[0, 0]

    tape.record("sum_entries", backward)
    return out


@_quiet
def cross_entropy(logits, targets: Sequence[int], positions: Sequence[int]):
    """Mean next-token cross-entropy over the given row positions.

    `targets[i]` is the id row i should predict; only rows listed in
    `positions` contribute. Returns a float (untraced) or a 1x1 Tensor.
    """
    ld = _raw(logits)
    pos = np.asarray(positions, dtype=np.intp)
    tgt = np.asarray(targets, dtype=np.intp)
    if pos.size == 0:
        raise EvaluationError("cross_entropy needs at least one loss position")
    if tgt.shape[0] != ld.shape[0]:
        raise ShapeError(
            f"cross_entropy targets length {tgt.shape[0]} != rows {ld.shape[0]}"
        )
    if pos.min() < 0 or pos.max() >= ld.shape[0]:
        raise ShapeError("cross_entropy positions out of range")
    if tgt[pos].min() < 0 or tgt[pos].max() >= ld.shape[1]:
        raise ShapeError("cross_entropy target id out of vocabulary range")
    rows = ld[pos]
    row_max = rows.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(rows - row_max).sum(axis=1))
    picked = rows[np.arange(pos.size), tgt[pos]]
    loss = float((lse - picked).mean())
    tape = _tape_of(logits)
    if tape is None:
        return loss
    lt = _lift(logits, tape)
    out = Tensor(np.array([[loss]]), tape)
    probs = _softmax_rows(rows)

    def backward():
        g = out.grad[0, 0] / pos.size
        delta = probs.copy()
        delta[np.arange(pos.size), tgt[pos]] -= 1.0
        np.add.at(lt.grad, pos, g * delta)

    tape.record("cross_entropy", backward)
    return out


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(
    f: Callable[["Tape | None"], "Tensor | float"],
    params: Sequence[Parameter],
    eps: float = GRAD_CHECK_EPS,
) -> float:
    """Worst relative error between tape gradients and central differences.

    `f(tape)` must rebuild the scalar loss from the current parameter values:
    traced (returning a 1x1 Tensor) when given a tape, plain float otherwise.
    Central differences use the given eps; the numeric side never touches the
    tape, so the two routes stay independent.
    """

    def evaluate() -> float:
        value = f(None)
        value = float(value if not isinstance(value, Tensor) else value.data[0, 0])
        if not np.isfinite(value):
            raise EvaluationError("grad_check objective is non-finite")
        return value

    for p in params:
        p.zero_grad()
    tape = Tape()
    out = f(tape)
    if not isinstance(out, Tensor) or out.shape != (1, 1):
        raise EvaluationError("grad_check objective must be a 1x1 traced tensor")
    if not np.isfinite(out.data[0, 0]):
        raise EvaluationError("grad_check objective is non-finite")
    tape.backward(out)
    analytic = {p.name: p.grad.copy() for p in params}

    worst = 0.0
    for p in params:
        base = p.value.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = base.reshape(-1)[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(analytic[p.name].reshape(-1)[i], numeric))
        p.value[...] = base
    return worst
