"""Desk-scale low-rank adaptation math.

A frozen weight matrix W carries a trainable rank-r update B·A, with
B zero-initialized so the adapted layer starts exactly equal to the
base layer. The forward pass computes W·x + s·B·(A·x) as two rank-r
products without ever materializing the dense update; for deployment
the update merges into a single matrix.

Everything here is plain Python lists and explicit loops on purpose:
the module exists to state and verify the adaptation equations, the
autoregressive token loss, and their gradients at a scale where finite
differences can audit every step. It adapts no real model weights.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

Matrix = list[list[float]]
Vector = list[float]

PROB_FLOOR = 1e-12  # probabilities clamp here before the log


class LoraError(Exception):
    pass


class InvalidEpsilonError(LoraError):
    def __init__(self) -> None:
        super().__init__("finite-difference epsilon must be positive")


def zeros(rows: int, cols: int) -> Matrix:
    return [[0.0] * cols for _ in range(rows)]


def matvec(m: Sequence[Sequence[float]], v: Sequence[float]) -> Vector:
    return [sum(row[j] * v[j] for j in range(len(v))) for row in m]


def matmul(a: Sequence[Sequence[float]], b: Sequence[Sequence[float]]) -> Matrix:
    rows, inner, cols = len(a), len(b), len(b[0])
    out = zeros(rows, cols)
    for i in range(rows):
        for k in range(inner):
            aik = a[i][k]
            if aik == 0.0:
                continue
            for j in range(cols):
                out[i][j] += aik * b[k][j]
    return out


def _copy(m: Sequence[Sequence[float]]) -> Matrix:
    return [list(row) for row in m]


@dataclass
class LoraLayer:
    """Frozen weight W plus trainable low-rank pair (A, B).

    W is stored as a tuple of tuples and is immutable for the life of
    the layer; training touches only A and B. At construction B is all
    zeros, so the update contributes nothing until training moves it.
    """

    W: tuple[tuple[float, ...], ...]
    A: Matrix
    B: Matrix
    rank: int
    scaling: float = 1.0

    def __post_init__(self) -> None:
        d_out, d_in = len(self.W), len(self.W[0])
        if self.rank < 1 or self.rank > min(d_out, d_in):
            raise ValueError(f"rank must be in [1, {min(d_out, d_in)}]")
        if len(self.A) != self.rank or any(len(r) != d_in for r in self.A):
            raise ValueError("A must be rank x d_in")
        if len(self.B) != d_out or any(len(r) != self.rank for r in self.B):
            raise ValueError("B must be d_out x rank")

    @property
    def d_out(self) -> int:
        return len(self.W)

    @property
    def d_in(self) -> int:
        return len(self.W[0])

    @property
    def trainable_parameter_count(self) -> int:
        """r * (d_in + d_out): entries of A plus entries of B."""
        return self.rank * (self.d_in + self.d_out)

    @classmethod
    def create(
        cls,
        W: Sequence[Sequence[float]],
        rank: int,
        scaling: float = 1.0,
        seed: int = 0,
        init_scale: float = 0.02,
    ) -> "LoraLayer":
        """Fresh layer: A small gaussian, B exactly zero."""
        frozen = tuple(tuple(float(v) for v in row) for row in W)
        d_out, d_in = len(frozen), len(frozen[0])
        rng = random.Random(seed)
        a = [[rng.gauss(0.0, init_scale) for _ in range(d_in)] for _ in range(rank)]
        b = zeros(d_out, rank)
        return cls(W=frozen, A=a, B=b, rank=rank, scaling=scaling)


def lora_forward(layer: LoraLayer, x: Sequence[float]) -> Vector:
    """h = W·x + s·B·(A·x), computed as two rank-r products."""
    base = matvec(layer.W, x)
    low = matvec(layer.A, x)
    update = matvec(layer.B, low)
    return [base[i] + layer.scaling * update[i] for i in range(layer.d_out)]


def merge(layer: LoraLayer) -> Matrix:
    """Single deployment matrix W + s·B·A."""
    update = matmul(layer.B, layer.A)
    return [
        [layer.W[i][j] + layer.scaling * update[i][j] for j in range(layer.d_in)]
        for i in range(layer.d_out)
    ]


@dataclass(frozen=True)
class ToySequenceBatch:
    """Token-id sequences for the autoregressive loss."""

    sequences: tuple[tuple[int, ...], ...]
    vocab_size: int

    def __post_init__(self) -> None:
        if not self.sequences:
            raise ValueError("batch must contain at least one sequence")
        for seq in self.sequences:
            if any(not 0 <= t < self.vocab_size for t in seq):
                raise ValueError("token id out of vocabulary range")


def lm_loss(
    next_token_probs: Callable[[tuple[int, ...]], Sequence[float]],
    batch: ToySequenceBatch,
) -> float:
    """Autoregressive token loss: -sum_t ln P(y_t | y_<t), averaged
    over sequences.

    ``next_token_probs(prefix)`` returns the probability vector over
    the vocabulary for the next position. Probabilities clamp at
    PROB_FLOOR before the natural log.
    """
    total = 0.0
    for sequence in batch.sequences:
        seq_loss = 0.0
        for position, token in enumerate(sequence):
            probs = next_token_probs(sequence[:position])
            seq_loss -= math.log(max(probs[token], PROB_FLOOR))
        total += seq_loss
    return total / len(batch.sequences)


def softmax(logits: Sequence[float]) -> Vector:
    peak = max(logits)
    exps = [math.exp(v - peak) for v in logits]
    norm = sum(exps)
    return [e / norm for e in exps]


class DifferentiableLoss(Protocol):
    """A scalar loss of the layer's trainable parameters with analytic
    gradients for A and B."""

    def value(self, layer: LoraLayer) -> float: ...

    def grads(self, layer: LoraLayer) -> tuple[Matrix, Matrix]: ...


@dataclass(frozen=True)
class SoftmaxTokenLoss:
    """Classification-as-generation loss over single-token targets.

    Each example is one feature vector whose correct next token is its
    class id; the layer's output is the logit vector. This is the
    single-token specialization of the autoregressive loss above, with
    analytic gradients for the low-rank pair.
    """

    inputs: tuple[tuple[float, ...], ...]
    targets: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.targets) or not self.inputs:
            raise ValueError("inputs and targets must be equal-length and non-empty")

    def value(self, layer: LoraLayer) -> float:
        # Single-token specialization of lm_loss (per-sequence mean of
        # token sums collapses to a per-example mean).
        total = 0.0
        for x, target in zip(self.inputs, self.targets):
            probs = softmax(lora_forward(layer, x))
            total -= math.log(max(probs[target], PROB_FLOOR))
        return total / len(self.inputs)

    def grads(self, layer: LoraLayer) -> tuple[Matrix, Matrix]:
        n = len(self.inputs)
        d_a = zeros(layer.rank, layer.d_in)
        d_b = zeros(layer.d_out, layer.rank)
        for x, target in zip(self.inputs, self.targets):
            probs = softmax(lora_forward(layer, x))
            # d loss / d logits for -ln softmax, averaged over examples
            g = [(probs[i] - (1.0 if i == target else 0.0)) / n for i in range(layer.d_out)]
            low = matvec(layer.A, x)  # A·x, length r
            for i in range(layer.d_out):
                gi = layer.scaling * g[i]
                if gi == 0.0:
                    continue
                for k in range(layer.rank):
                    d_b[i][k] += gi * low[k]
            bt_g = [
                sum(layer.B[i][k] * g[i] for i in range(layer.d_out))
                for k in range(layer.rank)
            ]
            for k in range(layer.rank):
                coef = layer.scaling * bt_g[k]
                if coef == 0.0:
                    continue
                for j in range(layer.d_in):
                    d_a[k][j] += coef * x[j]
        return d_a, d_b


def grad_check(
    layer: LoraLayer,
    loss: DifferentiableLoss,
    epsilon: float,
    samples: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Samples at least 20 entries across A and B (all entries when the
    layer is small). The layer is restored exactly after probing.
    """
    if epsilon <= 0:
        raise InvalidEpsilonError()
    analytic_a, analytic_b = loss.grads(layer)
    entries = [("A", i, j) for i in range(layer.rank) for j in range(layer.d_in)]
    entries += [("B", i, j) for i in range(layer.d_out) for j in range(layer.rank)]
    if len(entries) > samples:
        rng = random.Random(seed)
        entries = rng.sample(entries, max(samples, 20))
    worst = 0.0
    for which, i, j in entries:
        target = layer.A if which == "A" else layer.B
        original = target[i][j]
        target[i][j] = original + epsilon
        plus = loss.value(layer)
        target[i][j] = original - epsilon
        minus = loss.value(layer)
        target[i][j] = original
        numeric = (plus - minus) / (2 * epsilon)
        analytic = (analytic_a if which == "A" else analytic_b)[i][j]
        scale = max(abs(numeric) + abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


@dataclass
class AdamWConfig:
    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def toy_train(
    layer: LoraLayer,
    loss: DifferentiableLoss,
    steps: int,
    learning_rate: float,
    optimizer: Optional[AdamWConfig] = None,
) -> list[float]:
    """Train A and B with AdamW under cosine learning-rate decay.

    W is frozen by construction and never touched. Returns the loss
    recorded at the start of each step.
    """
    opt = optimizer or AdamWConfig()
    m_a = zeros(layer.rank, layer.d_in)
    v_a = zeros(layer.rank, layer.d_in)
    m_b = zeros(layer.d_out, layer.rank)
    v_b = zeros(layer.d_out, layer.rank)
    trajectory: list[float] = []
    for step in range(steps):
        trajectory.append(loss.value(layer))
        d_a, d_b = loss.grads(layer)
        lr_t = learning_rate * 0.5 * (1 + math.cos(math.pi * step / steps))
        t = step + 1
        for params, grads, m, v in (
            (layer.A, d_a, m_a, v_a),
            (layer.B, d_b, m_b, v_b),
        ):
            for i in range(len(params)):
                for j in range(len(params[i])):
                    g = grads[i][j]
                    m[i][j] = opt.beta1 * m[i][j] + (1 - opt.beta1) * g
                    v[i][j] = opt.beta2 * v[i][j] + (1 - opt.beta2) * g * g
                    m_hat = m[i][j] / (1 - opt.beta1**t)
                    v_hat = v[i][j] / (1 - opt.beta2**t)
                    params[i][j] -= lr_t * (
                        m_hat / (math.sqrt(v_hat) + opt.eps)
                        + opt.weight_decay * params[i][j]
                    )
    return trajectory


def make_toy_task(
    n_per_class: int = 8,
    feature_dim: int = 8,
    classes: int = 4,
    seed: int = 7,
    noise: float = 0.15,
) -> SoftmaxTokenLoss:
    """Separable synthetic task: each class clusters around one basis
    direction plus gaussian noise."""
    rng = random.Random(seed)
    inputs: list[tuple[float, ...]] = []
    targets: list[int] = []
    for cls in range(classes):
        for _ in range(n_per_class):
            x = [rng.gauss(0.0, noise) for _ in range(feature_dim)]
            x[cls % feature_dim] += 1.0
            inputs.append(tuple(x))
            targets.append(cls)
    return SoftmaxTokenLoss(inputs=tuple(inputs), targets=tuple(targets))


_CHECKPOINT_MAGIC = "pustage-lora-layer"


def save_layer(layer: LoraLayer, path: Path | str) -> None:
    """Checkpoint: one JSON header line, then row-major float64
    little-endian for W, A, B."""
    header = {
        "magic": _CHECKPOINT_MAGIC,
        "schema_version": 1,
        "d_out": layer.d_out,
        "d_in": layer.d_in,
        "rank": layer.rank,
        "scaling": layer.scaling,
        "dtype": "<f8",
        "order": ["W", "A", "B"],
    }
    values: list[float] = []
    for matrix in (layer.W, layer.A, layer.B):
        for row in matrix:
            values.extend(row)
    blob = struct.pack(f"<{len(values)}d", *values)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_layer(path: Path | str) -> LoraLayer:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("magic") != _CHECKPOINT_MAGIC:
        raise LoraError(f"not a layer checkpoint: {path}")
    d_out, d_in, rank = header["d_out"], header["d_in"], header["rank"]
    count = d_out * d_in + rank * d_in + d_out * rank
    values = list(struct.unpack(f"<{count}d", raw[newline + 1 :]))

    def take(rows: int, cols: int) -> Matrix:
        nonlocal values
        out = [values[r * cols : (r + 1) * cols] for r in range(rows)]
        values = values[rows * cols :]
        return out

    w = take(d_out, d_in)
    a = take(rank, d_in)
    b = take(d_out, rank)
    return LoraLayer(
        W=tuple(tuple(row) for row in w),
        A=a,
        B=b,
        rank=rank,
        scaling=header["scaling"],
    )
