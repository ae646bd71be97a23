"""Bidirectional transformer encoder with three interchangeable heads.

Pre-layer-norm residual blocks, learned absolute position embeddings,
tanh-approximation GELU, and no causal mask anywhere: every position
attends to the full sequence. Linear projections carry no bias; the head
does. Projection matrices are stored input-by-output, so the forward pass
is a plain ``x @ W``.

The three heads mirror the three training paradigms: ``mlm`` predicts
full-vocabulary logits at one masked position, ``pooled-classifier``
reduces the sequence (CLS token or mean) to a two-way decision, and
``token-classifier`` emits one scalar score per token.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    Tensor,
    add,
    bmm,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    tmean,
    transpose,
)
from .tokenizer import CLS_ID, MASK_ID

HEAD_MLM = "mlm"
HEAD_POOLED = "pooled-classifier"
HEAD_TOKEN = "token-classifier"
HEAD_KINDS = (HEAD_MLM, HEAD_POOLED, HEAD_TOKEN)

POOLING_KINDS = ("cls", "mean")


@dataclass
class ModelConfig:
    n_layers: int
    hidden: int
    n_heads: int
    vocab_size: int
    max_seq: int
    ffn_mult: int = 4
    head_kind: str = HEAD_MLM
    pooling: str = None

    def __post_init__(self):
        for field_name in ("hidden", "n_heads", "vocab_size", "max_seq", "ffn_mult"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be a positive integer")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be non-negative")
        if self.hidden % self.n_heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if self.head_kind == HEAD_POOLED:
            if self.pooling not in POOLING_KINDS:
                raise ConfigError("pooled-classifier requires pooling 'cls' or 'mean'")
        elif self.pooling is not None:
            raise ConfigError("pooling is only meaningful for the pooled-classifier head")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def head_out(self) -> int:
        return {HEAD_MLM: self.vocab_size, HEAD_POOLED: 2, HEAD_TOKEN: 1}[self.head_kind]


def manifest(config: ModelConfig):
    """Ordered (name, shape) list of every stored weight tensor."""
    h, f = config.hidden, config.ffn_mult * config.hidden
    entries = [
        ("tok_emb", (config.vocab_size, h)),
        ("pos_emb", (config.max_seq, h)),
    ]
    for i in range(config.n_layers):
        p = f"layer{i}."
        entries += [
            (p + "ln1.gain", (h,)),
            (p + "ln1.bias", (h,)),
            (p + "wq", (h, h)),
            (p + "wk", (h, h)),
            (p + "wv", (h, h)),
            (p + "wo", (h, h)),
            (p + "ln2.gain", (h,)),
            (p + "ln2.bias", (h,)),
            (p + "w1", (h, f)),
            (p + "w2", (f, h)),
        ]
    entries += [
        ("final_ln.gain", (h,)),
        ("final_ln.bias", (h,)),
        ("head.w", (h, config.head_out)),
        ("head.b", (config.head_out,)),
    ]
    return entries


def count_params(config: ModelConfig) -> int:
    """Exact number of stored weight scalars, summed over the manifest."""
    return sum(int(np.prod(shape)) for _, shape in manifest(config))


INIT_STD = 0.1


def init_weights(config: ModelConfig, seed=0):
    """Seeded weight dict in manifest order: N(0, INIT_STD) projections and
    embeddings, unit layer-norm gains, zero biases.

    INIT_STD is 0.1, not the 0.02 common for 768-wide encoders: scale must
    grow as width shrinks (0.02 * sqrt(768 / 64) is about 0.07) or attention
    logits start too uniform to differentiate within short training budgets.
    """
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in manifest(config):
        if name.endswith(".gain"):
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") or name == "head.b":
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            weights[name] = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
    return weights


def _get(weights, name) -> Tensor:
    w = weights[name]
    return w if isinstance(w, Tensor) else Tensor(w)


def _check_ids(config, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise ShapeError("token ids must be a [batch, seq] array")
    if ids.shape[1] > config.max_seq:
        raise ShapeError(
            f"sequence length {ids.shape[1]} exceeds max_seq {config.max_seq};"
            " callers must truncate first"
        )
    if ids.shape[1] < 1:
        raise ShapeError("empty sequence")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise IndexError(f"token id out of range for vocabulary of {config.vocab_size}")


def encode_batch(weights, config: ModelConfig, ids: np.ndarray) -> Tensor:
    """Run the encoder stack on [batch, seq] ids; returns [batch*seq, hidden]
    final hidden states (after the final layer norm)."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(config, ids)
    batch, seq = ids.shape
    h = config.hidden

    positions = np.tile(np.arange(seq, dtype=np.int64), batch)
    x = add(
        gather_rows(_get(weights, "tok_emb"), ids.reshape(-1)),
        gather_rows(_get(weights, "pos_emb"), positions),
    )

    nh, dh = config.n_heads, config.head_dim
    scale = 1.0 / math.sqrt(dh)
    for i in range(config.n_layers):
        p = f"layer{i}."
        a = layer_norm(x, _get(weights, p + "ln1.gain"), _get(weights, p + "ln1.bias"))

        def heads(t):
            return reshape(transpose(reshape(t, (batch, seq, nh, dh)), (0, 2, 1, 3)), (batch * nh, seq, dh))

        q = heads(matmul(a, _get(weights, p + "wq")))
        k = heads(matmul(a, _get(weights, p + "wk")))
        v = heads(matmul(a, _get(weights, p + "wv")))
        scores = mul(bmm(q, transpose(k, (0, 2, 1))), scale)
        attn = softmax(scores, axis=-1)
        ctx = bmm(attn, v)
        ctx = reshape(transpose(reshape(ctx, (batch, nh, seq, dh)), (0, 2, 1, 3)), (batch * seq, h))
        x = add(x, matmul(ctx, _get(weights, p + "wo")))

        b = layer_norm(x, _get(weights, p + "ln2.gain"), _get(weights, p + "ln2.bias"))
        x = add(x, matmul(gelu(matmul(b, _get(weights, p + "w1"))), _get(weights, p + "w2")))

    return layer_norm(x, _get(weights, "final_ln.gain"), _get(weights, "final_ln.bias"))


def _head(weights, rows: Tensor) -> Tensor:
    return add(matmul(rows, _get(weights, "head.w")), _get(weights, "head.b"))


def forward_mlm_batch(weights, config: ModelConfig, ids: np.ndarray, mask_positions) -> Tensor:
    """Full-vocabulary logits at each sequence's mask position: [batch, vocab]."""
    if config.head_kind != HEAD_MLM:
        raise ContractError(f"forward_mlm requires the mlm head, got {config.head_kind}")
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.asarray(mask_positions, dtype=np.int64)
    batch, seq = ids.shape
    if pos.shape != (batch,):
        raise ShapeError("mask_positions must have one entry per sequence")
    if (pos < 0).any() or (pos >= seq).any():
        raise ContractError("mask position outside the sequence")
    if (ids[np.arange(batch), pos] != MASK_ID).any():
        raise ContractError("mask position does not hold the mask token")
    hidden = encode_batch(weights, config, ids)
    rows = gather_rows(hidden, np.arange(batch, dtype=np.int64) * seq + pos)
    return _head(weights, rows)


def forward_mlm(weights, config: ModelConfig, token_ids, mask_position: int) -> Tensor:
    """Single-sequence convenience wrapper; returns 1-D [vocab] logits."""
    ids = np.asarray([list(token_ids)], dtype=np.int64)
    logits = forward_mlm_batch(weights, config, ids, [mask_position])
    return reshape(logits, (config.vocab_size,))


def forward_pooled_batch(weights, config: ModelConfig, ids: np.ndarray) -> Tensor:
    """Two-way logits from pooled final hidden states: [batch, 2]."""
    if config.head_kind != HEAD_POOLED:
        raise ContractError(f"forward_pooled requires the pooled-classifier head, got {config.head_kind}")
    ids = np.asarray(ids, dtype=np.int64)
    batch, seq = ids.shape
    hidden = encode_batch(weights, config, ids)
    if config.pooling == "cls":
        if (ids[:, 0] != CLS_ID).any():
            raise ContractError("cls pooling requires sequences to start with the CLS token")
        pooled = gather_rows(hidden, np.arange(batch, dtype=np.int64) * seq)
    else:
        pooled = tmean(reshape(hidden, (batch, seq, config.hidden)), axis=1)
    return _head(weights, pooled)


def forward_pooled(weights, config: ModelConfig, token_ids) -> Tensor:
    ids = np.asarray([list(token_ids)], dtype=np.int64)
    return reshape(forward_pooled_batch(weights, config, ids), (2,))


def forward_token_batch(weights, config: ModelConfig, ids: np.ndarray) -> Tensor:
    """One scalar logit per token: [batch, seq]."""
    if config.head_kind != HEAD_TOKEN:
        raise ContractError(f"forward_token_labels requires the token-classifier head, got {config.head_kind}")
    ids = np.asarray(ids, dtype=np.int64)
    batch, seq = ids.shape
    hidden = encode_batch(weights, config, ids)
    return reshape(_head(weights, hidden), (batch, seq))


def forward_token_labels(weights, config: ModelConfig, token_ids) -> Tensor:
    ids = np.asarray([list(token_ids)], dtype=np.int64)
    return reshape(forward_token_batch(weights, config, ids), (ids.shape[1],))
