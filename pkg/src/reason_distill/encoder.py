"""Compact transformer encoder used as the relevance student.

One ``EncoderParams`` value serves both input configurations: the plain
``[CLS] query [SEP] service`` sequence and the reasoning-augmented sequence
that appends ``[SEP] reason``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID, CLS_ID, SEP_ID = 0, 1, 2
STUDENT_MAX_LEN = 64
TEACHER_MAX_LEN = 150


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_len: int = 160
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    d_reason: int = 32
    n_labels: int = 3
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


class EncoderParams:
    """All learnable weights: embeddings, encoder layers, classification and
    projection heads. Attention uses no key bias (it cancels in the softmax)."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std

        def w(*shape, name):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def z(*shape, name):
            return Tensor(np.zeros(shape), requires_grad=True, name=name)

        def o(*shape, name):
            return Tensor(np.ones(shape), requires_grad=True, name=name)

        self.tok_emb = w(c.vocab_size, c.d_model, name="tok_emb")
        self.pos_emb = w(c.max_len, c.d_model, name="pos_emb")
        self.layers = []
        for i in range(c.n_layers):
            p = f"layer{i}."
            self.layers.append(
                {
                    "wq": w(c.d_model, c.d_model, name=p + "wq"),
                    "bq": z(c.d_model, name=p + "bq"),
                    "wk": w(c.d_model, c.d_model, name=p + "wk"),
                    "wv": w(c.d_model, c.d_model, name=p + "wv"),
                    "bv": z(c.d_model, name=p + "bv"),
                    "wo": w(c.d_model, c.d_model, name=p + "wo"),
                    "bo": z(c.d_model, name=p + "bo"),
                    "ln1_g": o(c.d_model, name=p + "ln1_g"),
                    "ln1_b": z(c.d_model, name=p + "ln1_b"),
                    "w1": w(c.d_model, c.d_ff, name=p + "w1"),
                    "b1": z(c.d_ff, name=p + "b1"),
                    "w2": w(c.d_ff, c.d_model, name=p + "w2"),
                    "b2": z(c.d_model, name=p + "b2"),
                    "ln2_g": o(c.d_model, name=p + "ln2_g"),
                    "ln2_b": z(c.d_model, name=p + "ln2_b"),
                }
            )
        self.cls_w = w(c.d_model, c.n_labels, name="cls_w")
        self.cls_b = z(c.n_labels, name="cls_b")
        self.proj_w = w(c.d_model, c.d_reason, name="proj_w")
        self.proj_b = z(c.d_reason, name="proj_b")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{k}", v) for k, v in layer.items())
        out += [
            ("cls_w", self.cls_w),
            ("cls_b", self.cls_b),
            ("proj_w", self.proj_w),
            ("proj_b", self.proj_b),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def config_dict(self) -> dict:
        return asdict(self.config)


# ---------------------------------------------------------------------------
# input construction
# ---------------------------------------------------------------------------

def _validate(tokens: Sequence[int], vocab_size: int | None) -> list[int]:
    tokens = [int(t) for t in tokens]
    if vocab_size is not None:
        for t in tokens:
            if t < 0 or t >= vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
    return tokens


def build_student_input(
    query: Sequence[int],
    service: Sequence[int],
    max_len: int = STUDENT_MAX_LEN,
    vocab_size: int | None = None,
) -> list[int]:
    """``[CLS] query [SEP] service``; overlong inputs lose the service tail
    first, then the query tail."""
    q = _validate(query, vocab_size)
    s = _validate(service, vocab_size)
    budget = max_len - 2
    if budget < 0:
        raise ValueError(f"max_len {max_len} cannot hold [CLS] and [SEP]")
    s = s[: max(0, budget - len(q))]
    q = q[:budget]
    return [CLS_ID, *q, SEP_ID, *s]


def build_teacher_input(
    query: Sequence[int],
    service: Sequence[int],
    reason: Sequence[int],
    max_len: int = TEACHER_MAX_LEN,
    vocab_size: int | None = None,
    student_max_len: int = STUDENT_MAX_LEN,
) -> list[int]:
    """Student sequence, then ``[SEP] reason``; overlong inputs lose the reason
    tail first. An empty reason adds no trailing separator."""
    r = _validate(reason, vocab_size)
    base = build_student_input(query, service, max_len=min(max_len, student_max_len), vocab_size=vocab_size)
    if not r:
        return base
    room = max_len - len(base) - 1
    if room < 0:
        return base
    return base + [SEP_ID] + r[:room]


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns (ids, key_mask)."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _attention(
    layer: dict,
    h: Tensor,
    key_mask: np.ndarray,
    n_heads: int,
    causal: bool = False,
    cls_only: bool = False,
) -> Tensor:
    B, L, d = h.shape
    dh = d // n_heads
    Lq = 1 if cls_only else L

    def heads(t: Tensor, n: int) -> Tensor:
        return t.reshape(B, n, n_heads, dh).transpose(0, 2, 1, 3)

    hq = h[:, :1, :] if cls_only else h
    q = heads(ad.linear(hq, layer["wq"], layer["bq"]), Lq)
    k = heads(ad.linear(h, layer["wk"]), L)
    v = heads(ad.linear(h, layer["wv"], layer["bv"]), L)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    mask = key_mask[:, None, None, :]
    if causal:
        mask = mask & np.tril(np.ones((L, L), dtype=bool))[None, None]
    attn = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return ad.linear(ctx, layer["wo"], layer["bo"])


def encoder_block(
    layer: dict,
    h: Tensor,
    key_mask: np.ndarray,
    n_heads: int,
    causal: bool = False,
    cls_only: bool = False,
) -> Tensor:
    """Post-norm block: attention, residual, layernorm, feed-forward, residual,
    layernorm. With ``cls_only`` only position 0 is computed (B x 1 x d)."""
    resid = h[:, :1, :] if cls_only else h
    h = ad.layernorm(resid + _attention(layer, h, key_mask, n_heads, causal, cls_only), layer["ln1_g"], layer["ln1_b"])
    ff = ad.linear(ad.relu(ad.linear(h, layer["w1"], layer["b1"])), layer["w2"], layer["b2"])
    return ad.layernorm(h + ff, layer["ln2_g"], layer["ln2_b"])


def encode_batch(params: EncoderParams, seqs: Sequence[Sequence[int]]) -> Tensor:
    """CLS vectors (N x d) for a batch of token sequences.

    The last block runs for position 0 only; other positions never reach the
    output there, so the result is identical to the full computation.
    """
    c = params.config
    for s in seqs:
        if len(s) > c.max_len:
            raise ValueError(f"sequence length {len(s)} exceeds encoder max_len {c.max_len}")
        if not len(s):
            raise ValueError("empty sequence")
    ids, mask = pad_batch(seqs)
    L = ids.shape[1]
    h = ad.embedding(params.tok_emb, ids) + ad.embedding(params.pos_emb, np.broadcast_to(np.arange(L), ids.shape))
    n = len(params.layers)
    for i, layer in enumerate(params.layers):
        h = encoder_block(layer, h, mask, c.n_heads, cls_only=(i == n - 1))
    return h[:, 0, :]


def encode(params: EncoderParams, seq: Sequence[int]) -> Tensor:
    return encode_batch(params, [seq])[0]


def classify(params: EncoderParams, cls: Tensor) -> Tensor:
    """Relevance logits (softmax is left to losses and metrics)."""
    return ad.linear(cls if cls.ndim > 1 else cls.reshape(1, -1), params.cls_w, params.cls_b).reshape(
        (*cls.shape[:-1], params.config.n_labels)
    )


def project(params: EncoderParams, cls: Tensor) -> Tensor:
    return ad.linear(cls if cls.ndim > 1 else cls.reshape(1, -1), params.proj_w, params.proj_b).reshape(
        (*cls.shape[:-1], params.config.d_reason)
    )


def argmax_label(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest label index."""
    return np.argmax(np.asarray(logits), axis=-1)


# ---------------------------------------------------------------------------
# frozen reason embedder
# ---------------------------------------------------------------------------

class ReasonVector(NamedTuple):
    vector: np.ndarray
    degenerate: bool


class FrozenReasonEmbedder:
    """Mean of seed-generated random rows, L2-normalised. Never trained."""

    def __init__(self, vocab_size: int, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((vocab_size, dim))
        self.table.setflags(write=False)
        self.dim = dim

    def embed(self, reason: Sequence[int]) -> ReasonVector:
        ids = np.asarray(list(reason), dtype=np.int64)
        if ids.size == 0:
            return ReasonVector(np.zeros(self.dim), True)
        if ids.min() < 0 or ids.max() >= self.table.shape[0]:
            raise ValueError("reason token outside vocabulary")
        v = self.table[ids].mean(axis=0)
        n = np.linalg.norm(v)
        if n == 0.0:
            return ReasonVector(np.zeros(self.dim), True)
        return ReasonVector(v / n, False)

    def embed_batch(self, reasons: Sequence[Sequence[int]]) -> np.ndarray:
        return np.stack([self.embed(r).vector for r in reasons])


def embed_reason_frozen(reason: Sequence[int], seed: int, vocab_size: int, dim: int = 32) -> ReasonVector:
    return FrozenReasonEmbedder(vocab_size, dim, seed).embed(reason)
