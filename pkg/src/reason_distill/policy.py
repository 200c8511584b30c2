"""Tiny causal policy that writes a reason and then an answer token, with its
supervised (SFT) and GRPO objectives."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import CLS_ID, PAD_ID, SEP_ID, encoder_block, pad_batch


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int
    answer_ids: tuple[int, ...] = (3, 4, 5)
    blocked_ids: tuple[int, ...] = (PAD_ID, CLS_ID, SEP_ID)
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 128
    max_len: int = 96
    reason_cap: int = 12
    init_std: float = 0.02


class PolicyParams:
    """Embeddings, one causal post-norm block and an untied output layer."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)

        def w(*shape):
            return Tensor(rng.normal(0.0, c.init_std, size=shape), requires_grad=True)

        def z(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.tok_emb = w(c.vocab_size, c.d_model)
        self.pos_emb = w(c.max_len, c.d_model)
        d = c.d_model
        self.block = {
            "wq": w(d, d),
            "bq": z(d),
            "wk": w(d, d),
            "wv": w(d, d),
            "bv": z(d),
            "wo": w(d, d),
            "bo": z(d),
            "ln1_g": Tensor(np.ones(d), requires_grad=True),
            "ln1_b": z(d),
            "w1": w(d, c.d_ff),
            "b1": z(c.d_ff),
            "w2": w(c.d_ff, d),
            "b2": z(d),
            "ln2_g": Tensor(np.ones(d), requires_grad=True),
            "ln2_b": z(d),
        }
        self.out_w = w(d, c.vocab_size)
        self.out_b = z(c.vocab_size)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("tok_emb", self.tok_emb),
            ("pos_emb", self.pos_emb),
            *((f"block.{k}", v) for k, v in self.block.items()),
            ("out_w", self.out_w),
            ("out_b", self.out_b),
        ]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def clone(self) -> "PolicyParams":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters():
            t.data[...] = state[k]


# ---------------------------------------------------------------------------
# masks and scoring
# ---------------------------------------------------------------------------

def allowed_mask(config: PolicyConfig, answer_only: np.ndarray) -> np.ndarray:
    """Boolean (..., V) mask of tokens the policy may emit. Blocked ids are
    never allowed; at the length cap only answer tokens are."""
    free = np.ones(config.vocab_size, dtype=bool)
    free[list(config.blocked_ids)] = False
    ans = np.zeros(config.vocab_size, dtype=bool)
    ans[list(config.answer_ids)] = True
    answer_only = np.asarray(answer_only, dtype=bool)
    return np.where(answer_only[..., None], ans, free)


def _hidden(policy: PolicyParams, seqs: Sequence[Sequence[int]]) -> Tensor:
    c = policy.config
    ids, mask = pad_batch(seqs)
    L = ids.shape[1]
    if L > c.max_len:
        raise ValueError(f"sequence length {L} exceeds policy max_len {c.max_len}")
    h = ad.embedding(policy.tok_emb, ids) + ad.embedding(policy.pos_emb, np.broadcast_to(np.arange(L), ids.shape))
    return encoder_block(policy.block, h, mask, c.n_heads, causal=True)


def token_logprobs(
    policy: PolicyParams,
    prompts: Sequence[Sequence[int]],
    outputs: Sequence[Sequence[int]],
) -> tuple[Tensor, np.ndarray]:
    """Log-probabilities of each output token given the prompt and the output
    prefix. Returns a (B, T) tensor and the (B, T) validity mask."""
    c = policy.config
    B = len(outputs)
    T = max(len(o) for o in outputs)
    if T == 0:
        raise ValueError("empty output sequence")
    seqs = [list(p) + list(o[:-1]) for p, o in zip(prompts, outputs)]
    valid = np.zeros((B, T), dtype=bool)
    rows = np.zeros((B, T), dtype=np.int64)
    cols = np.zeros((B, T), dtype=np.int64)
    targets = np.full((B, T), c.answer_ids[0], dtype=np.int64)
    for b, (p, o) in enumerate(zip(prompts, outputs)):
        n = len(o)
        valid[b, :n] = True
        rows[b] = b
        cols[b, :n] = len(p) - 1 + np.arange(n)
        cols[b, n:] = len(p) - 1
        targets[b, :n] = o
    h = _hidden(policy, seqs)
    hs = ad.take(h, (rows, cols))
    logits = ad.linear(hs, policy.out_w, policy.out_b)
    answer_only = np.arange(T)[None, :] >= c.reason_cap
    allowed = allowed_mask(c, np.broadcast_to(answer_only, (B, T)))
    bad = valid & ~np.take_along_axis(allowed, targets[..., None], axis=-1)[..., 0]
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise ValueError(f"output {b} token {t} (id {targets[b, t]}) is not an allowed emission")
    logp = ad.pick(ad.log_softmax(logits, axis=-1, mask=allowed), targets)
    return logp, valid


# ---------------------------------------------------------------------------
# supervised warm start
# ---------------------------------------------------------------------------

def sft_loss(policy: PolicyParams, prompts: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> Tensor:
    """Mean per-token negative log-likelihood of gold (reason + answer) tokens."""
    if any(len(g) == 0 for g in golds):
        raise ValueError("empty gold sequence")
    logp, valid = token_logprobs(policy, prompts, golds)
    w = valid / valid.sum()
    return -(logp * Tensor(w)).sum()


def sft_step(policy: PolicyParams, prompts, golds, optimizer=None) -> Tensor:
    """Zero gradients, compute the SFT loss, backpropagate and (optionally) step."""
    policy.zero_grad()
    loss = sft_loss(policy, prompts, golds)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return loss


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class PolicyOutput:
    tokens: list[int]
    logprobs: list[float]


@dataclass
class GroupSample:
    prompt: list[int]
    outputs: list[PolicyOutput]
    context: object = None
    rewards: list = field(default_factory=list)
    finals: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.outputs)


def generate(
    policy: PolicyParams,
    prompts: Sequence[Sequence[int]],
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> list[PolicyOutput]:
    """Ancestral sampling, one output per prompt. Each output ends with an
    answer token; after ``reason_cap`` reason tokens only answers are allowed.
    ``temperature`` <= 1e-8 means greedy decoding (ties -> lowest id). The
    recorded log-probabilities are those of the policy itself (temperature 1)."""
    c = policy.config
    ans = set(c.answer_ids)
    outs: list[list[int]] = [[] for _ in prompts]
    lps: list[list[float]] = [[] for _ in prompts]
    active = list(range(len(prompts)))
    with ad.no_grad():
        for t in range(c.reason_cap + 1):
            if not active:
                break
            seqs = [list(prompts[i]) + outs[i] for i in active]
            h = _hidden(policy, seqs)
            last = np.array([len(s) - 1 for s in seqs])
            hs = h.data[np.arange(len(active)), last]
            logits = hs @ policy.out_w.data + policy.out_b.data
            allowed = allowed_mask(c, np.full(len(active), t >= c.reason_cap))
            logp = ad.log_softmax(logits, axis=-1, mask=allowed).data
            if temperature <= 1e-8:
                choice = np.argmax(np.where(allowed, logits, -np.inf), axis=-1)
            else:
                z = np.where(allowed, logits / temperature, -np.inf)
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                cdf = np.cumsum(p, axis=-1)
                u = rng.random(len(active))[:, None] * cdf[:, -1:]
                choice = np.minimum((cdf <= u).sum(axis=-1), c.vocab_size - 1)
                # never land on a zero-probability token through rounding
                choice = np.where(allowed[np.arange(len(active)), choice], choice, np.argmax(p, axis=-1))
            still = []
            for k, i in enumerate(active):
                tok = int(choice[k])
                outs[i].append(tok)
                lps[i].append(float(logp[k, tok]))
                if tok not in ans:
                    still.append(i)
            active = still
    return [PolicyOutput(o, l) for o, l in zip(outs, lps)]


def sample_group(
    policy: PolicyParams,
    prompt: Sequence[int],
    G: int = 16,
    temperature: float = 1.0,
    seed: int | np.random.Generator = 0,
    context=None,
) -> GroupSample:
    if G < 2:
        raise ValueError("a group needs G >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return GroupSample(list(prompt), generate(policy, [prompt] * G, rng, temperature), context)


def sample_groups(
    policy: PolicyParams,
    prompts: Sequence[Sequence[int]],
    G: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    contexts: Sequence | None = None,
) -> list[GroupSample]:
    """Groups for several prompts sampled in one batched pass."""
    if G < 2:
        raise ValueError("a group needs G >= 2")
    flat = [p for p in prompts for _ in range(G)]
    outs = generate(policy, flat, rng, temperature)
    contexts = contexts or [None] * len(prompts)
    return [GroupSample(list(p), outs[i * G : (i + 1) * G], contexts[i]) for i, p in enumerate(prompts)]


# ---------------------------------------------------------------------------
# GRPO
# ---------------------------------------------------------------------------

@dataclass
class GRPOStats:
    objective: float
    surrogate: float
    kl: float
    clip_fraction: float


def grpo_objective(
    policy: PolicyParams,
    ref_policy: PolicyParams,
    groups: Sequence[GroupSample],
    eps: float = 0.2,
    kl_coeff: float = 0.01,
    old_policy: PolicyParams | None = None,
) -> tuple[Tensor, GRPOStats]:
    """Clipped group-relative surrogate minus a per-token KL penalty.

    Per token: ``min(rho * A, clip(rho, 1-eps, 1+eps) * A) - kl_coeff * KL``
    with ``KL = r - log r - 1``, ``r = pi_ref / pi_theta``. Tokens are averaged
    within each output, outputs within each group, then groups. The old-policy
    log-probabilities come from the sampling record; ``old_policy`` is only
    used to fill outputs that carry no record.
    """
    prompts, outputs, adv, old = [], [], [], []
    for gi, g in enumerate(groups):
        if len(g.advantages) != g.size:
            raise ValueError(f"group {gi} has {len(g.advantages)} advantages for {g.size} outputs")
        for oi, o in enumerate(g.outputs):
            lp = o.logprobs
            if lp is None or len(lp) != len(o.tokens):
                if old_policy is None:
                    raise ValueError(f"group {gi} output {oi}: token missing from the old-policy record")
                with ad.no_grad():
                    rec, _ = token_logprobs(old_policy, [g.prompt], [o.tokens])
                lp = rec.data[0, : len(o.tokens)].tolist()
            prompts.append(g.prompt)
            outputs.append(o.tokens)
            adv.append(g.advantages[oi])
            old.append(lp)
    B = len(outputs)
    logp, valid = token_logprobs(policy, prompts, outputs)
    T = valid.shape[1]
    old_lp = np.zeros((B, T))
    for b, lp in enumerate(old):
        old_lp[b, : len(lp)] = lp
    with ad.no_grad():
        ref_lp, _ = token_logprobs(ref_policy, prompts, outputs)
    A = np.broadcast_to(np.asarray(adv, dtype=float)[:, None], (B, T))
    ratio = ad.exp(logp - Tensor(old_lp))
    surr = ad.minimum(ratio * Tensor(A), ad.clip(ratio, 1.0 - eps, 1.0 + eps) * Tensor(A))
    log_r = Tensor(np.where(valid, ref_lp.data, 0.0)) - logp
    kl = ad.exp(log_r) - log_r - 1.0
    per_token = surr - kl_coeff * kl if kl_coeff else surr
    # weight = 1 / (|o_i| * G * n_groups) on valid tokens
    w = np.zeros((B, T))
    b = 0
    for g in groups:
        for o in g.outputs:
            w[b, : len(o.tokens)] = 1.0 / (len(o.tokens) * g.size * len(groups))
            b += 1
    objective = (per_token * Tensor(w)).sum()
    r = ratio.data[valid]
    stats = GRPOStats(
        objective=float(objective.data),
        surrogate=float((surr.data * w).sum()),
        kl=float((kl.data * w).sum()),
        clip_fraction=float(np.mean((r < 1.0 - eps) | (r > 1.0 + eps))) if r.size else 0.0,
    )
    return objective, stats


def grpo_step(
    policy: PolicyParams,
    ref_policy: PolicyParams,
    old_policy: PolicyParams | None,
    groups: Sequence[GroupSample],
    eps: float = 0.2,
    kl_coeff: float = 0.01,
    optimizer=None,
) -> tuple[Tensor, GRPOStats]:
    """Negated objective (for minimisation), with gradients populated."""
    policy.zero_grad()
    objective, stats = grpo_objective(policy, ref_policy, groups, eps, kl_coeff, old_policy)
    loss = -objective
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return loss, stats
