"""Supervised warm start followed by GRPO with a label-only or weighted reward."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import EvalReport
from .optim import AdamW
from .policy import (
    GroupSample,
    PolicyConfig,
    PolicyParams,
    generate,
    grpo_step,
    sample_groups,
    sft_step,
)
from .reward import RewardVector, aggregate_reward, compute_advantages, score_output
from .synth import ANSWER_TOKENS, CLS, SEP, RelevanceExample, World

REWARD_MODES = ("label_only", "weighted")


class CheckpointMissing(FileNotFoundError):
    pass


@dataclass
class GRPOSettings:
    reward_mode: str = "weighted"
    alpha: float = 0.5
    beta: float = 0.5
    G: int = 16
    eps: float = 0.2
    kl_coeff: float = 0.01
    steps: int = 60
    prompts_per_step: int = 8
    inner_epochs: int = 2
    lr: float = 5e-4
    temperature: float = 1.0
    sft_steps: int = 300
    sft_batch: int = 32
    sft_lr: float = 3e-3
    weight_decay: float = 0.0
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 128
    reason_cap: int = 12
    eval_group_prompts: int = 64

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}; expected one of {REWARD_MODES}")

    def weights(self) -> tuple[float, float]:
        """(alpha, beta) actually used: label-only ignores the process reward."""
        if self.reward_mode == "label_only":
            return 0.0, 1.0
        return self.alpha, self.beta

    def policy_config(self, world: World) -> PolicyConfig:
        return PolicyConfig(
            vocab_size=len(world.vocab),
            answer_ids=tuple(world.vocab.answer_ids),
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            reason_cap=self.reason_cap,
        )


def prompt_ids(world: World, e: RelevanceExample) -> list[int]:
    v = world.vocab
    return v.tokenize([CLS, *e.query, SEP, *e.service, SEP])


def gold_ids(world: World, e: RelevanceExample, reason_cap: int) -> list[int]:
    reason = list(e.reason)[:reason_cap]
    return world.vocab.tokenize([*reason, ANSWER_TOKENS[e.label]])


def score_tokens(world: World, e: RelevanceExample, tokens: Sequence[int]) -> RewardVector:
    surf = world.vocab.detokenize(tokens)
    answer = surf[-1] if surf and surf[-1] in ANSWER_TOKENS else None
    reason = surf[:-1] if answer is not None else surf
    return score_output(world, e.query, e.service, e.label, reason, answer)


def fill_rewards(world: World, groups: Sequence[GroupSample], alpha: float, beta: float) -> None:
    for g in groups:
        g.rewards = [score_tokens(world, g.context, o.tokens) for o in g.outputs]
        g.finals = [aggregate_reward(r, alpha, beta) for r in g.rewards]
        g.advantages = compute_advantages(g.finals).tolist()


def run_sft(
    world: World,
    examples: Sequence[RelevanceExample],
    s: GRPOSettings,
    seed: int,
) -> tuple[PolicyParams, list[float]]:
    policy = PolicyParams(s.policy_config(world), seed=seed)
    opt = AdamW(policy.parameters(), lr=s.sft_lr, weight_decay=s.weight_decay)
    rng = np.random.default_rng([seed, 11])
    prompts = [prompt_ids(world, e) for e in examples]
    golds = [gold_ids(world, e, s.reason_cap) for e in examples]
    losses = []
    for _ in range(s.sft_steps):
        idx = rng.choice(len(examples), size=min(s.sft_batch, len(examples)), replace=False)
        loss = sft_step(policy, [prompts[i] for i in idx], [golds[i] for i in idx], opt)
        losses.append(float(loss.data))
    return policy, losses


def save_policy(policy: PolicyParams, path) -> None:
    cfg = asdict(policy.config)
    np.savez(path, __config__=np.array(repr(cfg)), **policy.state_dict())


def load_policy(path) -> PolicyParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"SFT checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        import ast

        cfg = ast.literal_eval(str(z["__config__"]))
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
        policy = PolicyParams(PolicyConfig(**cfg), seed=0)
        policy.load_state_dict({k: z[k] for k in z.files if k != "__config__"})
    return policy


@dataclass
class PolicyEval:
    accuracy: float
    thinking: float
    label_reward: float
    report: EvalReport


def evaluate_policy(world: World, policy: PolicyParams, examples: Sequence[RelevanceExample]) -> PolicyEval:
    """Greedy decoding on held-out prompts."""
    outs = generate(policy, [prompt_ids(world, e) for e in examples], np.random.default_rng(0), temperature=0.0)
    rewards = [score_tokens(world, e, o.tokens) for e, o in zip(examples, outs)]
    preds = [ANSWER_TOKENS.index(world.vocab.tokens[o.tokens[-1]]) for o in outs]
    report = EvalReport.from_predictions([e.label for e in examples], preds)
    return PolicyEval(
        accuracy=report.accuracy,
        thinking=float(np.mean([r.thinking for r in rewards])),
        label_reward=float(np.mean([r.label for r in rewards])),
        report=report,
    )


def mean_group_reward(world: World, policy: PolicyParams, examples, s: GRPOSettings, seed: int) -> float:
    """Mean final reward of G sampled outputs per prompt, fixed sampling seed."""
    alpha, beta = s.weights()
    rng = np.random.default_rng([seed, 13])
    groups = sample_groups(policy, [prompt_ids(world, e) for e in examples], s.G, rng, s.temperature, examples)
    fill_rewards(world, groups, alpha, beta)
    return float(np.mean([f for g in groups for f in g.finals]))


@dataclass
class GRPOStepRecord:
    step: int
    mean_group_reward: float
    mean_thinking: float
    mean_label: float
    clip_fraction: float
    kl: float
    objective: float


@dataclass
class GRPOResult:
    sft_eval: PolicyEval
    final_eval: PolicyEval
    group_reward_start: float
    group_reward_end: float
    log: list[GRPOStepRecord] = field(default_factory=list)
    sft_losses: list[float] = field(default_factory=list)


def train_grpo(
    world: World,
    prompts: Sequence[RelevanceExample],
    held_out: Sequence[RelevanceExample],
    s: GRPOSettings,
    seed: int,
    sft_policy: PolicyParams,
    on_step: Callable[[int, PolicyParams], None] | None = None,
) -> GRPOResult:
    """GRPO from a fixed SFT policy (which doubles as the KL reference).
    ``on_step(step, policy)`` runs after each update and must not touch the
    policy's parameters."""
    alpha, beta = s.weights()
    ref = sft_policy.clone()
    policy = sft_policy.clone()
    opt = AdamW(policy.parameters(), lr=s.lr, weight_decay=s.weight_decay)
    rng = np.random.default_rng([seed, 17])
    eval_groups = list(held_out[: s.eval_group_prompts])
    sft_eval = evaluate_policy(world, policy, held_out)
    start = mean_group_reward(world, policy, eval_groups, s, seed)
    log = []
    for step in range(s.steps):
        idx = rng.choice(len(prompts), size=min(s.prompts_per_step, len(prompts)), replace=False)
        batch = [prompts[i] for i in idx]
        groups = sample_groups(policy, [prompt_ids(world, e) for e in batch], s.G, rng, s.temperature, batch)
        fill_rewards(world, groups, alpha, beta)
        stats = None
        for _ in range(s.inner_epochs):
            _, stats = grpo_step(policy, ref, None, groups, s.eps, s.kl_coeff, opt)
        rewards = [r for g in groups for r in g.rewards]
        log.append(
            GRPOStepRecord(
                step=step,
                mean_group_reward=float(np.mean([f for g in groups for f in g.finals])),
                mean_thinking=float(np.mean([r.thinking for r in rewards])),
                mean_label=float(np.mean([r.label for r in rewards])),
                clip_fraction=stats.clip_fraction,
                kl=stats.kl,
                objective=stats.objective,
            )
        )
        if on_step is not None:
            on_step(step, policy)
    end = mean_group_reward(world, policy, eval_groups, s, seed)
    return GRPOResult(
        sft_eval=sft_eval,
        final_eval=evaluate_policy(world, policy, held_out),
        group_reward_start=start,
        group_reward_end=end,
        log=log,
    )
