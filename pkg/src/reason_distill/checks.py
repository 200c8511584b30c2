"""Finite-difference gradient suite and closed-form loss self-tests."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import DistillSettings, distill_loss
from .encoder import EncoderParams
from .losses import classification_ce, cosine_align_loss, info_nce
from .policy import GroupSample, PolicyConfig, PolicyParams, generate, grpo_objective, sft_loss
from .reward import compute_advantages

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} {self.value:.3e}  {self.detail}".rstrip()


def _leaf(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is None:
        x = rng.normal(size=shape)
    else:
        x = rng.uniform(lo, hi, size=shape)
    return Tensor(x, requires_grad=True)


def _away_from(rng, shape, points, gap=0.05):
    """Normal samples nudged at least ``gap`` away from kink points."""
    x = rng.normal(size=shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-12) * gap * 2
    return x


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    # random weights stop symmetric outputs from hiding wrong gradients
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ad.tsum(out * Tensor(w))


def op_cases() -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(0)
    cases: dict[str, Callable[[], float]] = {}

    def unary(name, fn, x):
        cases[name] = lambda: ad.grad_check(lambda: _weighted(fn(x)), [x])

    def binary(name, fn, a, b):
        cases[name] = lambda: ad.grad_check(lambda: _weighted(fn(a, b)), [a, b])

    binary("add", ad.add, _leaf(rng, 3, 4), _leaf(rng, 3, 4))
    binary("add (scalar operand)", ad.add, _leaf(rng, 3, 4), _leaf(rng, 1))
    binary("sub", ad.sub, _leaf(rng, 3, 4), _leaf(rng, 3, 4))
    binary("mul", ad.mul, _leaf(rng, 3, 4), _leaf(rng, 3, 4))
    binary("div", ad.div, _leaf(rng, 3, 4), _leaf(rng, 3, 4, lo=0.5, hi=2.0))
    unary("negate", ad.negate, _leaf(rng, 5))
    unary("exp", ad.exp, _leaf(rng, 5))
    unary("log", ad.log, _leaf(rng, 5, lo=0.2, hi=3.0))
    unary("tanh", ad.tanh, _leaf(rng, 5))
    unary("square", ad.square, _leaf(rng, 5))
    unary("sqrt", ad.sqrt, _leaf(rng, 5, lo=0.2, hi=3.0))
    a = Tensor(_away_from(rng, (6,), []), requires_grad=True)
    b = Tensor(a.data + np.where(rng.random(6) < 0.5, 0.5, -0.5), requires_grad=True)
    binary("minimum", ad.minimum, a, b)
    unary("clip", lambda x: ad.clip(x, -0.5, 0.5), Tensor(_away_from(rng, (8,), [-0.5, 0.5]), requires_grad=True))
    unary("relu", ad.relu, Tensor(_away_from(rng, (8,), [0.0]), requires_grad=True))
    unary("sum (axis)", lambda x: ad.tsum(x, axis=1, keepdims=True), _leaf(rng, 3, 4))
    unary("mean (axis)", lambda x: ad.tmean(x, axis=0), _leaf(rng, 3, 4))
    unary("reshape", lambda x: ad.reshape(x, (4, 3)), _leaf(rng, 3, 4))
    unary("transpose", lambda x: ad.transpose(x, (1, 0, 2)), _leaf(rng, 2, 3, 4))
    unary("take", lambda x: ad.take(x, (np.array([0, 2, 0]), np.array([1, 1, 3]))), _leaf(rng, 3, 4))
    unary("embedding", lambda t: ad.embedding(t, np.array([[0, 3], [3, 1]])), _leaf(rng, 4, 3))
    unary("pick", lambda x: ad.pick(x, np.array([2, 0, 1])), _leaf(rng, 3, 4))
    p, q = _leaf(rng, 2, 3), _leaf(rng, 1, 3)
    cases["concat"] = lambda: ad.grad_check(lambda: _weighted(ad.concat([p, q], axis=0)), [p, q])
    binary("matmul", ad.matmul, _leaf(rng, 3, 4), _leaf(rng, 4, 2))
    binary("matmul (batched)", ad.matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 2))
    binary("matmul (shared weight)", ad.matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2))
    binary("add_bias", ad.add_bias, _leaf(rng, 2, 3, 4), _leaf(rng, 4))
    x, w, bias = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    cases["linear"] = lambda: ad.grad_check(lambda: _weighted(ad.linear(x, w, bias)), [x, w, bias])
    mask = np.array([[True, True, False, True], [True, False, True, True]])
    unary("softmax (masked)", lambda x: ad.softmax(x, axis=-1, mask=mask), _leaf(rng, 2, 4))
    s = _leaf(rng, 2, 4)
    cases["log_softmax (masked)"] = lambda: ad.grad_check(
        lambda: _weighted(ad.pick(ad.log_softmax(s, axis=-1, mask=mask), np.array([3, 2]))), [s]
    )
    x2, g2, b2 = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    cases["layernorm"] = lambda: ad.grad_check(lambda: _weighted(ad.layernorm(x2, g2, b2)), [x2, g2, b2])
    unary("l2_normalize", lambda x: ad.l2_normalize(x), _leaf(rng, 3, 4))
    return cases


def loss_cases() -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(1)
    cases: dict[str, Callable[[], float]] = {}

    logits = _leaf(rng, 5, 3)
    labels = np.array([0, 2, 1, 2, 0])
    cases["classification CE"] = lambda: ad.grad_check(lambda: classification_ce(logits, labels), [logits])

    emb, target = _leaf(rng, 4, 6), rng.normal(size=(4, 6))
    cases["cosine align loss"] = lambda: ad.grad_check(lambda: cosine_align_loss(emb, target), [emb])

    c, cr = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    cases["InfoNCE (batch 4)"] = lambda: ad.grad_check(lambda: info_nce(c, cr, tau=0.5), [c, cr])

    def crsd() -> float:
        s = DistillSettings(method="crsd_full", d_model=8, n_heads=2, d_ff=16, n_layers=2, d_reason=4,
                            max_len=16, init_std=0.5, tau=0.5, gamma=0.3, delta=0.3)
        params = EncoderParams(s.encoder_config(12), seed=3)
        student = [[1, 4, 5, 2, 6, 7], [1, 8, 2, 9, 10, 11, 4], [1, 3, 2, 6, 5], [1, 9, 9, 2, 7]]
        teacher = [st + [2, 3 + i, 5] for i, st in enumerate(student)]
        y = np.array([2, 0, 1, 2])
        return ad.grad_check(lambda: distill_loss(params, "crsd_full", s, student, teacher, y)[0],
                             params.parameters(), elements=6)

    cases["CRSD composite (2-layer encoder)"] = crsd

    def toy_policy(seed):
        cfg = PolicyConfig(vocab_size=8, d_model=8, n_heads=2, d_ff=16, max_len=16, reason_cap=3, init_std=0.5)
        return PolicyParams(cfg, seed=seed)

    prompts = [[1, 6, 2, 7, 2], [1, 7, 7, 2, 6, 2]]
    golds = [[6, 7, 4], [5]]

    def sft() -> float:
        pol = toy_policy(4)
        return ad.grad_check(lambda: sft_loss(pol, prompts, golds), pol.parameters(), elements=8)

    cases["SFT loss (toy policy)"] = sft

    def grpo() -> float:
        pol, ref, old = toy_policy(5), toy_policy(6), toy_policy(7)
        outs = generate(old, prompts * 2, np.random.default_rng(0))
        groups = []
        for i, pr in enumerate(prompts):
            g = GroupSample(pr, [outs[i], outs[i + 2]])
            g.advantages = compute_advantages([1.0, 3.0 + i]).tolist()
            groups.append(g)
        return ad.grad_check(lambda: grpo_objective(pol, ref, groups, eps=0.2, kl_coeff=0.1)[0],
                             pol.parameters(), elements=8)

    cases["GRPO objective (toy policy)"] = grpo
    return cases


def run_grad_checks(tol: float = GRAD_TOL) -> list[CheckResult]:
    results = []
    for group in (op_cases(), loss_cases()):
        for name, fn in group.items():
            t0 = time.perf_counter()
            err = fn()
            results.append(CheckResult(name, err, err < tol, f"({time.perf_counter() - t0:.2f}s)"))
    return results


# ---------------------------------------------------------------------------
# closed-form loss cases
# ---------------------------------------------------------------------------

def selftest_cases() -> list[CheckResult]:
    out = []

    def record(name, got, want, tol):
        err = abs(got - want)
        out.append(CheckResult(name, err, err <= tol, f"got {got:.12g}, want {want:.12g}"))

    rng = np.random.default_rng(0)
    with ad.no_grad():
        one = Tensor(rng.normal(size=(1, 8)))
        record("InfoNCE at N=1", float(info_nce(one, Tensor(rng.normal(size=(1, 8))), 0.05).data), 0.0, 1e-12)
        for n in (2, 4, 16):
            same = Tensor(np.tile(rng.normal(size=(1, 8)), (n, 1)))
            record(f"InfoNCE identical rows N={n}", float(info_nce(same, same, 0.05).data), math.log(n), 1e-9)
        uniform = Tensor(np.full((4, 3), 0.7))
        record("CE on uniform logits", float(classification_ce(uniform, np.array([0, 1, 2, 1])).data), math.log(3), 1e-9)
        v = rng.normal(size=(1, 6))
        orth = np.zeros((1, 6))
        orth[0, 0], orth[0, 1] = -v[0, 1], v[0, 0]
        for name, other, want in (("identical", v, 0.0), ("orthogonal", orth, 1.0), ("anti-parallel", -v, 2.0)):
            record(f"cosine loss {name}", float(cosine_align_loss(Tensor(v), other).data), want, 1e-12)
    return out
