"""Acceptance suite. Each test prints one ``criterion N: PASS|FAIL`` line and
then asserts it, so a shortfall shows up both in the summary and as a failed
test. Criteria 6, 7 and 8 train on the full default synthetic setup and take
most of the wall-clock; seeds run in parallel across all available cores."""

import math
import os
import re
import resource
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from reason_distill import autodiff as ad
from reason_distill.config import ExperimentConfig
from reason_distill.experiments import run_distill_methods, run_grpo
from reason_distill.losses import classification_ce, cosine_align_loss, info_nce
from reason_distill.metrics import accuracy, macro_f1, weighted_f1
from reason_distill.policy import (
    GroupSample,
    PolicyConfig,
    PolicyOutput,
    PolicyParams,
    grpo_objective,
    grpo_step,
    sample_groups,
    token_logprobs,
)
from reason_distill.reward import compute_advantages

SUITE_START = time.perf_counter()
WORKERS = os.cpu_count() or 1
SEEDS = (0, 1, 2, 3, 4)
DONE: set[int] = set()


def full_config() -> ExperimentConfig:
    return ExperimentConfig().paper_defaults().with_overrides("experiment", seeds=SEEDS, workers=WORKERS)


def cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "reason_distill.cli", *map(str, args)],
        capture_output=True,
        text=True,
        cwd=cwd,
    )


# ---------------------------------------------------------------------------
# 1: gradient integrity
# ---------------------------------------------------------------------------

REQUIRED_CHECKS = (
    "classification CE",
    "cosine",
    "InfoNCE",
    "CRSD composite",
    "SFT",
    "GRPO",
)


def test_criterion_01_gradients(verdict):
    t0 = time.perf_counter()
    proc = cli("grad-check", "--single-thread")
    elapsed = time.perf_counter() - t0
    out = proc.stdout
    worst = float(re.search(r"max relative error ([0-9.e+-]+)", out).group(1))
    names = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    covered = all(any(req in ln for ln in names) for req in REQUIRED_CHECKS)
    ok = proc.returncode == 0 and worst < 1e-4 and covered and elapsed < 120
    DONE.add(1)
    assert verdict(1, ok, f"{len(names)} checks, max rel err {worst:.2e}, all required present={covered}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2: closed-form loss cases
# ---------------------------------------------------------------------------


def test_criterion_02_closed_forms(verdict):
    rng = np.random.default_rng(0)
    errs = {}
    with ad.no_grad():
        one = ad.Tensor(rng.normal(size=(1, 6)))
        errs["infonce N=1"] = abs(float(info_nce(one, ad.Tensor(rng.normal(size=(1, 6)))).data))
        worst = 0.0
        for n in (2, 4, 9, 32):
            row = rng.normal(size=(1, 6))
            x = ad.Tensor(np.repeat(row, n, axis=0))
            y = ad.Tensor(np.repeat(rng.normal(size=(1, 6)), n, axis=0))
            worst = max(worst, abs(float(info_nce(x, y).data) - math.log(n)))
        errs["infonce identical rows"] = worst
        logits = ad.Tensor(np.full((5, 3), 0.7))
        errs["uniform CE"] = abs(float(classification_ce(logits, [0, 1, 2, 1, 0]).data) - math.log(3))
        a = rng.normal(size=(1, 5))
        b = rng.normal(size=(1, 5))
        b -= (b @ a.T) / (a @ a.T) * a  # orthogonal to a
        cos = [
            float(cosine_align_loss(ad.Tensor(a), ad.Tensor(a * 3.0)).data),
            float(cosine_align_loss(ad.Tensor(a), ad.Tensor(b)).data),
            float(cosine_align_loss(ad.Tensor(a), ad.Tensor(-2.0 * a)).data),
        ]
    ok = errs["infonce N=1"] <= 1e-12 and errs["infonce identical rows"] <= 1e-9 and errs["uniform CE"] <= 1e-9
    cos_err = max(abs(c - t) for c, t in zip(cos, (0.0, 1.0, 2.0)))
    ok = ok and cos_err <= 1e-12
    DONE.add(2)
    detail = ", ".join(f"{k} err {v:.1e}" for k, v in errs.items()) + f", cosine err {cos_err:.1e}"
    assert verdict(2, ok, detail)


# ---------------------------------------------------------------------------
# 3: advantage invariants
# ---------------------------------------------------------------------------


def test_criterion_03_advantages(verdict):
    rng = np.random.default_rng(3)
    worst_mean = worst_std = 0.0
    guarded = 0
    bad_guard = 0
    for i in range(10_000):
        G = int(rng.integers(2, 33))
        kind = i % 3
        if kind == 0:
            r = rng.normal(size=G) * rng.uniform(0.01, 10)
        elif kind == 1:
            r = rng.integers(0, 5, size=G).astype(float)  # discrete rubric scores, often tied
        else:
            r = np.full(G, rng.uniform(0, 4)) + rng.normal(size=G) * 1e-10
        adv = compute_advantages(r)
        spread = math.sqrt(sum((v - sum(r) / G) ** 2 for v in r) / G)
        if np.all(adv == 0.0):
            guarded += 1
            bad_guard += spread >= 1e-8
            continue
        worst_mean = max(worst_mean, abs(adv.mean()))
        worst_std = max(worst_std, abs(math.sqrt(np.mean((adv - adv.mean()) ** 2)) - 1.0))
    exact = compute_advantages([0.0, 2.0]).tolist() == [-1.0, 1.0]
    ok = worst_mean < 1e-12 and worst_std < 1e-9 and bad_guard == 0 and exact
    DONE.add(3)
    assert verdict(
        3, ok, f"|mean| max {worst_mean:.1e}, |std-1| max {worst_std:.1e}, {guarded} guarded groups, [0,2] exact={exact}"
    )


# ---------------------------------------------------------------------------
# 4: clipping semantics
# ---------------------------------------------------------------------------

PROMPTS = [[1, 6, 2, 7, 2], [1, 7, 7, 2, 6, 2]]


def toy_policy(seed):
    cfg = PolicyConfig(vocab_size=8, d_model=8, n_heads=2, d_ff=16, max_len=24, reason_cap=3, init_std=0.5)
    return PolicyParams(cfg, seed=seed)


def test_criterion_04_clipping(verdict):
    p = toy_policy(11)
    tok = 4
    with ad.no_grad():
        lp, _ = token_logprobs(p, [PROMPTS[0]], [[tok]])
    cur = float(lp.data[0, 0])
    zero = True
    for adv, rho in ((1.0, 1.5), (-1.0, 0.5), (2.0, 1.21), (-0.5, 0.79)):
        g = GroupSample(PROMPTS[0], [PolicyOutput([tok], [cur - math.log(rho)])])
        g.advantages = [adv]
        grpo_step(p, p.clone(), None, [g], eps=0.2, kl_coeff=0.0)
        # the output bias feeds the single logit row directly, so its gradient is the logit gradient
        zero &= bool(np.all(p.out_b.grad == 0.0))
        zero &= all(bool(np.all(t.grad == 0.0)) for t in p.parameters())

    pol, old, ref = toy_policy(12), toy_policy(13), toy_policy(14)
    gs = sample_groups(old, PROMPTS, 4, np.random.default_rng(2))
    for g in gs:
        g.advantages = compute_advantages(np.arange(4.0) ** 2).tolist()
    obj, _ = grpo_objective(pol, ref, gs, eps=math.inf, kl_coeff=0.0)
    want = 0.0
    with ad.no_grad():
        for g in gs:
            for o, a in zip(g.outputs, g.advantages):
                cur_lp, _ = token_logprobs(pol, [g.prompt], [o.tokens])
                ratios = np.exp(cur_lp.data[0, : len(o.tokens)] - np.array(o.logprobs))
                want += a * ratios.sum() / len(o.tokens) / (g.size * len(gs))
    err = abs(float(obj.data) - want)
    ok = zero and err <= 1e-12
    DONE.add(4)
    assert verdict(4, ok, f"clipped-token gradient exactly zero={zero}, eps=inf surrogate err {err:.1e}")


# ---------------------------------------------------------------------------
# 5: metric oracle
# ---------------------------------------------------------------------------


def brute_metrics(y, p, labels=(0, 1, 2)):
    n = len(y)
    correct = 0
    for a, b in zip(y, p):
        if a == b:
            correct += 1
    f1s, supports = [], []
    for c in labels:
        tp = fp = fn = 0
        for a, b in zip(y, p):
            if a == c and b == c:
                tp += 1
            elif a != c and b == c:
                fp += 1
            elif a == c and b != c:
                fn += 1
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
        supports.append(tp + fn)
    return correct / n, sum(f1s) / len(labels), sum(f * s for f, s in zip(f1s, supports)) / n


def test_criterion_05_metrics(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        y = rng.integers(0, 3, size=n)
        p = np.where(rng.random(n) < 0.6, y, rng.integers(0, 3, size=n))
        got = (accuracy(y, p), macro_f1(y, p), weighted_f1(y, p))
        want = brute_metrics(y.tolist(), p.tolist())
        worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
    y, p = [0, 1, 2], [0, 1, 1]
    worked = (accuracy(y, p), macro_f1(y, p), weighted_f1(y, p))
    worked_err = max(abs(a - b) for a, b in zip(worked, (2 / 3, 5 / 9, 5 / 9)))
    ok = worst <= 1e-12 and worked_err <= 1e-12
    DONE.add(5)
    assert verdict(5, ok, f"max diff vs counting reference {worst:.1e}, worked example {tuple(round(v, 4) for v in worked)}")


# ---------------------------------------------------------------------------
# 6, 7: distillation ablations on the default synthetic world
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def distill_runs():
    cfg = full_config()
    t0 = time.perf_counter()
    main = run_distill_methods(cfg, ["baseline", "crsd_full", "crsd_align_only"])
    t_main = time.perf_counter() - t0
    t0 = time.perf_counter()
    rest = run_distill_methods(cfg, ["crsd_no_reason", "crsd_random_reason"])
    t_rest = time.perf_counter() - t0
    return {**main, **rest}, t_main, t_rest


def acc(runs, method):
    return runs[method].report.mean["accuracy"]


def test_criterion_06_crsd_beats_baseline(verdict, distill_runs):
    runs, t_main, _ = distill_runs
    full, align, base = acc(runs, "crsd_full"), acc(runs, "crsd_align_only"), acc(runs, "baseline")
    ok = full - base >= 0.01 and full >= align >= base and t_main < 20 * 60
    DONE.add(6)
    assert verdict(
        6,
        ok,
        f"accuracy crsd_full {full:.4f}, crsd_align_only {align:.4f}, baseline {base:.4f} "
        f"(gap {100 * (full - base):+.2f} pts), {t_main / 60:.1f} min on {WORKERS} worker(s)",
    )


def test_criterion_07_reason_ablation(verdict, distill_runs):
    runs, *_ = distill_runs
    full, rand = acc(runs, "crsd_full"), acc(runs, "crsd_random_reason")
    none, base = acc(runs, "crsd_no_reason"), acc(runs, "baseline")
    shared = len({tuple(r["data_digest"] for r in runs[m].report.per_seed) for m in runs}) == 1
    ok = shared and full - rand >= 0.01 and abs(none - base) <= 0.005
    DONE.add(7)
    assert verdict(
        7,
        ok,
        f"crsd_full - crsd_random_reason {100 * (full - rand):+.2f} pts, "
        f"crsd_no_reason - baseline {100 * (none - base):+.2f} pts, shared triples={shared}",
    )


# ---------------------------------------------------------------------------
# 8: GRPO reward modes
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def grpo_runs(tmp_path_factory):
    cfg = full_config()
    ckpt = tmp_path_factory.mktemp("sft")
    weighted = run_grpo(cfg, ckpt, reward_mode="weighted", train_sft=True)
    label = run_grpo(cfg, ckpt, reward_mode="label_only", train_sft=False)
    return weighted.report, label.report


def test_criterion_08_grpo_reward_modes(verdict, grpo_runs):
    w, lab = grpo_runs
    same_start = [a["sft_accuracy"] for a in w.per_seed] == [b["sft_accuracy"] for b in lab.per_seed]
    rising = all(r["group_reward_end"] > r["group_reward_start"] for rep in grpo_runs for r in rep.per_seed)
    think_w, think_l = w.mean["thinking"], lab.mean["thinking"]
    acc_w, acc_l = w.mean["accuracy"], lab.mean["accuracy"]
    ok = same_start and rising and think_w > think_l and acc_w >= acc_l - 0.01
    DONE.add(8)
    assert verdict(
        8,
        ok,
        f"R_thinking weighted {think_w:.3f} vs label-only {think_l:.3f}, accuracy {acc_w:.4f} vs {acc_l:.4f}, "
        f"group reward rises in every run={rising}, shared warm start={same_start}",
    )


# ---------------------------------------------------------------------------
# 9: determinism
# ---------------------------------------------------------------------------

TINY = """\
[experiment]
seeds = (0, 1)
[data]
n_train = 300
n_test = 100
n_grpo_pool = 60
n_grpo_eval = 30
[distill]
steps = 15
batch_size = 16
d_model = 16
n_heads = 2
d_ff = 32
[grpo]
steps = 3
sft_steps = 10
G = 4
prompts_per_step = 2
eval_group_prompts = 4
d_model = 16
d_ff = 32
"""


def test_criterion_09_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    mismatched = []
    for rep in ("a", "b"):
        base = tmp_path / rep
        calls = [
            ("gen-data", "--config", cfg, "--out", base / "data"),
            ("train-distill", "--config", cfg, "--method", "crsd_full", "--out", base / "distill"),
            ("ablate", "--config", cfg, "--out", base / "ablate"),
            ("train-grpo", "--config", cfg, "--out", base / "grpo"),
            ("report", base / "distill", base / "ablate" / "crsd_full", "--out", base / "report"),
        ]
        for call in calls:
            proc = cli(*call, "--single-thread")
            assert proc.returncode == 0, proc.stderr
    a, b = tmp_path / "a", tmp_path / "b"
    names = ("metrics.csv", "report.json", "comparison.csv", "train.jsonl", "test.jsonl", "world.json")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.name in names)
    for rel in files:
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            mismatched.append(str(rel))
    ok = not mismatched and len(files) >= 12
    DONE.add(9)
    assert verdict(9, ok, f"{len(files)} output files compared across reruns, mismatches: {mismatched or 'none'}")


# ---------------------------------------------------------------------------
# 10: budget
# ---------------------------------------------------------------------------


def peak_memory_mb() -> tuple[float, float]:
    own = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    child = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1024
    return own, child


def test_criterion_10_budget(verdict):
    elapsed = time.perf_counter() - SUITE_START
    own, child = peak_memory_mb()
    # concurrent workers each peak at most at the largest child
    mem = own + child * max(1, WORKERS - 1)
    complete = DONE == set(range(1, 10))
    ok = complete and elapsed < 45 * 60 and mem < 2048
    assert verdict(
        10,
        ok,
        f"criteria 1-9 {'all ran' if complete else 'only ' + str(sorted(DONE))}; {elapsed / 60:.1f} min on "
        f"{WORKERS} core(s), peak memory about {mem:.0f} MB",
    )
