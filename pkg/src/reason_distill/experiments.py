"""Multi-seed orchestration shared by the command line and the acceptance tests."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .distill import DistillSettings, reason_mode_for, train_distill
from .grpo_train import GRPOSettings, load_policy, run_sft, save_policy, train_grpo
from .synth import RelevanceExample, World, gen_dataset, gen_world, read_jsonl, with_reason_mode, write_jsonl

VERSION = "0.1.0"
HEADLINE = ("accuracy", "macro_f1", "weighted_f1")
TABLE_COLUMNS = ("Method", "Accuracy", "Macro F1", "Weight F1")
TEST_ID_OFFSET = 10**6


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Datasets:
    world: World
    train: list[RelevanceExample]
    test: list[RelevanceExample]
    grpo_pool: list[RelevanceExample]
    grpo_eval: list[RelevanceExample]


def _split_seed(data_seed: int, k: int) -> int:
    return 10 * data_seed + k


def make_datasets(cfg: ExperimentConfig) -> Datasets:
    d = cfg.data
    s = cfg.experiment.data_seed
    world = gen_world(cfg.experiment.world_seed, cfg.world)
    train = gen_dataset(world, d.n_train, d.label_mix, d.reason_mode, seed=_split_seed(s, 1))
    test = gen_dataset(world, d.n_test, d.label_mix, "oracle", seed=_split_seed(s, 2), start_id=TEST_ID_OFFSET)
    pool = gen_dataset(world, d.n_grpo_pool, d.label_mix, "oracle", seed=_split_seed(s, 3), start_id=2 * TEST_ID_OFFSET)
    held = gen_dataset(world, d.n_grpo_eval, d.label_mix, "oracle", seed=_split_seed(s, 4), start_id=3 * TEST_ID_OFFSET)
    return Datasets(world, train, test, pool, held)


DATA_FILES = ("world.json", "train.jsonl", "test.jsonl", "grpo_pool.jsonl", "grpo_eval.jsonl")


def write_datasets(ds: Datasets, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ds.world.save(out / "world.json")
    write_jsonl(out / "train.jsonl", ds.train)
    write_jsonl(out / "test.jsonl", ds.test)
    write_jsonl(out / "grpo_pool.jsonl", ds.grpo_pool)
    write_jsonl(out / "grpo_eval.jsonl", ds.grpo_eval)


def read_datasets(path: Path) -> Datasets:
    missing = [f for f in DATA_FILES if not (path / f).exists()]
    if missing:
        raise FileNotFoundError(f"dataset directory {path} lacks {', '.join(missing)}")
    return Datasets(
        World.load(path / "world.json"),
        read_jsonl(path / "train.jsonl"),
        read_jsonl(path / "test.jsonl"),
        read_jsonl(path / "grpo_pool.jsonl"),
        read_jsonl(path / "grpo_eval.jsonl"),
    )


@lru_cache(maxsize=4)
def _cached(cfg_text: str, data_dir: str | None) -> Datasets:
    if data_dir is not None:
        return read_datasets(Path(data_dir))
    return make_datasets(ExperimentConfig.from_text(cfg_text))


def datasets_for(cfg: ExperimentConfig, data_dir: str | None = None) -> Datasets:
    return _cached(cfg.to_text(), data_dir)


def triples_digest(examples: Sequence[RelevanceExample]) -> str:
    """Digest of the (query, service, label) triples, ignoring reasons."""
    h = hashlib.sha256()
    for e in examples:
        h.update(json.dumps([e.id, list(e.query), list(e.service), e.label]).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    kind: str
    method: str
    config_digest: str
    seeds: list[int]
    per_seed: list[dict]
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        if len(self.per_seed) != len(self.seeds):
            raise ValueError(f"{len(self.per_seed)} seed rows for {len(self.seeds)} seeds")
        if not self.mean:
            self.mean, self.std = summarize(self.per_seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        missing = {"kind", "method", "config_digest", "seeds", "per_seed", "mean", "std"} - set(d)
        if missing:
            raise ValueError(f"not a run report (missing {sorted(missing)})")
        return cls(**d)

    def metrics_csv(self) -> str:
        keys = [k for k in self.per_seed[0] if isinstance(self.per_seed[0][k], (int, float))]
        lines = [",".join(["method", "seed", *keys])]
        for seed, row in zip(self.seeds, self.per_seed):
            lines.append(",".join([self.method, str(seed), *(_cell(row[k]) for k in keys)]))
        lines.append(",".join([self.method, "mean", *(_cell(self.mean[k]) for k in keys)]))
        lines.append(",".join([self.method, "std", *(_cell(self.std[k]) for k in keys)]))
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def summarize(rows: Sequence[dict]) -> tuple[dict, dict]:
    """Mean and population standard deviation of every numeric column."""
    keys = [k for k in rows[0] if isinstance(rows[0][k], (int, float)) and not isinstance(rows[0][k], bool)]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    std = {k: float(np.std([r[k] for r in rows])) for k in keys}
    return mean, std


def provenance(cfg: ExperimentConfig) -> str:
    return f"reason_distill {VERSION}; config sha256 {cfg.digest()}"


# ---------------------------------------------------------------------------
# per-seed workers (top level so they pickle into worker processes)
# ---------------------------------------------------------------------------

def distill_seed(cfg_text: str, method: str, seed: int, data_dir: str | None = None) -> tuple[dict, list[dict]]:
    cfg = ExperimentConfig.from_text(cfg_text)
    ds = datasets_for(cfg, data_dir)
    settings = replace(cfg.distill, method=method)
    res = train_distill(ds.world, ds.train, ds.test, settings, seed, reason_seed=cfg.experiment.reason_seed)
    mode = reason_mode_for(method)
    shown = with_reason_mode(ds.train, mode, cfg.experiment.reason_seed) if mode != "oracle" else ds.train
    row = res.report.to_flat()
    row.update(params_digest=res.digest, data_digest=triples_digest(shown), num_parameters=res.num_parameters)
    log = [{"seed": seed, **r.to_json()} for r in res.log]
    return row, log


def grpo_seed(
    cfg_text: str,
    seed: int,
    checkpoint: str,
    data_dir: str | None = None,
    reward_mode: str | None = None,
) -> tuple[dict, list[dict]]:
    cfg = ExperimentConfig.from_text(cfg_text)
    ds = datasets_for(cfg, data_dir)
    s = cfg.grpo if reward_mode is None else replace(cfg.grpo, reward_mode=reward_mode)
    sft = load_policy(checkpoint)
    res = train_grpo(ds.world, ds.grpo_pool, ds.grpo_eval, s, seed, sft)
    row = res.final_eval.report.to_flat()
    row.update(
        thinking=res.final_eval.thinking,
        label_reward=res.final_eval.label_reward,
        sft_accuracy=res.sft_eval.accuracy,
        sft_thinking=res.sft_eval.thinking,
        group_reward_start=res.group_reward_start,
        group_reward_end=res.group_reward_end,
    )
    log = [{"seed": seed, **asdict(r)} for r in res.log]
    return row, log


def sft_seed(cfg_text: str, seed: int, checkpoint: str, data_dir: str | None = None) -> list[float]:
    cfg = ExperimentConfig.from_text(cfg_text)
    ds = datasets_for(cfg, data_dir)
    policy, losses = run_sft(ds.world, ds.grpo_pool, cfg.grpo, seed)
    save_policy(policy, checkpoint)
    return losses


def _map(fn, args: list[tuple], workers: int) -> list:
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class RunOutput:
    report: RunReport
    log: list[dict]
    wall_clock: float


def run_distill_methods(
    cfg: ExperimentConfig, methods: Sequence[str], data_dir: str | None = None
) -> dict[str, RunOutput]:
    """Every (method, seed) pair goes into one worker pool; each output's
    wall-clock is the time for the whole batch."""
    t0 = time.perf_counter()
    seeds = list(cfg.experiment.seeds)
    text = cfg.to_text()
    jobs = [(text, m, s, data_dir) for m in methods for s in seeds]
    results = _map(distill_seed, jobs, cfg.experiment.workers)
    elapsed = time.perf_counter() - t0
    out = {}
    for i, m in enumerate(methods):
        chunk = results[i * len(seeds) : (i + 1) * len(seeds)]
        report = RunReport(
            kind="distill",
            method=m,
            config_digest=cfg.digest(),
            seeds=seeds,
            per_seed=[r for r, _ in chunk],
            provenance=provenance(cfg),
        )
        out[m] = RunOutput(report, [x for _, log in chunk for x in log], elapsed)
    return out


def run_distill(cfg: ExperimentConfig, method: str, data_dir: str | None = None) -> RunOutput:
    return run_distill_methods(cfg, [method], data_dir)[method]


def run_grpo(
    cfg: ExperimentConfig,
    checkpoint_dir: Path,
    data_dir: str | None = None,
    reward_mode: str | None = None,
    train_sft: bool = True,
) -> RunOutput:
    """GRPO per seed from ``checkpoint_dir/sft_seed<N>.npz``. With
    ``train_sft`` the checkpoints are produced first; otherwise a missing one
    raises ``CheckpointMissing``."""
    t0 = time.perf_counter()
    seeds = list(cfg.experiment.seeds)
    text = cfg.to_text()
    ckpts = [str(checkpoint_dir / f"sft_seed{s}.npz") for s in seeds]
    if train_sft:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        _map(sft_seed, [(text, s, c, data_dir) for s, c in zip(seeds, ckpts)], cfg.experiment.workers)
    results = _map(grpo_seed, [(text, s, c, data_dir, reward_mode) for s, c in zip(seeds, ckpts)], cfg.experiment.workers)
    report = RunReport(
        kind="grpo",
        method=reward_mode or cfg.grpo.reward_mode,
        config_digest=cfg.digest(),
        seeds=seeds,
        per_seed=[r for r, _ in results],
        provenance=provenance(cfg),
    )
    return RunOutput(report, [x for _, log in results for x in log], time.perf_counter() - t0)


def write_run(out: RunOutput, cfg: ExperimentConfig, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.resolved.json").write_text(cfg.to_json())
    (path / "report.json").write_text(out.report.to_json())
    (path / "metrics.csv").write_text(out.report.metrics_csv())
    with open(path / "training_log.jsonl", "w") as fh:
        for rec in out.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    # wall-clock lives apart from report.json so that reruns stay byte-identical
    (path / "timing.json").write_text(json.dumps({"wall_clock_seconds": out.wall_clock}) + "\n")


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------

def comparison_rows(reports: Sequence[RunReport]) -> list[list[str]]:
    if not reports:
        raise ValueError("no reports to compare")
    rows = []
    for r in reports:
        missing = [k for k in HEADLINE if k not in r.mean or k not in r.std]
        if missing:
            raise ValueError(f"report for {r.method!r} lacks {missing}")
        rows.append([r.method, *(f"{r.mean[k]:.4f} ± {r.std[k]:.4f}" for k in HEADLINE)])
    return rows


def comparison_csv(reports: Sequence[RunReport]) -> str:
    rows = [list(TABLE_COLUMNS), *comparison_rows(reports)]
    return "\n".join(",".join(r) for r in rows) + "\n"


def comparison_text(reports: Sequence[RunReport]) -> str:
    rows = [list(TABLE_COLUMNS), *comparison_rows(reports)]
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
