"""Relevance-student training under the six distillation configurations."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .encoder import (
    EncoderConfig,
    EncoderParams,
    FrozenReasonEmbedder,
    argmax_label,
    build_student_input,
    build_teacher_input,
    classify,
    encode_batch,
    project,
)
from .losses import baseline_total, classification_ce, cosine_align_loss, crsd_total, info_nce
from .metrics import EvalReport, evaluate
from .optim import AdamW
from .synth import RelevanceExample, World, with_reason_mode

METHODS = (
    "baseline",
    "baseline_reason",
    "crsd_align_only",
    "crsd_full",
    "crsd_no_reason",
    "crsd_random_reason",
)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class DistillSettings:
    method: str = "crsd_full"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    mu: float = 0.1
    gamma: float = 0.01
    delta: float = 0.01
    tau: float = 0.05
    align_reduction: str = "mean"
    student_max_len: int = 64
    teacher_max_len: int = 150
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    d_reason: int = 32
    max_len: int = 160
    init_std: float = 0.02
    embedder_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            max_len=self.max_len,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            n_layers=self.n_layers,
            d_reason=self.d_reason,
            init_std=self.init_std,
        )


@dataclass
class Encoded:
    """Token-id views of a dataset for one reason mode."""

    ids: np.ndarray
    labels: np.ndarray
    student: list[list[int]]
    teacher: list[list[int]]
    reasons: list[list[int]]


def encode_dataset(world: World, examples: Sequence[RelevanceExample], s: DistillSettings) -> Encoded:
    v = world.vocab
    student, teacher, reasons = [], [], []
    for e in examples:
        q, sv, r = v.tokenize(e.query), v.tokenize(e.service), v.tokenize(e.reason)
        student.append(build_student_input(q, sv, s.student_max_len))
        teacher.append(build_teacher_input(q, sv, r, s.teacher_max_len, student_max_len=s.student_max_len))
        reasons.append(r)
    return Encoded(
        ids=np.array([e.id for e in examples], dtype=np.int64),
        labels=np.array([e.label for e in examples], dtype=np.int64),
        student=student,
        teacher=teacher,
        reasons=reasons,
    )


def reason_mode_for(method: str) -> str:
    return {"crsd_no_reason": "none", "crsd_random_reason": "random"}.get(method, "oracle")


class BatchStream:
    """Seeded epoch shuffling; a batch never holds the same example id twice
    (ids skipped at an epoch seam are carried into the next batch)."""

    def __init__(self, ids: np.ndarray, batch_size: int, seed: int):
        self.ids = ids
        self.batch_size = min(batch_size, len(np.unique(ids)))
        self.rng = np.random.default_rng([seed, 7])
        self.queue: list[int] = []

    def next(self) -> np.ndarray:
        batch: list[int] = []
        seen: set[int] = set()
        carry: list[int] = []
        while len(batch) < self.batch_size:
            if not self.queue:
                self.queue = self.rng.permutation(len(self.ids)).tolist()
            j = self.queue.pop(0)
            key = int(self.ids[j])
            if key in seen:
                carry.append(j)
                continue
            seen.add(key)
            batch.append(j)
        self.queue = carry + self.queue
        return np.array(batch, dtype=np.int64)


def params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for name, t in params.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def student_predictor(params: EncoderParams, world: World, s: DistillSettings) -> Callable:
    def predict(chunk: Sequence[RelevanceExample]) -> np.ndarray:
        v = world.vocab
        seqs = [build_student_input(v.tokenize(e.query), v.tokenize(e.service), s.student_max_len) for e in chunk]
        with ad.no_grad():
            logits = classify(params, encode_batch(params, seqs))
        return argmax_label(logits.data)

    return predict


@dataclass
class StepRecord:
    step: int
    loss: float
    sce: float
    tce: float | None = None
    align: float | None = None
    cos: float | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class DistillResult:
    report: EvalReport
    log: list[StepRecord] = field(default_factory=list)
    digest: str = ""
    num_parameters: int = 0


def distill_loss(
    params: EncoderParams,
    method: str,
    s: DistillSettings,
    student: Sequence[Sequence[int]],
    teacher: Sequence[Sequence[int]],
    labels: np.ndarray,
    reason_vecs: np.ndarray | None = None,
    gamma: float | None = None,
    delta: float | None = None,
) -> tuple[ad.Tensor, dict]:
    """Scalar objective for one batch plus its logged components."""
    gamma = s.gamma if gamma is None else gamma
    delta = s.delta if delta is None else delta
    cls = encode_batch(params, student)
    sce = classification_ce(classify(params, cls), labels)
    parts: dict = {"sce": sce}
    if method == "baseline":
        return sce, parts
    if method == "baseline_reason":
        cos = cosine_align_loss(project(params, cls), reason_vecs)
        parts["cos"] = cos
        return baseline_total(sce, cos, s.mu), parts
    same = all(list(a) == list(b) for a, b in zip(student, teacher))
    cls_r = cls if same else encode_batch(params, teacher)
    align = info_nce(cls, cls_r, s.tau, s.align_reduction)
    parts["align"] = align
    if method == "crsd_align_only":
        return sce + delta * align, parts
    tce = sce if same else classification_ce(classify(params, cls_r), labels)
    parts["tce"] = tce
    return crsd_total(sce, tce, align, gamma, delta), parts


def train_distill(
    world: World,
    train: Sequence[RelevanceExample],
    test: Sequence[RelevanceExample],
    settings: DistillSettings,
    seed: int,
    reason_seed: int = 0,
    on_step: Callable[[int, EncoderParams, dict], None] | None = None,
) -> DistillResult:
    """Train one student with ``settings.method`` and evaluate it on ``test``
    using student inputs only."""
    s = settings
    method = s.method
    mode = reason_mode_for(method)
    data = encode_dataset(world, with_reason_mode(train, mode, reason_seed) if mode != "oracle" else train, s)
    params = EncoderParams(s.encoder_config(len(world.vocab)), seed=seed)
    opt = AdamW(params.parameters(), lr=s.lr, betas=s.betas, eps=s.adam_eps, weight_decay=s.weight_decay, clip_norm=s.clip_norm)
    embedder = FrozenReasonEmbedder(len(world.vocab), s.d_reason, s.embedder_seed) if method == "baseline_reason" else None
    stream = BatchStream(data.ids, s.batch_size, seed)
    log: list[StepRecord] = []
    for step in range(s.steps):
        idx = stream.next()
        student = [data.student[i] for i in idx]
        teacher = [data.teacher[i] for i in idx]
        rvec = embedder.embed_batch([data.reasons[i] for i in idx]) if embedder else None
        opt.zero_grad()
        loss, parts = distill_loss(params, method, s, student, teacher, data.labels[idx], rvec)
        if not math.isfinite(float(loss.data)):
            raise DivergenceError(step, "loss")
        loss.backward()
        opt.step()
        rec = StepRecord(step, float(loss.data), **{k: float(v.data) for k, v in parts.items()})
        log.append(rec)
        if on_step is not None:
            on_step(step, params, parts)
    report = evaluate(student_predictor(params, world, s), test)
    return DistillResult(report=report, log=log, digest=params_digest(params), num_parameters=params.num_parameters())
