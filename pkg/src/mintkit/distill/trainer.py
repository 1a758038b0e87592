"""Teacher training and knowledge distillation into pruned students."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .. import tensor as T
from ..compress.unstructured import WeightMasks, apply_weight_masks
from ..model.config import ConfigError
from ..model.network import MiniModel
from ..synthdocs.batching import Batch, collate
from ..synthdocs.generate import Example
from ..tensor.autograd import ContractError

ALPHA_CLAMP = (1e-3, 1e3)
DIRECTIONS = ("teacher_student", "student_teacher")
FROZEN_PREFIXES = ("encoder.", "embed.", "unembed.")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 2.0
    alpha: Union[float, str] = "auto"
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 300
    seed: int = 0
    clip: Optional[float] = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    direction: str = "teacher_student"
    warmup_batches: int = 4
    eval_every: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.steps < 0:
            raise ConfigError(f"step budget must be nonnegative, got {self.steps}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")
        if self.alpha != "auto" and not (isinstance(self.alpha, (int, float)) and self.alpha >= 0):
            raise ConfigError(f"alpha must be 'auto' or a nonnegative number, got {self.alpha!r}")


@dataclass(frozen=True)
class TeacherConfig:
    lr: float = 2e-3
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    clip: Optional[float] = 1.0
    warmup: int = 100
    schedule: str = "cosine"  # or "constant"
    final_lr_fraction: float = 0.1
    eval_every: int = 0

    def lr_at(self, step: int) -> float:
        warm = min(1.0, (step + 1) / max(1, self.warmup))
        if self.schedule == "constant" or self.steps <= self.warmup:
            return self.lr * warm
        frac = min(1.0, max(0.0, (step - self.warmup) / (self.steps - self.warmup)))
        cos = 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr * warm * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)


@dataclass
class StepRecord:
    step: int
    ce: float
    kd: float
    alpha: float
    total: float
    grad_norm: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)  # {"step", "exact_match", "anls"}
    alpha: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "notes": list(self.notes), "steps": [asdict(s) for s in self.steps], "evals": list(self.evals)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls([StepRecord(**s) for s in d["steps"]], list(d.get("evals", [])), d.get("alpha", 0.0), list(d.get("notes", [])))


# ---------------------------------------------------------------- losses


def kd_loss(
    student_logits: T.Tensor,
    teacher_logits,
    targets: np.ndarray,
    mask: np.ndarray,
    temperature: float,
    alpha: float,
    direction: str = "teacher_student",
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """``(total, CE, KD)`` with ``KD = T^2 * KL`` on the loss positions and ``total = CE + alpha * KD``."""
    teacher = T.ops.as_tensor(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ContractError(f"kd_loss: student logits {student_logits.shape} vs teacher {teacher.shape}")
    if direction not in DIRECTIONS:
        raise ContractError(f"unknown KD direction {direction!r}")
    ce = T.cross_entropy(student_logits, targets, mask)
    if direction == "teacher_student":
        kl = T.kl_divergence(teacher, student_logits, temperature, mask)
    else:
        kl = T.kl_divergence(student_logits, teacher, temperature, mask)
    kd = T.scale(kl, temperature * temperature)
    return T.add(ce, T.scale(kd, float(alpha))), ce, kd


def auto_alpha(ce_samples: Sequence[float], kd_samples: Sequence[float]) -> tuple[float, Optional[str]]:
    """``median(CE) / median(KD)`` clamped to ``ALPHA_CLAMP``; ``(1.0, note)`` when the KD median is 0."""
    if len(ce_samples) == 0 or len(kd_samples) == 0:
        raise ContractError("auto_alpha needs at least one warmup batch of each loss")
    kd_med = float(np.median(kd_samples))
    if kd_med == 0.0:
        return 1.0, "KD median is 0 (student already matches teacher); alpha set to 1"
    a = float(np.median(ce_samples)) / kd_med
    return float(min(max(a, ALPHA_CLAMP[0]), ALPHA_CLAMP[1])), None


# ---------------------------------------------------------------- helpers


def _sample(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.integers(0, n, size)


def parameter_digest(model: MiniModel, prefixes: Sequence[str] = FROZEN_PREFIXES) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if name.startswith(tuple(prefixes)):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _check_shared_frozen(student: MiniModel, teacher: MiniModel) -> None:
    for name, p in teacher.named_parameters():
        if name.startswith(FROZEN_PREFIXES):
            q = student.params.get(name)
            if q is None or q.data.shape != p.data.shape or not np.array_equal(q.data, p.data):
                raise ContractError(f"student and teacher differ in frozen parameter {name}")


Evaluator = Callable[[MiniModel], dict]  # returns {"exact_match": .., "anls": ..}


# ---------------------------------------------------------------- distillation


def _forward(student: MiniModel, teacher: MiniModel, b: Batch):
    with T.no_grad():
        enc = teacher.encode(b.grids).data
        t_logits, _ = teacher.decode(enc, b.inputs)
    s_logits, _ = student.decode(T.Tensor(enc), b.inputs)
    return s_logits, t_logits.data


def train_distill(
    student: MiniModel,
    teacher: MiniModel,
    train: Sequence[Example],
    kd: KDConfig = KDConfig(),
    weight_masks: Optional[WeightMasks] = None,
    evaluator: Optional[Evaluator] = None,
) -> tuple[MiniModel, TrainLog]:
    """Distil ``teacher`` into ``student`` in place; only ``decoder.*`` parameters move.

    The student is expected to come from surgery on a copy of the teacher,
    so encoder and embedding tables are shared bit-for-bit.
    """
    _check_shared_frozen(student, teacher)
    params = student.decoder_parameters()
    if not params:
        raise ConfigError("student has no trainable decoder parameters")
    if weight_masks:
        apply_weight_masks(student, weight_masks)
    log = TrainLog()
    rng = np.random.default_rng(kd.seed)
    if kd.steps == 0:
        log.alpha = float(kd.alpha) if kd.alpha != "auto" else 0.0
        return student, log

    if kd.alpha == "auto":
        ces, kds = [], []
        with T.no_grad():
            for _ in range(max(1, kd.warmup_batches)):
                b = collate([train[int(i)] for i in _sample(rng, len(train), kd.batch_size)])
                s, t = _forward(student, teacher, b)
                _, ce, kdv = kd_loss(s, t, b.targets, b.loss_mask, kd.temperature, 0.0, kd.direction)
                ces.append(ce.item())
                kds.append(kdv.item())
        alpha, note = auto_alpha(ces, kds)
        if note:
            log.notes.append(note)
    else:
        alpha = float(kd.alpha)
    log.alpha = alpha

    frozen = [p for n, p in student.named_parameters() if not n.startswith("decoder.") and p.requires_grad]
    for p in frozen:
        p.requires_grad = False
    try:
        _distill_loop(student, teacher, train, kd, alpha, params, rng, log, weight_masks, evaluator)
    finally:
        for p in frozen:
            p.requires_grad = True
    return student, log


def _distill_loop(student, teacher, train, kd, alpha, params, rng, log, weight_masks, evaluator) -> None:
    opt = T.Adam(params, lr=kd.lr, betas=kd.betas, eps=kd.eps)
    for step in range(kd.steps):
        b = collate([train[int(i)] for i in _sample(rng, len(train), kd.batch_size)])
        s, t = _forward(student, teacher, b)
        total, ce, kdv = kd_loss(s, t, b.targets, b.loss_mask, kd.temperature, alpha, kd.direction)
        if not np.isfinite(total.item()):
            raise TrainingError(f"distillation diverged at step {step}: CE={ce.item()} KD={kdv.item()}")
        opt.zero_grad()
        T.backward(total)
        gn = T.clip_grad_norm(params, kd.clip)
        opt.step()
        if weight_masks:
            apply_weight_masks(student, weight_masks)
        log.steps.append(StepRecord(step, ce.item(), kdv.item(), alpha, total.item(), gn))
        if evaluator is not None and kd.eval_every and ((step + 1) % kd.eval_every == 0 or step + 1 == kd.steps):
            log.evals.append({"step": step + 1, **evaluator(student)})


# ---------------------------------------------------------------- teacher


def train_teacher(
    model: MiniModel,
    train: Sequence[Example],
    cfg: TeacherConfig = TeacherConfig(),
    evaluator: Optional[Evaluator] = None,
    progress: Optional[Callable[[StepRecord], None]] = None,
) -> tuple[MiniModel, TrainLog]:
    """Plain cross-entropy on every parameter; aborts with a diagnostic on a non-finite loss."""
    params = model.parameters()
    if not params:
        raise ConfigError("model has no parameters")
    if not train:
        raise ConfigError("empty training split")
    opt = T.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    full_batch = len(train) <= cfg.batch_size
    for step in range(cfg.steps):
        idx = np.arange(len(train)) if full_batch else _sample(rng, len(train), cfg.batch_size)
        b = collate([train[int(i)] for i in idx])
        logits, _ = model.decode(model.encode(b.grids), b.inputs)
        loss = T.cross_entropy(logits, b.targets, b.loss_mask)
        if not np.isfinite(loss.item()):
            T.current_tape().clear()
            last = log.steps[-1].ce if log.steps else float("nan")
            raise TrainingError(f"teacher loss became {loss.item()} at step {step} (previous step loss {last}, lr {cfg.lr_at(step):.2e})")
        opt.zero_grad()
        T.backward(loss)
        gn = T.clip_grad_norm(params, cfg.clip)
        opt.step(lr=cfg.lr_at(step))
        rec = StepRecord(step, loss.item(), 0.0, 0.0, loss.item(), gn)
        log.steps.append(rec)
        if progress is not None:
            progress(rec)
        if evaluator is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            log.evals.append({"step": step + 1, **evaluator(model)})
    return model, log
