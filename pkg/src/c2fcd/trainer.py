"""Supervised warmup and mean-teacher semi-supervised training.

The student is optimized with AdamW on a pixel-wise binary cross-entropy; the
teacher is an exponential moving average of the student (weights and
batch-norm running statistics alike), updated once per optimizer step and
never receiving gradients.  On unlabelled batches the student is trained
toward the teacher's sigmoid map, with the student's geometric perturbation
applied to the target so the two stay aligned.

All randomness (batch order, flips, noise) is drawn from named numpy streams
derived from the config seed, so runs are reproducible and the labelled-stream
trajectory is independent of the unlabelled branch: a semi-supervised run with
beta = 0 retraces the plain supervised run exactly.

Epochs in both phases are one pass over the labelled batch stream; the
unlabelled stream advances one batch per step and reshuffles whenever it is
exhausted.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, NumericError
from .metrics import MetricSet, ConfusionCounts, binarize, compute_metrics, confusion
from .model import C2FNet, ModuleToggles, get_params, named_state_tensors

TRAIN_LOG_HEADER = ("epoch", "phase", "loss_sup", "loss_con", "loss_total",
                    "val_F1", "val_IoU", "seconds")


@dataclass
class PerturbationConfig:
    """Student-side input perturbations; the teacher sees clean input."""

    flip_prob: float = 0.5
    noise_std: float = 0.02
    teacher_clean: bool = True

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 <= self.flip_prob <= 1.0:
            problems.append("perturbation.flip_prob must lie in [0, 1]")
        if not self.noise_std >= 0.0:
            problems.append("perturbation.noise_std must be >= 0")
        return problems


@dataclass
class TrainConfig:
    """All training hyperparameters.

    Defaults use the desk-scale schedule (20 epochs, batch 4) with the
    full-width model; published full-scale runs used 100 epochs at batch 16.
    """

    alpha: float = 0.99
    beta: float = 0.2
    warmup_epochs: int = 5
    total_epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 5e-4
    weight_decay: float = 0.0025
    seed: int = 0
    width_multiplier: float = 1.0
    decoder_width: int = 64
    binarize_threshold: float = 0.5
    supervise_coarse: bool = False
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    toggles: ModuleToggles = field(default_factory=ModuleToggles)

    def validate(self) -> list[str]:
        """Collect every violation; empty means the config is usable."""
        problems = []
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("alpha must lie in [0, 1]")
        if not self.beta >= 0.0:
            problems.append("beta must be >= 0")
        if self.warmup_epochs < 0:
            problems.append("warmup_epochs must be >= 0")
        if self.total_epochs < 0:
            problems.append("total_epochs must be >= 0")
        if self.warmup_epochs > self.total_epochs:
            problems.append("warmup_epochs must not exceed total_epochs")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.learning_rate >= 0.0:
            problems.append("learning_rate must be >= 0")
        if not self.weight_decay >= 0.0:
            problems.append("weight_decay must be >= 0")
        if not self.width_multiplier > 0.0:
            problems.append("width_multiplier must be > 0")
        if self.decoder_width < 4 or self.decoder_width % 4 != 0:
            problems.append("decoder_width must be >= 4 and divisible by 4")
        if not 0.0 < self.binarize_threshold < 1.0:
            problems.append("binarize_threshold must lie in (0, 1)")
        problems.extend(self.perturbation.validate())
        return problems

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown training config fields: {unknown}")
        if "perturbation" in payload and isinstance(payload["perturbation"], dict):
            payload["perturbation"] = PerturbationConfig(**payload["perturbation"])
        if "toggles" in payload and isinstance(payload["toggles"], dict):
            payload["toggles"] = ModuleToggles(**payload["toggles"])
        return cls(**payload)


@dataclass(frozen=True)
class LossBreakdown:
    """One optimizer step's loss terms: total = sup + beta * con."""

    sup: float
    con: float
    total: float


@dataclass
class EpochLog:
    """Per-epoch training record; val fields are None without a val set."""

    epoch: int
    phase: str
    loss_sup: float
    loss_con: float
    loss_total: float
    val: MetricSet | None = None
    teacher_val: MetricSet | None = None
    seconds: float = 0.0
    steps: list[LossBreakdown] = field(default_factory=list)


@dataclass
class BestSnapshot:
    """Parameters at the epoch chosen by the F1-then-IoU selection rule."""

    epoch: int
    f1: float
    iou: float
    params: dict[str, np.ndarray]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    logs: list[EpochLog]
    teacher_params: dict[str, np.ndarray] | None = None
    best_student: BestSnapshot | None = None
    best_teacher: BestSnapshot | None = None


# --- losses -------------------------------------------------------------------

def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy on logits (log-sum-exp stabilized)."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs "
                         f"targets {tuple(targets.shape)}")
    if targets.numel() and (targets.min() < 0 or targets.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(logits, targets)


def consistency_loss(student_logits: torch.Tensor,
                     teacher_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the student against the teacher's sigmoid map.

    The teacher side is detached: it is a target, never a gradient path.
    """
    return bce_with_logits(student_logits, torch.sigmoid(teacher_logits.detach()))


# --- exponential moving average -------------------------------------------------

@dataclass
class EMAState:
    """Teacher parameter tensors tracked as an EMA of the student's."""

    teacher: dict[str, torch.Tensor]
    alpha: float
    step: int = 0


def ema_state_from_model(teacher_model: C2FNet, alpha: float) -> EMAState:
    return EMAState(teacher=dict(named_state_tensors(teacher_model)), alpha=alpha)


def ema_update(state: EMAState, student: dict[str, torch.Tensor]) -> EMAState:
    """One averaging step: teacher <- alpha * teacher + (1 - alpha) * student.

    Covers weights and batch-norm running statistics.  Updates the teacher
    tensors in place and returns the state with the step count advanced.
    """
    if state.teacher.keys() != student.keys():
        missing = sorted(set(state.teacher) ^ set(student))
        raise ValueError(f"teacher/student parameter names differ: {missing[:3]}")
    a = state.alpha
    with torch.no_grad():
        for name, t in state.teacher.items():
            s = student[name]
            if s.shape != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(a).add_(s, alpha=1.0 - a)
    return replace(state, step=state.step + 1)


def make_optimizer(model: C2FNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)


# --- batching and perturbation --------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    x1: torch.Tensor
    x2: torch.Tensor
    y: torch.Tensor | None


def _collate(samples, with_labels: bool) -> Batch:
    x1 = torch.from_numpy(np.stack([s.image_t1 for s in samples]).astype(np.float32))
    x2 = torch.from_numpy(np.stack([s.image_t2 for s in samples]).astype(np.float32))
    y = None
    if with_labels:
        for s in samples:
            if s.label is None:
                raise DataError(f"sample {s.id!r} has no label but one is required")
        y = torch.from_numpy(
            np.stack([s.label for s in samples]).astype(np.float32))[:, None]
    return Batch(ids=[s.id for s in samples], x1=x1, x2=x2, y=y)


class BatchStream:
    """Seeded shuffled batches over a pool; reshuffles when exhausted.

    Passes are never spliced: a short final batch ends the pass and the next
    call starts a fresh shuffle, so every pass yields the same batch layout.
    """

    def __init__(self, dataset, batch_size: int, rng: np.random.Generator,
                 with_labels: bool):
        if len(dataset) == 0:
            raise ConfigurationError("batch stream over an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self.with_labels = with_labels
        self._order: np.ndarray | None = None
        self._pos = 0

    @property
    def batches_per_pass(self) -> int:
        return math.ceil(len(self.dataset) / self.batch_size)

    def next_batch(self) -> Batch:
        if self._order is None or self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.dataset))
            self._pos = 0
        take = self._order[self._pos:self._pos + self.batch_size]
        self._pos += len(take)
        return _collate([self.dataset[int(i)] for i in take], self.with_labels)


def apply_flips(t: torch.Tensor, flips: np.ndarray) -> torch.Tensor:
    """Flip each sample of a [N, C, H, W] batch; flips[:, 0] is horizontal."""
    parts = []
    for i in range(t.shape[0]):
        dims = []
        if flips[i, 0]:
            dims.append(-1)
        if flips[i, 1]:
            dims.append(-2)
        parts.append(torch.flip(t[i], dims) if dims else t[i])
    return torch.stack(parts)


def perturb_batch(batch: Batch, cfg: PerturbationConfig,
                  rng: np.random.Generator) -> tuple[Batch, np.ndarray]:
    """Student view of a batch: per-sample flips (shared by both dates and the
    target) plus per-pixel Gaussian noise on the images."""
    n = batch.x1.shape[0]
    flips = rng.random((n, 2)) < cfg.flip_prob
    x1 = apply_flips(batch.x1, flips)
    x2 = apply_flips(batch.x2, flips)
    y = apply_flips(batch.y, flips) if batch.y is not None else None
    if cfg.noise_std > 0:
        std = np.float32(cfg.noise_std)
        x1 = x1 + torch.from_numpy(rng.standard_normal(tuple(x1.shape), dtype=np.float32) * std)
        x2 = x2 + torch.from_numpy(rng.standard_normal(tuple(x2.shape), dtype=np.float32) * std)
    return Batch(ids=batch.ids, x1=x1, x2=x2, y=y), flips


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("batch_lab", "batch_unlab", "perturb_lab", "perturb_unlab")
    return {name: np.random.default_rng(child)
            for name, child in zip(names, children)}


# --- evaluation -----------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: MetricSet
    counts: ConfusionCounts
    per_sample: list[tuple[str, MetricSet]] | None = None


def evaluate_model(model: C2FNet, dataset, threshold: float = 0.5,
                   batch_size: int = 8, per_sample: bool = False) -> EvalResult:
    """Pooled metrics of a model over a labelled pool, in eval mode."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    pooled = ConfusionCounts()
    rows = [] if per_sample else None
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                samples = [dataset[i] for i in range(start, min(start + batch_size,
                                                                len(dataset)))]
                batch = _collate(samples, with_labels=True)
                logits, _ = model(batch.x1, batch.x2)
                preds = binarize(logits.numpy()[:, 0], threshold)
                gts = batch.y.numpy()[:, 0].astype(np.uint8)
                for i, s in enumerate(samples):
                    c = confusion(preds[i], gts[i])
                    pooled = pooled + c
                    if rows is not None:
                        rows.append((s.id, compute_metrics(c)))
    finally:
        model.train(was_training)
    return EvalResult(metrics=compute_metrics(pooled), counts=pooled, per_sample=rows)


def predict_batches(model: C2FNet, dataset, batch_size: int = 8,
                    with_labels: bool = False):
    """Yield (ids, final logits [N,H,W], labels or None) over a pool, eval mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                samples = [dataset[i] for i in range(start, min(start + batch_size,
                                                                len(dataset)))]
                batch = _collate(samples, with_labels=with_labels)
                logits, _ = model(batch.x1, batch.x2)
                labels = batch.y.numpy()[:, 0] if batch.y is not None else None
                yield batch.ids, logits.numpy()[:, 0], labels
    finally:
        model.train(was_training)


def select_best(val_metrics_per_epoch) -> int:
    """Epoch with the highest F1; ties break to higher IoU, then lower epoch."""
    series = []
    for item in val_metrics_per_epoch:
        if hasattr(item, "f1"):
            series.append((float(item.f1), float(item.iou)))
        else:
            f1, iou = item
            series.append((float(f1), float(iou)))
    if not series:
        raise ValueError("select_best needs at least one epoch of metrics")
    return max(range(len(series)), key=lambda i: (series[i][0], series[i][1], -i))


class _BestTracker:
    """Online version of select_best that snapshots improving parameters."""

    def __init__(self):
        self.snapshot: BestSnapshot | None = None

    def update(self, epoch: int, metrics: MetricSet, model: C2FNet) -> None:
        key = (metrics.f1, metrics.iou, -epoch)
        if self.snapshot is None or key > (self.snapshot.f1, self.snapshot.iou,
                                           -self.snapshot.epoch):
            self.snapshot = BestSnapshot(epoch=epoch, f1=metrics.f1,
                                         iou=metrics.iou, params=get_params(model))


# --- training loops ---------------------------------------------------------------

def _check_finite(loss: torch.Tensor, epoch: int, step: int, ids: list[str]) -> None:
    if not bool(torch.isfinite(loss)):
        raise NumericError(
            f"non-finite loss at epoch {epoch}, step {step}", batch_ids=ids)


def _supervised_loss(model: C2FNet, batch: Batch, config: TrainConfig) -> torch.Tensor:
    final, coarse = model(batch.x1, batch.x2)
    loss = bce_with_logits(final, batch.y)
    if config.supervise_coarse:
        loss = loss + bce_with_logits(coarse, F.avg_pool2d(batch.y, 4))
    return loss


def _log_epoch(log_writer, entry: EpochLog) -> None:
    if log_writer is not None:
        log_writer.write(entry)


class TrainLogWriter:
    """Append-only CSV of per-epoch training losses and validation scores.

    Student rows carry the training phase; in the semi-supervised phase each
    epoch gains a second row, phase ``teacher``, with the same losses and the
    teacher's validation scores.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(TRAIN_LOG_HEADER)
        self._fh.flush()

    def _row(self, entry: EpochLog, phase: str, val: MetricSet | None):
        self._writer.writerow([
            entry.epoch, phase,
            f"{entry.loss_sup:.6f}", f"{entry.loss_con:.6f}",
            f"{entry.loss_total:.6f}",
            "" if val is None else f"{val.f1:.6f}",
            "" if val is None else f"{val.iou:.6f}",
            f"{entry.seconds:.3f}",
        ])

    def write(self, entry: EpochLog) -> None:
        self._row(entry, entry.phase, entry.val)
        if entry.teacher_val is not None:
            self._row(entry, "teacher", entry.teacher_val)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _run_supervised_epoch(model, stream, optimizer, config, perturb_rng,
                          epoch: int) -> list[LossBreakdown]:
    model.train()
    steps = []
    for step in range(stream.batches_per_pass):
        batch = stream.next_batch()
        student_batch, _ = perturb_batch(batch, config.perturbation, perturb_rng)
        optimizer.zero_grad()
        loss = _supervised_loss(model, student_batch, config)
        _check_finite(loss, epoch, step, batch.ids)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        steps.append(LossBreakdown(sup=value, con=0.0, total=value))
    return steps


def _epoch_entry(epoch, phase, steps, seconds, val=None, teacher_val=None) -> EpochLog:
    n = max(len(steps), 1)
    return EpochLog(
        epoch=epoch, phase=phase,
        loss_sup=sum(s.sup for s in steps) / n,
        loss_con=sum(s.con for s in steps) / n,
        loss_total=sum(s.total for s in steps) / n,
        val=val, teacher_val=teacher_val, seconds=seconds, steps=steps)


def train_supervised(model: C2FNet, labelled, config: TrainConfig, *,
                     epochs: int | None = None, val_loader=None,
                     log_writer: TrainLogWriter | None = None,
                     phase: str = "supervised") -> TrainResult:
    """Plain supervised optimization over the labelled pool.

    Runs ``config.warmup_epochs`` epochs unless ``epochs`` overrides it (the
    supervised-only pipeline passes ``config.total_epochs``).  Deterministic
    under a fixed seed; returns final parameters, per-epoch logs, and the
    best-validation snapshot when a val set is supplied.
    """
    if len(labelled) == 0:
        raise ConfigurationError("supervised training needs a non-empty labelled set")
    if epochs is None:
        epochs = config.warmup_epochs
    streams = _rng_streams(config.seed)
    stream = BatchStream(labelled, config.batch_size, streams["batch_lab"],
                         with_labels=True)
    optimizer = make_optimizer(model, config)
    logs: list[EpochLog] = []
    best = _BestTracker()
    for epoch in range(epochs):
        started = time.perf_counter()
        steps = _run_supervised_epoch(model, stream, optimizer, config,
                                      streams["perturb_lab"], epoch)
        val = (evaluate_model(model, val_loader, config.binarize_threshold,
                              config.batch_size).metrics
               if val_loader is not None and len(val_loader) else None)
        entry = _epoch_entry(epoch, phase, steps, time.perf_counter() - started, val)
        logs.append(entry)
        _log_epoch(log_writer, entry)
        if val is not None:
            best.update(epoch, val, model)
    return TrainResult(params=get_params(model), logs=logs,
                       best_student=best.snapshot)


def train_semi(model: C2FNet, labelled, unlabelled, config: TrainConfig, *,
               val_loader=None, log_writer: TrainLogWriter | None = None) -> TrainResult:
    """Mean-teacher semi-supervised training.

    Phase 1 is a supervised warmup of ``config.warmup_epochs`` epochs, after
    which the teacher starts as a copy of the student.  Each remaining epoch
    pairs every labelled batch with one unlabelled batch; the student sees
    perturbed inputs, the teacher scores clean (or weakly perturbed) inputs in
    eval mode, and the combined loss ``sup + beta * con`` drives one optimizer
    step followed by one EMA update.  With beta = 0 the unlabelled branch is
    skipped entirely, which reproduces the supervised trajectory bit for bit.
    """
    if len(labelled) == 0:
        raise ConfigurationError("semi-supervised training needs a labelled set")
    if len(unlabelled) == 0:
        raise ConfigurationError(
            "unlabelled pool is empty; use supervised mode instead")
    problems = config.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))

    streams = _rng_streams(config.seed)
    lab_stream = BatchStream(labelled, config.batch_size, streams["batch_lab"],
                             with_labels=True)
    unlab_stream = BatchStream(unlabelled, config.batch_size,
                               streams["batch_unlab"], with_labels=False)
    optimizer = make_optimizer(model, config)
    logs: list[EpochLog] = []
    best_student = _BestTracker()
    best_teacher = _BestTracker()

    def run_validation(epoch, net, tracker):
        if val_loader is None or len(val_loader) == 0:
            return None
        metrics = evaluate_model(net, val_loader, config.binarize_threshold,
                                 config.batch_size).metrics
        tracker.update(epoch, metrics, net)
        return metrics

    # phase 1: supervised warmup on the shared labelled stream
    for epoch in range(config.warmup_epochs):
        started = time.perf_counter()
        steps = _run_supervised_epoch(model, lab_stream, optimizer, config,
                                      streams["perturb_lab"], epoch)
        val = run_validation(epoch, model, best_student)
        entry = _epoch_entry(epoch, "warmup", steps, time.perf_counter() - started, val)
        logs.append(entry)
        _log_epoch(log_writer, entry)

    # the teacher starts as a copy of the warmed-up student
    teacher = C2FNet(config.width_multiplier, config.decoder_width, config.toggles)
    teacher.load_state_dict(model.state_dict())
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    ema = ema_state_from_model(teacher, config.alpha)
    student_tensors = dict(named_state_tensors(model))

    for epoch in range(config.warmup_epochs, config.total_epochs):
        started = time.perf_counter()
        model.train()
        steps = []
        for step in range(lab_stream.batches_per_pass):
            batch = lab_stream.next_batch()
            student_batch, _ = perturb_batch(batch, config.perturbation,
                                             streams["perturb_lab"])
            optimizer.zero_grad()
            loss_sup = _supervised_loss(model, student_batch, config)

            ids = list(batch.ids)
            if config.beta > 0:
                unlab = unlab_stream.next_batch()
                ids += unlab.ids
                student_unlab, flips = perturb_batch(unlab, config.perturbation,
                                                     streams["perturb_unlab"])
                student_logits, _ = model(student_unlab.x1, student_unlab.x2)
                with torch.no_grad():
                    if config.perturbation.teacher_clean:
                        teacher_logits, _ = teacher(unlab.x1, unlab.x2)
                        target = apply_flips(torch.sigmoid(teacher_logits), flips)
                    else:
                        teacher_logits, _ = teacher(
                            apply_flips(unlab.x1, flips), apply_flips(unlab.x2, flips))
                        target = torch.sigmoid(teacher_logits)
                loss_con = bce_with_logits(student_logits, target)
                total = loss_sup + config.beta * loss_con
            else:
                loss_con = None
                total = loss_sup

            _check_finite(total, epoch, step, ids)
            total.backward()
            optimizer.step()
            ema = ema_update(ema, student_tensors)
            steps.append(LossBreakdown(
                sup=float(loss_sup.detach()),
                con=0.0 if loss_con is None else float(loss_con.detach()),
                total=float(total.detach())))

        val = run_validation(epoch, model, best_student)
        teacher_val = run_validation(epoch, teacher, best_teacher)
        entry = _epoch_entry(epoch, "semi", steps, time.perf_counter() - started,
                             val, teacher_val)
        logs.append(entry)
        _log_epoch(log_writer, entry)

    return TrainResult(params=get_params(model), logs=logs,
                       teacher_params=get_params(teacher),
                       best_student=best_student.snapshot,
                       best_teacher=best_teacher.snapshot)
