"""Losses, knowledge distillation, Adam, the training loop and metrics."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import batch_iter
from .errors import ConfigurationError, DimensionError, NumericError
from .model import StreamOutputs, forward, save_checkpoint

LOG_FLOOR = 1e-12


@dataclass
class KDConfig:
    """Training and distillation settings.

    ``spatial_weights``/``temporal_weights`` default to an even split of
    ``1 - w_cs`` over the 2M stream terms once the modality count is known
    (see :meth:`resolve`).
    """

    temperature: float = 4.0
    w_cs: float = 0.5
    spatial_weights: list = None
    temporal_weights: list = None
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    scale_by_temp2: bool = True
    kl_orientation: str = "student"  # "student": KL(P_s || P_t); "teacher": KL(P_t || P_s)

    def resolve(self, num_modalities):
        """Fill default weights and validate; returns a new config."""
        s = self.spatial_weights
        t = self.temporal_weights
        if s is None and t is None:
            share = (1.0 - self.w_cs) / (2 * num_modalities)
            s = [share] * num_modalities
            t = [share] * num_modalities
        elif s is None or t is None:
            raise ConfigurationError("give both spatial_weights and temporal_weights, or neither")
        cfg = KDConfig(**{**asdict(self), "spatial_weights": list(map(float, s)), "temporal_weights": list(map(float, t))})
        cfg.validate(num_modalities)
        return cfg

    def validate(self, num_modalities=None):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")
        if self.kl_orientation not in ("student", "teacher"):
            raise ConfigurationError(f"kl_orientation must be 'student' or 'teacher', got {self.kl_orientation!r}")
        weights = [self.w_cs] + list(self.spatial_weights or []) + list(self.temporal_weights or [])
        if any(w < 0 for w in weights):
            raise ConfigurationError("loss weights must be >= 0")
        if num_modalities is not None and self.spatial_weights is not None:
            if len(self.spatial_weights) != num_modalities or len(self.temporal_weights) != num_modalities:
                raise ConfigurationError(f"expected {num_modalities} spatial and temporal weights")
        if self.spatial_weights is not None and abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigurationError(f"loss weights must sum to 1, got {sum(weights)!r}")

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown kd keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def soft_probs(logits, temp):
    if temp <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temp}")
    return T.softmax_lastdim(logits * (1.0 / temp))


def kl_div(p, q):
    """Batch mean of sum_c p_c log(p_c / q_c). ``q`` is treated as a constant."""
    p = T.as_tensor(p)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shapes {p.shape} and {q.shape} differ")
    q_const = q.data if isinstance(q, T.Tensor) else np.asarray(q)
    log_q = np.log(np.maximum(q_const, LOG_FLOOR)).astype(p.data.dtype)
    ratio = T.log(p, LOG_FLOOR) - log_q
    return T.mean_axis(T.sum_axis(p * ratio, -1))


def kl_div_target(p_target, q):
    """Batch mean of KL(target || q) with the target constant; gradient flows into ``q``."""
    t = p_target.data if isinstance(p_target, T.Tensor) else np.asarray(p_target)
    entropy_part = (t * np.log(np.maximum(t, LOG_FLOOR))).astype(q.data.dtype)
    cross = T.mul(T.Tensor(t, dtype=q.data.dtype), T.log(q, LOG_FLOOR))
    return T.mean_axis(T.sum_axis(T.Tensor(entropy_part, dtype=q.data.dtype) - cross, -1))


def cross_entropy(probs, labels):
    """-mean log probs[label] on already normalized probabilities."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    onehot = np.zeros(probs.shape, dtype=probs.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    picked = T.sum_axis(T.log(probs, LOG_FLOOR) * T.Tensor(onehot, dtype=probs.data.dtype), -1)
    return -T.mean_axis(picked)


def teacher_loss(outputs, labels):
    return cross_entropy(outputs.ensemble, labels)


def student_loss(student_out, teacher_out, labels, cfg):
    """Weighted hard loss on the ensemble plus per-stream KD terms.

    Terms with zero weight are skipped, so ``w_cs == 1`` is exactly plain
    cross entropy.
    """
    m = len(student_out.spatial_logits)
    if cfg.spatial_weights is None:
        cfg = cfg.resolve(m)
    else:
        cfg.validate(m)
    loss = None

    def accumulate(term, w):
        nonlocal loss
        term = term * w
        loss = term if loss is None else loss + term

    if cfg.w_cs > 0:
        accumulate(cross_entropy(student_out.ensemble, labels), cfg.w_cs)
    factor = cfg.temperature ** 2 if cfg.scale_by_temp2 else 1.0
    pairs = (
        (student_out.spatial_logits, teacher_out.spatial_logits, cfg.spatial_weights),
        (student_out.temporal_logits, teacher_out.temporal_logits, cfg.temporal_weights),
    )
    for s_logits, t_logits, weights in pairs:
        for i in range(m):
            if weights[i] == 0:
                continue
            p_s = soft_probs(s_logits[i], cfg.temperature)
            with T.no_grad():
                p_t = soft_probs(t_logits[i], cfg.temperature)
            if cfg.kl_orientation == "student":
                term = kl_div(p_s, p_t)
            else:
                term = kl_div_target(p_t, p_s)
            accumulate(term, weights[i] * factor)
    if loss is None:
        raise ConfigurationError("every loss weight is zero")
    return loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place Adam update of ``params`` (name -> ndarray) with bias correction."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"adam: state for {name} has shape {m.shape}, param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def confusion_matrix(labels, preds, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def macro_f1(cm):
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def evaluate(model, dataset, split, batch_size=64, side="test"):
    """Top-1 accuracy, macro-F1, confusion matrix and per-modality accuracies."""
    preds, labels = [], []
    per_mod = [[] for _ in model.config.modalities]
    per_stream = {"spatial": [[] for _ in model.config.modalities], "temporal": [[] for _ in model.config.modalities]}
    with T.no_grad():
        for batch in batch_iter(dataset, split, batch_size, side=side):
            out = forward(model, batch.features)
            preds.append(out.predictions)
            labels.append(batch.labels)
            for i, y in enumerate(out.modality_scores):
                per_mod[i].append(np.argmax(y.data, axis=-1))
                per_stream["spatial"][i].append(np.argmax(out.spatial_probs[i].data, axis=-1))
                per_stream["temporal"][i].append(np.argmax(out.temporal_probs[i].data, axis=-1))
    preds = np.concatenate(preds)
    labels = np.concatenate(labels)
    cm = confusion_matrix(labels, preds, dataset.num_classes)
    names = [m.name for m in model.config.modalities]
    return {
        "accuracy": float(np.trace(cm) / cm.sum()),
        "macro_f1": macro_f1(cm),
        "confusion_matrix": cm.tolist(),
        "per_modality_accuracy": {
            n: float(np.mean(np.concatenate(p) == labels)) for n, p in zip(names, per_mod)
        },
        "per_stream_accuracy": {
            f"{n}/{kind}": float(np.mean(np.concatenate(per_stream[kind][i]) == labels))
            for i, n in enumerate(names)
            for kind in ("spatial", "temporal")
        },
        "num_test": int(len(labels)),
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    role: str
    epoch_losses: list
    epoch_test_accuracy: list
    accuracy: float
    macro_f1: float
    confusion_matrix: list
    per_modality_accuracy: dict
    per_stream_accuracy: dict
    parameter_count: int
    teacher_parameter_count: int = None
    epoch_seconds: list = field(default_factory=list)

    def metrics(self):
        """Everything except wall-clock timings."""
        out = asdict(self)
        out.pop("epoch_seconds")
        return out


def _frozen_teacher_logits(teacher, dataset, split, batch_size):
    """Teacher stream logits for every training row, computed once.

    The teacher is frozen and inputs are not augmented, so its outputs per
    sample never change across epochs.
    """
    spatial = temporal = None
    with T.no_grad():
        for batch in batch_iter(dataset, split, batch_size, side="train"):
            out = forward(teacher, batch.features)
            rows = dataset.indices(batch.sample_ids)
            if spatial is None:
                shape = (len(dataset), dataset.num_classes)
                spatial = [np.zeros(shape, dtype=l.data.dtype) for l in out.spatial_logits]
                temporal = [np.zeros(shape, dtype=l.data.dtype) for l in out.temporal_logits]
            for store, logits in zip(spatial + temporal, out.spatial_logits + out.temporal_logits):
                store[rows] = logits.data
    return spatial, temporal


def train(model, dataset, split, cfg, teacher=None, checkpoint_dir=None, log=None):
    """Fit ``model`` with Adam; distill from ``teacher`` when one is given."""
    m = model.config.num_modalities
    cfg = cfg.resolve(m)
    if teacher is not None:
        ours = [s.name for s in model.config.modalities]
        theirs = [s.name for s in teacher.config.modalities]
        if ours != theirs:
            mismatch = sorted(set(ours) ^ set(theirs)) or ours
            raise ConfigurationError(f"teacher/student modality mismatch: {mismatch}")
    named = model.named_parameters()
    state = AdamState()
    if teacher is not None:
        t_spatial, t_temporal = _frozen_teacher_logits(teacher, dataset, split, cfg.batch_size)
    losses, accs, seconds = [], [], []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        total, count = 0.0, 0
        for b, batch in enumerate(batch_iter(dataset, split, cfg.batch_size, seed=cfg.seed, epoch=epoch)):
            out = forward(model, batch.features)
            if teacher is None:
                loss = teacher_loss(out, batch.labels)
            else:
                rows = dataset.indices(batch.sample_ids)
                t_out = StreamOutputs(
                    spatial_logits=[T.Tensor(a[rows]) for a in t_spatial],
                    temporal_logits=[T.Tensor(a[rows]) for a in t_temporal],
                )
                loss = student_loss(out, t_out, batch.labels, cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            model.zero_grad()
            loss.backward()
            adam_step(
                {k: p.data for k, p in named.items()},
                {k: p.grad for k, p in named.items()},
                state, cfg.lr,
            )
            total += value * len(batch)
            count += len(batch)
        seconds.append(time.perf_counter() - start)
        losses.append(total / count)
        metrics = evaluate(model, dataset, split)
        accs.append(metrics["accuracy"])
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss={losses[-1]:.4f} test_acc={accs[-1]:.4f}")
    model.zero_grad()
    report = TrainReport(
        role=model.role if teacher is None else "student_kd",
        epoch_losses=losses,
        epoch_test_accuracy=accs,
        accuracy=metrics["accuracy"],
        macro_f1=metrics["macro_f1"],
        confusion_matrix=metrics["confusion_matrix"],
        per_modality_accuracy=metrics["per_modality_accuracy"],
        per_stream_accuracy=metrics["per_stream_accuracy"],
        parameter_count=model.parameter_count(),
        teacher_parameter_count=teacher.parameter_count() if teacher is not None else None,
        epoch_seconds=seconds,
    )
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
    return report
