"""Student-teacher online adaptation engine.

One call to adapt_one processes one arriving sample end to end: teacher
inference and pseudo-label filtering on the weak view, memory write from
teacher features, student inference on the strong view, memory read with
negative mining, loss assembly with analytic gradients, one SGD step on
the student (plus the query projection), and the teacher EMA update.

Every function here is pure: inputs are never mutated, so a failed step
leaves the caller's state and bank exactly as they were (transactional
by construction).
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import memory
from .losses import (
    LossGradients,
    LossValue,
    MEMCLR_FORMS,
    memclr_loss,
    pseudo_label_loss,
    total_loss,
)
from .memory import MemoryBank, ProjectionSet
from .numerics import as_matrix, derive_seed, sgd_step, softmax_rows
from .streamsim import reveal_labels

CHECKPOINT_MAGIC = b"MXAD"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIQQQQQ")

# sub-seed tags so one config seed drives independent generators
_PROJECTION_SEED_TAG = 11
_BANK_SEED_TAG = 12

_MOMENTUM_KEYS = ("encoder", "classifier", "query_proj")


@dataclass
class EncoderParams:
    """Linear proxy model: a feature map and a softmax classifier head."""

    encoder: np.ndarray
    classifier: np.ndarray

    def __post_init__(self):
        self.encoder = as_matrix(self.encoder, "encoder")
        self.classifier = as_matrix(self.classifier, "classifier")
        if self.encoder.shape[1] != self.classifier.shape[0]:
            raise ValueError(
                f"encoder output dim {self.encoder.shape[1]} != classifier input dim "
                f"{self.classifier.shape[0]}"
            )

    @property
    def raw_dim(self) -> int:
        return self.encoder.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.encoder.shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier.shape[1]


@dataclass
class StudentTeacherState:
    """Everything the online loop updates: both models, the projections,
    the optimizer momentum buffers, and the step counter."""

    student: EncoderParams
    teacher: EncoderParams
    projections: ProjectionSet
    momentum: dict[str, np.ndarray]
    step_count: int = 0

    def __post_init__(self):
        if self.student.encoder.shape != self.teacher.encoder.shape:
            raise ValueError("student and teacher encoder shapes differ")
        if self.student.classifier.shape != self.teacher.classifier.shape:
            raise ValueError("student and teacher classifier shapes differ")
        missing = [k for k in _MOMENTUM_KEYS if k not in self.momentum]
        if missing:
            raise ValueError(f"momentum buffers missing entries: {missing}")


@dataclass
class AdaptConfig:
    """Scalar hyperparameters of the online loop."""

    alpha: float = 0.99
    gamma: float = 0.001
    mu: float = 0.9
    conf_threshold: float = 0.9
    n_memory: int = 1024
    neg_ratio: float = 0.1
    temperature: float = 1.0
    normalize_features: bool = True
    feat_dim: int = 8
    use_memclr: bool = True
    memclr_form: str = "log-mean"
    tie_write_projections: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        # gamma 0 means "no student update" and is allowed so a run can be
        # forced into a pure no-op baseline
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not 0 <= self.mu < 1:
            raise ValueError(f"mu must be in [0, 1), got {self.mu}")
        if not 0 < self.conf_threshold < 1:
            raise ValueError(f"conf_threshold must be in (0, 1), got {self.conf_threshold}")
        if self.n_memory < 1:
            raise ValueError(f"n_memory must be positive, got {self.n_memory}")
        if not 0 < self.neg_ratio <= 1:
            raise ValueError(f"neg_ratio must be in (0, 1], got {self.neg_ratio}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.feat_dim < 1:
            raise ValueError(f"feat_dim must be positive, got {self.feat_dim}")
        if self.memclr_form not in MEMCLR_FORMS:
            raise ValueError(f"memclr_form must be one of {MEMCLR_FORMS}, got {self.memclr_form!r}")


@dataclass
class PseudoLabelSet:
    """Confidently pseudo-labeled instances: parallel index/class/confidence arrays."""

    indices: np.ndarray
    classes: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return self.indices.size


@dataclass
class StepMetrics:
    """Per-step diagnostics; accuracies come from hidden labels and are
    evaluation-only, they never influence the update."""

    losses: LossValue
    n_pseudo: int
    n_instances: int
    teacher_correct: int
    student_correct: int
    wall_ms: float = 0.0

    @property
    def teacher_acc(self):
        return self.teacher_correct / self.n_instances if self.n_instances else None

    @property
    def student_acc(self):
        return self.student_correct / self.n_instances if self.n_instances else None


def init_encoder_params(raw_dim: int, feat_dim: int, n_classes: int, seed: int) -> EncoderParams:
    """Near-identity encoder and small random classifier head."""
    if raw_dim < 1 or feat_dim < 1 or n_classes < 2:
        raise ValueError("need raw_dim >= 1, feat_dim >= 1, n_classes >= 2")
    rng = np.random.default_rng(seed)
    encoder = np.eye(raw_dim, feat_dim) + 0.01 * rng.standard_normal((raw_dim, feat_dim))
    classifier = 0.01 * rng.standard_normal((feat_dim, n_classes))
    return EncoderParams(encoder, classifier)


def _zero_momentum(params: EncoderParams, projections: ProjectionSet) -> dict[str, np.ndarray]:
    return {
        "encoder": np.zeros_like(params.encoder),
        "classifier": np.zeros_like(params.classifier),
        "query_proj": np.zeros_like(projections.query_proj),
    }


def init_state(source: EncoderParams, cfg: AdaptConfig) -> StudentTeacherState:
    """Deploy a source-trained model: student and teacher both start from it."""
    if source.feat_dim != cfg.feat_dim:
        raise ValueError(f"source feature dim {source.feat_dim} != config feat_dim {cfg.feat_dim}")
    projections = memory.init_projections(cfg.feat_dim, derive_seed(cfg.seed, _PROJECTION_SEED_TAG))
    student = EncoderParams(source.encoder.copy(), source.classifier.copy())
    teacher = EncoderParams(source.encoder.copy(), source.classifier.copy())
    return StudentTeacherState(
        student=student,
        teacher=teacher,
        projections=projections,
        momentum=_zero_momentum(student, projections),
        step_count=0,
    )


def init_config_bank(cfg: AdaptConfig) -> MemoryBank:
    """Fresh seeded memory bank of the configured size."""
    return memory.init_bank(cfg.n_memory, cfg.feat_dim, derive_seed(cfg.seed, _BANK_SEED_TAG))


def init_adaptation(source: EncoderParams, cfg: AdaptConfig) -> tuple[StudentTeacherState, MemoryBank]:
    return init_state(source, cfg), init_config_bank(cfg)


def _forward(params: EncoderParams, instances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = instances @ params.encoder
    return feats, feats @ params.classifier


def predict(params: EncoderParams, instances) -> tuple[np.ndarray, np.ndarray]:
    """Features and class probabilities for a batch of raw instances."""
    x = as_matrix(instances, "instances")
    if x.shape[1] != params.raw_dim:
        raise ValueError(f"instance dim {x.shape[1]} != encoder input dim {params.raw_dim}")
    feats, logits = _forward(params, x)
    return feats, softmax_rows(logits)


def filter_pseudo_labels(class_probs, threshold: float) -> PseudoLabelSet:
    """Keep argmax labels whose confidence strictly exceeds the threshold."""
    probs = as_matrix(class_probs, "class probabilities")
    if probs.shape[0] and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("class probability rows must sum to 1")
    conf = probs.max(axis=1) if probs.shape[0] else np.zeros(0)
    labels = probs.argmax(axis=1) if probs.shape[0] else np.zeros(0, dtype=np.int64)
    keep = conf > threshold
    return PseudoLabelSet(
        indices=np.nonzero(keep)[0].astype(np.int64),
        classes=labels[keep].astype(np.int64),
        confidences=conf[keep],
    )


def ema_update(teacher: EncoderParams, student: EncoderParams, alpha: float) -> EncoderParams:
    """teacher' = alpha * teacher + (1 - alpha) * student, per parameter."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if teacher.encoder.shape != student.encoder.shape or teacher.classifier.shape != student.classifier.shape:
        raise ValueError("teacher and student shapes differ")
    if alpha == 1.0:
        # exact fixed point, bit for bit
        return EncoderParams(teacher.encoder, teacher.classifier)
    return EncoderParams(
        alpha * teacher.encoder + (1.0 - alpha) * student.encoder,
        alpha * teacher.classifier + (1.0 - alpha) * student.classifier,
    )


def adapt_one(
    state: StudentTeacherState,
    bank: MemoryBank,
    sample,
    cfg: AdaptConfig,
) -> tuple[StudentTeacherState, MemoryBank, StepMetrics]:
    """One full online step on one arriving sample (batch size 1).

    Order: teacher predicts the weak view, confident pseudo-labels are
    filtered, teacher features are written to memory, the student predicts
    the strong view, the (just-written) memory is read for positives and
    negatives, both loss terms and their gradients are assembled, the
    student and query projection take one SGD step, the teacher follows by
    EMA, and the step counter advances. Deterministic given its inputs.

    Any error raised by a sub-operation propagates before anything is
    returned; since no input is ever mutated, the caller's state and bank
    stay valid after a failed step.
    """
    t0 = time.perf_counter()
    weak = as_matrix(sample.weak, "weak view")
    strong = as_matrix(sample.strong, "strong view")
    if weak.shape != strong.shape:
        raise ValueError(f"view shapes differ: weak {weak.shape}, strong {strong.shape}")

    if weak.shape[0] == 0:
        # nothing to adapt on; only the step counter moves
        metrics = StepMetrics(
            losses=total_loss(0.0, 0.0),
            n_pseudo=0,
            n_instances=0,
            teacher_correct=0,
            student_correct=0,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        return replace(state, step_count=state.step_count + 1), bank, metrics

    teacher_feats, teacher_logits = _forward(state.teacher, weak)
    teacher_probs = softmax_rows(teacher_logits)
    labels = filter_pseudo_labels(teacher_probs, cfg.conf_threshold)

    bank = memory.write(bank, teacher_feats, state.projections)

    student_feats, student_logits = _forward(state.student, strong)
    read_result = memory.read(bank, student_feats, state.projections, cfg.neg_ratio)

    pl, d_logits = pseudo_label_loss(student_logits, labels.indices, labels.classes)
    if cfg.use_memclr:
        mc, d_feats_mc, d_query_proj = memclr_loss(
            student_feats,
            read_result,
            bank,
            temperature=cfg.temperature,
            normalize_features=cfg.normalize_features,
            form=cfg.memclr_form,
        )
    else:
        mc = 0.0
        d_feats_mc = np.zeros_like(student_feats)
        d_query_proj = np.zeros_like(state.projections.query_proj)
    losses = total_loss(pl, mc)

    d_feats = d_logits @ state.student.classifier.T + d_feats_mc
    grads = LossGradients(
        d_encoder=strong.T @ d_feats,
        d_classifier=student_feats.T @ d_logits,
        d_query_proj=d_query_proj,
    )

    if cfg.gamma > 0:
        new_encoder, v_enc = sgd_step(
            state.student.encoder, grads.d_encoder, cfg.gamma, state.momentum["encoder"], cfg.mu
        )
        new_classifier, v_cls = sgd_step(
            state.student.classifier, grads.d_classifier, cfg.gamma, state.momentum["classifier"], cfg.mu
        )
        new_query_proj, v_q = sgd_step(
            state.projections.query_proj, grads.d_query_proj, cfg.gamma, state.momentum["query_proj"], cfg.mu
        )
        student = EncoderParams(new_encoder, new_classifier)
        projections = ProjectionSet(
            key_proj=state.projections.key_proj,
            value_proj=state.projections.value_proj,
            query_proj=new_query_proj,
        )
        momentum = {"encoder": v_enc, "classifier": v_cls, "query_proj": v_q}
    else:
        student = state.student
        projections = state.projections
        momentum = state.momentum

    teacher = ema_update(state.teacher, student, cfg.alpha)
    if cfg.tie_write_projections and cfg.alpha < 1:
        # optional slow tie of the write-side key projection to the trained
        # query projection; the value projection has no trained counterpart
        projections = ProjectionSet(
            key_proj=cfg.alpha * projections.key_proj + (1.0 - cfg.alpha) * projections.query_proj,
            value_proj=projections.value_proj,
            query_proj=projections.query_proj,
        )

    new_state = StudentTeacherState(
        student=student,
        teacher=teacher,
        projections=projections,
        momentum=momentum,
        step_count=state.step_count + 1,
    )

    # diagnostics only: hidden labels never touch the update above
    hidden = reveal_labels(sample)
    teacher_correct = int((teacher_probs.argmax(axis=1) == hidden).sum())
    student_correct = int((softmax_rows(student_logits).argmax(axis=1) == hidden).sum())
    metrics = StepMetrics(
        losses=losses,
        n_pseudo=len(labels),
        n_instances=weak.shape[0],
        teacher_correct=teacher_correct,
        student_correct=student_correct,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
    return new_state, bank, metrics


def _matrix_bytes(a: np.ndarray) -> bytes:
    return a.astype("<f8", copy=False).tobytes(order="C")


def save_checkpoint(path, state: StudentTeacherState, bank: MemoryBank) -> None:
    """Fixed-layout binary checkpoint; round-trips bit-exactly."""
    s = state.student
    header = _CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        s.raw_dim,
        s.feat_dim,
        s.n_classes,
        bank.n_items,
        state.step_count,
    )
    blocks = [
        header,
        _matrix_bytes(s.encoder),
        _matrix_bytes(s.classifier),
        _matrix_bytes(state.teacher.encoder),
        _matrix_bytes(state.teacher.classifier),
        _matrix_bytes(state.projections.key_proj),
        _matrix_bytes(state.projections.value_proj),
        _matrix_bytes(state.projections.query_proj),
        _matrix_bytes(state.momentum["encoder"]),
        _matrix_bytes(state.momentum["classifier"]),
        _matrix_bytes(state.momentum["query_proj"]),
        memory.bank_to_bytes(bank),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(blocks))


def load_checkpoint(path) -> tuple[StudentTeacherState, MemoryBank]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CHECKPOINT_HEADER.size:
        raise ValueError("truncated checkpoint header")
    magic, version, raw_dim, feat_dim, n_classes, n_mem, step_count = _CHECKPOINT_HEADER.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = _CHECKPOINT_HEADER.size

    def take(rows, cols):
        nonlocal offset
        nbytes = rows * cols * 8
        if len(buf) - offset < nbytes:
            raise ValueError("truncated checkpoint payload")
        a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += nbytes
        return a.astype(np.float64)

    student = EncoderParams(take(raw_dim, feat_dim), take(feat_dim, n_classes))
    teacher = EncoderParams(take(raw_dim, feat_dim), take(feat_dim, n_classes))
    projections = ProjectionSet(
        key_proj=take(feat_dim, feat_dim),
        value_proj=take(feat_dim, feat_dim),
        query_proj=take(feat_dim, feat_dim),
    )
    momentum = {
        "encoder": take(raw_dim, feat_dim),
        "classifier": take(feat_dim, n_classes),
        "query_proj": take(feat_dim, feat_dim),
    }
    bank, end = memory.bank_from_bytes(buf, offset)
    if end != len(buf):
        raise ValueError(f"trailing bytes after checkpoint ({len(buf) - end})")
    if bank.n_items != n_mem or bank.dim != feat_dim:
        raise ValueError("memory bank block disagrees with checkpoint header")
    return (
        StudentTeacherState(
            student=student,
            teacher=teacher,
            projections=projections,
            momentum=momentum,
            step_count=step_count,
        ),
        bank,
    )
