"""Synthetic domain-shift data at desk scale.

A domain is a mixture of Gaussian clusters, one per class, emitting small
multi-instance samples. A shift is a composable list of geometric
corruptions (rotation in a seeded random 2-plane, translation, additive
noise, scaling) applied to every instance of a target stream. Hidden
per-instance labels travel with each sample for evaluation only; the
adaptation loop never consumes them as input, which reveal_labels makes
explicit at the call site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, check_finite

DUMP_HEADER_PREFIX = "# memadapt-dump v1"

SHIFT_KINDS = ("rotation", "translation", "noise", "scale")

# sub-seed tags; one master seed per concern drives independent generators
_SOURCE_TAG = 21
_CONTENT_TAG = 22
_SHIFT_NOISE_TAG = 23
_JITTER_TAG = 24
_ORDER_TAG = 25
_PLANE_TAG = 26


@dataclass
class DomainSpec:
    """Gaussian mixture domain: class means, per-class scale, instance counts."""

    n_classes: int
    dim: int
    class_means: np.ndarray
    class_scale: float | np.ndarray
    n_instances_min: int = 1
    n_instances_max: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        means = as_matrix(self.class_means, "class means")
        if means.shape != (self.n_classes, self.dim):
            raise ValueError(
                f"class means must be {(self.n_classes, self.dim)}, got {means.shape}"
            )
        if np.unique(means, axis=0).shape[0] != self.n_classes:
            raise ValueError("class means must be pairwise distinct")
        self.class_means = means
        scale = np.broadcast_to(np.asarray(self.class_scale, dtype=np.float64), (self.n_classes,)).copy()
        check_finite("class scale", scale)
        if np.any(scale <= 0):
            raise ValueError("class scale must be positive")
        self.class_scale = scale
        if not 1 <= self.n_instances_min <= self.n_instances_max:
            raise ValueError(
                f"need 1 <= n_instances_min <= n_instances_max, got "
                f"[{self.n_instances_min}, {self.n_instances_max}]"
            )


@dataclass
class ShiftOp:
    """One corruption: rotation(angle degrees), translation(offset),
    noise(sigma), or scale(factor)."""

    kind: str
    value: float | np.ndarray

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}, expected one of {SHIFT_KINDS}")
        if self.kind == "translation":
            self.value = np.asarray(self.value, dtype=np.float64)
            check_finite("translation offset", self.value)
        else:
            self.value = float(self.value)
            check_finite(f"{self.kind} parameter", np.asarray(self.value))
            if self.kind == "noise" and self.value < 0:
                raise ValueError(f"noise sigma must be non-negative, got {self.value}")


def rotation(angle_deg: float) -> ShiftOp:
    return ShiftOp("rotation", angle_deg)


def translation(offset) -> ShiftOp:
    return ShiftOp("translation", offset)


def noise(sigma: float) -> ShiftOp:
    return ShiftOp("noise", sigma)


def scale(factor: float) -> ShiftOp:
    return ShiftOp("scale", factor)


@dataclass
class ShiftSpec:
    """Ordered, composable corruption list; ops apply left to right.

    The seed fixes both the random 2-planes of any rotations and the
    default noise draws, so a shift is a deterministic object.
    """

    ops: list[ShiftOp] = field(default_factory=list)
    seed: int = 0


def identity_shift() -> ShiftSpec:
    return ShiftSpec(ops=[], seed=0)


@dataclass
class StreamSample:
    """One online observation: two augmented views plus hidden labels.

    The labels are for evaluation only; access them through reveal_labels
    so every use is visible in the code.
    """

    weak: np.ndarray
    strong: np.ndarray
    sample_id: int
    _hidden_labels: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.weak = as_matrix(self.weak, "weak view")
        self.strong = as_matrix(self.strong, "strong view")
        if self.weak.shape != self.strong.shape:
            raise ValueError(f"view shapes differ: {self.weak.shape} vs {self.strong.shape}")
        if self._hidden_labels is None:
            raise ValueError("hidden labels are required (evaluation-only, one per instance)")
        labels = np.asarray(self._hidden_labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != self.weak.shape[0]:
            raise ValueError("one hidden label per instance required")
        self._hidden_labels = labels

    @property
    def n_instances(self) -> int:
        return self.weak.shape[0]


def reveal_labels(sample) -> np.ndarray:
    """Evaluation-only access to a sample's hidden instance labels."""
    return sample._hidden_labels


def _rotation_matrix(dim: int, angle_deg: float, seed: int, op_index: int) -> np.ndarray:
    if dim < 2:
        raise ValueError("rotation needs dim >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PLANE_TAG, op_index]))
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    plane = np.outer(u, u) + np.outer(v, v)
    skew = np.outer(v, u) - np.outer(u, v)
    return np.eye(dim) + (c - 1.0) * plane + s * skew


def apply_shift(instances, shift: ShiftSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply every op of the shift, left to right.

    Noise draws come from rng when given (a stream generator passes one so
    noise is i.i.d. across samples); otherwise from a generator seeded by
    the shift itself, making the call a pure function of its arguments.
    """
    x = as_matrix(instances, "instances")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([shift.seed, _SHIFT_NOISE_TAG]))
    for op_index, op in enumerate(shift.ops):
        if op.kind == "rotation":
            if op.value != 0.0:
                r = _rotation_matrix(x.shape[1], op.value, shift.seed, op_index)
                x = x @ r.T
        elif op.kind == "translation":
            offset = np.broadcast_to(op.value, (x.shape[1],))
            x = x + offset
        elif op.kind == "noise":
            x = x + op.value * rng.standard_normal(x.shape)
        else:
            x = x * op.value
    return x


def gen_source(spec: DomainSpec, n_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Labeled source dataset: class-balanced within one sample, shuffled,
    deterministic for a fixed spec seed. Returns (instances, labels)."""
    if n_total < 1:
        raise ValueError(f"need at least one source sample, got {n_total}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SOURCE_TAG]))
    base, rem = divmod(n_total, spec.n_classes)
    parts = []
    labels = []
    for k in range(spec.n_classes):
        count = base + (1 if k < rem else 0)
        draws = spec.class_means[k] + spec.class_scale[k] * rng.standard_normal((count, spec.dim))
        parts.append(draws)
        labels.append(np.full(count, k, dtype=np.int64))
    x = np.vstack(parts)
    y = np.concatenate(labels)
    perm = rng.permutation(n_total)
    return x[perm], y[perm]


def gen_target_stream(
    spec: DomainSpec,
    shift: ShiftSpec,
    length: int,
    order_seed: int,
    jitter_sigma: float = 0.1,
) -> list[StreamSample]:
    """Ordered target stream under the given shift.

    Sample content (instance counts, labels, draws, shift noise, strong-view
    jitter) depends only on the domain and shift seeds; the order_seed picks
    a permutation of that fixed multiset, so reordering experiments vary
    nothing but the order. Weak views are the shifted draws; strong views
    add Gaussian jitter of scale jitter_sigma.
    """
    if length < 1:
        raise ValueError(f"stream length must be positive, got {length}")
    if jitter_sigma < 0:
        raise ValueError(f"jitter sigma must be non-negative, got {jitter_sigma}")
    content_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, shift.seed, _CONTENT_TAG]))
    shift_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, shift.seed, _SHIFT_NOISE_TAG]))
    jitter_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, shift.seed, _JITTER_TAG]))
    samples = []
    for i in range(length):
        n_f = int(content_rng.integers(spec.n_instances_min, spec.n_instances_max + 1))
        labels = content_rng.integers(0, spec.n_classes, size=n_f)
        clean = (
            spec.class_means[labels]
            + spec.class_scale[labels][:, None] * content_rng.standard_normal((n_f, spec.dim))
        )
        weak = apply_shift(clean, shift, rng=shift_rng)
        strong = weak + jitter_sigma * jitter_rng.standard_normal(weak.shape)
        samples.append(StreamSample(weak=weak, strong=strong, sample_id=i, _hidden_labels=labels))
    order_rng = np.random.default_rng(np.random.SeedSequence([order_seed, _ORDER_TAG]))
    perm = order_rng.permutation(length)
    return [samples[j] for j in perm]


def build_class_means(n_classes: int, dim: int, offset: float, separation: float) -> np.ndarray:
    """Class means on a circle of radius `separation` in the first two
    coordinates, all sharing a constant per-coordinate offset.

    The shared offset makes a rotation of the space act partly like a
    translation of every cluster, a benign shift self-training can undo;
    the circle keeps the means symmetric and pairwise distinct.
    """
    if dim < 2:
        raise ValueError("need dim >= 2 to place class means")
    if not separation > 0:
        raise ValueError(f"separation must be positive, got {separation}")
    means = np.full((n_classes, dim), float(offset))
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means[:, 0] += separation * np.cos(angles)
    means[:, 1] += separation * np.sin(angles)
    return means


def default_domain(seed: int = 0) -> DomainSpec:
    """The benchmark domain: two classes in 8 dimensions."""
    means = build_class_means(n_classes=2, dim=8, offset=0.45, separation=1.0)
    return DomainSpec(
        n_classes=2,
        dim=8,
        class_means=means,
        class_scale=0.35,
        n_instances_min=3,
        n_instances_max=7,
        seed=seed,
    )


def default_shift(seed: int = 29) -> ShiftSpec:
    """The benchmark shift: a 45 degree rotation plus additive noise."""
    return ShiftSpec(ops=[rotation(45.0), noise(0.2)], seed=seed)


def flatten_stream(stream) -> tuple[np.ndarray, np.ndarray]:
    """All weak-view instances of a stream with their hidden labels.

    Evaluation interface: this is how a final accuracy pass sees the data.
    """
    if not stream:
        raise ValueError("cannot flatten an empty stream")
    x = np.vstack([s.weak for s in stream])
    y = np.concatenate([reveal_labels(s) for s in stream])
    return x, y


def dump_dataset(instances, labels, path) -> None:
    """Write a labeled dataset as versioned delimiter-separated text.

    One instance per line: sample_id instance_index label v1 .. vD.
    """
    x = as_matrix(instances, "instances")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ValueError("one label per instance required")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DUMP_HEADER_PREFIX} kind=dataset dim={x.shape[1]}\n")
        for i in range(x.shape[0]):
            values = " ".join(repr(float(v)) for v in x[i])
            fh.write(f"{i} 0 {int(y[i])} {values}\n")


def dump_stream(stream, path) -> None:
    """Write a stream's weak-view instances with their hidden labels.

    For offline inspection and embedding dumps only; adaptation never
    reads these files.
    """
    if not stream:
        raise ValueError("cannot dump an empty stream")
    dim = stream[0].weak.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DUMP_HEADER_PREFIX} kind=stream dim={dim}\n")
        for sample in stream:
            labels = reveal_labels(sample)
            for j in range(sample.n_instances):
                values = " ".join(repr(float(v)) for v in sample.weak[j])
                fh.write(f"{sample.sample_id} {j} {int(labels[j])} {values}\n")


def load_dump(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Parse a dump file: (sample_ids, instance_indices, labels, values)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(DUMP_HEADER_PREFIX):
            raise ValueError(f"not a recognized dump file: {header!r}")
        sample_ids, instance_idx, labels, rows = [], [], [], []
        for line in fh:
            parts = line.split()
            if len(parts) < 4:
                raise ValueError(f"malformed dump line: {line!r}")
            sample_ids.append(int(parts[0]))
            instance_idx.append(int(parts[1]))
            labels.append(int(parts[2]))
            rows.append([float(p) for p in parts[3:]])
    return (
        np.asarray(sample_ids, dtype=np.int64),
        np.asarray(instance_idx, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        np.asarray(rows, dtype=np.float64),
    )
