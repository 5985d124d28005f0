"""Teacher-class distillation pipeline.

A frozen teacher's dense feature vector (the activation feeding its final
dense "head" layer) is split into contiguous non-overlapping sub-spaces; each
sub-space is learned independently by one small student via MSE reconstruction.
Student outputs are merged back in partition order, the teacher's head maps the
merged vector to class probabilities, and the head may be fine-tuned with the
students frozen.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import math

import numpy as np

from .nn import (
    DimensionError,
    Network,
    Tensor,
    TrainConfig,
    dense,
    fit,
    load_network,
    relu,
    save_network,
    softmax,
)


class PartitionError(ValueError):
    """Invalid sub-space partition request."""


class EnsembleError(RuntimeError):
    """Ensemble incomplete or structurally unusable."""


@dataclass(frozen=True)
class SubspacePartition:
    """Contiguous half-open index ranges exactly covering [0, dense_dim)."""

    dense_dim: int
    ranges: tuple

    def __post_init__(self):
        if self.dense_dim <= 0:
            raise PartitionError("dense_dim must be positive")
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        cursor = 0
        for start, end in ranges:
            if start != cursor or end <= start:
                raise PartitionError(
                    f"ranges must be sorted, non-overlapping and contiguous; "
                    f"got {ranges}"
                )
            cursor = end
        if cursor != self.dense_dim:
            raise PartitionError(
                f"ranges cover [0, {cursor}) but dense_dim is {self.dense_dim}"
            )

    @property
    def n(self) -> int:
        return len(self.ranges)

    def widths(self):
        return [end - start for start, end in self.ranges]


def make_partition(dense_dim: int, n: int) -> SubspacePartition:
    """Split [0, dense_dim) into n contiguous ranges, widths differing by at
    most one; earlier ranges absorb the remainder."""
    if n < 1 or n > dense_dim:
        raise PartitionError(f"need 1 <= n <= D, got n={n}, D={dense_dim}")
    base, rem = divmod(dense_dim, n)
    ranges = []
    cursor = 0
    for k in range(n):
        width = base + (1 if k < rem else 0)
        ranges.append((cursor, cursor + width))
        cursor += width
    return SubspacePartition(dense_dim, tuple(ranges))


def split_subspaces(d: Tensor, partition: SubspacePartition):
    """Slice a [batch, D] tensor into per-range chunk tensors."""
    v = d.view()
    if v.shape[1] != partition.dense_dim:
        raise DimensionError(
            f"tensor width {v.shape[1]} != dense_dim {partition.dense_dim}"
        )
    return [Tensor.from_array(v[:, a:b]) for a, b in partition.ranges]


def merge_subspaces(chunks, partition: SubspacePartition) -> Tensor:
    """Concatenate chunk tensors in partition order into a [batch, D] tensor.

    Because the ranges are disjoint and cover [0, D), this equals the
    elementwise sum of each chunk zero-padded into the full width.
    """
    if len(chunks) != partition.n:
        raise DimensionError(f"expected {partition.n} chunks, got {len(chunks)}")
    batch = chunks[0].shape[0]
    for k, (chunk, (a, b)) in enumerate(zip(chunks, partition.ranges)):
        if chunk.shape[0] != batch:
            raise DimensionError(f"chunk {k} batch {chunk.shape[0]} != {batch}")
        if chunk.shape[1] != b - a:
            raise DimensionError(
                f"chunk {k} width {chunk.shape[1]} != range width {b - a}"
            )
    return Tensor.from_array(np.concatenate([c.view() for c in chunks], axis=1))


def _head_split_index(teacher: Network) -> int:
    """Index of the final dense layer: everything from there on is the head."""
    last_dense = None
    for i, spec in enumerate(teacher.layers):
        if spec.kind == "dense":
            last_dense = i
    if last_dense is None or last_dense == 0:
        raise EnsembleError(
            "teacher must have at least one layer before its final dense layer"
        )
    return last_dense


def teacher_body(teacher: Network) -> Network:
    """The teacher truncated just before its head (shares parameter arrays)."""
    i = _head_split_index(teacher)
    return Network(teacher.layers[:i], teacher.rng_seed, teacher.params[:i])


def teacher_head(teacher: Network) -> Network:
    """The teacher's final dense layer plus anything after it (shared params)."""
    i = _head_split_index(teacher)
    return Network(teacher.layers[i:], teacher.rng_seed, teacher.params[i:])


def extract_dense(teacher: Network, x: Tensor) -> Tensor:
    """Dense feature vectors: teacher forward stopped before the head."""
    return teacher_body(teacher).forward(x)


def dense_dim(teacher: Network) -> int:
    return teacher.layers[_head_split_index(teacher)].in_dim


@dataclass
class StudentEnsemble:
    partition: SubspacePartition
    students: list
    head: Network
    head_finetuned: bool = False

    def __post_init__(self):
        if len(self.students) != self.partition.n:
            raise EnsembleError(
                f"partition has {self.partition.n} ranges but "
                f"{len(self.students)} students"
            )
        for k, (student, (a, b)) in enumerate(
                zip(self.students, self.partition.ranges)):
            if student is None:
                continue
            if student.out_dim != b - a:
                raise EnsembleError(
                    f"student {k} out_dim {student.out_dim} != chunk width {b - a}"
                )
        if self.head.in_dim != self.partition.dense_dim:
            raise EnsembleError(
                f"head in_dim {self.head.in_dim} != dense_dim "
                f"{self.partition.dense_dim}"
            )


def predict_ensemble(ens: StudentEnsemble, x: Tensor) -> Tensor:
    """head(merge(students' chunk outputs)); bit-deterministic."""
    for k, student in enumerate(ens.students):
        if student is None:
            raise EnsembleError(f"student {k} is missing")
    chunks = [s.forward(x) for s in ens.students]
    merged = merge_subspaces(chunks, ens.partition)
    return ens.head.forward(merged)


def train_student(student: Network, teacher_dense: Tensor, range_k,
                  x: Tensor, cfg: TrainConfig):
    """Train one student to reconstruct its chunk of the teacher features.

    teacher_dense is precomputed from the frozen teacher. Returns (student,
    per-epoch loss curve); the student is updated in place.
    """
    a, b = range_k
    if student.out_dim != b - a:
        raise DimensionError(
            f"student out_dim {student.out_dim} != chunk width {b - a}"
        )
    target = Tensor.from_array(teacher_dense.view()[:, a:b])
    curve = fit(student, x, target, cfg, loss="mse")
    return student, curve


def chunk_mse(student: Network, teacher_dense: Tensor, range_k, x: Tensor) -> float:
    from .nn import mse_loss
    a, b = range_k
    target = Tensor.from_array(teacher_dense.view()[:, a:b])
    loss, _ = mse_loss(target, student.forward(x))
    return loss


def train_student_to_target(student: Network, teacher_dense: Tensor, range_k,
                            x: Tensor, cfg: TrainConfig, mse_target: float,
                            max_epochs: int):
    """Train epoch by epoch until the chunk MSE reaches mse_target.

    Returns the number of epochs used, or None if max_epochs ran out.
    """
    a, b = range_k
    target = Tensor.from_array(teacher_dense.view()[:, a:b])
    for epoch in range(max_epochs):
        ecfg = TrainConfig(1, cfg.batch_size, cfg.learning_rate,
                           cfg.optimizer, cfg.seed + epoch)
        fit(student, x, target, ecfg, loss="mse")
        if chunk_mse(student, teacher_dense, range_k, x) <= mse_target:
            return epoch + 1
    return None


def fine_tune_head(ens: StudentEnsemble, x: Tensor, y_onehot: Tensor,
                   cfg: TrainConfig) -> StudentEnsemble:
    """Fine-tune only the output head on frozen student features.

    Student parameters are never touched; with epochs == 0 the ensemble is
    returned unchanged.
    """
    if y_onehot.shape[1] != ens.head.out_dim:
        raise DimensionError(
            f"labels have {y_onehot.shape[1]} classes, head outputs "
            f"{ens.head.out_dim}"
        )
    if cfg.epochs == 0:
        return ens
    chunks = [s.forward(x) for s in ens.students]
    merged = merge_subspaces(chunks, ens.partition)
    head = ens.head.copy()
    fit(head, merged, y_onehot, cfg, loss="cross_entropy")
    return StudentEnsemble(ens.partition, ens.students, head, head_finetuned=True)


def one_hot(labels, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DimensionError("label out of range")
    eye = np.zeros((labels.size, num_classes), dtype=np.float32)
    eye[np.arange(labels.size), labels] = 1.0
    return Tensor.from_array(eye)


def evaluate(model, x: Tensor, y) -> float:
    """Fraction of argmax matches; ties break toward the lowest class index.

    model is a Network or StudentEnsemble; y is a one-hot Tensor or an array
    of class indices.
    """
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if isinstance(model, StudentEnsemble):
        probs = predict_ensemble(model, x)
    else:
        probs = model.forward(x)
    if isinstance(y, Tensor):
        labels = np.argmax(y.view(), axis=1)
    else:
        labels = np.asarray(y, dtype=np.int64)
    if labels.size != x.shape[0]:
        raise DimensionError("label count does not match batch")
    pred = np.argmax(probs.view(), axis=1)
    return float(np.mean(pred == labels))


def count_params_flops(net: Network):
    """Parameter and per-sample FLOP counts.

    Dense layers cost in*out + out parameters and 2*in*out + out FLOPs
    (multiply-adds plus the bias add); activation layers cost out FLOPs.
    """
    params = 0
    flops = 0
    for spec in net.layers:
        if spec.kind == "dense":
            params += spec.in_dim * spec.out_dim + spec.out_dim
            flops += 2 * spec.in_dim * spec.out_dim + spec.out_dim
        else:
            flops += spec.out_dim
    return params, flops


def student_layers(in_dim: int, out_width: int, hidden: int):
    """Default student architecture: two hidden dense+relu blocks."""
    return [dense(in_dim, hidden), relu(hidden),
            dense(hidden, hidden), relu(hidden),
            dense(hidden, out_width)]


def _student_param_count(in_dim: int, hidden: int, out_width: int) -> int:
    return hidden * (in_dim + hidden + out_width + 2) + out_width


def hidden_for_budget(in_dim: int, out_width: int, budget: int) -> int:
    """Largest hidden width whose two-block student stays within budget params.

    Solves h^2 + (in + out + 2) h - (budget - out) = 0.
    """
    b = in_dim + out_width + 2
    c = max(budget - out_width, 1)
    h = (-b + math.sqrt(b * b + 4 * c)) / 2
    return max(int(round(h)), 2)


def plan_student_hidden(in_dim: int, dense_width: int, n: int,
                        base_hidden: int) -> int:
    """Hidden width for each of n students so total params track the n=1 case.

    The n=1 student uses base_hidden; for n > 1 each student's budget is the
    single-student parameter count divided by n.
    """
    if n == 1:
        return base_hidden
    p1 = _student_param_count(in_dim, base_hidden, dense_width)
    return hidden_for_budget(in_dim, dense_width // n, p1 // n)


def student_seed(base_seed: int, k: int) -> int:
    # independent per-student streams; order of training must not matter
    return (int(base_seed) * 0x9E3779B97F4A7C15 + 0x100 + k) & ((1 << 64) - 1)


@dataclass
class DistillReport:
    per_student_final_mse: list
    per_student_epoch_curves: list
    params_per_student: list
    flops_per_student: list
    wall_time_per_student: list

    @property
    def total_mse(self) -> float:
        return float(sum(self.per_student_final_mse))

    def to_dict(self):
        return {
            "per_student_final_mse": self.per_student_final_mse,
            "total_mse": self.total_mse,
            "per_student_epoch_curves": self.per_student_epoch_curves,
            "params_per_student": self.params_per_student,
            "flops_per_student": self.flops_per_student,
            "wall_time_per_student": self.wall_time_per_student,
        }

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["k", "params", "flops", "final_mse", "wall_time_s"])
            for k in range(len(self.per_student_final_mse)):
                w.writerow([k, self.params_per_student[k],
                            self.flops_per_student[k],
                            f"{self.per_student_final_mse[k]:.6f}",
                            f"{self.wall_time_per_student[k]:.4f}"])


def distill_students(teacher_dense: Tensor, x: Tensor,
                     partition: SubspacePartition, cfg: TrainConfig,
                     hidden: int, jobs: int = 1):
    """Train one student per partition range; returns (students, report).

    Students are seeded independently, so results do not depend on training
    order or on how many run in parallel.
    """
    in_dim = x.shape[1]

    def run(k):
        a, b = partition.ranges[k]
        student = Network(student_layers(in_dim, b - a, hidden),
                          seed=student_seed(cfg.seed, k))
        scfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate,
                           cfg.optimizer, student_seed(cfg.seed, k))
        t0 = time.monotonic()
        _, curve = train_student(student, teacher_dense, partition.ranges[k],
                                 x, scfg)
        elapsed = time.monotonic() - t0
        final = chunk_mse(student, teacher_dense, partition.ranges[k], x)
        return student, curve, final, elapsed

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(partition.n)))
    else:
        results = [run(k) for k in range(partition.n)]

    students = [r[0] for r in results]
    report = DistillReport(
        per_student_final_mse=[r[2] for r in results],
        per_student_epoch_curves=[r[1] for r in results],
        params_per_student=[count_params_flops(s)[0] for s in students],
        flops_per_student=[count_params_flops(s)[1] for s in students],
        wall_time_per_student=[r[3] for r in results],
    )
    return students, report


def upgrade_student(ens: StudentEnsemble, k: int, deeper_layers,
                    teacher_dense: Tensor, x: Tensor, cfg: TrainConfig):
    """Replace student k with a higher-capacity network and retrain it.

    The replacement must keep the chunk width. Returns (new ensemble, delta)
    where delta records old/new MSE and parameter counts.
    """
    a, b = ens.partition.ranges[k]
    if deeper_layers[-1].out_dim != b - a:
        raise EnsembleError(
            f"upgrade must keep output width {b - a}, got "
            f"{deeper_layers[-1].out_dim}"
        )
    old = ens.students[k]
    old_mse = chunk_mse(old, teacher_dense, ens.partition.ranges[k], x)
    replacement = Network(deeper_layers, seed=student_seed(cfg.seed, k))
    scfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate,
                       cfg.optimizer, student_seed(cfg.seed, k))
    train_student(replacement, teacher_dense, ens.partition.ranges[k], x, scfg)
    new_mse = chunk_mse(replacement, teacher_dense, ens.partition.ranges[k], x)
    students = list(ens.students)
    students[k] = replacement
    delta = {
        "student": k,
        "old_mse": old_mse,
        "new_mse": new_mse,
        "old_params": count_params_flops(old)[0],
        "new_params": count_params_flops(replacement)[0],
    }
    return StudentEnsemble(ens.partition, students, ens.head,
                           ens.head_finetuned), delta


def save_ensemble(ens: StudentEnsemble, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for k, student in enumerate(ens.students):
        save_network(student, os.path.join(out_dir, f"student_{k}.tcn1"))
    save_network(ens.head, os.path.join(out_dir, "head.tcn1"))
    meta = {
        "dense_dim": ens.partition.dense_dim,
        "ranges": list(ens.partition.ranges),
        "head_finetuned": ens.head_finetuned,
    }
    with open(os.path.join(out_dir, "ensemble.json"), "w") as f:
        json.dump(meta, f, indent=2)


def load_ensemble(out_dir) -> StudentEnsemble:
    with open(os.path.join(out_dir, "ensemble.json")) as f:
        meta = json.load(f)
    partition = SubspacePartition(meta["dense_dim"],
                                  tuple(tuple(r) for r in meta["ranges"]))
    students = []
    for k in range(partition.n):
        path = os.path.join(out_dir, f"student_{k}.tcn1")
        if not os.path.exists(path):
            raise EnsembleError(f"student {k} model file missing: {path}")
        students.append(load_network(path))
    head = load_network(os.path.join(out_dir, "head.tcn1"))
    return StudentEnsemble(partition, students, head,
                           meta.get("head_finetuned", False))
