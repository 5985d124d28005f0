"""Adversarial student training.

Each student acts as a generator producing its feature chunk from the input;
a discriminator scores chunks as teacher ("real") or student ("fake") via
binary cross-entropy on its single output logit. The generator objective is
the non-saturating BCE fooling term plus lambda_mse times the chunk MSE.
Discriminator and generator alternate strictly 1:1 per batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    DimensionError,
    Network,
    Tensor,
    TrainConfig,
    TrainingError,
    bce_with_logits,
    dense,
    make_optimizer,
    mse_loss,
    relu,
)
from .distill import chunk_mse, student_seed


class StructureError(ValueError):
    """Discriminator or generator has an unusable architecture."""


@dataclass
class GanConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_generator: float = 0.02
    lr_discriminator: float = 0.02
    lambda_mse: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        for name in ("lr_generator", "lr_discriminator"):
            lr = getattr(self, name)
            if not (0.0 < lr <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        if self.lambda_mse < 0:
            raise ValueError("lambda_mse must be >= 0")


@dataclass
class GanReport:
    d_loss_real: list = field(default_factory=list)
    d_loss_fake: list = field(default_factory=list)
    g_bce: list = field(default_factory=list)
    g_mse: list = field(default_factory=list)
    initial_chunk_mse: float = 0.0
    final_chunk_mse: float = 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "d_loss_real", "d_loss_fake", "g_bce", "g_mse"])
            for e in range(len(self.g_bce)):
                w.writerow([e, f"{self.d_loss_real[e]:.6f}",
                            f"{self.d_loss_fake[e]:.6f}",
                            f"{self.g_bce[e]:.6f}", f"{self.g_mse[e]:.6f}"])


def default_discriminator_layers(chunk_width: int):
    """2-dense discriminator, hidden width = chunk width, single output logit."""
    return [dense(chunk_width, chunk_width), relu(chunk_width),
            dense(chunk_width, 1)]


def _check_discriminator(disc: Network):
    if disc.out_dim != 1:
        raise StructureError(
            f"discriminator must output a single score, got width {disc.out_dim}"
        )


def discriminator_step(disc: Network, real_chunk: Tensor, fake_chunk: Tensor,
                       opt) -> tuple:
    """One BCE gradient step on the discriminator (real=1, fake=0).

    fake_chunk is treated as a constant: no gradient reaches the student.
    Returns (loss_on_real, loss_on_fake).
    """
    _check_discriminator(disc)
    if real_chunk.shape != fake_chunk.shape:
        raise DimensionError(
            f"real {real_chunk.shape} vs fake {fake_chunk.shape}"
        )
    m = real_chunk.shape[0]
    both = Tensor.from_array(
        np.concatenate([real_chunk.view(), fake_chunk.view()], axis=0))
    labels = np.concatenate([np.ones(m), np.zeros(m)])
    logits = disc.forward(both)
    loss, grad = bce_with_logits(logits, labels)
    grads, _ = disc.backward(grad)
    opt.step(disc, grads)

    z = logits.view().reshape(-1).astype(np.float64)
    per = np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    return float(per[:m].mean()), float(per[m:].mean())


def generator_step(student: Network, disc: Network, x: Tensor,
                   target_chunk: Tensor, cfg: GanConfig, opt) -> tuple:
    """One gradient step on the student: BCE(disc(fake), 1) + lambda * MSE.

    The discriminator is frozen for the step (its parameters are read, never
    written). Returns (bce_term, mse_term).
    """
    _check_discriminator(disc)
    fake = student.forward(x)
    if fake.shape != target_chunk.shape:
        raise DimensionError(
            f"student output {fake.shape} vs target {target_chunk.shape}"
        )
    logits = disc.forward(fake)
    bce, grad_logits = bce_with_logits(logits, 1.0)
    _, grad_fake = disc.backward(grad_logits)
    mse, grad_mse = mse_loss(target_chunk, fake)
    upstream = grad_fake.view().astype(np.float64)
    if cfg.lambda_mse > 0:
        upstream = upstream + cfg.lambda_mse * grad_mse.view().astype(np.float64)
    grads, _ = student.backward(Tensor.from_array(upstream))
    opt.step(student, grads)
    return bce, mse


def train_student_gan(student: Network, disc_layers, teacher_dense: Tensor,
                      range_k, x: Tensor, cfg: GanConfig):
    """Adversarially train one student on its chunk; returns (student, report).

    Alternates discriminator and generator steps 1:1 per batch. Aborts with
    epoch/batch diagnostics if any loss goes non-finite.
    """
    a, b = range_k
    if student.out_dim != b - a:
        raise DimensionError(
            f"student out_dim {student.out_dim} != chunk width {b - a}"
        )
    disc = Network(disc_layers, seed=student_seed(cfg.seed, 0x0D15C))
    _check_discriminator(disc)
    if disc.in_dim != b - a:
        raise DimensionError(
            f"discriminator in_dim {disc.in_dim} != chunk width {b - a}"
        )
    target = Tensor.from_array(teacher_dense.view()[:, a:b])
    report = GanReport()
    report.initial_chunk_mse = chunk_mse(student, teacher_dense, range_k, x)

    d_cfg = TrainConfig(1, cfg.batch_size, cfg.lr_discriminator, "sgd", cfg.seed)
    g_cfg = TrainConfig(1, cfg.batch_size, cfg.lr_generator, "sgd", cfg.seed)
    d_opt = make_optimizer(d_cfg)
    g_opt = make_optimizer(g_cfg)

    n = x.shape[0]
    xv = x.view()
    tv = target.view()
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        dr_sum = df_sum = gb_sum = gm_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = Tensor.from_array(xv[idx])
            tb = Tensor.from_array(tv[idx])
            fake = student.forward(xb)
            dr, df = discriminator_step(disc, tb, fake, d_opt)
            gb, gm = generator_step(student, disc, xb, tb, cfg, g_opt)
            if not all(math.isfinite(v) for v in (dr, df, gb, gm)):
                raise TrainingError(
                    f"non-finite GAN loss at epoch {epoch}, batch {batches}: "
                    f"d_real={dr} d_fake={df} g_bce={gb} g_mse={gm}"
                )
            dr_sum += dr
            df_sum += df
            gb_sum += gb
            gm_sum += gm
            batches += 1
        report.d_loss_real.append(dr_sum / batches)
        report.d_loss_fake.append(df_sum / batches)
        report.g_bce.append(gb_sum / batches)
        report.g_mse.append(gm_sum / batches)
    report.final_chunk_mse = chunk_mse(student, teacher_dense, range_k, x)
    return student, report
