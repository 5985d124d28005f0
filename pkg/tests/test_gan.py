import math

import numpy as np
import pytest

from tcnet import nn
from tcnet.nn import (
    DimensionError,
    Network,
    Tensor,
    TrainConfig,
    bce_with_logits,
    dense,
    make_optimizer,
    relu,
)
from tcnet.gan import (
    GanConfig,
    StructureError,
    default_discriminator_layers,
    discriminator_step,
    generator_step,
    train_student_gan,
)
from tcnet.distill import chunk_mse, make_partition, student_layers

from conftest import DENSE_DIM, max_rel_error, numeric_gradient


def zero_logit_disc(width):
    # always outputs logit 0 == probability 0.5
    return Network([dense(width, 1)], seed=0,
                   params=[(np.zeros((width, 1), dtype=np.float32),
                            np.zeros(1, dtype=np.float32))])


class TestBce:
    def test_half_probability_is_ln2(self):
        logits = Tensor.from_array(np.zeros((8, 1)))
        for label in (0.0, 1.0):
            loss, _ = bce_with_logits(logits, label)
            assert loss == pytest.approx(math.log(2), rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = Network([dense(6, 4), relu(4), dense(4, 1)], seed=5)
        x = Tensor.from_array(rng.normal(size=(7, 6)))
        labels = rng.integers(0, 2, 7).astype(np.float64)

        def loss_fn():
            return bce_with_logits(net.forward(x), labels)[0]

        out = net.forward(x)
        _, grad = bce_with_logits(out, labels)
        analytic, _ = net.backward(grad)
        numeric = numeric_gradient(loss_fn, net)
        assert max_rel_error(analytic, numeric) < 1e-2


class TestGanConfig:
    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            GanConfig(lambda_mse=-0.5)

    def test_lr_bounds(self):
        with pytest.raises(ValueError):
            GanConfig(lr_generator=0.0)
        with pytest.raises(ValueError):
            GanConfig(lr_discriminator=1.5)


class TestDiscriminatorStep:
    def test_half_output_gives_ln2_both_sides(self):
        disc = zero_logit_disc(4)
        rng = np.random.default_rng(0)
        real = Tensor.from_array(rng.normal(size=(16, 4)))
        fake = Tensor.from_array(rng.normal(size=(16, 4)))
        opt = make_optimizer(TrainConfig(1, 16, 0.05, "sgd", 0))
        lr, lf = discriminator_step(disc, real, fake, opt)
        assert lr == pytest.approx(math.log(2), rel=1e-6)
        assert lf == pytest.approx(math.log(2), rel=1e-6)

    def test_wide_output_rejected(self):
        disc = Network([dense(4, 2)], seed=0)
        t = Tensor.from_array(np.zeros((2, 4)))
        opt = make_optimizer(TrainConfig(1, 2, 0.05, "sgd", 0))
        with pytest.raises(StructureError):
            discriminator_step(disc, t, t.copy(), opt)

    def test_shape_mismatch(self):
        disc = zero_logit_disc(4)
        opt = make_optimizer(TrainConfig(1, 2, 0.05, "sgd", 0))
        with pytest.raises(DimensionError):
            discriminator_step(disc, Tensor.from_array(np.zeros((2, 4))),
                               Tensor.from_array(np.zeros((3, 4))), opt)

    def test_identical_distributions_disc_stays_near_chance(self):
        # real and fake drawn from the same sampler: accuracy ~ 0.5
        rng = np.random.default_rng(7)
        disc = Network(default_discriminator_layers(6), seed=7)
        opt = make_optimizer(TrainConfig(1, 64, 0.05, "sgd", 0))
        for _ in range(200):
            real = Tensor.from_array(rng.normal(size=(64, 6)))
            fake = Tensor.from_array(rng.normal(size=(64, 6)))
            discriminator_step(disc, real, fake, opt)
        real = Tensor.from_array(rng.normal(size=(512, 6)))
        fake = Tensor.from_array(rng.normal(size=(512, 6)))
        pr = disc.forward(real).view().reshape(-1)
        pf = disc.forward(fake).view().reshape(-1)
        acc = 0.5 * ((pr > 0).mean() + (pf <= 0).mean())
        assert abs(acc - 0.5) <= 0.1


class TestGeneratorStep:
    def _setup(self, lambda_mse):
        rng = np.random.default_rng(1)
        student = Network(student_layers(5, 4, 8), seed=2)
        disc = Network(default_discriminator_layers(4), seed=3)
        x = Tensor.from_array(rng.normal(size=(16, 5)))
        target = Tensor.from_array(rng.normal(size=(16, 4)))
        cfg = GanConfig(epochs=1, batch_size=16, lambda_mse=lambda_mse, seed=0)
        opt = make_optimizer(TrainConfig(1, 16, cfg.lr_generator, "sgd", 0))
        return student, disc, x, target, cfg, opt

    def test_disc_frozen_during_step(self):
        student, disc, x, target, cfg, opt = self._setup(1.0)
        before = disc.param_bytes()
        generator_step(student, disc, x, target, cfg, opt)
        assert disc.param_bytes() == before

    def test_student_updated(self):
        student, disc, x, target, cfg, opt = self._setup(1.0)
        before = student.param_bytes()
        generator_step(student, disc, x, target, cfg, opt)
        assert student.param_bytes() != before

    def test_lambda_zero_pure_adversarial(self):
        # identical seeds, different lambda: with lambda=0 the MSE term is
        # recorded but must not influence the update
        s0, d0, x, target, cfg0, opt0 = self._setup(0.0)
        s1, d1, _, _, cfg1, opt1 = self._setup(5.0)
        b0, m0 = generator_step(s0, d0, x, target, cfg0, opt0)
        b1, m1 = generator_step(s1, d1, x, target, cfg1, opt1)
        assert m0 == pytest.approx(m1)  # same recorded mse before update
        assert s0.param_bytes() != s1.param_bytes()

    def test_perfect_student_zero_mse_term(self):
        rng = np.random.default_rng(9)
        x = Tensor.from_array(rng.normal(size=(4, 3)))
        student = Network([dense(3, 3)], seed=0,
                          params=[(np.eye(3, dtype=np.float32),
                                   np.zeros(3, dtype=np.float32))])
        target = student.forward(x)
        disc = zero_logit_disc(3)
        cfg = GanConfig(batch_size=4, seed=0)
        opt = make_optimizer(TrainConfig(1, 4, cfg.lr_generator, "sgd", 0))
        _, mse_term = generator_step(student, disc, x, target, cfg, opt)
        assert mse_term == pytest.approx(0.0, abs=1e-12)


class TestTrainStudentGan:
    def _run(self, teacher_dense, x, seed, epochs=10, lambda_mse=1.0):
        p = make_partition(DENSE_DIM, 4)
        a, b = p.ranges[0]
        student = Network(student_layers(x.shape[1], b - a, 16), seed=seed)
        cfg = GanConfig(epochs=epochs, batch_size=32, lr_generator=0.05,
                        lr_discriminator=0.05, lambda_mse=lambda_mse,
                        seed=seed)
        return train_student_gan(student, default_discriminator_layers(b - a),
                                 teacher_dense, p.ranges[0], x, cfg)

    def test_seeded_reproducibility(self, teacher_dense, blobs):
        train, _ = blobs
        _, r1 = self._run(teacher_dense, train.x, seed=5, epochs=3)
        _, r2 = self._run(teacher_dense, train.x, seed=5, epochs=3)
        assert r1.g_mse == r2.g_mse
        assert r1.d_loss_real == r2.d_loss_real
        assert r1.final_chunk_mse == r2.final_chunk_mse

    def test_mse_halves_from_epoch_zero(self, teacher_dense, blobs):
        train, _ = blobs
        _, report = self._run(teacher_dense, train.x, seed=1, epochs=10)
        assert report.final_chunk_mse <= 0.5 * report.initial_chunk_mse
        assert report.g_mse[-1] < report.g_mse[0]

    def test_all_losses_finite(self, teacher_dense, blobs):
        train, _ = blobs
        for seed in range(5):
            _, report = self._run(teacher_dense, train.x, seed=seed, epochs=3)
            for series in (report.d_loss_real, report.d_loss_fake,
                           report.g_bce, report.g_mse):
                assert all(math.isfinite(v) and v >= 0 for v in series)

    def test_parameter_isolation_per_step(self, teacher_dense, blobs):
        # discriminator step must not move the student and vice versa
        train, _ = blobs
        p = make_partition(DENSE_DIM, 4)
        a, b = p.ranges[0]
        rng = np.random.default_rng(0)
        student = Network(student_layers(train.x.shape[1], b - a, 8), seed=1)
        disc = Network(default_discriminator_layers(b - a), seed=2)
        d_opt = make_optimizer(TrainConfig(1, 32, 0.05, "sgd", 0))
        g_opt = make_optimizer(TrainConfig(1, 32, 0.05, "sgd", 0))
        x = Tensor.from_array(train.x.view()[:32])
        target = Tensor.from_array(teacher_dense.view()[:32, a:b])
        cfg = GanConfig(batch_size=32, seed=0)
        for _ in range(5):
            fake = student.forward(x)
            s_before = student.param_bytes()
            discriminator_step(disc, target, fake, d_opt)
            assert student.param_bytes() == s_before
            d_before = disc.param_bytes()
            generator_step(student, disc, x, target, cfg, g_opt)
            assert disc.param_bytes() == d_before

    def test_large_lambda_approaches_plain_mse(self, teacher_dense, blobs):
        # final chunk MSE should not get worse as the MSE weight grows
        train, _ = blobs
        finals = []
        for lam in (0.1, 1.0, 10.0):
            _, report = self._run(teacher_dense, train.x, seed=3, epochs=8,
                                  lambda_mse=lam)
            finals.append(report.final_chunk_mse)
        assert finals[2] <= finals[1] <= finals[0]

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_aborts_with_diagnostics(self, teacher_dense, blobs):
        train, _ = blobs
        p = make_partition(DENSE_DIM, 1)
        student = Network(student_layers(train.x.shape[1], DENSE_DIM, 8),
                          seed=0)
        # blow up the student so its outputs overflow float32 in one step
        w, bias = student.params[0]
        student.params[0] = (w * np.float32(1e20), bias)
        cfg = GanConfig(epochs=2, batch_size=64, lambda_mse=1e6, seed=0)
        with pytest.raises((nn.TrainingError, ValueError)):
            train_student_gan(student,
                              default_discriminator_layers(DENSE_DIM),
                              teacher_dense, p.ranges[0], train.x, cfg)
