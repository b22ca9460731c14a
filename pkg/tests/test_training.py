"""Training test module. Asserts the schedule, the optimiser, the
distillation losses, the training loop and evaluation with late fusion.
"""

# import modules
import numpy as np
import pandas as pd
import pytest
from scipy.special import logsumexp

from posestream.backbone import ModelParams, build_backbone
from posestream.checkpoint import checkpoint_bytes, save_checkpoint
from posestream.exceptions import (ConfigError, ContractError,
                                   DivergenceError, ShapeError)
from posestream.tensor import Tensor, default_dtype, get_tape
from posestream.training import (DistillConfig, EvalReport, FusionMember,
                                 OptimConfig, Teacher, TeacherSpec,
                                 distill_loss, evaluate_logits, fuse_logits,
                                 late_fuse_eval, lr_at, predict_logits,
                                 sgd_momentum_step, train)
from tests.data_generator import micro_backbone, random_array, tiny_dataset


def single_param(value) -> ModelParams:
    return ModelParams({'w': Tensor(np.atleast_1d(value),
                                    requires_grad=True,
                                    dtype=np.float64)})


class TestSchedule:
    """
    This class is to test :class:`OptimConfig` and :func:`lr_at`.
    """
    def test_errors(self):
        with pytest.raises(ConfigError):
            OptimConfig(warmup_steps=200, total_steps=200)
        with pytest.raises(ConfigError):
            OptimConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            OptimConfig(base_lr=0)
        with pytest.raises(ContractError):
            lr_at(201, OptimConfig())
        with pytest.raises(ContractError):
            lr_at(-1, OptimConfig())

    def test_values(self):
        cfg = OptimConfig(base_lr=1.6, warmup_steps=2000, total_steps=10000)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(1000, cfg) == pytest.approx(0.8)
        assert lr_at(2000, cfg) == pytest.approx(1.6)
        assert lr_at(6000, cfg) == pytest.approx(0.8)
        assert lr_at(10000, cfg) == pytest.approx(0.0, abs=1e-12)
        # continuous at the end of the warm-up
        assert lr_at(1999, cfg) == pytest.approx(lr_at(2000, cfg), rel=1e-3)
        assert lr_at(2001, cfg) == pytest.approx(lr_at(2000, cfg), rel=1e-3)
        # no warm-up starts at the base rate
        assert lr_at(0, OptimConfig(warmup_steps=0)) == pytest.approx(0.1)


class TestSGD:
    """
    This class is to test :func:`sgd_momentum_step`.
    """
    def setup_class(self):
        self.plain = OptimConfig(momentum=0.0, weight_decay=0.0)

    def test_analytic_step(self):
        # one step on f(p) = p^2 from p = 1
        params = single_param(1.0)
        sgd_momentum_step(params, {'w': np.array([2.0])}, {}, 0.1,
                          self.plain)
        assert params['w'].data[0] == pytest.approx(0.8)
        assert params['w'].requires_grad

    def test_momentum_carryover(self):
        params = single_param(1.0)
        velocity = {'w': np.array([1.0])}
        cfg = OptimConfig(momentum=0.9, weight_decay=0.0)
        sgd_momentum_step(params, {'w': np.array([0.0])}, velocity, 0.1, cfg)
        assert params['w'].data[0] == pytest.approx(1.0 - 0.1 * 0.9)
        np.testing.assert_allclose(velocity['w'], [0.9])

    def test_weight_decay(self):
        params = single_param(2.0)
        cfg = OptimConfig(momentum=0.0, weight_decay=0.5)
        sgd_momentum_step(params, {'w': np.array([0.0])}, {}, 0.1, cfg)
        assert params['w'].data[0] == pytest.approx(2.0 - 0.1 * 1.0)

    def test_buffers_are_not_updated(self):
        params = build_backbone(micro_backbone(norm='batch'))
        before = params['stem.norm.running_var']
        grads = {name: np.ones(params[name].shape)
                 for name in params.trainable()}
        sgd_momentum_step(params, grads, {}, 0.1, self.plain)
        assert params['stem.norm.running_var'] is before

    def test_errors(self):
        params = single_param(1.0)
        with pytest.raises(DivergenceError):
            sgd_momentum_step(params, {'w': np.array([np.nan])}, {}, 0.1,
                              self.plain)
        # nothing moved
        assert params['w'].data[0] == 1.0
        with pytest.raises(ShapeError):
            sgd_momentum_step(params, {'w': np.ones(2)}, {}, 0.1, self.plain)


class TestDistillLoss:
    """
    This class is to test :func:`distill_loss`.
    """
    def setup_class(self):
        self.student = random_array((4, 3), seed=1)
        self.teachers = [random_array((4, 3), seed=2),
                         random_array((4, 3), seed=3)]
        self.labels = np.array([0, 2, 1, 1])

    def setup_method(self, method):
        get_tape().clear()

    def cross_entropy(self):
        log_probs = self.student - logsumexp(self.student, axis=1,
                                             keepdims=True)
        return -log_probs[np.arange(4), self.labels].mean()

    def test_values(self):
        with default_dtype(np.float64):
            student = Tensor(self.student, requires_grad=True)
            separate = distill_loss(student, self.teachers, self.labels)
            unified = distill_loss(student, self.teachers, self.labels,
                                   mode='unified', weight=0.5)
        expected = self.cross_entropy() + sum(
            np.mean((self.student - t) ** 2) for t in self.teachers)
        assert separate.item() == pytest.approx(expected)
        total = self.teachers[0] + self.teachers[1]
        expected = self.cross_entropy() + 0.5 * np.mean(
            (self.student - total) ** 2)
        assert unified.item() == pytest.approx(expected)

    def test_identities(self):
        with default_dtype(np.float64):
            student = Tensor(self.student, requires_grad=True)
            one = [self.teachers[0]]
            assert distill_loss(student, one, self.labels).item() == \
                distill_loss(student, one, self.labels, 'unified').item()
            # a teacher equal to the student adds nothing
            mimic = distill_loss(student, [self.student], self.labels)
            assert mimic.item() == pytest.approx(self.cross_entropy(),
                                                 rel=1e-12)

    def test_terms_and_gradients(self):
        with default_dtype(np.float64):
            student = Tensor(self.student, requires_grad=True)
            teachers = [Tensor(t, requires_grad=True) for t in self.teachers]
            loss, loss_cls, terms = distill_loss(
                student, teachers, self.labels, return_terms=True)
            assert len(terms) == 2
            assert loss.item() == pytest.approx(
                loss_cls.item() + sum(term.item() for term in terms))
            loss.backward()
        assert student.grad is not None
        # the teachers never receive gradient
        assert all(t.grad is None for t in teachers)

    def test_errors(self):
        student = Tensor(self.student, requires_grad=True)
        with pytest.raises(ContractError):
            distill_loss(student, [], self.labels)
        with pytest.raises(ShapeError):
            distill_loss(student, [np.zeros((4, 2))], self.labels)
        with pytest.raises(ValueError):
            distill_loss(student, self.teachers, self.labels, mode='mean')
        with pytest.raises(ConfigError):
            DistillConfig(teachers=())
        with pytest.raises(ConfigError):
            TeacherSpec('depth', 'model.ckpt', micro_backbone())


class TestTrain:
    """
    This class is to test the training loop.
    """
    def setup_class(self):
        self.cfg = micro_backbone()
        self.train_clips, self.val_clips = tiny_dataset(num_classes=3)
        self.optim = OptimConfig(base_lr=0.05, warmup_steps=1, total_steps=3,
                                 batch_size=4, seed=1, log_every=1)

    def test_log(self, tmp_path):
        params, log = train(self.cfg, self.train_clips, self.optim,
                            out_dir=tmp_path)
        assert list(log.columns) == ['step', 'epoch', 'lr', 'loss_total',
                                     'loss_cls', 'train_acc']
        assert list(log['step']) == [0, 1, 2]
        # six clips in batches of four: two steps per epoch
        assert list(log['epoch']) == [0, 0, 1]
        expected = [lr_at(step, self.optim) for step in (0, 1, 2)]
        np.testing.assert_allclose(log['lr'], expected)
        # warm-up starts from 0 and the last update still moves the weights
        np.testing.assert_allclose(log['lr'], [0.0, 0.05, 0.025])
        assert np.isfinite(log['loss_total']).all()
        np.testing.assert_allclose(log['loss_total'], log['loss_cls'])
        for name in ('checkpoints/epoch_000.ckpt',
                     'checkpoints/epoch_001.ckpt', 'model.ckpt',
                     'training_log.csv'):
            assert (tmp_path / name).exists()
        saved = pd.read_csv(tmp_path / 'training_log.csv')
        assert len(saved) == 3

    def test_deterministic(self):
        first, _ = train(self.cfg, self.train_clips, self.optim)
        second, _ = train(self.cfg, self.train_clips, self.optim)
        assert checkpoint_bytes(first) == checkpoint_bytes(second)
        third, _ = train(self.cfg, self.train_clips, self.optim,
                         augment=False)
        assert checkpoint_bytes(first) != checkpoint_bytes(third)

    def test_distillation(self):
        pose_cfg = micro_backbone()
        teachers = [Teacher(build_backbone(self.cfg, seed=5), self.cfg,
                            'rgb'),
                    Teacher(build_backbone(pose_cfg, seed=6), pose_cfg,
                            'pose')]
        _, log = train(self.cfg, self.train_clips, self.optim,
                       teachers=teachers)
        assert 'loss_mse_1' in log.columns and 'loss_mse_2' in log.columns
        np.testing.assert_allclose(
            log['loss_total'],
            log['loss_cls'] + log['loss_mse_1'] + log['loss_mse_2'],
            rtol=1e-5, atol=1e-6)
        # the unified loss has a single mimicking term
        spec = TeacherSpec('rgb', 'unused.ckpt', self.cfg)
        _, log = train(self.cfg, self.train_clips, self.optim,
                       distill=DistillConfig((spec,), mode='unified'),
                       teachers=teachers)
        assert 'loss_mse_1' in log.columns
        assert 'loss_mse_2' not in log.columns
        np.testing.assert_allclose(log['loss_total'],
                                   log['loss_cls'] + log['loss_mse_1'],
                                   rtol=1e-5, atol=1e-6)
        # the logged total is the weighted objective
        _, log = train(self.cfg, self.train_clips, self.optim,
                       distill=DistillConfig((spec,), distill_weight=0.0),
                       teachers=teachers)
        np.testing.assert_allclose(log['loss_mse_1'], 0.0)
        np.testing.assert_allclose(log['loss_total'], log['loss_cls'],
                                   rtol=1e-5, atol=1e-6)

    def test_teacher_checkpoints(self, tmp_path):
        path = save_checkpoint(build_backbone(self.cfg, seed=5),
                               tmp_path / 'teacher.ckpt')
        spec = TeacherSpec('rgb', str(path), self.cfg)
        cached = DistillConfig((spec,), cache_teacher_logits=True)
        with pytest.warns(UserWarning):
            train(self.cfg, self.train_clips, self.optim, distill=cached)
        _, log = train(self.cfg, self.train_clips, self.optim,
                       distill=cached, augment=False)
        assert np.isfinite(log['loss_mse_1']).all()

    def test_errors(self):
        with pytest.raises(ContractError):
            train(self.cfg, [], self.optim)
        with pytest.raises(ConfigError):
            train(self.cfg, self.train_clips, self.optim, modality='flow')
        other = micro_backbone(num_classes=4)
        with pytest.raises(ConfigError):
            train(self.cfg, self.train_clips, self.optim,
                  teachers=[Teacher(build_backbone(other), other, 'rgb')])
        with pytest.raises(ConfigError):
            Teacher(build_backbone(self.cfg), self.cfg, 'flow')


class TestEvaluation:
    """
    This class is to test reports and late fusion.
    """
    def setup_class(self):
        self.logits = np.array([[3.0, 1.0, 0.0],
                                [0.0, 2.0, 1.0],
                                [2.0, 0.0, 1.0],
                                [0.0, 1.0, 3.0]])
        self.labels = np.array([0, 1, 2, 2])
        self.cfg = micro_backbone()
        _, self.clips = tiny_dataset(num_classes=3)
        self.params = build_backbone(self.cfg, seed=2)

    def test_report(self, tmp_path):
        report = evaluate_logits(self.logits, self.labels, ['a', 'b', 'c'])
        assert isinstance(report, EvalReport)
        assert report.top1 == pytest.approx(0.75)
        # with three classes the top-5 covers every class
        assert report.top5 == 1.0
        np.testing.assert_array_equal(report.confusion,
                                      [[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        np.testing.assert_allclose(report.per_class, [1.0, 1.0, 0.5])
        assert report.num_samples == 4
        assert list(report.to_frame()['class']) == ['a', 'b', 'c']
        text = report.to_text('Validation')
        assert text.startswith('==========\nValidation\n==========')
        report.save(tmp_path, 'val')
        for name in ('val.csv', 'val_per_class.csv', 'val_confusion.csv',
                     'val.txt'):
            assert (tmp_path / name).exists()

    def test_report_edge_cases(self):
        report = evaluate_logits(self.logits[:2], self.labels[:2])
        assert np.isnan(report.per_class[2])
        with pytest.raises(ShapeError):
            evaluate_logits(self.logits, self.labels[:3])
        with pytest.raises(ConfigError):
            evaluate_logits(self.logits, [0, 1, 2, 3])
        with pytest.raises(ContractError):
            evaluate_logits(np.zeros((0, 3)), [])

    def test_fuse_logits(self):
        np.testing.assert_array_equal(fuse_logits([self.logits]),
                                      self.logits)
        fused = fuse_logits([self.logits, np.zeros_like(self.logits)])
        np.testing.assert_array_equal(fused, self.logits)
        other = random_array(self.logits.shape, seed=4)
        fused = fuse_logits([self.logits, other])
        scaled = fuse_logits([self.logits, other], weights=[3.0, 3.0])
        np.testing.assert_array_equal(fused.argmax(axis=1),
                                      scaled.argmax(axis=1))
        with pytest.raises(ConfigError):
            fuse_logits([self.logits, self.logits[:, :2]])
        with pytest.raises(ContractError):
            fuse_logits([])
        with pytest.raises(ValueError):
            fuse_logits([self.logits], weights=[1.0, 2.0])

    def test_late_fusion(self):
        logits = predict_logits(self.params, self.cfg, self.clips)
        assert logits.shape == (3, 3)
        single = evaluate_logits(logits, [c.label for c in self.clips])
        member = FusionMember(self.params, self.cfg, 'rgb')
        fused = late_fuse_eval([member, member], self.clips)
        assert fused.top1 == single.top1
        assert fused.top5 == single.top5
        assert fused.top5 >= fused.top1
        other = micro_backbone(num_classes=4)
        with pytest.raises(ConfigError):
            late_fuse_eval([member, FusionMember(build_backbone(other),
                                                 other)], self.clips)
        with pytest.raises(ContractError):
            late_fuse_eval([], self.clips)
