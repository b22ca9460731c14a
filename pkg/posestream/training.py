"""This module trains and evaluates stream networks: the warm-up plus
cosine learning-rate schedule, momentum SGD with weight decay,
classification and multi-teacher distillation losses, the training loop,
evaluation reports and late fusion of several streams.
"""

# import modules
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tabulate import tabulate
from tqdm import tqdm

from .backbone import BackboneConfig, ModelParams, build_backbone, forward
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import MODALITIES, StreamBuilder, iterate_batches
from .exceptions import (ConfigError, ContractError, DivergenceError,
                         IoError, ShapeError)
from .pose_render import RenderSpec
from .tensor import Tensor, get_tape, mse, mul, no_grad, softmax_crossentropy
from .utils import header, rng_stream

logger = logging.getLogger(__name__)

DISTILL_MODES = ('separate', 'unified')
MODALITY_CHANNELS = {'rgb': 3, 'pose': 3, 'flow': 2}


@dataclass(frozen=True)
class OptimConfig:
    """
    Optimiser and schedule settings.

    Attributes
    ----------
    base_lr : float
        Learning rate reached at the end of the warm-up.
    warmup_steps : int
        Steps of linear warm-up from 0, fewer than ``total_steps``.
    total_steps : int
        Length of the run in optimiser steps.
    momentum : float
        Momentum coefficient.
    weight_decay : float
        Coupled L2 weight decay.
    batch_size : int
        Clips per step.
    seed : int
        Root seed of initialisation, batch order and augmentation.
    log_every : int
        Steps between INFO log lines.
    """
    base_lr: float = 0.1
    warmup_steps: int = 20
    total_steps: int = 200
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    log_every: int = 10

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ConfigError("'base_lr' should be positive.")
        if self.total_steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("'total_steps', 'batch_size' and 'log_every' "
                              "should be positive.")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("'warmup_steps' should be in "
                              "[0, total_steps).")
        if not 0 <= self.momentum < 1:
            raise ConfigError("'momentum' should be in [0, 1).")
        if self.weight_decay < 0:
            raise ConfigError("'weight_decay' should be non-negative.")
        if self.seed < 0:
            raise ConfigError("'seed' should be non-negative.")


@dataclass(frozen=True)
class TeacherSpec:
    """A trained stream used as a teacher: its input modality, checkpoint
    and architecture (and rendering variant for pose teachers)."""
    modality: str
    checkpoint: str
    backbone: BackboneConfig
    render_spec: Optional[RenderSpec] = None

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"teacher modality should be one of "
                              f"{MODALITIES}.")


@dataclass(frozen=True)
class DistillConfig:
    """
    Distillation settings.

    Attributes
    ----------
    teachers : tuple of TeacherSpec
        At least one teacher.
    mode : str
        ``'separate'`` (one MSE per teacher) or ``'unified'`` (one MSE
        towards the sum of the teacher logits).
    distill_weight : float
        Weight of the MSE terms.
    cache_teacher_logits : bool
        Reuse teacher logits per clip; only honoured without augmentation.
    """
    teachers: tuple = ()
    mode: str = 'separate'
    distill_weight: float = 1.0
    cache_teacher_logits: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, 'teachers', tuple(self.teachers))
        if len(self.teachers) < 1:
            raise ConfigError('distillation needs at least one teacher.')
        if self.mode not in DISTILL_MODES:
            raise ConfigError(f"'mode' should be one of {DISTILL_MODES}.")
        if self.distill_weight < 0:
            raise ConfigError("'distill_weight' should be non-negative.")


def lr_at(step, cfg) -> float:
    """
    Learning rate at ``step``: linear from 0 to ``base_lr`` over the
    warm-up, then ``base_lr * 0.5 * (1 + cos(pi * progress))`` down to 0
    at ``total_steps``.

    Raises
    ------
    ContractError
        If ``step`` is outside ``[0, total_steps]``.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f'step {step} outside [0, {cfg.total_steps}].')
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps
                                            - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def gradients(params) -> dict:
    """The accumulated gradients of the trainable parameters (zeros where
    nothing was accumulated)."""
    grads = {}
    for name in params.trainable():
        tensor = params[name]
        grads[name] = np.zeros(tensor.shape, dtype=tensor.dtype) \
            if tensor.grad is None else tensor.grad
    return grads


def sgd_momentum_step(params, grads, velocity, lr, cfg) -> None:
    """
    One momentum SGD update with coupled weight decay,
    ``v <- m * v + g + wd * p`` and ``p <- p - lr * v``.

    Parameters
    ----------
    params : ModelParams
        Updated in place (trainable entries only).
    grads : dict
        Gradient per parameter name.
    velocity : dict
        Momentum buffer per parameter name, updated in place; missing
        entries start at zero.
    lr : float
        Learning rate of this step.
    cfg : OptimConfig
        Momentum and weight decay.

    Raises
    ------
    DivergenceError
        If any gradient is not finite; nothing is updated then.
    ShapeError
        If a gradient does not match its parameter.
    """
    names = params.trainable()
    for name in names:
        grad = grads.get(name)
        if grad is None:
            continue
        if np.shape(grad) != params[name].shape:
            raise ShapeError(f"gradient of '{name}' has shape "
                             f"{np.shape(grad)}, expected "
                             f"{params[name].shape}.")
        if not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite gradient for '{name}'.")

    for name in names:
        tensor = params[name]
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros(tensor.shape, dtype=tensor.dtype)
        buf = velocity.get(name)
        if buf is None:
            buf = np.zeros(tensor.shape, dtype=tensor.dtype)
        buf = cfg.momentum * buf + grad + cfg.weight_decay * tensor.data
        velocity[name] = buf
        params[name] = Tensor(tensor.data - lr * buf, requires_grad=True,
                              dtype=tensor.dtype)


def _teacher_tensor(logits) -> Tensor:
    if isinstance(logits, Tensor):
        return logits.detach()
    return Tensor(logits)


def distill_loss(student_logits, teacher_logits, labels, mode='separate',
                 weight=1.0, return_terms=False):
    """
    Classification loss plus logit mimicking:
    ``CE(S) + w * sum_i MSE(T_i, S)`` (separate) or
    ``CE(S) + w * MSE(sum_i T_i, S)`` (unified). Teacher logits are
    detached, so gradients only reach the student.

    Parameters
    ----------
    student_logits : Tensor
        ``[B, K]``.
    teacher_logits : list
        Teacher logits ``[B, K]`` (Tensors or arrays).
    labels : array-like
        ``[B]`` class indices.
    mode : str, optional
        ``'separate'`` (default) or ``'unified'``.
    weight : float, optional
        Weight of the MSE terms, defaults to 1.
    return_terms : bool, optional
        Also return the classification term and the weighted MSE terms.

    Raises
    ------
    ContractError
        If there are no teachers.
    ShapeError
        If teacher and student logits differ in shape.

    Returns
    -------
    Tensor or tuple
        The loss, or ``(loss, loss_cls, [mse terms])``.
    """
    if mode not in DISTILL_MODES:
        raise ValueError(f"'mode' should be one of {DISTILL_MODES}.")
    teachers = [_teacher_tensor(t) for t in teacher_logits]
    if not teachers:
        raise ContractError('distillation needs at least one teacher.')
    for teacher in teachers:
        if teacher.shape != student_logits.shape:
            raise ShapeError(f'teacher logits {teacher.shape} differ from '
                             f'student logits {student_logits.shape}.')

    loss_cls = softmax_crossentropy(student_logits, labels)
    if mode == 'separate':
        targets = teachers
    else:
        targets = [Tensor._wrap(sum(t.data for t in teachers))]
    terms = [mul(mse(student_logits, target), float(weight))
             for target in targets]
    loss = loss_cls
    for term in terms:
        loss = loss + term
    if return_terms:
        return loss, loss_cls, terms
    return loss


def _stack(streams) -> np.ndarray:
    return np.stack(streams).astype(np.float32)


class Teacher:
    """
    This class wraps a frozen teacher: it runs in evaluation mode (running
    normalisation statistics) without recording on the tape.

    Attributes
    ----------
    params : ModelParams, readonly
        The teacher parameters.
    cfg : BackboneConfig, readonly
        The teacher architecture.
    modality : str, readonly
        The input modality.
    builder : StreamBuilder, readonly
        Builds the teacher's inputs.
    """
    def __init__(self, params, cfg, modality, builder=None) -> None:
        if modality not in MODALITIES:
            raise ConfigError(f"'modality' should be one of {MODALITIES}.")
        if cfg.input_channels != MODALITY_CHANNELS[modality]:
            raise ConfigError(f'a {modality} teacher needs '
                              f'{MODALITY_CHANNELS[modality]} input '
                              f'channels.')
        self._params = params
        self._cfg = cfg
        self._modality = modality
        self._builder = StreamBuilder() if builder is None else builder

    @classmethod
    def from_spec(cls, spec, builder=None) -> 'Teacher':
        """Load a teacher checkpoint against its architecture."""
        params = load_checkpoint(spec.checkpoint, spec.backbone)
        if spec.render_spec is not None:
            flow_params = None if builder is None else builder.flow_params
            augment_cfg = None if builder is None else builder.augment_cfg
            builder = StreamBuilder(spec.render_spec, flow_params,
                                    augment_cfg)
        return cls(params, spec.backbone, spec.modality, builder)

    @property
    def params(self) -> ModelParams:
        return self._params

    @property
    def cfg(self) -> BackboneConfig:
        return self._cfg

    @property
    def modality(self) -> str:
        return self._modality

    @property
    def builder(self) -> StreamBuilder:
        return self._builder

    def logits(self, x) -> np.ndarray:
        """Logits ``[B, K]`` of an input batch."""
        with no_grad():
            return forward(self._params, self._cfg, x, training=False).numpy()


def _check_modality(cfg, modality) -> None:
    if modality not in MODALITIES:
        raise ConfigError(f"'modality' should be one of {MODALITIES}.")
    if cfg.input_channels != MODALITY_CHANNELS[modality]:
        raise ConfigError(f'the {modality} stream needs '
                          f'{MODALITY_CHANNELS[modality]} input channels, '
                          f'the backbone has {cfg.input_channels}.')


def train(model_cfg, clips, optim_cfg, distill=None, modality='rgb',
          builder=None, clip_length=None, augment=True, out_dir=None,
          teachers=None, init_params=None, progress=False) -> tuple:
    """
    Train a stream network, optionally distilling from teachers.

    Every step draws a batch, applies one random transform per clip
    (shared by the student and teacher inputs of that clip), runs the
    student in training mode and the teachers in evaluation mode, and
    takes one momentum SGD step at ``lr_at(step)``.

    Parameters
    ----------
    model_cfg : BackboneConfig
        The student architecture.
    clips : list of ClipSample
        The training split.
    optim_cfg : OptimConfig
        Optimiser, schedule, batch size and seed.
    distill : DistillConfig, optional
        Teachers and loss mode; plain classification when None.
    modality : str, optional
        The student's input, defaults to ``'rgb'``.
    builder : StreamBuilder, optional
        Builds (and memoises) the inputs.
    clip_length : int, optional
        Frames per training clip, defaults to the stored length.
    augment : bool, optional
        Random transforms; off means the deterministic evaluation
        preprocessing. Defaults to True.
    out_dir : str or pathlib.Path, optional
        Where checkpoints (one per epoch plus ``model.ckpt``) and
        ``training_log.csv`` are written.
    teachers : list of Teacher, optional
        Already loaded teachers, overriding ``distill.teachers``.
    init_params : ModelParams, optional
        Start from these parameters instead of a fresh initialisation.
    progress : bool, optional
        Show a progress bar.

    Raises
    ------
    ContractError
        If ``clips`` is empty.
    ConfigError
        If the modality and the input channels disagree, or teachers do
        not match the student's class count.
    DivergenceError
        If the loss or a gradient becomes non-finite.

    Returns
    -------
    tuple
        ``(params, log)`` with the log as a pandas DataFrame, one row per
        update; ``step`` is the 0-based update index and ``lr`` the rate
        ``lr_at(step)`` it was applied with.
    """
    if not clips:
        raise ContractError('cannot train on an empty dataset.')
    _check_modality(model_cfg, modality)
    builder = StreamBuilder() if builder is None else builder
    length = clip_length or clips[0].num_frames

    if distill is not None and teachers is None:
        teachers = [Teacher.from_spec(spec, builder)
                    for spec in distill.teachers]
    teachers = list(teachers or [])
    mode = 'separate' if distill is None else distill.mode
    weight = 1.0 if distill is None else distill.distill_weight
    for teacher in teachers:
        if teacher.cfg.num_classes != model_cfg.num_classes:
            raise ConfigError('teachers and student should share the '
                              'number of classes.')
    num_terms = 0
    if teachers:
        num_terms = len(teachers) if mode == 'separate' else 1
    use_cache = bool(distill is not None and distill.cache_teacher_logits)
    if use_cache and augment:
        warnings.warn('teacher logits are not cached while augmentation '
                      'is on.', UserWarning)
        use_cache = False
    cache = {}

    if init_params is not None:
        params = init_params.copy()
    else:
        params = build_backbone(model_cfg, seed=optim_cfg.seed)
    velocity = {}
    records = []
    out_dir = None if out_dir is None else Path(out_dir)
    step = 0
    epoch = 0
    bar = tqdm(total=optim_cfg.total_steps, desc='train', leave=False,
               disable=not progress)
    tape = get_tape()

    while step < optim_cfg.total_steps:
        order_rng = rng_stream(optim_cfg.seed, f'batches/{epoch}')
        for batch in iterate_batches(clips, optim_cfg.batch_size, order_rng):
            if step >= optim_cfg.total_steps:
                break
            student_x, teacher_x = [], [[] for _ in teachers]
            for clip in batch:
                if augment:
                    rng = rng_stream(optim_cfg.seed,
                                     f'augment/{clip.id}/{epoch}')
                    sample = builder.sample(clip, rng, length)
                    stream, _ = builder.input_for(clip, modality, sample)
                    for i, teacher in enumerate(teachers):
                        teacher_x[i].append(teacher.builder.input_for(
                            clip, teacher.modality, sample)[0])
                else:
                    stream, _ = builder.eval_input(clip, modality, length)
                    for i, teacher in enumerate(teachers):
                        if use_cache and (clip.id, i) in cache:
                            continue
                        teacher_x[i].append(teacher.builder.eval_input(
                            clip, teacher.modality, length)[0])
                student_x.append(stream)
            labels = np.array([clip.label for clip in batch])

            teacher_logits = []
            for i, teacher in enumerate(teachers):
                if use_cache:
                    if teacher_x[i]:
                        fresh = iter(teacher.logits(_stack(teacher_x[i])))
                        for clip in batch:
                            if (clip.id, i) not in cache:
                                cache[(clip.id, i)] = next(fresh)
                    teacher_logits.append(np.stack(
                        [cache[(clip.id, i)] for clip in batch]))
                else:
                    teacher_logits.append(
                        teacher.logits(_stack(teacher_x[i])))

            try:
                logits = forward(params, model_cfg, _stack(student_x),
                                 training=True)
                if teachers:
                    loss, loss_cls, terms = distill_loss(
                        logits, teacher_logits, labels, mode, weight,
                        return_terms=True)
                else:
                    loss = loss_cls = softmax_crossentropy(logits, labels)
                    terms = []
                if not np.isfinite(loss.data).all():
                    raise DivergenceError(f'non-finite loss at step '
                                          f'{step + 1}.')
                loss.backward()
                lr = lr_at(step, optim_cfg)
                sgd_momentum_step(params, gradients(params), velocity, lr,
                                  optim_cfg)
            finally:
                tape.clear()
                params.zero_grad()
            record = {'step': step, 'epoch': epoch, 'lr': lr,
                      'loss_cls': loss_cls.item()}
            for i, term in enumerate(terms):
                record[f'loss_mse_{i + 1}'] = term.item()
            record['loss_total'] = loss.item()
            record['train_acc'] = float(
                (logits.data.argmax(axis=1) == labels).mean())
            records.append(record)
            step += 1
            bar.update(1)
            if step % optim_cfg.log_every == 0 \
                    or step == optim_cfg.total_steps:
                logger.info('step %d/%d lr %.5f loss %.4f (cls %.4f) '
                            'acc %.3f', step, optim_cfg.total_steps, lr,
                            record['loss_total'], record['loss_cls'],
                            record['train_acc'])
        if out_dir is not None:
            save_checkpoint(params, out_dir / 'checkpoints'
                            / f'epoch_{epoch:03d}.ckpt')
        epoch += 1
    bar.close()

    columns = ['step', 'epoch', 'lr', 'loss_total', 'loss_cls'] + [
        f'loss_mse_{i + 1}' for i in range(num_terms)] + ['train_acc']
    log = pd.DataFrame(records, columns=columns)
    if out_dir is not None:
        save_checkpoint(params, out_dir / 'model.ckpt')
        try:
            log.to_csv(out_dir / 'training_log.csv', index=False)
        except OSError as err:
            raise IoError(f'cannot write the training log: {err}') from err
    return params, log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """
    Classification metrics of one evaluation.

    Attributes
    ----------
    top1, top5 : float
        Top-1 and top-5 accuracy (top-k with k = min(5, classes)).
    per_class : numpy.ndarray
        Accuracy per class (NaN for classes without samples).
    confusion : numpy.ndarray
        ``[K, K]`` counts, rows are true classes.
    class_names : list of str
        Display names.
    """
    top1: float
    top5: float
    per_class: np.ndarray
    confusion: np.ndarray
    class_names: list = field(default_factory=list)

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_frame(self) -> pd.DataFrame:
        """Per-class table: count and accuracy."""
        names = self.class_names or [str(i) for i in
                                     range(len(self.per_class))]
        return pd.DataFrame({'class': names,
                             'count': self.confusion.sum(axis=1),
                             'accuracy': self.per_class})

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame([{'top1': self.top1, 'top5': self.top5,
                              'samples': self.num_samples}])

    def to_text(self, title='Evaluation') -> str:
        """Human-readable report with tabulate tables."""
        names = self.class_names or [str(i) for i in
                                     range(len(self.per_class))]
        lines = [header(title),
                 tabulate(self.summary(), headers='keys', showindex=False,
                          floatfmt='.4f'), '',
                 tabulate(self.to_frame(), headers='keys', showindex=False,
                          floatfmt='.4f'), '',
                 tabulate(self.confusion, headers=names, showindex=names)]
        return '\n'.join(lines)

    def save(self, out_dir, name='eval') -> Path:
        """
        Write ``<name>.csv`` (summary), ``<name>_per_class.csv``,
        ``<name>_confusion.csv`` and ``<name>.txt`` to ``out_dir``.
        """
        out_dir = Path(out_dir)
        names = self.class_names or [str(i) for i in
                                     range(len(self.per_class))]
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.summary().to_csv(out_dir / f'{name}.csv', index=False)
            self.to_frame().to_csv(out_dir / f'{name}_per_class.csv',
                                   index=False)
            pd.DataFrame(self.confusion, index=names, columns=names).to_csv(
                out_dir / f'{name}_confusion.csv')
            (out_dir / f'{name}.txt').write_text(self.to_text(name) + '\n')
        except OSError as err:
            raise IoError(f'cannot write the report: {err}') from err
        return out_dir / f'{name}.csv'


def evaluate_logits(logits, labels, class_names=None) -> EvalReport:
    """
    Metrics of predicted logits ``[N, K]`` against labels ``[N]``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise ShapeError(f'logits {logits.shape} for {len(labels)} labels.')
    if len(labels) == 0:
        raise ContractError('cannot evaluate zero samples.')
    classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ConfigError(f'labels outside [0, {classes}).')

    k = min(5, classes)
    ranked = np.argsort(-logits, axis=1, kind='stable')
    top1 = float((ranked[:, 0] == labels).mean())
    top5 = float((ranked[:, :k] == labels[:, None]).any(axis=1).mean())
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, ranked[:, 0]), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        per_class = np.where(counts > 0, np.diag(confusion) / counts, np.nan)
    return EvalReport(top1, top5, per_class, confusion,
                      list(class_names) if class_names else [])


def predict_logits(params, cfg, clips, modality='rgb', builder=None,
                   clip_length=None, batch_size=8, pad='last') -> np.ndarray:
    """
    Evaluation-mode logits ``[N, K]`` of every clip (single central crop,
    padded to ``clip_length``).
    """
    _check_modality(cfg, modality)
    builder = StreamBuilder() if builder is None else builder
    length = clip_length or clips[0].num_frames
    outputs = []
    with no_grad():
        for batch in iterate_batches(clips, batch_size):
            x = _stack([builder.eval_input(clip, modality, length, pad)[0]
                        for clip in batch])
            outputs.append(forward(params, cfg, x, training=False).numpy())
    return np.concatenate(outputs)


def fuse_logits(logits, weights=None) -> np.ndarray:
    """
    Late fusion: the (weighted) sum of per-stream logits.

    Raises
    ------
    ConfigError
        If the streams disagree in shape (class count).
    """
    logits = [np.asarray(item, dtype=np.float64) for item in logits]
    if not logits:
        raise ContractError('nothing to fuse.')
    if any(item.shape != logits[0].shape for item in logits):
        raise ConfigError('fused streams should share the number of '
                          'classes and samples.')
    weights = [1.0] * len(logits) if weights is None else list(weights)
    if len(weights) != len(logits):
        raise ValueError("'weights' should have one entry per stream.")
    return sum(w * item for w, item in zip(weights, logits))


@dataclass
class FusionMember:
    """One stream of a late-fusion ensemble."""
    params: ModelParams
    cfg: BackboneConfig
    modality: str = 'rgb'
    builder: Optional[StreamBuilder] = None


def late_fuse_eval(members, clips, clip_length=None, class_names=None,
                   batch_size=8) -> EvalReport:
    """
    Evaluate an ensemble by summing the logits of every member before the
    argmax.

    Raises
    ------
    ConfigError
        If the members disagree on the number of classes.
    """
    members = list(members)
    if not members:
        raise ContractError('late fusion needs at least one model.')
    classes = {member.cfg.num_classes for member in members}
    if len(classes) != 1:
        raise ConfigError(f'fused models disagree on the number of '
                          f'classes: {sorted(classes)}.')
    per_member = [predict_logits(m.params, m.cfg, clips, m.modality,
                                 m.builder, clip_length, batch_size)
                  for m in members]
    labels = [clip.label for clip in clips]
    return evaluate_logits(fuse_logits(per_member), labels, class_names)
