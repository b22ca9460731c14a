"""This module contains the gated residual 3D backbone: its configuration,
parameter construction, feature gating, residual cells and the forward
pass.

The default configuration is the 50-layer gated 3D ResNet: a 5x7x7 stem
with spatial stride 2, a 1x3x3 spatial max pool, four stages of
bottleneck cells ``[t x 1x1, 1 x 3x3, 1 x 1x1]`` and no temporal
downsampling anywhere. :meth:`BackboneConfig.tiny` gives the same shape
algebra at desk scale.
"""

# import modules
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError, ContractError, ShapeError
from .tensor import (Tensor, as_tensor, avgpool_global, batch_norm, conv3d,
                     conv_output_geometry, get_default_dtype, group_norm,
                     matmul, maxpool_spatial, mean, relu, reshape, sigmoid)
from .utils import rng_stream

logger = logging.getLogger(__name__)

BLOCK_STYLES = ('bottleneck', 'factorized')
NORMS = ('batch', 'group')
BUFFER_SUFFIXES = ('.running_mean', '.running_var')


def default_temporal_kernels(stage_number, num_cells) -> tuple:
    """
    Temporal kernel sizes of the first convolution of every cell.
    Stage 2 uses 3 everywhere; later stages alternate, 3 at odd cell
    indices (1-based) and 1 at even ones.

    Parameters
    ----------
    stage_number : int
        The stage number, 2 for the first residual stage.
    num_cells : int
        The number of cells in the stage.

    Returns
    -------
    tuple of int
        One temporal kernel size per cell.
    """
    if stage_number == 2:
        return (3,) * num_cells
    return tuple(3 if i % 2 == 1 else 1 for i in range(1, num_cells + 1))


@dataclass(frozen=True)
class StageSpec:
    """One residual stage: ``num_cells`` cells ending at ``out_channels``
    channels, the first cell applying ``spatial_stride``."""
    num_cells: int
    out_channels: int
    spatial_stride: int = 2
    temporal_kernels: Optional[tuple] = None


@dataclass(frozen=True)
class CellSpec:
    """A fully resolved residual cell."""
    name: str
    in_channels: int
    mid_channels: int
    out_channels: int
    spatial_stride: int
    temporal_kernel: int

    @property
    def projection(self) -> bool:
        """Whether the shortcut needs a 1x1x1 projection."""
        return self.in_channels != self.out_channels \
            or self.spatial_stride != 1


@dataclass(frozen=True)
class BackboneConfig:
    """
    Block-structured architecture description.

    Attributes
    ----------
    stem_kernel : tuple of int
        ``(kT, kH, kW)`` of the stem convolution.
    stem_stride : tuple of int
        Stem stride; the temporal entry must be 1.
    stem_channels : int
        Stem output channels.
    pool_kernel, pool_stride : tuple of int
        Spatial max pool; temporal entries must be 1.
    stages : tuple of StageSpec
        The residual stages, named ``stage2`` onwards.
    gating_enabled : bool
        Apply feature gating.
    gating_per_cell : bool
        Gate after every cell instead of once per stage.
    num_classes : int
        Classifier outputs.
    block_style : str
        ``'bottleneck'`` or ``'factorized'`` (separable 1x3x3 then 3x1x1).
    norm : str
        ``'batch'`` or ``'group'``.
    norm_groups : int
        Group count for group normalisation (reduced to divide channels).
    input_channels : int
        3 for RGB and pose streams, 2 for flow.
    bottleneck_ratio : int
        Output channels over bottleneck channels.
    """
    stem_kernel: tuple = (5, 7, 7)
    stem_stride: tuple = (1, 2, 2)
    stem_channels: int = 64
    pool_kernel: tuple = (1, 3, 3)
    pool_stride: tuple = (1, 2, 2)
    stages: tuple = field(default_factory=lambda: (
        StageSpec(3, 256, 1), StageSpec(4, 512, 2),
        StageSpec(6, 1024, 2), StageSpec(3, 2048, 2)))
    gating_enabled: bool = True
    gating_per_cell: bool = False
    num_classes: int = 600
    block_style: str = 'bottleneck'
    norm: str = 'batch'
    norm_groups: int = 4
    input_channels: int = 3
    bottleneck_ratio: int = 4

    def __post_init__(self) -> None:
        # check the stem and the pool
        for name in ('stem_kernel', 'stem_stride', 'pool_kernel',
                     'pool_stride'):
            value = getattr(self, name)
            if len(value) != 3 or min(value) < 1:
                raise ConfigError(f"'{name}' should be three positive "
                                  f"integers.")
        if self.stem_stride[0] != 1:
            raise ConfigError('the stem must not stride in time.')
        if self.pool_kernel[0] != 1 or self.pool_stride[0] != 1:
            raise ConfigError('the pool must not reach across frames.')
        if self.block_style not in BLOCK_STYLES:
            raise ConfigError(f"'block_style' should be one of "
                              f"{BLOCK_STYLES}.")
        if self.norm not in NORMS:
            raise ConfigError(f"'norm' should be one of {NORMS}.")
        for name in ('stem_channels', 'num_classes', 'norm_groups',
                     'input_channels', 'bottleneck_ratio'):
            if getattr(self, name) < 1:
                raise ConfigError(f"'{name}' should be a positive integer.")
        if len(self.stages) == 0:
            raise ConfigError("'stages' should not be empty.")

        # check every stage and its temporal schedule
        for index, stage in enumerate(self.stages):
            number = index + 2
            if stage.num_cells < 1 or stage.out_channels < 1 \
                    or stage.spatial_stride < 1:
                raise ConfigError(f'stage{number} should have positive '
                                  f'cells, channels and stride.')
            if stage.out_channels % self.bottleneck_ratio != 0:
                raise ConfigError(
                    f'stage{number} channels {stage.out_channels} are not '
                    f'divisible by the bottleneck ratio.')
            if stage.temporal_kernels is None:
                continue
            kernels = tuple(stage.temporal_kernels)
            if len(kernels) != stage.num_cells:
                raise ConfigError(f'stage{number} needs one temporal kernel '
                                  f'per cell.')
            if number == 2:
                if any(k not in (1, 3) for k in kernels):
                    raise ConfigError('stage2 temporal kernels should be 1 '
                                      'or 3.')
            elif kernels != default_temporal_kernels(number, len(kernels)):
                raise ConfigError(
                    f'stage{number} temporal kernels should alternate 3 and '
                    f'1, starting with 3 at the first cell.')

    @classmethod
    def r3d50(cls, num_classes=600, input_channels=3, **kwargs):
        """The 50-layer gated configuration (defaults)."""
        return cls(num_classes=num_classes, input_channels=input_channels,
                   **kwargs)

    @classmethod
    def tiny(cls, num_classes=6, input_channels=3, **kwargs):
        """
        Desk-scale configuration: 8-channel stem, one cell per stage and
        stage widths 8, 16, 32 and 64.
        """
        settings = dict(
            stem_kernel=(3, 5, 5), stem_channels=8,
            stages=(StageSpec(1, 8, 1), StageSpec(1, 16, 2),
                    StageSpec(1, 32, 2), StageSpec(1, 64, 2)))
        settings.update(kwargs)
        return cls(num_classes=num_classes, input_channels=input_channels,
                   **settings)

    @property
    def stage_names(self) -> tuple:
        return tuple(f'stage{i + 2}' for i in range(len(self.stages)))

    def layout(self) -> list:
        """
        Resolve the stages into cells.

        Returns
        -------
        list of (str, list of CellSpec)
            One ``(stage name, cells)`` pair per stage.
        """
        result = []
        in_channels = self.stem_channels
        for index, stage in enumerate(self.stages):
            number = index + 2
            kernels = stage.temporal_kernels or default_temporal_kernels(
                number, stage.num_cells)
            cells = []
            for i in range(stage.num_cells):
                cells.append(CellSpec(
                    name=f'stage{number}.cell{i + 1}',
                    in_channels=in_channels,
                    mid_channels=stage.out_channels // self.bottleneck_ratio,
                    out_channels=stage.out_channels,
                    spatial_stride=stage.spatial_stride if i == 0 else 1,
                    temporal_kernel=kernels[i]))
                in_channels = stage.out_channels
            result.append((f'stage{number}', cells))
        return result


@dataclass
class GatingParams:
    """
    Feature gating parameters; ``weight[i, j]`` maps context channel ``i``
    to the gate of channel ``j``.
    """
    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.weight.shape[0] != \
                self.weight.shape[1]:
            raise ShapeError('the gating weight should be square.')
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError('the gating bias should match the weight.')


class ModelParams:
    """
    Ordered, named map from parameter path (e.g.
    ``'stage3.cell1.conv2.w'``) to Tensor. Normalisation running
    statistics are stored here too, as tensors that do not require grad.
    """
    def __init__(self, tensors=None) -> None:
        self._tensors = OrderedDict()
        for name, tensor in (tensors or {}).items():
            self[name] = tensor

    def __getitem__(self, name) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ConfigError(f"unknown parameter '{name}'.") from None

    def __setitem__(self, name, tensor) -> None:
        if not isinstance(name, str):
            raise TypeError("parameter names should be strings.")
        if not isinstance(tensor, Tensor):
            raise TypeError("parameters should be Tensors.")
        current = self._tensors.get(name)
        if current is not None and current.shape != tensor.shape:
            raise ShapeError(f"'{name}' has shape {current.shape}, got "
                             f"{tensor.shape}.")
        self._tensors[name] = tensor

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list:
        return list(self._tensors)

    def trainable(self) -> list:
        """Names of the parameters the optimiser updates."""
        return [name for name in self._tensors if not is_buffer(name)]

    def set_buffer(self, name, array) -> None:
        """Replace a running statistic."""
        array = np.asarray(array)
        self[name] = Tensor(array, dtype=array.dtype)

    def copy(self) -> 'ModelParams':
        """A new map holding fresh tensors with the same values."""
        return ModelParams({
            name: Tensor(t.data, requires_grad=not is_buffer(name),
                         dtype=t.dtype)
            for name, t in self._tensors.items()})

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def count(self) -> int:
        """The number of trainable scalars."""
        return int(sum(self._tensors[name].size for name in self.trainable()))


def is_buffer(name) -> bool:
    """Whether a parameter path names a normalisation running statistic."""
    return name.endswith(BUFFER_SUFFIXES)


def _norm_shapes(prefix, channels, cfg) -> list:
    shapes = [(f'{prefix}.gamma', (channels,)),
              (f'{prefix}.beta', (channels,))]
    if cfg.norm == 'batch':
        shapes += [(f'{prefix}.running_mean', (channels,)),
                   (f'{prefix}.running_var', (channels,))]
    return shapes


def param_shapes(cfg) -> OrderedDict:
    """
    Every parameter path of a configuration with its shape, in the order
    :func:`build_backbone` creates them.

    Parameters
    ----------
    cfg : BackboneConfig
        The architecture.

    Returns
    -------
    collections.OrderedDict
        ``{name: shape}``.
    """
    if not isinstance(cfg, BackboneConfig):
        raise TypeError("'cfg' should be a BackboneConfig.")
    shapes = [('stem.conv.w', tuple(cfg.stem_kernel)
               + (cfg.input_channels, cfg.stem_channels))]
    shapes += _norm_shapes('stem.norm', cfg.stem_channels, cfg)

    for stage_name, cells in cfg.layout():
        for cell in cells:
            p = cell.name
            if cfg.block_style == 'bottleneck':
                shapes.append((f'{p}.conv1.w', (cell.temporal_kernel, 1, 1,
                                                cell.in_channels,
                                                cell.mid_channels)))
                shapes += _norm_shapes(f'{p}.norm1', cell.mid_channels, cfg)
                shapes.append((f'{p}.conv2.w', (1, 3, 3, cell.mid_channels,
                                                cell.mid_channels)))
                shapes += _norm_shapes(f'{p}.norm2', cell.mid_channels, cfg)
                shapes.append((f'{p}.conv3.w', (1, 1, 1, cell.mid_channels,
                                                cell.out_channels)))
                shapes += _norm_shapes(f'{p}.norm3', cell.out_channels, cfg)
            else:
                shapes.append((f'{p}.conv1.w', (1, 3, 3, cell.in_channels,
                                                cell.mid_channels)))
                shapes += _norm_shapes(f'{p}.norm1', cell.mid_channels, cfg)
                shapes.append((f'{p}.conv2.w', (3, 1, 1, cell.mid_channels,
                                                cell.out_channels)))
                shapes += _norm_shapes(f'{p}.norm2', cell.out_channels, cfg)
            if cell.projection:
                shapes.append((f'{p}.proj.w', (1, 1, 1, cell.in_channels,
                                               cell.out_channels)))
                shapes += _norm_shapes(f'{p}.proj_norm', cell.out_channels,
                                       cfg)
            if cfg.gating_enabled and cfg.gating_per_cell:
                shapes += [(f'{p}.gate.w', (cell.out_channels,) * 2),
                           (f'{p}.gate.b', (cell.out_channels,))]
        if cfg.gating_enabled and not cfg.gating_per_cell:
            channels = cells[-1].out_channels
            shapes += [(f'{stage_name}.gate.w', (channels, channels)),
                       (f'{stage_name}.gate.b', (channels,))]

    final = cfg.stages[-1].out_channels
    shapes += [('head.w', (final, cfg.num_classes)),
               ('head.b', (cfg.num_classes,))]
    return OrderedDict(shapes)


def build_backbone(cfg, seed=0) -> ModelParams:
    """
    Create freshly initialised parameters ("from scratch"): He-style
    fan-in scaled normal convolution kernels, zero biases and gating
    weights, unit/zero normalisation scale/shift and running statistics
    starting at mean 0, variance 1. Deterministic given the seed.

    Parameters
    ----------
    cfg : BackboneConfig
        The architecture.
    seed : int, optional
        Root seed; the ``'init/backbone'`` stream is used, defaults to 0.

    Raises
    ------
    TypeError
        If ``cfg`` is not a BackboneConfig.

    Returns
    -------
    ModelParams
        The parameters.
    """
    rng = rng_stream(seed, 'init/backbone')
    dtype = get_default_dtype()
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith('.w') and len(shape) == 5:
            fan_in = int(np.prod(shape[:4]))
            values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif name == 'head.w':
            values = rng.standard_normal(shape) * 0.01
        elif name.endswith(('.gamma', '.running_var')):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=not is_buffer(name),
                              dtype=dtype)
    logger.debug('built backbone with %d trainable scalars', params.count())
    return params


def feature_gate(x, p) -> Tensor:
    """
    Feature gating: re-weight the channels of ``x[B, T, H, W, C]`` by a
    sigmoid of a linear map of their average over time and space,
    ``y = sigmoid(mean_thw(x) @ W + b) * x``.

    Raises
    ------
    ShapeError
        If the channel count does not match ``p``.
    """
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f'feature_gate expects {p.weight.shape[0]} '
                         f'channels, got shape {x.shape}.')
    context = mean(x, axis=(1, 2, 3))
    gate = sigmoid(matmul(context, p.weight) + p.bias)
    return x * reshape(gate, (x.shape[0], 1, 1, 1, x.shape[-1]))


def _gating(params, prefix) -> GatingParams:
    return GatingParams(params[f'{prefix}.gate.w'], params[f'{prefix}.gate.b'])


def _normalize(params, cfg, prefix, h, training) -> Tensor:
    gamma, beta = params[f'{prefix}.gamma'], params[f'{prefix}.beta']
    if cfg.norm == 'group':
        groups = math.gcd(h.shape[-1], cfg.norm_groups)
        return group_norm(h, gamma, beta, groups)
    out, running_mean, running_var = batch_norm(
        h, gamma, beta, params[f'{prefix}.running_mean'].data,
        params[f'{prefix}.running_var'].data, training=training)
    if training:
        params.set_buffer(f'{prefix}.running_mean', running_mean)
        params.set_buffer(f'{prefix}.running_var', running_var)
    return out


def residual_cell(x, params, cell, cfg, training=False) -> Tensor:
    """
    One residual cell: a bottleneck chain ``[t x 1x1, 1 x 3x3, 1 x 1x1]``
    (or the factorized ``[1 x 3x3, 3 x 1x1]`` pair) with normalisation
    and ReLU between convolutions, a projection shortcut when channels or
    stride change, the additive skip and a final ReLU.

    Raises
    ------
    ShapeError
        If the input channels do not match ``cell``.
    """
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[-1] != cell.in_channels:
        raise ShapeError(f'{cell.name} expects {cell.in_channels} input '
                         f'channels, got shape {x.shape}.')
    p = cell.name
    stride = (1, cell.spatial_stride, cell.spatial_stride)
    if cfg.block_style == 'bottleneck':
        h = conv3d(x, params[f'{p}.conv1.w'])
        h = relu(_normalize(params, cfg, f'{p}.norm1', h, training))
        h = conv3d(h, params[f'{p}.conv2.w'], stride=stride)
        h = relu(_normalize(params, cfg, f'{p}.norm2', h, training))
        h = conv3d(h, params[f'{p}.conv3.w'])
        h = _normalize(params, cfg, f'{p}.norm3', h, training)
    else:
        h = conv3d(x, params[f'{p}.conv1.w'], stride=stride)
        h = relu(_normalize(params, cfg, f'{p}.norm1', h, training))
        h = conv3d(h, params[f'{p}.conv2.w'])
        h = _normalize(params, cfg, f'{p}.norm2', h, training)

    if cell.projection:
        shortcut = conv3d(x, params[f'{p}.proj.w'], stride=stride)
        shortcut = _normalize(params, cfg, f'{p}.proj_norm', shortcut,
                              training)
    else:
        shortcut = x
    return relu(h + shortcut)


def forward(params, cfg, x, training=False, return_activations=False):
    """
    Run the backbone on a video batch ``x[B, T, H, W, C_in]``.

    Gating is applied once per stage output (or after every cell when
    ``cfg.gating_per_cell``); the head is a global average pool over time
    and space followed by a dense layer.

    Parameters
    ----------
    params : ModelParams
        The parameters (running statistics are updated in training mode).
    cfg : BackboneConfig
        The architecture.
    x : Tensor or numpy.ndarray
        The input batch.
    training : bool, optional
        Use batch statistics and update running statistics, defaults to
        False.
    return_activations : bool, optional
        Also return the intermediate activations, defaults to False.

    Raises
    ------
    ShapeError
        If ``x`` is not 5-D or its channel count is wrong.
    ContractError
        If a stage changed the temporal extent.

    Returns
    -------
    Tensor or tuple
        The logits ``[B, num_classes]``, or ``(logits, activations)`` with
        activations keyed ``stem``, ``pool``, ``stage2`` ... and
        ``pooled``.
    """
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[-1] != cfg.input_channels:
        raise ShapeError(f'expected [B, T, H, W, {cfg.input_channels}] '
                         f'input, got {x.shape}.')
    frames = x.shape[1]
    activations = OrderedDict()

    h = conv3d(x, params['stem.conv.w'], stride=cfg.stem_stride)
    h = relu(_normalize(params, cfg, 'stem.norm', h, training))
    activations['stem'] = h
    h = maxpool_spatial(h, cfg.pool_kernel, cfg.pool_stride)
    activations['pool'] = h

    for stage_name, cells in cfg.layout():
        for cell in cells:
            h = residual_cell(h, params, cell, cfg, training)
            if cfg.gating_enabled and cfg.gating_per_cell:
                h = feature_gate(h, _gating(params, cell.name))
        if cfg.gating_enabled and not cfg.gating_per_cell:
            h = feature_gate(h, _gating(params, stage_name))
        # temporal extent is never reduced
        if h.shape[1] != frames:
            raise ContractError(f'{stage_name} changed the temporal extent '
                                f'from {frames} to {h.shape[1]}.')
        activations[stage_name] = h

    pooled = avgpool_global(h)
    activations['pooled'] = pooled
    logits = matmul(pooled, params['head.w']) + params['head.b']
    if return_activations:
        return logits, activations
    return logits


def stage_output_shapes(cfg, input_shape) -> OrderedDict:
    """
    Shape algebra of the backbone without running it.

    Parameters
    ----------
    cfg : BackboneConfig
        The architecture.
    input_shape : tuple of int
        ``(T, H, W, C_in)`` or ``(B, T, H, W, C_in)``.

    Returns
    -------
    collections.OrderedDict
        ``{block name: (T, H, W, C)}`` for ``input``, ``stem``, ``pool``
        and every stage.
    """
    shape = tuple(input_shape)[-4:]
    if shape[3] != cfg.input_channels:
        raise ShapeError(f'expected {cfg.input_channels} input channels.')
    frames, height, width = shape[:3]
    result = OrderedDict(input=shape)

    extents = [conv_output_geometry(size, k, s, 'same')[0] for size, k, s in
               zip((frames, height, width), cfg.stem_kernel, cfg.stem_stride)]
    result['stem'] = tuple(extents) + (cfg.stem_channels,)
    extents = [conv_output_geometry(size, k, s, 'same')[0] for size, k, s in
               zip(extents, cfg.pool_kernel, cfg.pool_stride)]
    result['pool'] = tuple(extents) + (cfg.stem_channels,)
    for stage_name, cells in cfg.layout():
        for cell in cells:
            stride = cell.spatial_stride
            extents = [extents[0]] + [
                conv_output_geometry(size, 3, stride, 'same')[0]
                for size in extents[1:]]
        result[stage_name] = tuple(extents) + (cells[-1].out_channels,)
    return result
