"""Grad-CAM response maps over backbone stage activations, with heat-map
overlays and montages for inspection.
"""

# import modules
import logging
from dataclasses import dataclass

import numpy as np
from matplotlib import colormaps
from skimage.transform import resize
from skimage.util import montage as skimage_montage

from .backbone import forward
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor, get_tape, mul, tensor_sum

logger = logging.getLogger(__name__)

DEFAULT_COLORMAP = 'jet'


@dataclass
class ResponseMap:
    """
    A class response map.

    Attributes
    ----------
    map : numpy.ndarray
        ``[T, h, w]`` values in [0, 1] (max-normalised per clip).
    class_index : int
        The explained class.
    stage : str
        The stage whose activations were used.
    """
    map: np.ndarray
    class_index: int
    stage: str

    @property
    def shape(self) -> tuple:
        return self.map.shape


def cam_from_activations(activations, gradients) -> np.ndarray:
    """
    Combine activations ``A[T, h, w, C]`` and the score gradients with
    respect to them: channel weights are the gradients averaged over time
    and space, the map is ``relu(sum_c w_c * A_c)`` divided by its
    maximum (an all-zero map stays zero).

    Returns
    -------
    numpy.ndarray
        ``[T, h, w]`` in [0, 1].
    """
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 4:
        raise ShapeError(f'activations {activations.shape} and gradients '
                         f'{gradients.shape} should be equal [T, h, w, C].')
    weights = gradients.mean(axis=(0, 1, 2))
    cam = np.maximum(activations @ weights, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float32)


def grad_cam(params, cfg, clip, class_index=None, stage=None) -> ResponseMap:
    """
    Grad-CAM of one clip.

    The backbone runs in evaluation mode; the score of ``class_index`` is
    back-propagated to the activations of ``stage``.

    Parameters
    ----------
    params : ModelParams
        The model.
    cfg : BackboneConfig
        The architecture.
    clip : numpy.ndarray or Tensor
        ``[T, H, W, C]`` (or a batch of one).
    class_index : int, optional
        Defaults to the predicted class.
    stage : str, optional
        Defaults to the last stage.

    Raises
    ------
    ConfigError
        If ``stage`` is not a stage of ``cfg`` or the class is out of range.

    Returns
    -------
    ResponseMap
        The normalised map ``[T, h, w]``.
    """
    stage = cfg.stage_names[-1] if stage is None else stage
    if stage not in cfg.stage_names:
        raise ConfigError(f"unknown stage '{stage}', expected one of "
                          f"{cfg.stage_names}.")
    x = clip.data if isinstance(clip, Tensor) else np.asarray(clip)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[0] != 1:
        raise ShapeError(f'grad_cam explains one clip, got {x.shape}.')

    tape = get_tape()
    try:
        logits, activations = forward(params, cfg, x, training=False,
                                      return_activations=True)
        if class_index is None:
            class_index = int(logits.data[0].argmax())
        if not 0 <= class_index < cfg.num_classes:
            raise ConfigError(f'class {class_index} outside '
                              f'[0, {cfg.num_classes}).')
        one_hot = np.zeros(logits.shape, dtype=logits.dtype)
        one_hot[0, class_index] = 1
        score = tensor_sum(mul(logits, one_hot))
        target = activations[stage]
        if score.requires_grad:
            score.backward()
        gradients = target.grad
        if gradients is None:
            gradients = np.zeros(target.shape, dtype=target.dtype)
        cam = cam_from_activations(target.data[0], gradients[0])
    finally:
        tape.clear()
        params.zero_grad()
    logger.debug('grad-cam of class %d at %s', class_index, stage)
    return ResponseMap(cam, class_index, stage)


def upsample_map(cam, frame_shape) -> np.ndarray:
    """Bilinear upsampling of ``[T, h, w]`` to ``[T, H, W]``."""
    cam = np.asarray(cam.map if isinstance(cam, ResponseMap) else cam,
                     dtype=np.float64)
    height, width = frame_shape
    return resize(cam, (cam.shape[0], height, width), order=1,
                  mode='edge', anti_aliasing=False, preserve_range=True)


def overlay(cam, frames, alpha=0.5, colormap=DEFAULT_COLORMAP) -> np.ndarray:
    """
    Blend a colourised response map over frames,
    ``(1 - alpha) * frames + alpha * colormap(map)``.

    Parameters
    ----------
    cam : ResponseMap or numpy.ndarray
        ``[T, h, w]`` map.
    frames : numpy.ndarray
        ``[T, H, W, 3]`` in [0, 1].
    alpha : float, optional
        Blend weight of the heat map, defaults to 0.5.
    colormap : str, optional
        A matplotlib colormap name, defaults to ``'jet'``.

    Returns
    -------
    numpy.ndarray
        ``[T, H, W, 3]`` float32.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f'frames should be [T, H, W, 3], got '
                         f'{frames.shape}.')
    heat = upsample_map(cam, frames.shape[1:3])
    if heat.shape[0] != frames.shape[0]:
        raise ShapeError(f'{heat.shape[0]} map frames for '
                         f'{frames.shape[0]} frames.')
    colors = colormaps[colormap](np.clip(heat, 0.0, 1.0))[..., :3]
    return ((1 - alpha) * frames + alpha * colors).astype(np.float32)


def mass_fraction(cam, boxes, frame_shape) -> tuple:
    """
    The share of the (upsampled) response mass inside per-frame boxes,
    and the share a uniform map would have.

    Parameters
    ----------
    cam : ResponseMap or numpy.ndarray
        ``[T, h, w]`` map.
    boxes : numpy.ndarray
        ``[T, 4]`` boxes ``(x0, y0, x1, y1)`` in frame pixels.
    frame_shape : tuple of int
        ``(H, W)``.

    Returns
    -------
    tuple of float
        ``(fraction, uniform_fraction)``; the fraction is 0 for an
        all-zero map.
    """
    heat = upsample_map(cam, frame_shape)
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape != (heat.shape[0], 4):
        raise ShapeError(f'boxes should be [{heat.shape[0]}, 4].')
    height, width = frame_shape
    rows, cols = np.mgrid[0:height, 0:width]
    inside = np.stack([(cols >= x0) & (cols <= x1) & (rows >= y0)
                       & (rows <= y1) for x0, y0, x1, y1 in boxes])
    total = heat.sum()
    fraction = float(heat[inside].sum() / total) if total > 0 else 0.0
    return fraction, float(inside.mean())


def montage(frames, grid_shape=None) -> np.ndarray:
    """Tile ``[T, H, W, 3]`` frames into one image."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ShapeError(f'frames should be [T, H, W, 3], got '
                         f'{frames.shape}.')
    # one fill value per channel
    return skimage_montage(frames, grid_shape=grid_shape,
                           fill=(0.0,) * frames.shape[-1],
                           channel_axis=-1)
