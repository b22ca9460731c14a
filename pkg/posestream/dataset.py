"""This module generates the procedural stick-figure action dataset and
prepares clips for the networks: augmentation, evaluation crop and
padding, stream construction (RGB, flow, pose) and dataset storage.

Every clip shows one articulated 17-keypoint figure performing a
parametric motion. ``wave_left`` and ``wave_right`` differ only in the
acting limb, ``jump`` and ``idle_with_moving_prop`` differ in motion, and
``idle_with_moving_prop`` is only recognisable from a background object.
"""

# import modules
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from skimage import io
from skimage.filters import gaussian
from skimage.transform import resize
from skimage.util import img_as_float32, img_as_ubyte
from tqdm import tqdm

from .exceptions import ConfigError, ContractError, IoError, ShapeError
from .optical_flow import FlowParams, clip_flow_stack
from .pose_render import (LIMBS, NECK, NUM_KEYPOINTS, Person, PoseFrame,
                          RenderSpec, capsule_mask, read_pose_jsonl,
                          render_clip, write_pose_jsonl)
from .utils import rng_stream

logger = logging.getLogger(__name__)

ACTIONS = ('jump', 'squat', 'wave_left', 'wave_right', 'run_in_place',
           'idle_with_moving_prop')
BACKGROUND_MODES = ('textured', 'plain', 'cluttered')
MODALITIES = ('rgb', 'flow', 'pose')
MIN_FRAME_SIZE = 32

# keypoints (x, y) of the rest pose, in figure heights relative to the hip
# centre; x grows to the figure's left (image right), y grows downwards
REST_POSE = np.array([
    [0.00, -0.44],                  # nose
    [0.02, -0.46], [-0.02, -0.46],  # eyes
    [0.04, -0.45], [-0.04, -0.45],  # ears
    [0.10, -0.32], [-0.10, -0.32],  # shoulders
    [0.14, -0.16], [-0.14, -0.16],  # elbows
    [0.16, -0.02], [-0.16, -0.02],  # wrists
    [0.06, 0.00], [-0.06, 0.00],    # hips
    [0.07, 0.24], [-0.07, 0.24],    # knees
    [0.07, 0.48], [-0.07, 0.48],    # ankles
])

# keypoints of the limb that defines each action
ACTING_KEYPOINTS = {
    'jump': tuple(range(NUM_KEYPOINTS)),
    'squat': (11, 12, 13, 14),
    'wave_left': (5, 7, 9),
    'wave_right': (6, 8, 10),
    'run_in_place': (11, 12, 13, 14, 15, 16),
}
PROP_ACTION = 'idle_with_moving_prop'


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Settings of the procedural dataset.

    Attributes
    ----------
    num_classes : int
        Number of actions, the first ``num_classes`` of ``ACTIONS``.
    clips_per_class : int
        Training clips per class.
    val_clips_per_class : int
        Validation clips per class.
    frame_size : tuple of int
        ``(height, width)`` in pixels.
    clip_length : int
        Frames seen by the networks (``T``).
    sequence_length : int, optional
        Frames generated per clip, at least ``clip_length``; training
        takes a random window of ``clip_length`` frames. Defaults to
        ``clip_length``.
    background_mode : str
        ``'textured'``, ``'plain'`` or ``'cluttered'``.
    pose_dropout_rate : float
        Fraction of frames whose detections are emptied.
    distractor_rate : float
        Probability that a clip carries a static distractor object.
    seed : int
        Root seed.
    """
    num_classes: int = 6
    clips_per_class: int = 100
    val_clips_per_class: int = 35
    frame_size: tuple = (64, 64)
    clip_length: int = 16
    sequence_length: Optional[int] = None
    background_mode: str = 'textured'
    pose_dropout_rate: float = 0.0
    distractor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= len(ACTIONS):
            raise ConfigError(f"'num_classes' should be between 1 and "
                              f"{len(ACTIONS)}.")
        if self.clips_per_class < 1 or self.val_clips_per_class < 0:
            raise ConfigError('clip counts should be positive.')
        if len(self.frame_size) != 2:
            raise ConfigError("'frame_size' should be (height, width).")
        if min(self.frame_size) < MIN_FRAME_SIZE:
            raise ConfigError(f'frames smaller than {MIN_FRAME_SIZE} px '
                              f'cannot hold the figure.')
        if self.clip_length < 2:
            raise ConfigError("'clip_length' should be at least 2.")
        if self.sequence_length is not None \
                and self.sequence_length < self.clip_length:
            raise ConfigError("'sequence_length' should be at least "
                              "'clip_length'.")
        if self.background_mode not in BACKGROUND_MODES:
            raise ConfigError(f"'background_mode' should be one of "
                              f"{BACKGROUND_MODES}.")
        for name in ('pose_dropout_rate', 'distractor_rate'):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"'{name}' should be between 0 and 1.")
        if self.seed < 0:
            raise ConfigError("'seed' should be non-negative.")

    @property
    def actions(self) -> tuple:
        return ACTIONS[:self.num_classes]

    @property
    def frames_per_clip(self) -> int:
        return self.sequence_length or self.clip_length


@dataclass
class ClipSample:
    """
    One labelled clip.

    Attributes
    ----------
    frames : numpy.ndarray
        ``[T, H, W, 3]`` float32 in [0, 1].
    label : int
        Class index.
    poses : list of PoseFrame
        One entry per frame.
    id : str
        Unique clip identifier.
    acting_boxes : numpy.ndarray, optional
        ``[T, 4]`` ground-truth ``(x0, y0, x1, y1)`` of the region that
        defines the class (generated clips only).
    """
    frames: np.ndarray
    label: int
    poses: list
    id: str
    acting_boxes: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ShapeError(f'frames should be [T, H, W, 3], got '
                             f'{self.frames.shape}.')
        self.poses = list(self.poses)
        if len(self.poses) != len(self.frames):
            raise ShapeError(f'{len(self.poses)} pose frames for '
                             f'{len(self.frames)} frames.')
        if self.label < 0:
            raise ValueError("'label' should be non-negative.")
        if self.acting_boxes is not None:
            self.acting_boxes = np.asarray(self.acting_boxes,
                                           dtype=np.float64)
            if self.acting_boxes.shape != (len(self.frames), 4):
                raise ShapeError('acting_boxes should be [T, 4].')

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple:
        return self.frames.shape[1:3]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _background(rng, spec) -> np.ndarray:
    height, width = spec.frame_size
    if spec.background_mode == 'plain':
        color = rng.uniform(0.2, 0.8, size=3)
        return np.tile(color, (height, width, 1)).astype(np.float32)
    noise = rng.random((height, width, 3))
    texture = gaussian(noise, sigma=max(1.0, min(height, width) / 16),
                       channel_axis=-1)
    low, high = texture.min(), texture.max()
    texture = 0.2 + 0.6 * (texture - low) / max(high - low, 1e-8)
    if spec.background_mode == 'cluttered':
        for _ in range(int(rng.integers(3, 7))):
            box_h = int(rng.integers(height // 10, height // 4 + 1))
            box_w = int(rng.integers(width // 10, width // 4 + 1))
            top = int(rng.integers(0, height - box_h + 1))
            left = int(rng.integers(0, width - box_w + 1))
            texture[top:top + box_h, left:left + box_w] = \
                rng.uniform(0.1, 0.9, size=3)
    return texture.astype(np.float32)


def action_pose(action, t, period, phase, amplitude) -> np.ndarray:
    """
    Keypoints ``[17, 2]`` of a figure performing ``action`` at frame
    ``t``, in figure heights relative to the hip centre.

    Parameters
    ----------
    action : str
        One of ``ACTIONS``.
    t : int
        Frame index.
    period : float
        Frames per motion cycle.
    phase : float
        Phase offset in cycles.
    amplitude : float
        Motion scale, 1 for the nominal motion.
    """
    if action not in ACTIONS:
        raise ValueError(f"'action' should be one of {ACTIONS}.")
    pose = REST_POSE.copy()
    angle = 2 * np.pi * (t / period + phase)
    wave = np.sin(angle)
    if action == 'jump':
        pose[:, 1] -= 0.15 * amplitude * max(0.0, wave)
    elif action == 'squat':
        depth = 0.075 * amplitude * (1 - np.cos(angle))
        pose[:13, 1] += depth
        pose[13, 0] += depth / 2
        pose[14, 0] -= depth / 2
        pose[13:15, 1] += depth / 2
    elif action in ('wave_left', 'wave_right'):
        side = 1.0 if action == 'wave_left' else -1.0
        elbow, wrist = (7, 9) if action == 'wave_left' else (8, 10)
        pose[elbow] = (side * 0.20, -0.40)
        pose[wrist] = (side * (0.22 + 0.08 * amplitude * wave), -0.55)
    elif action == 'run_in_place':
        left, right = max(0.0, wave), max(0.0, -wave)
        pose[13, 1] -= 0.12 * amplitude * left
        pose[15, 1] -= 0.15 * amplitude * left
        pose[14, 1] -= 0.12 * amplitude * right
        pose[16, 1] -= 0.15 * amplitude * right
        pose[9, 0] += 0.05 * amplitude * wave
        pose[10, 0] += 0.05 * amplitude * wave
    else:
        pose[:, 0] += 0.005 * wave
    return pose


def _draw_figure(canvas, keypoints, height_px, color) -> None:
    shape = canvas.shape[:2]
    radius = max(1.0, 0.025 * height_px)
    mask = np.zeros(shape, dtype=bool)
    for limb in LIMBS:
        if limb.b == NECK:
            continue
        mask |= capsule_mask(shape, keypoints[limb.a], keypoints[limb.b],
                             radius)
    neck = (keypoints[5] + keypoints[6]) / 2
    mask |= capsule_mask(shape, neck, keypoints[0], radius)
    mask |= capsule_mask(shape, keypoints[0], keypoints[0],
                         0.07 * height_px)
    canvas[mask] = color


def _box(points) -> np.ndarray:
    return np.array([points[:, 0].min(), points[:, 1].min(),
                     points[:, 0].max(), points[:, 1].max()])


def _prop_square(rng, spec, moving):
    height, width = spec.frame_size
    side = max(3, int(round(0.12 * min(height, width))))
    top = int(rng.integers(int(0.05 * height),
                           max(int(0.2 * height), int(0.05 * height) + 1)))
    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    period = float(rng.uniform(8, 14))
    phase = float(rng.uniform(0, 1))
    fixed_left = int(rng.integers(0, width - side + 1))

    def box_at(t):
        if moving:
            span = width - side
            left = int(round(span * (0.5 + 0.5 * np.sin(
                2 * np.pi * (t / period + phase)))))
        else:
            left = fixed_left
        return np.array([left, top, left + side - 1, top + side - 1],
                        dtype=np.float64)
    return box_at, color


def generate_clip(spec, label, clip_id, rng) -> ClipSample:
    """
    Render one clip of class ``label``.

    Parameters
    ----------
    spec : SyntheticSpec
        Dataset settings.
    label : int
        Class index into ``spec.actions``.
    clip_id : str
        Identifier of the clip.
    rng : numpy.random.Generator
        The clip's random stream.

    Returns
    -------
    ClipSample
        Frames, ground-truth poses and acting-region boxes.
    """
    action = spec.actions[label]
    height, width = spec.frame_size
    length = spec.frames_per_clip

    background = _background(rng, spec)
    figure_height = float(rng.uniform(0.5, 0.6)) * height
    center = np.array([rng.uniform(0.4, 0.6) * width,
                       rng.uniform(0.53, 0.57) * height])
    figure_color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    period = float(rng.uniform(8, 12))
    phase = float(rng.uniform(0, 1))
    amplitude = float(rng.uniform(0.8, 1.2))

    prop = None
    if action == PROP_ACTION:
        prop = _prop_square(rng, spec, moving=True)
    elif rng.random() < spec.distractor_rate:
        prop = _prop_square(rng, spec, moving=False)
    dropped = rng.random(length) < spec.pose_dropout_rate

    frames, poses, boxes = [], [], []
    for t in range(length):
        canvas = background.copy()
        if prop is not None:
            box_at, prop_color = prop
            x0, y0, x1, y1 = box_at(t).astype(int)
            canvas[y0:y1 + 1, x0:x1 + 1] = prop_color
        points = center + figure_height * action_pose(action, t, period,
                                                      phase, amplitude)
        _draw_figure(canvas, points, figure_height, figure_color)
        frames.append(canvas)

        inside = ((points[:, 0] >= 0) & (points[:, 0] <= width - 1)
                  & (points[:, 1] >= 0) & (points[:, 1] <= height - 1))
        clipped = np.column_stack([np.clip(points[:, 0], 0, width - 1),
                                   np.clip(points[:, 1], 0, height - 1)])
        keypoints = np.column_stack([clipped, inside.astype(np.float64)])
        margin = 0.07 * figure_height
        x0, y0, x1, y1 = _box(clipped)
        bbox = (max(x0 - margin, 0.0), max(y0 - margin, 0.0),
                min(x1 + margin, width - 1.0), min(y1 + margin, height - 1.0))
        if dropped[t]:
            poses.append(PoseFrame())
        else:
            poses.append(PoseFrame([Person(keypoints, bbox)]))

        if action == PROP_ACTION:
            boxes.append(prop[0](t))
        else:
            boxes.append(_box(clipped[list(ACTING_KEYPOINTS[action])]))

    return ClipSample(np.stack(frames), label, poses, clip_id,
                      acting_boxes=np.stack(boxes))


def _generate_split(spec, split, per_class, progress) -> list:
    ids = [(label, f'{split}-c{label}-{index:04d}')
           for label in range(spec.num_classes) for index in range(per_class)]
    clips = []
    for label, clip_id in tqdm(ids, desc=f'generate {split}', leave=False,
                               disable=not progress):
        rng = rng_stream(spec.seed, f'data/{clip_id}')
        clips.append(generate_clip(spec, label, clip_id, rng))
    return clips


def generate_synthetic(spec, progress=False) -> tuple:
    """
    Generate the training and validation splits.

    Parameters
    ----------
    spec : SyntheticSpec
        Dataset settings.
    progress : bool, optional
        Show progress bars.

    Returns
    -------
    tuple of list of ClipSample
        ``(train, val)``; exactly ``clips_per_class`` (resp.
        ``val_clips_per_class``) clips per class, with disjoint ids.
    """
    if not isinstance(spec, SyntheticSpec):
        raise TypeError("'spec' should be a SyntheticSpec.")
    train = _generate_split(spec, 'train', spec.clips_per_class, progress)
    val = _generate_split(spec, 'val', spec.val_clips_per_class, progress)
    logger.info('generated %d training and %d validation clips',
                len(train), len(val))
    return train, val


def acting_limb_box(clip) -> np.ndarray:
    """
    The per-frame box ``[T, 4]`` around the region that defines the class
    of a generated clip.

    Raises
    ------
    ContractError
        If the clip carries no ground-truth boxes.
    """
    if clip.acting_boxes is None:
        raise ContractError(f'clip {clip.id} has no acting-region boxes.')
    return clip.acting_boxes.copy()


# ---------------------------------------------------------------------------
# augmentation and evaluation preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """
    Ranges of the random training transform.

    Attributes
    ----------
    mirror_prob : float
        Probability of a horizontal mirror.
    brightness : float
        Brightness offsets are drawn from ``[-brightness, brightness]``.
    contrast : tuple of float
        Contrast scales are drawn from this range.
    crop_fraction : float
        Side of the random crop relative to the (resized) shorter side.
    resize_shorter : int, optional
        Resize frames so their shorter side has this length first.
    """
    mirror_prob: float = 0.5
    brightness: float = 0.125
    contrast: tuple = (0.8, 1.2)
    crop_fraction: float = 0.875
    resize_shorter: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.mirror_prob <= 1:
            raise ConfigError("'mirror_prob' should be between 0 and 1.")
        if self.brightness < 0:
            raise ConfigError("'brightness' should be non-negative.")
        low, high = self.contrast
        if not 0 < low <= high:
            raise ConfigError("'contrast' should be a positive range.")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigError("'crop_fraction' should be in (0, 1].")
        if self.resize_shorter is not None and self.resize_shorter < 2:
            raise ConfigError("'resize_shorter' should be at least 2.")


@dataclass(frozen=True)
class AugmentParams:
    """One sampled transform; applied identically to frames, poses and
    flow."""
    mirror: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    crop_top: int = 0
    crop_left: int = 0
    crop_size: Optional[tuple] = None
    temporal_start: int = 0
    length: Optional[int] = None
    resize_shape: Optional[tuple] = None


def _scaled_shape(shape, shorter) -> tuple:
    height, width = shape
    scale = shorter / min(height, width)
    return (max(1, int(round(height * scale))),
            max(1, int(round(width * scale))))


def crop_size(shape, fraction) -> tuple:
    """Side lengths of a square-ish crop of ``fraction`` of the shorter
    side, bounded by the frame."""
    side = max(1, int(round(fraction * min(shape))))
    return (min(side, shape[0]), min(side, shape[1]))


def sample_augmentation(clip, rng, cfg=None, length=None) -> AugmentParams:
    """
    Draw a random transform for ``clip``.

    Parameters
    ----------
    clip : ClipSample
        The clip to transform.
    rng : numpy.random.Generator
        The clip's augmentation stream.
    cfg : AugmentConfig, optional
        The ranges, defaults to ``AugmentConfig()``.
    length : int, optional
        Frames to keep; a random temporal window is taken when the clip
        is longer. Defaults to the clip length.
    """
    cfg = AugmentConfig() if cfg is None else cfg
    length = clip.num_frames if length is None else int(length)
    if not 1 <= length <= clip.num_frames:
        raise ContractError(f'cannot take {length} frames from a clip of '
                            f'{clip.num_frames}.')
    start = int(rng.integers(0, clip.num_frames - length + 1))
    shape = clip.frame_shape
    resize_shape = None
    if cfg.resize_shorter is not None:
        resize_shape = _scaled_shape(shape, cfg.resize_shorter)
        shape = resize_shape
    size = crop_size(shape, cfg.crop_fraction)
    top = int(rng.integers(0, shape[0] - size[0] + 1))
    left = int(rng.integers(0, shape[1] - size[1] + 1))
    return AugmentParams(
        mirror=bool(rng.random() < cfg.mirror_prob),
        brightness=float(rng.uniform(-cfg.brightness, cfg.brightness)),
        contrast=float(rng.uniform(*cfg.contrast)),
        crop_top=top, crop_left=left, crop_size=size,
        temporal_start=start, length=length, resize_shape=resize_shape)


def _transform_person(person, scale, offset, mirror_width,
                      frame_size) -> Person:
    keypoints = person.keypoints.copy()
    x0, y0, x1, y1 = person.bbox
    sx, sy = scale
    # pixel centres sit at integer coordinates
    keypoints[:, 0] = (keypoints[:, 0] + 0.5) * sx - 0.5
    keypoints[:, 1] = (keypoints[:, 1] + 0.5) * sy - 0.5
    bbox = ((x0 + 0.5) * sx - 0.5, (y0 + 0.5) * sy - 0.5,
            (x1 + 0.5) * sx - 0.5, (y1 + 0.5) * sy - 0.5)
    moved = Person(keypoints, bbox)
    if mirror_width is not None:
        moved = moved.mirrored(mirror_width)
    keypoints = moved.keypoints.copy()
    top, left = offset
    keypoints[:, 0] -= left
    keypoints[:, 1] -= top
    # keypoints left outside the pixel area are no longer visible
    height, width = frame_size
    outside = ((keypoints[:, 0] < -0.5) | (keypoints[:, 0] > width - 0.5)
               | (keypoints[:, 1] < -0.5) | (keypoints[:, 1] > height - 0.5))
    keypoints[outside, 2] = 0.0
    x0, y0, x1, y1 = moved.bbox
    return Person(keypoints, (x0 - left, y0 - top, x1 - left, y1 - top))


def _transform_boxes(boxes, scale, offset, mirror_width) -> np.ndarray:
    boxes = boxes.copy()
    sx, sy = scale
    boxes[:, [0, 2]] = (boxes[:, [0, 2]] + 0.5) * sx - 0.5
    boxes[:, [1, 3]] = (boxes[:, [1, 3]] + 0.5) * sy - 0.5
    if mirror_width is not None:
        x0 = (mirror_width - 1) - boxes[:, 2]
        x1 = (mirror_width - 1) - boxes[:, 0]
        boxes[:, 0], boxes[:, 2] = x0, x1
    top, left = offset
    boxes[:, [0, 2]] -= left
    boxes[:, [1, 3]] -= top
    return boxes


def apply_augmentation(clip, params, flow=None):
    """
    Apply a sampled transform.

    The order is: temporal window, resize, mirror, spatial crop, then
    brightness and contrast on the frames only (values clamped to
    [0, 1]). Poses, acting boxes and ``flow`` follow the same spatial
    transform; mirroring negates the horizontal flow and resizing
    rescales the flow vectors.

    Parameters
    ----------
    clip : ClipSample
        The clip.
    params : AugmentParams
        The transform.
    flow : numpy.ndarray, optional
        ``[T, H, W, 2]`` flow of the clip (normalised by ``flow_clip``).

    Returns
    -------
    ClipSample or tuple
        The transformed clip, or ``(clip, flow)`` when ``flow`` is given.
    """
    length = clip.num_frames if params.length is None else params.length
    window = slice(params.temporal_start, params.temporal_start + length)
    frames = clip.frames[window]
    poses = clip.poses[window]
    boxes = None if clip.acting_boxes is None else clip.acting_boxes[window]
    if flow is not None:
        flow = np.asarray(flow, dtype=np.float32)
        if flow.shape[:3] != clip.frames.shape[:3]:
            raise ShapeError(f'flow {flow.shape} does not match frames '
                             f'{clip.frames.shape}.')
        flow = flow[window]

    height, width = frames.shape[1:3]
    scale = (1.0, 1.0)
    if params.resize_shape is not None \
            and tuple(params.resize_shape) != (height, width):
        new_h, new_w = params.resize_shape
        scale = (new_w / width, new_h / height)
        frames = resize(frames, (len(frames), new_h, new_w, 3), order=1,
                        anti_aliasing=False, preserve_range=True)
        if flow is not None:
            flow = resize(flow, (len(flow), new_h, new_w, 2), order=1,
                          anti_aliasing=False, preserve_range=True)
            flow = flow * np.array(scale, dtype=np.float64)
            flow = np.clip(flow, -1.0, 1.0)
        height, width = new_h, new_w

    mirror_width = width if params.mirror else None
    if params.mirror:
        frames = frames[:, :, ::-1]
        if flow is not None:
            flow = flow[:, :, ::-1] * np.array([-1.0, 1.0])

    size = params.crop_size or (height, width)
    top, left = params.crop_top, params.crop_left
    if top + size[0] > height or left + size[1] > width:
        raise ContractError(f'crop {size} at ({top}, {left}) leaves the '
                            f'{height}x{width} frame.')
    frames = frames[:, top:top + size[0], left:left + size[1]]
    if flow is not None:
        flow = flow[:, top:top + size[0], left:left + size[1]]

    frames = np.clip(frames * params.contrast
                     + (1.0 - params.contrast) * frames.mean()
                     + params.brightness, 0.0, 1.0)

    moved = [PoseFrame([_transform_person(p, scale, (top, left),
                                          mirror_width, size)
                        for p in frame.persons]) for frame in poses]
    if boxes is not None:
        boxes = _transform_boxes(boxes, scale, (top, left), mirror_width)
    result = ClipSample(np.ascontiguousarray(frames, dtype=np.float32),
                        clip.label, moved, clip.id, acting_boxes=boxes)
    if flow is None:
        return result
    return result, np.ascontiguousarray(flow, dtype=np.float32)


def augment(clip, rng, cfg=None, length=None, flow=None):
    """
    Random training transform: mirror, brightness, contrast, random crop
    (and a random temporal window when ``length`` is shorter than the
    clip). See :func:`sample_augmentation` and
    :func:`apply_augmentation`.
    """
    params = sample_augmentation(clip, rng, cfg, length)
    return apply_augmentation(clip, params, flow)


def eval_crop_and_pad(clip, target_length, crop_fraction=0.875, pad='last',
                      flow=None):
    """
    Deterministic evaluation preprocessing: central spatial crop of
    ``crop_fraction`` of the shorter side, central temporal window when
    the clip is longer than ``target_length``, and padding by repeating
    the last (or first) frame when it is shorter.

    Parameters
    ----------
    clip : ClipSample
        The clip.
    target_length : int
        Frames of the result.
    crop_fraction : float, optional
        Crop side relative to the shorter side, 1 keeps the whole frame.
    pad : str, optional
        ``'last'`` (default) or ``'first'``.
    flow : numpy.ndarray, optional
        ``[T, H, W, 2]`` flow transformed alongside.

    Returns
    -------
    ClipSample or tuple
        The clip, or ``(clip, flow)`` when ``flow`` is given.
    """
    if pad not in ('last', 'first'):
        raise ValueError("'pad' should be 'last' or 'first'.")
    if target_length < 1:
        raise ValueError("'target_length' should be positive.")
    height, width = clip.frame_shape
    size = crop_size((height, width), crop_fraction)
    top = (height - size[0]) // 2
    left = (width - size[1]) // 2

    length = min(clip.num_frames, target_length)
    start = (clip.num_frames - length) // 2
    params = AugmentParams(crop_top=top, crop_left=left, crop_size=size,
                           temporal_start=start, length=length)
    result = apply_augmentation(clip, params, flow)
    if flow is not None:
        result, flow = result

    missing = target_length - result.num_frames
    if missing > 0:
        index = [0] * missing if pad == 'first' else [-1] * missing
        if pad == 'first':
            order = index + list(range(result.num_frames))
        else:
            order = list(range(result.num_frames)) + index
        boxes = None if result.acting_boxes is None \
            else result.acting_boxes[order]
        result = ClipSample(result.frames[order], result.label,
                            [result.poses[i] for i in order], result.id,
                            acting_boxes=boxes)
        if flow is not None:
            flow = flow[order]
    return result if flow is None else (result, flow)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

def make_stream(clip, modality, render_spec=None, flow_params=None,
                flow=None) -> np.ndarray:
    """
    The network input of one modality.

    Parameters
    ----------
    clip : ClipSample
        The clip.
    modality : str
        ``'rgb'`` (the frames), ``'pose'`` (skeletons rendered with
        ``render_spec``) or ``'flow'`` (TV-L1 flow, last pair duplicated).
    render_spec : RenderSpec, optional
        Pose rendering variant.
    flow_params : FlowParams, optional
        Flow solver settings.
    flow : numpy.ndarray, optional
        Pre-computed ``[T, H, W, 2]`` flow returned as is.

    Returns
    -------
    numpy.ndarray
        ``[T, H, W, C]`` float32, ``C`` = 3 for rgb and pose, 2 for flow.
    """
    if modality not in MODALITIES:
        raise ValueError(f"'modality' should be one of {MODALITIES}.")
    if modality == 'rgb':
        return clip.frames
    if modality == 'pose':
        spec = RenderSpec() if render_spec is None else render_spec
        return render_clip(clip.frames, clip.poses, spec).astype(np.float32)
    if flow is not None:
        return np.asarray(flow, dtype=np.float32)
    return clip_flow_stack(clip.frames, flow_params, pad_to_length=True)


class StreamBuilder:
    """
    This class builds network inputs for clips and memoises flow per clip
    id. Flow is computed once on the stored clip; augmented inputs
    transform the memoised flow instead of recomputing it.

    Attributes
    ----------
    render_spec : RenderSpec, readonly
        Pose rendering variant.
    flow_params : FlowParams, readonly
        Flow solver settings.
    cache_hits : int, readonly
        Flow requests answered from the memo.
    cached_flows : int, readonly
        Clips whose flow is held, at most ``flow_cache_size``; the least
        recently used flow is dropped first.
    """
    def __init__(self, render_spec=None, flow_params=None,
                 augment_cfg=None, flow_cache_size=256) -> None:
        if isinstance(flow_cache_size, bool) \
                or not isinstance(flow_cache_size, int):
            raise TypeError("'flow_cache_size' should be an integer.")
        if flow_cache_size < 1:
            raise ValueError("'flow_cache_size' should be positive.")
        self._render_spec = RenderSpec() if render_spec is None \
            else render_spec
        self._flow_params = FlowParams() if flow_params is None \
            else flow_params
        self._augment_cfg = AugmentConfig() if augment_cfg is None \
            else augment_cfg
        self._flows = OrderedDict()
        self._flow_cache_size = flow_cache_size
        self._hits = 0

    @property
    def render_spec(self) -> RenderSpec:
        return self._render_spec

    @property
    def flow_params(self) -> FlowParams:
        return self._flow_params

    @property
    def cache_hits(self) -> int:
        return self._hits

    @property
    def cached_flows(self) -> int:
        return len(self._flows)

    def flow_for(self, clip) -> np.ndarray:
        """The memoised ``[T, H, W, 2]`` flow of a stored clip."""
        if clip.id in self._flows:
            self._hits += 1
            self._flows.move_to_end(clip.id)
            return self._flows[clip.id]
        flow = clip_flow_stack(clip.frames, self._flow_params,
                               pad_to_length=True)
        self._flows[clip.id] = flow
        if len(self._flows) > self._flow_cache_size:
            self._flows.popitem(last=False)
        return flow

    def _build(self, clip, modality, flow) -> np.ndarray:
        return make_stream(clip, modality, self._render_spec,
                           self._flow_params, flow)

    @property
    def augment_cfg(self) -> AugmentConfig:
        return self._augment_cfg

    def sample(self, clip, rng, length=None) -> AugmentParams:
        """Draw a transform for ``clip`` from the builder's ranges."""
        return sample_augmentation(clip, rng, self._augment_cfg, length)

    def input_for(self, clip, modality, params) -> tuple:
        """
        The input of ``modality`` under a given transform; every modality
        of one sample shares the same transform.

        Returns
        -------
        tuple
            ``(stream, transformed clip)``.
        """
        flow = self.flow_for(clip) if modality == 'flow' else None
        moved = apply_augmentation(clip, params, flow)
        if flow is not None:
            moved, flow = moved
        return self._build(moved, modality, flow), moved

    def train_input(self, clip, modality, rng, length=None) -> tuple:
        """
        An augmented input for training.

        Returns
        -------
        tuple
            ``(stream, transformed clip)``.
        """
        return self.input_for(clip, modality, self.sample(clip, rng, length))

    def eval_input(self, clip, modality, length, pad='last') -> tuple:
        """
        A deterministic evaluation input.

        Returns
        -------
        tuple
            ``(stream, transformed clip)``.
        """
        flow = self.flow_for(clip) if modality == 'flow' else None
        moved = eval_crop_and_pad(clip, length,
                                  self._augment_cfg.crop_fraction, pad, flow)
        if flow is not None:
            moved, flow = moved
        return self._build(moved, modality, flow), moved


def iterate_batches(clips, batch_size, rng=None, drop_last=False):
    """
    Yield lists of clips of at most ``batch_size``, shuffled when ``rng``
    is given.
    """
    if batch_size < 1:
        raise ValueError("'batch_size' should be positive.")
    order = np.arange(len(clips))
    if rng is not None:
        order = rng.permutation(len(clips))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            return
        yield [clips[i] for i in chunk]


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------

MANIFEST = 'manifest.csv'
MANIFEST_COLUMNS = ['id', 'label', 'split', 'path', 'num_frames']


def save_clip(clip, directory) -> Path:
    """Write a clip as PNG frames plus ``poses.jsonl`` (and
    ``acting_boxes.csv`` when present)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(clip.frames):
            io.imsave(directory / f'frame_{t:04d}.png',
                      img_as_ubyte(np.clip(frame, 0.0, 1.0)),
                      check_contrast=False)
        if clip.acting_boxes is not None:
            pd.DataFrame(clip.acting_boxes,
                         columns=['x0', 'y0', 'x1', 'y1']).to_csv(
                directory / 'acting_boxes.csv', index=False)
    except OSError as err:
        raise IoError(f'cannot write clip {clip.id}: {err}') from err
    write_pose_jsonl(clip.poses, directory / 'poses.jsonl')
    return directory


def read_frames(directory) -> np.ndarray:
    """Read the ``*.png`` frames of a directory in name order as
    ``[T, H, W, 3]`` float32."""
    directory = Path(directory)
    paths = sorted(directory.glob('*.png'))
    if not paths:
        raise IoError(f'no PNG frames in {directory}.')
    try:
        frames = [img_as_float32(io.imread(p)) for p in paths]
    except (OSError, ValueError) as err:
        raise IoError(f'cannot read frames in {directory}: {err}') from err
    frames = [f[..., :3] if f.ndim == 3 else np.repeat(f[..., None], 3, -1)
              for f in frames]
    return np.stack(frames)


def load_clip(directory, label, clip_id) -> ClipSample:
    directory = Path(directory)
    frames = read_frames(directory)
    pose_path = directory / 'poses.jsonl'
    if pose_path.exists():
        poses = read_pose_jsonl(pose_path, num_frames=len(frames))
    else:
        poses = [PoseFrame() for _ in frames]
    boxes = None
    box_path = directory / 'acting_boxes.csv'
    if box_path.exists():
        boxes = pd.read_csv(box_path)[['x0', 'y0', 'x1', 'y1']].to_numpy()
    return ClipSample(frames, int(label), poses, clip_id,
                      acting_boxes=boxes)


def save_dataset(root, train, val, progress=False) -> Path:
    """
    Write both splits under ``root``: ``<split>/<id>/`` clip directories
    and a ``manifest.csv`` with one record per clip.

    Returns
    -------
    pathlib.Path
        The manifest path.
    """
    root = Path(root)
    records = []
    for split, clips in (('train', train), ('val', val)):
        for clip in tqdm(clips, desc=f'save {split}', leave=False,
                         disable=not progress):
            relative = Path(split) / clip.id
            save_clip(clip, root / relative)
            records.append({'id': clip.id, 'label': clip.label,
                            'split': split, 'path': relative.as_posix(),
                            'num_frames': clip.num_frames})
    manifest = root / MANIFEST
    try:
        pd.DataFrame(records, columns=MANIFEST_COLUMNS).to_csv(manifest,
                                                               index=False)
    except OSError as err:
        raise IoError(f'cannot write {manifest}: {err}') from err
    logger.info('saved %d clips to %s', len(records), root)
    return manifest


def load_dataset(root, progress=False) -> tuple:
    """
    Read a dataset written by :func:`save_dataset`.

    Raises
    ------
    IoError
        If the manifest is missing or malformed, or a clip disagrees with
        it.

    Returns
    -------
    tuple of list of ClipSample
        ``(train, val)``.
    """
    root = Path(root)
    try:
        manifest = pd.read_csv(root / MANIFEST)
    except (OSError, ValueError) as err:
        raise IoError(f'cannot read {root / MANIFEST}: {err}') from err
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise IoError(f'{root / MANIFEST} misses columns {sorted(missing)}.')

    splits = {'train': [], 'val': []}
    for record in tqdm(manifest.itertuples(index=False), total=len(manifest),
                       desc='load', leave=False, disable=not progress):
        clip = load_clip(root / record.path, record.label, record.id)
        if clip.num_frames != record.num_frames:
            raise IoError(f'clip {record.id} has {clip.num_frames} frames, '
                          f'the manifest says {record.num_frames}.')
        splits.setdefault(record.split, []).append(clip)
    return splits['train'], splits['val']


def with_poses(clip, poses) -> ClipSample:
    """A copy of ``clip`` with other detections (e.g. ingested JSONL)."""
    return replace(clip, poses=list(poses))
