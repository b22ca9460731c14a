"""This module rasterizes human pose skeletons onto video frames, producing
the pose input stream.

Keypoints follow the 17-point COCO order. Limbs are drawn as solid
capsules (``marker='bar'``) or as filled discs at both endpoints
(``marker='dot'``), with hard edges, in one colour per limb group
(``palette='coarse6'``) or per limb (``palette='fine13'``).
"""

# import modules
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from matplotlib.colors import hsv_to_rgb

from .exceptions import ConfigError, ContractError, IoError, ShapeError

logger = logging.getLogger(__name__)

KEYPOINT_NAMES = (
    'nose', 'left_eye', 'right_eye', 'left_ear', 'right_ear',
    'left_shoulder', 'right_shoulder', 'left_elbow', 'right_elbow',
    'left_wrist', 'right_wrist', 'left_hip', 'right_hip',
    'left_knee', 'right_knee', 'left_ankle', 'right_ankle')
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
# index of each keypoint's left/right counterpart
COCO_FLIP_INDEX = (0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15)
# virtual keypoint: midpoint of the shoulders
NECK = NUM_KEYPOINTS

COARSE_GROUPS = ('left_arm', 'right_arm', 'body', 'head', 'left_leg',
                 'right_leg')
BACKGROUNDS = ('rgb_frame', 'black')
MARKERS = ('bar', 'dot')
PALETTES = ('coarse6', 'fine13')


@dataclass(frozen=True)
class Limb:
    """A skeleton segment between two (extended) keypoint indices."""
    a: int
    b: int
    group: str
    fine_color: int


LIMBS = (
    Limb(5, 7, 'left_arm', 0),     # left upper arm
    Limb(7, 9, 'left_arm', 1),     # left forearm
    Limb(6, 8, 'right_arm', 2),    # right upper arm
    Limb(8, 10, 'right_arm', 3),   # right forearm
    Limb(11, 13, 'left_leg', 4),   # left thigh
    Limb(13, 15, 'left_leg', 5),   # left shin
    Limb(12, 14, 'right_leg', 6),  # right thigh
    Limb(14, 16, 'right_leg', 7),  # right shin
    Limb(5, 6, 'body', 8),         # shoulder bar
    Limb(11, 12, 'body', 9),       # hip bar
    Limb(5, 11, 'body', 10),       # left torso side
    Limb(6, 12, 'body', 11),       # right torso side
    Limb(0, NECK, 'head', 12),     # head
)

COARSE_COLORS = {
    'left_arm': (1.0, 0.0, 0.0),
    'right_arm': (0.0, 1.0, 0.0),
    'body': (0.0, 0.0, 1.0),
    'head': (1.0, 1.0, 0.0),
    'left_leg': (1.0, 0.0, 1.0),
    'right_leg': (0.0, 1.0, 1.0),
}
# 13 hues evenly spaced around the colour wheel, full saturation and value
FINE_COLORS = tuple(
    tuple(float(c) for c in hsv_to_rgb((i / 13.0, 1.0, 1.0)))
    for i in range(13))


@dataclass
class Person:
    """
    One detected person: 17 keypoints ``(x, y, confidence)`` in pixels and
    a bounding box ``(x0, y0, x1, y1)``. NaN coordinates are allowed (the
    limbs touching them are skipped when rendering).
    """
    keypoints: np.ndarray
    bbox: tuple

    def __post_init__(self) -> None:
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.shape != (NUM_KEYPOINTS, 3):
            raise ShapeError(f'a person needs {NUM_KEYPOINTS} keypoints of '
                             f'(x, y, confidence), got '
                             f'{self.keypoints.shape}.')
        self.bbox = tuple(float(v) for v in self.bbox)
        if len(self.bbox) != 4:
            raise ValueError("'bbox' should be (x0, y0, x1, y1).")
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValueError(f"'bbox' {self.bbox} is not well-formed.")
        conf = self.keypoints[:, 2]
        conf = conf[np.isfinite(conf)]
        if (conf < 0).any() or (conf > 1).any():
            raise ValueError('keypoint confidences should be in [0, 1].')

    @property
    def diagonal(self) -> float:
        """The length of the bounding box diagonal in pixels."""
        x0, y0, x1, y1 = self.bbox
        return float(np.hypot(x1 - x0, y1 - y0))

    def mirrored(self, width) -> 'Person':
        """
        Reflect horizontally in a frame ``width`` pixels wide; left and
        right keypoints swap places.
        """
        keypoints = self.keypoints[list(COCO_FLIP_INDEX)].copy()
        keypoints[:, 0] = (width - 1) - keypoints[:, 0]
        x0, y0, x1, y1 = self.bbox
        return Person(keypoints, ((width - 1) - x1, y0, (width - 1) - x0, y1))


@dataclass
class PoseFrame:
    """The persons detected in one frame (possibly none)."""
    persons: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.persons = list(self.persons)
        for person in self.persons:
            if not isinstance(person, Person):
                raise TypeError("'persons' should contain Person objects.")

    @property
    def empty(self) -> bool:
        return len(self.persons) == 0

    def mirrored(self, width) -> 'PoseFrame':
        return PoseFrame([p.mirrored(width) for p in self.persons])


@dataclass(frozen=True)
class RenderSpec:
    """
    Pose rendering variant.

    Attributes
    ----------
    background : str
        ``'rgb_frame'`` (draw over the video frame) or ``'black'``.
    marker : str
        ``'bar'`` (limb segments) or ``'dot'`` (discs at limb endpoints).
    palette : str
        ``'coarse6'`` (one colour per limb group) or ``'fine13'``.
    ratio_aware : bool
        Scale thickness with the person's bounding box diagonal.
    base_thickness_frac : float
        Thickness as a fraction of the box diagonal (ratio-aware mode).
    fixed_thickness_px : int
        Thickness in pixels otherwise.
    confidence_threshold : float
        Both endpoints of a limb need at least this confidence.
    """
    background: str = 'rgb_frame'
    marker: str = 'bar'
    palette: str = 'fine13'
    ratio_aware: bool = True
    base_thickness_frac: float = 0.02
    fixed_thickness_px: int = 3
    confidence_threshold: float = 0.3

    def __post_init__(self) -> None:
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"'background' should be one of {BACKGROUNDS}.")
        if self.marker not in MARKERS:
            raise ConfigError(f"'marker' should be one of {MARKERS}.")
        if self.palette not in PALETTES:
            raise ConfigError(f"'palette' should be one of {PALETTES}.")
        if not isinstance(self.ratio_aware, bool):
            raise ConfigError("'ratio_aware' should be boolean.")
        if self.base_thickness_frac <= 0 or self.fixed_thickness_px < 1:
            raise ConfigError('thickness parameters should be positive.')
        if not 0 <= self.confidence_threshold <= 1:
            raise ConfigError("'confidence_threshold' should be between 0 "
                              "and 1.")

    @property
    def label(self) -> str:
        """Short name, e.g. ``'rgb_frame/bar/13/ratio'``."""
        colors = 6 if self.palette == 'coarse6' else 13
        ratio = 'ratio' if self.ratio_aware else 'uniform'
        return f'{self.background}/{self.marker}/{colors}/{ratio}'

    def thickness(self, person) -> int:
        """Line thickness (bar) or disc radius (dot) for ``person``."""
        if not self.ratio_aware:
            return int(self.fixed_thickness_px)
        return max(1, int(round(self.base_thickness_frac * person.diagonal)))


# the seven rendering variants of the pose-stream ablation
RENDER_VARIANTS = (
    RenderSpec('rgb_frame', 'bar', 'coarse6', False),
    RenderSpec('rgb_frame', 'bar', 'coarse6', True),
    RenderSpec('rgb_frame', 'bar', 'fine13', False),
    RenderSpec('black', 'dot', 'fine13', True),
    RenderSpec('black', 'bar', 'fine13', True),
    RenderSpec('rgb_frame', 'dot', 'fine13', True),
    RenderSpec('rgb_frame', 'bar', 'fine13', True),
)


def palette(spec) -> list:
    """
    The colours of a rendering variant.

    Parameters
    ----------
    spec : RenderSpec
        The variant.

    Returns
    -------
    list of tuple
        Six RGB colours in ``COARSE_GROUPS`` order for ``'coarse6'``,
        thirteen in limb order for ``'fine13'``.
    """
    if spec.palette == 'coarse6':
        return [COARSE_COLORS[group] for group in COARSE_GROUPS]
    return list(FINE_COLORS)


def limb_color(limb, spec) -> tuple:
    if spec.palette == 'coarse6':
        return COARSE_COLORS[limb.group]
    return FINE_COLORS[limb.fine_color]


def segment_distance_sq(px, py, ax, ay, bx, by) -> np.ndarray:
    """
    Squared distance from points ``(px, py)`` to the segment
    ``(ax, ay)-(bx, by)``.
    """
    dx, dy = bx - ax, by - ay
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / length_sq, 0.0, 1.0)
    cx = ax + t * dx
    cy = ay + t * dy
    return (px - cx) ** 2 + (py - cy) ** 2


def capsule_mask(shape, a, b, radius) -> np.ndarray:
    """
    Pixels of a ``(height, width)`` canvas whose centre ``(x=col, y=row)``
    lies within ``radius`` of the segment ``a-b``. Only the bounding
    window of the capsule is evaluated.

    Returns
    -------
    numpy.ndarray of bool
        The mask, shape ``(height, width)``.
    """
    height, width = shape
    (ax, ay), (bx, by) = a, b
    mask = np.zeros((height, width), dtype=bool)
    col0 = max(int(np.floor(min(ax, bx) - radius)), 0)
    col1 = min(int(np.ceil(max(ax, bx) + radius)), width - 1)
    row0 = max(int(np.floor(min(ay, by) - radius)), 0)
    row1 = min(int(np.ceil(max(ay, by) + radius)), height - 1)
    if col0 > col1 or row0 > row1:
        return mask
    py, px = np.mgrid[row0:row1 + 1, col0:col1 + 1].astype(np.float64)
    dist_sq = segment_distance_sq(px, py, float(ax), float(ay), float(bx),
                                  float(by))
    mask[row0:row1 + 1, col0:col1 + 1] = dist_sq <= radius * radius
    return mask


def _extended_keypoints(person) -> np.ndarray:
    kps = person.keypoints
    neck = [(kps[5, 0] + kps[6, 0]) / 2, (kps[5, 1] + kps[6, 1]) / 2,
            min(kps[5, 2], kps[6, 2])]
    return np.vstack([kps, neck])


class PoseRenderer:
    """
    This class renders pose skeletons under one :class:`RenderSpec`.

    Attributes
    ----------
    spec : RenderSpec, readonly
        The rendering variant.
    nan_skips : int, readonly
        The number of limbs skipped so far because an endpoint was NaN.
    """
    def __init__(self, spec=None) -> None:
        """
        Constructor for PoseRenderer.

        Parameters
        ----------
        spec : RenderSpec, optional
            The rendering variant, defaults to ``RenderSpec()``.
        """
        spec = RenderSpec() if spec is None else spec
        if not isinstance(spec, RenderSpec):
            raise TypeError("'spec' should be a RenderSpec.")
        self._spec = spec
        self._nan_skips = 0

    @property
    def spec(self) -> RenderSpec:
        return self._spec

    @property
    def nan_skips(self) -> int:
        return self._nan_skips

    def _canvas(self, frame, frame_shape) -> np.ndarray:
        if frame is not None:
            frame = np.asarray(frame)
            if frame.ndim != 3 or frame.shape[2] != 3:
                raise ShapeError(f'frames should be [H, W, 3], got '
                                 f'{frame.shape}.')
        if self._spec.background == 'rgb_frame':
            if frame is None:
                raise ContractError('an rgb_frame background needs the '
                                    'frame.')
            return np.array(frame, copy=True)
        if frame is not None:
            return np.zeros(frame.shape, dtype=np.float32)
        if frame_shape is None:
            raise ContractError("a black background without a frame needs "
                                "'frame_shape'.")
        return np.zeros(tuple(frame_shape)[:2] + (3,), dtype=np.float32)

    def render_frame(self, frame, poses, frame_shape=None) -> np.ndarray:
        """
        Render one frame.

        For every person (later persons drawn over earlier ones) and every
        limb whose two endpoints reach the confidence threshold, draw a
        capsule of diameter ``thickness`` (bar) or two discs of radius
        ``thickness`` (dot) in the limb colour.

        Parameters
        ----------
        frame : numpy.ndarray or None
            ``[H, W, 3]`` values in [0, 1]; required for an RGB
            background.
        poses : PoseFrame
            The persons of this frame.
        frame_shape : tuple of int, optional
            ``(H, W)`` when ``frame`` is None (black background only).

        Raises
        ------
        ContractError
            If the frame is missing with an RGB background.
        ShapeError
            If the frame is not ``[H, W, 3]``.

        Returns
        -------
        numpy.ndarray
            The rendered frame; equal to ``frame`` when there are no
            persons and the background is the frame.
        """
        if not isinstance(poses, PoseFrame):
            raise TypeError("'poses' should be a PoseFrame.")
        canvas = self._canvas(frame, frame_shape)
        shape = canvas.shape[:2]
        skipped = 0
        for person in poses.persons:
            keypoints = _extended_keypoints(person)
            thickness = self._spec.thickness(person)
            for limb in LIMBS:
                ends = keypoints[[limb.a, limb.b]]
                if not np.isfinite(ends).all():
                    skipped += 1
                    continue
                if (ends[:, 2] < self._spec.confidence_threshold).any():
                    continue
                a, b = ends[0, :2], ends[1, :2]
                if self._spec.marker == 'bar':
                    mask = capsule_mask(shape, a, b, thickness / 2.0)
                else:
                    mask = capsule_mask(shape, a, a, thickness) \
                        | capsule_mask(shape, b, b, thickness)
                canvas[mask] = limb_color(limb, self._spec)
        if skipped:
            self._nan_skips += skipped
            warnings.warn(f'skipped {skipped} limbs with NaN keypoints.',
                          UserWarning)
        return canvas

    def render_clip(self, frames, poses, frame_shape=None) -> np.ndarray:
        """
        Render every frame of a clip; frames without detections pass
        through (or stay black).

        Parameters
        ----------
        frames : numpy.ndarray or None
            ``[T, H, W, 3]``; may be None for a black background.
        poses : list of PoseFrame
            One entry per frame.
        frame_shape : tuple of int, optional
            ``(H, W)`` when ``frames`` is None.

        Raises
        ------
        ShapeError
            If the frame and pose counts differ.

        Returns
        -------
        numpy.ndarray
            ``[T, H, W, 3]``.
        """
        poses = list(poses)
        if frames is None:
            rendered = [self.render_frame(None, p, frame_shape)
                        for p in poses]
        else:
            frames = np.asarray(frames)
            if frames.ndim != 4 or len(frames) != len(poses):
                raise ShapeError(f'{len(poses)} pose frames for frames of '
                                 f'shape {frames.shape}.')
            rendered = [self.render_frame(f, p) for f, p in zip(frames, poses)]
        if not rendered:
            raise ShapeError('cannot render an empty clip.')
        return np.stack(rendered)


def render_pose_frame(frame, poses, spec, frame_shape=None) -> np.ndarray:
    """Render one frame under ``spec``, see
    :meth:`PoseRenderer.render_frame`."""
    return PoseRenderer(spec).render_frame(frame, poses, frame_shape)


def render_clip(frames, poses, spec, frame_shape=None) -> np.ndarray:
    """Render a clip under ``spec``, see :meth:`PoseRenderer.render_clip`."""
    return PoseRenderer(spec).render_clip(frames, poses, frame_shape)


def with_background(spec, background) -> RenderSpec:
    """A copy of ``spec`` with another background."""
    return replace(spec, background=background)


def read_pose_jsonl(path, num_frames=None) -> list:
    """
    Read keypoints from a JSON-lines file with one record per frame,
    ``{frame_index, persons: [{bbox: [x0, y0, x1, y1], keypoints:
    [[x, y, conf] x 17]}]}``.

    Parameters
    ----------
    path : str or pathlib.Path
        The file.
    num_frames : int, optional
        The clip length; frames without a record get an empty PoseFrame.
        Defaults to the largest frame index plus one.

    Raises
    ------
    IoError
        If the file cannot be read or misses the expected fields.

    Returns
    -------
    list of PoseFrame
        One entry per frame index.
    """
    path = Path(path)
    try:
        if path.stat().st_size == 0:
            table = pd.DataFrame(columns=['frame_index', 'persons'])
        else:
            table = pd.read_json(path, lines=True, convert_dates=False)
    except (OSError, ValueError) as err:
        raise IoError(f'cannot read poses from {path}: {err}') from err
    if not {'frame_index', 'persons'}.issubset(table.columns):
        raise IoError(f"{path}: records need 'frame_index' and 'persons'.")

    length = num_frames
    if length is None:
        length = int(table['frame_index'].max()) + 1 if len(table) else 0
    frames = [PoseFrame() for _ in range(length)]
    for record in table.itertuples(index=False):
        index = int(record.frame_index)
        if not 0 <= index < length:
            raise IoError(f'{path}: frame_index {index} outside the clip.')
        persons = [Person(np.asarray(p['keypoints'], dtype=np.float64),
                          tuple(p['bbox'])) for p in record.persons]
        frames[index] = PoseFrame(persons)
    return frames


def write_pose_jsonl(poses, path) -> Path:
    """
    Write one JSON-lines record per frame (see :func:`read_pose_jsonl`).

    Returns
    -------
    pathlib.Path
        The written path.
    """
    path = Path(path)
    records = [{
        'frame_index': index,
        'persons': [{'bbox': list(p.bbox),
                     'keypoints': p.keypoints.tolist()}
                    for p in frame.persons]}
        for index, frame in enumerate(poses)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(records, columns=['frame_index', 'persons']).to_json(
            path, orient='records', lines=True, double_precision=15)
    except OSError as err:
        raise IoError(f'cannot write poses to {path}: {err}') from err
    return path
