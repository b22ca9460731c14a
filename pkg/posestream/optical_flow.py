"""This module estimates dense optical flow with the TV-L1 method
(coarse-to-fine, primal-dual) and turns video clips into flow stacks for
the flow stream.

Images are ``[H, W]`` grayscale arrays with values in [0, 1]; they are
scaled to [0, 255] internally so the usual data weight (0.15) applies.
"""

# import modules
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.ndimage import map_coordinates, median_filter
from skimage.transform import pyramid_gaussian, resize
from tqdm import tqdm

from .exceptions import ConfigError, ContractError, IoError, ShapeError

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
MIN_LEVEL_SIZE = 8
ENERGY_SLACK = 1e-6


@dataclass(frozen=True)
class FlowParams:
    """
    TV-L1 solver settings.

    Attributes
    ----------
    lambda_data : float
        Weight of the data attachment term.
    theta : float
        Coupling between the two primal variables.
    tau : float
        Dual step size, at most 0.25.
    pyramid_levels : int
        Maximum number of pyramid levels (reduced for small images).
    pyramid_scale : float
        Downscaling factor between consecutive levels, in (0, 1).
    warps_per_level : int
        Number of times the second image is re-warped per level.
    iterations_per_warp : int
        Primal-dual iterations per warp.
    flow_clip : float
        Absolute clamp of the flow components in pixels.
    median_filter : bool
        Apply a 3x3 median filter to the flow after every warp.
    """
    lambda_data: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    pyramid_levels: int = 5
    pyramid_scale: float = 0.5
    warps_per_level: int = 5
    iterations_per_warp: int = 30
    flow_clip: float = 20.0
    median_filter: bool = True

    def __post_init__(self) -> None:
        for name in ('lambda_data', 'theta', 'tau', 'flow_clip'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"'{name}' should be positive.")
        if self.tau > 0.25:
            raise ConfigError("'tau' should be at most 0.25 for a stable "
                              "dual update.")
        if not 0 < self.pyramid_scale < 1:
            raise ConfigError("'pyramid_scale' should be in (0, 1).")
        for name in ('pyramid_levels', 'warps_per_level',
                     'iterations_per_warp'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"'{name}' should be a positive integer.")

    def levels_for(self, shape) -> int:
        """
        The number of pyramid levels used for an image of ``shape``: the
        coarsest level keeps at least 8 pixels on its shorter side.
        """
        smallest = min(shape)
        levels = 1
        while (levels < self.pyramid_levels
               and smallest * self.pyramid_scale ** levels >= MIN_LEVEL_SIZE):
            levels += 1
        return levels


@dataclass
class FlowField:
    """
    A dense displacement field.

    Attributes
    ----------
    u, v : numpy.ndarray
        ``[H, W]`` horizontal and vertical displacement in pixels.
    energy_trace : list of list of float
        Per pyramid level (coarse to fine), the TV-L1 energy before the
        first warp and after every warp.
    """
    u: np.ndarray
    v: np.ndarray
    energy_trace: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ShapeError(f"'u' {self.u.shape} and 'v' {self.v.shape} "
                             f"should be equal [H, W] arrays.")

    @property
    def shape(self) -> tuple:
        return self.u.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def to_array(self) -> np.ndarray:
        """The field as a ``[H, W, 2]`` array (u, v)."""
        return np.stack([self.u, self.v], axis=-1)


def _forward_gradient(m):
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1, :] = m[1:, :] - m[:-1, :]
    return dx, dy


def _divergence(px, py):
    # adjoint of the forward gradient
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    div[:, -1] = -px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] += -py[-2, :]
    return div


def _warp(image, rows, cols, u, v):
    return map_coordinates(image, [rows + v, cols + u], order=1,
                           mode='nearest')


def _total_variation(m):
    dx, dy = _forward_gradient(m)
    return float(np.sqrt(dx * dx + dy * dy).sum())


def tvl1_energy(i0, i1, u, v, lambda_data) -> float:
    """
    The TV-L1 objective ``sum(lambda |I1(x + w) - I0(x)|) + TV(u) + TV(v)``.
    """
    rows, cols = np.mgrid[0:i0.shape[0], 0:i0.shape[1]].astype(np.float64)
    residual = _warp(i1, rows, cols, u, v) - i0
    return (lambda_data * float(np.abs(residual).sum())
            + _total_variation(u) + _total_variation(v))


def _solve_level(i0, i1, u, v, p):
    rows, cols = np.mgrid[0:i0.shape[0], 0:i0.shape[1]].astype(np.float64)
    i1y, i1x = np.gradient(i1)
    p11, p12, p21, p22 = (np.zeros_like(i0) for _ in range(4))
    lt = p.lambda_data * p.theta
    step = p.tau / p.theta
    trace = [tvl1_energy(i0, i1, u, v, p.lambda_data)]

    for _ in range(p.warps_per_level):
        i1w = _warp(i1, rows, cols, u, v)
        i1wx = _warp(i1x, rows, cols, u, v)
        i1wy = _warp(i1y, rows, cols, u, v)
        grad_sq = i1wx * i1wx + i1wy * i1wy
        safe_sq = np.where(grad_sq > 1e-10, grad_sq, 1.0)
        rho_c = i1w - i1wx * u - i1wy * v - i0

        for _ in range(p.iterations_per_warp):
            # thresholding step on the data term
            rho = rho_c + i1wx * u + i1wy * v
            thresh = lt * grad_sq
            scale = np.where(rho < -thresh, lt,
                             np.where(rho > thresh, -lt, -rho / safe_sq))
            scale = np.where(grad_sq > 1e-10, scale, 0.0)
            v1 = u + scale * i1wx
            v2 = v + scale * i1wy

            u = v1 + p.theta * _divergence(p11, p12)
            v = v2 + p.theta * _divergence(p21, p22)

            # dual ascent on the TV term
            u1x, u1y = _forward_gradient(u)
            u2x, u2y = _forward_gradient(v)
            ng1 = 1.0 + step * np.sqrt(u1x * u1x + u1y * u1y)
            ng2 = 1.0 + step * np.sqrt(u2x * u2x + u2y * u2y)
            p11 = (p11 + step * u1x) / ng1
            p12 = (p12 + step * u1y) / ng1
            p21 = (p21 + step * u2x) / ng2
            p22 = (p22 + step * u2y) / ng2

        if p.median_filter:
            u = median_filter(u, size=3, mode='nearest')
            v = median_filter(v, size=3, mode='nearest')
        energy = tvl1_energy(i0, i1, u, v, p.lambda_data)
        if energy > trace[-1] + ENERGY_SLACK * max(1.0, abs(trace[-1])):
            logger.debug('TV-L1 energy rose from %.6g to %.6g at level '
                         'shape %s', trace[-1], energy, i0.shape)
        trace.append(energy)
    return u, v, trace


def _check_image(image, name) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"'{name}' should be a [H, W] grayscale image, got "
                         f"{image.shape}.")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ContractError(f"'{name}' values should be in [0, 1].")
    return image


def tvl1_flow(prev, next_, params=None) -> FlowField:
    """
    Estimate the flow ``w`` with ``next(x + w) ~ prev(x)``.

    Parameters
    ----------
    prev, next_ : numpy.ndarray
        ``[H, W]`` grayscale frames with values in [0, 1].
    params : FlowParams, optional
        Solver settings, defaults to ``FlowParams()``.

    Raises
    ------
    ShapeError
        If the images are not 2-D or differ in shape.
    ContractError
        If values fall outside [0, 1].

    Returns
    -------
    FlowField
        The clamped flow (zero for constant images).
    """
    p = FlowParams() if params is None else params
    i0 = _check_image(prev, 'prev') * 255.0
    i1 = _check_image(next_, 'next_') * 255.0
    if i0.shape != i1.shape:
        raise ShapeError(f'frames differ in shape: {i0.shape} vs '
                         f'{i1.shape}.')
    if min(i0.shape) < 2:
        raise ShapeError(f'frames should be at least 2x2, got {i0.shape}.')

    levels = p.levels_for(i0.shape)
    downscale = 1.0 / p.pyramid_scale
    pyr0 = list(pyramid_gaussian(i0, max_layer=levels - 1,
                                 downscale=downscale, preserve_range=True))
    pyr1 = list(pyramid_gaussian(i1, max_layer=levels - 1,
                                 downscale=downscale, preserve_range=True))

    u = np.zeros_like(pyr0[-1])
    v = np.zeros_like(pyr0[-1])
    trace = []
    for level in reversed(range(levels)):
        j0, j1 = pyr0[level], pyr1[level]
        if u.shape != j0.shape:
            ratio_rows = j0.shape[0] / u.shape[0]
            ratio_cols = j0.shape[1] / u.shape[1]
            u = resize(u, j0.shape, order=1, mode='edge',
                       anti_aliasing=False, preserve_range=True) * ratio_cols
            v = resize(v, j0.shape, order=1, mode='edge',
                       anti_aliasing=False, preserve_range=True) * ratio_rows
        u, v, level_trace = _solve_level(j0, j1, u, v, p)
        trace.append(level_trace)

    u = np.clip(u, -p.flow_clip, p.flow_clip)
    v = np.clip(v, -p.flow_clip, p.flow_clip)
    return FlowField(u, v, trace)


def to_grayscale(frames) -> np.ndarray:
    """Luma (0.299, 0.587, 0.114) of ``[..., 3]`` RGB values."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != 3:
        raise ShapeError(f'expected RGB values, got shape {frames.shape}.')
    return np.clip(frames @ np.asarray(LUMA_WEIGHTS), 0.0, 1.0)


def clip_flow_stack(frames, params=None, pad_to_length=False,
                    progress=False) -> np.ndarray:
    """
    Compute the flow stream input of a clip.

    Every consecutive pair of frames is converted to grayscale, passed to
    :func:`tvl1_flow`, clamped to ``+-flow_clip`` and divided by
    ``flow_clip``.

    Parameters
    ----------
    frames : numpy.ndarray
        ``[T, H, W, 3]`` RGB frames in [0, 1], ``T >= 2``.
    params : FlowParams, optional
        Solver settings.
    pad_to_length : bool, optional
        Duplicate the last flow so the output has ``T`` frames, defaults
        to False.
    progress : bool, optional
        Show a progress bar over frame pairs.

    Raises
    ------
    ContractError
        If the clip has fewer than two frames.

    Returns
    -------
    numpy.ndarray
        ``[T - 1, H, W, 2]`` (or ``[T, H, W, 2]``) float32 in [-1, 1].
    """
    p = FlowParams() if params is None else params
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeError(f'frames should be [T, H, W, 3], got '
                         f'{frames.shape}.')
    if len(frames) < 2:
        raise ContractError('a flow stack needs at least two frames.')
    gray = to_grayscale(frames)
    pairs = range(len(gray) - 1)
    flows = []
    for t in tqdm(pairs, desc='flow', leave=False, disable=not progress):
        flows.append(tvl1_flow(gray[t], gray[t + 1], p).to_array())
    if pad_to_length:
        flows.append(flows[-1])
    stack = np.clip(np.stack(flows) / p.flow_clip, -1.0, 1.0)
    return stack.astype(np.float32)


def write_flo(flow, path) -> Path:
    """
    Write a ``[H, W, 2]`` flow to the Middlebury ``.flo`` format (float
    magic 202021.25, int32 width and height, interleaved little-endian
    float32 u, v).

    Returns
    -------
    pathlib.Path
        The written path.
    """
    flow = np.asarray(flow.to_array() if isinstance(flow, FlowField)
                      else flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f'flow should be [H, W, 2], got {flow.shape}.')
    path = Path(path)
    height, width = flow.shape[:2]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as handle:
            handle.write(np.array([FLO_MAGIC], dtype='<f4').tobytes())
            handle.write(np.array([width, height], dtype='<i4').tobytes())
            handle.write(flow.astype('<f4').tobytes())
    except OSError as err:
        raise IoError(f'cannot write flow {path}: {err}') from err
    return path


def read_flo(path) -> np.ndarray:
    """
    Read a ``.flo`` file.

    Raises
    ------
    IoError
        If the file is unreadable, has a bad magic or the wrong size.

    Returns
    -------
    numpy.ndarray
        ``[H, W, 2]`` float32.
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as err:
        raise IoError(f'cannot read flow {path}: {err}') from err
    if len(payload) < 12:
        raise IoError(f'{path}: truncated .flo header.')
    magic = np.frombuffer(payload[:4], dtype='<f4')[0]
    if magic != np.float32(FLO_MAGIC):
        raise IoError(f'{path}: bad .flo magic {magic}.')
    width, height = (int(n) for n in np.frombuffer(payload[4:12],
                                                   dtype='<i4'))
    data = np.frombuffer(payload[12:], dtype='<f4')
    if data.size != width * height * 2:
        raise IoError(f'{path}: expected {width}x{height} flow values.')
    return data.reshape(height, width, 2).astype(np.float32)


def flow_to_color(flow, max_magnitude=None) -> np.ndarray:
    """
    Colour-wheel visualisation: hue encodes direction, saturation the
    magnitude relative to ``max_magnitude`` (defaults to the largest
    magnitude in the field). Zero flow is white.

    Returns
    -------
    numpy.ndarray
        ``[H, W, 3]`` float32 RGB in [0, 1].
    """
    flow = np.asarray(flow.to_array() if isinstance(flow, FlowField)
                      else flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f'flow should be [H, W, 2], got {flow.shape}.')
    u, v = flow[..., 0], flow[..., 1]
    magnitude = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(magnitude.max())
    hue = (np.arctan2(-v, -u) / (2 * np.pi) + 0.5) % 1.0
    if max_magnitude > 0:
        saturation = np.clip(magnitude / max_magnitude, 0.0, 1.0)
    else:
        saturation = np.zeros_like(magnitude)
    hsv = np.stack([hue, saturation, np.ones_like(hue)], axis=-1)
    return hsv_to_rgb(hsv).astype(np.float32)
