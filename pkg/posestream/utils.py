"""Utility functions for posestream.
"""

# import modules
import zlib
from typing import Callable

import numpy as np


def rng_stream(seed, name) -> np.random.Generator:
    """
    Create a named random sub-stream derived from a root seed.
    Every source of randomness in posestream (data generation, parameter
    initialisation, augmentation, batch order) draws from its own named
    stream, so that changing how many numbers one consumer draws never
    shifts the numbers another consumer sees.

    Parameters
    ----------
    seed : int
        The root seed of the experiment (non-negative).
    name : str
        The name of the sub-stream, e.g. ``'data/train'`` or
        ``'augment/train-c0-0001/3'``.

    Raises
    ------
    TypeError
        If ``seed`` is not an integer or ``name`` is not a string.
    ValueError
        If ``seed`` is negative.

    Returns
    -------
    numpy.random.Generator
        A generator seeded from ``(seed, crc32(name))``.
    """
    # check parameters' type
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError("'seed' should be an integer.")
    if not isinstance(name, str):
        raise TypeError("'name' should be a string.")
    if seed < 0:
        raise ValueError("'seed' should be a non-negative integer.")

    # crc32 is stable across interpreter runs, unlike hash()
    key = zlib.crc32(name.encode('utf-8'))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def header(title) -> str:
    """
    Format a title as a report header, the title is printed between two
    '=' lines which have the same length as the title.

    Parameters
    ----------
    title : str
        The title to format.

    Raises
    ------
    TypeError
        If ``title`` is not a string.

    Returns
    -------
    str
        The formatted title.
    """
    # check 'title' data type
    if not isinstance(title, str):
        raise TypeError("'title' should be string.")

    # generate the upper and lower lines
    line = '=' * len(title)
    return f'{line}\n{title}\n{line}'


def numerical_gradient(fn: Callable[[], float], arr, eps=1e-4,
                       indices=None) -> np.ndarray:
    """
    Estimate the gradient of a scalar function by central differences.
    ``arr`` is perturbed in place and restored after every evaluation.

    Parameters
    ----------
    fn : callable
        A function with no arguments returning the scalar value to
        differentiate; it must read ``arr``.
    arr : numpy.ndarray
        The writable array to differentiate with respect to.
    eps : float, optional
        The finite-difference step, defaults to 1e-4.
    indices : iterable of tuple, optional
        Only estimate these entries (flat gradient entries elsewhere are
        left at 0), defaults to every entry.

    Raises
    ------
    TypeError
        If ``arr`` is not a numpy array.

    Returns
    -------
    numpy.ndarray
        The estimated gradient, same shape as ``arr``.
    """
    # check input type
    if not isinstance(arr, np.ndarray):
        raise TypeError("'arr' should be a numpy array.")

    grad = np.zeros_like(arr, dtype=np.float64)
    if indices is None:
        indices = np.ndindex(*arr.shape)
    for idx in indices:
        original = arr[idx]
        arr[idx] = original + eps
        upper = float(fn())
        arr[idx] = original - eps
        lower = float(fn())
        arr[idx] = original
        grad[idx] = (upper - lower) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """
    Relative error between two gradient arrays,
    ``||a - n|| / (||a|| + ||n||)`` (0 when both are zero).

    Parameters
    ----------
    analytic : numpy.ndarray
        The gradient computed by back-propagation.
    numeric : numpy.ndarray
        The finite-difference estimate.

    Returns
    -------
    float
        The relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
