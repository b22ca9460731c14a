"""Binary checkpoint format for model parameters.

Layout (little-endian): magic ``b'PERF'``, format version ``u32``, tensor
count ``u32``; then per tensor: name length ``u16``, UTF-8 name, rank
``u8``, one ``u64`` per dimension, dtype tag ``u8`` (0 = f32, 1 = f64)
and the raw row-major data.
"""

# import modules
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, ModelParams, is_buffer, param_shapes
from .exceptions import ConfigError, IoError
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b'PERF'
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def checkpoint_bytes(params) -> bytes:
    """
    Serialise parameters to the checkpoint byte layout.

    Parameters
    ----------
    params : ModelParams
        The parameters, in their stored order.

    Raises
    ------
    TypeError
        If ``params`` is not a ModelParams.
    ValueError
        If a tensor has an unsupported dtype.

    Returns
    -------
    bytes
        The serialised checkpoint.
    """
    if not isinstance(params, ModelParams):
        raise TypeError("'params' should be a ModelParams.")
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(params))]
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        tag = _TAG_OF.get(tensor.dtype)
        if tag is None:
            raise ValueError(f"'{name}' has unsupported dtype {tensor.dtype}.")
        chunks.append(struct.pack('<H', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<B', tensor.ndim))
        chunks.append(struct.pack(f'<{tensor.ndim}Q', *tensor.shape))
        chunks.append(struct.pack('<B', tag))
        chunks.append(np.ascontiguousarray(
            tensor.data, dtype=DTYPE_TAGS[tag]).tobytes())
    return b''.join(chunks)


def save_checkpoint(params, path) -> Path:
    """
    Write parameters to ``path`` (written to a temporary file first and
    renamed, so readers never see a partial checkpoint).

    Raises
    ------
    IoError
        If the file cannot be written.

    Returns
    -------
    pathlib.Path
        The written path.
    """
    path = Path(path)
    payload = checkpoint_bytes(params)
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as err:
        raise IoError(f'cannot write checkpoint {path}: {err}') from err
    logger.debug('saved %d tensors to %s', len(params), path)
    return path


class _Reader:
    def __init__(self, payload, source) -> None:
        self._payload = payload
        self._offset = 0
        self._source = source

    def take(self, size) -> bytes:
        end = self._offset + size
        if end > len(self._payload):
            raise IoError(f'{self._source}: checkpoint is truncated.')
        chunk = self._payload[self._offset:end]
        self._offset = end
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._payload)


def parse_checkpoint(payload, source='<bytes>') -> ModelParams:
    """
    Parse checkpoint bytes back into parameters; running statistics come
    back with ``requires_grad`` False, everything else True.

    Raises
    ------
    IoError
        On a bad magic, unknown version or dtype tag, or truncated data.
    """
    reader = _Reader(payload, source)
    if reader.take(4) != MAGIC:
        raise IoError(f'{source}: not a checkpoint (bad magic).')
    version, count = reader.unpack('<II')
    if version != FORMAT_VERSION:
        raise IoError(f'{source}: unsupported format version {version}.')

    params = ModelParams()
    for _ in range(count):
        (length,) = reader.unpack('<H')
        try:
            name = reader.take(length).decode('utf-8')
        except UnicodeDecodeError as err:
            raise IoError(f'{source}: tensor name is not UTF-8.') from err
        (rank,) = reader.unpack('<B')
        shape = reader.unpack(f'<{rank}Q')
        (tag,) = reader.unpack('<B')
        if tag not in DTYPE_TAGS:
            raise IoError(f'{source}: unknown dtype tag {tag}.')
        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape)) * dtype.itemsize
        data = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape)
        params[name] = Tensor(data, requires_grad=not is_buffer(name),
                              dtype=dtype.newbyteorder('='))
    if not reader.exhausted:
        raise IoError(f'{source}: trailing bytes after the last tensor.')
    return params


def load_checkpoint(path, cfg=None) -> ModelParams:
    """
    Read a checkpoint, optionally checking it against an architecture.

    Parameters
    ----------
    path : str or pathlib.Path
        The checkpoint file.
    cfg : BackboneConfig, optional
        When given, names and shapes must equal ``param_shapes(cfg)``.

    Raises
    ------
    IoError
        If the file cannot be read or is malformed.
    ConfigError
        If the checkpoint does not match ``cfg``.

    Returns
    -------
    ModelParams
        The parameters.
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as err:
        raise IoError(f'cannot read checkpoint {path}: {err}') from err
    params = parse_checkpoint(payload, source=str(path))

    if cfg is not None:
        if not isinstance(cfg, BackboneConfig):
            raise TypeError("'cfg' should be a BackboneConfig.")
        expected = param_shapes(cfg)
        found = {name: t.shape for name, t in params.items()}
        if list(expected) != list(found):
            missing = sorted(set(expected) - set(found))
            extra = sorted(set(found) - set(expected))
            raise ConfigError(f'{path} does not match the configuration '
                              f'(missing {missing[:3]}, unexpected '
                              f'{extra[:3]}).')
        for name, shape in expected.items():
            if found[name] != tuple(shape):
                raise ConfigError(f"{path}: '{name}' has shape {found[name]}, "
                                  f"the configuration needs {shape}.")
    return params
