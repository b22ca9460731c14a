"""Checkpoint test module.
"""

# import modules
import struct

import numpy as np
import pytest

from posestream.backbone import build_backbone
from posestream.checkpoint import (MAGIC, checkpoint_bytes, load_checkpoint,
                                   parse_checkpoint, save_checkpoint)
from posestream.exceptions import ConfigError, IoError
from posestream.tensor import default_dtype
from tests.data_generator import micro_backbone


class TestCheckpoint:
    """
    This class is to test saving and loading model parameters.
    """
    def setup_class(self):
        self.cfg = micro_backbone(norm='batch')
        self.params = build_backbone(self.cfg, seed=2)

    def test_round_trip(self, tmp_path):
        path = save_checkpoint(self.params, tmp_path / 'run' / 'model.ckpt')
        assert path.exists()
        assert not (tmp_path / 'run' / 'model.ckpt.tmp').exists()
        loaded = load_checkpoint(path, self.cfg)
        assert loaded.names() == self.params.names()
        for name, tensor in self.params.items():
            assert loaded[name].dtype == tensor.dtype
            np.testing.assert_array_equal(loaded[name].data, tensor.data)
            assert loaded[name].requires_grad == tensor.requires_grad
        # saving the loaded parameters gives the same bytes
        assert checkpoint_bytes(loaded) == checkpoint_bytes(self.params)

    def test_float64(self):
        with default_dtype(np.float64):
            params = build_backbone(self.cfg)
        loaded = parse_checkpoint(checkpoint_bytes(params))
        assert loaded['head.w'].dtype == np.float64

    def test_layout(self):
        payload = checkpoint_bytes(self.params)
        assert payload[:4] == MAGIC
        version, count = struct.unpack('<II', payload[4:12])
        assert version == 1
        assert count == len(self.params)
        (length,) = struct.unpack('<H', payload[12:14])
        assert payload[14:14 + length] == b'stem.conv.w'

    def test_errors(self, tmp_path):
        payload = checkpoint_bytes(self.params)
        # test for error on a bad magic
        with pytest.raises(IoError):
            parse_checkpoint(b'JUNK' + payload[4:])
        # test for error on an unknown version
        with pytest.raises(IoError):
            parse_checkpoint(MAGIC + struct.pack('<II', 9, 0))
        # test for error on truncated and trailing data
        with pytest.raises(IoError):
            parse_checkpoint(payload[:-3])
        with pytest.raises(IoError):
            parse_checkpoint(payload + b'\x00')
        # test for error on a missing file
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / 'missing.ckpt')
        # test for error when the architecture differs
        path = save_checkpoint(self.params, tmp_path / 'model.ckpt')
        with pytest.raises(ConfigError):
            load_checkpoint(path, micro_backbone(norm='group'))
        with pytest.raises(ConfigError):
            load_checkpoint(path, micro_backbone(norm='batch', num_classes=4))
        with pytest.raises(TypeError):
            checkpoint_bytes({'head.w': self.params['head.w']})
