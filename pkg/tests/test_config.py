"""Experiment configuration test module.
"""

# import modules
import pytest

from posestream.config import (RESOLVED_NAME, ExperimentConfig,
                               format_value, parse_value)
from posestream.exceptions import ConfigError, IoError
from posestream.training import DistillConfig

CONFIG = """
# a small run
seed = 3
out_dir = runs/pose
data.num_classes = 4
data.frame_size = 32,32
render.background = black
render.ratio_aware = false
optim.base_lr = 0.05
augment.contrast = 0.9,1.1
train.modality = pose
train.clip_length = 8
distill.teachers = rgb:runs/rgb/model.ckpt,flow:runs/flow/model.ckpt
"""


class TestExperimentConfig:
    """
    This class is to test parsing, validation and the text round trip.
    """
    def setup_class(self):
        self.cfg = ExperimentConfig.from_text(CONFIG)

    def test_parse(self):
        assert self.cfg.seed == 3
        assert self.cfg.out_dir == 'runs/pose'
        assert self.cfg.data.num_classes == 4
        assert self.cfg.data.frame_size == (32, 32)
        assert self.cfg.render.background == 'black'
        assert self.cfg.render.ratio_aware is False
        assert self.cfg.optim.base_lr == 0.05
        assert self.cfg.augment.contrast == (0.9, 1.1)
        assert self.cfg.train.modality == 'pose'
        assert self.cfg.clip_length == 8
        # untouched settings keep their defaults
        assert self.cfg.flow.pyramid_levels == 5
        assert ExperimentConfig().clip_length == 16

    def test_root_seed(self):
        assert self.cfg.data.seed == 3
        assert self.cfg.optim.seed == 3

    def test_round_trip(self, tmp_path):
        assert ExperimentConfig.from_text(self.cfg.to_text()) == self.cfg
        assert ExperimentConfig.from_text(
            ExperimentConfig().to_text()) == ExperimentConfig()
        path = self.cfg.save(tmp_path / 'run')
        assert path.name == RESOLVED_NAME
        assert ExperimentConfig.load(path) == self.cfg

    def test_overrides(self):
        cfg = ExperimentConfig.from_text(CONFIG, {'seed': '9',
                                                  'train.clip_length': 'none'})
        assert cfg.seed == 9 and cfg.optim.seed == 9
        assert cfg.clip_length == cfg.data.clip_length
        assert ExperimentConfig.load(None, {'data.num_classes': '3'}) \
            .data.num_classes == 3

    def test_derived(self):
        flow = self.cfg.backbone_for('flow')
        assert flow.input_channels == 2
        assert flow.num_classes == 4
        assert self.cfg.backbone_for('pose').input_channels == 3
        distill = self.cfg.distill_config()
        assert isinstance(distill, DistillConfig)
        assert [t.modality for t in distill.teachers] == ['rgb', 'flow']
        assert distill.teachers[1].backbone.input_channels == 2
        assert distill.teachers[0].checkpoint == 'runs/rgb/model.ckpt'
        with pytest.raises(ConfigError):
            self.cfg.backbone_for('depth')
        # a run without teachers cannot distill
        with pytest.raises(ConfigError):
            ExperimentConfig().distill_config()

    def test_errors(self, tmp_path):
        # test for error on unknown keys
        for text in ('learning_rate = 1', 'optim.lr = 0.1',
                     'solver.base_lr = 0.1', 'data.seed = 4'):
            with pytest.raises(ConfigError):
                ExperimentConfig.from_text(text)
        # test for error on malformed and repeated lines
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('seed 3')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('seed = 1\nseed = 2')
        # test for error on values of the wrong type or range
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('optim.total_steps = many')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('augment.mirror_prob = half')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('render.ratio_aware = maybe')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('optim.momentum = 1.5')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('seed = -1')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('model.preset = r3d101')
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text('distill.teachers = rgb')
        with pytest.raises(IoError):
            ExperimentConfig.load(tmp_path / 'missing.txt')


class TestValues:
    """
    This class is to test :func:`format_value` and :func:`parse_value`.
    """
    def test_format(self):
        assert format_value(None) == 'none'
        assert format_value(True) == 'true'
        assert format_value((0.8, 1.2)) == '0.8,1.2'
        assert format_value(1e-4) == '0.0001'
        assert format_value('bar') == 'bar'

    def test_parse(self):
        assert parse_value('yes', bool, 'key') is True
        assert parse_value(' 7 ', int, 'key') == 7
        assert parse_value('64,48', tuple, 'key', (1, 1)) == (64, 48)
        assert parse_value('a, b', tuple, 'key') == ('a', 'b')
        assert parse_value('', tuple, 'key') == ()
        with pytest.raises(ConfigError):
            parse_value('1.5', int, 'key')
        with pytest.raises(ConfigError):
            parse_value('x', list, 'key')
