"""Backbone test module. Asserts the shape algebra, the temporal kernel
schedule and the forward pass of the gated residual network.
"""

# import modules
import numpy as np
import pytest

from posestream.backbone import (BackboneConfig, GatingParams, ModelParams,
                                 StageSpec, build_backbone,
                                 default_temporal_kernels, feature_gate,
                                 forward, param_shapes, stage_output_shapes)
from posestream.exceptions import ConfigError, ShapeError
from posestream.tensor import (Tensor, default_dtype, get_tape, mul, no_grad,
                               tensor_sum)
from posestream.utils import numerical_gradient, relative_error
from tests.data_generator import micro_backbone, random_array


class TestBackboneConfig:
    """
    This class is to test :class:`BackboneConfig` and its presets.
    """
    def test_errors(self):
        # test for error when the stem strides in time
        with pytest.raises(ConfigError):
            BackboneConfig(stem_stride=(2, 2, 2))
        # test for error when pooling reaches across frames
        with pytest.raises(ConfigError):
            BackboneConfig(pool_kernel=(3, 3, 3))
        with pytest.raises(ConfigError):
            BackboneConfig(norm='layer')
        with pytest.raises(ConfigError):
            BackboneConfig(block_style='plain')
        with pytest.raises(ConfigError):
            BackboneConfig(stages=())
        # test for error when later stages do not alternate 3 and 1
        with pytest.raises(ConfigError):
            BackboneConfig.tiny(stages=(StageSpec(1, 8, 1),
                                        StageSpec(2, 16, 2, (1, 3))))
        # test for error when a kernel list has the wrong length
        with pytest.raises(ConfigError):
            BackboneConfig.tiny(stages=(StageSpec(2, 8, 1, (3,)),))
        # test for error when channels do not divide by the ratio
        with pytest.raises(ConfigError):
            BackboneConfig.tiny(stages=(StageSpec(1, 10, 1),))

    def test_temporal_kernels(self):
        assert default_temporal_kernels(2, 3) == (3, 3, 3)
        assert default_temporal_kernels(3, 4) == (3, 1, 3, 1)
        assert default_temporal_kernels(4, 6) == (3, 1, 3, 1, 3, 1)
        assert default_temporal_kernels(5, 3) == (3, 1, 3)
        # stage 2 may use 1 or 3 freely
        cfg = BackboneConfig.tiny(stages=(StageSpec(2, 8, 1, (1, 3)),))
        assert [c.temporal_kernel for c in cfg.layout()[0][1]] == [1, 3]

    def test_layout(self):
        cfg = BackboneConfig.r3d50()
        assert cfg.stage_names == ('stage2', 'stage3', 'stage4', 'stage5')
        layout = dict(cfg.layout())
        assert [len(cells) for cells in layout.values()] == [3, 4, 6, 3]
        first = layout['stage3'][0]
        assert first.in_channels == 256 and first.mid_channels == 128
        assert first.spatial_stride == 2 and first.projection
        assert layout['stage3'][1].spatial_stride == 1
        assert not layout['stage3'][1].projection
        # stage2 keeps the resolution but still widens the channels
        assert layout['stage2'][0].spatial_stride == 1
        assert layout['stage2'][0].projection

    def test_param_shapes(self):
        shapes = param_shapes(BackboneConfig.r3d50())
        assert shapes['stem.conv.w'] == (5, 7, 7, 3, 64)
        assert shapes['stage3.cell1.conv1.w'] == (3, 1, 1, 256, 128)
        assert shapes['stage3.cell2.conv1.w'] == (1, 1, 1, 512, 128)
        assert shapes['stage5.cell3.conv3.w'] == (1, 1, 1, 512, 2048)
        assert shapes['stage2.gate.w'] == (256, 256)
        assert shapes['head.w'] == (2048, 600)
        assert 'stage2.cell1.gate.w' not in shapes
        # per cell gating and no gating
        shapes = param_shapes(BackboneConfig.tiny(gating_per_cell=True))
        assert 'stage2.cell1.gate.w' in shapes
        assert 'stage2.gate.w' not in shapes
        shapes = param_shapes(BackboneConfig.tiny(gating_enabled=False))
        assert not any('.gate.' in name for name in shapes)
        # flow streams take two channels
        shapes = param_shapes(BackboneConfig.tiny(input_channels=2))
        assert shapes['stem.conv.w'][3] == 2
        with pytest.raises(TypeError):
            param_shapes('tiny')

    def test_stage_output_shapes(self):
        shapes = stage_output_shapes(BackboneConfig.r3d50(),
                                     (16, 224, 224, 3))
        assert shapes['stem'] == (16, 112, 112, 64)
        assert shapes['pool'] == (16, 56, 56, 64)
        assert shapes['stage2'] == (16, 56, 56, 256)
        assert shapes['stage3'] == (16, 28, 28, 512)
        assert shapes['stage4'] == (16, 14, 14, 1024)
        assert shapes['stage5'] == (16, 7, 7, 2048)
        # the temporal extent is never reduced
        shapes = stage_output_shapes(BackboneConfig.r3d50(), (1, 64, 7, 7, 3))
        assert all(shape[0] == 64 for shape in shapes.values())
        with pytest.raises(ShapeError):
            stage_output_shapes(BackboneConfig.r3d50(), (16, 224, 224, 2))


class TestModelParams:
    """
    This class is to test :class:`ModelParams` and initialisation.
    """
    def setup_class(self):
        self.cfg = micro_backbone()
        self.params = build_backbone(self.cfg, seed=3)

    def test_errors(self):
        with pytest.raises(ConfigError):
            self.params['stage9.conv.w']
        params = self.params.copy()
        with pytest.raises(ShapeError):
            params['head.b'] = Tensor(np.zeros(5))
        with pytest.raises(TypeError):
            params['head.b'] = np.zeros(3)

    def test_build(self):
        assert self.params.names() == list(param_shapes(self.cfg))
        again = build_backbone(self.cfg, seed=3)
        other = build_backbone(self.cfg, seed=4)
        for name, tensor in self.params.items():
            np.testing.assert_array_equal(tensor.data, again[name].data)
        assert not np.array_equal(self.params['stem.conv.w'].data,
                                  other['stem.conv.w'].data)
        # gates start neutral and norms start as identity
        assert not self.params['stage2.gate.w'].data.any()
        np.testing.assert_array_equal(self.params['stem.norm.gamma'].data, 1)

    def test_buffers(self):
        params = build_backbone(micro_backbone(norm='batch'))
        assert 'stem.norm.running_var' in params
        assert 'stem.norm.running_var' not in params.trainable()
        assert not params['stem.norm.running_var'].requires_grad
        assert params['stem.norm.gamma'].requires_grad
        total = sum(params[name].size for name in params.trainable())
        assert params.count() == total

    def test_copy(self):
        copied = self.params.copy()
        assert copied['head.w'] is not self.params['head.w']
        np.testing.assert_array_equal(copied['head.w'].data,
                                      self.params['head.w'].data)


class TestForward:
    """
    This class is to test the feature gate and the forward pass.
    """
    def setup_class(self):
        self.cfg = micro_backbone()
        self.x = random_array((2, 4, 8, 8, 3), seed=1).astype(np.float32)

    def setup_method(self, method):
        get_tape().clear()

    def test_feature_gate(self):
        x = random_array((2, 3, 4, 4, 5), seed=2)
        with default_dtype(np.float64):
            # zero weights and bias halve every channel
            gate = GatingParams(Tensor(np.zeros((5, 5))), Tensor(np.zeros(5)))
            np.testing.assert_allclose(feature_gate(Tensor(x), gate).data,
                                       0.5 * x)
            with pytest.raises(ShapeError):
                feature_gate(Tensor(x[..., :4]), gate)
        with pytest.raises(ShapeError):
            GatingParams(Tensor(np.zeros((5, 4))), Tensor(np.zeros(5)))

    def test_shapes(self):
        params = build_backbone(self.cfg)
        with no_grad():
            logits, acts = forward(params, self.cfg, self.x,
                                   return_activations=True)
        assert logits.shape == (2, 3)
        assert list(acts) == ['stem', 'pool', 'stage2', 'stage3', 'pooled']
        expected = stage_output_shapes(self.cfg, self.x.shape)
        for name in ('stem', 'pool', 'stage2', 'stage3'):
            assert acts[name].shape == (2,) + expected[name]
        assert acts['pooled'].shape == (2, 8)
        with pytest.raises(ShapeError):
            forward(params, self.cfg, self.x[..., :2])

    def test_factorized_and_per_cell(self):
        for cfg in (micro_backbone(block_style='factorized'),
                    micro_backbone(gating_per_cell=True),
                    micro_backbone(gating_enabled=False)):
            with no_grad():
                logits = forward(build_backbone(cfg), cfg, self.x)
            assert logits.shape == (2, 3)
            assert np.isfinite(logits.data).all()

    def test_running_statistics(self):
        cfg = micro_backbone(norm='batch')
        params = build_backbone(cfg)
        with no_grad():
            eval_logits = forward(params, cfg, self.x).data
            np.testing.assert_array_equal(
                params['stem.norm.running_mean'].data, 0)
            forward(params, cfg, self.x, training=True)
            assert params['stem.norm.running_mean'].data.any()
            # evaluation now uses the updated statistics
            assert not np.allclose(forward(params, cfg, self.x).data,
                                   eval_logits)

    def test_gradients(self):
        projection = random_array((2, 3), seed=5)
        with default_dtype(np.float64):
            x = self.x.astype(np.float64)
            params = build_backbone(self.cfg, seed=1)
            # non-zero gates and head so every path carries gradient
            for name in ('stage2.gate.w', 'stage3.gate.w'):
                params[name] = Tensor(random_array(params[name].shape,
                                                   seed=6, scale=0.3),
                                      requires_grad=True)
            params['head.w'] = Tensor(random_array((8, 3), seed=7),
                                      requires_grad=True)
            logits = forward(params, self.cfg, x)
            tensor_sum(mul(logits, projection)).backward()
            arrays = {name: t.numpy() for name, t in params.items()}

            for name, indices in (
                    ('stem.conv.w', [(0, 0, 0, 0, 0), (1, 1, 1, 2, 3),
                                     (2, 2, 0, 1, 1)]),
                    ('stage3.cell1.conv2.w', [(0, 1, 1, 0, 1),
                                              (0, 2, 0, 1, 0)]),
                    ('stage2.gate.w', [(0, 1), (3, 2)]),
                    ('head.w', [(0, 0), (7, 2)])):
                def value():
                    with no_grad():
                        fresh = ModelParams({n: Tensor(a) for n, a in
                                             arrays.items()})
                        return tensor_sum(mul(forward(fresh, self.cfg, x),
                                              projection)).item()
                numeric = numerical_gradient(value, arrays[name], eps=1e-6,
                                             indices=indices)
                analytic = params[name].grad
                picked = [analytic[i] for i in indices]
                expected = [numeric[i] for i in indices]
                assert relative_error(picked, expected) < 1e-4
