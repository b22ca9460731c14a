"""Explanation test module.
"""

# import modules
import numpy as np
import pytest

from posestream.backbone import build_backbone, stage_output_shapes
from posestream.exceptions import ConfigError, ShapeError
from posestream.explain import (ResponseMap, cam_from_activations, grad_cam,
                                mass_fraction, montage, overlay,
                                upsample_map)
from posestream.tensor import get_tape
from tests.data_generator import micro_backbone, random_array


class TestGradCam:
    """
    This class is to test :func:`grad_cam` on a small backbone.
    """
    def setup_class(self):
        self.cfg = micro_backbone()
        self.params = build_backbone(self.cfg, seed=3)
        self.clip = np.random.default_rng(0).random(
            (8, 32, 32, 3)).astype(np.float32)

    def test_map(self):
        cam = grad_cam(self.params, self.cfg, self.clip)
        assert isinstance(cam, ResponseMap)
        expected = stage_output_shapes(self.cfg, self.clip.shape)['stage3']
        assert cam.shape == expected[:3]
        assert cam.stage == 'stage3'
        assert cam.map.min() >= 0 and cam.map.max() <= 1
        # the tape is left empty
        assert len(get_tape()) == 0
        assert all(tensor.grad is None for _, tensor in self.params.items())

    def test_stage_and_class(self):
        cam = grad_cam(self.params, self.cfg, self.clip[None], class_index=1,
                       stage='stage2')
        assert cam.class_index == 1
        expected = stage_output_shapes(self.cfg, self.clip.shape)['stage2']
        assert cam.shape == expected[:3]

    def test_zero_input(self):
        # zero input and zero shifts keep every activation at zero
        cam = grad_cam(self.params, self.cfg, np.zeros_like(self.clip))
        assert not cam.map.any()

    def test_errors(self):
        with pytest.raises(ConfigError):
            grad_cam(self.params, self.cfg, self.clip, stage='stage5')
        with pytest.raises(ConfigError):
            grad_cam(self.params, self.cfg, self.clip, class_index=3)
        with pytest.raises(ShapeError):
            grad_cam(self.params, self.cfg, np.stack([self.clip] * 2))


class TestCamFromActivations:
    """
    This class is to test :func:`cam_from_activations`.
    """
    def setup_class(self):
        self.activations = np.abs(random_array((2, 3, 4, 5), seed=1))
        self.gradients = random_array((2, 3, 4, 5), seed=2)

    def test_values(self):
        activations = np.zeros((1, 1, 2, 2))
        activations[0, 0, 0] = (1.0, 2.0)
        activations[0, 0, 1] = (3.0, 1.0)
        # channel weights average to (1, -1)
        gradients = np.zeros((1, 1, 2, 2))
        gradients[0, 0, :] = (1.0, -1.0)
        cam = cam_from_activations(activations, gradients)
        np.testing.assert_allclose(cam, [[[0.0, 1.0]]])

    def test_negative_evidence(self):
        # positive activations with negative weights are cut by the relu
        cam = cam_from_activations(self.activations,
                                   -np.abs(self.gradients))
        assert not cam.any()

    def test_normalisation(self):
        cam = cam_from_activations(self.activations, self.gradients)
        scaled = cam_from_activations(self.activations, 4 * self.gradients)
        np.testing.assert_allclose(cam, scaled, rtol=1e-6)
        if cam.any():
            assert cam.max() == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(ShapeError):
            cam_from_activations(self.activations, self.gradients[..., :4])
        with pytest.raises(ShapeError):
            cam_from_activations(self.activations[0], self.gradients[0])


class TestRendering:
    """
    This class is to test overlays, upsampling, mass fractions and
    montages.
    """
    def setup_class(self):
        self.cam = np.zeros((2, 4, 4))
        self.cam[:, 1:3, 1:3] = 1.0
        self.frames = np.full((2, 16, 16, 3), 0.5)

    def test_upsample(self):
        heat = upsample_map(ResponseMap(self.cam, 0, 'stage2'), (16, 16))
        assert heat.shape == (2, 16, 16)
        assert heat.min() >= 0 and heat.max() <= 1

    def test_overlay(self):
        blended = overlay(self.cam, self.frames)
        assert blended.shape == self.frames.shape
        assert blended.dtype == np.float32
        # no heat leaves the frames when alpha is 0
        np.testing.assert_allclose(overlay(self.cam, self.frames, alpha=0),
                                   self.frames)
        # a zero map blends every pixel with the same colour
        flat = overlay(np.zeros((2, 4, 4)), self.frames)
        np.testing.assert_allclose(
            flat, np.broadcast_to(flat[0, 0, 0], flat.shape))
        with pytest.raises(ShapeError):
            overlay(self.cam, self.frames[..., :2])
        with pytest.raises(ShapeError):
            overlay(self.cam[:1], self.frames)

    def test_mass_fraction(self):
        boxes = np.array([[0, 0, 15, 15]] * 2)
        fraction, uniform = mass_fraction(self.cam, boxes, (16, 16))
        assert fraction == pytest.approx(1.0)
        assert uniform == pytest.approx(1.0)
        boxes = np.array([[0, 0, 7, 15]] * 2)
        fraction, uniform = mass_fraction(np.ones((2, 4, 4)), boxes, (16, 16))
        assert uniform == pytest.approx(0.5)
        assert fraction == pytest.approx(0.5)
        assert mass_fraction(np.zeros((2, 4, 4)), boxes, (16, 16))[0] == 0.0
        with pytest.raises(ShapeError):
            mass_fraction(self.cam, boxes[:1], (16, 16))

    def test_montage(self):
        tiled = montage(np.ones((4, 5, 6, 3)))
        assert tiled.shape == (10, 12, 3)
        assert montage(np.ones((3, 5, 6, 3)), grid_shape=(1, 3)).shape == \
            (5, 18, 3)
        # the unused tile of an automatic grid stays black
        tiled = montage(np.ones((3, 5, 6, 3)))
        assert tiled.shape == (10, 12, 3)
        assert tiled[:5, :6].all()
        assert not tiled[5:, 6:].any()
        with pytest.raises(ShapeError):
            montage(np.ones((5, 6, 3)))
