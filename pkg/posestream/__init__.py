"""posestream is a package for multi-stream action recognition on video:
RGB, optical-flow and rendered-pose streams built on a gated 3D residual
backbone, with late fusion and multi-teacher logit distillation.
"""

__author__ = """Nael Aqel"""
__email__ = 'dev@naelaqel.com'
__version__ = '0.1.0'

from .backbone import BackboneConfig, ModelParams, build_backbone, forward
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import ClipSample, StreamBuilder, SyntheticSpec
from .exceptions import (ConfigError, ContractError, DivergenceError,
                         IoError, PoseStreamError, ShapeError)
from .optical_flow import FlowParams, clip_flow_stack, tvl1_flow
from .pose_render import PoseFrame, PoseRenderer, RenderSpec
from .tensor import Tensor
from .training import (DistillConfig, EvalReport, OptimConfig,
                       distill_loss, late_fuse_eval, train)
