"""Lightweight multimodal trajectory prediction with map-based goal features."""

from .features import GoalSamplerConfig, GoalSet, SmoothingConfig, estimate_dynamic_state, sample_goal_points
from .losses import LossWeights, MetricReport, ade, fde, min_ade_k, min_fde_k, nll, total_loss
from .models import ModelConfig, PredictionSet, forward_lstm_mhsa, forward_set_transformer, init_params
from .scene import AgentTrack, FeasibleGrid, Scene, SceneBundle, load_scene_bundle, save_scene_bundle
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
