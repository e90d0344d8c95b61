"""Dense networks with learnable spatial gating (xUnit) on a small numpy autodiff core."""

__version__ = "0.1.0"

from dxnet.autodiff import NonFiniteError, Variable, backward, no_grad
from dxnet.blocks import DenseLayerSpec, TransitionSpec, XUnitSpec
from dxnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dxnet.model import ConfigError, Model, NetConfig, build_model, denoise, param_count, predict
from dxnet.probe import PerturbationConfig, cam, estimate_flatness, quadratic_profile
from dxnet.train import evaluate, psnr, recipe, train

__all__ = [
    "NonFiniteError", "Variable", "backward", "no_grad",
    "DenseLayerSpec", "TransitionSpec", "XUnitSpec",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "ConfigError", "Model", "NetConfig", "build_model", "denoise", "param_count", "predict",
    "PerturbationConfig", "cam", "estimate_flatness", "quadratic_profile",
    "evaluate", "psnr", "recipe", "train",
]
