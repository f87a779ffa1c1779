"""Robust proxy pre-training and adaptive gradient search for offline MBO."""
from .kernels import BACKEND
from .proxy import ProxyNet, WeightDelta, forward, input_gradient, project_to_ball

__version__ = "0.1.0"

__all__ = ["BACKEND", "ProxyNet", "WeightDelta", "forward", "input_gradient",
           "project_to_ball", "__version__"]
