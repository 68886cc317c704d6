"""CPU differentiable Gaussian splatting with tactile regularization."""
from .core_math import Camera, GaussianSet, GradientSet, TOUCH, VISION
from .errors import TactSplatError

__all__ = ["Camera", "GaussianSet", "GradientSet", "TOUCH", "VISION", "TactSplatError"]
__version__ = "0.1.0"
