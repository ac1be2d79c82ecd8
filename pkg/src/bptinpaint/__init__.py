"""Image inpainting with block-wise procedural growth, hole-aware patch adversarial
losses and a patch perceptual loss, on a small numpy autograd engine."""

from .config import Config
from .models import FeatureStack, GeneratorNet, PatchDiscriminator, build_discriminators, build_generator

__version__ = "0.1.0"

__all__ = [
    "Config",
    "FeatureStack",
    "GeneratorNet",
    "PatchDiscriminator",
    "build_discriminators",
    "build_generator",
]
