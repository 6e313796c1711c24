"""VGG-style facial emotion recognition engine in numpy.

Layers, optimizers, learning-rate schedules, the FER2013 data pipeline,
ten-crop evaluation and saliency maps, all with explicit backward passes.
"""

from .model import VggConfig, VggModel, build, load_checkpoint, save_checkpoint
from .optim import HyperParams, Optimizer
from .tensor import SeededRng

__version__ = "0.1.0"

__all__ = ["VggConfig", "VggModel", "build", "load_checkpoint", "save_checkpoint",
           "HyperParams", "Optimizer", "SeededRng"]
