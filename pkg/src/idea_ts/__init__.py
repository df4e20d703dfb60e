"""Interpretable dynamic ensembles of basis-expansion learners for univariate forecasting."""
from .model import IDEAModel, ModelConfig

__version__ = "0.1.0"
__all__ = ["IDEAModel", "ModelConfig", "__version__"]
