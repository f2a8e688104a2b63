"""Multi-attention associate prediction network and Siamese tracker."""
from .config import RunConfig, parse_config
from .model import MAPNet, build_model
from .tracker import SiameseTracker

__version__ = "0.1.0"

__all__ = ["MAPNet", "RunConfig", "SiameseTracker", "build_model", "parse_config"]
