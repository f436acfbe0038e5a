"""Teacher-student domain adaptation for a toy lesion detector, in numpy."""
from .config import RunConfig, load_config
from .numerics import Rng

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "Rng", "__version__"]
