"""Safety-preserving sequential low-rank adaptation on a toy differentiable model."""

from .config import RunConfig, load_config
from .pipeline import Run, run

__all__ = ["RunConfig", "Run", "load_config", "run"]
__version__ = "0.1.0"
