"""Knowledge distillation as conditional diffusion of teacher features."""
from .errors import ConfigError, GenDDError, NonFiniteError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "GenDDError", "NonFiniteError", "ValidationError", "__version__"]
