"""One-shot text-driven video editing on a toy latent diffusion model."""
from .config import RunConfig, load_config
from .errors import ConfigError, NumericalError, PhaseError

__version__ = "0.1.0"
__all__ = ["RunConfig", "load_config", "ConfigError", "NumericalError", "PhaseError", "__version__"]
