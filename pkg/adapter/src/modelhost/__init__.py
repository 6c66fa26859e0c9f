"""Backend-protocol service wrapping real segmentation, embedding,
generation and training models."""

__version__ = "0.1.0"

from .config import AdapterConfig
from .service import create_app

__all__ = ["AdapterConfig", "create_app", "__version__"]
