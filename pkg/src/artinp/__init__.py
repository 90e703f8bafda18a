"""Gap completion and CBCT-to-synthetic-CT translation for radiotherapy volumes."""
from ._core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
