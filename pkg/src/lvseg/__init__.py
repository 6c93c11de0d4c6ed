"""Two-phase left-ventricle segmentation for short-axis cardiac MR."""
from .classifier import SliceClass
from .errors import LvSegError

__version__ = "0.1.0"

__all__ = ["SliceClass", "LvSegError", "__version__"]
