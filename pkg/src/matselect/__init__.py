"""matselect: two-level (texture / subtexture) material selection in images."""

from matselect.core import QueryPoint, make_rng, resample_area, resample_bilinear, threshold_mask
from matselect.head import SelectionModel, create_model, load_checkpoint, save_checkpoint

__all__ = [
    "QueryPoint",
    "SelectionModel",
    "create_model",
    "load_checkpoint",
    "make_rng",
    "resample_area",
    "resample_bilinear",
    "save_checkpoint",
    "threshold_mask",
]

__version__ = "0.1.0"
