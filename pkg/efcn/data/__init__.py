from .dataset import SegDataset, SegSample, load_dataset
from .formats import (
    load_mask,
    load_ppm,
    load_tensor,
    render_assignment,
    render_labels,
    save_mask,
    save_ppm,
    save_tensor,
)
from .synthetic import gen_synthetic

__all__ = [
    "SegDataset",
    "SegSample",
    "gen_synthetic",
    "load_dataset",
    "load_mask",
    "load_ppm",
    "load_tensor",
    "render_assignment",
    "render_labels",
    "save_mask",
    "save_ppm",
    "save_tensor",
]
