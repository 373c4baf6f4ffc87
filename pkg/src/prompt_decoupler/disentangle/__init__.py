"""Semantic masks, mask perturbations and visual triplets."""
from prompt_decoupler.disentangle.masks import (
    CamMap,
    GradCamMasker,
    SemanticMask,
    cam_from_activation,
    erase_mask,
    gaussian_blur,
    gaussian_kernel,
    gradcam_mask,
    oracle_mask,
)
from prompt_decoupler.disentangle.triplets import VisualTriplet, blur_mask, make_triplet
from prompt_decoupler.disentangle.visualize import heatmap_bytes, overlay_bytes, write_heatmap, write_overlay

__all__ = [
    "CamMap",
    "GradCamMasker",
    "SemanticMask",
    "VisualTriplet",
    "blur_mask",
    "cam_from_activation",
    "erase_mask",
    "gaussian_blur",
    "gaussian_kernel",
    "gradcam_mask",
    "heatmap_bytes",
    "make_triplet",
    "oracle_mask",
    "overlay_bytes",
    "write_heatmap",
    "write_overlay",
]
