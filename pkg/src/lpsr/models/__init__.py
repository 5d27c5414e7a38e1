from lpsr.models.checkpoint import CheckpointError, count_parameters, load_weights, save_weights
from lpsr.models.deform import DeformConv2d, deform_conv2d
from lpsr.models.generator import Generator, GeneratorConfig, pixel_shuffle, pixel_unshuffle
from lpsr.models.ocr import BranchOcr, OcrBase, OcrConfig, SlotOcr, build_ocr

__all__ = [
    "BranchOcr",
    "CheckpointError",
    "DeformConv2d",
    "Generator",
    "GeneratorConfig",
    "OcrBase",
    "OcrConfig",
    "SlotOcr",
    "build_ocr",
    "count_parameters",
    "deform_conv2d",
    "load_weights",
    "pixel_shuffle",
    "pixel_unshuffle",
    "save_weights",
]
