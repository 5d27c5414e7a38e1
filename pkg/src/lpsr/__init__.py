"""License-plate super-resolution guided by a layout- and character-aware OCR loss."""

from lpsr.alphabet import ALPHABET, Alphabet, InvalidLabelError, LAYOUTS, LayoutSpec, LpLabel

__version__ = "0.1.0"

__all__ = [
    "ALPHABET",
    "Alphabet",
    "InvalidLabelError",
    "LAYOUTS",
    "LayoutSpec",
    "LpLabel",
    "__version__",
]
