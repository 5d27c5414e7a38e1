"""Character alphabet, plate layouts and label encoding."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

LETTER = "L"
DIGIT = "D"


class InvalidLabelError(ValueError):
    """A plate label contains unknown glyphs or violates its layout."""


class Alphabet:
    """Ordered OCR classes: digits ``0-9`` (indices 0-9) then letters ``A-Z`` (10-35)."""

    def __init__(self, symbols: str = string.digits + string.ascii_uppercase):
        if len(set(symbols)) != len(symbols):
            raise ValueError("alphabet symbols must be unique")
        self.symbols = symbols
        self._index = {c: i for i, c in enumerate(symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __repr__(self) -> str:
        return f"Alphabet({self.symbols!r})"

    def class_of(self, char: str) -> int:
        try:
            return self._index[char]
        except KeyError:
            raise InvalidLabelError(f"character {char!r} is not in the alphabet") from None

    def is_digit(self, index: int) -> bool:
        return self.symbols[index].isdigit()

    def is_letter(self, index: int) -> bool:
        return self.symbols[index].isalpha()

    @property
    def digit_mask(self) -> np.ndarray:
        return np.array([c.isdigit() for c in self.symbols])

    @property
    def letter_mask(self) -> np.ndarray:
        return np.array([c.isalpha() for c in self.symbols])

    def encode(self, text: str) -> list[int]:
        return [self.class_of(c) for c in text]

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.symbols[int(i)] for i in indices)


ALPHABET = Alphabet()


@dataclass(frozen=True)
class LayoutSpec:
    id: str
    pattern: tuple[str, ...]

    def __post_init__(self):
        if len(self.pattern) != 7:
            raise ValueError(f"layout {self.id!r} must have 7 positions")
        if any(p not in (LETTER, DIGIT) for p in self.pattern):
            raise ValueError(f"layout {self.id!r} has positions other than L/D")

    def matches(self, text: str) -> bool:
        if len(text) != len(self.pattern):
            return False
        for c, p in zip(text, self.pattern):
            if p == LETTER and not ("A" <= c <= "Z"):
                return False
            if p == DIGIT and not ("0" <= c <= "9"):
                return False
        return True

    def random_text(self, rng: np.random.Generator) -> str:
        out = []
        for p in self.pattern:
            pool = string.ascii_uppercase if p == LETTER else string.digits
            out.append(pool[rng.integers(len(pool))])
        return "".join(out)


LAYOUTS: dict[str, LayoutSpec] = {
    "brazilian": LayoutSpec("brazilian", tuple("LLLDDDD")),
    "mercosur": LayoutSpec("mercosur", tuple("LLLDLDD")),
}


def get_layout(layout_id: str) -> LayoutSpec:
    try:
        return LAYOUTS[layout_id]
    except KeyError:
        raise InvalidLabelError(f"unknown layout {layout_id!r}") from None


@dataclass(frozen=True)
class LpLabel:
    """A 7-character plate string tied to its layout. Validated on construction."""

    text: str
    layout: str

    def __post_init__(self):
        spec = get_layout(self.layout)
        for c in self.text:
            ALPHABET.class_of(c)
        if not spec.matches(self.text):
            raise InvalidLabelError(
                f"label {self.text!r} does not follow the {self.layout} pattern "
                f"{''.join(spec.pattern)}"
            )

    @property
    def spec(self) -> LayoutSpec:
        return LAYOUTS[self.layout]


def encode_label(label: LpLabel | str, alphabet: Alphabet = ALPHABET) -> list[int]:
    text = label.text if isinstance(label, LpLabel) else label
    return alphabet.encode(text)


def decode_label(indices: Sequence[int], alphabet: Alphabet = ALPHABET) -> str:
    return alphabet.decode(indices)


def infer_layout(text: str) -> str:
    """Return the id of the layout ``text`` follows, or raise."""
    for spec in LAYOUTS.values():
        if spec.matches(text):
            return spec.id
    raise InvalidLabelError(f"{text!r} matches no known layout")
