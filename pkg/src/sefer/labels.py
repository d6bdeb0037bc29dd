"""Canonical expression label codes.

Order is fixed across the whole pipeline: parsers remap into it, the loss
weights are indexed by it, and reports print it. Code 0..6, -1 is the
"unannotated" sentinel used by per-frame annotation files and never leaves
the parsers.
"""

from .errors import ContractError

CLASS_NAMES = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise")
NUM_CLASSES = len(CLASS_NAMES)

INVALID_SENTINEL = -1

NEUTRAL, ANGER, DISGUST, FEAR, HAPPINESS, SADNESS, SURPRISE = range(NUM_CLASSES)


def check_label(value: int) -> int:
    """Validate a canonical label code, returning it unchanged."""
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < NUM_CLASSES:
        raise ContractError(f"label code must be an integer in 0..{NUM_CLASSES - 1}, got {value!r}")
    return value


def class_name(value: int) -> str:
    return CLASS_NAMES[check_label(value)]
