"""One-hot emotion/speaker identifiers and per-layer auxiliary vectors.

Emotion and speaker indices are 1-based. The neutral emotion is not an index:
it is the ``NEUTRAL`` sentinel and encodes to the all-zero emotion vector.
"""

from __future__ import annotations

import enum
from typing import Union

import numpy as np

from factored_tts.errors import InvalidConfig, InvalidFactorIndex, InvalidPlacement, ShapeError


class Neutral(enum.Enum):
    NEUTRAL = "neutral"

    def __repr__(self):
        return "NEUTRAL"


NEUTRAL = Neutral.NEUTRAL

EmotionIndex = Union[int, Neutral]


class Architecture(str, enum.Enum):
    PM = "PM"
    SM_SE = "SM_se"
    SM_ES = "SM_es"
    AIM = "AIM"
    PM_AIM = "PM&AIM"
    SM_SE_AIM = "SM_se&AIM"
    SM_ES_AIM = "SM_es&AIM"
    SED = "SED"

    @classmethod
    def parse(cls, value) -> "Architecture":
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.value, member.name):
                return member
        raise InvalidConfig(f"unknown architecture {value!r}")

    @property
    def has_input_aux(self) -> bool:
        return self in (Architecture.AIM, Architecture.PM_AIM,
                        Architecture.SM_SE_AIM, Architecture.SM_ES_AIM)

    @property
    def serial_order(self):
        """(hidden factor, output factor) for serial models, else None."""
        if self in (Architecture.SM_SE, Architecture.SM_SE_AIM):
            return ("speaker", "emotion")
        if self in (Architecture.SM_ES, Architecture.SM_ES_AIM):
            return ("emotion", "speaker")
        return None

    @property
    def is_parallel(self) -> bool:
        return self in (Architecture.PM, Architecture.PM_AIM)

    def placements(self) -> tuple:
        out = []
        if self.has_input_aux:
            out.append(Placement.INPUT)
        if self.serial_order is not None:
            out.append(Placement.HIDDEN)
        if self.is_parallel or self.serial_order is not None:
            out.append(Placement.OUTPUT)
        return tuple(out)

    def __str__(self):
        return self.value


class Placement(str, enum.Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value) -> "Placement":
        try:
            return cls(value)
        except ValueError:
            raise InvalidPlacement(f"unknown layer placement {value!r}") from None


def _check_count(count: int, name: str, minimum: int = 1) -> None:
    if int(count) != count or count < minimum:
        raise InvalidFactorIndex(f"{name} must be an integer >= {minimum}, got {count!r}")


def emotion_id(i: EmotionIndex, M: int) -> np.ndarray:
    """Emotion vector of length M; ``NEUTRAL`` gives zeros."""
    _check_count(M, "emotion count M")
    vec = np.zeros(M, dtype=np.float64)
    if i is NEUTRAL:
        return vec
    if isinstance(i, bool) or not isinstance(i, (int, np.integer)) or not 1 <= i <= M:
        raise InvalidFactorIndex(f"emotion index {i!r} outside 1..{M}")
    vec[i - 1] = 1.0
    return vec


def speaker_id(j: int, N: int) -> np.ndarray:
    _check_count(N, "speaker count N")
    if isinstance(j, bool) or not isinstance(j, (int, np.integer)) or not 1 <= j <= N:
        raise InvalidFactorIndex(f"speaker index {j!r} outside 1..{N}")
    vec = np.zeros(N, dtype=np.float64)
    vec[j - 1] = 1.0
    return vec


def is_valid_emotion_id(values) -> bool:
    v = np.asarray(values)
    return v.ndim == 1 and bool(np.all((v == 0) | (v == 1))) and v.sum() <= 1


def is_valid_speaker_id(values) -> bool:
    v = np.asarray(values)
    return v.ndim == 1 and bool(np.all((v == 0) | (v == 1))) and v.sum() == 1


def _ones_like_rows(ref: np.ndarray) -> np.ndarray:
    return np.ones(ref.shape[:-1] + (1,), dtype=np.float64)


def layer_aux(arch, placement, e, s) -> np.ndarray:
    """Auxiliary vector feeding the layer at ``placement`` of ``arch``.

    ``e`` and ``s`` may be single vectors or row-stacked batches; the result
    has the same leading shape. Entries are taken as given, so soft
    (interpolated) identities pass through unchanged.
    """
    arch = Architecture.parse(arch)
    placement = Placement.parse(placement)
    if placement not in arch.placements():
        raise InvalidPlacement(f"{arch.value} has no auxiliary input at the {placement.value} layer")
    e = np.asarray(e, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if e.ndim not in (1, 2) or s.ndim != e.ndim or e.shape[:-1] != s.shape[:-1]:
        raise ShapeError(f"incompatible emotion/speaker shapes {e.shape} and {s.shape}")

    if placement is Placement.INPUT:
        return np.concatenate([e, s], axis=-1)
    one = _ones_like_rows(e)
    if placement is Placement.OUTPUT and arch.is_parallel:
        return np.concatenate([e, s, one], axis=-1)
    hidden_factor, output_factor = arch.serial_order
    factor = hidden_factor if placement is Placement.HIDDEN else output_factor
    return np.concatenate([e if factor == "emotion" else s, one], axis=-1)


def aux_width(arch, placement, M: int, N: int) -> int:
    """Length of the vector ``layer_aux`` produces for the given counts."""
    arch = Architecture.parse(arch)
    placement = Placement.parse(placement)
    if placement not in arch.placements():
        raise InvalidPlacement(f"{arch.value} has no auxiliary input at the {placement.value} layer")
    if placement is Placement.INPUT:
        return M + N
    if placement is Placement.OUTPUT and arch.is_parallel:
        return M + N + 1
    hidden_factor, output_factor = arch.serial_order
    factor = hidden_factor if placement is Placement.HIDDEN else output_factor
    return (M if factor == "emotion" else N) + 1
