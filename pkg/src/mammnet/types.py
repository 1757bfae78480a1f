"""Immutable domain records: an image pair and its instance annotation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

VIEWS = ("cc", "mlo")
LATERALITIES = ("left", "right")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImagePair:
    """CC and MLO views of one breast, intensities in [0, 1]."""

    cc_image: np.ndarray
    mlo_image: np.ndarray
    case_id: str = ""
    laterality: str = "left"

    def __post_init__(self):
        cc = _frozen(np.asarray(self.cc_image, dtype=np.float32))
        mlo = _frozen(np.asarray(self.mlo_image, dtype=np.float32))
        if cc.ndim != 2 or mlo.ndim != 2:
            raise ShapeError(f"images must be 2-D, got {cc.shape} and {mlo.shape}")
        if cc.shape != mlo.shape:
            raise ShapeError(f"cc image {cc.shape} and mlo image {mlo.shape} differ in shape")
        for axis, size in zip(("height", "width"), cc.shape):
            if size % 32:
                raise ShapeError(f"image {axis} {size} is not divisible by 32")
        if self.laterality not in LATERALITIES:
            raise ConfigError(f"laterality must be one of {LATERALITIES}, got {self.laterality!r}")
        object.__setattr__(self, "cc_image", cc)
        object.__setattr__(self, "mlo_image", mlo)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cc_image.shape

    def view(self, name: str) -> np.ndarray:
        return self.cc_image if name == "cc" else self.mlo_image

    def __eq__(self, other):
        if not isinstance(other, ImagePair):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.laterality == other.laterality
            and np.array_equal(self.cc_image, other.cc_image)
            and np.array_equal(self.mlo_image, other.mlo_image)
        )


@dataclass(frozen=True, eq=False)
class InstanceGT:
    mask: np.ndarray
    malignant: bool

    def __post_init__(self):
        mask = _frozen(np.asarray(self.mask, dtype=bool))
        if mask.ndim != 2:
            raise ShapeError(f"instance mask must be 2-D, got shape {mask.shape}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "malignant", bool(self.malignant))

    def __eq__(self, other):
        if not isinstance(other, InstanceGT):
            return NotImplemented
        return self.malignant == other.malignant and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class CaseAnnotation:
    """Per-view instances plus the set of (cc_index, mlo_index) pairs."""

    cc: tuple[InstanceGT, ...] = ()
    mlo: tuple[InstanceGT, ...] = ()
    pair_map: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "cc", tuple(self.cc))
        object.__setattr__(self, "mlo", tuple(self.mlo))
        pairs = frozenset((int(a), int(b)) for a, b in self.pair_map)
        object.__setattr__(self, "pair_map", pairs)
        seen_cc, seen_mlo = set(), set()
        for i, j in pairs:
            if not (0 <= i < len(self.cc) and 0 <= j < len(self.mlo)):
                raise ConfigError(
                    f"pair ({i}, {j}) out of range for {len(self.cc)} cc / {len(self.mlo)} mlo instances"
                )
            if i in seen_cc or j in seen_mlo:
                raise ConfigError(f"instance appears in more than one pair: ({i}, {j})")
            seen_cc.add(i)
            seen_mlo.add(j)

    def view(self, name: str) -> tuple[InstanceGT, ...]:
        return self.cc if name == "cc" else self.mlo

    @property
    def num_instances(self) -> int:
        return len(self.cc) + len(self.mlo)

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pair_map)
