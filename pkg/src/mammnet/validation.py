"""Input checks and coercions shared by the estimator and the command line."""

from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .types import CaseAnnotation, ImagePair

log = logging.getLogger(__name__)


def check_image(image, name: str = "image") -> np.ndarray:
    """Return a 2-D float32 array in [0, 1].

    Integer images are scaled by their type's maximum (8- and 16-bit
    grayscale); float images must already lie in [0, 1].
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D grayscale, got shape {arr.shape}")
    if arr.dtype.kind in "ui":
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
            raise ValueError(f"{name} pixel values must fit 16-bit grayscale")
        top = 255 if arr.dtype.itemsize == 1 else 65535
        return (arr.astype(np.float64) / top).astype(np.float32)
    if arr.dtype.kind != "f":
        raise ValueError(f"{name} has unsupported dtype {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError(f"{name} must be scaled to [0, 1]")
    return arr.astype(np.float32)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D [0, 1] image."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0]
    return out.clamp(0, 1).numpy()


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]
    return F.interpolate(t, size=size, mode="nearest")[0, 0].numpy() > 0.5


def coerce_pair(cc, mlo, size: int, case_id: str = "", laterality: str = "left") -> tuple[ImagePair, bool]:
    """Build a model-ready pair, resizing both views to ``size``×``size`` if needed.

    Returns the pair and whether a resize happened; a warning is logged when
    the views disagree in size or are not the configured size.
    """
    cc = check_image(cc, "cc image")
    mlo = check_image(mlo, "mlo image")
    target = (size, size)
    resized = False
    if cc.shape != target or mlo.shape != target:
        reason = "cc/mlo sizes differ" if cc.shape != mlo.shape else "size differs from model config"
        if any(d % 32 for d in cc.shape + mlo.shape):
            reason = "size not divisible by 32"
        log.warning("%s (cc %s, mlo %s): resizing both views to %s", reason, cc.shape, mlo.shape, target)
        cc, mlo = resize_image(cc, target), resize_image(mlo, target)
        resized = True
    return ImagePair(cc, mlo, case_id=case_id, laterality=laterality), resized


def check_cases(X, y=None) -> list[tuple[ImagePair, CaseAnnotation]]:
    """Accept ``X`` as (pair, annotation) tuples, or pairs with annotations in ``y``."""
    X = list(X)
    if y is not None:
        y = list(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} pairs but y has {len(y)} annotations")
        X = list(zip(X, y))
    out = []
    for k, item in enumerate(X):
        if not (isinstance(item, tuple) and len(item) == 2
                and isinstance(item[0], ImagePair) and isinstance(item[1], CaseAnnotation)):
            raise TypeError(f"item {k} is not an (ImagePair, CaseAnnotation) tuple")
        out.append(item)
    if not out:
        raise ValueError("no cases given")
    return out


def check_pairs(X: Iterable) -> list[ImagePair]:
    pairs = []
    for k, item in enumerate(X):
        pair = item[0] if isinstance(item, tuple) else item
        if not isinstance(pair, ImagePair):
            raise TypeError(f"item {k} is not an ImagePair")
        pairs.append(pair)
    return pairs


def parse_fpis(text: str | Sequence[float]) -> tuple[float, ...]:
    """Parse ``"0.25,0.5,1.0"`` into positive floats."""
    if isinstance(text, str):
        try:
            values = tuple(float(part) for part in text.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"cannot parse FPI list {text!r}") from exc
    else:
        values = tuple(float(v) for v in text)
    if not values or any(not v > 0 for v in values):
        raise ConfigError(f"FPI values must be positive, got {values}")
    return values
