"""Spatial transforms used as the trigger and as the benign augmenter.

Images are ``float32`` arrays laid out ``(C, H, W)`` with intensities in
[0, 1]. Every function also accepts a stack ``(..., C, H, W)`` and applies
the same transform to each image, which is how the poisoner and evaluator
batch their work.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream


class TransformError(ValueError):
    """Base class for invalid transform inputs."""


class ImageValidationError(TransformError):
    pass


class ParameterRangeError(TransformError):
    pass


class Kind(str, enum.Enum):
    ROTATION = "rotation"
    TRANSLATION = "translation"

    @classmethod
    def parse(cls, value: "Kind | str") -> "Kind":
        if isinstance(value, Kind):
            return value
        aliases = {"batt-r": cls.ROTATION, "r": cls.ROTATION, "batt-t": cls.TRANSLATION, "t": cls.TRANSLATION}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass(frozen=True)
class TransformSpec:
    kind: Kind
    parameter: float
    fill: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))


@dataclass(frozen=True)
class ParamDomain:
    kind: Kind
    low: float
    high: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if self.low > self.high:
            raise ParameterRangeError(f"domain low {self.low} exceeds high {self.high}")
        if self.kind is Kind.TRANSLATION and (self.low != int(self.low) or self.high != int(self.high)):
            raise ParameterRangeError("translation domain bounds must be integers")

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check layout and value range; returns the array unchanged."""
    if not isinstance(image, np.ndarray):
        raise ImageValidationError(f"expected numpy array, got {type(image).__name__}")
    if image.ndim < 3:
        raise ImageValidationError(f"expected (C, H, W) layout, got shape {image.shape}")
    if image.dtype != np.float32:
        raise ImageValidationError(f"expected float32 intensities, got {image.dtype}")
    if image.size == 0 or min(image.shape[-3:]) < 1:
        raise ImageValidationError(f"empty image shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if not (0.0 <= lo and hi <= 1.0):
        raise ImageValidationError(f"intensities outside [0, 1]: min={lo}, max={hi}")
    return image


def _check_fill(fill: float) -> None:
    if not 0.0 <= fill <= 1.0:
        raise ParameterRangeError(f"fill intensity {fill} outside [0, 1]")


def _sin_cos_degrees(angle: float) -> tuple[float, float]:
    # exact values at multiples of 90 degrees keep quarter turns pure permutations
    quarter = angle / 90.0
    if quarter == int(quarter):
        return [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][int(quarter) % 4]
    rad = math.radians(angle)
    return math.sin(rad), math.cos(rad)


def _bilinear_gather(image: np.ndarray, src_r: np.ndarray, src_c: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``image`` at fractional (row, col) grids; outside the grid -> fill."""
    h, w = image.shape[-2:]
    inside = (src_r >= 0) & (src_r <= h - 1) & (src_c >= 0) & (src_c <= w - 1)
    r = np.clip(src_r, 0, h - 1)
    c = np.clip(src_c, 0, w - 1)
    # on-grid sources get weight 0 on the second neighbour, so they copy exactly
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0

    src = image.astype(np.float64, copy=False)
    v00 = src[..., r0, c0]
    v01 = src[..., r0, c1]
    v10 = src[..., r1, c0]
    v11 = src[..., r1, c1]
    # lerp form keeps constants and zero offsets exact
    top = v00 + fc * (v01 - v00)
    bottom = v10 + fc * (v11 - v10)
    out = top + fr * (bottom - top)
    out = np.where(inside, out, fill)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rotation_source_grid(h: int, w: int, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every output pixel of a counterclockwise rotation.

    Rows grow downward, so a counterclockwise turn on screen maps output
    offset (dy, dx) to source offset (dx*sin + dy*cos, dx*cos - dy*sin).
    """
    s, c = _sin_cos_degrees(angle)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = cy + dx * s + dy * c
    src_c = cx + dx * c - dy * s
    return src_r, src_c


def rotate(image: np.ndarray, angle: float, fill: float = 0.0) -> np.ndarray:
    """Rotate counterclockwise by ``angle`` degrees about the pixel-grid center."""
    validate_image(image)
    _check_fill(fill)
    if not -180.0 < angle <= 180.0:
        raise ParameterRangeError(f"rotation angle {angle} outside (-180, 180]")
    h, w = image.shape[-2:]
    src_r, src_c = rotation_source_grid(h, w, angle)
    return _bilinear_gather(image, src_r, src_c, fill)


def translate_h(image: np.ndarray, dx: int, fill: float = 0.0) -> np.ndarray:
    """Shift content ``dx`` columns to the right (negative: left); exact."""
    validate_image(image)
    _check_fill(fill)
    if int(dx) != dx:
        raise ParameterRangeError(f"translation must be an integer pixel count, got {dx}")
    dx = int(dx)
    w = image.shape[-1]
    if abs(dx) >= w:
        raise ParameterRangeError(f"|dx|={abs(dx)} must be smaller than width {w}")
    out = np.full_like(image, np.float32(fill))
    if dx >= 0:
        out[..., dx:] = image[..., : w - dx]
    else:
        out[..., : w + dx] = image[..., -dx:]
    return out


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment (edges clamp)."""
    validate_image(image)
    if out_h < 1 or out_w < 1:
        raise ParameterRangeError(f"target size {out_h}x{out_w} must be at least 1x1")
    h, w = image.shape[-2:]
    rows = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    cols = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    src_r, src_c = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear_gather(image, src_r, src_c, 0.0)


def sample_param(domain: ParamDomain, stream: RngStream, kind: Kind | str | None = None) -> float | int:
    """Draw one parameter from ``domain``: continuous for rotation, integer for translation."""
    if kind is not None and Kind.parse(kind) is not domain.kind:
        raise TransformError(f"domain is for {domain.kind.value}, requested {Kind.parse(kind).value}")
    if domain.kind is Kind.ROTATION:
        if domain.low == domain.high:
            return float(domain.low)
        u = stream.uniform()
        return min(domain.low + (domain.high - domain.low) * u, domain.high)
    return stream.integer(int(domain.low), int(domain.high))


def check_parameter(kind: Kind | str, parameter: float, width: int | None = None) -> None:
    kind = Kind.parse(kind)
    if kind is Kind.ROTATION:
        if not -180.0 < parameter <= 180.0:
            raise ParameterRangeError(f"rotation angle {parameter} outside (-180, 180]")
    else:
        if int(parameter) != parameter:
            raise ParameterRangeError(f"translation must be an integer pixel count, got {parameter}")
        if width is not None and abs(parameter) >= width:
            raise ParameterRangeError(f"|dx|={abs(parameter)} must be smaller than width {width}")


def apply(spec: TransformSpec, image: np.ndarray) -> np.ndarray:
    if spec.kind is Kind.ROTATION:
        return rotate(image, float(spec.parameter), spec.fill)
    return translate_h(image, int(spec.parameter), spec.fill)
