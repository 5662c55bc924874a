"""Axis-aligned box arithmetic: IoU, box-offset coding, and greedy NMS.

Boxes are stored in corner form ``(x1, y1, x2, y2)``; center form is derived
on demand. Offsets follow the standard two-stage-detector parameterization:
center shifts normalized by the reference box size, log-scale size ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

#: Decode clamps |dw| and |dh| to this bound before exponentiation, so a
#: predicted size ratio can never exceed e^4 (~54.6x).
DELTA_CLAMP = 4.0

# Minimum extent kept when clipping pushes a box edge-on against the image.
_MIN_CLIPPED_EXTENT = 1e-3


class InvalidBoxError(ValueError):
    """A box with non-positive extent or non-finite coordinates."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, corners in image units (pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        # normalize numpy scalars so equality and repr-based serialization
        # behave uniformly
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def scale(self) -> float:
        """sqrt(area), the side length of the equivalent square."""
        return math.sqrt(self.area)

    def is_valid(self) -> bool:
        coords = (self.x1, self.y1, self.x2, self.y2)
        return all(math.isfinite(c) for c in coords) and self.x2 > self.x1 and self.y2 > self.y1

    def validate(self) -> None:
        if not self.is_valid():
            raise InvalidBoxError(f"degenerate or non-finite box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> "Box":
        hw, hh = 0.5 * width, 0.5 * height
        return cls(cx - hw, cy - hh, cx + hw, cy + hh)


@dataclass(frozen=True)
class Delta:
    """Regression offset (dx, dy, dw, dh) of a target box relative to a proposal.

    dx, dy are center shifts in units of the proposal width/height; dw, dh are
    natural-log size ratios. All four are dimensionless.
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    @classmethod
    def zero(cls) -> "Delta":
        return cls(0.0, 0.0, 0.0, 0.0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes; 0.0 when disjoint."""
    a.validate()
    b.validate()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def encode_delta(proposal: Box, target: Box) -> Delta:
    """Encode ``target`` relative to ``proposal``.

    dx = (cx_t - cx_p) / w_p, dy analogous; dw = ln(w_t / w_p), dh analogous.
    """
    proposal.validate()
    target.validate()
    return Delta(
        dx=(target.cx - proposal.cx) / proposal.width,
        dy=(target.cy - proposal.cy) / proposal.height,
        dw=math.log(target.width / proposal.width),
        dh=math.log(target.height / proposal.height),
    )


def decode_delta(
    proposal: Box,
    delta: Delta,
    clamp: float = DELTA_CLAMP,
    image_size: tuple[float, float] | None = None,
) -> Box:
    """Apply ``delta`` to ``proposal``; exact inverse of :func:`encode_delta`
    for in-range offsets.

    dw/dh are clamped to ``[-clamp, clamp]`` before exponentiation so the
    output is always finite. When ``image_size=(width, height)`` is given the
    box is clipped to the image, keeping a minimal positive extent.
    """
    proposal.validate()
    if not delta.is_finite():
        raise ValueError(f"delta must be finite, got {delta.as_tuple()}")
    dw = min(max(delta.dw, -clamp), clamp)
    dh = min(max(delta.dh, -clamp), clamp)
    cx = proposal.cx + delta.dx * proposal.width
    cy = proposal.cy + delta.dy * proposal.height
    w = proposal.width * math.exp(dw)
    h = proposal.height * math.exp(dh)
    box = Box.from_center(cx, cy, w, h)
    if image_size is not None:
        box = _clip(box, image_size[0], image_size[1])
    return box


def _clip(box: Box, img_w: float, img_h: float) -> Box:
    x1 = min(max(box.x1, 0.0), img_w)
    y1 = min(max(box.y1, 0.0), img_h)
    x2 = min(max(box.x2, 0.0), img_w)
    y2 = min(max(box.y2, 0.0), img_h)
    if x2 - x1 < _MIN_CLIPPED_EXTENT:
        x1 = max(0.0, min(x1, img_w - _MIN_CLIPPED_EXTENT))
        x2 = x1 + _MIN_CLIPPED_EXTENT
    if y2 - y1 < _MIN_CLIPPED_EXTENT:
        y1 = max(0.0, min(y1, img_h - _MIN_CLIPPED_EXTENT))
        y2 = y1 + _MIN_CLIPPED_EXTENT
    return Box(x1, y1, x2, y2)


def nms(detections: Sequence[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Detections are visited in descending score order (ties broken by input
    index); one is suppressed iff a previously kept detection overlaps it
    with IoU strictly greater than ``iou_threshold``. Returns kept indices
    in visit order. Empty input yields an empty list.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    for _, score in detections:
        if not math.isfinite(score):
            raise ValueError("detection scores must be finite")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    kept: list[int] = []
    for i in order:
        box = detections[i][0]
        if all(iou(box, detections[k][0]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept
