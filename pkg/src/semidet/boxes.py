"""Axis-aligned boxes shared by the detector, metrics, and data modules."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in image pixels, xyxy convention.

    ``score`` is absent (None) for ground truth.  ``delta`` optionally
    carries the per-side localization uncertainty of the prediction that
    produced the box, ordered (left, top, right, bottom).
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int
    score: float | None = None
    delta: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clipped(self, width: float, height: float) -> "Box":
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min,
                self.x_max - self.x_min, self.y_max - self.y_min)


def box_from_xywh(x: float, y: float, w: float, h: float, class_id: int,
                  score: float | None = None) -> Box:
    return Box(x, y, x + w, y + h, class_id, score)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)
