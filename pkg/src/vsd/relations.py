"""The closed nine-way spatial relation inventory and its geometric rules.

Synthetic scenes carry explicit geometry (normalised boxes plus a latent
depth scalar), so the ground-truth relation of an object pair is a total,
deterministic function.  Overlapping readings are resolved by a fixed rule
order; each stage tests a swap-symmetric predicate and orients its answer,
which is what gives the antisymmetry guarantees spelled out next to
``ground_truth_relation``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

__all__ = ["SpatialRelation", "RelationThresholds", "ground_truth_relation"]


class SpatialRelation(Enum):
    """Closed set of nine spatial relations between an ordered object pair."""

    ON = "on"
    IN = "in"
    NEXT_TO = "next_to"
    UNDER = "under"
    ABOVE = "above"
    BEHIND = "behind"
    IN_FRONT_OF = "in_front_of"
    TO_THE_LEFT_OF = "to_the_left_of"
    TO_THE_RIGHT_OF = "to_the_right_of"

    @property
    def phrase(self) -> str:
        """Canonical multi-token textual expression, e.g. ``to the left of``."""
        return self.value.replace("_", " ")

    @property
    def phrase_tokens(self) -> tuple[str, ...]:
        return tuple(self.phrase.split())

    @classmethod
    def from_phrase(cls, phrase: str) -> "SpatialRelation":
        key = "_".join(phrase.strip().split())
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown spatial relation phrase: {phrase!r}") from None


RELATIONS: tuple[SpatialRelation, ...] = tuple(SpatialRelation)
RELATION_INDEX: dict[SpatialRelation, int] = {r: i for i, r in enumerate(RELATIONS)}


@dataclass(frozen=True)
class RelationThresholds:
    """Tunable constants of the geometric rule chain.

    ``contact_eps`` is the bottom-to-top gap tolerated by "on";
    ``depth_delta`` separates depth planes for behind / in front of, and
    doubles as the same-depth band of "on"; ``next_to_dist`` bounds the
    centre distance of "next to"; ``containment`` is the area fraction
    required by "in"; ``overlap_ratio`` is the horizontal-overlap gate of
    the stacked and vertically-aligned stages.
    """

    contact_eps: float = 0.02
    depth_delta: float = 0.2
    next_to_dist: float = 0.15
    containment: float = 0.95
    overlap_ratio: float = 0.5


def _area(b) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def _intersection_area(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0.0, w) * max(0.0, h)


def containment_fraction(inner, outer) -> float:
    """Fraction of ``inner``'s area lying inside ``outer``."""
    area = _area(inner)
    if area <= 0.0:
        return 0.0
    return _intersection_area(inner, outer) / area


def horizontal_overlap_ratio(a, b) -> float:
    """Horizontal overlap width divided by the narrower box's width."""
    ov = min(a[2], b[2]) - max(a[0], b[0])
    narrow = min(a[2] - a[0], b[2] - b[0])
    if narrow <= 0.0:
        return 0.0
    return max(0.0, ov) / narrow


def _center(b) -> tuple[float, float]:
    return (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0


def _on_geometry(top, d_top, base, d_base, th: RelationThresholds) -> bool:
    return (
        horizontal_overlap_ratio(top, base) >= th.overlap_ratio
        and abs(top[3] - base[1]) <= th.contact_eps
        and abs(d_top - d_base) <= th.depth_delta
    )


def ground_truth_relation(
    bbox1,
    depth1: float,
    bbox2,
    depth2: float,
    thresholds: RelationThresholds = RelationThresholds(),
) -> SpatialRelation:
    """Canonical relation of (object 1, object 2) from boxes and depths.

    Rule order: in -> on -> above/under (horizontal overlap with vertical
    centre ordering) -> behind/in front of (depth gap) -> left/right
    (horizontally dominant offset) -> next to (small centre distance),
    with a vertical-ordering fallback so the function is total.  Image
    coordinates: y grows downward, larger depth is farther away.

    Because every stage gates on a swap-symmetric predicate, swapping the
    arguments maps left <-> right and behind <-> in front of exactly, and
    above -> under always; the under -> above direction additionally admits
    "on" (a stacked pair reads ON one way, UNDER the other).  The two
    containment cases without an inverse in the closed set (a container
    seen from the container's side, mutually-nested boxes) fall to
    NEXT_TO and to the later stages respectively.
    """
    th = thresholds
    c12 = containment_fraction(bbox1, bbox2)
    c21 = containment_fraction(bbox2, bbox1)
    if c12 >= th.containment and c21 < th.containment:
        return SpatialRelation.IN
    if c21 >= th.containment and c12 < th.containment:
        return SpatialRelation.NEXT_TO
    # mutually-nested (near-identical) boxes fall through

    if not (c12 >= th.containment and c21 >= th.containment):
        if _on_geometry(bbox1, depth1, bbox2, depth2, th):
            return SpatialRelation.ON
        if _on_geometry(bbox2, depth2, bbox1, depth1, th):
            return SpatialRelation.UNDER

    x1, y1 = _center(bbox1)
    x2, y2 = _center(bbox2)
    if horizontal_overlap_ratio(bbox1, bbox2) >= th.overlap_ratio:
        if y1 < y2:
            return SpatialRelation.ABOVE
        if y1 > y2:
            return SpatialRelation.UNDER

    dd = depth1 - depth2
    if dd > th.depth_delta:
        return SpatialRelation.BEHIND
    if dd < -th.depth_delta:
        return SpatialRelation.IN_FRONT_OF

    dx = x1 - x2
    dy = y1 - y2
    if abs(dx) > abs(dy):
        return SpatialRelation.TO_THE_LEFT_OF if dx < 0 else SpatialRelation.TO_THE_RIGHT_OF
    if math.hypot(dx, dy) < th.next_to_dist:
        return SpatialRelation.NEXT_TO
    if dy < 0:
        return SpatialRelation.ABOVE
    if dy > 0:
        return SpatialRelation.UNDER
    return SpatialRelation.NEXT_TO
