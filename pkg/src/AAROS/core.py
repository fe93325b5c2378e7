from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


@dataclass(frozen=True)
class BBox:
    """
    An axis-aligned rectangle in continuous patch coordinates. x runs along the image width, y along its height.
    Zero-area boxes are valid values.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coordinates = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(value) for value in coordinates):
            raise ValueError(f"BBox coordinates must be finite, got {coordinates}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"BBox requires x1 <= x2 and y1 <= y2, got {coordinates}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def translate(self, dx: float = 0.0, dy: float = 0.0) -> BBox:
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def quantized(self) -> tuple[int, int, int, int]:
        """
        Round every coordinate to the nearest integer patch unit, as used for coordinate tokens.
        """
        return (
            int(round(self.x1)),
            int(round(self.y1)),
            int(round(self.x2)),
            int(round(self.y2)),
        )

    def inside(self, width: float, height: float) -> bool:
        """
        :param width: The grid width in patches
        :param height: The grid height in patches
        :return: True if the box lies within [0, width] x [0, height]
        """
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height

    def iou_with(self, other: BBox) -> float:
        return iou(self, other)

    @classmethod
    def from_sequence(cls, values: Any) -> BBox:
        x1, y1, x2, y2 = (float(value) for value in values)
        return cls(x1, y1, x2, y2)

    def __str__(self) -> str:
        return f"BBox({self.x1:g}, {self.y1:g}, {self.x2:g}, {self.y2:g})"


def iou(a: BBox, b: BBox) -> float:
    """
    Intersection over union of two boxes. A zero union (two degenerate boxes) gives 0.

    :param a: The first box
    :param b: The second box
    :return: overlap_area / union_area in [0, 1]
    """
    overlap_w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    overlap_h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    overlap = overlap_w * overlap_h
    union = a.area + b.area - overlap
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, overlap / union))


@dataclass(frozen=True, eq=False)
class GridImage:
    """
    A patch-grid stand-in for a medical image. Patch index p = row * width_patches + column, and patch (row, column)
    covers [column, column + 1] x [row, row + 1] in patch coordinates.
    """

    height_patches: int
    width_patches: int
    patch_features: np.ndarray
    abnormal_region: BBox
    category_id: int

    def __post_init__(self) -> None:
        if self.height_patches < 1 or self.width_patches < 1:
            raise ValueError("GridImage needs at least one patch along each axis")
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] != self.num_patches:
            raise ValueError(
                f"patch_features must have shape ({self.num_patches}, feature_dim), got {self.patch_features.shape}"
            )
        if not self.abnormal_region.inside(self.width_patches, self.height_patches):
            raise ValueError(f"{self.abnormal_region} lies outside the {self.width_patches}x{self.height_patches} grid")
        if self.category_id < 0:
            raise ValueError("category_id must be non-negative")
        # Images are shared between rollouts and splits, so the feature buffer is frozen
        features = np.array(self.patch_features, dtype=np.float32, copy=True)
        features.setflags(write=False)
        object.__setattr__(self, "patch_features", features)

    @property
    def num_patches(self) -> int:
        return self.height_patches * self.width_patches

    @property
    def feature_dim(self) -> int:
        return int(self.patch_features.shape[1])

    def patch_center(self, index: int) -> tuple[float, float]:
        row, column = divmod(index, self.width_patches)
        return (column + 0.5, row + 0.5)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridImage):
            return NotImplemented
        return (
            self.height_patches == other.height_patches
            and self.width_patches == other.width_patches
            and self.abnormal_region == other.abnormal_region
            and self.category_id == other.category_id
            and np.array_equal(self.patch_features, other.patch_features)
        )

    def __hash__(self) -> int:
        return hash((self.height_patches, self.width_patches, self.abnormal_region, self.category_id))


def patch_indices_inside(region: BBox, height_patches: int, width_patches: int) -> frozenset[int]:
    """
    Indices of the patches of a height x width grid whose centers lie strictly inside `region`.
    """
    inside: set[int] = set()
    for row in range(height_patches):
        cy = row + 0.5
        if not region.y1 < cy < region.y2:
            continue
        for column in range(width_patches):
            cx = column + 0.5
            if region.x1 < cx < region.x2:
                inside.add(row * width_patches + column)
    return frozenset(inside)


def patches_in_region(image: GridImage) -> frozenset[int]:
    """
    The abnormal patch set: every patch whose center lies strictly inside the abnormal region.

    :param image: The image whose abnormal region is being rasterised
    :return: A (possibly empty) set of patch indices
    """
    return patch_indices_inside(image.abnormal_region, image.height_patches, image.width_patches)


@dataclass(frozen=True)
class Sample:
    """
    One (image, query, diagnosis) triple. Queries and responses are kept as token strings so that a sample does
    not depend on a particular vocabulary instance.
    """

    id: str
    image: GridImage
    query: tuple[str, ...]
    reference_response: tuple[str, ...]
    gt_category: int
    gt_bbox: BBox
    category_name: str
    category_family: str = ""
    dataset_family: str = ""
    split_tags: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.reference_response:
            return
        words = tuple(word.lower() for word in self.reference_response)
        coordinates = tuple(str(value) for value in self.gt_bbox.quantized())
        states_box = any(words[start : start + 4] == coordinates for start in range(len(words) - 3))
        if self.category_name.lower() not in words or not states_box:
            raise ValueError(f"Reference response of {self.id} does not state its ground-truth category and bbox")

    def with_tags(self, tags: frozenset[str] | set[str]) -> Sample:
        return replace(self, split_tags=frozenset(tags))

    def with_query(self, query: tuple[str, ...]) -> Sample:
        return replace(self, query=tuple(query))


@dataclass(frozen=True)
class Response:
    """
    A generated or reference diagnosis after parsing. `schema_valid` implies both parsed fields are present.
    """

    tokens: tuple[int, ...]
    parsed_category: int | None = None
    parsed_bbox: BBox | None = None
    schema_valid: bool = False
    text: str = ""

    def __post_init__(self) -> None:
        if self.schema_valid and (self.parsed_category is None or self.parsed_bbox is None):
            raise ValueError("A schema-valid Response must carry both a category and a bbox")
