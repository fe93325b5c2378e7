from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import BBox, GridImage, Sample, iou, patch_indices_inside
from .errors import ConfigError, SplitError, UnreachableIoUError
from .tokenizer import QUERY_TEMPLATES, hint_words, response_words

logger = logging.getLogger(__name__)

DEFAULT_CATEGORY_NAMES: tuple[str, ...] = (
    "nodule",
    "cyst",
    "stone",
    "polyp",
    "effusion",
    "fracture",
    "opacity",
    "ulcer",
    "tumor",
    "infiltrate",
    "calculus",
    "hernia",
)

# Independent random streams derived from the world seed
_SIGNATURE_STREAM = 1_000_003
_MODALITY_STREAM = 1_000_033

TRAIN = "train"
TEST = "test"
DEV = "dev"
HELDOUT_CATEGORY = "heldout_category"
HELDOUT_DATASET = "heldout_dataset"
CROSSMODAL = "crossmodal"


def _default_category_families() -> dict[str, list[int]]:
    return {"F0": [0, 1], "F1": [2, 3]}


def _default_dataset_categories() -> dict[str, list[int]]:
    return {"D0": [0, 2], "D1": [1, 3], "D2": [0, 1, 2, 3]}


@dataclass
class WorldConfig:
    """
    Parameters of the synthetic abnormality world. Category families group categories the way anatomical regions
    group findings; dataset families stand in for imaging sources and shift the background features of their images.
    """

    height_patches: int = 10
    width_patches: int = 10
    num_categories: int = 4
    feature_dim: int = 8
    category_names: list[str] = field(default_factory=list)
    category_families: dict[str, list[int]] = field(default_factory=_default_category_families)
    dataset_categories: dict[str, list[int]] = field(default_factory=_default_dataset_categories)
    signature_scale: float = 1.0
    noise_scale: float = 0.3
    modality_scale: float = 0.5
    decoy_strength: float = 0.5
    min_region: int = 2
    max_region: int = 4
    seed: int = 7

    def __post_init__(self) -> None:
        if not self.category_names:
            self.category_names = list(DEFAULT_CATEGORY_NAMES[: self.num_categories])

    def validate(self) -> None:
        if self.num_categories < 2:
            raise ConfigError("world.num_categories must be at least 2")
        if self.height_patches < 1 or self.width_patches < 1 or self.feature_dim < 1:
            raise ConfigError("world grid sizes and feature_dim must be positive")
        if len(self.category_names) != self.num_categories:
            raise ConfigError(
                f"world.category_names has {len(self.category_names)} names for {self.num_categories} categories"
            )
        names = [name.lower() for name in self.category_names]
        for i, first in enumerate(names):
            for j, second in enumerate(names):
                if i != j and first in second:
                    raise ConfigError(f"Category names must not be substrings of each other: '{first}' in '{second}'")
        if self.min_region < 1 or self.min_region > self.max_region:
            raise ConfigError("world.min_region must be >= 1 and <= world.max_region")
        if self.max_region > min(self.height_patches, self.width_patches):
            raise ConfigError(
                f"An abnormal region of up to {self.max_region} patches cannot fit the "
                f"{self.width_patches}x{self.height_patches} grid"
            )
        if self.noise_scale < 0 or self.signature_scale <= 0 or self.decoy_strength < 0:
            raise ConfigError("world noise/decoy scales must be non-negative and signature_scale positive")

        covered: list[int] = [category for members in self.category_families.values() for category in members]
        if sorted(covered) != list(range(self.num_categories)):
            raise ConfigError("world.category_families must assign every category to exactly one family")
        in_datasets = {category for members in self.dataset_categories.values() for category in members}
        if in_datasets != set(range(self.num_categories)):
            raise ConfigError("world.dataset_categories must cover every category and only known categories")
        if any(not members for members in self.dataset_categories.values()):
            raise ConfigError("Every dataset family needs at least one category")

        signatures = self.signatures
        for i in range(self.num_categories):
            for j in range(i + 1, self.num_categories):
                if np.allclose(signatures[i], signatures[j]):
                    raise ConfigError(f"Feature signatures of categories {i} and {j} coincide")

    @cached_property
    def signatures(self) -> np.ndarray:
        """
        Per-category mean vector injected into abnormal patches, shape (num_categories, feature_dim).
        """
        rng = np.random.default_rng([self.seed, _SIGNATURE_STREAM])
        return self.signature_scale * rng.normal(size=(self.num_categories, self.feature_dim))

    @cached_property
    def dataset_offsets(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, _MODALITY_STREAM])
        return {
            name: self.modality_scale * rng.normal(size=self.feature_dim) for name in sorted(self.dataset_categories)
        }

    def family_of(self, category: int) -> str:
        for family, members in self.category_families.items():
            if category in members:
                return family
        raise KeyError(f"Category {category} has no family")

    @property
    def max_coordinate(self) -> int:
        return max(self.height_patches, self.width_patches)


@dataclass
class SplitPlan:
    """
    How a generated dataset is divided. Held-out category or dataset families only ever appear in test; a non-empty
    `train_only_datasets` restricts training to those dataset families and tags every other sample `crossmodal`.
    """

    heldout_category_families: list[str] = field(default_factory=list)
    heldout_dataset_families: list[str] = field(default_factory=list)
    train_only_datasets: list[str] = field(default_factory=list)
    train_fraction: float = 0.8
    dev_fraction: float = 0.5
    seed: int = 0
    label: str = "default"

    def validate(self, world: WorldConfig | None = None) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError("split.dev_fraction must lie in [0, 1)")
        overlap = set(self.train_only_datasets) & set(self.heldout_dataset_families)
        if overlap:
            raise ConfigError(f"Dataset families {sorted(overlap)} are both held out and train-only")
        if world is not None:
            unknown = set(self.heldout_category_families) - set(world.category_families)
            if unknown:
                raise ConfigError(f"Unknown category families in split plan: {sorted(unknown)}")
            unknown = (set(self.heldout_dataset_families) | set(self.train_only_datasets)) - set(
                world.dataset_categories
            )
            if unknown:
                raise ConfigError(f"Unknown dataset families in split plan: {sorted(unknown)}")

    @property
    def heldout_tags(self) -> list[str]:
        tags: list[str] = []
        if self.heldout_category_families:
            tags.append(HELDOUT_CATEGORY)
        if self.heldout_dataset_families:
            tags.append(HELDOUT_DATASET)
        if self.train_only_datasets:
            tags.append(CROSSMODAL)
        return tags


def generate_sample(cfg: WorldConfig, index: int) -> Sample:
    """
    Generate sample `index` of the world. All randomness derives from (cfg.seed, index), so any sample can be
    regenerated on its own and generation may be spread over workers.

    :param cfg: The world configuration
    :param index: The sample index within the dataset
    """
    rng = np.random.default_rng([cfg.seed, index])
    datasets = sorted(cfg.dataset_categories)
    dataset = datasets[int(rng.integers(len(datasets)))]
    members = cfg.dataset_categories[dataset]
    category = int(members[int(rng.integers(len(members)))])

    width = int(rng.integers(cfg.min_region, cfg.max_region + 1))
    height = int(rng.integers(cfg.min_region, cfg.max_region + 1))
    x1 = int(rng.integers(0, cfg.width_patches - width + 1))
    y1 = int(rng.integers(0, cfg.height_patches - height + 1))
    region = BBox(float(x1), float(y1), float(x1 + width), float(y1 + height))

    num_patches = cfg.height_patches * cfg.width_patches
    noise = rng.normal(0.0, cfg.noise_scale, size=(num_patches, cfg.feature_dim)) if cfg.noise_scale > 0 else (
        np.zeros((num_patches, cfg.feature_dim))
    )
    features = noise + cfg.dataset_offsets[dataset]

    if cfg.decoy_strength > 0:
        decoy_category = int(rng.choice([other for other in range(cfg.num_categories) if other != category]))
        decoy_w = int(rng.integers(cfg.min_region, cfg.max_region + 1))
        decoy_h = int(rng.integers(cfg.min_region, cfg.max_region + 1))
        decoy_x = int(rng.integers(0, cfg.width_patches - decoy_w + 1))
        decoy_y = int(rng.integers(0, cfg.height_patches - decoy_h + 1))
        decoy = BBox(float(decoy_x), float(decoy_y), float(decoy_x + decoy_w), float(decoy_y + decoy_h))
        for patch in patch_indices_inside(decoy, cfg.height_patches, cfg.width_patches):
            features[patch] = cfg.decoy_strength * cfg.signatures[decoy_category] + noise[patch]

    # Abnormal patches are written last so a decoy never masks the real finding
    for patch in patch_indices_inside(region, cfg.height_patches, cfg.width_patches):
        features[patch] = cfg.signatures[category] + noise[patch]

    query = QUERY_TEMPLATES[int(rng.integers(len(QUERY_TEMPLATES)))]
    name = cfg.category_names[category].lower()
    image = GridImage(
        height_patches=cfg.height_patches,
        width_patches=cfg.width_patches,
        patch_features=features,
        abnormal_region=region,
        category_id=category,
    )
    return Sample(
        id=f"{cfg.seed}-{index:06}",
        image=image,
        query=tuple(query),
        reference_response=response_words(name, region, cfg.max_coordinate),
        gt_category=category,
        gt_bbox=region,
        category_name=name,
        category_family=cfg.family_of(category),
        dataset_family=dataset,
    )


def generate_dataset(cfg: WorldConfig, n: int) -> list[Sample]:
    """
    Generate `n` samples; a pure function of (cfg, n).

    :param cfg: The world configuration, validated here
    :param n: The number of samples to generate
    """
    if n < 1:
        raise ConfigError("At least one sample must be generated")
    cfg.validate()
    samples = [generate_sample(cfg, index) for index in range(n)]
    logger.info("Generated %d samples over %d categories (seed %d)", n, cfg.num_categories, cfg.seed)
    return samples


def sample_index(sample_id: str) -> int:
    return int(sample_id.rsplit("-", 1)[1])


def apply_split(samples: Sequence[Sample], plan: SplitPlan, world: WorldConfig | None = None) -> list[Sample]:
    """
    Tag every sample with exactly one of train/test plus any held-out tags. Samples of held-out families go to test
    unconditionally; the remaining pool is shuffled with the plan seed and cut at `train_fraction`. A further
    `dev_fraction` of the regular test samples is tagged dev.

    :param samples: The samples to split, in generation order
    :param plan: The split plan
    :param world: Optional world configuration used to check that the plan's family names exist
    :return: The tagged samples, in input order
    """
    plan.validate(world)
    tags: list[set[str]] = []
    pool: list[int] = []
    for position, sample in enumerate(samples):
        sample_tags: set[str] = set()
        if sample.category_family in plan.heldout_category_families:
            sample_tags.add(HELDOUT_CATEGORY)
        if sample.dataset_family in plan.heldout_dataset_families:
            sample_tags.add(HELDOUT_DATASET)
        if plan.train_only_datasets and sample.dataset_family not in plan.train_only_datasets:
            sample_tags.add(CROSSMODAL)
        if sample_tags:
            sample_tags.add(TEST)
        else:
            pool.append(position)
        tags.append(sample_tags)

    rng = np.random.default_rng(plan.seed)
    order = rng.permutation(len(pool))
    num_train = int(round(plan.train_fraction * len(pool)))
    regular_test: list[int] = []
    for rank, pool_index in enumerate(order):
        position = pool[int(pool_index)]
        if rank < num_train:
            tags[position].add(TRAIN)
        else:
            tags[position].add(TEST)
            regular_test.append(position)

    num_dev = int(round(plan.dev_fraction * len(regular_test)))
    for rank, test_index in enumerate(rng.permutation(len(regular_test))):
        if rank < num_dev:
            tags[regular_test[int(test_index)]].add(DEV)

    num_train_total = sum(TRAIN in sample_tags for sample_tags in tags)
    if num_train_total == 0 or num_train_total == len(samples):
        raise SplitError(
            f"Split plan '{plan.label}' leaves {num_train_total} training and "
            f"{len(samples) - num_train_total} test samples"
        )
    return [sample.with_tags(sample_tags) for sample, sample_tags in zip(samples, tags)]


def select(samples: Sequence[Sample], tag: str, exclude: Sequence[str] = ()) -> list[Sample]:
    """
    The samples carrying `tag` and none of the `exclude` tags.
    """
    return [sample for sample in samples if tag in sample.split_tags and not set(exclude) & sample.split_tags]


def make_iou_hint(gt: BBox, target_iou: float, width: float, height: float, tolerance: float = 0.01) -> BBox:
    """
    A copy of `gt` shifted horizontally (inside the grid) so that its IoU with `gt` equals `target_iou`. For two
    same-size boxes the IoU falls monotonically with the shift, so a bisection over the shift converges.

    :param gt: The ground-truth box, with positive area
    :param target_iou: The requested IoU in [0, 1]
    :param width: The grid width in patches
    :param height: The grid height in patches
    :param tolerance: The accepted absolute IoU error
    """
    if not 0.0 <= target_iou <= 1.0:
        raise ValueError(f"target_iou must lie in [0, 1], got {target_iou}")
    if gt.area <= 0:
        raise ValueError("make_iou_hint needs a ground-truth box with positive area")
    if not gt.inside(width, height):
        raise ValueError(f"{gt} lies outside the {width}x{height} grid")
    if target_iou >= 1.0:
        return gt

    room_right = width - gt.x2
    room_left = gt.x1
    direction = 1.0 if room_right >= room_left else -1.0
    max_shift = max(room_right, room_left)

    def iou_at(shift: float) -> float:
        return iou(gt.translate(dx=direction * shift), gt)

    if iou_at(max_shift) > target_iou + tolerance:
        raise UnreachableIoUError(
            f"IoU {target_iou:.2f} is unreachable for {gt}: the grid allows at most {max_shift:g} patches of shift"
        )
    if target_iou <= 0.0:
        return gt.translate(dx=direction * min(max_shift, gt.width))

    low, high = 0.0, max_shift
    for _ in range(60):
        middle = 0.5 * (low + high)
        if iou_at(middle) > target_iou:
            low = middle
        else:
            high = middle
    return gt.translate(dx=direction * high)


def attach_hints(
    samples: Sequence[Sample],
    fraction: float,
    iou_range: tuple[float, float],
    seed: int,
    max_coordinate: int | None = None,
) -> list[Sample]:
    """
    Append a `hint bbox ...` suffix to the query of a deterministic `fraction` of the samples. Hints are drawn with
    IoU uniform in `iou_range`; samples whose hint is unreachable keep their plain query.
    """
    if fraction <= 0:
        return list(samples)
    rng = np.random.default_rng(seed)
    hinted: list[Sample] = []
    for sample in samples:
        if rng.random() >= fraction:
            hinted.append(sample)
            continue
        target = float(rng.uniform(*iou_range))
        try:
            hint = make_iou_hint(
                sample.gt_bbox, target, sample.image.width_patches, sample.image.height_patches
            )
        except UnreachableIoUError:
            hinted.append(sample)
            continue
        hinted.append(sample.with_query((*sample.query, *hint_words(hint, max_coordinate))))
    return hinted
