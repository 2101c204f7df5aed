"""Deterministic synthetic LiDAR-like scenes.

Scenes are built from four analytic primitives placed around a sensor at
the origin:

- ground annulus rings (road-like surfaces), one radius band per class
- axis-aligned boxes (buildings, vehicles), sampled on their faces
- vertical line clusters (poles, trunks, signs)
- spherical blobs (vegetation, people)

Each class also has its own intensity band, so the classes are separable
from pointwise features. Point budgets per class are fixed before any
geometry is drawn: the whole dataset matches ``class_mix`` while group g
holds most of the points of the classes learned at step g. Part of each
group (``pure_scan_share``) is made of scans that contain the step's own
classes only.

The defaults give the desk benchmark: per group, 360 short scans of 140
points, about 5e4 points.
"""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lidarcl.errors import ConfigError
from lidarcl.ingest.semantickitti import LabeledCloud, ScanId, scan_paths, write_scan
from lidarcl.taxonomy import ClassTaxonomy, normalize_name, resolve_taxonomy

GROUND_Z = -1.73
MIX_TOLERANCE = 1e-9
# realized per-class totals may sit this far (relative) from the mix
MIX_RELATIVE_TOLERANCE = 0.2
# pure scans take at most this share of a group's own-step points
PURE_SCAN_OWN_CAP = 0.75
MANIFEST_NAME = "manifest.json"


class PrimitiveKind(str, Enum):
    """Geometric generators for synthetic classes."""
    RING = "ring"
    BOX = "box"
    LINE = "line"
    BLOB = "blob"


PRIMITIVE_BY_CLASS = {
    "road": PrimitiveKind.RING,
    "parking": PrimitiveKind.RING,
    "sidewalk": PrimitiveKind.RING,
    "other-ground": PrimitiveKind.RING,
    "terrain": PrimitiveKind.RING,
    "building": PrimitiveKind.BOX,
    "fence": PrimitiveKind.BOX,
    "car": PrimitiveKind.BOX,
    "truck": PrimitiveKind.BOX,
    "other-vehicle": PrimitiveKind.BOX,
    "bicycle": PrimitiveKind.BOX,
    "motorcycle": PrimitiveKind.BOX,
    "pole": PrimitiveKind.LINE,
    "trunk": PrimitiveKind.LINE,
    "traffic-sign": PrimitiveKind.LINE,
    "vegetation": PrimitiveKind.BLOB,
    "person": PrimitiveKind.BLOB,
    "bicyclist": PrimitiveKind.BLOB,
    "motorcyclist": PrimitiveKind.BLOB,
}

# length, width, height in meters
BOX_SIZE = {
    "building": (14.0, 9.0, 7.0),
    "fence": (9.0, 0.25, 1.3),
    "car": (4.3, 1.8, 1.5),
    "truck": (8.5, 2.5, 3.4),
    "other-vehicle": (6.5, 2.4, 2.8),
    "bicycle": (1.7, 0.6, 1.1),
    "motorcycle": (2.1, 0.8, 1.2),
}
LINE_HEIGHT = {"pole": 6.5, "trunk": 2.8, "traffic-sign": 2.4}
BLOB_RADIUS = {"vegetation": 1.8, "person": 0.35, "bicyclist": 0.55, "motorcyclist": 0.65}

POINTS_PER_INSTANCE = {
    PrimitiveKind.BOX: 300,
    PrimitiveKind.LINE: 120,
    PrimitiveKind.BLOB: 200,
}


class SynthConfig(BaseModel):
    """Parameters of a synthetic dataset."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    scans_per_group: int = Field(360, ge=1)
    points_per_scan: int = Field(140, ge=1)
    validation_scans: int = Field(24, ge=0)
    taxonomy: str = "desk"
    class_mix: dict[str, float] | None = None
    own_step_share: float = Field(0.6, gt=0.0, le=1.0)
    # fraction of a group's scans holding only that group's step classes
    pure_scan_share: float = Field(0.5, ge=0.0, lt=1.0)
    primitives: dict[str, PrimitiveKind] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_mix(self) -> "SynthConfig":
        if self.class_mix is not None:
            if any(v < 0 for v in self.class_mix.values()):
                raise ValueError("class_mix fractions must be non-negative")
            total = sum(self.class_mix.values())
            if abs(total - 1.0) > MIX_TOLERANCE:
                raise ValueError(f"class_mix fractions sum to {total}, expected 1")
        return self


@dataclass
class SyntheticDataset:
    """Generated clouds: one list per learning step plus a validation split."""

    groups: list[list[LabeledCloud]]
    validation: list[LabeledCloud]
    config: SynthConfig

    @property
    def group_sequences(self) -> list[str]:
        return [f"{g:02d}" for g in range(len(self.groups))]

    @property
    def validation_sequence(self) -> str:
        return f"{len(self.groups):02d}"


def resolve_mix(config: SynthConfig, taxonomy: ClassTaxonomy) -> np.ndarray:
    """Target fraction per fine class, indexed by class id - 1."""
    fine = taxonomy.fine_classes
    if config.class_mix is None:
        return np.full(len(fine), 1.0 / len(fine))
    mix = np.zeros(len(fine))
    for name, fraction in config.class_mix.items():
        mix[taxonomy.class_id(name) - 1] = fraction
    return mix


def primitive_for(name: str, config: SynthConfig) -> PrimitiveKind | None:
    overrides = {normalize_name(k): v for k, v in config.primitives.items()}
    key = normalize_name(name)
    return overrides.get(key, PRIMITIVE_BY_CLASS.get(key))


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``."""
    if total == 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights / weights.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def group_budgets(mix: np.ndarray, taxonomy: ClassTaxonomy, config: SynthConfig) -> np.ndarray:
    """Points per (group, class): rows sum to the group size, columns follow the mix."""
    num_groups = taxonomy.num_steps
    group_total = config.scans_per_group * config.points_per_scan
    seed = np.empty((num_groups, len(mix)))
    for cid in taxonomy.fine_classes:
        own = taxonomy.step_of(cid)
        for g in range(num_groups):
            if num_groups == 1:
                seed[g, cid - 1] = 1.0
            elif g == own:
                seed[g, cid - 1] = config.own_step_share
            else:
                seed[g, cid - 1] = (1.0 - config.own_step_share) / (num_groups - 1)
    # Sinkhorn balancing toward row sums = group_total, column sums = mix * everything.
    matrix = seed * mix[None, :]
    col_target = mix * group_total * num_groups
    for _ in range(500):
        row = matrix.sum(axis=1, keepdims=True)
        matrix = matrix * (group_total / np.where(row > 0, row, 1.0))
        col = matrix.sum(axis=0)
        matrix = matrix * np.where(col > 0, col_target / np.where(col > 0, col, 1.0), 0.0)
    budgets = np.stack([largest_remainder(row, group_total) for row in matrix])
    realized = budgets.sum(axis=0)
    for cid in taxonomy.fine_classes:
        target = col_target[cid - 1]
        if target > 0 and abs(realized[cid - 1] - target) > MIX_RELATIVE_TOLERANCE * target:
            raise ConfigError(
                f"infeasible class mix: '{taxonomy.names[cid - 1]}' gets {realized[cid - 1] / realized.sum():.3f} "
                f"of all points, target {mix[cid - 1]:.3f} (own_step_share={config.own_step_share})"
            )
    return budgets


def pure_scan_count(budget: np.ndarray, own: np.ndarray, config: SynthConfig) -> int:
    """How many scans of a group carry own-step classes only."""
    by_share = int(config.pure_scan_share * config.scans_per_group)
    by_points = int(PURE_SCAN_OWN_CAP * budget[own].sum()) // config.points_per_scan
    return min(by_share, by_points)


class SceneBuilder:
    """Draws geometry for one scan from its per-class point counts."""

    def __init__(self, taxonomy: ClassTaxonomy, config: SynthConfig):
        self.taxonomy = taxonomy
        self.config = config
        names = taxonomy.names
        self.kinds = {cid: primitive_for(names[cid - 1], config) for cid in taxonomy.fine_classes}
        span = max(len(names) - 1, 1)
        self.intensity = {cid: 0.08 + 0.84 * (cid - 1) / span for cid in taxonomy.fine_classes}
        rings = [cid for cid in taxonomy.fine_classes if self.kinds[cid] is PrimitiveKind.RING]
        self.ring_band = {cid: (3.0 + 6.0 * i, 8.0 + 6.0 * i) for i, cid in enumerate(rings)}

    def build(self, counts: np.ndarray, rng: np.random.Generator, scan_id: ScanId) -> LabeledCloud:
        parts, labels = [], []
        for cid in self.taxonomy.fine_classes:
            n = int(counts[cid - 1])
            if n == 0:
                continue
            xyz = self._geometry(cid, n, rng)
            intensity = np.clip(rng.normal(self.intensity[cid], 0.02, size=n), 0.0, 1.0)
            parts.append(np.column_stack([xyz, intensity]))
            labels.append(np.full(n, cid, dtype=np.uint8))
        points = np.concatenate(parts).astype(np.float32)
        label_array = np.concatenate(labels)
        order = rng.permutation(len(label_array))
        return LabeledCloud(points[order], label_array[order], scan_id)

    def _geometry(self, cid: int, n: int, rng: np.random.Generator) -> np.ndarray:
        name = normalize_name(self.taxonomy.names[cid - 1])
        kind = self.kinds[cid]
        if kind is PrimitiveKind.RING:
            return self._ring(*self.ring_band[cid], n, rng)
        sizes = np.array_split(np.arange(n), max(1, n // POINTS_PER_INSTANCE[kind]))
        pieces = []
        for chunk in sizes:
            m = len(chunk)
            if kind is PrimitiveKind.BOX:
                pieces.append(self._box(BOX_SIZE.get(name, (3.0, 3.0, 2.0)), m, rng))
            elif kind is PrimitiveKind.LINE:
                pieces.append(self._line(LINE_HEIGHT.get(name, 3.0), m, rng))
            else:
                pieces.append(self._blob(BLOB_RADIUS.get(name, 0.8), m, rng))
        return np.concatenate(pieces)

    @staticmethod
    def _ring(r_min: float, r_max: float, n: int, rng: np.random.Generator) -> np.ndarray:
        radius = np.sqrt(rng.uniform(r_min**2, r_max**2, size=n))
        angle = rng.uniform(0.0, 2 * np.pi, size=n)
        z = GROUND_Z + rng.normal(0.0, 0.03, size=n)
        return np.column_stack([radius * np.cos(angle), radius * np.sin(angle), z])

    @staticmethod
    def _placement(rng: np.random.Generator, r_min: float, r_max: float) -> tuple[float, float]:
        radius = rng.uniform(r_min, r_max)
        angle = rng.uniform(0.0, 2 * np.pi)
        return radius * np.cos(angle), radius * np.sin(angle)

    def _box(self, size: tuple[float, float, float], n: int, rng: np.random.Generator) -> np.ndarray:
        length, width, height = size
        cx, cy = self._placement(rng, 8.0 + length / 2, 35.0)
        # Faces: +-x (width*height), +-y (length*height), top (length*width).
        areas = np.array([width * height] * 2 + [length * height] * 2 + [length * width])
        face = rng.choice(5, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 2))
        v = rng.uniform(0.0, 1.0, size=n)
        side = np.where(face % 2 == 0, -0.5, 0.5)
        x = np.where(face < 2, side, u[:, 0]) * length
        y = np.where((face == 2) | (face == 3), side, u[:, 1]) * width
        z = np.where(face == 4, 1.0, v) * height
        return np.column_stack([cx + x, cy + y, GROUND_Z + z])

    def _line(self, height: float, n: int, rng: np.random.Generator) -> np.ndarray:
        cx, cy = self._placement(rng, 5.0, 25.0)
        z = GROUND_Z + rng.uniform(0.0, height, size=n)
        return np.column_stack([cx + rng.normal(0, 0.05, n), cy + rng.normal(0, 0.05, n), z])

    def _blob(self, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
        cx, cy = self._placement(rng, 6.0, 30.0)
        cz = GROUND_Z + radius + (1.0 if radius > 1.0 else 0.5)
        offsets = rng.normal(0.0, radius / 2, size=(n, 3))
        return np.column_stack([cx + offsets[:, 0], cy + offsets[:, 1], cz + offsets[:, 2]])


def _split_scans(
    budget: np.ndarray,
    num_scans: int,
    points_per_scan: int,
    rng: np.random.Generator,
    own: np.ndarray | None = None,
    num_pure: int = 0,
) -> list[np.ndarray]:
    """Deal a class budget out to scans of equal size.

    ``num_pure`` scans, at random positions, draw only from the ``own``
    class indices; the others share everything left.
    """
    pool = np.repeat(np.arange(len(budget)), budget)
    pool = pool[rng.permutation(len(pool))]
    if num_pure:
        pool = np.concatenate([pool[np.isin(pool, own)], pool[~np.isin(pool, own)]])
        head = num_pure * points_per_scan
        rest = pool[head:]
        pool = np.concatenate([pool[:head], rest[rng.permutation(len(rest))]])
    scans = []
    for s in range(num_scans):
        chunk = pool[s * points_per_scan:(s + 1) * points_per_scan]
        scans.append(np.bincount(chunk, minlength=len(budget)))
    if num_pure:
        scans = [scans[i] for i in rng.permutation(num_scans)]
    return scans


def generate_synthetic(config: SynthConfig) -> SyntheticDataset:
    """Generate per-step groups and a validation split; deterministic in ``config.seed``."""
    taxonomy = resolve_taxonomy(config.taxonomy)
    mix = resolve_mix(config, taxonomy)
    for cid in taxonomy.fine_classes:
        name = taxonomy.names[cid - 1]
        if mix[cid - 1] > 0 and primitive_for(name, config) is None:
            raise ConfigError(f"infeasible class mix: no primitive assigned to class '{name}'")

    builder = SceneBuilder(taxonomy, config)
    num_groups = taxonomy.num_steps
    seeds = np.random.SeedSequence(config.seed).spawn(num_groups + 1)
    budgets = group_budgets(mix, taxonomy, config)
    for g, row in enumerate(budgets):
        if row.sum() == 0:
            raise ConfigError(f"infeasible class mix: group {g:02d} receives no points")

    groups = []
    for g in range(num_groups):
        rng = np.random.default_rng(seeds[g])
        own = np.asarray(taxonomy.step_classes(g)) - 1
        num_pure = pure_scan_count(budgets[g], own, config) if num_groups > 1 else 0
        per_scan = _split_scans(budgets[g], config.scans_per_group, config.points_per_scan, rng, own, num_pure)
        groups.append([
            builder.build(counts, rng, (f"{g:02d}", f"{s:06d}")) for s, counts in enumerate(per_scan)
        ])

    rng = np.random.default_rng(seeds[num_groups])
    val_budget = largest_remainder(mix, config.validation_scans * config.points_per_scan)
    per_scan = _split_scans(val_budget, config.validation_scans, config.points_per_scan, rng)
    validation = [
        builder.build(counts, rng, (f"{num_groups:02d}", f"{s:06d}")) for s, counts in enumerate(per_scan)
    ]
    return SyntheticDataset(groups, validation, config)


def write_synthetic(dataset: SyntheticDataset, root: Path) -> Path:
    """Persist in the SemanticKITTI layout plus ``manifest.json``."""
    root = Path(root)
    for cloud in [c for group in dataset.groups for c in group] + dataset.validation:
        write_scan(cloud, *scan_paths(root, cloud.scan_id))
    manifest = {
        "seed": dataset.config.seed,
        "config": dataset.config.model_dump(mode="json"),
        "taxonomy": dataset.config.taxonomy,
        "groups": [[list(c.scan_id) for c in group] for group in dataset.groups],
        "group_sequences": dataset.group_sequences,
        "validation": [list(c.scan_id) for c in dataset.validation],
        "validation_sequences": [dataset.validation_sequence],
    }
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path
