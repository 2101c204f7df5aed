"""SemanticKITTI scan/label reader and writer.

On-disk layout (also used for persisted synthetic datasets):

    <root>/sequences/<seq>/velodyne/<frame>.bin    float32 x, y, z, remission per point
    <root>/sequences/<seq>/labels/<frame>.label    uint32 per point, low 16 bits semantic

Both files are little-endian. Raw semantic ids are remapped to learning ids
through a LearningMap.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lidarcl.errors import DataError, InvalidClassError
from lidarcl.taxonomy import (
    BACKGROUND,
    UNLABELED,
    UNLABELED_NAME,
    ClassTaxonomy,
    builtin_path,
    normalize_name,
)

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_RECORD_BYTES = 4 * POINT_DTYPE.itemsize
LABEL_RECORD_BYTES = LABEL_DTYPE.itemsize
SEMANTIC_MASK = 0xFFFF

# Sequence groups of the CIL split, one per learning step, and the held-out sequence.
CIL_SEQUENCE_GROUPS = (("01", "02", "03"), ("04", "05", "09", "10"), ("00", "06", "07"))
VALIDATION_SEQUENCES = ("08",)
# Scans per group in the full dataset, used to sanity-check a local copy.
CIL_SCAN_COUNTS = {"group0": 6563, "group1": 4623, "group2": 4541, "validation": 4071}

ScanId = tuple[str, str]


def normalize_sequence(seq: str | int) -> str:
    """'8' and 8 both become '08'; non-numeric ids are kept."""
    text = str(seq).strip()
    return text.zfill(2) if text.isdigit() else text


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    """One scan: N points (x, y, z, intensity) and their labels."""

    points: np.ndarray
    labels: np.ndarray
    scan_id: ScanId

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise DataError(f"{self.scan_id}: points must have shape (N, 4), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise DataError(f"{self.scan_id}: empty scan")
        if self.labels.shape != (self.points.shape[0],):
            raise DataError(
                f"{self.scan_id}: {self.labels.shape[0]} labels for {self.points.shape[0]} points"
            )
        if not np.isfinite(self.points).all():
            raise DataError(f"{self.scan_id}: non-finite coordinates")

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    def with_labels(self, labels: np.ndarray) -> "LabeledCloud":
        return LabeledCloud(self.points, np.asarray(labels, dtype=np.uint8), self.scan_id)


class LearningMap:
    """Total map raw uint16 label -> ClassId or UNLABELED."""

    def __init__(self, mapping: dict[int, int], strict: bool = True):
        self.strict = strict
        self._mapping = dict(mapping)
        self._lut = np.full(SEMANTIC_MASK + 1, -1, dtype=np.int16)
        for raw, cid in self._mapping.items():
            if not 0 <= raw <= SEMANTIC_MASK:
                raise DataError(f"raw label {raw} outside uint16 range")
            self._lut[raw] = cid

    @classmethod
    def from_file(cls, path: Path, taxonomy: ClassTaxonomy, strict: bool = True) -> "LearningMap":
        """Load a JSON object raw-id(string) -> class name."""
        try:
            raw_map = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DataError(f"learning map not found: {path}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {e.lineno}: {e.msg}") from e

        mapping: dict[int, int] = {}
        for raw, name in raw_map.items():
            if normalize_name(name) == UNLABELED_NAME:
                mapping[int(raw)] = UNLABELED
                continue
            try:
                mapping[int(raw)] = taxonomy.class_id(name)
            except InvalidClassError:
                if strict:
                    raise
                logger.warning("learning map class '%s' not in taxonomy; raw id %s -> unlabeled", name, raw)
                mapping[int(raw)] = UNLABELED
        return cls(mapping, strict=strict)

    @classmethod
    def default(cls, taxonomy: ClassTaxonomy, strict: bool = True) -> "LearningMap":
        """The bundled 19-class SemanticKITTI map."""
        return cls.from_file(builtin_path("learning_map"), taxonomy, strict=strict)

    @classmethod
    def identity(cls, taxonomy: ClassTaxonomy) -> "LearningMap":
        """Labels already in learning ids (synthetic and transformed label files)."""
        ids = {BACKGROUND, UNLABELED, *taxonomy.fine_classes}
        for level in range(taxonomy.num_levels):
            ids.update(taxonomy.level_classes(level))
        return cls({cid: cid for cid in ids}, strict=True)

    def with_entry(self, raw: int, cid: int) -> "LearningMap":
        mapping = dict(self._mapping)
        mapping[raw] = cid
        return LearningMap(mapping, strict=self.strict)

    def __getitem__(self, raw: int) -> int:
        return self._mapping[raw]

    def __contains__(self, raw: int) -> bool:
        return raw in self._mapping

    def remap(self, raw: np.ndarray, source: str = "") -> np.ndarray:
        """Map raw semantic ids to learning ids."""
        mapped = self._lut[raw.astype(np.int64)]
        missing = mapped < 0
        if missing.any():
            unknown = sorted(int(r) for r in np.unique(raw[missing]))
            if self.strict:
                raise DataError(f"{source}: raw ids missing from learning map: {unknown}")
            for r in unknown:
                logger.warning("%s: raw id %d not in learning map, marked unlabeled", source, r)
            mapped = np.where(missing, UNLABELED, mapped)
        return mapped.astype(np.uint8)


def scan_id_from_path(bin_path: Path) -> ScanId:
    return (bin_path.parent.parent.name, bin_path.stem)


def read_scan(bin_path: Path, label_path: Path, learning_map: LearningMap) -> LabeledCloud:
    """Read one scan and its label file."""
    bin_path, label_path = Path(bin_path), Path(label_path)
    for path in (bin_path, label_path):
        if not path.exists():
            raise DataError(f"File not found: {path}")

    scan_bytes = bin_path.stat().st_size
    if scan_bytes % POINT_RECORD_BYTES:
        raise DataError(
            f"{bin_path}: truncated record ({scan_bytes} bytes is not a multiple of {POINT_RECORD_BYTES})"
        )
    num_points = scan_bytes // POINT_RECORD_BYTES
    label_bytes = label_path.stat().st_size
    if label_bytes != LABEL_RECORD_BYTES * num_points:
        raise DataError(
            f"{label_path}: {label_bytes} bytes of labels for {num_points} points "
            f"(expected {LABEL_RECORD_BYTES * num_points})"
        )

    points = np.fromfile(bin_path, dtype=POINT_DTYPE).reshape(-1, 4).astype(np.float32)
    words = np.fromfile(label_path, dtype=LABEL_DTYPE)
    semantic = (words & SEMANTIC_MASK).astype(np.uint16)
    labels = learning_map.remap(semantic, source=str(label_path))
    return LabeledCloud(points, labels, scan_id_from_path(bin_path))


def write_scan(cloud: LabeledCloud, bin_path: Path, label_path: Path) -> None:
    """Write a cloud in the scan/label binary formats (instance bits zero)."""
    write_labels(cloud.labels, label_path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    cloud.points.astype(POINT_DTYPE).tofile(bin_path)


def write_labels(labels: np.ndarray, label_path: Path) -> None:
    label_path.parent.mkdir(parents=True, exist_ok=True)
    labels.astype(LABEL_DTYPE).tofile(label_path)


def read_labels(label_path: Path) -> np.ndarray:
    """Read a learning-id label file written by write_labels."""
    if not label_path.exists():
        raise DataError(f"File not found: {label_path}")
    if label_path.stat().st_size % LABEL_RECORD_BYTES:
        raise DataError(f"{label_path}: truncated label record")
    words = np.fromfile(label_path, dtype=LABEL_DTYPE)
    return (words & SEMANTIC_MASK).astype(np.uint8)


@dataclass(frozen=True)
class ScanRef:
    """Location of one scan and its label file."""

    sequence: str
    frame: str
    scan_path: Path
    label_path: Path

    @property
    def scan_id(self) -> ScanId:
        return (self.sequence, self.frame)


def scan_paths(root: Path, scan_id: ScanId) -> tuple[Path, Path]:
    seq_dir = Path(root) / "sequences" / scan_id[0]
    return seq_dir / "velodyne" / f"{scan_id[1]}.bin", seq_dir / "labels" / f"{scan_id[1]}.label"


def enumerate_split(dataset_root: Path, groups: list[str]) -> list[ScanRef]:
    """All scans of the given sequences, ordered by (sequence, frame)."""
    refs: list[ScanRef] = []
    for seq in sorted(normalize_sequence(s) for s in groups):
        seq_dir = Path(dataset_root) / "sequences" / seq
        velodyne_dir = seq_dir / "velodyne"
        labels_dir = seq_dir / "labels"
        for directory in (velodyne_dir, labels_dir):
            if not directory.is_dir():
                raise DataError(f"Directory not found: {directory}")
        for scan_path in sorted(velodyne_dir.glob("*.bin")):
            label_path = labels_dir / f"{scan_path.stem}.label"
            if not label_path.exists():
                raise DataError(f"Scan without label file: {scan_path}")
            refs.append(ScanRef(seq, scan_path.stem, scan_path, label_path))
    if groups:
        logger.info("sequences %s: %d scans", ",".join(sorted(map(normalize_sequence, groups))), len(refs))
    return refs
