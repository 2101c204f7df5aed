"""Tests for the SemanticKITTI reader and writer."""

import json
import struct

import numpy as np
import pytest

from lidarcl.errors import DataError, InvalidClassError
from lidarcl.ingest.semantickitti import (
    CIL_SCAN_COUNTS,
    CIL_SEQUENCE_GROUPS,
    LabeledCloud,
    LearningMap,
    enumerate_split,
    normalize_sequence,
    read_labels,
    read_scan,
    scan_paths,
    write_labels,
    write_scan,
)
from lidarcl.taxonomy import UNLABELED


def write_raw(tmp_path, points: list[tuple[float, float, float, float]], words: list[int]):
    bin_path = tmp_path / "sequences" / "00" / "velodyne" / "000000.bin"
    label_path = tmp_path / "sequences" / "00" / "labels" / "000000.label"
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    label_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(b"".join(struct.pack("<4f", *p) for p in points))
    label_path.write_bytes(b"".join(struct.pack("<I", w) for w in words))
    return bin_path, label_path


@pytest.fixture
def raw_map() -> LearningMap:
    return LearningMap({0: UNLABELED, 10: 1, 40: 2}, strict=True)


class TestReadScan:
    """Tests for read_scan."""

    def test_single_record(self, tmp_path, raw_map):
        """16-byte scan + 4-byte label file -> one point."""
        bin_path, label_path = write_raw(tmp_path, [(1.0, 2.0, -1.5, 0.25)], [10])

        cloud = read_scan(bin_path, label_path, raw_map)

        assert cloud.num_points == 1
        assert cloud.points.tolist() == [[1.0, 2.0, -1.5, 0.25]]
        assert cloud.labels.tolist() == [1]
        assert cloud.scan_id == ("00", "000000")

    def test_instance_bits_discarded(self, tmp_path):
        """Label word 0x0005000A has semantic id 0x000A."""
        bin_path, label_path = write_raw(tmp_path, [(0, 0, 0, 0)], [0x0005_000A])
        learning_map = LearningMap({0x000A: 7})

        cloud = read_scan(bin_path, label_path, learning_map)

        assert cloud.labels.tolist() == [7]

    def test_truncated_record(self, tmp_path, raw_map):
        """A 33-byte scan is not a whole number of records."""
        bin_path, label_path = write_raw(tmp_path, [(0, 0, 0, 0), (1, 1, 1, 1)], [10, 10])
        bin_path.write_bytes(bin_path.read_bytes() + b"\x00")

        with pytest.raises(DataError, match="truncated"):
            read_scan(bin_path, label_path, raw_map)

    def test_size_mismatch(self, tmp_path, raw_map):
        """Label file must hold exactly one word per point."""
        bin_path, label_path = write_raw(tmp_path, [(0, 0, 0, 0), (1, 1, 1, 1)], [10])

        with pytest.raises(DataError, match="expected 8"):
            read_scan(bin_path, label_path, raw_map)

    def test_missing_file(self, tmp_path, raw_map):
        with pytest.raises(DataError, match="not found"):
            read_scan(tmp_path / "a.bin", tmp_path / "a.label", raw_map)

    def test_unmapped_raw_id_strict(self, tmp_path, raw_map):
        """Strict maps reject unknown raw ids."""
        bin_path, label_path = write_raw(tmp_path, [(0, 0, 0, 0)], [99])

        with pytest.raises(DataError, match=r"\[99\]"):
            read_scan(bin_path, label_path, raw_map)

    def test_unmapped_raw_id_lenient(self, tmp_path, caplog):
        """Lenient maps mark unknown raw ids unlabeled and log them."""
        bin_path, label_path = write_raw(tmp_path, [(0, 0, 0, 0), (0, 0, 0, 0)], [99, 10])
        lenient = LearningMap({10: 1}, strict=False)

        cloud = read_scan(bin_path, label_path, lenient)

        assert cloud.labels.tolist() == [UNLABELED, 1]
        assert "raw id 99" in caplog.text


class TestRoundTrip:
    """Tests for write_scan / read_scan."""

    def test_synthetic_cloud_round_trip(self, tmp_path, tiny_dataset, desk):
        """read_scan(write_scan(cloud)) reproduces the cloud exactly."""
        cloud = tiny_dataset.groups[1][2]
        bin_path, label_path = scan_paths(tmp_path, cloud.scan_id)
        write_scan(cloud, bin_path, label_path)

        back = read_scan(bin_path, label_path, LearningMap.identity(desk))

        assert np.array_equal(back.points, cloud.points)
        assert np.array_equal(back.labels, cloud.labels)
        assert back.scan_id == cloud.scan_id

    def test_label_words_have_zero_instance_bits(self, tmp_path):
        path = tmp_path / "x.label"
        write_labels(np.array([3, 255], dtype=np.uint8), path)

        assert np.fromfile(path, dtype="<u4").tolist() == [3, 255]
        assert read_labels(path).tolist() == [3, 255]


class TestLearningMap:
    """Tests for LearningMap."""

    def test_remap_is_pointwise(self, raw_map):
        """Changing one entry only changes points carrying that raw id."""
        raw = np.array([10, 40, 10, 0, 40], dtype=np.uint16)
        before = raw_map.remap(raw)
        after = raw_map.with_entry(40, 5).remap(raw)

        changed = before != after
        assert changed.tolist() == [False, True, False, False, True]
        assert after[changed].tolist() == [5, 5]

    def test_default_map_covers_cil(self, cil):
        """The bundled map targets only CIL classes or unlabeled."""
        learning_map = LearningMap.default(cil)

        assert learning_map[0] == UNLABELED
        assert learning_map[10] == cil.class_id("car")
        assert learning_map[40] == cil.class_id("road")

    def test_default_map_strict_on_smaller_taxonomy(self, desk):
        """Classes missing from the taxonomy are errors in strict mode."""
        with pytest.raises(InvalidClassError):
            LearningMap.default(desk, strict=True)

    def test_default_map_lenient_on_smaller_taxonomy(self, desk):
        """...and unlabeled in lenient mode."""
        learning_map = LearningMap.default(desk, strict=False)

        assert learning_map[11] == UNLABELED  # bicycle
        assert learning_map[10] == desk.class_id("car")

    def test_from_file_not_found(self, tmp_path, cil):
        with pytest.raises(DataError):
            LearningMap.from_file(tmp_path / "missing.json", cil)

    def test_from_file(self, tmp_path, cil):
        path = tmp_path / "map.json"
        path.write_text(json.dumps({"0": "unlabeled", "7": "Other_Ground"}))

        learning_map = LearningMap.from_file(path, cil)

        assert learning_map[7] == cil.class_id("other-ground")
        assert 8 not in learning_map


class TestEnumerateSplit:
    """Tests for enumerate_split."""

    def make_tree(self, root, layout: dict[str, list[str]]):
        for seq, frames in layout.items():
            for frame in frames:
                cloud = LabeledCloud(np.zeros((1, 4), dtype=np.float32), np.array([1], dtype=np.uint8), (seq, frame))
                write_scan(cloud, *scan_paths(root, cloud.scan_id))

    def test_lexicographic_order(self, tmp_path):
        """Scans are sorted by (sequence, frame)."""
        self.make_tree(tmp_path, {"02": ["000001", "000000"], "01": ["000003"]})

        refs = enumerate_split(tmp_path, ["02", "1"])

        assert [r.scan_id for r in refs] == [("01", "000003"), ("02", "000000"), ("02", "000001")]

    def test_empty_group_list(self, tmp_path):
        assert enumerate_split(tmp_path, []) == []

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="Directory not found"):
            enumerate_split(tmp_path, ["08"])

    def test_scan_without_label(self, tmp_path):
        self.make_tree(tmp_path, {"00": ["000000"]})
        (tmp_path / "sequences" / "00" / "labels" / "000000.label").unlink()

        with pytest.raises(DataError, match="without label"):
            enumerate_split(tmp_path, ["00"])

    def test_normalize_sequence(self):
        assert normalize_sequence(8) == "08"
        assert normalize_sequence("8") == "08"
        assert normalize_sequence("10") == "10"

    def test_cil_groups_constants(self):
        """The published CIL split sizes."""
        assert CIL_SEQUENCE_GROUPS[0] == ("01", "02", "03")
        assert list(CIL_SCAN_COUNTS.values()) == [6563, 4623, 4541, 4071]


class TestLabeledCloud:
    """Tests for LabeledCloud invariants."""

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            LabeledCloud(np.zeros((2, 4), dtype=np.float32), np.zeros(3, dtype=np.uint8), ("00", "0"))

    def test_non_finite(self):
        points = np.zeros((1, 4), dtype=np.float32)
        points[0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            LabeledCloud(points, np.zeros(1, dtype=np.uint8), ("00", "0"))

    def test_empty(self):
        with pytest.raises(DataError, match="empty"):
            LabeledCloud(np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.uint8), ("00", "0"))
