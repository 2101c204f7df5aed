"""Scan readers, synthetic scene generation and data sources."""

from lidarcl.ingest.base import CloudSource, DatasetConfig, MemorySource, SemanticKittiSource, open_source
from lidarcl.ingest.semantickitti import LabeledCloud, LearningMap, ScanId, enumerate_split, read_scan, write_scan
from lidarcl.ingest.synthetic import SynthConfig, generate_synthetic, write_synthetic

__all__ = [
    "CloudSource",
    "DatasetConfig",
    "LabeledCloud",
    "LearningMap",
    "MemorySource",
    "ScanId",
    "SemanticKittiSource",
    "SynthConfig",
    "enumerate_split",
    "generate_synthetic",
    "open_source",
    "read_scan",
    "write_scan",
    "write_synthetic",
]
