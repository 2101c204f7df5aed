"""Tests for lidarcl ingest."""
