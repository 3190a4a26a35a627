"""Nested image/metadata contrastive pre-training on hierarchical patient/lesion data."""

__version__ = "0.1.0"
