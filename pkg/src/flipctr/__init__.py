"""Aligned ID-based and text-based CTR models with a shared pretraining stage."""

__version__ = "0.1.0"
