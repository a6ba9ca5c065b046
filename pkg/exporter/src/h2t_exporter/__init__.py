"""Activation exporter: real vision backbones to H2TA stores."""

from .export import ExportError, ExportSpec, export, resolve_taps

__all__ = ["ExportError", "ExportSpec", "export", "resolve_taps"]
__version__ = "0.1.0"
