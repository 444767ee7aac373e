"""Export GPT-2-architecture checkpoints into the PCDW engine format."""

from .export import ExportManifest, UnsupportedArchitecture, export

__all__ = ["ExportManifest", "UnsupportedArchitecture", "export"]

__version__ = "0.1.0"
