"""Dual-encoder feature exporter producing PM2F files."""

from .backbones import BACKBONES, ClipViTB16, SetupError, SimulatedViTB16, build_backbone
from .export import export_image_features, export_text_features
from .manifest import ExportManifest, ManifestError

__version__ = "0.1.0"
