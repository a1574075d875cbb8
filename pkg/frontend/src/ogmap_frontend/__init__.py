"""Frontend adapter producing ogmap sequence detection files from images.

This package talks to the core mapping engine only through its on-disk
formats (manifest.json plus detections/<frame>.jsonl); it does not import
the core package.
"""

from .adapter import (
    AdapterConfig,
    AdapterError,
    FrameDetection,
    embed_caption,
    embed_captions,
    extract_frame,
    process_directory,
)

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "FrameDetection",
    "embed_caption",
    "embed_captions",
    "extract_frame",
    "process_directory",
]
