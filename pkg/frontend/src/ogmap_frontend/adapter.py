"""Turn per-image open-vocabulary detections into mapping-engine input files.

The real pipeline chains four vision models (tagging, grounded detection,
mask segmentation, caption embedding); their identifiers or endpoints live
in AdapterConfig. Mock mode needs no network access and no model weights:
detections come from a sidecar annotation file next to each image
(``<image>.json``) and caption embeddings use the same signed-hash scheme
the mapping engine's synthetic generator documents, bit for bit.

Sidecar annotation format (mock mode)::

    {"boxes": [{"box": [x0, y0, x1, y1], "caption": "a red car",
                "score": 0.93}]}

Boxes are pixel rectangles (x1/y1 exclusive); the mock mask is the filled
rectangle. ``score`` is optional and only consulted when a box-keeping
threshold is configured.

Output matches the mapping engine's sequence layout exactly:

    manifest.json            {"embedding_dim", "image_width", "image_height"}
    detections/<frame>.jsonl one {"caption", "embedding", "mask_rle"} per line

Masks are run-length encoded over row-major pixels, alternating run lengths
starting with a run of zeros, little-endian uint32, base64. All files are
written atomically (temp file in the target directory, then rename).
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class AdapterError(ValueError):
    """Problem producing detections or embeddings."""


@dataclass
class AdapterConfig:
    """Model stage identifiers plus output knobs.

    ``box_threshold`` has no universally sensible default — detector score
    scales differ — so it is unset unless the caller chooses one; when unset
    every box is kept.
    """

    tagger_model: str = ""
    detector_model: str = ""
    segmenter_model: str = ""
    embedder_model: str = ""
    mock: bool = True
    embedding_dim: int = 256
    image_width: int = 800
    image_height: int = 600
    box_threshold: float | None = None

    def __post_init__(self):
        if self.embedding_dim < 8:
            raise AdapterError("embedding dim must be >= 8")
        if self.image_width <= 0 or self.image_height <= 0:
            raise AdapterError(
                f"image size must be positive, got "
                f"{self.image_width}x{self.image_height}"
            )


@dataclass
class FrameDetection:
    """One masked instance: rectangle mask, caption, unit-norm embedding."""

    mask: np.ndarray  # (h, w) bool
    caption: str
    embedding: np.ndarray  # (d,) float


# ---------------------------------------------------------------------------
# caption embeddings


def _tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def embed_caption(text: str, cfg: AdapterConfig) -> np.ndarray:
    """Unit-norm embedding for one caption.

    Mock mode implements the signed-hash bag-of-tokens embedding from the
    mapping engine's interface contract: per token, blake2b with a 9-byte
    digest; the first 8 bytes little-endian pick the basis index mod dim,
    the low bit of the ninth byte picks the sign; the token sum is
    L2-normalized.
    """
    if not cfg.mock:
        raise AdapterError(
            f"no embedding backend available for {cfg.embedder_model!r}; "
            "use mock mode"
        )
    tokens = _tokenize(text)
    if not tokens:
        raise AdapterError(f"no tokens in caption {text!r}")
    vec = np.zeros(cfg.embedding_dim, dtype=float)
    for tok in tokens:
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=9).digest()
        idx = int.from_bytes(digest[:8], "little") % cfg.embedding_dim
        sign = 1.0 if digest[8] & 1 == 0 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise AdapterError(f"degenerate embedding for caption {text!r}")
    return vec / norm


def embed_captions(texts: list[str], cfg: AdapterConfig) -> list[np.ndarray]:
    """Embed a batch of captions, preserving input order."""
    return [embed_caption(t, cfg) for t in texts]


# ---------------------------------------------------------------------------
# per-frame extraction


def _load_annotations(image_path: Path) -> list[dict]:
    sidecar = image_path.with_suffix(".json")
    if not sidecar.exists():
        raise AdapterError(f"{image_path}: no sidecar annotation file {sidecar.name}")
    try:
        doc = json.loads(sidecar.read_text())
        boxes = doc["boxes"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise AdapterError(f"{sidecar}: malformed annotations: {e}") from e
    if not isinstance(boxes, list):
        raise AdapterError(f"{sidecar}: 'boxes' must be a list")
    return boxes


def extract_frame(image_path: Path, cfg: AdapterConfig) -> list[FrameDetection]:
    """All kept detections for one image, possibly empty.

    Mock mode reads the sidecar annotation file instead of running models;
    an unreadable image or sidecar raises AdapterError.
    """
    image_path = Path(image_path)
    if not image_path.exists():
        raise AdapterError(f"{image_path}: image not readable")
    if not cfg.mock:
        raise AdapterError(
            f"no detection backend available for {cfg.detector_model!r}; "
            "use mock mode"
        )

    w, h = cfg.image_width, cfg.image_height
    detections = []
    for i, entry in enumerate(_load_annotations(image_path)):
        try:
            x0, y0, x1, y1 = (int(round(v)) for v in entry["box"])
            caption = entry["caption"]
            score = float(entry.get("score", 1.0))
        except (KeyError, TypeError, ValueError) as e:
            raise AdapterError(f"{image_path}: box {i}: malformed entry: {e}") from e
        if cfg.box_threshold is not None and score < cfg.box_threshold:
            continue
        x0, x1 = max(0, x0), min(w, x1)
        y0, y1 = max(0, y0), min(h, y1)
        if x0 >= x1 or y0 >= y1:
            raise AdapterError(f"{image_path}: box {i}: empty after clipping")
        mask = np.zeros((h, w), dtype=bool)
        mask[y0:y1, x0:x1] = True
        detections.append(FrameDetection(mask=mask, caption=caption,
                                         embedding=embed_caption(caption, cfg)))
    return detections


# ---------------------------------------------------------------------------
# output files


def _rle_encode(mask: np.ndarray) -> str:
    """Base64 RLE over row-major pixels, zeros-first run lengths."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return base64.b64encode(b"").decode("ascii")
    runs = []
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    for s, e in zip(bounds[:-1], bounds[1:]):
        if not runs and flat[s]:
            runs.append(0)  # leading run of zeros may be empty
        runs.append(int(e - s))
    return base64.b64encode(np.asarray(runs, dtype="<u4").tobytes()).decode("ascii")


def _atomic_write_text(path: Path, text: str):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _detection_lines(detections: list[FrameDetection]) -> str:
    lines = [json.dumps({
        "caption": d.caption,
        "embedding": [float(x) for x in d.embedding],
        "mask_rle": _rle_encode(d.mask),
    }, sort_keys=True) for d in detections]
    return "\n".join(lines) + ("\n" if lines else "")


def _frame_index(image_path: Path, position: int) -> int:
    try:
        return int(image_path.stem)
    except ValueError:
        return position


def process_directory(image_dir: Path, out_dir: Path, cfg: AdapterConfig) -> int:
    """Run extraction over every image in ``image_dir`` and write
    ``manifest.json`` plus ``detections/<frame>.jsonl`` under ``out_dir``.

    A frame whose extraction fails is skipped with the cause logged; other
    frames still go through. Returns the number of frames written. If
    ``out_dir`` already holds a manifest, its embedding dim must match the
    configured one.
    """
    image_dir, out_dir = Path(image_dir), Path(out_dir)
    images = sorted(p for p in image_dir.iterdir()
                    if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise AdapterError(f"no images found in {image_dir}")

    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        existing = json.loads(manifest_path.read_text())
        if int(existing["embedding_dim"]) != cfg.embedding_dim:
            raise AdapterError(
                f"embedding dim {cfg.embedding_dim} != manifest "
                f"{existing['embedding_dim']}"
            )

    det_dir = out_dir / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)

    written = 0
    for position, image in enumerate(images):
        try:
            detections = extract_frame(image, cfg)
        except AdapterError as e:
            log.warning("frame %s skipped: %s", image.name, e)
            continue
        idx = _frame_index(image, position)
        _atomic_write_text(det_dir / f"{idx:06d}.jsonl",
                           _detection_lines(detections))
        written += 1

    _atomic_write_text(manifest_path, json.dumps({
        "embedding_dim": cfg.embedding_dim,
        "image_width": cfg.image_width,
        "image_height": cfg.image_height,
    }, sort_keys=True, indent=1) + "\n")
    return written
