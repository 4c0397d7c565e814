"""Image decoding, downsampling, and crop geometry.

All values are immutable after construction; every operation is a pure
function and safe to call concurrently.

Each ``Image`` tracks which region of the originally loaded file it shows
(``origin_rect`` in original pixel coordinates, plus ``origin_size``).
Loading sets it to the full frame, cropping narrows it, resizing keeps it.
The mapping survives PNG encode/decode via text chunks, which is what lets
a downstream consumer reason about presented scale.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageOps, UnidentifiedImageError
from PIL.PngImagePlugin import PngInfo

__all__ = [
    "Image",
    "NormBBox",
    "PixelRect",
    "CropPolicy",
    "DecodeError",
    "EncodeError",
    "RectOutOfBounds",
    "load_image",
    "decode",
    "downsample",
    "normalize",
    "denormalize",
    "expand_and_clamp",
    "crop",
    "encode",
]

# PNG text-chunk keys used to carry provenance across encode/decode.
_META_ORIGIN_SIZE = "view-origin-size"
_META_ORIGIN_RECT = "view-origin-rect"


class DecodeError(Exception):
    """Raised when a file or byte stream cannot be decoded as an image."""


class EncodeError(Exception):
    """Raised when an image cannot be encoded in the requested format."""


class RectOutOfBounds(Exception):
    """Raised when a pixel rectangle does not fit the image it is applied to."""


def round_half_away(x: float) -> int:
    """Round half away from zero (so ports agree bit-for-bit on .5 cases)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True, eq=False)
class Image:
    """Decoded raster. ``pixels`` is a read-only (height, width, channels) uint8 array."""

    pixels: np.ndarray
    source_path: str | None = None
    # Region of the originally loaded frame this image presents, and that
    # frame's full size, both in original pixel coordinates.
    origin_size: tuple[int, int] | None = None
    origin_rect: tuple[int, int, int, int] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        px = self.pixels
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        px = np.ascontiguousarray(px, dtype=np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        if self.channels not in (1, 3, 4):
            raise ValueError(f"unsupported channel count {self.channels}")
        if self.origin_size is None:
            object.__setattr__(self, "origin_size", (self.width, self.height))
        if self.origin_rect is None:
            ow, oh = self.origin_size
            object.__setattr__(self, "origin_rect", (0, 0, ow, oh))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class NormBBox:
    """Axis-aligned box in fractions of image width/height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid normalized box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @staticmethod
    def repair(x1: float, y1: float, x2: float, y2: float) -> tuple["NormBBox", bool]:
        """Build a valid box from raw coordinates, sorting inverted pairs,
        clamping to [0, 1], and widening degenerate edges. Returns the box
        and whether any repair was applied."""
        ox = (x1, y1, x2, y2)
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        x1, y1 = max(0.0, x1), max(0.0, y1)
        x2, y2 = min(1.0, x2), min(1.0, y2)
        eps = 1e-6
        if x2 - x1 < eps:
            c = min(max((x1 + x2) / 2, eps), 1.0 - eps)
            x1, x2 = c - eps / 2, c + eps / 2
        if y2 - y1 < eps:
            c = min(max((y1 + y2) / 2, eps), 1.0 - eps)
            y1, y2 = c - eps / 2, c + eps / 2
        repaired = (x1, y1, x2, y2) != ox
        return NormBBox(x1, y1, x2, y2), repaired


@dataclass(frozen=True)
class PixelRect:
    """Half-open pixel rectangle: right and bottom are exclusive."""

    left: int
    top: int
    right: int
    bottom: int

    def __post_init__(self):
        if not (self.left < self.right and self.top < self.bottom):
            raise ValueError(f"degenerate rect {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.left, self.top, self.right, self.bottom)

    def center(self) -> tuple[float, float]:
        return ((self.left + self.right) / 2, (self.top + self.bottom) / 2)

    def contains_rect(self, other: "PixelRect") -> bool:
        return (
            self.left <= other.left
            and self.top <= other.top
            and self.right >= other.right
            and self.bottom >= other.bottom
        )


@dataclass(frozen=True)
class CropPolicy:
    """How a localized box is grown before cropping.

    expansion_factor: box scaled about its center.
    min_side_px: minimum crop side after expansion.
    max_side_px: crops larger than this get re-downsampled before submission.
    """

    expansion_factor: float = 1.2
    min_side_px: int = 448
    max_side_px: int = 2048

    def __post_init__(self):
        if self.expansion_factor < 1.0:
            raise ValueError("expansion_factor must be >= 1")
        if not (1 <= self.min_side_px <= self.max_side_px):
            raise ValueError("need 1 <= min_side_px <= max_side_px")


def _from_pil(pil: PILImage.Image, source_path: str | None) -> Image:
    if pil.mode not in ("L", "RGB", "RGBA"):
        pil = pil.convert("RGB")
    meta = {}
    origin_size = None
    origin_rect = None
    info = getattr(pil, "text", None) or pil.info or {}
    for k, v in info.items():
        if not isinstance(v, str):
            continue
        if k == _META_ORIGIN_SIZE:
            w, h = v.split("x")
            origin_size = (int(w), int(h))
        elif k == _META_ORIGIN_RECT:
            origin_rect = tuple(int(t) for t in v.split(","))
        else:
            meta[str(k)] = str(v)
    return Image(
        pixels=np.asarray(pil),
        source_path=source_path,
        origin_size=origin_size,
        origin_rect=origin_rect,
        meta=meta,
    )


def load_image(path: str | Path) -> Image:
    """Decode a PNG/JPEG/WebP file, honoring EXIF orientation."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with PILImage.open(path) as pil:
            pil.load()
            pil = ImageOps.exif_transpose(pil)
            return _from_pil(pil, str(path))
    except UnidentifiedImageError as e:
        raise DecodeError(f"{path}: not a decodable image") from e
    except OSError as e:
        raise DecodeError(f"{path}: {e}") from e


def decode(data: bytes) -> Image:
    """Decode an in-memory byte stream."""
    try:
        with PILImage.open(io.BytesIO(data)) as pil:
            pil.load()
            pil = ImageOps.exif_transpose(pil)
            return _from_pil(pil, None)
    except (UnidentifiedImageError, OSError) as e:
        raise DecodeError(f"byte stream: {e}") from e


def downsample(img: Image, max_side: int) -> Image:
    """Shrink so the longer side equals ``max_side``, preserving aspect ratio.

    Returns the input unchanged when already small enough. Uses
    area-averaging resampling.
    """
    if max_side < 1:
        raise ValueError("max_side must be >= 1")
    long_side = max(img.width, img.height)
    if long_side <= max_side:
        return img
    scale = max_side / long_side
    if img.width >= img.height:
        new_w = max_side
        new_h = max(1, round_half_away(img.height * scale))
    else:
        new_h = max_side
        new_w = max(1, round_half_away(img.width * scale))
    pil = PILImage.fromarray(np.asarray(img.pixels))
    resized = pil.resize((new_w, new_h), resample=PILImage.Resampling.BOX)
    return Image(
        pixels=np.asarray(resized),
        source_path=img.source_path,
        origin_size=img.origin_size,
        origin_rect=img.origin_rect,
        meta=dict(img.meta),
    )


def denormalize(b: NormBBox, img: Image) -> PixelRect:
    """Realize a normalized box on an image, clamped and never degenerate."""
    left = round_half_away(b.x1 * img.width)
    right = round_half_away(b.x2 * img.width)
    top = round_half_away(b.y1 * img.height)
    bottom = round_half_away(b.y2 * img.height)
    left = min(max(left, 0), img.width)
    right = min(max(right, 0), img.width)
    top = min(max(top, 0), img.height)
    bottom = min(max(bottom, 0), img.height)
    # Degenerate rounding: widen by one pixel toward the in-bounds side.
    if right <= left:
        if right < img.width:
            right = left + 1
        else:
            left = right - 1
    if bottom <= top:
        if bottom < img.height:
            bottom = top + 1
        else:
            top = bottom - 1
    return PixelRect(left, top, right, bottom)


def normalize(r: PixelRect, img: Image) -> NormBBox:
    """Inverse of denormalize up to rounding."""
    return NormBBox(
        r.left / img.width,
        r.top / img.height,
        r.right / img.width,
        r.bottom / img.height,
    )


def expand_and_clamp(r: PixelRect, policy: CropPolicy, img: Image) -> PixelRect:
    """Grow a rect per policy, then fit it in-bounds by translating before truncating."""
    cx, cy = r.center()
    want_w = round_half_away(r.width * policy.expansion_factor)
    want_h = round_half_away(r.height * policy.expansion_factor)
    want_w = min(max(want_w, policy.min_side_px, r.width), img.width)
    want_h = min(max(want_h, policy.min_side_px, r.height), img.height)
    left = round_half_away(cx - want_w / 2)
    top = round_half_away(cy - want_h / 2)
    # Translate fully in-bounds; sizes were already capped at image dims.
    left = min(max(left, 0), img.width - want_w)
    top = min(max(top, 0), img.height - want_h)
    return PixelRect(left, top, left + want_w, top + want_h)


def crop(img: Image, r: PixelRect) -> Image:
    """Exact pixel copy of the rectangle. No resampling."""
    if not (0 <= r.left < r.right <= img.width and 0 <= r.top < r.bottom <= img.height):
        raise RectOutOfBounds(f"{r.as_tuple()} outside {img.width}x{img.height}")
    sub = np.array(img.pixels[r.top : r.bottom, r.left : r.right, :])
    # Map the crop window back into original-frame coordinates.
    o_left, o_top, o_right, o_bottom = img.origin_rect
    sx = (o_right - o_left) / img.width
    sy = (o_bottom - o_top) / img.height
    new_rect = (
        o_left + round_half_away(r.left * sx),
        o_top + round_half_away(r.top * sy),
        o_left + round_half_away(r.right * sx),
        o_top + round_half_away(r.bottom * sy),
    )
    return Image(
        pixels=sub,
        source_path=img.source_path,
        origin_size=img.origin_size,
        origin_rect=new_rect,
        meta=dict(img.meta),
    )


def encode(img: Image, format: str = "png", quality: int = 90) -> bytes:
    """Serialize to PNG (lossless, carries provenance metadata) or JPEG."""
    fmt = format.lower()
    if fmt not in ("png", "jpeg"):
        raise EncodeError(f"unsupported format {format!r}")
    arr = np.asarray(img.pixels)
    if img.channels == 1:
        arr = arr[:, :, 0]
    pil = PILImage.fromarray(arr)
    buf = io.BytesIO()
    try:
        if fmt == "png":
            info = PngInfo()
            ow, oh = img.origin_size
            info.add_text(_META_ORIGIN_SIZE, f"{ow}x{oh}")
            info.add_text(_META_ORIGIN_RECT, ",".join(str(t) for t in img.origin_rect))
            for k, v in img.meta.items():
                info.add_text(k, v)
            pil.save(buf, format="PNG", pnginfo=info, compress_level=1)
        else:
            if not (1 <= quality <= 100):
                raise EncodeError(f"jpeg quality {quality} outside 1-100")
            if pil.mode == "RGBA":
                pil = pil.convert("RGB")
            pil.save(buf, format="JPEG", quality=quality)
    except EncodeError:
        raise
    except OSError as e:
        raise EncodeError(str(e)) from e
    return buf.getvalue()


def with_meta(img: Image, **tags: str) -> Image:
    """Copy with extra metadata tags (carried through PNG encode)."""
    meta = dict(img.meta)
    meta.update({k: str(v) for k, v in tags.items()})
    return replace(img, meta=meta)
