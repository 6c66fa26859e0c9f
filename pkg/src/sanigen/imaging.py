"""Raster image and mask primitives.

Images are plain numpy uint8 arrays: ``(H, W)`` for 8-bit grayscale,
``(H, W, 3)`` for RGB and ``(H, W, 4)`` for RGBA.  Masks are ``(H, W)``
boolean arrays.  All operations are pure: inputs are treated as read-only
and results are freshly allocated, so values can be shared freely across
threads.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import DimensionMismatchError, InvalidArgumentError

#: BT.601 luma weights used for grayscale conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_MODE_BY_CHANNELS = {1: "L", 3: "RGB", 4: "RGBA"}


@dataclass(frozen=True)
class NoiseParams:
    """Gaussian pixel-noise settings: standard deviation in 8-bit intensity
    units and the 64-bit seed of the deterministic generator."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError(f"noise sigma must be >= 0, got {self.sigma}")


def ensure_image(img: np.ndarray) -> np.ndarray:
    """Validate that *img* is a supported uint8 raster and return it."""
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise InvalidArgumentError("image must be a uint8 numpy array")
    if img.ndim == 2:
        pass
    elif img.ndim == 3 and img.shape[2] in (3, 4):
        pass
    else:
        raise InvalidArgumentError(f"unsupported image shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidArgumentError("image must be at least 1x1")
    return img


def ensure_mask(mask: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    """Validate a boolean mask, optionally against an image's dimensions."""
    if not isinstance(mask, np.ndarray) or mask.dtype != np.bool_ or mask.ndim != 2:
        raise InvalidArgumentError("mask must be a 2-D boolean numpy array")
    if like is not None and mask.shape != like.shape[:2]:
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match image shape {like.shape[:2]}"
        )
    return mask


def channel_count(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Convert to 8-bit grayscale with BT.601 luma weights.

    Grayscale input is returned as-is (a copy); the alpha channel of RGBA
    input is ignored.  Rounding is half-up so results are platform-stable.
    """
    ensure_image(img)
    if img.ndim == 2:
        return img.copy()
    rgb = img[:, :, :3].astype(np.float64)
    luma = rgb[:, :, 0] * LUMA_WEIGHTS[0] + rgb[:, :, 1] * LUMA_WEIGHTS[1] + rgb[:, :, 2] * LUMA_WEIGHTS[2]
    return np.floor(luma + 0.5).astype(np.uint8)


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out every pixel where the mask is false; keep the rest."""
    ensure_image(img)
    ensure_mask(mask, like=img)
    out = img.copy()
    out[~mask] = 0
    return out


def composite(fg: np.ndarray, fg_mask: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Deterministic paste: foreground pixels where the mask is true,
    background pixels elsewhere."""
    ensure_image(fg)
    ensure_image(bg)
    if fg.shape != bg.shape:
        raise DimensionMismatchError(
            f"foreground shape {fg.shape} does not match background shape {bg.shape}"
        )
    ensure_mask(fg_mask, like=fg)
    out = bg.copy()
    out[fg_mask] = fg[fg_mask]
    return out


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)


def canny_edges(
    img: np.ndarray,
    low: float = 50.0,
    high: float = 150.0,
    *,
    blur_size: int = 5,
    blur_sigma: float = 1.4,
) -> np.ndarray:
    """Classical Canny edge detector.

    Pipeline: Gaussian blur (default 5x5, sigma 1.4) -> Sobel gradient
    magnitude and direction -> non-maximum suppression (4 quantized
    directions, ties kept) -> double threshold on the raw gradient
    magnitude -> hysteresis via 8-connected components.  Returns a Gray8
    map with edge pixels at 255 and everything else 0.
    """
    if low > high:
        raise InvalidArgumentError(f"canny low threshold {low} exceeds high threshold {high}")
    gray = to_grayscale(img).astype(np.float64)

    blurred = ndimage.convolve(gray, _gaussian_kernel(blur_size, blur_sigma), mode="reflect")
    gx = ndimage.convolve(blurred, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(blurred, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx))
    angle[angle < 0] += 180.0

    # Quantize gradient direction into 4 buckets and compare each pixel with
    # its two neighbours along that direction.
    bucket = np.zeros(angle.shape, dtype=np.uint8)
    bucket[(angle >= 22.5) & (angle < 67.5)] = 1
    bucket[(angle >= 67.5) & (angle < 112.5)] = 2
    bucket[(angle >= 112.5) & (angle < 157.5)] = 3

    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    fwd = [shifted(0, 1), shifted(1, -1), shifted(1, 0), shifted(1, 1)]
    bwd = [shifted(0, -1), shifted(-1, 1), shifted(-1, 0), shifted(-1, -1)]
    neighbour_a = np.choose(bucket, fwd)
    neighbour_b = np.choose(bucket, bwd)
    suppressed = np.where((mag >= neighbour_a) & (mag >= neighbour_b), mag, 0.0)

    strong = suppressed >= high
    weak = suppressed >= low
    if not strong.any():
        return np.zeros(mag.shape, dtype=np.uint8)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=np.int8))
    keep = np.unique(labels[strong])
    keep = keep[keep > 0]
    edges = np.isin(labels, keep)
    return np.where(edges, 255, 0).astype(np.uint8)


def add_gaussian_noise(img: np.ndarray, mask: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Add rounded, clamped Gaussian noise to the masked pixels.

    The generator is seeded from ``params.seed`` and consumed in row-major
    channel order over the full canvas, so the draw assigned to a pixel does
    not depend on the mask shape.  ``sigma == 0`` is the identity.
    """
    ensure_image(img)
    ensure_mask(mask, like=img)
    if params.sigma == 0:
        return img.copy()
    rng = np.random.default_rng(np.uint64(params.seed))
    noise = np.rint(rng.normal(0.0, params.sigma, size=img.shape))
    noisy = np.clip(img.astype(np.int64) + noise.astype(np.int64), 0, 255).astype(np.uint8)
    out = img.copy()
    out[mask] = noisy[mask]
    return out


def resize_nearest(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resample to the given size (images or masks)."""
    if width < 1 or height < 1:
        raise InvalidArgumentError("resize target must be at least 1x1")
    src_h, src_w = img.shape[:2]
    rows = np.minimum((np.arange(height) + 0.5) * src_h / height, src_h - 1).astype(np.intp)
    cols = np.minimum((np.arange(width) + 0.5) * src_w / width, src_w - 1).astype(np.intp)
    return img[rows[:, None], cols[None, :]].copy()


# --- lossless PNG I/O -------------------------------------------------------


def encode_png(img: np.ndarray) -> bytes:
    """Encode an image (or boolean mask) as PNG bytes."""
    if isinstance(img, np.ndarray) and img.dtype == np.bool_:
        img = np.where(img, 255, 0).astype(np.uint8)
    ensure_image(img)
    mode = _MODE_BY_CHANNELS[channel_count(img)]
    buf = io.BytesIO()
    PILImage.fromarray(img, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to a uint8 array; non-native modes convert to RGB."""
    try:
        with PILImage.open(io.BytesIO(data)) as pil:
            if pil.mode not in ("L", "RGB", "RGBA"):
                pil = pil.convert("RGBA" if "transparency" in pil.info else "RGB")
            arr = np.asarray(pil, dtype=np.uint8)
    except Exception as exc:
        raise InvalidArgumentError(f"cannot decode PNG payload: {exc}") from exc
    return ensure_image(arr.copy())


def read_png(path: str | Path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


def write_png(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def read_mask_png(path: str | Path) -> np.ndarray:
    """Read a single-channel mask PNG (0 = false, anything else = true)."""
    arr = read_png(path)
    if arr.ndim != 2:
        arr = to_grayscale(arr)
    return arr != 0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    ensure_mask(mask)
    write_png(path, np.where(mask, 255, 0).astype(np.uint8))
