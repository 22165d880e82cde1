"""Text-line image preprocessing: height normalization and patch extraction.

A raw image is resized to a fixed height of 40 px (aspect ratio preserved),
scaled to [0, 1], and cut into overlapping 32x32 windows that slide with a
step of 8 px: two vertical positions (y = 0 and y = 8) per column, columns
left to right. The resulting ordered sequence is what the network consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvalidInputError

TARGET_HEIGHT = 40
PATCH_SIZE = 32
PATCH_STEP = 8


@dataclass
class PatchSequence:
    """Ordered 32x32 patches from one text-line image.

    ``patches`` is (D, C, 32, 32) float32; ``origins`` is (D, 2) of (x, y)
    coordinates in the normalized image, strictly increasing in (x, then y).
    """

    patches: np.ndarray
    origins: np.ndarray
    sample_id: str = ""

    @property
    def count(self):
        return self.patches.shape[0]


def load_image(path, channels=3):
    """Read a PNG or PPM/PGM file into an (H, W, C) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _bilinear_resize(img, out_h, out_w):
    """Bilinear resample (H, W, C) float to (out_h, out_w, C).

    Samples at pixel centers, so a same-size resize is an exact copy.
    """
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_to_height(img, target_height=TARGET_HEIGHT):
    """Scale a raw (H, W, C) uint8 image to the target height, values in [0, 1].

    Width scales by target_height/H (rounded); results narrower than 32 px are
    right-padded by replicating the last column so at least one window fits.
    """
    if img.ndim != 3:
        raise InvalidInputError(f"expected (H, W, C) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise InvalidInputError(f"image has a zero dimension: {img.shape}")
    out_w = max(1, int(round(w * target_height / h)))
    resized = _bilinear_resize(img.astype(np.float32) / 255.0, target_height, out_w)
    if out_w < PATCH_SIZE:
        resized = np.pad(resized, ((0, 0), (0, PATCH_SIZE - out_w), (0, 0)), mode="edge")
    return resized.astype(np.float32)


def extract_patches(img, sample_id=""):
    """Slide a 32x32 window with step 8 over a normalized (40, W, C) image.

    Per column x in {0, 8, 16, ...} with x + 32 <= W, emits the top (y=0) and
    bottom (y=8) windows, so D = 2 * (floor((W - 32) / 8) + 1).
    """
    h, w = img.shape[:2]
    if h != TARGET_HEIGHT:
        raise InvalidInputError(f"normalized image must have height {TARGET_HEIGHT}, got {h}")
    if w < PATCH_SIZE:
        raise InvalidInputError(f"normalized image narrower than {PATCH_SIZE}: {w}")
    xs = range(0, w - PATCH_SIZE + 1, PATCH_STEP)
    origins = np.array([(x, y) for x in xs for y in (0, PATCH_STEP)], dtype=np.int64)
    patches = np.empty((len(origins), img.shape[2], PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    for d, (x, y) in enumerate(origins):
        patches[d] = img[y : y + PATCH_SIZE, x : x + PATCH_SIZE].transpose(2, 0, 1)
    return PatchSequence(patches=patches, origins=origins, sample_id=sample_id)


def cap_patches(seq, n_max, rng):
    """Keep at most ``n_max`` patches, sampled without replacement.

    Kept indices are re-sorted ascending so the spatial order the recurrent
    stage depends on survives the sampling.
    """
    if n_max < 1:
        raise InvalidInputError("n_max must be >= 1")
    if seq.count <= n_max:
        return seq
    idx = np.sort(rng.choice(seq.count, size=n_max, replace=False))
    return PatchSequence(
        patches=seq.patches[idx], origins=seq.origins[idx], sample_id=seq.sample_id
    )


def prepare_image(raw, channel_means=None, target_height=TARGET_HEIGHT):
    """Resize to target height and subtract per-channel means (if given)."""
    norm = resize_to_height(raw, target_height)
    if channel_means is not None:
        norm = norm - np.asarray(channel_means, dtype=np.float32)
    return norm


def patch_sequence_from_file(path, channel_means=None, n_max=None, seed=0,
                             channels=3):
    """Full pipeline from an image file to a capped PatchSequence.

    Capping uses an rng derived from (seed, path) so it is reproducible
    regardless of the order images are visited in.
    """
    raw = load_image(path, channels=channels)
    norm = prepare_image(raw, channel_means)
    seq = extract_patches(norm, sample_id=str(path))
    if n_max is not None:
        digest = np.frombuffer(str(path).encode(), dtype=np.uint8).sum()
        seq = cap_patches(seq, n_max, np.random.default_rng([seed, int(digest)]))
    return seq
