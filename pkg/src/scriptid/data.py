"""Dataset manifests, stratified splits, and a synthetic text-line generator.

A manifest is a UTF-8 TSV file, one ``relative/path<TAB>label`` record per
line, resolved against the manifest's directory. The class table preserves
first-appearance order.

The synthetic generator renders pseudo-glyph strokes whose statistics
(thickness, curvature, density, baseline waviness) differ per class, on noisy
gray backgrounds. It gives a corpus that is texture-separable - a linear
classifier on intensity histograms can learn it - without shipping any font
assets. Generation is pure given (spec, seed): image j of class k is drawn
from a generator seeded with (seed, global index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InvalidInputError
from .patches import patch_sequence_from_file, prepare_image, load_image


@dataclass
class DatasetManifest:
    records: list            # (relative path str, label str)
    class_table: list        # unique labels, first-appearance order
    root: Path

    def __len__(self):
        return len(self.records)

    def path(self, i):
        return self.root / self.records[i][0]

    def label_index(self, i):
        return self.class_table.index(self.records[i][1])


def _build_class_table(records):
    table = []
    for _, label in records:
        if label not in table:
            table.append(label)
    return table


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'path<TAB>label', got {line!r}")
        rel, label = parts
        if rel in seen:
            raise DataError(f"{path}:{lineno}: duplicate record for {rel}")
        seen.add(rel)
        records.append((rel, label))
    root = path.parent
    for rel, _ in records:
        if not (root / rel).exists():
            raise DataError(f"manifest references a missing image file: {root / rel}")
    return DatasetManifest(records=records, class_table=_build_class_table(records),
                           root=root)


def save_manifest(manifest, path):
    path = Path(path)
    lines = [f"{rel}\t{label}" for rel, label in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def manifest_from_folders(root, extensions=(".png", ".ppm", ".pgm")):
    """Adapter for class-per-directory layouts: each subfolder is one class."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for img in sorted(sub.iterdir()):
            if img.suffix.lower() in extensions:
                records.append((str(img.relative_to(root)), sub.name))
    if not records:
        raise DataError(f"no images found under {root}")
    return DatasetManifest(records=records, class_table=_build_class_table(records),
                           root=root)


def split(manifest, ratios, seed):
    """Stratified split into len(ratios) manifests.

    Per class: a seeded shuffle, then floor(n * ratio) samples go to each
    split after the first; the remainder goes to the first split.
    """
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"split ratios must sum to 1, got {ratios}")
    nonzero = sum(1 for r in ratios if r > 0)
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in ratios]
    for label in manifest.class_table:
        idxs = [i for i, (_, lab) in enumerate(manifest.records) if lab == label]
        if len(idxs) < nonzero:
            raise DataError(f"class {label!r} has {len(idxs)} samples, "
                            f"fewer than the {nonzero} non-empty splits")
        idxs = [idxs[j] for j in rng.permutation(len(idxs))]
        counts = [int(math.floor(len(idxs) * r)) for r in ratios]
        counts[0] = len(idxs) - sum(counts[1:])
        pos = 0
        for b, count in enumerate(counts):
            buckets[b].extend(idxs[pos : pos + count])
            pos += count
    out = []
    for idxs in buckets:
        recs = [manifest.records[i] for i in sorted(idxs)]
        out.append(DatasetManifest(records=recs, class_table=list(manifest.class_table),
                                   root=manifest.root))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrokeStyle:
    """Per-class stroke statistics for the pseudo-glyph renderer."""

    stroke_width: float   # radius-ish, px
    curvature: float      # 0 = straight segments, 1 = strongly bent
    density: int          # strokes per glyph
    waviness: float       # baseline wobble amplitude, px


DEFAULT_STYLES = (
    StrokeStyle(stroke_width=3.8, curvature=0.12, density=2, waviness=0.8),
    StrokeStyle(stroke_width=1.0, curvature=0.85, density=4, waviness=3.0),
    StrokeStyle(stroke_width=2.0, curvature=0.45, density=10, waviness=1.6),
)


def default_styles(n_classes):
    styles = list(DEFAULT_STYLES)
    k = 0
    while len(styles) < n_classes:
        base = DEFAULT_STYLES[k % len(DEFAULT_STYLES)]
        styles.append(replace(base, stroke_width=base.stroke_width + 1.2 * (1 + k // 3),
                              density=base.density + 2 * (1 + k // 3)))
        k += 1
    return styles[:n_classes]


@dataclass
class SynthSpec:
    n_classes: int = 3
    samples_per_class: int = 10
    width_range: tuple = (60, 300)
    height_range: tuple = (30, 60)
    noise_level: float = 8.0
    seed: int = 0
    styles: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if not self.styles:
            self.styles = default_styles(self.n_classes)
        if len(set(self.styles)) != len(self.styles):
            raise InvalidInputError("class stroke styles must be pairwise distinct")


def _stamp_points(mask, ys, xs, radius):
    h, w = mask.shape
    r = int(math.ceil(radius))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius + 0.25:
                yy = np.clip(np.rint(ys) + dy, 0, h - 1).astype(int)
                xx = np.clip(np.rint(xs) + dx, 0, w - 1).astype(int)
                mask[yy, xx] = True


def _draw_stroke(mask, box, style, rng):
    x0, y0, x1, y1 = box
    p0 = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    p2 = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    mid = (p0 + p2) / 2
    span = np.linalg.norm(p2 - p0) + 1e-6
    normal = np.array([-(p2 - p0)[1], (p2 - p0)[0]]) / span
    bend = style.curvature * span * rng.uniform(-1.0, 1.0)
    p1 = mid + bend * normal
    n_pts = max(int(2 * span), 6)
    t = np.linspace(0.0, 1.0, n_pts)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2
    _stamp_points(mask, pts[:, 1], pts[:, 0], style.stroke_width / 2)


def render_text_line(height, width, style, rng, noise_level=10.0):
    """Render one pseudo text line as an (H, W, 3) uint8 array.

    Background brightness, lighting tilt, and ink darkness vary widely per
    image (ink is tied to the background level), so no single pixel's value
    carries the class; only the stroke statistics do.
    """
    bg = rng.uniform(150, 235)
    tilt = rng.uniform(-12, 12)
    base = bg + tilt * np.linspace(-0.5, 0.5, width)[None, :]
    gray = base + rng.normal(0.0, noise_level, size=(height, width))
    ink_mask = np.zeros((height, width), dtype=bool)
    wavelength = rng.uniform(2.5, 5.0) * height
    phase = rng.uniform(0, 2 * np.pi)
    x = rng.uniform(1.0, 4.0)
    while True:
        gw = rng.uniform(0.40, 0.65) * height
        if x + gw > width - 1:
            break
        gh = rng.uniform(0.50, 0.80) * height
        cy = height / 2 + style.waviness * math.sin(2 * np.pi * x / wavelength + phase)
        cy += rng.uniform(-0.08, 0.08) * height
        box = (x, np.clip(cy - gh / 2, 0, height - 1),
               x + gw, np.clip(cy + gh / 2, 0, height - 1))
        for _ in range(style.density):
            _draw_stroke(ink_mask, box, style, rng)
        x += gw + rng.uniform(1.0, 0.25 * height)
    ink = np.clip(bg - rng.uniform(60, 130), 8, None)
    gray = np.where(ink_mask, ink + rng.normal(0.0, 8.0, size=gray.shape), gray)
    tint = rng.uniform(-6, 6, size=3)
    img = gray[:, :, None] + tint[None, None, :]
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic(spec, out_dir):
    """Write a synthetic corpus (PNG images + manifest.tsv) under ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    records = []
    for k in range(spec.n_classes):
        label = f"script{k}"
        style = spec.styles[k]
        for j in range(spec.samples_per_class):
            idx = k * spec.samples_per_class + j
            rng = np.random.default_rng([spec.seed, idx])
            h = int(rng.integers(spec.height_range[0], spec.height_range[1] + 1))
            w = int(rng.integers(spec.width_range[0], spec.width_range[1] + 1))
            img = render_text_line(h, w, style, rng, noise_level=spec.noise_level)
            rel = f"{label}_{idx:04d}.png"
            Image.fromarray(img).save(out_dir / rel)
            records.append((rel, label))
    manifest = DatasetManifest(records=records, class_table=_build_class_table(records),
                               root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# loading helpers shared by the trainer and CLI
# ---------------------------------------------------------------------------


def compute_channel_means(manifest, channels=3):
    """Mean of each channel over all [0, 1] height-normalized pixels."""
    total = np.zeros(channels, dtype=np.float64)
    count = 0
    for i in range(len(manifest)):
        norm = prepare_image(load_image(manifest.path(i), channels=channels))
        total += norm.reshape(-1, channels).sum(axis=0)
        count += norm.shape[0] * norm.shape[1]
    if count == 0:
        raise DataError("manifest contains no images")
    return (total / count).astype(np.float32)


def build_patch_cache(manifest, channel_means, n_max, seed, channels=3,
                      class_table=None):
    """Extract and cap patches for every record: list of (patches, label index).

    ``class_table`` maps labels to indices (defaults to the manifest's own);
    evaluation sets must pass the training table so indices agree.
    """
    table = class_table if class_table is not None else manifest.class_table
    out = []
    for i in range(len(manifest)):
        label = manifest.records[i][1]
        if label not in table:
            raise DataError(f"label {label!r} not present in the class table")
        seq = patch_sequence_from_file(manifest.path(i), channel_means, n_max,
                                       seed, channels)
        out.append((seq.patches, table.index(label)))
    return out


def load_normalized_images(manifest, channel_means, channels=3):
    return [prepare_image(load_image(manifest.path(i), channels=channels), channel_means)
            for i in range(len(manifest))]
