"""Image-caption datasets: manifest loading and synthetic shape-scene generation.

Manifest format: one record per line, tab-separated
``<relative-image-path>\\t<caption>``, UTF-8. The synthetic generator
additionally writes ``labels.tsv`` (``<relative-image-path>\\t<shape>\\t<color>``)
plus ``classes.txt`` / ``templates.txt`` for prompt-based evaluation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ManifestError

MANIFEST_NAME = "manifest.tsv"
LABELS_NAME = "labels.tsv"
CLASSES_NAME = "classes.txt"
TEMPLATES_NAME = "templates.txt"

DEFAULT_SHAPES = ("circle", "square", "triangle", "diamond", "star", "cross", "ring", "bar")
DEFAULT_COLORS = ("red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta")

COLOR_RGB = {
    "red": (220, 50, 40),
    "green": (60, 180, 75),
    "blue": (0, 90, 200),
    "yellow": (255, 215, 0),
    "orange": (245, 130, 30),
    "purple": (145, 30, 180),
    "cyan": (70, 235, 235),
    "magenta": (240, 50, 230),
}
BACKGROUND_RGB = (200, 200, 200)

DEFAULT_CAPTION_TEMPLATES = (
    "a photo of a {color} {shape}",
    "an image of a {color} {shape}",
    "a {color} {shape} on a plain background",
    "there is a {color} {shape} in this picture",
)


@dataclass
class Sample:
    """One decoded image-caption pair."""

    index: int
    image: np.ndarray  # H x W x 3, uint8
    caption: str


@dataclass
class DatasetManifest:
    """On-disk index of image-caption pairs, order-stable across loads."""

    root: Path
    entries: list[tuple[str, str]]  # (relative image path, caption)

    @property
    def size(self) -> int:
        return len(self.entries)


@dataclass
class SyntheticConfig:
    """Settings for the synthetic single-shape scene generator."""

    num_samples: int = 4096
    resolution: int = 48
    shape_set: tuple[str, ...] = DEFAULT_SHAPES
    color_set: tuple[str, ...] = DEFAULT_COLORS
    caption_templates: tuple[str, ...] = DEFAULT_CAPTION_TEMPLATES
    seed: int = 0

    def __post_init__(self):
        if len(self.shape_set) < 2:
            raise ValueError("shape_set needs at least 2 shapes")
        if len(self.color_set) < 2:
            raise ValueError("color_set needs at least 2 colors")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        if not self.caption_templates:
            raise ValueError("caption_templates must not be empty")
        unknown = [c for c in self.color_set if c not in COLOR_RGB]
        if unknown:
            raise ValueError(f"colors without an RGB definition: {unknown}")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a tab-separated manifest file into a DatasetManifest.

    Raises ManifestError on malformed records (with the 1-based line number)
    or when fewer than 2 entries are present.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    entries: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ManifestError(
                    f"{path}: line {lineno}: expected '<image-path>\\t<caption>', got {line!r}"
                )
            entries.append((parts[0], parts[1]))
    if len(entries) < 2:
        raise ManifestError(f"{path}: manifest has {len(entries)} entries, need at least 2")
    return DatasetManifest(root=path.parent, entries=entries)


def get_sample(manifest: DatasetManifest, index: int) -> Sample:
    """Decode entry ``index`` of the manifest into a Sample."""
    if not 0 <= index < manifest.size:
        raise IndexError(f"sample index {index} out of range [0, {manifest.size})")
    rel_path, caption = manifest.entries[index]
    with Image.open(manifest.root / rel_path) as img:
        image = np.asarray(img.convert("RGB"), dtype=np.uint8)
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ManifestError(f"degenerate image at index {index}: shape {image.shape}")
    return Sample(index=index, image=image, caption=caption)


class SampleCache:
    """Decode-once wrapper around a manifest, for repeated epoch sweeps."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, Sample] = {}

    def __call__(self, index: int) -> Sample:
        if index not in self._cache:
            self._cache[index] = get_sample(self.manifest, index)
        return self._cache[index]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: int, cy: int, half: int, rgb) -> None:
    x0, y0, x1, y1 = cx - half, cy - half, cx + half, cy + half
    if shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=rgb)
    elif shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=rgb)
    elif shape == "triangle":
        draw.polygon([(cx, y0), (x0, y1), (x1, y1)], fill=rgb)
    elif shape == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=rgb)
    elif shape == "star":
        outer, inner = half, half * 0.45
        pts = []
        for k in range(10):
            r = outer if k % 2 == 0 else inner
            ang = -np.pi / 2 + k * np.pi / 5
            pts.append((cx + r * np.cos(ang), cy + r * np.sin(ang)))
        draw.polygon(pts, fill=rgb)
    elif shape == "cross":
        arm = max(2, half // 3)
        draw.rectangle([cx - arm, y0, cx + arm, y1], fill=rgb)
        draw.rectangle([x0, cy - arm, x1, cy + arm], fill=rgb)
    elif shape == "ring":
        width = max(2, half // 2)
        draw.ellipse([x0, y0, x1, y1], fill=rgb)
        draw.ellipse(
            [x0 + width, y0 + width, x1 - width, y1 - width], fill=BACKGROUND_RGB
        )
    elif shape == "bar":
        thick = max(2, half // 2)
        draw.rectangle([x0, cy - thick, x1, cy + thick], fill=rgb)
    else:
        raise ValueError(f"unknown shape: {shape}")


def render_scene(shape: str, color: str, resolution: int, cx: int, cy: int) -> np.ndarray:
    """Render one colored shape at (cx, cy) on the plain background."""
    img = Image.new("RGB", (resolution, resolution), BACKGROUND_RGB)
    draw = ImageDraw.Draw(img)
    half = int(round(resolution * 0.22))
    _draw_shape(draw, shape, cx, cy, half, COLOR_RGB[color])
    return np.asarray(img, dtype=np.uint8)


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path) -> DatasetManifest:
    """Render a synthetic dataset into ``out_dir`` and return its manifest.

    Output is a pure function of the config: rerunning with the same seed
    reproduces every file byte for byte. Images are lossless PNGs; captions
    name exactly the rendered (color, shape) pair.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    os.makedirs(img_dir, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    half = int(round(config.resolution * 0.22))
    lo, hi = half + 1, config.resolution - half - 2
    if hi < lo:
        raise ValueError("resolution too small for the shape size")

    manifest_rows: list[str] = []
    label_rows: list[str] = []
    width = len(str(config.num_samples - 1))
    for i in range(config.num_samples):
        shape = config.shape_set[rng.integers(len(config.shape_set))]
        color = config.color_set[rng.integers(len(config.color_set))]
        template = config.caption_templates[rng.integers(len(config.caption_templates))]
        cx = int(rng.integers(lo, hi + 1))
        cy = int(rng.integers(lo, hi + 1))
        image = render_scene(shape, color, config.resolution, cx, cy)
        rel_path = f"images/{i:0{width}d}.png"
        Image.fromarray(image).save(out_dir / rel_path, format="PNG")
        caption = template.format(color=color, shape=shape)
        manifest_rows.append(f"{rel_path}\t{caption}")
        label_rows.append(f"{rel_path}\t{shape}\t{color}")

    (out_dir / MANIFEST_NAME).write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    (out_dir / LABELS_NAME).write_text("\n".join(label_rows) + "\n", encoding="utf-8")

    class_names = [
        f"{color} {shape}" for color in config.color_set for shape in config.shape_set
    ]
    (out_dir / CLASSES_NAME).write_text("\n".join(class_names) + "\n", encoding="utf-8")
    prompt_templates = [
        t.replace("{color} {shape}", "{}") for t in config.caption_templates
    ]
    (out_dir / TEMPLATES_NAME).write_text(
        "\n".join(prompt_templates) + "\n", encoding="utf-8"
    )
    return load_manifest(out_dir / MANIFEST_NAME)


def load_labels(path: str | Path) -> list[tuple[str, str, str]]:
    """Read a labels.tsv file into (relative path, shape, color) rows."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"labels file not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}: line {lineno}: expected 3 fields")
            rows.append((parts[0], parts[1], parts[2]))
    return rows
