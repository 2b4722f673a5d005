"""Toy open-world segmentation benchmark.

Scenes are a colored background with a few solid shapes on top. Every known
class has its own hue, all at the same chroma and mean intensity, so the
classes are separable by color alone. Target scenes are rotated in hue,
brightened and noisier than source scenes, and may also contain a gray cross:
the unknown class, which sits at the center of the known-class color wheel.

Dataset directories hold ``images/NNNNN.ppm``, ``labels/NNNNN.pgm`` (pixel
value = class index, 0 = void) and a ``manifest`` text file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .rng import stream

SHAPES = ("disk", "square", "triangle", "diamond", "ring")
MAX_K = len(SHAPES) + 1
MIN_COVERAGE = 0.05
MAX_ATTEMPTS = 200


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    K: int = 4
    shapes_min: int = 1
    shapes_max: int = 3
    size_min: int = 4
    size_max: int = 8
    gray: float = 0.5
    chroma: float = 0.3
    source_noise: float = 0.02
    hue_shift: float = 30.0
    brightness: float = 0.1
    noise: float = 0.06
    unknown_prob: float = 0.7
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.K <= MAX_K:
            raise ConfigError(f"K must lie in 2..{MAX_K}, got {self.K}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("scenes must be at least 8x8")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ConfigError("need 0 <= shapes_min <= shapes_max")
        if not 1 <= self.size_min <= self.size_max or 2 * self.size_max >= min(self.height, self.width):
            raise ConfigError("shape sizes must satisfy 1 <= size_min <= size_max < min(H, W) / 2")
        if not 0.0 <= self.unknown_prob <= 1.0:
            raise ConfigError("unknown_prob must lie in [0, 1]")
        if min(self.noise, self.source_noise, self.chroma) < 0:
            raise ConfigError("noise levels and chroma must be nonnegative")

    @property
    def unknown_class(self) -> int:
        return self.K + 1


@dataclass
class LabeledImage:
    image: np.ndarray  # 3 x H x W, values k/255
    labels: np.ndarray  # H x W uint8, 0 = void
    domain: str
    has_unknown: bool
    index: int = 0
    seed: int = 0


# ---------------------------------------------------------------------------
# colors


def _plane_basis() -> tuple[np.ndarray, np.ndarray]:
    u = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
    v = np.array([1.0, 1.0, -2.0]) / math.sqrt(6)
    return u, v


def palette(spec: SceneSpec) -> np.ndarray:
    """``(K + 2) x 3`` RGB table indexed by class; row 0 (void) and row K+1 are gray."""
    u, v = _plane_basis()
    colors = np.full((spec.K + 2, 3), spec.gray)
    for c in range(1, spec.K + 1):
        h = 2 * math.pi * (c - 1) / spec.K
        colors[c] += spec.chroma * (math.cos(h) * u + math.sin(h) * v)
    return colors


def hue_rotation(degrees: float) -> np.ndarray:
    """3x3 rotation about the gray axis; preserves R + G + B."""
    a = math.radians(degrees)
    k = np.ones(3) / math.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * kx @ kx


# ---------------------------------------------------------------------------
# geometry


def _shape_mask(kind: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    if kind == "cross":
        a = max(1.0, r / 3)
        return ((np.abs(dx) <= a) & (np.abs(dy) <= r)) | ((np.abs(dy) <= a) & (np.abs(dx) <= r))
    raise ValueError(kind)


def _place(spec: SceneSpec, rng, yy, xx, kind):
    r = int(rng.integers(spec.size_min, spec.size_max + 1))
    cy = rng.uniform(r, spec.height - 1 - r)
    cx = rng.uniform(r, spec.width - 1 - r)
    return _shape_mask(kind, yy, xx, cy, cx, r)


def render(spec: SceneSpec, rng: np.random.Generator, shifted: bool, unknown: bool):
    """Draw one scene; returns (float image 3xHxW, uint8 labels HxW)."""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    labels = np.ones((spec.height, spec.width), dtype=np.uint8)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(2, spec.K + 1))
        labels[_place(spec, rng, yy, xx, SHAPES[cls - 2])] = cls
    if unknown:
        labels[_place(spec, rng, yy, xx, "cross")] = spec.unknown_class

    colors = palette(spec)
    if shifted:
        colors = colors @ hue_rotation(spec.hue_shift).T + spec.brightness
    img = colors[labels].transpose(2, 0, 1)
    img = img + rng.normal(scale=spec.source_noise, size=img.shape) if spec.source_noise else img
    if shifted and spec.noise:
        img = img + rng.normal(scale=spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8) / 255.0
    return img, labels


def _generate(spec: SceneSpec, n: int, domain: str, stream_name: str) -> list[LabeledImage]:
    spec.validate()
    if n < 1:
        raise ConfigError(f"need at least one image, got n={n}")
    need = math.ceil(MIN_COVERAGE * n)
    if spec.K > 1 and n * spec.shapes_max < (spec.K - 1) * need:
        raise ConfigError("class-coverage constraint cannot be met with these shape counts")
    shifted = domain == "target"
    for attempt in range(MAX_ATTEMPTS):
        out = []
        for i in range(n):
            rng = stream(spec.seed, stream_name, attempt, i)
            unknown = shifted and rng.random() < spec.unknown_prob
            img, labels = render(spec, rng, shifted, unknown)
            out.append(LabeledImage(img, labels, domain, bool((labels == spec.unknown_class).any()),
                                    index=i, seed=spec.seed))
        counts = class_image_counts(out, spec.K)
        if all(counts[c] >= need for c in range(1, spec.K + 1)):
            return out
    raise ConfigError(f"could not reach {MIN_COVERAGE:.0%} class coverage in {MAX_ATTEMPTS} attempts")


def class_image_counts(images: list[LabeledImage], K: int) -> np.ndarray:
    """Number of images in which each class 0..K+1 appears."""
    counts = np.zeros(K + 2, dtype=np.int64)
    for im in images:
        counts[np.unique(im.labels)] += 1
    return counts


def generate_source(spec: SceneSpec, n: int, split: str = "train") -> list[LabeledImage]:
    return _generate(spec, n, "source", f"source-{split}")


def generate_target(spec: SceneSpec, n: int, split: str = "train") -> list[LabeledImage]:
    return _generate(spec, n, "target", f"target-{split}")


def stack(images: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([im.image for im in images]),
            np.stack([im.labels for im in images]).astype(np.int64))


# ---------------------------------------------------------------------------
# on-disk datasets


def write_dataset(directory, images: list[LabeledImage], K: int) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = ["# krada-lab dataset", f"# K = {K}", "# index domain has_unknown seed"]
    for i, im in enumerate(images):
        rgb = np.round(im.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        write_ppm(root / "images" / f"{i:05d}.ppm", rgb)
        write_pgm(root / "labels" / f"{i:05d}.pgm", im.labels.astype(np.uint8))
        lines.append(f"{im.index} {im.domain} {int(im.has_unknown)} {im.seed}")
    (root / "manifest").write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> tuple[int | None, list[tuple[int, str, bool, int]]]:
    path = Path(directory) / "manifest"
    if not path.is_file():
        raise FormatError(f"{directory}: missing manifest")
    K = None
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "K" and val.strip():
                try:
                    K = int(val)
                except ValueError:
                    raise FormatError(f"{path}:{ln}: bad K value") from None
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[2] not in ("0", "1"):
            raise FormatError(f"{path}:{ln}: expected 'index domain has_unknown seed'")
        try:
            rows.append((int(parts[0]), parts[1], parts[2] == "1", int(parts[3])))
        except ValueError:
            raise FormatError(f"{path}:{ln}: non-integer field") from None
    return K, rows


def read_dataset(directory, K: int | None = None) -> list[LabeledImage]:
    root = Path(directory)
    mK, rows = read_manifest(root)
    K = K if K is not None else mK
    if K is None:
        raise FormatError(f"{directory}: number of known classes unknown")
    out = []
    for i, (index, domain, has_unknown, seed) in enumerate(rows):
        try:
            rgb = read_ppm(root / "images" / f"{i:05d}.ppm")
            labels = read_pgm(root / "labels" / f"{i:05d}.pgm")
        except FileNotFoundError as e:
            raise FormatError(f"{directory}: missing file {e.filename}") from None
        if rgb.shape[:2] != labels.shape:
            raise FormatError(f"{directory}: image/label size mismatch at {i:05d}")
        if labels.max() > K + 1:
            raise FormatError(f"{directory}: label {labels.max()} out of range for K={K} at {i:05d}")
        if has_unknown != bool((labels == K + 1).any()):
            raise FormatError(f"{directory}: has_unknown flag disagrees with labels at {i:05d}")
        out.append(LabeledImage(rgb.transpose(2, 0, 1) / 255.0, labels, domain, has_unknown, index, seed))
    return out
