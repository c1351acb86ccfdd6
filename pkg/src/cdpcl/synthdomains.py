"""Procedural multi-domain segmentation scenes and the style augmentation.

A scene is a flat background class with a handful of overlapping shapes, each
painted with its class colour and a class-specific stripe texture. A
:class:`DomainStyle` then changes the look (palette shift, brightness,
contrast, saturation, hue, texture scale, sensor noise) without touching the
geometry, which is what separates the source domain from the unseen ones.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm
from .protobank import IGNORE_INDEX

MANIFEST = "manifest.tsv"
META = "meta.txt"

# road, sidewalk, building, vegetation, sky, car, then extras for C > 6
BASE_PALETTE = np.array(
    [
        [0.50, 0.50, 0.52],
        [0.80, 0.45, 0.70],
        [0.55, 0.35, 0.25],
        [0.25, 0.60, 0.25],
        [0.40, 0.65, 0.90],
        [0.85, 0.20, 0.20],
        [0.90, 0.80, 0.20],
        [0.20, 0.75, 0.75],
        [0.45, 0.25, 0.65],
        [0.95, 0.55, 0.15],
    ]
)
TEXTURE_AMPLITUDE = 0.18


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainStyle:
    id: str
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    noise_sigma: float = 0.02
    texture_frequency: float = 3.0
    seed: int = 0
    palette: tuple | None = None

    def colors(self, num_classes: int) -> np.ndarray:
        if self.palette is not None:
            pal = np.asarray(self.palette, dtype=np.float64)
            if pal.shape != (num_classes, 3):
                raise ConfigError(f"style {self.id}: palette has shape {pal.shape}, need ({num_classes}, 3)")
            return pal
        if num_classes > len(BASE_PALETTE):
            raise ConfigError(f"default palette covers at most {len(BASE_PALETTE)} classes")
        return BASE_PALETTE[:num_classes]

    def differing_parameters(self, other: "DomainStyle") -> list[str]:
        names = ("brightness", "contrast", "saturation", "hue", "noise_sigma", "texture_frequency", "palette")
        return [n for n in names if getattr(self, n) != getattr(other, n)]


SOURCE_STYLE = DomainStyle("src_train", seed=11)
UNSEEN_STYLES = (
    DomainStyle("unseen_a", brightness=-0.25, contrast=-0.2, noise_sigma=0.04, seed=23),
    DomainStyle("unseen_b", saturation=-0.35, hue=0.06, texture_frequency=4.5, seed=37),
    DomainStyle("unseen_c", brightness=0.2, contrast=0.25, hue=-0.05, noise_sigma=0.05, seed=53),
)


@dataclass
class DomainSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    labels: np.ndarray  # H x W uint8
    domain: str
    index: int
    seed: int = 0


def sample_seed(master_seed: int, domain: str, index: int) -> int:
    """Order-independent per-sample seed from (master seed, domain id, index)."""
    ss = np.random.SeedSequence([master_seed, zlib.crc32(domain.encode()), index])
    return int(ss.generate_state(1)[0])


# -- colour transforms ---------------------------------------------------------
# Every transform accepts a single H x W x 3 image or a batch B x H x W x 3;
# factors are scalars or per-image arrays of shape (B,).
_LUMA = np.array([0.299, 0.587, 0.114])


def _per_image(factor, img):
    f = np.asarray(factor, dtype=np.float64)
    return f.reshape(f.shape + (1,) * (img.ndim - f.ndim))


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def adjust_brightness(img, factor):
    return img * _per_image(factor, img)


def adjust_contrast(img, factor):
    m = _gray(img).mean(axis=(-2, -1))
    m = _per_image(m, img)
    return (img - m) * _per_image(factor, img) + m


def adjust_saturation(img, factor):
    g = _gray(img)[..., None]
    return (img - g) * _per_image(factor, img) + g


def adjust_hue(img, shift):
    """Rotate HSV hue by ``shift`` turns, keeping value and saturation.

    Converts to hue directly and back through the piecewise-linear HSV
    channel curves, so max/min (value, chroma) of each pixel are preserved.
    """
    img = np.clip(img, 0.0, 1.0)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    hi = img.max(axis=-1)
    chroma = hi - img.min(axis=-1)
    safe = np.where(chroma > 0, chroma, 1.0)
    # sextant hue in [0, 6); ties resolve towards blue like matplotlib's rgb_to_hsv
    h = np.where(b == hi, 4 + (r - g) / safe, np.where(g == hi, 2 + (b - r) / safe, (g - b) / safe))
    h = np.where(chroma > 0, h, 0.0)
    h = np.mod(h / 6 + _per_image(shift, h), 1.0) * 6
    k = np.mod(np.array([5.0, 3.0, 1.0]) + h[..., None], 6.0)
    return hi[..., None] - chroma[..., None] * np.clip(np.minimum(k, 4 - k), 0.0, 1.0)


def color_jitter(img, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0, clamp=True):
    """Apply the four jitters with explicit factors, in a fixed order.

    A transform whose factors are all neutral is skipped so the identity is
    exact; in a batch, images with a neutral factor are passed through as is.
    """
    out = np.asarray(img, dtype=np.float64)
    steps = (
        (adjust_brightness, brightness, 1.0),
        (adjust_contrast, contrast, 1.0),
        (adjust_saturation, saturation, 1.0),
        (adjust_hue, hue, 0.0),
    )
    for fn, value, neutral in steps:
        value = np.asarray(value, dtype=np.float64)
        keep = value == neutral
        if keep.all():
            continue
        new = fn(out, value)
        if clamp:
            new = np.clip(new, 0.0, 1.0)
        out = np.where(_per_image(keep, out), out, new) if keep.any() else new
    return out


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)


def _draw(params: AugmentParams, aug_seed):
    rng = np.random.default_rng(aug_seed)
    # every factor is drawn regardless of magnitude so streams stay aligned
    b = rng.uniform(1 - params.brightness, 1 + params.brightness)
    c = rng.uniform(1 - params.contrast, 1 + params.contrast)
    s = rng.uniform(1 - params.saturation, 1 + params.saturation)
    h = rng.uniform(-params.hue, params.hue)
    blur = rng.random() < params.blur_prob
    sigma = rng.uniform(*params.blur_sigma)
    return (
        b if params.brightness else 1.0,
        c if params.contrast else 1.0,
        s if params.saturation else 1.0,
        h if params.hue else 0.0,
        sigma if blur else 0.0,
    )


def augment_many(images: np.ndarray, params: AugmentParams, aug_seeds) -> np.ndarray:
    """Augment a B x H x W x 3 batch, image ``i`` with its own seed ``aug_seeds[i]``."""
    draws = np.array([_draw(params, seed) for seed in aug_seeds]).reshape(-1, 5)
    out = color_jitter(images, *(draws[:, j] for j in range(4)))
    for i, sigma in enumerate(draws[:, 4]):
        if sigma > 0:
            out[i] = gaussian_filter(out[i], sigma=(sigma, sigma, 0.0), mode="reflect")
    return out


def augment(image: np.ndarray, params: AugmentParams = AugmentParams(), aug_seed=0) -> np.ndarray:
    """Photometric jitter plus optional blur; geometry (and so the labels) is unchanged."""
    return augment_many(np.asarray(image, dtype=np.float64)[None], params, [aug_seed])[0]


# -- scene generation ------------------------------------------------------------
def _texture(cls: int, num_classes: int, freq: float, phase: float, yy, xx, size: int) -> np.ndarray:
    theta = np.pi * cls / num_classes
    f = freq * (1 + cls % 3)
    return np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)


def generate_scene(
    style: DomainStyle,
    scene_seed: int,
    num_classes: int = 6,
    height: int = 64,
    width: int = 64,
    index: int = 0,
) -> DomainSample:
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if height < 32 or width < 32:
        raise ConfigError("scenes must be at least 32 x 32")
    rng = np.random.default_rng(scene_seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    labels = np.zeros((height, width), dtype=np.uint8)
    for _ in range(rng.integers(2, 6)):
        cls = int(rng.integers(1, num_classes))
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(0.12, 0.35) * height, rng.uniform(0.12, 0.35) * width
        if kind == 0:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        elif kind == 1:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            ang = rng.uniform(0, np.pi)
            dist = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            mask = np.abs(dist) <= 0.4 * min(ry, rx)
        labels[mask] = cls

    colors = style.colors(num_classes)
    phases = rng.uniform(0, 2 * np.pi, size=num_classes)
    image = np.empty((height, width, 3))
    for c in range(num_classes):
        m = labels == c
        if not m.any():
            continue
        tex = _texture(c, num_classes, style.texture_frequency, phases[c], yy[m], xx[m], width)
        image[m] = colors[c] * (1.0 + TEXTURE_AMPLITUDE * tex)[:, None]

    image = color_jitter(
        np.clip(image, 0.0, 1.0),
        brightness=1.0 + style.brightness,
        contrast=1.0 + style.contrast,
        saturation=1.0 + style.saturation,
        hue=style.hue,
    )
    if style.noise_sigma > 0:
        noise_rng = np.random.default_rng([style.seed, scene_seed])
        image = np.clip(image + noise_rng.normal(0.0, style.noise_sigma, image.shape), 0.0, 1.0)
    return DomainSample(image, labels, style.id, index, scene_seed)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- on-disk datasets -------------------------------------------------------------
class Dataset(Sequence):
    """Stacked images (N x H x W x 3, float) and labels (N x H x W) of one domain."""

    def __init__(self, images, labels, domain, seeds, num_classes, path=None):
        self.images = images
        self.labels = labels
        self.domain = domain
        self.seeds = list(seeds)
        self.num_classes = num_classes
        self.path = path

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i) -> DomainSample:
        return DomainSample(self.images[i], self.labels[i], self.domain, i, self.seeds[i])

    def __iter__(self) -> Iterator[DomainSample]:
        return (self[i] for i in range(len(self)))


def write_dataset(samples: Sequence[DomainSample], directory, num_classes: int) -> Path:
    directory = Path(directory)
    if not samples:
        raise ConfigError("refusing to write an empty dataset")
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    H, W = samples[0].labels.shape
    lines = []
    for i, s in enumerate(samples):
        img_rel = f"images/{i:05d}.ppm"
        lab_rel = f"labels/{i:05d}.pgm"
        write_ppm(directory / img_rel, quantize(s.image))
        write_pgm(directory / lab_rel, np.asarray(s.labels, dtype=np.uint8))
        lines.append(f"{img_rel}\t{lab_rel}\t{s.domain}\t{s.seed}\n")
    (directory / MANIFEST).write_text("".join(lines))
    domains = sorted({s.domain for s in samples})
    meta = {
        "domain": ",".join(domains),
        "classes": num_classes,
        "height": H,
        "width": W,
        "count": len(samples),
    }
    (directory / META).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return directory


def read_meta_file(path) -> dict[str, str]:
    """``key = value`` lines into a dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing {path}")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_meta(directory) -> dict[str, str]:
    return read_meta_file(Path(directory) / META)


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise ConfigError(f"{directory}: missing {MANIFEST}")
    meta = read_meta(directory)
    num_classes = int(meta["classes"])
    rows = [ln.split("\t") for ln in manifest.read_text().splitlines() if ln.strip()]
    if not rows:
        raise ConfigError(f"{directory}: empty dataset")
    images, labels, seeds = [], [], []
    domain = meta.get("domain", "")
    for row in rows:
        if len(row) != 4:
            raise ConfigError(f"{manifest}: malformed record {row!r}")
        img_rel, lab_rel, domain, seed = row
        images.append(read_ppm(directory / img_rel).astype(np.float64) / 255.0)
        lab = read_pgm(directory / lab_rel)
        bad = (lab >= num_classes) & (lab != IGNORE_INDEX)
        if bad.any():
            raise ConfigError(f"{directory / lab_rel}: label {int(lab[bad][0])} outside [0, {num_classes})")
        labels.append(lab)
        seeds.append(int(seed))
    return Dataset(np.stack(images), np.stack(labels), domain, seeds, num_classes, directory)


@dataclass
class SplitConfig:
    out: str
    seed: int = 0
    classes: int = 6
    height: int = 64
    width: int = 64
    train_count: int = 200
    eval_count: int = 50
    source: DomainStyle = SOURCE_STYLE
    unseen: tuple[DomainStyle, ...] = UNSEEN_STYLES
    min_style_margin: float = 0.01

    def validate(self) -> None:
        if len(self.unseen) < 2:
            raise ConfigError(f"need at least 2 unseen domains, got {len(self.unseen)}")
        if self.train_count < 1 or self.eval_count < 1:
            raise ConfigError("sample counts must be positive")
        ids = [self.source.id] + [s.id for s in self.unseen]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"domain ids must be distinct: {ids}")
        for style in self.unseen:
            diff = style.differing_parameters(self.source)
            if len(diff) < 2:
                raise ConfigError(f"unseen style {style.id} differs from source only in {diff}")
        if self.height % 4 or self.width % 4:
            raise ConfigError("image size must be divisible by 4")


def generate_domain(style: DomainStyle, count: int, cfg: SplitConfig) -> list[DomainSample]:
    return [
        generate_scene(style, sample_seed(cfg.seed, style.id, i), cfg.classes, cfg.height, cfg.width, i)
        for i in range(count)
    ]


def mean_pixel(samples: Sequence[DomainSample]) -> np.ndarray:
    return np.mean([quantize(s.image).reshape(-1, 3).mean(axis=0) / 255.0 for s in samples], axis=0)


def make_split(cfg: SplitConfig) -> dict[str, Path]:
    """Write the source training split and one evaluation split per unseen style."""
    cfg.validate()
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    src = generate_domain(cfg.source, cfg.train_count, cfg)
    dirs = {cfg.source.id: write_dataset(src, root / cfg.source.id, cfg.classes)}
    src_mean = mean_pixel(src)
    stats = [f"{cfg.source.id}\t" + "\t".join(f"{v:.6f}" for v in src_mean)]
    for style in cfg.unseen:
        samples = generate_domain(style, cfg.eval_count, cfg)
        gap = float(np.abs(mean_pixel(samples) - src_mean).max())
        if gap < cfg.min_style_margin:
            raise ConfigError(f"style {style.id}: mean-pixel gap {gap:.4f} below margin {cfg.min_style_margin}")
        dirs[style.id] = write_dataset(samples, root / style.id, cfg.classes)
        stats.append(f"{style.id}\t" + "\t".join(f"{v:.6f}" for v in mean_pixel(samples)))
    (root / "split.txt").write_text(
        f"seed = {cfg.seed}\nclasses = {cfg.classes}\nsource = {cfg.source.id}\n"
        f"unseen = {','.join(s.id for s in cfg.unseen)}\n"
    )
    (root / "domain_stats.tsv").write_text("domain\tmean_r\tmean_g\tmean_b\n" + "\n".join(stats) + "\n")
    return dirs


def read_split(root) -> tuple[str, list[str]]:
    meta = read_meta_file(Path(root) / "split.txt")
    return meta["source"], [d for d in meta["unseen"].split(",") if d]

