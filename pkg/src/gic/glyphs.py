"""Grayscale base datasets for the environment builders.

Two sources per dataset family:

* ``idx``: real MNIST / Fashion-MNIST IDX files from a data directory
  (optionally gzipped, standard filenames). Raises DataMissing when absent.
* ``synthetic``: procedurally rendered stand-ins — digit glyphs from bundled
  DejaVu fonts, garment silhouettes drawn with PIL — warped per sample by a
  seeded random affine. Unlimited size, deterministic given the seed, and
  needs no downloads.

Images are float32 in [0, 1], background exactly 0 so foreground masks stay
well defined after coloring.
"""

from __future__ import annotations

import gzip
import os
import struct
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .errors import ConfigError, DataMissing

PROTO_RES = 64

FASHION_CLASSES = (
    "tshirt", "trouser", "pullover", "dress", "coat",
    "sandal", "shirt", "sneaker", "bag", "boot",
)

# Per-sample geometric jitter applied to prototypes. Wide enough that a pixel
# classifier cannot trivially memorize shapes, narrow enough that classes stay
# human-separable. Intensity stays >= 0.8: strokes are binarized after warping
# and dimmer fills would make nearby palette colors collide (a ~0.65x Cyan is
# closer to Royal Blue than to Cyan), breaking color recovery from images.
DEFAULT_JITTER = {
    "rotate_deg": 20.0,
    "scale": (0.75, 1.15),
    "shear": 0.15,
    "translate_frac": 0.10,
    "intensity": (0.8, 1.0),
    "binarize": 0.35,
}


def _font(name: str, size: int):
    import matplotlib.font_manager as fm

    return ImageFont.truetype(fm.findfont(name, fallback_to_default=True), size)


@lru_cache(maxsize=None)
def digit_prototypes() -> np.ndarray:
    """[10, n_styles, 64, 64] float32 digit glyphs in several font styles."""
    styles = ["DejaVu Sans", "DejaVu Sans:bold", "DejaVu Serif"]
    out = np.zeros((10, len(styles), PROTO_RES, PROTO_RES), dtype=np.float32)
    for si, style in enumerate(styles):
        font = _font(style, 46)
        for d in range(10):
            img = Image.new("L", (PROTO_RES, PROTO_RES), 0)
            ImageDraw.Draw(img).text(
                (PROTO_RES / 2, PROTO_RES / 2), str(d), fill=255, font=font, anchor="mm"
            )
            out[d, si] = np.asarray(img, dtype=np.float32) / 255.0
    return out


def _poly(draw, pts, width=None):
    pts = [(x * PROTO_RES, y * PROTO_RES) for x, y in pts]
    if width is None:
        draw.polygon(pts, fill=255)
    else:
        draw.line(pts, fill=255, width=width)


def _draw_fashion(idx: int, variant: int) -> np.ndarray:
    img = Image.new("L", (PROTO_RES, PROTO_RES), 0)
    d = ImageDraw.Draw(img)
    if idx == 0:  # tshirt: boxy body, short sleeves
        _poly(d, [(0.32, 0.25), (0.68, 0.25), (0.68, 0.78), (0.32, 0.78)])
        _poly(d, [(0.12, 0.25), (0.32, 0.25), (0.32, 0.42), (0.12, 0.38)])
        _poly(d, [(0.68, 0.25), (0.88, 0.25), (0.88, 0.38), (0.68, 0.42)])
    elif idx == 1:  # trouser: two legs from a waistband
        _poly(d, [(0.33, 0.15), (0.67, 0.15), (0.67, 0.28), (0.33, 0.28)])
        _poly(d, [(0.33, 0.28), (0.47, 0.28), (0.44, 0.88), (0.31, 0.88)])
        _poly(d, [(0.53, 0.28), (0.67, 0.28), (0.69, 0.88), (0.56, 0.88)])
    elif idx == 2:  # pullover: body plus sleeves angled down
        _poly(d, [(0.30, 0.22), (0.70, 0.22), (0.72, 0.80), (0.28, 0.80)])
        _poly(d, [(0.30, 0.22), (0.10, 0.55), (0.20, 0.62), (0.34, 0.40)])
        _poly(d, [(0.70, 0.22), (0.90, 0.55), (0.80, 0.62), (0.66, 0.40)])
    elif idx == 3:  # dress: fitted top flaring to hem
        _poly(d, [(0.38, 0.12), (0.62, 0.12), (0.58, 0.38), (0.78, 0.88),
                  (0.22, 0.88), (0.42, 0.38)])
    elif idx == 4:  # coat: long body, open front gap
        _poly(d, [(0.28, 0.15), (0.47, 0.15), (0.47, 0.90), (0.24, 0.90)])
        _poly(d, [(0.53, 0.15), (0.72, 0.15), (0.76, 0.90), (0.53, 0.90)])
        _poly(d, [(0.28, 0.15), (0.14, 0.50), (0.22, 0.55), (0.32, 0.32)])
        _poly(d, [(0.72, 0.15), (0.86, 0.50), (0.78, 0.55), (0.68, 0.32)])
    elif idx == 5:  # sandal: flat sole with straps
        _poly(d, [(0.10, 0.72), (0.90, 0.72), (0.90, 0.84), (0.10, 0.84)])
        d.line([(0.25 * PROTO_RES, 0.72 * PROTO_RES), (0.45 * PROTO_RES, 0.40 * PROTO_RES)],
               fill=255, width=5)
        d.line([(0.60 * PROTO_RES, 0.72 * PROTO_RES), (0.45 * PROTO_RES, 0.40 * PROTO_RES)],
               fill=255, width=5)
    elif idx == 6:  # shirt: body, straight sleeves, collar notch
        _poly(d, [(0.33, 0.20), (0.44, 0.20), (0.50, 0.30), (0.56, 0.20),
                  (0.67, 0.20), (0.67, 0.82), (0.33, 0.82)])
        _poly(d, [(0.33, 0.20), (0.13, 0.24), (0.13, 0.60), (0.26, 0.60), (0.28, 0.36)])
        _poly(d, [(0.67, 0.20), (0.87, 0.24), (0.87, 0.60), (0.74, 0.60), (0.72, 0.36)])
    elif idx == 7:  # sneaker: low profile wedge
        _poly(d, [(0.08, 0.70), (0.35, 0.68), (0.52, 0.50), (0.70, 0.50),
                  (0.92, 0.62), (0.92, 0.80), (0.08, 0.80)])
    elif idx == 8:  # bag: trapezoid body with handle
        _poly(d, [(0.20, 0.45), (0.80, 0.45), (0.88, 0.85), (0.12, 0.85)])
        d.arc([0.30 * PROTO_RES, 0.15 * PROTO_RES, 0.70 * PROTO_RES, 0.60 * PROTO_RES],
              180, 360, fill=255, width=5)
    else:  # boot: tall shaft over a foot
        _poly(d, [(0.35, 0.12), (0.58, 0.12), (0.58, 0.55), (0.82, 0.70),
                  (0.82, 0.85), (0.30, 0.85), (0.35, 0.55)])
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if variant == 1:  # outline variant: carve out the interior for shape variety
        eroded = ndimage.binary_erosion(arr > 0.5, iterations=3)
        arr = arr * (1.0 - eroded.astype(np.float32))
    return arr


@lru_cache(maxsize=None)
def fashion_prototypes() -> np.ndarray:
    """[10, 2, 64, 64] float32 garment silhouettes (solid + hollow variants)."""
    out = np.zeros((10, 2, PROTO_RES, PROTO_RES), dtype=np.float32)
    for c in range(10):
        for v in range(2):
            out[c, v] = _draw_fashion(c, v)
    return out


def _prototypes(kind: str) -> np.ndarray:
    if kind == "mnist":
        return digit_prototypes()
    if kind == "fashion-mnist":
        return fashion_prototypes()
    raise ConfigError(f"unknown base dataset {kind!r}")


def render_glyphs(
    kind: str,
    labels: np.ndarray,
    seed: int,
    resolution: int = 32,
    extra_rotation_deg: np.ndarray | None = None,
    jitter: dict | None = None,
) -> np.ndarray:
    """Render one warped glyph per label. Deterministic given (labels, seed).

    extra_rotation_deg adds a per-sample rotation on top of the jitter range;
    the grid builder uses it to realize view angles.
    """
    jit = dict(DEFAULT_JITTER)
    if jitter:
        jit.update(jitter)
    protos = _prototypes(kind)
    n_variants = protos.shape[1]
    rng = np.random.default_rng(seed)
    n = len(labels)
    out = np.zeros((n, resolution, resolution), dtype=np.float32)
    center = np.array([(PROTO_RES - 1) / 2.0, (PROTO_RES - 1) / 2.0])
    for i in range(n):
        proto = protos[int(labels[i]), rng.integers(0, n_variants)]
        ang = rng.uniform(-jit["rotate_deg"], jit["rotate_deg"])
        if extra_rotation_deg is not None:
            ang += float(extra_rotation_deg[i])
        scale = rng.uniform(*jit["scale"]) * (PROTO_RES / resolution)
        shear = rng.uniform(-jit["shear"], jit["shear"])
        rad = np.deg2rad(ang)
        rot = np.array([[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]])
        shear_m = np.array([[1.0, shear], [0.0, 1.0]])
        # Output->input matrix: inverse warp, so divide by scale factor of the glyph.
        mat = (rot @ shear_m) * scale
        out_center = np.array([(resolution - 1) / 2.0] * 2)
        shift = rng.uniform(-jit["translate_frac"], jit["translate_frac"], 2) * resolution
        offset = center - mat @ (out_center + shift)
        warped = ndimage.affine_transform(
            proto, mat, offset=offset, output_shape=(resolution, resolution), order=1
        )
        warped = (warped > jit["binarize"]).astype(np.float32)
        out[i] = warped * rng.uniform(*jit["intensity"])
    return out


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    magic, = struct.unpack(">I", data[:4])
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _idx_dir(kind: str, data_dir) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    root = os.environ.get("GIC_DATA_DIR")
    if root:
        return Path(root) / kind
    return Path.home() / ".cache" / "gic" / kind


def load_idx_base(kind: str, data_dir=None) -> tuple[np.ndarray, np.ndarray]:
    """Load the train split of an IDX dataset as (images [N,28,28] in [0,1], labels)."""
    base = _idx_dir(kind, data_dir)
    images = labels = None
    for stem, is_img in (("train-images-idx3-ubyte", True), ("train-labels-idx1-ubyte", False)):
        for cand in (base / stem, base / (stem + ".gz")):
            if cand.exists():
                arr = _read_idx(cand)
                if is_img:
                    images = arr
                else:
                    labels = arr
                break
    if images is None or labels is None:
        raise DataMissing(f"no IDX files for {kind!r} under {base}")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def base_pool(
    kind: str,
    n: int,
    seed: int,
    resolution: int = 32,
    source: str = "synthetic",
    data_dir=None,
    jitter: dict | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Produce n grayscale base images + labels from the requested source.

    Returns (images [n, resolution, resolution] float32 in [0,1], labels int64).
    """
    if source not in ("synthetic", "idx", "auto"):
        raise ConfigError(f"unknown base source {source!r}")
    if source == "auto":
        try:
            load_idx_base(kind, data_dir)
            source = "idx"
        except DataMissing:
            source = "synthetic"
    if source == "idx":
        images, labels = load_idx_base(kind, data_dir)
        if n > len(images):
            raise ConfigError(f"requested {n} base images, dataset has {len(images)}")
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(images))[:n]
        images, labels = images[idx], labels[idx]
        if resolution != images.shape[1]:
            zoom = resolution / images.shape[1]
            images = np.stack(
                [np.clip(ndimage.zoom(im, zoom, order=1), 0.0, 1.0) for im in images]
            ).astype(np.float32)
        return images, labels
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = render_glyphs(kind, labels, seed=int(rng.integers(0, 2**31)), resolution=resolution,
                           jitter=jitter)
    return images, labels.astype(np.int64)
