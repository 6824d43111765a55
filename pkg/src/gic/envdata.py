"""Biased multi-environment datasets and attribute statistics.

Environments are RGB image sets where a spurious attribute (stroke color, or
view angle for hold-out grids) correlates with the class label by a chosen
bias coefficient rho. A colored environment paints each glyph with its class's
palette color with probability rho, otherwise with a uniformly random other
palette color. Hold-out grids instead cross categories with rotation views and
move masked (category, view) cells into a separate test environment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import glyphs
from .errors import BlankImage, ConfigError, EmptyEnv, FormatError, DataMissing

PALETTE_ENTRIES = (
    ("dark_green", (0, 100, 0)),
    ("rosy_brown", (188, 143, 143)),
    ("golden", (255, 215, 0)),
    ("red", (255, 0, 0)),
    ("royal_blue", (65, 105, 225)),
    ("cyan", (0, 225, 225)),  # 225, not 255: kept verbatim from the reference palette
    ("blue", (0, 0, 255)),
    ("deep_pink", (255, 20, 147)),
    ("dark_gray", (160, 160, 160)),
    ("lime", (0, 255, 0)),
)

NUM_CLASSES = 10
FOREGROUND_LUI = 0.05  # luminance (channel mean) threshold separating glyph from background


@dataclass(frozen=True)
class ColorPalette:
    entries: tuple = PALETTE_ENTRIES

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        assert len(self.entries) == 10, "palette must have exactly 10 entries"
        assert len(set(names)) == len(names), "palette names must be unique"
        for _, rgb in self.entries:
            assert len(rgb) == 3 and all(0 <= v <= 255 for v in rgb)

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.entries)

    def rgb01(self) -> np.ndarray:
        """[10, 3] float32 palette colors scaled to [0, 1]."""
        return np.array([rgb for _, rgb in self.entries], dtype=np.float32) / 255.0


DEFAULT_PALETTE = ColorPalette()

IDENTITY_MAPPING = tuple(range(10))


@dataclass
class EnvironmentSpec:
    """Recipe for one colored environment.

    source selects the grayscale base provider: procedural glyphs
    ("synthetic"), IDX files on disk ("idx"), or IDX-when-present ("auto").
    """

    base_dataset: str = "mnist"
    rho: float = 0.9
    size: int = 10000
    seed: int = 0
    resolution: int = 32
    digit_to_color: tuple = IDENTITY_MAPPING
    source: str = "synthetic"
    data_dir: str | None = None

    def validate(self) -> None:
        if self.base_dataset not in ("mnist", "fashion-mnist"):
            raise ConfigError(f"unknown base_dataset {self.base_dataset!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0,1], got {self.rho}")
        if self.size < 1:
            raise ConfigError(f"size must be >= 1, got {self.size}")
        if sorted(self.digit_to_color) != list(range(10)):
            raise ConfigError("digit_to_color must be a permutation of 0..9")


@dataclass
class Environment:
    name: str
    images: np.ndarray  # [N, H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    attributes: np.ndarray  # [N] int64, palette (or view) indices
    rho: float | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    base_indices: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.images)
        if n == 0:
            raise EmptyEnv(f"environment {self.name!r} has no samples")
        assert self.images.ndim == 4 and self.images.shape[-1] == 3
        assert len(self.labels) == n and len(self.attributes) == n
        assert self.labels.min() >= 0 and self.labels.max() < NUM_CLASSES
        assert self.attributes.min() >= 0 and self.attributes.max() < 10

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class EnvironmentSet:
    environments: dict  # name -> Environment
    roles: dict  # name -> "train" | "test"
    meta: dict = field(default_factory=dict)

    def by_role(self, role: str) -> list:
        return [self.environments[n] for n, r in self.roles.items() if r == role]


def _colorize(
    gray: np.ndarray,
    labels: np.ndarray,
    rho: float,
    digit_to_color,
    rng: np.random.Generator,
    palette: ColorPalette = DEFAULT_PALETTE,
) -> tuple[np.ndarray, np.ndarray]:
    """Paint grayscale glyphs; returns (images [N,H,W,3], attribute indices)."""
    mapping = np.asarray(digit_to_color, dtype=np.int64)
    matched_color = mapping[labels]
    match = rng.random(len(labels)) < rho
    # Off-color: uniform over the 9 non-matching palette entries.
    offsets = rng.integers(1, 10, size=len(labels))
    attributes = np.where(match, matched_color, (matched_color + offsets) % 10)
    rgb = palette.rgb01()[attributes]  # [N, 3]
    images = gray[..., None] * rgb[:, None, None, :]
    return images.astype(np.float32), attributes.astype(np.int64)


def build_colored(spec: EnvironmentSpec, name: str = "env") -> Environment:
    """Build one colored environment; bitwise deterministic given the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base_seed = int(rng.integers(0, 2**31))
    color_rng = np.random.default_rng(int(rng.integers(0, 2**31)))
    gray, labels = glyphs.base_pool(
        spec.base_dataset, spec.size, base_seed, spec.resolution, spec.source, spec.data_dir
    )
    images, attributes = _colorize(gray, labels, spec.rho, spec.digit_to_color, color_rng)
    env = Environment(
        name=name, images=images, labels=labels, attributes=attributes,
        rho=spec.rho, seed=spec.seed, meta={"spec": asdict(spec)},
    )
    env.meta["correlation"] = empirical_correlation(env)
    return env


def build_environment_set(
    train_rhos,
    test_rho: float,
    sizes,
    seed: int,
    base_dataset: str = "mnist",
    resolution: int = 32,
    digit_to_color=IDENTITY_MAPPING,
    source: str = "synthetic",
    data_dir: str | None = None,
) -> EnvironmentSet:
    """One environment per rho, drawn from disjoint slices of a shared base pool.

    sizes is either one int (applied to every environment) or a sequence with
    one entry per environment, training environments first.
    """
    if len(train_rhos) == 0:
        raise ConfigError("at least one training environment is required")
    rhos = list(train_rhos) + [test_rho]
    if isinstance(sizes, int):
        sizes = [sizes] * len(rhos)
    sizes = [int(s) for s in sizes]
    if len(sizes) != len(rhos):
        raise ConfigError(f"expected {len(rhos)} sizes, got {len(sizes)}")
    rng = np.random.default_rng(seed)
    base_seed = int(rng.integers(0, 2**31))
    total = sum(sizes)
    gray, labels = glyphs.base_pool(base_dataset, total, base_seed, resolution, source, data_dir)

    environments, roles = {}, {}
    offset = 0
    for i, (rho, size) in enumerate(zip(rhos, sizes)):
        is_test = i == len(rhos) - 1
        name = f"test_rho{rho:g}" if is_test else f"train{i}_rho{rho:g}"
        spec = EnvironmentSpec(
            base_dataset=base_dataset, rho=rho, size=size, seed=seed,
            resolution=resolution, digit_to_color=tuple(digit_to_color),
            source=source, data_dir=data_dir,
        )
        spec.validate()
        sl = slice(offset, offset + size)
        color_rng = np.random.default_rng(int(rng.integers(0, 2**31)))
        images, attributes = _colorize(gray[sl], labels[sl], rho, digit_to_color, color_rng)
        env = Environment(
            name=name, images=images, labels=labels[sl], attributes=attributes,
            rho=rho, seed=seed, meta={"spec": asdict(spec)},
            base_indices=np.arange(offset, offset + size),
        )
        env.meta["correlation"] = empirical_correlation(env)
        environments[name] = env
        roles[name] = "test" if is_test else "train"
        offset += size
    return EnvironmentSet(environments=environments, roles=roles,
                          meta={"seed": seed, "base_dataset": base_dataset})


def default_holdout_mask(n_categories: int = 6, n_views: int = 6) -> np.ndarray:
    """One held-out view per category, staggered: mask[i, (i+3) % n_views]."""
    mask = np.zeros((n_categories, n_views), dtype=bool)
    for i in range(n_categories):
        mask[i, (i + 3) % n_views] = True
    return mask


DEFAULT_GRID_CATEGORIES = ("tshirt", "trouser", "pullover", "dress", "coat", "sandal")
DEFAULT_GRID_VIEWS = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)


def build_holdout_grid(
    categories=DEFAULT_GRID_CATEGORIES,
    views=DEFAULT_GRID_VIEWS,
    mask: np.ndarray | None = None,
    coverage_ratio: float = 1.0,
    seed: int = 0,
    images_per_cell: int = 100,
    base_dataset: str = "fashion-mnist",
    resolution: int = 32,
    source: str = "synthetic",
    data_dir: str | None = None,
    view_jitter_deg: float = 8.0,
) -> EnvironmentSet:
    """Category x view grid with masked cells held out as the test environment.

    categories are glyph classes (names or indices); views are rotation angles
    in degrees. Training keeps, per category, max(1, floor(available *
    coverage_ratio)) unmasked cells chosen at random. Labels are category row
    indices; attributes are view column indices.
    """
    cat_idx = []
    for c in categories:
        if isinstance(c, str):
            table = glyphs.FASHION_CLASSES if base_dataset == "fashion-mnist" else tuple(
                str(d) for d in range(10))
            if c not in table:
                raise ConfigError(f"unknown category {c!r} for {base_dataset}")
            cat_idx.append(table.index(c))
        else:
            cat_idx.append(int(c))
    views = [float(v) for v in views]
    if mask is None:
        mask = default_holdout_mask(len(categories), len(views))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(categories), len(views)):
        raise ConfigError(f"mask shape {mask.shape} does not match "
                          f"{len(categories)}x{len(views)} grid")
    if not mask.any():
        raise ConfigError("mask holds out no cells; test environment would be empty")
    if not 0.0 < coverage_ratio <= 1.0:
        raise ConfigError(f"coverage_ratio must be in (0,1], got {coverage_ratio}")

    rng = np.random.default_rng(seed)
    kept_cells, test_cells = [], []
    for i in range(len(categories)):
        avail = np.flatnonzero(~mask[i])
        if len(avail) == 0:
            raise ConfigError(f"category {categories[i]!r} has every view held out")
        n_keep = max(1, int(np.floor(len(avail) * coverage_ratio)))
        chosen = np.sort(rng.choice(avail, size=n_keep, replace=False))
        kept_cells.extend((i, int(j)) for j in chosen)
        test_cells.extend((i, int(j)) for j in np.flatnonzero(mask[i]))

    def _render_cells(cells, cell_rng):
        n = len(cells) * images_per_cell
        labels = np.empty(n, dtype=np.int64)
        attrs = np.empty(n, dtype=np.int64)
        glyph_classes = np.empty(n, dtype=np.int64)
        rotations = np.empty(n, dtype=np.float64)
        for k, (ci, vi) in enumerate(cells):
            sl = slice(k * images_per_cell, (k + 1) * images_per_cell)
            labels[sl] = ci
            attrs[sl] = vi
            glyph_classes[sl] = cat_idx[ci]
            rotations[sl] = views[vi] + cell_rng.uniform(
                -view_jitter_deg, view_jitter_deg, images_per_cell)
        gray = glyphs.render_glyphs(
            base_dataset, glyph_classes, seed=int(cell_rng.integers(0, 2**31)),
            resolution=resolution, extra_rotation_deg=rotations,
        )
        images = np.repeat(gray[..., None], 3, axis=-1).astype(np.float32)
        return images, labels, attrs

    grid_meta = {
        "categories": [str(c) for c in categories],
        "views": views,
        "mask": mask.tolist(),
        "kept_cells": kept_cells,
        "test_cells": test_cells,
        "coverage_ratio": coverage_ratio,
        "images_per_cell": images_per_cell,
        "seed": seed,
    }
    environments, roles = {}, {}
    for name, cells, role in (("train_grid", kept_cells, "train"),
                              ("test_grid", test_cells, "test")):
        images, labels, attrs = _render_cells(cells, rng)
        env = Environment(name=name, images=images, labels=labels, attributes=attrs,
                          rho=None, seed=seed, meta={"grid": grid_meta, "cells": cells})
        environments[name] = env
        roles[name] = role
    return EnvironmentSet(environments=environments, roles=roles, meta={"grid": grid_meta})


def attribute_of(image: np.ndarray, palette: ColorPalette = DEFAULT_PALETTE) -> int:
    """Palette index nearest (Euclidean) to the mean RGB of foreground pixels.

    Foreground = pixels with channel-mean luminance > 0.05. Ties break toward
    the lowest palette index.
    """
    image = np.asarray(image)
    assert image.ndim == 3 and image.shape[-1] == 3
    fg = image.mean(axis=-1) > FOREGROUND_LUI
    if not fg.any():
        raise BlankImage("no foreground pixels above luminance threshold")
    mean_rgb = image[fg].mean(axis=0)
    dists = np.linalg.norm(palette.rgb01() - mean_rgb[None, :], axis=1)
    return int(np.argmin(dists))


def attributes_of(images: np.ndarray, palette: ColorPalette = DEFAULT_PALETTE,
                  chunk: int = 4096) -> np.ndarray:
    """Vectorized attribute_of over a batch; blank images get -1."""
    images = np.asarray(images)
    assert images.ndim == 4 and images.shape[-1] == 3
    n = len(images)
    out = np.full(n, -1, dtype=np.int64)
    rgb = palette.rgb01()
    for start in range(0, n, chunk):
        part = images[start:start + chunk]
        m = len(part)
        fg = part.mean(axis=-1) > FOREGROUND_LUI  # [m, H, W]
        counts = fg.reshape(m, -1).sum(axis=1)
        sums = (part.reshape(m, -1, 3) * fg.reshape(m, -1, 1)).sum(axis=1)
        ok = counts > 0
        if ok.any():
            means = sums[ok] / counts[ok, None]
            d = np.linalg.norm(means[:, None, :] - rgb[None, :, :], axis=2)
            out[start:start + chunk][ok] = np.argmin(d, axis=1)
    return out


def empirical_correlation(env: Environment) -> float:
    """Fraction of samples whose attribute matches digit_to_color[label]."""
    if len(env) == 0:
        raise EmptyEnv(f"environment {env.name!r} is empty")
    mapping = np.asarray(
        env.meta.get("spec", {}).get("digit_to_color", IDENTITY_MAPPING), dtype=np.int64
    )
    return float(np.mean(env.attributes == mapping[env.labels]))


# --- on-disk layout: meta.json + images.bin (f32 LE) + labels.bin/attributes.bin (u8)


def save_environment(env: Environment, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    n, h, w, _ = env.images.shape
    meta = {
        "name": env.name, "rho": env.rho, "seed": env.seed,
        "shape": [int(n), int(h), int(w), 3],
        "correlation": env.meta.get("correlation"),
        **{k: v for k, v in env.meta.items() if k != "correlation"},
    }
    (outdir / "meta.json").write_text(json.dumps(meta, indent=2, default=str))
    env.images.astype("<f4").tofile(outdir / "images.bin")
    env.labels.astype(np.uint8).tofile(outdir / "labels.bin")
    env.attributes.astype(np.uint8).tofile(outdir / "attributes.bin")


def load_environment(path) -> Environment:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataMissing(f"no environment at {path}")
    meta = json.loads(meta_path.read_text())
    n, h, w, c = meta["shape"]
    images = np.fromfile(path / "images.bin", dtype="<f4")
    if images.size != n * h * w * c:
        raise FormatError(f"images.bin has {images.size} floats, expected {n * h * w * c}")
    images = images.reshape(n, h, w, c)
    labels = np.fromfile(path / "labels.bin", dtype=np.uint8).astype(np.int64)
    attributes = np.fromfile(path / "attributes.bin", dtype=np.uint8).astype(np.int64)
    if len(labels) != n or len(attributes) != n:
        raise FormatError("labels/attributes length does not match meta.json shape")
    extra = {k: v for k, v in meta.items() if k not in ("name", "rho", "seed", "shape")}
    return Environment(name=meta["name"], images=images, labels=labels,
                       attributes=attributes, rho=meta.get("rho"), seed=meta.get("seed"),
                       meta=extra)


def save_environment_set(env_set: EnvironmentSet, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "set.json").write_text(json.dumps(
        {"roles": env_set.roles, "meta": env_set.meta}, indent=2, default=str))
    for name, env in env_set.environments.items():
        save_environment(env, outdir / name)


def load_environment_set(path) -> EnvironmentSet:
    path = Path(path)
    set_path = path / "set.json"
    if not set_path.exists():
        raise DataMissing(f"no environment set at {path}")
    info = json.loads(set_path.read_text())
    environments = {name: load_environment(path / name) for name in info["roles"]}
    return EnvironmentSet(environments=environments, roles=info["roles"],
                          meta=info.get("meta", {}))
