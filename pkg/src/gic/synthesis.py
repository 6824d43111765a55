"""Sampling images from interpolated generators.

A synthesis run repeatedly draws a coefficient vector over the bundle members,
blends their parameters, and samples class-conditional images from the blended
generator, optionally style-mixing pairs of codes. The blend coefficients can
be fixed, drawn from a Dirichlet, walked over a simplex lattice, or cycled
through the one-hot corners.

Mixing comes in two flavors. "same" pairs two latents of the same class and
swaps style slots at a crossover point — more intra-class diversity, bias
untouched. "cross" (the default) pairs the sample with an independently drawn
class and swaps only the RGB-projection style, recoloring the glyph toward the
partner class's palette while the labeled class keeps spatial content; this is
what pushes the synthesized color marginal away from the source bias.

Outputs are float32 images in [0, 1] with integer labels equal to the
conditioning class, plus per-sample provenance (coefficients, crossover point,
partner class, seeds) so any sample can be regenerated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import stylegen
from .errors import ConfigError, DiskError
from .param_space import InterpolationCoefficients, interpolate


@dataclass
class SynthesisSpec:
    coefficient_strategy: str = "dirichlet"  # fixed | dirichlet | grid | one_hot_cycle
    fixed_alpha: tuple | None = None         # for "fixed"
    concentration: float = 1.0               # for "dirichlet"
    grid_step: float = 0.5                   # for "grid"
    resample_every: str = "batch"            # batch | dataset
    mixing_prob: float = 0.5
    mixing_classes: str = "cross"            # cross | same
    crossover_policy: str = "uniform"        # uniform | fixed; "same" mixing only
    crossover_k: int | None = None           # for "fixed"
    class_distribution: tuple | None = None  # None = uniform over classes
    count: int = 1000
    seed: int = 0
    batch_size: int = 64

    def validate(self, num_members: int | None = None) -> None:
        if self.coefficient_strategy not in ("fixed", "dirichlet", "grid",
                                             "one_hot_cycle"):
            raise ConfigError(f"unknown strategy {self.coefficient_strategy!r}")
        if self.resample_every not in ("batch", "dataset"):
            raise ConfigError(f"unknown resample policy {self.resample_every!r}")
        if not 0.0 <= self.mixing_prob <= 1.0:
            raise ConfigError("mixing_prob must lie in [0, 1]")
        if self.mixing_classes not in ("cross", "same"):
            raise ConfigError(f"unknown mixing_classes {self.mixing_classes!r}")
        if self.crossover_policy not in ("uniform", "fixed"):
            raise ConfigError(f"unknown crossover policy {self.crossover_policy!r}")
        if self.crossover_policy == "fixed" and self.crossover_k is None:
            raise ConfigError("fixed crossover policy needs crossover_k")
        if self.crossover_policy == "fixed" and self.mixing_classes == "cross":
            raise ConfigError("cross-class mixing pins the crossover to the "
                              "projection slot; use mixing_classes='same' with "
                              "a fixed crossover")
        if self.coefficient_strategy == "fixed":
            if self.fixed_alpha is None:
                raise ConfigError("fixed strategy needs fixed_alpha")
            if num_members is not None and len(self.fixed_alpha) != num_members:
                raise ConfigError("fixed_alpha length does not match bundle size")
        if self.coefficient_strategy == "dirichlet" and self.concentration <= 0:
            raise ConfigError("concentration must be positive")
        if self.coefficient_strategy == "grid" and not 0 < self.grid_step <= 1:
            raise ConfigError("grid_step must lie in (0, 1]")
        if self.count < 1 or self.batch_size < 1:
            raise ConfigError("count and batch_size must be positive")


def _simplex_lattice(k: int, m: int):
    """All length-k tuples of nonnegative ints summing to m, first coord descending."""
    if k == 1:
        return [(m,)]
    out = []
    for a in range(m, -1, -1):
        out.extend((a,) + rest for rest in _simplex_lattice(k - 1, m - a))
    return out


class CoefficientSampler:
    """Draws coefficient vectors; keeps a cursor for the enumerating strategies."""

    def __init__(self, spec: SynthesisSpec, num_members: int):
        spec.validate(num_members)
        self.spec = spec
        self.k = num_members
        self._calls = 0
        if spec.coefficient_strategy == "grid":
            m = int(round(1.0 / spec.grid_step))
            if abs(m * spec.grid_step - 1.0) > 1e-9:
                raise ConfigError("grid_step must evenly divide 1")
            self._lattice = [tuple(a / m for a in pt)
                             for pt in _simplex_lattice(num_members, m)]

    def sample(self, rng: np.random.Generator) -> InterpolationCoefficients:
        spec, k = self.spec, self.k
        if spec.coefficient_strategy == "fixed":
            alphas = spec.fixed_alpha
        elif spec.coefficient_strategy == "dirichlet":
            alphas = rng.dirichlet(np.full(k, float(spec.concentration)))
            alphas = alphas / alphas.sum()  # guard against float drift
        elif spec.coefficient_strategy == "grid":
            alphas = self._lattice[self._calls % len(self._lattice)]
        else:  # one_hot_cycle
            alphas = tuple(1.0 if i == self._calls % k else 0.0 for i in range(k))
        self._calls += 1
        return InterpolationCoefficients(values=tuple(float(a) for a in alphas))


def sample_coefficients(sampler_or_spec, num_members: int,
                        rng: np.random.Generator) -> InterpolationCoefficients:
    """One coefficient draw. Pass a CoefficientSampler to advance cycling strategies."""
    if isinstance(sampler_or_spec, CoefficientSampler):
        return sampler_or_spec.sample(rng)
    return CoefficientSampler(sampler_or_spec, num_members).sample(rng)


def _sample_images(tree, classes, spec, latent_seed, noise_seed, num_slots):
    """Class-conditional sampling with optional style mixing. Returns (imgs, prov).

    Slots < k take the labeled code's style, slots >= k the partner's. For
    "same" mixing the partner shares the class and k follows crossover_policy;
    for "cross" the partner class is independent and k is pinned to the last
    slot, so only the RGB projection is restyled.
    """
    module = stylegen.module_from_tree(tree)
    n = len(classes)
    zdim = module.arch.latent_dim
    trng = torch.Generator().manual_seed(latent_seed)
    y_a = torch.from_numpy(classes)
    z_a = torch.randn(n, zdim, generator=trng)
    z_b = torch.randn(n, zdim, generator=trng)
    mix_draw = torch.rand(n, generator=trng).numpy()
    mixed = mix_draw < spec.mixing_prob
    if spec.mixing_classes == "cross":
        y_b = torch.randint(0, module.arch.num_classes, (n,), generator=trng)
        kvec = np.full(n, num_slots - 1)
    else:
        y_b = y_a
        if spec.crossover_policy == "fixed":
            kvec = np.full(n, int(spec.crossover_k))
        else:
            kvec = torch.randint(0, num_slots + 1, (n,), generator=trng).numpy()
    kvec = np.where(mixed, kvec, num_slots)  # unmixed = every slot from code a

    with torch.no_grad():
        w_a = module.mapping(z_a, y_a).unsqueeze(1).expand(-1, num_slots, -1)
        w_b = module.mapping(z_b, y_b).unsqueeze(1).expand(-1, num_slots, -1)
        slot_idx = torch.arange(num_slots).unsqueeze(0)
        take_a = (slot_idx < torch.from_numpy(kvec).unsqueeze(1)).unsqueeze(-1)
        ws = torch.where(take_a, w_a, w_b)
        nrng = torch.Generator().manual_seed(noise_seed)
        noise = module.sample_noise(n, nrng)
        raw = module.synthesize_ws(ws, noise)  # [-1, 1]
    imgs = ((raw.permute(0, 2, 3, 1) + 1.0) / 2.0).clamp(0, 1).numpy()
    prov = [{"class": int(classes[i]), "mixed": bool(mixed[i]),
             "crossover": int(kvec[i]) if mixed[i] else None,
             "partner_class": int(y_b[i]) if mixed[i] else None,
             "latent_seed": latent_seed, "noise_seed": noise_seed, "index": i}
            for i in range(n)]
    return imgs.astype(np.float32), prov


def synth_batch(bundle, spec: SynthesisSpec, n: int, rng: np.random.Generator,
                sampler: CoefficientSampler | None = None,
                coefficients: InterpolationCoefficients | None = None):
    """One batch from a freshly blended generator.

    Draws coefficients from `sampler` (or `coefficients` if pinned by a
    per-dataset policy), interpolates the bundle, and samples n images.
    Returns (images [n,H,W,3] in [0,1], labels [n], provenance list).
    """
    members = bundle.members()
    if sampler is None and coefficients is None:
        sampler = CoefficientSampler(spec, len(members))
    alpha = coefficients if coefficients is not None else sampler.sample(rng)
    tree = interpolate(members, alpha)
    arch = stylegen.arch_from_tree(tree)
    if spec.class_distribution is not None:
        dist = np.asarray(spec.class_distribution, dtype=np.float64)
        if len(dist) != arch.num_classes:
            raise ConfigError("class_distribution length != num_classes")
        dist = dist / dist.sum()
        classes = rng.choice(arch.num_classes, size=n, p=dist).astype(np.int64)
    else:
        classes = rng.integers(0, arch.num_classes, size=n).astype(np.int64)
    latent_seed = int(rng.integers(0, 2**31))
    noise_seed = int(rng.integers(0, 2**31))
    images, prov = _sample_images(tree, classes, spec, latent_seed, noise_seed,
                                  arch.style_slots)
    for p in prov:
        p["alpha"] = list(alpha.values)
    return images, classes, prov


@dataclass
class SyntheticDataset:
    images: np.ndarray      # [N, H, W, 3] float32 in [0, 1]
    labels: np.ndarray      # [N] int64
    provenance: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        assert self.images.ndim == 4 and self.images.shape[-1] == 3
        assert len(self.images) == len(self.labels) == len(self.provenance)

    @property
    def name(self) -> str:
        return self.meta.get("name", "synthetic")


def materialize_dataset(bundle, spec: SynthesisSpec, out_dir=None) -> SyntheticDataset:
    """Generate spec.count samples deterministically; optionally persist them."""
    spec.validate(len(bundle.domain_names))
    rng = np.random.default_rng(spec.seed)
    sampler = CoefficientSampler(spec, len(bundle.domain_names))
    pinned = sampler.sample(rng) if spec.resample_every == "dataset" else None

    chunks, label_chunks, provenance = [], [], []
    produced = 0
    while produced < spec.count:
        n = min(spec.batch_size, spec.count - produced)
        if pinned is not None:
            imgs, labels, prov = synth_batch(bundle, spec, n, rng,
                                             coefficients=pinned)
        else:
            imgs, labels, prov = synth_batch(bundle, spec, n, rng, sampler=sampler)
        chunks.append(imgs)
        label_chunks.append(labels)
        provenance.extend(prov)
        produced += n
    dataset = SyntheticDataset(
        images=np.concatenate(chunks), labels=np.concatenate(label_chunks),
        provenance=provenance,
        meta={"name": f"synthetic_{spec.coefficient_strategy}", "spec": asdict(spec),
              "bundle_domains": list(bundle.domain_names),
              "bundle_arch_id": bundle.arch_id})
    assert len(dataset.images) == spec.count
    if out_dir is not None:
        save_synthetic(dataset, out_dir)
    return dataset


def save_synthetic(dataset: SyntheticDataset, out_dir) -> None:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "meta.json").write_text(json.dumps({
            "meta": dataset.meta, "shape": list(dataset.images.shape)}, indent=2))
        dataset.images.astype("<f4").tofile(out_dir / "images.bin")
        dataset.labels.astype(np.uint8).tofile(out_dir / "labels.bin")
        with open(out_dir / "provenance.jsonl", "w") as fh:
            for record in dataset.provenance:
                fh.write(json.dumps(record) + "\n")
    except OSError as exc:
        raise DiskError(f"failed to write synthetic dataset to {out_dir}: {exc}")


def load_synthetic(path) -> SyntheticDataset:
    path = Path(path)
    try:
        info = json.loads((path / "meta.json").read_text())
        shape = tuple(info["shape"])
        images = np.fromfile(path / "images.bin", dtype="<f4").reshape(shape)
        labels = np.fromfile(path / "labels.bin", dtype=np.uint8).astype(np.int64)
        with open(path / "provenance.jsonl") as fh:
            provenance = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DiskError(f"failed to read synthetic dataset from {path}: {exc}")
    return SyntheticDataset(images=images, labels=labels, provenance=provenance,
                            meta=info["meta"])
