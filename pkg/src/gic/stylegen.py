"""Small conditional style-based generator and freezable discriminator.

The generator follows the usual style-based layout at desk scale: a class
embedding is concatenated to the latent z and mapped through an MLP to a
single style vector w, which is broadcast to every style slot (so
style-mixing can swap per-slot styles). Each synthesis block applies one
weight-modulated 3x3 convolution with demodulation, adds scalar-scaled
per-pixel noise, and leaky-ReLUs; resolution doubles after the first block
(4px -> 2^(L+1) px). The RGB projection is style-modulated too — without
demodulation, so its per-channel gains directly carry appearance — and owns
the last style slot; swapping only that slot recolors a sample without
moving its spatial structure. The discriminator is a plain downsampling conv
stack with projection conditioning; its blocks are indexed from the input
side so the fine-tuning stage can freeze a prefix of them.

Parameters live in ParamTree checkpoints; entry names equal the torch
state_dict keys, and the architecture is embedded in the init lineage event
so a module can always be rebuilt from a tree alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ClassMismatch, ClassOutOfRange, RangeError, ShapeError
from .param_space import ParamTree


def _arch_hash(kind: str, fields: dict) -> str:
    blob = json.dumps({"kind": kind, **fields}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class GeneratorArch:
    latent_dim: int = 64
    style_dim: int = 64
    mapping_layers: int = 4
    synthesis_blocks: int = 4
    channels: tuple = (64, 48, 32, 24)
    num_classes: int = 10

    def __post_init__(self):
        assert self.synthesis_blocks >= 2, "need at least two synthesis blocks"
        assert len(self.channels) == self.synthesis_blocks
        assert self.mapping_layers >= 1

    @property
    def resolution(self) -> int:
        # block 1 renders at 4px, each later block doubles
        return 4 * 2 ** (self.synthesis_blocks - 1)

    @property
    def style_slots(self) -> int:
        # one per synthesis block plus one for the RGB projection
        return self.synthesis_blocks + 1

    @property
    def arch_id(self) -> str:
        return _arch_hash("generator", asdict(self))


@dataclass(frozen=True)
class DiscriminatorArch:
    blocks: int = 4
    channels: tuple = (24, 32, 48, 64)
    num_classes: int = 10
    resolution: int = 32

    def __post_init__(self):
        assert self.blocks >= 2, "need at least two discriminator blocks"
        assert len(self.channels) == self.blocks

    @property
    def arch_id(self) -> str:
        return _arch_hash("discriminator", asdict(self))


@dataclass
class StyleCodes:
    """Per-slot style vectors plus the class condition they encode.

    Row i styles synthesis block i; the last row styles the RGB projection.
    """

    ws: np.ndarray  # [num_slots, style_dim] float32
    c: int

    def __post_init__(self):
        self.ws = np.asarray(self.ws, dtype=np.float32)
        assert self.ws.ndim == 2, "ws must be [num_slots, style_dim]"
        assert np.all(np.isfinite(self.ws)), "style codes must be finite"
        self.c = int(self.c)

    @property
    def num_slots(self) -> int:
        return self.ws.shape[0]


class ModulatedConv(nn.Module):
    """3x3 convolution with per-sample style modulation and demodulation."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3) * 0.1)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)  # start at scale one

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        b, in_ch, h, wd = x.shape
        out_ch = self.weight.shape[0]
        style = self.affine(w)  # [B, in_ch]
        weight = self.weight[None] * style[:, None, :, None, None]
        demod = torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4)) + 1e-8)
        weight = weight * demod[:, :, None, None, None]
        x = x.reshape(1, b * in_ch, h, wd)
        out = F.conv2d(x, weight.reshape(b * out_ch, in_ch, 3, 3), padding=1, groups=b)
        return out.reshape(b, out_ch, h, wd) + self.bias[None, :, None, None]


class SynthesisBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv(in_ch, out_ch, style_dim)
        self.noise_scale = nn.Parameter(torch.zeros(()))

    def forward(self, x, w, noise):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w)
        if noise is not None:
            x = x + self.noise_scale * noise
        return F.leaky_relu(x, 0.2)


class ModulatedProjection(nn.Module):
    """Style-modulated 1x1 projection to RGB, deliberately without
    demodulation: the per-channel gains are the sample's color/appearance
    handle, so swapping the style that feeds this layer recolors the image
    while leaving spatial structure to the synthesis blocks."""

    def __init__(self, in_ch: int, style_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(3, in_ch, 1, 1) * 0.1)
        self.bias = nn.Parameter(torch.zeros(3))
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)  # start at scale one

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        gains = self.affine(w)  # [B, in_ch]
        x = x * gains[:, :, None, None]
        return F.conv2d(x, self.weight) + self.bias[None, :, None, None]


class Mapping(nn.Module):
    def __init__(self, arch: GeneratorArch):
        super().__init__()
        self.embed = nn.Embedding(arch.num_classes, arch.latent_dim)
        dims = [arch.latent_dim * 2] + [arch.style_dim] * arch.mapping_layers
        self.net = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(arch.mapping_layers))

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, self.embed(y)], dim=1)
        for i, layer in enumerate(self.net):
            h = layer(h)
            if i + 1 < len(self.net):
                h = F.leaky_relu(h, 0.2)
        return h


class Generator(nn.Module):
    def __init__(self, arch: GeneratorArch):
        super().__init__()
        self.arch = arch
        self.mapping = Mapping(arch)
        ch = arch.channels
        self.const = nn.Parameter(torch.randn(ch[0], 4, 4))
        blocks = []
        for i in range(arch.synthesis_blocks):
            in_ch = ch[i - 1] if i > 0 else ch[0]
            blocks.append(SynthesisBlock(in_ch, ch[i], arch.style_dim, upsample=i > 0))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = ModulatedProjection(ch[-1], arch.style_dim)

    def noise_shapes(self) -> list:
        res = 4
        shapes = []
        for i in range(self.arch.synthesis_blocks):
            if i > 0:
                res *= 2
            shapes.append((1, res, res))
        return shapes

    def sample_noise(self, batch: int, rng: torch.Generator | None) -> list:
        return [torch.randn(batch, *s, generator=rng) for s in self.noise_shapes()]

    def synthesize_ws(self, ws: torch.Tensor, noise: list | None) -> torch.Tensor:
        """ws: [B, num_slots, style_dim] per-slot styles (blocks, then RGB
        projection) -> images [B, 3, H, W] in [-1, 1]."""
        assert ws.shape[1] == self.arch.style_slots, \
            f"expected {self.arch.style_slots} style slots, got {ws.shape[1]}"
        b = ws.shape[0]
        x = self.const[None].expand(b, -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, ws[:, i], None if noise is None else noise[i])
        return torch.tanh(self.to_rgb(x, ws[:, -1]))

    def forward(self, z, y, rng: torch.Generator | None = None):
        w = self.mapping(z, y)
        ws = w[:, None, :].expand(-1, self.arch.style_slots, -1)
        return self.synthesize_ws(ws, self.sample_noise(z.shape[0], rng))


class Discriminator(nn.Module):
    """Downsampling conv stack with projection conditioning.

    blocks[0] owns the from-RGB stem; a freeze prefix of blocks therefore
    always starts at the input side. The head (logit + class projection) is
    outside the blocks and never frozen.
    """

    def __init__(self, arch: DiscriminatorArch):
        super().__init__()
        self.arch = arch
        ch = arch.channels
        blocks = []
        for i in range(arch.blocks):
            layers = []
            if i == 0:
                layers.append(nn.Conv2d(3, ch[0], kernel_size=1))
                layers.append(nn.LeakyReLU(0.2))
            out_ch = ch[i + 1] if i + 1 < arch.blocks else ch[-1]
            stride = 2 if i < arch.blocks - 1 else 1
            layers.append(nn.Conv2d(ch[i], out_ch, kernel_size=3, stride=stride, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        self.head_fc = nn.Linear(ch[-1], 1)
        self.head_embed = nn.Embedding(arch.num_classes, ch[-1])

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        feat = h.mean(dim=(2, 3))
        return self.head_fc(feat).squeeze(1) + (self.head_embed(y) * feat).sum(dim=1)


# --- ParamTree conversions


def _tree_from_module(module: nn.Module, arch, kind: str, seed: int, role: str) -> ParamTree:
    entries = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in module.state_dict().items()}
    # lineage rides inside JSON checkpoint headers, so keep it JSON-native
    # (tuples would come back as lists and break tree equality)
    arch_fields = json.loads(json.dumps(asdict(arch)))
    lineage = [{"event": "init", "seed": int(seed), "arch_id": arch.arch_id,
                "kind": kind, "arch": arch_fields}]
    return ParamTree(arch_id=arch.arch_id, entries=entries, lineage=lineage, role=role)


def arch_from_tree(tree: ParamTree):
    init = tree.init_event
    fields = dict(init["arch"])
    fields["channels"] = tuple(fields["channels"])
    if init["kind"] == "generator":
        return GeneratorArch(**fields)
    return DiscriminatorArch(**fields)


def init_generator(arch: GeneratorArch, seed: int) -> ParamTree:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = Generator(arch)
    return _tree_from_module(module, arch, "generator", seed, role="generator")


def init_discriminator(arch: DiscriminatorArch, seed: int) -> ParamTree:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = Discriminator(arch)
    return _tree_from_module(module, arch, "discriminator", seed, role="discriminator")


def module_from_tree(tree: ParamTree) -> nn.Module:
    arch = arch_from_tree(tree)
    module = Generator(arch) if tree.init_event["kind"] == "generator" else Discriminator(arch)
    state = {k: torch.from_numpy(np.array(v)) for k, v in tree.entries.items()}
    module.load_state_dict(state)
    return module


def tree_with_params(tree: ParamTree, module: nn.Module) -> ParamTree:
    """Current module weights written back onto tree's metadata."""
    entries = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in module.state_dict().items()}
    return tree.replace_entries(entries)


def _as_generator(params) -> Generator:
    if isinstance(params, Generator):
        return params
    module = module_from_tree(params)
    if not isinstance(module, Generator):
        raise ShapeError("parameter tree is not a generator")
    return module


# --- public per-sample operations


def map_latent(z: np.ndarray, c: int, params) -> StyleCodes:
    """Map one latent + class to per-slot style codes (all slots equal)."""
    gen = _as_generator(params)
    z = np.asarray(z, dtype=np.float32)
    if z.shape != (gen.arch.latent_dim,):
        raise ShapeError(f"z must have shape ({gen.arch.latent_dim},), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ShapeError("z must be finite")
    if not 0 <= int(c) < gen.arch.num_classes:
        raise ClassOutOfRange(f"class {c} outside [0, {gen.arch.num_classes})")
    with torch.no_grad():
        w = gen.mapping(torch.from_numpy(z)[None], torch.tensor([int(c)]))
    ws = np.repeat(w.numpy(), gen.arch.style_slots, axis=0)
    return StyleCodes(ws=ws, c=int(c))


def style_mix(codes_a: StyleCodes, codes_b: StyleCodes, k: int) -> StyleCodes:
    """Slots 1..k from codes_a, slots k+1.. from codes_b; same class only.

    Swapping whole-slot styles between classes would hand spatial content to
    codes_b and invalidate the label; cross-class transfer goes through
    appearance_swap instead, which only touches the RGB-projection slot.
    """
    if codes_a.c != codes_b.c:
        raise ClassMismatch(f"cannot mix classes {codes_a.c} and {codes_b.c}")
    L = codes_a.num_slots
    if codes_b.num_slots != L:
        raise ShapeError("style code slot counts differ")
    if not 0 <= k <= L:
        raise RangeError(f"crossover {k} outside [0, {L}]")
    ws = np.concatenate([codes_a.ws[:k], codes_b.ws[k:]], axis=0)
    return StyleCodes(ws=ws, c=codes_a.c)


def appearance_swap(codes_a: StyleCodes, codes_b: StyleCodes) -> StyleCodes:
    """codes_a with codes_b's RGB-projection style; classes may differ.

    The projection gains recolor the rendered glyph without moving spatial
    structure, so the result keeps codes_a's class label.
    """
    if codes_b.num_slots != codes_a.num_slots:
        raise ShapeError("style code slot counts differ")
    ws = np.concatenate([codes_a.ws[:-1], codes_b.ws[-1:]], axis=0)
    return StyleCodes(ws=ws, c=codes_a.c)


def synthesize(styles: StyleCodes, params, noise_seed: int = 0) -> np.ndarray:
    """Render one image [H, W, 3] in [-1, 1]; deterministic given noise_seed."""
    gen = _as_generator(params)
    if styles.num_slots != gen.arch.style_slots:
        raise ShapeError(f"expected {gen.arch.style_slots} style slots, "
                         f"got {styles.num_slots}")
    rng = torch.Generator().manual_seed(int(noise_seed))
    with torch.no_grad():
        ws = torch.from_numpy(styles.ws)[None]
        img = gen.synthesize_ws(ws, gen.sample_noise(1, rng))
    return img[0].permute(1, 2, 0).numpy()


def discriminate(image: np.ndarray, c: int, params) -> float:
    """Scalar realness logit for one image in [-1, 1]."""
    if isinstance(params, Discriminator):
        disc = params
    else:
        disc = module_from_tree(params)
        if not isinstance(disc, Discriminator):
            raise ShapeError("parameter tree is not a discriminator")
    res = disc.arch.resolution
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (res, res, 3):
        raise ShapeError(f"image must be ({res}, {res}, 3), got {image.shape}")
    if not 0 <= int(c) < disc.arch.num_classes:
        raise ClassOutOfRange(f"class {c} outside [0, {disc.arch.num_classes})")
    with torch.no_grad():
        x = torch.from_numpy(image).permute(2, 0, 1)[None]
        logit = disc(x, torch.tensor([int(c)]))
    return float(logit[0])


def frozen_entry_names(tree: ParamTree, freeze_depth: int) -> list:
    """Entry names of discriminator blocks 1..freeze_depth (input side up)."""
    arch = arch_from_tree(tree)
    if not isinstance(arch, DiscriminatorArch):
        raise ShapeError("freeze masks apply to discriminator trees")
    if not 0 <= freeze_depth <= arch.blocks:
        raise RangeError(f"freeze_depth {freeze_depth} outside [0, {arch.blocks}]")
    prefixes = tuple(f"blocks.{i}." for i in range(freeze_depth))
    return [n for n in tree.names() if n.startswith(prefixes)] if prefixes else []
