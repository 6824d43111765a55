"""Adversarial pretraining and FreezeD fine-tuning of correlated generators.

One domain is pretrained from scratch; every other domain fine-tunes from
that checkpoint with the lower discriminator blocks frozen. Because all
members start from the same initialization and only move by gradient steps,
the resulting bundle is structurally aligned and suitable for parameter
interpolation.

Training uses the non-saturating GAN loss with an R1 gradient penalty on real
samples, Adam on both networks, and aborts with DivergenceError the moment a
loss goes non-finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import stylegen
from .errors import ConfigError, DivergenceError
from .param_space import ParamTree, check_aligned, load_checkpoint, save_checkpoint


@dataclass
class GanConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate_g: float = 0.0025
    learning_rate_d: float = 0.0025
    r1_weight: float = 1.0
    freeze_depth: int | None = None  # fine-tune only; None = half the blocks
    finetune_steps: int | None = None  # None = 25% of pretrain steps
    # beta1=0 keeps early training out of the all-background local optimum that
    # momentum-heavy updates drive the generator into on mostly-dark imagery
    adam_betas: tuple = (0.0, 0.99)
    seed: int = 0
    snapshot_every: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.learning_rate_g <= 0 or self.learning_rate_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.r1_weight < 0:
            raise ConfigError("r1_weight must be nonnegative")


@dataclass
class GeneratorBundle:
    domain_names: list
    generators: dict  # domain name -> ParamTree
    pretrain_domain: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        assert self.pretrain_domain in self.domain_names
        assert set(self.domain_names) == set(self.generators)
        if len(self.domain_names) >= 2:
            report = check_aligned([self.generators[n] for n in self.domain_names])
            assert report.aligned, f"bundle members misaligned: {report.mismatches}"

    @property
    def arch_id(self) -> str:
        return self.generators[self.domain_names[0]].arch_id

    def members(self) -> list:
        return [self.generators[n] for n in self.domain_names]

    def save(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "bundle.json").write_text(json.dumps({
            "domain_names": list(self.domain_names),
            "pretrain_domain": self.pretrain_domain,
            "meta": self.meta,
        }, indent=2, default=str))
        for name, tree in self.generators.items():
            save_checkpoint(tree, outdir / f"{name}.gic")

    @classmethod
    def load(cls, path) -> "GeneratorBundle":
        path = Path(path)
        info = json.loads((path / "bundle.json").read_text())
        generators = {name: load_checkpoint(path / f"{name}.gic")
                      for name in info["domain_names"]}
        return cls(domain_names=info["domain_names"], generators=generators,
                   pretrain_domain=info["pretrain_domain"], meta=info.get("meta", {}))


def _jsonsafe(obj):
    """Lineage events must survive a JSON round trip unchanged (tuples -> lists)."""
    return json.loads(json.dumps(obj))


def _env_tensors(env):
    images = torch.from_numpy(np.asarray(env.images, dtype=np.float32))
    images = images.permute(0, 3, 1, 2) * 2.0 - 1.0  # [0,1] -> [-1,1]
    labels = torch.from_numpy(np.asarray(env.labels, dtype=np.int64))
    return images, labels


def _run_adversarial(gen_tree: ParamTree, disc_tree: ParamTree, env, config: GanConfig,
                     steps: int, frozen_names=(), log_path=None, snapshot_dir=None):
    """Shared pretrain/fine-tune loop. Returns (gen_tree, disc_tree, history)."""
    config.validate()
    if config.batch_size > len(env.images):
        raise ConfigError(f"batch_size {config.batch_size} exceeds environment "
                          f"size {len(env.images)}")
    gen = stylegen.module_from_tree(gen_tree)
    disc = stylegen.module_from_tree(disc_tree)
    frozen = set(frozen_names)
    for key, param in disc.named_parameters():
        if key in frozen:
            param.requires_grad_(False)

    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate_g,
                             betas=config.adam_betas)
    opt_d = torch.optim.Adam([p for p in disc.parameters() if p.requires_grad],
                             lr=config.learning_rate_d, betas=config.adam_betas)
    images, labels = _env_tensors(env)
    n = len(labels)
    num_classes = gen.arch.num_classes
    zdim = gen.arch.latent_dim
    rng = np.random.default_rng(config.seed)
    trng = torch.Generator().manual_seed(int(rng.integers(0, 2**31)))

    history = []
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(steps):
            # discriminator step (R1 penalty on reals)
            idx = torch.from_numpy(rng.integers(0, n, size=config.batch_size))
            real = images[idx].clone().requires_grad_(True)
            y_real = labels[idx]
            z = torch.randn(config.batch_size, zdim, generator=trng)
            y_fake = torch.randint(0, num_classes, (config.batch_size,), generator=trng)
            with torch.no_grad():
                fake = gen(z, y_fake, rng=trng)
            d_real = disc(real, y_real)
            d_fake = disc(fake, y_fake)
            loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
            (r1_grad,) = torch.autograd.grad(d_real.sum(), real, create_graph=True)
            r1 = (config.r1_weight / 2.0) * r1_grad.pow(2).sum(dim=(1, 2, 3)).mean()
            opt_d.zero_grad()
            (loss_d + r1).backward()
            opt_d.step()

            # generator step (non-saturating)
            z = torch.randn(config.batch_size, zdim, generator=trng)
            y_fake = torch.randint(0, num_classes, (config.batch_size,), generator=trng)
            loss_g = F.softplus(-disc(gen(z, y_fake, rng=trng), y_fake)).mean()
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            record = {"step": step, "loss_g": float(loss_g.detach()),
                      "loss_d": float(loss_d.detach()), "r1": float(r1.detach())}
            if not all(np.isfinite(v) for v in
                       (record["loss_g"], record["loss_d"], record["r1"])):
                raise DivergenceError(f"non-finite loss at step {step}: {record}")
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            if snapshot_dir and config.snapshot_every and \
                    (step + 1) % config.snapshot_every == 0:
                snap = Path(snapshot_dir)
                snap.mkdir(parents=True, exist_ok=True)
                save_checkpoint(stylegen.tree_with_params(gen_tree, gen),
                                snap / f"gen_{step + 1:06d}.gic")
    finally:
        if log_file:
            log_file.close()

    new_gen = stylegen.tree_with_params(gen_tree, gen)
    new_disc = stylegen.tree_with_params(disc_tree, disc)
    return new_gen, new_disc, history


def default_disc_arch(arch: stylegen.GeneratorArch) -> stylegen.DiscriminatorArch:
    return stylegen.DiscriminatorArch(num_classes=arch.num_classes,
                                      resolution=arch.resolution)


def pretrain(env, arch: stylegen.GeneratorArch, config: GanConfig, log_path=None,
             snapshot_dir=None, disc_arch: stylegen.DiscriminatorArch | None = None):
    """Train a generator/discriminator pair from scratch on one domain."""
    gen_tree = stylegen.init_generator(arch, config.seed)
    disc_tree = stylegen.init_discriminator(disc_arch or default_disc_arch(arch),
                                            config.seed + 1)
    gen_tree, disc_tree, history = _run_adversarial(
        gen_tree, disc_tree, env, config, steps=config.steps,
        log_path=log_path, snapshot_dir=snapshot_dir)
    event = _jsonsafe({"event": "pretrain", "domain": env.name, "steps": config.steps,
                       "seed": config.seed, "config": asdict(config)})
    return gen_tree.with_event(event), disc_tree.with_event(event), history


def finetune_freezed(pretrained_g: ParamTree, pretrained_d: ParamTree, env,
                     config: GanConfig, log_path=None):
    """Fine-tune a pretrained pair on a new domain with frozen lower D blocks."""
    d_arch = stylegen.arch_from_tree(pretrained_d)
    depth = config.freeze_depth if config.freeze_depth is not None else d_arch.blocks // 2
    frozen = stylegen.frozen_entry_names(pretrained_d, depth)
    steps = config.finetune_steps if config.finetune_steps is not None \
        else max(1, config.steps // 4)
    gen_tree, disc_tree, history = _run_adversarial(
        pretrained_g, pretrained_d, env, config, steps=steps,
        frozen_names=frozen, log_path=log_path)
    for name in frozen:
        assert disc_tree[name].tobytes() == pretrained_d[name].tobytes(), \
            f"frozen entry {name} changed during fine-tuning"
    event = {"event": "finetune", "domain": env.name, "steps": steps,
             "freeze_depth": depth, "seed": config.seed}
    return gen_tree.with_event(event), disc_tree.with_event(event), history


def train_all_domains(envs, arch: stylegen.GeneratorArch, config: GanConfig,
                      pretrain_domain: str, log_dir=None,
                      disc_arch: stylegen.DiscriminatorArch | None = None) -> GeneratorBundle:
    """Pretrain on one domain, fine-tune to the rest; returns an aligned bundle."""
    by_name = {env.name: env for env in envs}
    if pretrain_domain not in by_name:
        raise ConfigError(f"pretrain domain {pretrain_domain!r} not among "
                          f"{sorted(by_name)}")
    log_dir = Path(log_dir) if log_dir else None
    if log_dir:
        log_dir.mkdir(parents=True, exist_ok=True)

    def _log(name):
        return (log_dir / f"{name}.jsonl") if log_dir else None

    gen0, disc0, _ = pretrain(by_name[pretrain_domain], arch, config,
                              log_path=_log(f"pretrain_{pretrain_domain}"),
                              disc_arch=disc_arch)
    generators = {pretrain_domain: gen0}
    for name, env in by_name.items():
        if name == pretrain_domain:
            continue
        gen_k, _, _ = finetune_freezed(gen0, disc0, env, config,
                                       log_path=_log(f"finetune_{name}"))
        generators[name] = gen_k
    bundle = GeneratorBundle(domain_names=[e.name for e in envs], generators=generators,
                             pretrain_domain=pretrain_domain,
                             meta={"config": asdict(config), "arch_id": arch.arch_id})
    return bundle


def train_joint(envs, arch: stylegen.GeneratorArch, config: GanConfig, log_path=None,
                disc_arch: stylegen.DiscriminatorArch | None = None):
    """Single GAN on the pooled domains (the mode-collapse-prone baseline)."""
    from types import SimpleNamespace
    pooled = SimpleNamespace(
        name="joint(" + "+".join(e.name for e in envs) + ")",
        images=np.concatenate([np.asarray(e.images) for e in envs]),
        labels=np.concatenate([np.asarray(e.labels) for e in envs]))
    return pretrain(pooled, arch, config, log_path=log_path, disc_arch=disc_arch)
