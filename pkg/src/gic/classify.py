"""Classifier training on real + synthetic data: ERM, Mixup, IRM, REx.

Real environments stay separate inside each step so the invariance penalties
(IRMv1 squared scalar-multiplier gradient; V-REx population variance of
per-environment risks) see per-environment statistics. Synthetic samples join
the cross-entropy term only — they are generator output, not an environment,
so they never enter a penalty. Optimization is plain SGD; the model returned
is the final-epoch one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, EmptyEnv, ShapeError
from .param_space import ParamTree

BACKBONES = ("mlp3", "smallcnn")
ALGORITHMS = ("erm", "mixup", "irm", "rex")


@dataclass
class ClassifierConfig:
    backbone: str = "mlp3"
    epochs: int = 500
    batch_size: int | str = "full"
    lr: float = 0.01
    algorithm: str = "erm"
    penalty_weight: float = 1e4
    penalty_anneal_epoch: int = 190
    mixup_beta: float = 1.0
    syn_real_ratio: float = 1.0
    hidden: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size != "full" and (not isinstance(self.batch_size, int)
                                          or self.batch_size < 1):
            raise ConfigError("batch_size must be 'full' or a positive int")
        if self.mixup_beta <= 0:
            raise ConfigError("mixup_beta must be positive")
        if self.syn_real_ratio < 0:
            raise ConfigError("syn_real_ratio must be nonnegative")


class Mlp3(nn.Module):
    """Three hidden layers on flattened pixels."""

    def __init__(self, input_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.reshape(x.shape[0], -1))


class SmallCnn(nn.Module):
    def __init__(self, num_classes: int, hidden: int = 64):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, hidden, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(hidden, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x.permute(0, 3, 1, 2)).mean(dim=(2, 3))
        return self.head(h)


def _arch_id(fields: dict) -> str:
    return "clf-" + hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:12]


def build_classifier(config: ClassifierConfig, input_shape, num_classes: int,
                     seed: int | None = None) -> ParamTree:
    seed = config.seed if seed is None else seed
    fields = {"backbone": config.backbone, "input_shape": list(input_shape),
              "num_classes": num_classes, "hidden": config.hidden}
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = _new_module(fields)
    entries = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in module.state_dict().items()}
    lineage = [{"event": "init", "seed": int(seed), "kind": "classifier", **fields}]
    return ParamTree(arch_id=_arch_id(fields), entries=entries, lineage=lineage,
                     role="classifier")


def _new_module(fields: dict) -> nn.Module:
    if fields["backbone"] == "mlp3":
        input_dim = int(np.prod(fields["input_shape"]))
        return Mlp3(input_dim, fields["hidden"], fields["num_classes"])
    return SmallCnn(fields["num_classes"], fields["hidden"])


def classifier_module(tree: ParamTree) -> nn.Module:
    init = tree.init_event
    fields = {k: init[k] for k in ("backbone", "input_shape", "num_classes", "hidden")}
    module = _new_module(fields)
    module.load_state_dict({k: torch.from_numpy(np.array(v))
                            for k, v in tree.entries.items()})
    return module


# --- objective pieces


def mixup_batch(x_i, y_i, x_j, y_j, lam: float):
    """Convex combination of inputs and one-hot labels."""
    x_i, y_i, x_j, y_j = (np.asarray(a) for a in (x_i, y_i, x_j, y_j))
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ShapeError(f"mixup shapes differ: {x_i.shape} vs {x_j.shape}, "
                         f"{y_i.shape} vs {y_j.shape}")
    assert 0.0 <= lam <= 1.0, "lambda must be in [0, 1]"
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


def irm_penalty(per_env_logits, per_env_labels):
    """IRMv1: squared gradient of each env's risk w.r.t. a unit logit scale."""
    if len(per_env_logits) == 0:
        raise EmptyEnv("irm penalty needs at least one environment")
    total = None
    for logits, labels in zip(per_env_logits, per_env_labels):
        scale = torch.ones((), dtype=logits.dtype, requires_grad=True)
        risk = F.cross_entropy(logits * scale, labels)
        (grad,) = torch.autograd.grad(risk, scale, create_graph=logits.requires_grad)
        term = grad.pow(2)
        total = term if total is None else total + term
    return total


def rex_penalty(per_env_risks):
    """V-REx: population variance of per-environment risks."""
    assert len(per_env_risks) >= 1, "rex penalty needs at least one risk"
    if not isinstance(per_env_risks, torch.Tensor):
        per_env_risks = torch.stack([torch.as_tensor(r, dtype=torch.float32)
                                     for r in per_env_risks])
    return per_env_risks.var(unbiased=False)


def _soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    return -(target_probs * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def compute_loss(module: nn.Module, real_batches, syn_batch, config: ClassifierConfig,
                 epoch: int, mix_lam: float | None = None, mix_perm=None):
    """Per-step objective over one real batch per environment plus synthetic.

    real_batches: list of (x, y) tensors, one per environment. syn_batch:
    optional (x, y). Returns (loss, cross_entropy, penalty, per_env_logits).
    """
    num_classes = None
    per_env_logits, per_env_labels, per_env_risks = [], [], []
    if config.algorithm == "mixup":
        xs = [x for x, _ in real_batches] + ([syn_batch[0]] if syn_batch else [])
        ys = [y for _, y in real_batches] + ([syn_batch[1]] if syn_batch else [])
        x = torch.cat(xs)
        y = torch.cat(ys)
        logits_probe = module(x[:1])
        num_classes = logits_probe.shape[1]
        onehot = F.one_hot(y, num_classes).float()
        perm = mix_perm if mix_perm is not None else torch.randperm(len(x))
        lam = float(mix_lam) if mix_lam is not None else float(
            np.random.beta(config.mixup_beta, config.mixup_beta))
        x_mixed = lam * x + (1.0 - lam) * x[perm]
        y_mixed = lam * onehot + (1.0 - lam) * onehot[perm]
        ce = _soft_cross_entropy(module(x_mixed), y_mixed)
        penalty = torch.zeros(())
        return ce, ce, penalty, []

    total_ce, total_n = torch.zeros(()), 0
    for x, y in real_batches:
        logits = module(x)
        risk = F.cross_entropy(logits, y)
        per_env_logits.append(logits)
        per_env_labels.append(y)
        per_env_risks.append(risk)
        total_ce = total_ce + risk * len(y)
        total_n += len(y)
    if syn_batch is not None:
        x, y = syn_batch
        total_ce = total_ce + F.cross_entropy(module(x), y) * len(y)
        total_n += len(y)
    ce = total_ce / total_n

    if config.algorithm == "irm":
        penalty = irm_penalty(per_env_logits, per_env_labels)
    elif config.algorithm == "rex":
        penalty = rex_penalty(torch.stack(per_env_risks))
    else:
        # no penalty term, and the anneal schedule below must not touch the loss
        return ce, ce, torch.zeros(()), per_env_logits

    weight = config.penalty_weight if epoch >= config.penalty_anneal_epoch else 1.0
    loss = ce + weight * penalty
    if weight > 1.0:
        # keep the effective learning rate comparable once the penalty dominates
        loss = loss / weight
    return loss, ce, penalty, per_env_logits


def _env_tensors(env):
    x = torch.from_numpy(np.asarray(env.images, dtype=np.float32))
    y = torch.from_numpy(np.asarray(env.labels, dtype=np.int64))
    return x, y


def train(algorithm: str, train_envs, synthetic=None, config: ClassifierConfig | None = None):
    """Train a classifier; returns (ParamTree, per-epoch history list)."""
    config = config or ClassifierConfig()
    config.algorithm = algorithm
    config.validate()
    if algorithm in ("irm", "rex") and len(train_envs) < 2:
        raise ConfigError(f"{algorithm} needs at least two training environments")
    if len(train_envs) == 0:
        raise ConfigError("at least one training environment is required")

    env_data = [_env_tensors(e) for e in train_envs]
    env_names = [e.name for e in train_envs]
    syn_data = _env_tensors(synthetic) if synthetic is not None else None
    num_classes = int(max(int(y.max()) for _, y in env_data)) + 1
    if syn_data is not None:
        num_classes = max(num_classes, int(syn_data[1].max()) + 1)
    input_shape = tuple(env_data[0][0].shape[1:])

    tree = build_classifier(config, input_shape, num_classes)
    module = classifier_module(tree)
    opt = torch.optim.SGD(module.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)

    full = config.batch_size == "full"
    max_n = max(len(y) for _, y in env_data)
    steps_per_epoch = 1 if full else int(np.ceil(max_n / config.batch_size))

    history = []
    for epoch in range(config.epochs):
        epoch_loss = epoch_pen = 0.0
        last_logits = None
        for _ in range(steps_per_epoch):
            if full:
                real_batches = env_data
            else:
                real_batches = []
                for x, y in env_data:
                    idx = torch.from_numpy(
                        rng.integers(0, len(y), size=config.batch_size))
                    real_batches.append((x[idx], y[idx]))
            syn_batch = None
            if syn_data is not None:
                n_real = sum(len(y) for _, y in real_batches)
                m = min(len(syn_data[1]), int(round(config.syn_real_ratio * n_real)))
                if m > 0:
                    idx = torch.from_numpy(
                        rng.choice(len(syn_data[1]), size=m, replace=False))
                    syn_batch = (syn_data[0][idx], syn_data[1][idx])
            mix_lam = None
            if config.algorithm == "mixup":
                mix_lam = float(rng.beta(config.mixup_beta, config.mixup_beta))
            opt.zero_grad()
            loss, ce, penalty, per_env_logits = compute_loss(
                module, real_batches, syn_batch, config, epoch, mix_lam=mix_lam,
                mix_perm=(torch.from_numpy(
                    rng.permutation(sum(len(y) for _, y in real_batches)
                                    + (len(syn_batch[1]) if syn_batch else 0)))
                          if config.algorithm == "mixup" else None))
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            epoch_pen += float(penalty.detach())
            last_logits = per_env_logits

        record = {"epoch": epoch, "loss": epoch_loss / steps_per_epoch,
                  "penalty": epoch_pen / steps_per_epoch}
        if full and last_logits:
            accs = {}
            for name, (x, y), logits in zip(env_names, env_data, last_logits):
                accs[name] = float((logits.detach().argmax(dim=1) == y).float().mean())
            record["train_acc"] = accs
        else:
            with torch.no_grad():
                record["train_acc"] = {
                    name: float((module(x).argmax(dim=1) == y).float().mean())
                    for name, (x, y) in zip(env_names, env_data)}
        history.append(record)

    final = tree.replace_entries(
        {k: v.detach().cpu().numpy().astype(np.float32)
         for k, v in module.state_dict().items()}
    ).with_event({"event": "train", "algorithm": algorithm,
                  "epochs": config.epochs, "envs": env_names,
                  "synthetic": synthetic is not None,
                  "config": {k: v for k, v in asdict(config).items()}})
    return final, history


def evaluate_accuracy(params: ParamTree, env, chunk: int = 2048) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(env.images) == 0:
        raise EmptyEnv(f"environment {getattr(env, 'name', '?')!r} is empty")
    module = classifier_module(params)
    module.eval()
    x_all = np.asarray(env.images, dtype=np.float32)
    y_all = np.asarray(env.labels, dtype=np.int64)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(x_all), chunk):
            x = torch.from_numpy(x_all[start:start + chunk])
            logits = module(x).numpy()
            preds = np.argmax(logits, axis=1)  # first max wins ties
            correct += int((preds == y_all[start:start + chunk]).sum())
    return correct / len(x_all)


def save_history(history, path) -> None:
    with open(path, "w") as f:
        for record in history:
            f.write(json.dumps(record) + "\n")
