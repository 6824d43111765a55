"""Synthetic-data quality and distribution-shift metrics.

FID over a pluggable feature extractor (identity features for oracle tests, a
small CNN trained once on the pooled real training environments as the
practical default), attribute histograms over palette colors, smoothed KL
divergence, and a shift report that compares a synthetic pool against each
source/test environment.

Color-label association is measured on matching-offset histograms: bin k
counts samples whose attribute sits k palette steps (mod 10) from the color
mapped to their label. Pooled color marginals are uniform for every balanced
environment regardless of bias, so raw 10-color histograms cannot see the
shift; offsets can (bin 0 mass = the environment's bias coefficient).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import envdata
from .errors import AllBlank, DimensionMismatch, TooFewSamples
from .param_space import ParamTree


# --- feature extractors


class IdentityExtractor:
    """Flattened pixels as features; the oracle-friendly extractor."""

    extractor_id = "identity"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        return images.reshape(len(images), -1).astype(np.float64)


class FeatureNet(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(64, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class CnnExtractor:
    """Frozen trained CNN; features are the 64-d pooled penultimate layer."""

    def __init__(self, net: FeatureNet):
        self.net = net.eval()
        blob = b"".join(v.detach().cpu().numpy().astype(np.float32).tobytes()
                        for _, v in sorted(net.state_dict().items()))
        self.extractor_id = "cnn-" + hashlib.sha256(blob).hexdigest()[:12]

    def __call__(self, images: np.ndarray, chunk: int = 512) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = []
        with torch.no_grad():
            for start in range(0, len(images), chunk):
                x = torch.from_numpy(images[start:start + chunk]).permute(0, 3, 1, 2)
                out.append(self.net.features(x).numpy())
        return np.concatenate(out).astype(np.float64)

    def to_tree(self) -> ParamTree:
        entries = {k: v.detach().cpu().numpy().astype(np.float32)
                   for k, v in self.net.state_dict().items()}
        lineage = [{"event": "init", "seed": 0, "kind": "feature_extractor",
                    "num_classes": self.net.head.out_features}]
        return ParamTree(arch_id="featnet", entries=entries, lineage=lineage,
                         role="classifier")

    @classmethod
    def from_tree(cls, tree: ParamTree) -> "CnnExtractor":
        net = FeatureNet(num_classes=tree.init_event.get("num_classes", 10))
        net.load_state_dict({k: torch.from_numpy(np.array(v))
                             for k, v in tree.entries.items()})
        return cls(net)


def train_feature_extractor(train_envs, seed: int = 0, epochs: int = 2,
                            batch_size: int = 128, lr: float = 1e-3) -> CnnExtractor:
    """Fit the default FID feature CNN on the pooled training environments."""
    images = np.concatenate([np.asarray(e.images, dtype=np.float32) for e in train_envs])
    labels = np.concatenate([np.asarray(e.labels, dtype=np.int64) for e in train_envs])
    torch.manual_seed(seed)
    net = FeatureNet(num_classes=int(labels.max()) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x = torch.from_numpy(images[idx]).permute(0, 3, 1, 2)
            y = torch.from_numpy(labels[idx])
            opt.zero_grad()
            F.cross_entropy(net(x), y).backward()
            opt.step()
    return CnnExtractor(net)


# --- feature statistics and FID


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    extractor_id: str

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        assert self.mu.ndim == 1 and self.sigma.shape == (len(self.mu), len(self.mu))
        assert np.allclose(self.sigma, self.sigma.T, atol=1e-8), "sigma must be symmetric"
        assert self.n >= 2


def feature_stats(images: np.ndarray, extractor) -> FeatureStats:
    n = len(images)
    if n < 2:
        raise TooFewSamples(f"need at least 2 images for feature stats, got {n}")
    feats = np.asarray(extractor(images), dtype=np.float64)
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma) + 1e-6 * np.eye(feats.shape[1])
    return FeatureStats(mu=mu, sigma=sigma, n=n, extractor_id=extractor.extractor_id)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))."""
    if a.extractor_id != b.extractor_id:
        raise DimensionMismatch(
            f"stats from different extractors: {a.extractor_id} vs {b.extractor_id}")
    if len(a.mu) != len(b.mu):
        raise DimensionMismatch(f"feature dims differ: {len(a.mu)} vs {len(b.mu)}")
    half = _psd_sqrt(a.sigma)
    inner = half @ b.sigma @ half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(value, 0.0)


# --- attribute histograms and KL


@dataclass
class AttributeHistogram:
    probs: np.ndarray
    n: int
    n_blank: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        assert self.probs.ndim == 1
        assert np.all(self.probs >= 0)
        assert abs(self.probs.sum() - 1.0) <= 1e-9, "histogram must sum to 1"


def _hist_from_attrs(attrs: np.ndarray, bins: int = 10) -> AttributeHistogram:
    attrs = np.asarray(attrs)
    blank = int((attrs < 0).sum())
    valid = attrs[attrs >= 0]
    if len(valid) == 0:
        raise AllBlank("every image in the batch is blank")
    counts = np.bincount(valid, minlength=bins).astype(np.float64)
    return AttributeHistogram(probs=counts / counts.sum(), n=int(len(valid)), n_blank=blank)


def attribute_histogram(images: np.ndarray | None = None,
                        attributes: np.ndarray | None = None) -> AttributeHistogram:
    """Normalized palette-color counts; blank images excluded but tallied."""
    if attributes is None:
        if images is None:
            raise ValueError("provide images or attributes")
        attributes = envdata.attributes_of(images)
    return _hist_from_attrs(attributes)


def offset_histogram(attributes: np.ndarray, labels: np.ndarray,
                     digit_to_color=envdata.IDENTITY_MAPPING) -> AttributeHistogram:
    """Histogram of (attribute - mapped color) mod 10; bin 0 = matching rate."""
    attributes = np.asarray(attributes)
    labels = np.asarray(labels)
    mapping = np.asarray(digit_to_color, dtype=np.int64)
    keep = attributes >= 0
    offsets = np.where(keep, (attributes - mapping[labels]) % 10, -1)
    return _hist_from_attrs(offsets)


def kl_divergence(p: AttributeHistogram, q: AttributeHistogram, eps: float = 1e-6) -> float:
    """KL(p||q) with additive-epsilon smoothing renormalized on both sides."""
    if len(p.probs) != len(q.probs):
        raise DimensionMismatch(f"histogram sizes differ: {len(p.probs)} vs {len(q.probs)}")
    ps = (p.probs + eps) / (p.probs + eps).sum()
    qs = (q.probs + eps) / (q.probs + eps).sum()
    return float(np.sum(ps * np.log(ps / qs)))


# --- shift report


@dataclass
class MetricsRecord:
    kind: str
    values: dict
    provenance: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"kind": self.kind, "values": self.values, "provenance": self.provenance},
            indent=2, default=float))

    @classmethod
    def load(cls, path) -> "MetricsRecord":
        raw = json.loads(Path(path).read_text())
        return cls(kind=raw["kind"], values=raw["values"],
                   provenance=raw.get("provenance", {}))


def _measured_attributes(ds) -> np.ndarray:
    attrs = getattr(ds, "attributes", None)
    if attrs is not None:
        return np.asarray(attrs)
    return envdata.attributes_of(np.asarray(ds.images))


def shift_report(syn, train_envs, test_env, extractor=None,
                 digit_to_color=envdata.IDENTITY_MAPPING) -> MetricsRecord:
    """Compare a synthetic pool against each environment.

    Emits, per environment, the KL divergence between matching-offset
    histograms and the FID between feature statistics, plus the headline
    boolean: is the synthetic pool closer (in KL) to the test environment
    than to the most-biased training environment?
    """
    extractor = extractor or IdentityExtractor()
    syn_attrs = envdata.attributes_of(np.asarray(syn.images))
    syn_hist = offset_histogram(syn_attrs, np.asarray(syn.labels), digit_to_color)
    syn_stats = feature_stats(np.asarray(syn.images), extractor)

    envs = list(train_envs) + [test_env]
    kl_to, fid_to, hists = {}, {}, {"syn": syn_hist.probs.tolist()}
    for env in envs:
        hist = offset_histogram(_measured_attributes(env), np.asarray(env.labels),
                                digit_to_color)
        kl_to[env.name] = kl_divergence(syn_hist, hist)
        fid_to[env.name] = fid(syn_stats, feature_stats(np.asarray(env.images), extractor))
        hists[env.name] = hist.probs.tolist()

    rho_max_env = max(train_envs, key=lambda e: (e.rho if e.rho is not None else -1))
    direction = kl_to[test_env.name] < kl_to[rho_max_env.name]
    values = {
        "kl": kl_to,
        "fid": fid_to,
        "syn_closer_to_test": bool(direction),
        "histograms": hists,
        "syn_matching_rate": float(syn_hist.probs[0]),
        "syn_blank": int((syn_attrs < 0).sum()),
    }
    provenance = {
        "extractor_id": extractor.extractor_id,
        "n_syn": int(len(syn.images)),
        "train_envs": [e.name for e in train_envs],
        "test_env": test_env.name,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    return MetricsRecord(kind="shift_report", values=values, provenance=provenance)
