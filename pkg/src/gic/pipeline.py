"""Experiment orchestration: configs, run directories, staged pipelines.

A run directory is the unit of reproducibility: the config copy and its hash,
per-stage artifacts (data/, checkpoints/, synthetic/), metrics.jsonl, and a
report/ folder. Stages execute in order and each one is skipped when its
artifact already exists, so interrupted runs resume where they stopped and
deleting a downstream artifact reruns exactly that stage. Per-stage seeds are
hashed from the global seed and the stage name so editing one stage's budget
never perturbs another's randomness.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import classify, envdata, gan_train, metrics, stylegen, synthesis
from .errors import ConfigError, StageError
from .param_space import InterpolationCoefficients, interpolate

STAGES = ("data", "gan", "synthesis", "classifier", "eval")

GEN_PRESETS = {
    "small32": stylegen.GeneratorArch(),
    "tiny8": stylegen.GeneratorArch(latent_dim=8, style_dim=8, mapping_layers=2,
                                    synthesis_blocks=2, channels=(8, 6)),
}
DISC_PRESETS = {
    "small32": stylegen.DiscriminatorArch(),
    "tiny8": stylegen.DiscriminatorArch(blocks=2, channels=(8, 12), resolution=8),
}

_SECTION_KEYS = {
    "data": {"kind", "train_rhos", "test_rho", "size", "resolution", "source",
             "data_dir", "coverage_ratio", "images_per_cell", "view_jitter_deg"},
    "gan": {"arch_preset", "steps", "batch_size", "learning_rate_g",
            "learning_rate_d", "r1_weight", "freeze_depth", "finetune_steps",
            "snapshot_every", "pretrain_domain", "bundle_path"},
    "synthesis": {"count", "coefficient_strategy", "concentration", "fixed_alpha",
                  "grid_step", "mixing_prob", "mixing_classes", "crossover_policy",
                  "crossover_k", "resample_every", "batch_size",
                  "class_distribution"},
    "classifier": {"algorithms", "epochs", "lr", "hidden", "backbone", "batch_size",
                   "syn_real_ratio", "penalty_weight", "penalty_anneal_epoch",
                   "mixup_beta"},
    "eval": {"extractor", "fid_samples", "shift_report"},
}
_TOP_KEYS = {"run_name", "seed"} | set(_SECTION_KEYS)


@dataclass
class ExperimentConfig:
    run_name: str
    seed: int = 0
    data: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "run_name" not in raw or not str(raw["run_name"]).strip():
            raise ConfigError("config needs a run_name")
        for section, allowed in _SECTION_KEYS.items():
            if section not in raw:
                raise ConfigError(f"config is missing the [{section}] section")
            body = raw[section]
            if not isinstance(body, dict):
                raise ConfigError(f"[{section}] must be a mapping")
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
        cfg = cls(run_name=str(raw["run_name"]), seed=int(raw.get("seed", 0)),
                  **{s: dict(raw[s]) for s in _SECTION_KEYS})
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text())
        return cls.from_dict(raw)

    def validate(self) -> None:
        kind = self.data.get("kind", "colored-mnist")
        if kind not in ("colored-mnist", "colored-fashion", "grid"):
            raise ConfigError(f"unknown data kind {kind!r}")
        preset = self.gan.get("arch_preset", "small32")
        if preset not in GEN_PRESETS:
            raise ConfigError(f"unknown arch preset {preset!r}; "
                              f"have {sorted(GEN_PRESETS)}")
        if self.synthesis.get("count", 0) > 0 and self.gan.get("steps", 1) == 0 \
                and not self.gan.get("bundle_path"):
            raise ConfigError("synthesis needs a generator bundle: set gan.steps > 0 "
                              "or gan.bundle_path")
        for algo in self.classifier.get("algorithms", ["erm"]):
            if algo not in ("erm", "mixup", "irm", "rex"):
                raise ConfigError(f"unknown classifier algorithm {algo!r}")
        extractor = self.eval.get("extractor", "identity")
        if extractor not in ("identity", "cnn"):
            raise ConfigError(f"unknown extractor {extractor!r}")

    def to_dict(self) -> dict:
        return {"run_name": self.run_name, "seed": self.seed,
                **{s: getattr(self, s) for s in _SECTION_KEYS}}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_seed(global_seed: int, stage: str) -> int:
    """Decouples stage randomness: editing one stage leaves the others' draws alone."""
    digest = hashlib.sha256(f"{global_seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2 ** 31)


@dataclass
class RunDirectory:
    path: Path
    config: ExperimentConfig
    metrics: list = field(default_factory=list)

    def metric_values(self, metric: str, **match) -> list:
        out = []
        for rec in self.metrics:
            if rec["metric"] != metric:
                continue
            if all(rec["args"].get(k) == v for k, v in match.items()):
                out.append(rec["value"])
        return out


def runs_root(override=None) -> Path:
    return Path(override or os.environ.get("GIC_RUNS_DIR", "runs"))


def _guard(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def _stage_data(config: ExperimentConfig, rd: Path) -> envdata.EnvironmentSet:
    out = rd / "data"
    if (out / "set.json").exists():
        return envdata.load_environment_set(out)
    d = config.data
    seed = stage_seed(config.seed, "data")
    kind = d.get("kind", "colored-mnist")
    if kind == "grid":
        env_set = envdata.build_holdout_grid(
            coverage_ratio=float(d.get("coverage_ratio", 1.0)),
            seed=seed,
            images_per_cell=int(d.get("images_per_cell", 100)),
            resolution=int(d.get("resolution", 32)),
            source=d.get("source", "synthetic"),
            data_dir=d.get("data_dir"),
            view_jitter_deg=float(d.get("view_jitter_deg", 8.0)))
    else:
        base = "mnist" if kind == "colored-mnist" else "fashion-mnist"
        env_set = envdata.build_environment_set(
            train_rhos=[float(r) for r in d.get("train_rhos", (0.9, 0.8))],
            test_rho=float(d.get("test_rho", 0.1)),
            sizes=d.get("size", 10000),
            seed=seed,
            base_dataset=base,
            resolution=int(d.get("resolution", 32)),
            source=d.get("source", "synthetic"),
            data_dir=d.get("data_dir"))
    envdata.save_environment_set(env_set, out)
    return env_set


def _stage_gan(config: ExperimentConfig, rd: Path, env_set) -> gan_train.GeneratorBundle | None:
    g = config.gan
    if g.get("bundle_path"):
        return gan_train.GeneratorBundle.load(g["bundle_path"])
    if int(g.get("steps", 0)) == 0:
        return None
    out = rd / "checkpoints" / "bundle"
    if (out / "bundle.json").exists():
        return gan_train.GeneratorBundle.load(out)
    preset = g.get("arch_preset", "small32")
    train_envs = env_set.by_role("train")
    pretrain_domain = g.get("pretrain_domain") or train_envs[0].name
    gconf = gan_train.GanConfig(
        steps=int(g.get("steps", 3000)),
        batch_size=int(g.get("batch_size", 32)),
        learning_rate_g=float(g.get("learning_rate_g", 0.0025)),
        learning_rate_d=float(g.get("learning_rate_d", 0.0025)),
        r1_weight=float(g.get("r1_weight", 1.0)),
        freeze_depth=g.get("freeze_depth"),
        finetune_steps=g.get("finetune_steps"),
        snapshot_every=int(g.get("snapshot_every", 0)),
        seed=stage_seed(config.seed, "gan"))
    bundle = gan_train.train_all_domains(
        train_envs, GEN_PRESETS[preset], gconf, pretrain_domain=pretrain_domain,
        log_dir=rd / "checkpoints" / "loss", disc_arch=DISC_PRESETS[preset])
    bundle.save(out)
    return bundle


def _synthesis_spec(config: ExperimentConfig) -> synthesis.SynthesisSpec:
    s = config.synthesis
    return synthesis.SynthesisSpec(
        coefficient_strategy=s.get("coefficient_strategy", "dirichlet"),
        fixed_alpha=tuple(s["fixed_alpha"]) if s.get("fixed_alpha") else None,
        concentration=float(s.get("concentration", 1.0)),
        grid_step=float(s.get("grid_step", 0.5)),
        resample_every=s.get("resample_every", "batch"),
        mixing_prob=float(s.get("mixing_prob", 0.5)),
        mixing_classes=s.get("mixing_classes", "cross"),
        crossover_policy=s.get("crossover_policy", "uniform"),
        crossover_k=s.get("crossover_k"),
        class_distribution=tuple(s["class_distribution"])
        if s.get("class_distribution") else None,
        count=int(s.get("count", 0)),
        seed=stage_seed(config.seed, "synthesis"),
        batch_size=int(s.get("batch_size", 64)))


def _stage_synthesis(config: ExperimentConfig, rd: Path, bundle):
    if int(config.synthesis.get("count", 0)) == 0:
        return None
    out = rd / "synthetic"
    if (out / "meta.json").exists():
        return synthesis.load_synthetic(out)
    assert bundle is not None  # validate() guarantees a bundle when count > 0
    return synthesis.materialize_dataset(bundle, _synthesis_spec(config), out_dir=out)


def _classifier_config(config: ExperimentConfig, algorithm: str) -> classify.ClassifierConfig:
    c = config.classifier
    return classify.ClassifierConfig(
        backbone=c.get("backbone", "mlp3"),
        epochs=int(c.get("epochs", 500)),
        batch_size=c.get("batch_size", "full"),
        lr=float(c.get("lr", 0.01)),
        algorithm=algorithm,
        penalty_weight=float(c.get("penalty_weight", 1e4)),
        penalty_anneal_epoch=int(c.get("penalty_anneal_epoch", 190)),
        mixup_beta=float(c.get("mixup_beta", 1.0)),
        syn_real_ratio=float(c.get("syn_real_ratio", 1.0)),
        hidden=int(c.get("hidden", 256)),
        seed=stage_seed(config.seed, "classifier"))


def _stage_classifier(config: ExperimentConfig, rd: Path, env_set, syn) -> dict:
    from .param_space import load_checkpoint, save_checkpoint
    out = rd / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    trained = {}
    for algo in config.classifier.get("algorithms", ["erm"]):
        ckpt = out / f"clf_{algo}.gic"
        if ckpt.exists():
            trained[algo] = load_checkpoint(ckpt)
            continue
        tree, history = classify.train(algo, env_set.by_role("train"), synthetic=syn,
                                       config=_classifier_config(config, algo))
        save_checkpoint(tree, ckpt)
        classify.save_history(history, out / f"clf_{algo}_history.jsonl")
        trained[algo] = tree
    return trained


def _stage_eval(config: ExperimentConfig, rd: Path, env_set, syn, classifiers) -> list:
    seed = stage_seed(config.seed, "eval")
    records = []

    def rec(metric, args, value, n, extractor_id=None):
        records.append({"run_id": config.run_name, "metric": metric, "args": args,
                        "value": value, "n": int(n), "extractor_id": extractor_id,
                        "seed": seed})

    all_envs = env_set.by_role("train") + env_set.by_role("test")
    for algo, tree in sorted(classifiers.items()):
        for env in all_envs:
            acc = classify.evaluate_accuracy(tree, env)
            rec("accuracy", {"algorithm": algo, "env": env.name}, acc, len(env.labels))

    if syn is not None and config.eval.get("shift_report", True):
        extractor = metrics.IdentityExtractor()
        if config.eval.get("extractor", "identity") == "cnn":
            extractor = metrics.train_feature_extractor(env_set.by_role("train"),
                                                        seed=seed)
        cap = int(config.eval.get("fid_samples", 5000))
        pool = synthesis.SyntheticDataset(
            images=syn.images[:cap], labels=syn.labels[:cap],
            provenance=syn.provenance[:cap], meta=syn.meta)
        report = metrics.shift_report(pool, env_set.by_role("train"),
                                      env_set.by_role("test")[0], extractor=extractor)
        report.save(rd / "report" / "shift_report.json")
        for name, v in report.values["kl"].items():
            rec("kl", {"against": name}, v, len(pool.images),
                report.provenance["extractor_id"])
        for name, v in report.values["fid"].items():
            rec("fid", {"against": name}, v, len(pool.images),
                report.provenance["extractor_id"])
        rec("syn_closer_to_test", {}, bool(report.values["syn_closer_to_test"]),
            len(pool.images), report.provenance["extractor_id"])

    with open(rd / "metrics.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    _write_report(rd, records)
    return records


def _write_report(rd: Path, records: list) -> None:
    report = rd / "report"
    report.mkdir(parents=True, exist_ok=True)
    with open(report / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "args", "value", "n", "extractor_id"])
        for r in records:
            writer.writerow([r["metric"], json.dumps(r["args"], sort_keys=True),
                             r["value"], r["n"], r["extractor_id"]])


def run_pipeline(config: ExperimentConfig, runs_dir=None, until: str = "eval") -> RunDirectory:
    """Execute (or resume) the staged pipeline inside its run directory."""
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; stages are {STAGES}")
    rd = runs_root(runs_dir) / config.run_name
    rd.mkdir(parents=True, exist_ok=True)
    run_info = rd / "run.json"
    if run_info.exists():
        recorded = json.loads(run_info.read_text())
        if recorded["config_hash"] != config.config_hash:
            raise ConfigError(
                f"run directory {rd} holds a different config "
                f"({recorded['config_hash']} != {config.config_hash}); "
                "pick a new run_name or delete the directory")
    else:
        run_info.write_text(json.dumps({
            "run_id": config.run_name, "config_hash": config.config_hash,
            "stage_seeds": {s: stage_seed(config.seed, s) for s in STAGES}},
            indent=2))
    (rd / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    (rd / "report").mkdir(exist_ok=True)

    last = STAGES.index(until)
    env_set = _guard("data", _stage_data, config, rd)
    bundle = syn = None
    classifiers = {}
    records = []
    if last >= 1:
        bundle = _guard("gan", _stage_gan, config, rd, env_set)
    if last >= 2:
        syn = _guard("synthesis", _stage_synthesis, config, rd, bundle)
    if last >= 3:
        classifiers = _guard("classifier", _stage_classifier, config, rd, env_set, syn)
    if last >= 4:
        records = _guard("eval", _stage_eval, config, rd, env_set, syn, classifiers)
    return RunDirectory(path=rd, config=config, metrics=records)


# --- qualitative sample grids


def _tile(images: np.ndarray) -> np.ndarray:
    """[rows, cols, H, W, 3] in [0,1] -> one uint8 canvas."""
    rows, cols, h, w, _ = images.shape
    canvas = images.transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, 3)
    return (np.clip(canvas, 0.0, 1.0) * 255).round().astype(np.uint8)


def sample_grid(bundle, n: int, out_image, seed: int = 0,
                alpha_sweep: bool = False) -> Path:
    """Deterministic n x n PNG. Rows cycle classes; columns are fresh samples.

    In alpha_sweep mode (two-member bundles) each row holds one fixed latent
    rendered at n blend coefficients from the first endpoint to the second,
    so the leftmost/rightmost columns show the pure generators.
    """
    from PIL import Image
    members = bundle.members()
    arch = stylegen.arch_from_tree(members[0])
    rng = np.random.default_rng(seed)
    rows = []
    if alpha_sweep:
        if len(members) != 2:
            raise ConfigError("alpha sweep needs a two-member bundle")
        ts = np.linspace(0.0, 1.0, n)
        trees = [interpolate(members, InterpolationCoefficients(
            values=(1.0 - float(t), float(t)))) for t in ts]
        modules = [stylegen.module_from_tree(t) for t in trees]
        for r in range(n):
            z = rng.standard_normal(arch.latent_dim).astype(np.float32)
            c = r % arch.num_classes
            noise_seed = int(rng.integers(0, 2 ** 31))
            row = []
            for module in modules:
                codes = stylegen.map_latent(z, c, module)
                img = stylegen.synthesize(codes, module, noise_seed=noise_seed)
                row.append((img + 1.0) / 2.0)
            rows.append(row)
    else:
        spec = synthesis.SynthesisSpec(count=n * n, seed=seed, batch_size=n)
        for r in range(n):
            imgs, _, _ = synthesis.synth_batch(
                bundle, spec, n, rng,
                sampler=synthesis.CoefficientSampler(spec, len(members)))
            rows.append(list(imgs))
    canvas = _tile(np.asarray(rows, dtype=np.float32))
    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_image)
    return out_image


# --- ablation grids


_ABLATION_AXES = ("syn_count", "components", "coverage_ratio", "algorithm")
_DEFAULT_AXIS_VALUES = {
    "syn_count": (0, 1000, 10000, 25000),
    "components": ("base", "interp", "interp_mix"),
    "coverage_ratio": (1 / 3, 2 / 3, 1.0),
    "algorithm": ("erm", "mixup", "irm", "rex"),
}


def _cell_config(config: ExperimentConfig, axis: str, value, seed: int,
                 bundle_path=None) -> ExperimentConfig:
    raw = json.loads(json.dumps(config.to_dict()))  # deep copy
    raw["seed"] = seed
    if bundle_path is not None:
        raw["gan"]["bundle_path"] = str(bundle_path)
        raw["gan"]["steps"] = 0
    if axis == "syn_count":
        raw["synthesis"]["count"] = int(value)
        tag = str(int(value))
    elif axis == "components":
        if value == "base":
            raw["synthesis"]["coefficient_strategy"] = "one_hot_cycle"
            raw["synthesis"]["mixing_prob"] = 0.0
        elif value == "interp":
            raw["synthesis"]["coefficient_strategy"] = "dirichlet"
            raw["synthesis"]["mixing_prob"] = 0.0
        elif value == "interp_mix":
            raw["synthesis"]["coefficient_strategy"] = "dirichlet"
            raw["synthesis"]["mixing_prob"] = 0.5
        else:
            raise ConfigError(f"unknown component cell {value!r}")
        tag = str(value)
    elif axis == "coverage_ratio":
        raw["data"]["coverage_ratio"] = float(value)
        tag = f"{float(value):.3f}".replace(".", "p")
    elif axis == "algorithm":
        raw["classifier"]["algorithms"] = [str(value)]
        tag = str(value)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; have {_ABLATION_AXES}")
    raw["run_name"] = f"{config.run_name}-{axis}-{tag}-s{seed}"
    return ExperimentConfig.from_dict(raw)


def run_ablation(config: ExperimentConfig, axis: str, values=None, seeds=(0, 1, 2),
                 runs_dir=None) -> list:
    """Run the axis grid, write CSV + plot, return the per-cell rows.

    GAN training is shared: each seed trains one bundle (when the axis varies
    only post-GAN settings) and every cell of that seed reuses it.
    """
    if axis not in _ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; have {_ABLATION_AXES}")
    values = list(values if values is not None else _DEFAULT_AXIS_VALUES[axis])
    needs_gan = axis != "coverage_ratio" and not (
        axis == "syn_count" and all(int(v) == 0 for v in values))
    rows = []
    for seed in seeds:
        bundle_path = config.gan.get("bundle_path")
        if needs_gan and not bundle_path and int(config.gan.get("steps", 0)) > 0:
            base_raw = json.loads(json.dumps(config.to_dict()))
            base_raw["seed"] = seed
            base_raw["run_name"] = f"{config.run_name}-{axis}-base-s{seed}"
            base = run_pipeline(ExperimentConfig.from_dict(base_raw),
                                runs_dir=runs_dir, until="gan")
            bundle_path = base.path / "checkpoints" / "bundle"
        for value in values:
            cell = _cell_config(config, axis, value, seed, bundle_path=bundle_path)
            run = run_pipeline(cell, runs_dir=runs_dir)
            for algo in cell.classifier.get("algorithms", ["erm"]):
                test_envs = [r["args"]["env"] for r in run.metrics
                             if r["metric"] == "accuracy"
                             and r["args"]["algorithm"] == algo
                             and r["args"]["env"].startswith("test")]
                for env_name in test_envs:
                    (acc,) = run.metric_values("accuracy", algorithm=algo,
                                               env=env_name)
                    rows.append({"axis": axis, "value": value, "seed": seed,
                                 "algorithm": algo, "env": env_name,
                                 "accuracy": acc, "run": str(run.path)})
    report_dir = runs_root(runs_dir) / config.run_name / "report"
    write_ablation_report(rows, axis, report_dir)
    return rows


def aggregate_rows(rows: list) -> list:
    """Mean/std/median accuracy per (value, algorithm) cell across seeds."""
    cells = {}
    for r in rows:
        cells.setdefault((r["value"], r["algorithm"]), []).append(r["accuracy"])
    out = []
    for (value, algo), accs in sorted(cells.items(), key=lambda kv: str(kv[0])):
        arr = np.asarray(accs, dtype=np.float64)
        out.append({"value": value, "algorithm": algo, "mean": float(arr.mean()),
                    "std": float(arr.std()), "median": float(np.median(arr)),
                    "n_seeds": len(accs)})
    return out


def write_ablation_report(rows: list, axis: str, report_dir) -> Path:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate_rows(rows)
    csv_path = report_dir / f"ablation_{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "algorithm", "mean", "std",
                                                "median", "n_seeds"])
        writer.writeheader()
        writer.writerows(agg)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    algos = sorted({a["algorithm"] for a in agg})
    for algo in algos:
        pts = [a for a in agg if a["algorithm"] == algo]
        xs = list(range(len(pts)))
        ax.errorbar(xs, [p["mean"] for p in pts], yerr=[p["std"] for p in pts],
                    marker="o", capsize=3, label=algo)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(p["value"]) for p in pts])
    ax.set_xlabel(axis)
    ax.set_ylabel("held-out accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(report_dir / f"ablation_{axis}.png", dpi=120)
    plt.close(fig)
    return csv_path
