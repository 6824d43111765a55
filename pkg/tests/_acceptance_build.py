"""Build the cached artifacts the acceptance suite asserts against.

Everything expensive (GAN training, synthetic pools, the classifier sweeps)
lands under tests/_acceptance_cache/ keyed by file existence, so interrupted
builds resume where they left off and reruns are cheap. The final step writes
manifest.json, which is what tests/test_acceptance.py reads.

Run directly:  python3 tests/_acceptance_build.py
"""
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from gic.classify import ClassifierConfig, evaluate_accuracy, train
from gic.envdata import (
    EnvironmentSpec,
    attributes_of,
    build_colored,
    build_environment_set,
    build_holdout_grid,
    load_environment,
    load_environment_set,
    save_environment,
    save_environment_set,
)
from gic.gan_train import GanConfig, GeneratorBundle, finetune_freezed, pretrain, train_joint
from gic.metrics import IdentityExtractor, feature_stats, fid, offset_histogram
from gic.param_space import load_checkpoint, save_checkpoint
from gic.stylegen import GeneratorArch
from gic.synthesis import SyntheticDataset, SynthesisSpec, load_synthetic, materialize_dataset

CACHE = Path(__file__).resolve().parent / "_acceptance_cache"

# Shared data: two biased training environments and a reversed-bias test one.
ENV_SEED = 100
TRAIN_RHOS = (0.9, 0.8)
TEST_RHO = 0.1
ENV_SIZES = (5000, 5000, 10000)

# Generator training: pretrain on the rho=0.9 domain, fine-tune to rho=0.8.
GAN_SEED = 7
GAN = GanConfig(steps=4000, batch_size=32, finetune_steps=1000, seed=GAN_SEED)
ARCH = GeneratorArch()

# Synthetic pools. The 25k mixed pool doubles as the 1k/10k pools by prefix
# slicing (batches are i.i.d. draws, so a prefix is a sample of the same spec).
POOLS = {
    "mix25k": SynthesisSpec(count=25000, coefficient_strategy="dirichlet",
                            mixing_prob=0.5, seed=11, batch_size=256),
    "onehot10k": SynthesisSpec(count=10000, coefficient_strategy="one_hot_cycle",
                               mixing_prob=0.0, seed=13, batch_size=256),
    "interp10k": SynthesisSpec(count=10000, coefficient_strategy="dirichlet",
                               mixing_prob=0.0, seed=17, batch_size=256),
}

# Classifier protocol for the trend criteria. The stock lr=0.01 does not move
# full-batch SGD off chance at this scale, so the sweeps run at 0.1.
CLF_LR = 0.1
CLF_EPOCHS = 500
SEEDS = (0, 1, 2)
SYN_COUNTS = (0, 1000, 10000, 25000)

# Coverage-ratio grid runs.
GRID_RATIOS = ((1, 3), (2, 3), (1, 1))  # as fractions, keys "1/3" etc.
GRID_IMAGES_PER_CELL = 120

# Fine-tune-vs-joint FID: a second domain with a rotated color assignment so
# the two domains are visually distinct.
SHIFTED_MAPPING = tuple((d + 5) % 10 for d in range(10))
FID_SAMPLES = 5000


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def get_envs():
    path = CACHE / "envs"
    if not (path / "set.json").exists():
        log("building environment set")
        env_set = build_environment_set(TRAIN_RHOS, TEST_RHO, ENV_SIZES, seed=ENV_SEED)
        save_environment_set(env_set, path)
    return load_environment_set(path)


def get_pretrained_pair(env_a):
    gen_p, disc_p = CACHE / "gan" / "pretrain_gen.gic", CACHE / "gan" / "pretrain_disc.gic"
    if not (gen_p.exists() and disc_p.exists()):
        gen_p.parent.mkdir(parents=True, exist_ok=True)
        log(f"pretraining {GAN.steps} steps on {env_a.name}")
        t0 = time.time()
        gen, disc, _ = pretrain(env_a, ARCH, GAN,
                                log_path=CACHE / "gan" / "pretrain_loss.jsonl")
        save_checkpoint(gen, gen_p)
        save_checkpoint(disc, disc_p)
        log(f"pretrain done in {time.time() - t0:.0f}s")
    return load_checkpoint(gen_p), load_checkpoint(disc_p)


def get_bundle(env_set):
    path = CACHE / "gan" / "bundle"
    if not (path / "bundle.json").exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        trains = env_set.by_role("train")
        gen_a, disc_a = get_pretrained_pair(trains[0])
        log(f"fine-tuning {GAN.finetune_steps} steps on {trains[1].name}")
        t0 = time.time()
        gen_b, _, _ = finetune_freezed(gen_a, disc_a, trains[1], GAN,
                                       log_path=CACHE / "gan" / "finetune_loss.jsonl")
        log(f"fine-tune done in {time.time() - t0:.0f}s")
        bundle = GeneratorBundle(
            domain_names=[trains[0].name, trains[1].name],
            generators={trains[0].name: gen_a, trains[1].name: gen_b},
            pretrain_domain=trains[0].name)
        bundle.save(path)
    return GeneratorBundle.load(path)


def get_pool(name, bundle):
    path = CACHE / "pools" / name
    if not (path / "meta.json").exists():
        log(f"materializing pool {name} ({POOLS[name].count} samples)")
        t0 = time.time()
        materialize_dataset(bundle, POOLS[name], out_dir=path)
        log(f"pool {name} done in {time.time() - t0:.0f}s")
    return load_synthetic(path)


def pool_slice(pool, count):
    assert count <= len(pool.images), f"pool holds {len(pool.images)} < {count}"
    return SyntheticDataset(images=pool.images[:count], labels=pool.labels[:count],
                            provenance=pool.provenance[:count],
                            meta=dict(pool.meta, slice=count))


def classifier_row(key, train_envs, synthetic, seed, test_env):
    """Train one ERM classifier and cache its accuracies as a JSON row."""
    row_path = CACHE / "cls" / f"{key}.json"
    if row_path.exists():
        return json.loads(row_path.read_text())
    t0 = time.time()
    cfg = ClassifierConfig(lr=CLF_LR, epochs=CLF_EPOCHS, seed=seed)
    tree, history = train("erm", train_envs, synthetic=synthetic, config=cfg)
    row = {
        "key": key,
        "seed": seed,
        "test_acc": evaluate_accuracy(tree, test_env),
        "train_acc": {e.name: evaluate_accuracy(tree, e) for e in train_envs},
        "final_loss": history[-1]["loss"],
        "seconds": round(time.time() - t0, 1),
    }
    row_path.parent.mkdir(parents=True, exist_ok=True)
    row_path.write_text(json.dumps(row, indent=2))
    log(f"{key}: test_acc={row['test_acc']:.4f} [{row['seconds']}s]")
    return row


def pool_stats(ds):
    hist = offset_histogram(attributes_of(ds.images), ds.labels)
    return {"matching_rate": float(hist.probs[0]), "n_blank": hist.n_blank,
            "offsets": [float(p) for p in hist.probs]}


def build_quantity_and_component_rows(env_set, pools):
    trains = env_set.by_role("train")
    test = env_set.by_role("test")[0]
    c6 = {}
    for count in SYN_COUNTS:
        c6[str(count)] = {}
        for seed in SEEDS:
            syn = pool_slice(pools["mix25k"], count) if count else None
            row = classifier_row(f"c6_n{count}_s{seed}", trains, syn, seed, test)
            c6[str(count)][str(seed)] = row["test_acc"]
    c8 = {"base": {}, "interp": {}, "interp_mix": {}}
    mix_count = POOLS["onehot10k"].count  # mixing cell reuses the matching c6 column
    assert str(mix_count) in c6, f"c6 has no {mix_count}-sample column to reuse"
    for seed in SEEDS:
        row = classifier_row(f"c8_base_s{seed}", trains, pools["onehot10k"], seed, test)
        c8["base"][str(seed)] = row["test_acc"]
        row = classifier_row(f"c8_interp_s{seed}", trains, pools["interp10k"], seed, test)
        c8["interp"][str(seed)] = row["test_acc"]
        c8["interp_mix"][str(seed)] = c6[str(mix_count)][str(seed)]
    return c6, c8


def build_coverage_rows():
    c9 = {}
    for num, den in GRID_RATIOS:
        key = f"{num}/{den}"
        c9[key] = {}
        for seed in SEEDS:
            row_key = f"c9_r{num}of{den}_s{seed}"
            row_path = CACHE / "cls" / f"{row_key}.json"
            if row_path.exists():
                c9[key][str(seed)] = json.loads(row_path.read_text())["test_acc"]
                continue
            grid = build_holdout_grid(coverage_ratio=num / den, seed=1000 + seed,
                                      images_per_cell=GRID_IMAGES_PER_CELL)
            row = classifier_row(row_key, grid.by_role("train"), None, seed,
                                 grid.by_role("test")[0])
            c9[key][str(seed)] = row["test_acc"]
    return c9


def single_domain_samples(tree, domain, count, seed):
    bundle = GeneratorBundle(domain_names=[domain], generators={domain: tree},
                             pretrain_domain=domain)
    spec = SynthesisSpec(count=count, coefficient_strategy="fixed", fixed_alpha=(1.0,),
                         mixing_prob=0.0, seed=seed, batch_size=256)
    return materialize_dataset(bundle, spec)


def build_fid_direction(env_set):
    """FID(fine-tuned gen, target B) vs FID(joint gen, target B)."""
    out_path = CACHE / "c10" / "fids.json"
    if out_path.exists():
        return json.loads(out_path.read_text())
    out_path.parent.mkdir(parents=True, exist_ok=True)
    env_a = env_set.by_role("train")[0]
    env_b_dir = CACHE / "c10" / "env_b"
    if not (env_b_dir / "meta.json").exists():
        log("building shifted-mapping target domain")
        env_b = build_colored(
            EnvironmentSpec(rho=0.9, size=ENV_SIZES[0], seed=300,
                            digit_to_color=SHIFTED_MAPPING),
            name="domainB_shift5")
        save_environment(env_b, env_b_dir)
    env_b = load_environment(env_b_dir)

    ft_path = CACHE / "c10" / "gen_b_finetuned.gic"
    if not ft_path.exists():
        gen_a, disc_a = get_pretrained_pair(env_a)
        log(f"fine-tuning {GAN.finetune_steps} steps onto {env_b.name}")
        gen_b, _, _ = finetune_freezed(gen_a, disc_a, env_b, GAN,
                                       log_path=CACHE / "c10" / "finetune_loss.jsonl")
        save_checkpoint(gen_b, ft_path)
    joint_path = CACHE / "c10" / "gen_joint.gic"
    if not joint_path.exists():
        log(f"joint-training {GAN.steps} steps on pooled domains")
        t0 = time.time()
        gen_j, _, _ = train_joint([env_a, env_b], ARCH, replace(GAN, finetune_steps=None),
                                  log_path=CACHE / "c10" / "joint_loss.jsonl")
        save_checkpoint(gen_j, joint_path)
        log(f"joint training done in {time.time() - t0:.0f}s")

    log("sampling and scoring FIDs")
    extractor = IdentityExtractor()
    target = feature_stats(env_b.images, extractor)
    samples_ft = single_domain_samples(load_checkpoint(ft_path), env_b.name,
                                       FID_SAMPLES, seed=21)
    samples_j = single_domain_samples(load_checkpoint(joint_path), "joint",
                                      FID_SAMPLES, seed=23)
    result = {
        "fid_finetuned": fid(feature_stats(samples_ft.images, extractor), target),
        "fid_joint": fid(feature_stats(samples_j.images, extractor), target),
        "n": FID_SAMPLES,
        "extractor": extractor.extractor_id,
        "target": env_b.name,
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result, indent=2))
    log(f"fid finetuned={result['fid_finetuned']:.2f} joint={result['fid_joint']:.2f}")
    return result


def main():
    t_start = time.time()
    CACHE.mkdir(parents=True, exist_ok=True)
    env_set = get_envs()
    bundle = get_bundle(env_set)
    pools = {name: get_pool(name, bundle) for name in POOLS}
    syn_stats = {name: pool_stats(ds) for name, ds in pools.items()}
    log("pool stats: " + json.dumps({k: round(v["matching_rate"], 3)
                                     for k, v in syn_stats.items()}))
    c6, c8 = build_quantity_and_component_rows(env_set, pools)
    c9 = build_coverage_rows()
    c10 = build_fid_direction(env_set)
    manifest = {
        "schema": 1,
        "built": time.strftime("%Y-%m-%d %H:%M:%S"),
        "wall_seconds": round(time.time() - t_start, 1),
        "config": {
            "env_seed": ENV_SEED, "train_rhos": TRAIN_RHOS, "test_rho": TEST_RHO,
            "env_sizes": ENV_SIZES, "gan_steps": GAN.steps,
            "gan_finetune_steps": GAN.finetune_steps, "gan_seed": GAN_SEED,
            "clf_lr": CLF_LR, "clf_epochs": CLF_EPOCHS, "seeds": SEEDS,
            "syn_counts": SYN_COUNTS, "grid_images_per_cell": GRID_IMAGES_PER_CELL,
        },
        "syn_stats": syn_stats,
        "c6": c6,
        "c8": c8,
        "c9": c9,
        "c10": c10,
    }
    tmp = CACHE / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.rename(CACHE / "manifest.json")
    log(f"manifest written ({(time.time() - t_start) / 60:.1f} min total)")


if __name__ == "__main__":
    main()
