"""Command-line interface.

Verbs mirror the pipeline stages (data build, gan pretrain/finetune, interp,
synth, sample, clf train, eval) plus whole-experiment drivers (run, ablate,
report). Exit codes: 0 ok, 2 config/usage error, 3 stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import classify, envdata, gan_train, metrics, pipeline, stylegen, synthesis
from .errors import CoefficientError, ConfigError, GicError, StageError
from .param_space import InterpolationCoefficients, interpolate, load_checkpoint, \
    save_checkpoint


@click.group()
def cli():
    """Generative interpolation experiments."""


# --- data


@cli.group()
def data():
    """Build and inspect environment datasets."""


@data.command("build")
@click.option("--dataset", type=click.Choice(["colored-mnist", "colored-fashion",
                                              "grid"]), default="colored-mnist")
@click.option("--rho", "rhos", type=float, multiple=True,
              help="Bias level; repeat for one training environment per value.")
@click.option("--test-rho", type=float, default=None,
              help="Also build a test environment at this bias level.")
@click.option("--size", type=int, default=10000)
@click.option("--resolution", type=int, default=32)
@click.option("--coverage-ratio", type=float, default=1.0,
              help="Grid datasets: fraction of category-view cells kept for training.")
@click.option("--images-per-cell", type=int, default=100)
@click.option("--source", type=click.Choice(["synthetic", "idx", "auto"]),
              default="synthetic")
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def data_build(dataset, rhos, test_rho, size, resolution, coverage_ratio,
               images_per_cell, source, data_dir, seed, out):
    """Build a colored-digit environment (set) or a category-view grid."""
    if dataset == "grid":
        env_set = envdata.build_holdout_grid(
            coverage_ratio=coverage_ratio, seed=seed,
            images_per_cell=images_per_cell, resolution=resolution,
            source=source, data_dir=data_dir)
        envdata.save_environment_set(env_set, out)
        for env in env_set.environments.values():
            click.echo(f"built {env.name}: {len(env.labels)} images")
        return
    base = "mnist" if dataset == "colored-mnist" else "fashion-mnist"
    if not rhos:
        raise ConfigError("provide at least one --rho")
    if len(rhos) == 1 and test_rho is None:
        spec = envdata.EnvironmentSpec(base_dataset=base, rho=rhos[0], size=size,
                                       seed=seed, resolution=resolution,
                                       source=source, data_dir=data_dir)
        env = envdata.build_colored(spec, name=f"rho{rhos[0]:g}")
        envdata.save_environment(env, out)
        click.echo(f"built {env.name}: {len(env.labels)} images, "
                   f"correlation {envdata.empirical_correlation(env):.3f}")
        return
    env_set = envdata.build_environment_set(
        train_rhos=list(rhos), test_rho=0.1 if test_rho is None else test_rho,
        sizes=size, seed=seed, base_dataset=base, resolution=resolution,
        source=source, data_dir=data_dir)
    envdata.save_environment_set(env_set, out)
    for env in env_set.environments.values():
        click.echo(f"built {env.name}: {len(env.labels)} images, "
                   f"correlation {envdata.empirical_correlation(env):.3f}")


# --- gan


@cli.group()
def gan():
    """Adversarial pretraining and fine-tuning."""


def _gan_config(steps, batch_size, seed, **kw):
    return gan_train.GanConfig(steps=steps, batch_size=batch_size, seed=seed, **kw)


@gan.command("pretrain")
@click.option("--env", "env_dirs", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--arch-preset", type=click.Choice(sorted(pipeline.GEN_PRESETS)),
              default="small32")
@click.option("--steps", type=int, default=3000)
@click.option("--batch-size", type=int, default=32)
@click.option("--joint", is_flag=True,
              help="Pool several --env directories into one training set.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def gan_pretrain(env_dirs, arch_preset, steps, batch_size, joint, seed, out):
    """Train a generator/discriminator pair from scratch."""
    if len(env_dirs) > 1 and not joint:
        raise ConfigError("multiple --env directories need --joint")
    envs = [envdata.load_environment(d) for d in env_dirs]
    config = _gan_config(steps, batch_size, seed)
    arch = pipeline.GEN_PRESETS[arch_preset]
    disc_arch = pipeline.DISC_PRESETS[arch_preset]
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    trainer = gan_train.train_joint if joint else gan_train.pretrain
    source = envs if joint else envs[0]
    gen, disc, history = trainer(source, arch, config, disc_arch=disc_arch,
                                 log_path=outdir / "loss.jsonl")
    save_checkpoint(gen, outdir / "gen.gic")
    save_checkpoint(disc, outdir / "disc.gic")
    click.echo(f"pretrained {steps} steps; final loss_g {history[-1]['loss_g']:.3f} "
               f"loss_d {history[-1]['loss_d']:.3f}")


@gan.command("finetune")
@click.option("--from", "from_dir", type=click.Path(exists=True), required=True,
              help="Directory holding gen.gic and disc.gic from pretraining.")
@click.option("--env", "env_dir", type=click.Path(exists=True), required=True)
@click.option("--freeze-depth", type=int, default=None)
@click.option("--steps", type=int, default=None,
              help="Fine-tune steps (default: a quarter of the recorded pretrain).")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def gan_finetune(from_dir, env_dir, freeze_depth, steps, seed, out):
    """Adapt a pretrained pair to a new domain with frozen lower D blocks."""
    gen = load_checkpoint(Path(from_dir) / "gen.gic")
    disc = load_checkpoint(Path(from_dir) / "disc.gic")
    env = envdata.load_environment(env_dir)
    pre_steps = next((e["steps"] for e in reversed(gen.lineage)
                      if e.get("event") == "pretrain"), 1000)
    config = _gan_config(pre_steps, 32, seed, freeze_depth=freeze_depth,
                         finetune_steps=steps)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    gen2, disc2, history = gan_train.finetune_freezed(
        gen, disc, env, config, log_path=outdir / "loss.jsonl")
    save_checkpoint(gen2, outdir / "gen.gic")
    save_checkpoint(disc2, outdir / "disc.gic")
    click.echo(f"fine-tuned {len(history)} steps on {env.name} "
               f"(freeze_depth {gen2.lineage[-1]['freeze_depth']})")


# --- interpolation / synthesis / sampling


@cli.command("interp")
@click.option("--ckpt", "ckpts", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--alpha", type=str, required=True,
              help="Comma-separated convex coefficients, one per checkpoint.")
@click.option("--out", type=click.Path(), required=True)
def interp_cmd(ckpts, alpha, out):
    """Blend aligned checkpoints into one parameter tree."""
    trees = [load_checkpoint(p) for p in ckpts]
    values = tuple(float(v) for v in alpha.split(","))
    blended = interpolate(trees, InterpolationCoefficients(values=values))
    save_checkpoint(blended, out)
    click.echo(f"wrote {out} ({blended.num_params()} parameters)")


def parse_strategy(text: str) -> dict:
    """'dirichlet:1.0' / 'fixed:0.5,0.5' / 'grid:0.5' / 'one_hot_cycle' -> fields."""
    name, _, param = text.partition(":")
    if name == "dirichlet":
        return {"coefficient_strategy": "dirichlet",
                "concentration": float(param or 1.0)}
    if name == "fixed":
        if not param:
            raise ConfigError("fixed strategy needs coefficients, e.g. fixed:0.5,0.5")
        return {"coefficient_strategy": "fixed",
                "fixed_alpha": tuple(float(v) for v in param.split(","))}
    if name == "grid":
        return {"coefficient_strategy": "grid", "grid_step": float(param or 0.5)}
    if name == "one_hot_cycle":
        return {"coefficient_strategy": "one_hot_cycle"}
    raise ConfigError(f"unknown strategy {text!r}")


@cli.command("synth")
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--count", type=int, default=1000)
@click.option("--strategy", type=str, default="dirichlet:1.0")
@click.option("--mixing-prob", type=float, default=0.5)
@click.option("--mixing-classes", type=click.Choice(["cross", "same"]),
              default="cross", help="Swap the appearance slot across classes, or "
              "whole style ranges within a class.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def synth_cmd(bundle, count, strategy, mixing_prob, mixing_classes, seed, out):
    """Materialize a synthetic dataset from a generator bundle."""
    b = gan_train.GeneratorBundle.load(bundle)
    spec = synthesis.SynthesisSpec(count=count, mixing_prob=mixing_prob,
                                   mixing_classes=mixing_classes, seed=seed,
                                   **parse_strategy(strategy))
    ds = synthesis.materialize_dataset(b, spec, out_dir=out)
    click.echo(f"wrote {count} samples to {out} "
               f"(strategy {spec.coefficient_strategy}, mixing {mixing_prob})")
    del ds


@cli.command("sample")
@click.option("--bundle", type=click.Path(exists=True), required=True)
@click.option("--n", type=int, default=8)
@click.option("--alpha-sweep", is_flag=True,
              help="Rows are fixed latents; columns sweep the blend coefficient.")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def sample_cmd(bundle, n, alpha_sweep, seed, out):
    """Render a qualitative n x n sample grid PNG."""
    b = gan_train.GeneratorBundle.load(bundle)
    path = pipeline.sample_grid(b, n, out, seed=seed, alpha_sweep=alpha_sweep)
    click.echo(f"wrote {path}")


# --- classifiers


@cli.group()
def clf():
    """Train and evaluate classifiers."""


@clf.command("train")
@click.option("--algo", type=click.Choice(["erm", "mixup", "irm", "rex"]),
              default="erm")
@click.option("--envs", "env_dirs", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--syn", type=click.Path(exists=True), default=None)
@click.option("--epochs", type=int, default=500)
@click.option("--lr", type=float, default=0.01)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def clf_train(algo, env_dirs, syn, epochs, lr, seed, out):
    """Train a classifier on real (+ optional synthetic) environments."""
    envs = [envdata.load_environment(d) for d in env_dirs]
    syn_ds = synthesis.load_synthetic(syn) if syn else None
    config = classify.ClassifierConfig(epochs=epochs, lr=lr, seed=seed)
    tree, history = classify.train(algo, envs, synthetic=syn_ds, config=config)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tree, outdir / "clf.gic")
    classify.save_history(history, outdir / "history.jsonl")
    last = history[-1]
    click.echo(f"trained {algo} for {epochs} epochs; "
               f"final loss {last['loss']:.4f}, train_acc {last['train_acc']}")


def _load_images_any(path):
    """Environment or synthetic directory -> object with .images/.labels."""
    path = Path(path)
    if (path / "provenance.jsonl").exists():
        return synthesis.load_synthetic(path)
    return envdata.load_environment(path)


def _emit_record(out, record):
    click.echo(json.dumps(record, default=float))
    if out:
        with open(out, "a") as fh:
            fh.write(json.dumps(record, default=float) + "\n")


@cli.command("eval")
@click.option("--what", type=click.Choice(["acc", "fid", "kl", "shift-report"]),
              required=True)
@click.option("--clf", "clf_ckpt", type=click.Path(exists=True), default=None)
@click.option("--env", "env_dir", type=click.Path(exists=True), default=None)
@click.option("--a", "a_dir", type=click.Path(exists=True), default=None)
@click.option("--b", "b_dir", type=click.Path(exists=True), default=None)
@click.option("--syn", "syn_dir", type=click.Path(exists=True), default=None)
@click.option("--train-env", "train_dirs", type=click.Path(exists=True),
              multiple=True)
@click.option("--test-env", "test_dir", type=click.Path(exists=True), default=None)
@click.option("--run-id", type=str, default="cli")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None,
              help="Append metric records to this JSONL file.")
def eval_cmd(what, clf_ckpt, env_dir, a_dir, b_dir, syn_dir, train_dirs, test_dir,
             run_id, seed, out):
    """Compute accuracy / FID / KL / full shift reports."""
    if what == "acc":
        if not (clf_ckpt and env_dir):
            raise ConfigError("--what acc needs --clf and --env")
        env = envdata.load_environment(env_dir)
        acc = classify.evaluate_accuracy(load_checkpoint(clf_ckpt), env)
        _emit_record(out, {"run_id": run_id, "metric": "accuracy",
                           "args": {"env": env.name, "clf": str(clf_ckpt)},
                           "value": acc, "n": len(env.labels),
                           "extractor_id": None, "seed": seed})
    elif what == "fid":
        if not (a_dir and b_dir):
            raise ConfigError("--what fid needs --a and --b")
        a, b = _load_images_any(a_dir), _load_images_any(b_dir)
        extractor = metrics.IdentityExtractor()
        value = metrics.fid(metrics.feature_stats(np.asarray(a.images), extractor),
                            metrics.feature_stats(np.asarray(b.images), extractor))
        _emit_record(out, {"run_id": run_id, "metric": "fid",
                           "args": {"a": str(a_dir), "b": str(b_dir)},
                           "value": value, "n": len(a.images),
                           "extractor_id": extractor.extractor_id, "seed": seed})
    elif what == "kl":
        if not (a_dir and b_dir):
            raise ConfigError("--what kl needs --a and --b")
        a, b = _load_images_any(a_dir), _load_images_any(b_dir)
        ha = metrics.offset_histogram(metrics._measured_attributes(a),
                                      np.asarray(a.labels), envdata.IDENTITY_MAPPING)
        hb = metrics.offset_histogram(metrics._measured_attributes(b),
                                      np.asarray(b.labels), envdata.IDENTITY_MAPPING)
        value = metrics.kl_divergence(ha, hb)
        _emit_record(out, {"run_id": run_id, "metric": "kl",
                           "args": {"a": str(a_dir), "b": str(b_dir)},
                           "value": value, "n": len(a.images),
                           "extractor_id": None, "seed": seed})
    else:  # shift-report
        if not (syn_dir and train_dirs and test_dir):
            raise ConfigError("--what shift-report needs --syn, --train-env (1+), "
                              "and --test-env")
        syn = synthesis.load_synthetic(syn_dir)
        train_envs = [envdata.load_environment(d) for d in train_dirs]
        test_env = envdata.load_environment(test_dir)
        report = metrics.shift_report(syn, train_envs, test_env)
        for name, v in report.values["kl"].items():
            _emit_record(out, {"run_id": run_id, "metric": "kl",
                               "args": {"against": name}, "value": v,
                               "n": len(syn.images),
                               "extractor_id": report.provenance["extractor_id"],
                               "seed": seed})
        _emit_record(out, {"run_id": run_id, "metric": "syn_closer_to_test",
                           "args": {}, "value": report.values["syn_closer_to_test"],
                           "n": len(syn.images),
                           "extractor_id": report.provenance["extractor_id"],
                           "seed": seed})


# --- whole experiments


@cli.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--runs-dir", type=click.Path(), default=None)
@click.option("--until", type=click.Choice(pipeline.STAGES), default="eval")
def run_cmd(config_path, runs_dir, until):
    """Execute (or resume) a full experiment pipeline from a YAML config."""
    config = pipeline.ExperimentConfig.from_yaml(config_path)
    run = pipeline.run_pipeline(config, runs_dir=runs_dir, until=until)
    click.echo(f"run {config.run_name} complete: {run.path}")
    for rec in run.metrics:
        if rec["metric"] == "accuracy":
            click.echo(f"  accuracy[{rec['args']['algorithm']} @ "
                       f"{rec['args']['env']}] = {rec['value']:.4f}")


@cli.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--axis", type=click.Choice(["syn_count", "components",
                                           "coverage_ratio", "algorithm"]),
              required=True)
@click.option("--values", type=str, default=None,
              help="Comma-separated axis values overriding the defaults.")
@click.option("--seeds", type=str, default="0,1,2")
@click.option("--runs-dir", type=click.Path(), default=None)
def ablate_cmd(config_path, axis, values, seeds, runs_dir):
    """Sweep one experiment axis over several seeds and tabulate accuracy."""
    config = pipeline.ExperimentConfig.from_yaml(config_path)
    parsed_values = None
    if values:
        caster = {"syn_count": int, "coverage_ratio": float}.get(axis, str)
        parsed_values = [caster(v) for v in values.split(",")]
    rows = pipeline.run_ablation(config, axis, values=parsed_values,
                                 seeds=[int(s) for s in seeds.split(",")],
                                 runs_dir=runs_dir)
    for cell in pipeline.aggregate_rows(rows):
        click.echo(f"  {axis}={cell['value']} [{cell['algorithm']}]: "
                   f"{cell['mean']:.4f} ± {cell['std']:.4f} "
                   f"(median {cell['median']:.4f}, n={cell['n_seeds']})")


@cli.command("report")
@click.option("--run", "run_dir", type=click.Path(exists=True), required=True)
def report_cmd(run_dir):
    """Rebuild report/metrics.csv from a run's metrics.jsonl."""
    run_dir = Path(run_dir)
    metrics_file = run_dir / "metrics.jsonl"
    if not metrics_file.exists():
        raise ConfigError(f"no metrics.jsonl under {run_dir}; run the eval stage first")
    records = [json.loads(line) for line in metrics_file.read_text().splitlines()
               if line.strip()]
    pipeline._write_report(run_dir, records)
    click.echo(f"wrote {run_dir / 'report' / 'metrics.csv'} ({len(records)} records)")


def main():
    try:
        return cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except (ConfigError, CoefficientError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except StageError as exc:
        click.echo(f"stage error: {exc}", err=True)
        sys.exit(3)
    except GicError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
