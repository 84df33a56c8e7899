"""``csiaug`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import dataset as dio
from .augment import ALL_METHODS, augment_dataset
from .channel import DegeneratePowerError
from .core import DimensionError, RngStream
from .experiment import ExperimentSpec, SpecError, run_experiment, run_hard_easy, run_transfer
from .learner import (
    CheckpointError,
    MlpConfig,
    NumericError,
    TrainConfig,
    augment_selected,
    evaluate_rmse,
    feature_dim,
    load_model,
    rank_difficulty,
    save_model,
    train,
)
from .synth import ConfigError, EnvConfig, build_environment, make_dataset

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, SpecError, yaml.YAMLError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (dio.DatasetFormatError, CheckpointError, DimensionError, FileNotFoundError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except (NumericError, DegeneratePowerError, FloatingPointError) as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


def _out(ctx, path) -> Path:
    p = Path(path)
    if not p.is_absolute() and ctx.obj["out_dir"] is not None:
        p = Path(ctx.obj["out_dir"]) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Root seed for commands that draw randomness.")
@click.option("--threads", type=int, default=1, envvar="CSIAUG_THREADS", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, envvar="CSIAUG_OUT_DIR",
              help="Directory that relative output paths are resolved against.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, threads, out_dir, verbose):
    """Channel- and transceiver-aware CSI data augmentation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"seed": seed, "threads": max(1, threads), "out_dir": out_dir}


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.argument("out")
@click.pass_context
@_guard
def synth(ctx, config, out):
    """Build the environment in CONFIG and write a sampled dataset to OUT.

    CONFIG is YAML with an ``env`` mapping (EnvConfig fields) and optional
    ``layout`` (``{grid: spacing}`` or ``{random: n}``) and ``noise`` keys.
    """
    raw = yaml.safe_load(Path(config).read_text()) or {}
    env_cfg = EnvConfig.from_dict(raw.get("env", {k: v for k, v in raw.items() if k not in ("layout", "noise")}))
    layout = raw.get("layout", {"grid": 1.0})
    if not isinstance(layout, dict) or len(layout) != 1:
        raise ConfigError(["layout must be {grid: spacing} or {random: n}"])
    (kind, arg), = layout.items()
    env = build_environment(env_cfg)
    data = make_dataset(env, (kind, arg), bool(raw.get("noise", True)), RngStream(ctx.obj["seed"]))
    path = _out(ctx, out)
    dio.save(data, path)
    click.echo(f"wrote {len(data)} samples (M={env_cfg.n_subcarriers}, n_ap={env_cfg.n_ap}, n_rx={env_cfg.n_rx}) to {path}")


@main.command()
@click.argument("src", type=click.Path(exists=True, dir_okay=False))
@click.argument("out")
@click.option("--method", type=click.Choice(ALL_METHODS), required=True)
@click.option("--factor", type=int, default=1, show_default=True, help="Augmented copies per measured sample.")
@click.option("--p-star", type=float, default=None, help="Amplitude half-range in dB (amp methods).")
@click.option("--delta-star", type=int, default=None, help="ACF truncation lag (corr).")
@click.option("--cell-spacing", type=float, default=None, help="Cell size in meters (pdp3).")
@click.option("--snr", type=float, default=None, help="Target SNR in dB (noise).")
@click.pass_context
@_guard
def augment(ctx, src, out, method, factor, p_star, delta_star, cell_spacing, snr):
    """Augment the dataset SRC and write the result to OUT."""
    data = dio.load(src)
    params = {k: v for k, v in (("p_star", p_star), ("delta_star", delta_star), ("cell_spacing", cell_spacing), ("snr_db", snr)) if v is not None}
    res = augment_dataset(data, method, factor, RngStream(ctx.obj["seed"]), threads=ctx.obj["threads"], **params)
    path = _out(ctx, out)
    dio.save(res, path)
    click.echo(f"wrote {len(res)} samples ({len(res) - len(data)} augmented) to {path}")


def _train_options(fn):
    for opt in reversed(
        [
            click.option("--epochs", type=int, default=50, show_default=True),
            click.option("--lr", type=float, default=1e-4, show_default=True),
            click.option("--weight-decay", type=float, default=1e-5, show_default=True),
            click.option("--batch-size", type=int, default=32, show_default=True),
            click.option("--hidden-layers", type=int, default=3, show_default=True),
            click.option("--hidden-width", type=int, default=128, show_default=True),
            click.option("--dropout", type=float, default=0.2, show_default=True),
            click.option("--feature-depth", type=int, default=2, show_default=True),
        ]
    ):
        fn = opt(fn)
    return fn


@main.command(name="train")
@click.argument("train_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("model_out")
@click.option("--val", "val_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--trace", "trace_out", default=None, help="Write per-sample average losses (.npz).")
@_train_options
@click.pass_context
@_guard
def train_cmd(ctx, train_path, model_out, val_path, trace_out, epochs, lr, weight_decay, batch_size,
              hidden_layers, hidden_width, dropout, feature_depth):
    """Train a localizer on TRAIN_PATH and save the checkpoint to MODEL_OUT."""
    data = dio.load(train_path)
    val = dio.load(val_path) if val_path else None
    m = data.meta
    mlp = MlpConfig(feature_dim(m.n_subcarriers, m.n_ap, m.n_rx), hidden_layers, hidden_width, dropout, feature_depth)
    cfg = TrainConfig(epochs, lr, weight_decay, batch_size, ctx.obj["seed"])
    model, trace = train(data, val, mlp, cfg)
    path = _out(ctx, model_out)
    save_model(model, path)
    if trace_out:
        np.savez(
            _out(ctx, trace_out),
            per_sample_avg_loss=trace.per_sample_avg_loss,
            epoch_train_loss=trace.epoch_train_loss,
            epoch_val_loss=trace.epoch_val_loss,
            best_epoch=trace.best_epoch,
        )
    click.echo(f"saved model to {path} (best epoch {trace.best_epoch})")


@main.command(name="eval")
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False))
@_guard
def eval_cmd(model_path, data_path):
    """Print the RMSE in meters of MODEL_PATH on DATA_PATH."""
    click.echo(f"{evaluate_rmse(load_model(model_path), dio.load(data_path)):.6f}")


@main.command()
@click.argument("spec_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--fresh", is_flag=True, help="Ignore previously completed cells.")
@click.pass_context
@_guard
def experiment(ctx, spec_path, fresh):
    """Run the multi-trial experiment in SPEC_PATH; writes report.csv and summary.yaml."""
    spec = ExperimentSpec.load(spec_path)
    out = Path(ctx.obj["out_dir"] or Path("runs") / spec.name)
    report = run_experiment(spec, out, threads=ctx.obj["threads"], resume=not fresh)
    for a in report.aggregate():
        click.echo(f"{a['method']:>10} x{a['factor']:<3} mean {a['mean_rmse_m']:.3f} m  [{a['min_rmse_m']:.3f}, {a['max_rmse_m']:.3f}]")
    click.echo(f"report: {out / 'report.csv'}")


@main.command(name="hard-select")
@click.argument("data_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out")
@click.option("--rho", type=float, default=0.5, show_default=True, help="Fraction of samples labelled hard.")
@click.option("--method", type=click.Choice(ALL_METHODS), default="pdp2", show_default=True)
@click.option("--easy", is_flag=True, help="Augment the same number of easiest samples instead.")
@click.pass_context
@_guard
def hard_select(ctx, data_path, trace_path, out, rho, method, easy):
    """Augment only the hard samples of DATA_PATH ranked by the losses in TRACE_PATH."""
    data = dio.load(data_path)
    losses = np.load(trace_path)["per_sample_avg_loss"]
    if losses.size != len(data):
        raise DimensionError(f"trace has {losses.size} losses for {len(data)} samples")
    hard, rest = rank_difficulty(losses, rho)
    idx = rest[: hard.size] if easy else hard
    res = augment_selected(data, idx, method, rho, RngStream(ctx.obj["seed"]))
    path = _out(ctx, out)
    dio.save(res, path)
    click.echo(f"augmented {idx.size} {'easy' if easy else 'hard'} samples x{round(1 / rho)}; wrote {len(res)} to {path}")


@main.command(name="transfer")
@click.argument("source_spec", type=click.Path(exists=True, dir_okay=False))
@click.argument("target_spec", type=click.Path(exists=True, dir_okay=False))
@click.option("--source-model", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Pre-trained checkpoint; otherwise trained from SOURCE_SPEC per trial.")
@click.option("--mode", type=click.Choice(["full", "freeze"]), default="full", show_default=True)
@click.option("--factors", default="0,7,31", show_default=True, help="Target augmentation factors.")
@click.option("--method", type=click.Choice(ALL_METHODS), default="pdp2", show_default=True)
@click.pass_context
@_guard
def transfer_cmd(ctx, source_spec, target_spec, source_model, mode, factors, method):
    """Compare source-only, target-only and transferred models on the target domain."""
    s = ExperimentSpec.load(source_spec)
    t = ExperimentSpec.load(target_spec)
    factors = [int(f) for f in factors.split(",") if f.strip()]
    out = Path(ctx.obj["out_dir"] or Path("runs") / f"transfer-{t.name}-{mode}")
    model = load_model(source_model) if source_model else None
    report = run_transfer(s, t, mode, factors, method, out, model)
    for a in report.aggregate():
        click.echo(f"{a['method']:>16} x{a['factor']:<3} mean {a['mean_rmse_m']:.3f} m")
    click.echo(f"report: {out / 'report.csv'}")


@main.command(name="hard-easy")
@click.argument("spec_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--rho", "rhos", multiple=True, type=float, default=(0.5, 0.25), show_default=True)
@click.option("--method", type=click.Choice(ALL_METHODS), default="pdp2", show_default=True)
@click.pass_context
@_guard
def hard_easy(ctx, spec_path, rhos, method):
    """Multi-trial comparison of hard-only vs easy-only augmentation."""
    spec = ExperimentSpec.load(spec_path)
    out = Path(ctx.obj["out_dir"] or Path("runs") / f"hard-easy-{spec.name}")
    report = run_hard_easy(spec, rhos, method, out)
    for a in report.aggregate():
        click.echo(f"{a['method']:>10} x{a['factor']:<3} mean {a['mean_rmse_m']:.3f} m")


if __name__ == "__main__":
    main()
