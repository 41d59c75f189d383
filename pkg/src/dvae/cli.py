"""Command-line entry point: data generation, training, evaluation, synthesis.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.  Every run
is reproducible from its flags + config + seed; run directories store the
resolved config and its hash.  The `DVAE_RUNS_DIR` environment variable
overrides the default run root (./runs).
"""

from __future__ import annotations

import functools
import json
import os
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .config import TASKS, config_hash, render_items, resolve_config
from .errors import ConfigError, DvaeError
from .inference import (
    evaluate,
    latent_walk,
    montage,
    MeanPosePredictor,
    pose_transfer,
    save_image,
    synthesize,
)
from .networks import load_checkpoint
from .training import train as train_dispatch


def _runtime_errors(fn):
    """Map package errors to exit code 1 instead of a traceback."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            raise click.UsageError(str(exc)) from exc
        except DvaeError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
def main():
    """Disentangled cross-modal VAE toolkit."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--n", required=True, type=int, help="Number of samples.")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--preset", default="desk32", type=click.Choice(sorted(data_mod.PRESETS)),
              show_default=True)
@click.option("--split", default="train", type=click.Choice(sorted(data_mod.SPLIT_STREAMS)),
              show_default=True)
@_runtime_errors
def gen_data(out_dir, n, seed, preset, split):
    """Generate a procedural synthetic dataset."""
    if n < 1:
        raise click.UsageError(f"--n must be >= 1, got {n}")
    manifest = data_mod.generate_dataset(out_dir, n, seed, preset, split)
    click.echo(f"wrote {n} samples to {out_dir}")
    click.echo(f"manifest sha256 {data_mod.manifest_hash(manifest)}")


def _default_run_dir(cfg) -> Path:
    root = Path(os.environ.get("DVAE_RUNS_DIR", "runs"))
    return root / f"{cfg.task}-{cfg.config_hash[:8]}"


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Flat key=value config file.")
@click.option("--task", type=click.Choice(TASKS), default=None,
              help="Task (needed when the config file does not set one).")
@click.option("--data", "data_path", type=click.Path(exists=True), default=None)
@click.option("--out", "run_dir", type=click.Path(), default=None,
              help="Run directory (default: <runs root>/<task>-<hash>).")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config item; may repeat.")
@click.option("--print-config", is_flag=True, help="Print the resolved config and exit.")
@_runtime_errors
def train(config_path, task, data_path, run_dir, overrides, print_config):
    """Train a model; dispatches on the config's task."""
    items = {}
    for ov in overrides:
        if "=" not in ov:
            raise click.UsageError(f"--set expects KEY=VALUE, got {ov!r}")
        key, value = ov.split("=", 1)
        items[key.strip()] = value.strip()
    if task is not None:
        items.setdefault("task", task)
    cfg = resolve_config(config_path, items)
    if print_config:
        click.echo(render_items(cfg.items), nl=False)
        click.echo(f"# config_hash {config_hash(cfg.items)}")
        return
    if data_path is None:
        raise click.UsageError("--data is required to train")
    run_dir = Path(run_dir) if run_dir else _default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(render_items(cfg.items))
    (run_dir / "config.hash").write_text(cfg.config_hash + "\n")

    samples = data_mod.load_dataset(data_path, cfg.supervision)
    model, log = train_dispatch(cfg, samples, run_dir)
    model.save(run_dir / "checkpoint")
    click.echo(f"run directory {run_dir}")
    click.echo(f"final checkpoint {run_dir / 'checkpoint'}")
    click.echo(f"steps logged {len(log.records)}")


def _load_ckpt_arg(path):
    if not Path(path).exists():
        raise click.UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--t-min", default=20.0, show_default=True, help="PCK threshold range start (mm).")
@click.option("--t-max", default=50.0, show_default=True, help="PCK threshold range end (mm).")
@click.option("--steps", default=31, show_default=True)
@click.option("--baseline-data", type=click.Path(exists=True), default=None,
              help="Training dataset for the mean-pose baseline comparison.")
@_runtime_errors
def eval_cmd(ckpt_path, data_path, out_path, t_min, t_max, steps, baseline_data):
    """Evaluate pose estimation on a labelled dataset, write a JSON report."""
    model = _load_ckpt_arg(ckpt_path)
    samples = data_mod.load_dataset(data_path)
    report = evaluate(model, samples, t_min, t_max, steps, model.config_hash)
    if baseline_data is not None:
        baseline = MeanPosePredictor(data_mod.load_dataset(baseline_data))
        report["baseline"] = evaluate(baseline, samples, t_min, t_max, steps, model.config_hash)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    click.echo(f"mean EPE {report['mean_epe']:.4f}  AUC {report['auc']:.4f}")
    click.echo(f"report written to {out_path}")


def _pose_to_json(pose):
    return [[float(v) for v in row] for row in pose.joints]


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--pose-from", "pose_idx", required=True, type=int,
              help="Record index supplying the pose.")
@click.option("--content-from", "content_idx", required=True, type=int,
              help="Record index supplying the background content.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_runtime_errors
def synth(ckpt_path, data_path, pose_idx, content_idx, out_dir):
    """Synthesize one image from a pose donor and a content donor."""
    model = _load_ckpt_arg(ckpt_path)
    samples = data_mod.load_dataset(data_path)
    donor, content = samples[pose_idx], samples[content_idx]
    image, pose = pose_transfer(model, donor, content)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(image, out / "image.png")
    (out / "pose.json").write_text(json.dumps({"joints": _pose_to_json(pose)}, sort_keys=True))
    click.echo(f"wrote {out / 'image.png'}")


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--a", "a_idx", required=True, type=int)
@click.option("--b", "b_idx", required=True, type=int)
@click.option("--segment", required=True, help="Latent segment to interpolate.")
@click.option("--steps", default=8, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_runtime_errors
def walk(ckpt_path, data_path, a_idx, b_idx, segment, steps, out_dir):
    """Latent-space walk between two records on one segment."""
    if steps < 2:
        raise click.UsageError(f"--steps must be >= 2, got {steps}")
    model = _load_ckpt_arg(ckpt_path)
    samples = data_mod.load_dataset(data_path)
    try:
        images, poses = latent_walk(model, samples[a_idx], samples[b_idx], segment, steps)
    except KeyError as exc:
        raise click.UsageError(str(exc)) from exc
    out = Path(out_dir)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_image(img, frames / f"{i:03d}.png")
    if images:
        save_image(montage(images, cols=len(images)), out / "montage.png")
    (out / "poses.json").write_text(
        json.dumps([_pose_to_json(p) for p in poses], sort_keys=True)
    )
    click.echo(f"wrote {len(images)} frames to {frames}")


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--poses", "pose_list", required=True,
              help="Comma-separated record indices supplying poses (rows).")
@click.option("--contents", "content_list", required=True,
              help="Comma-separated record indices supplying content (columns).")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_runtime_errors
def transfer(ckpt_path, data_path, pose_list, content_list, out_dir):
    """Pose-transfer grid: first row content donors, first column pose donors."""
    model = _load_ckpt_arg(ckpt_path)
    samples = data_mod.load_dataset(data_path)
    try:
        pose_ids = [int(t) for t in pose_list.split(",") if t.strip()]
        content_ids = [int(t) for t in content_list.split(",") if t.strip()]
    except ValueError as exc:
        raise click.UsageError(f"bad index list: {exc}") from exc
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    blank = np.ones_like(samples[pose_ids[0]].image)
    grid = [blank] + [samples[c].image for c in content_ids]
    for pi in pose_ids:
        row = [samples[pi].image]
        for ci in content_ids:
            image, _ = pose_transfer(model, samples[pi], samples[ci])
            save_image(image, cells_dir / f"pose{pi:04d}_content{ci:04d}.png")
            row.append(image)
        grid.extend(row)
    save_image(montage(grid, cols=len(content_ids) + 1), out / "montage.png")
    click.echo(f"wrote transfer grid to {out / 'montage.png'}")


if __name__ == "__main__":
    main()
