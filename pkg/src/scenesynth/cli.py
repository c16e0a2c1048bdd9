"""Command-line entry points: dataset generation, training, inference, and
the finite-difference gradient suite.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import composition, config as config_mod, gradcheck as gradcheck_mod
from .datamodel import load_corpus, load_scene
from .synthetic import generate_corpus
from .training import ClassDataError, TrainingDiverged, load_checkpoint, train


def _fail(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Two-tier semantic image synthesis toolkit."""


@main.command("make-dataset")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None)
def cmd_make_dataset(config_path, out_dir):
    """Generate the synthetic scene corpus and its manifest."""
    cfg = config_mod.load_config(config_path)
    ds = cfg["dataset"]
    try:
        grammar = config_mod.grammar_from_config(cfg)
    except (ValueError, TypeError) as exc:
        _fail(f"invalid grammar: {exc}", 2)
    out = Path(out_dir) if out_dir else Path(ds["out_dir"])
    try:
        corpus = generate_corpus(ds.get("seed", 7), grammar, int(ds.get("num_scenes", 64)), out)
    except OSError as exc:
        _fail(f"cannot write corpus: {exc}", 2)
    config_mod.save_config(cfg, out / "config.yaml")
    click.echo(f"wrote {len(corpus)} scenes to {out}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--role", default="base", help="base or class:<id>")
@click.option("--data", "data_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--run-dir", type=click.Path(path_type=Path), default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--iterations", type=int, default=None, help="override total_iterations")
def cmd_train(config_path, role, data_dir, run_dir, resume_path, iterations):
    """Train the base generator or one class-specific generator."""
    cfg = config_mod.load_config(config_path)
    corpus = load_corpus(data_dir)
    try:
        train_cfg = config_mod.train_config_from_config(cfg, role, corpus.num_classes)
    except ValueError as exc:
        _fail(str(exc), 2)
    if iterations is not None:
        train_cfg.total_iterations = iterations
    state = None
    if resume_path is not None:
        state = load_checkpoint(resume_path)
        train_cfg = state.config
        if iterations is not None:
            train_cfg.total_iterations = iterations
    run_dir = Path(run_dir) if run_dir else config_mod.run_root(cfg) / role.replace(":", "_")
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, run_dir / "config.yaml")
    try:
        train(train_cfg, corpus, run_dir=run_dir, state=state, log_every=100)
    except TrainingDiverged as exc:
        _fail(f"training diverged: {exc}")
    except ClassDataError as exc:
        _fail(str(exc))
    click.echo(f"training complete; outputs in {run_dir}")


def _save_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


@main.command("infer")
@click.option("--base-ckpt", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--class-ckpt", "class_ckpts", multiple=True,
              help="<class_id>=<checkpoint path>, repeatable")
@click.option("--data", "data_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--scene", "scene_id", default=None, help="scene id from the manifest")
@click.option("--seed", type=int, default=0)
@click.option("--classes", "classes_arg", default=None,
              help="comma-separated class ids to replace; empty for base only")
@click.option("--mixed-res", type=int, default=1)
@click.option("--dilate-radius", type=int, default=2)
@click.option("--soften-sigma", type=float, default=1.0)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default="inference")
def cmd_infer(base_ckpt, class_ckpts, data_dir, scene_id, seed, classes_arg,
              mixed_res, dilate_radius, soften_sigma, out_dir):
    """Generate the base image and composite whitelisted class instances."""
    corpus = load_corpus(data_dir)
    if scene_id is None:
        scene_id = corpus.scene_ids[0]
    if scene_id not in corpus.scene_ids:
        _fail(f"scene {scene_id!r} not in corpus", 2)
    scene = corpus[corpus.scene_ids.index(scene_id)]

    base = composition.ModelHandle.load(base_ckpt)
    class_models = {}
    for spec in class_ckpts:
        if "=" not in spec:
            _fail(f"--class-ckpt must look like id=path, got {spec!r}", 2)
        cid, path = spec.split("=", 1)
        class_models[int(cid)] = composition.ModelHandle.load(Path(path))

    if classes_arg is None:
        whitelist = set(class_models)
    elif classes_arg.strip() == "":
        whitelist = set()
    else:
        whitelist = {int(c) for c in classes_arg.split(",")}
    missing = whitelist - set(class_models)
    if missing:
        _fail(f"no checkpoint supplied for whitelisted class(es) {sorted(missing)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = composition.run_pipeline(
        scene.semantic, scene.instances, scene.edges, base, class_models, seed,
        class_whitelist=whitelist, dilate_radius=dilate_radius,
        soften_sigma=soften_sigma, upscale_factor=mixed_res,
    )
    _save_image(out_dir / "base.png", result["base_image"])
    _save_image(out_dir / "composite.png", result["composite"])
    for inst_id, crop in result["instance_crops"].items():
        _save_image(out_dir / f"instance_{inst_id:03d}.png", crop)
    (out_dir / "plan.json").write_text(result["plan"].to_json() + "\n")
    click.echo(f"wrote inference outputs to {out_dir}")


@main.command("gradcheck")
@click.option("--module", "modules", multiple=True,
              help="encoder, decoder, discriminator, or losses; default all")
@click.option("--tolerance", type=float, default=gradcheck_mod.DEFAULT_TOLERANCE)
def cmd_gradcheck(modules, tolerance):
    """Compare autograd against central finite differences at float64."""
    try:
        report, passed = gradcheck_mod.run_suites(modules or None, tolerance)
    except KeyError as exc:
        _fail(str(exc), 2)
    for op, err in report.items():
        status = "ok" if err <= tolerance else "FAIL"
        click.echo(f"{op:40s} max rel err {err:.3e}  {status}")
    if not passed:
        _fail(f"gradient check exceeded tolerance {tolerance}")
    click.echo("all gradient checks passed")


if __name__ == "__main__":
    main()
