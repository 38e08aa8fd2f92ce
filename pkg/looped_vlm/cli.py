"""
Command-line interface: gen-data, train, eval, infer, trace.
"""

import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np

from .checkpoint import load_model
from .config import RunConfig, RuntimeSettings, apply_overrides, load_run_config, resolve_output_dir
from .errors import ConfigError, DataError, LoopedVLMError, exit_code_for
from .evaluation import calibrate_epsilon, compare_variants, write_results
from .inference import (ExitPolicy, answer_sample, exit_histogram, export_trace,
                        export_trajectories, norm_diff_curves, record_trace, steady_state_distances,
                        trajectory_projection, write_exit_histograms)
from .scenes import SyntheticScene, build_dataset, load_image, load_split
from .tokenizer import encode
from .training import Trainer
from .utils import parse_labeled_paths, parse_r_list

logger = logging.getLogger(__name__)

VARIANTS = {
    "hier": {},
    "no-hier": {"model.use_hierarchy": False},
    "r1": {"train.fixed_depth": 1},
}


def _parse_set(values: Tuple[str, ...]) -> Dict[str, Any]:
    overrides = {}
    for item in values:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def run_options(func):
    """Options shared by every command."""
    @click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config")
    @click.option("--seed", type=int, default=None, help="Master seed")
    @click.option("--mode", type=click.Choice(["stride", "prefix"]), default=None, help="Injection schedule for short depths")
    @click.option("--set", "set_values", multiple=True, help="Override a config value, e.g. model.r_max=16")
    @click.option("--force", is_flag=True, help="Overwrite existing outputs")
    @click.option("--print-config", is_flag=True, help="Print the resolved config and exit")
    @functools.wraps(func)
    def wrapper(config_path, seed, mode, set_values, force, print_config, **kwargs):
        try:
            overrides = _parse_set(set_values)
            if seed is not None:
                overrides["seed"] = seed
            if mode is not None:
                overrides["model.injection_mode"] = mode
            settings = RuntimeSettings()
            cfg = load_run_config(config_path, overrides, settings)
            if print_config:
                click.echo(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
                return
            return func(cfg=cfg, settings=settings, force=force, **kwargs)
        except LoopedVLMError as e:
            for issue in getattr(e, "issues", []):
                logger.error(f"  - {issue}")
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(exit_code_for(e))
    return wrapper


def _data_dir(cfg: RunConfig, settings: RuntimeSettings) -> Path:
    return resolve_output_dir(cfg, settings) / "data"


def _load_scenes(cfg: RunConfig, settings: RuntimeSettings, split: str, limit: Optional[int] = None) -> List[SyntheticScene]:
    path = _data_dir(cfg, settings) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"Split {split!r} not found at {path}; run gen-data first")
    scenes = load_split(path)
    expected = (cfg.vision.channels, cfg.vision.image_size, cfg.vision.image_size)
    for scene in scenes:
        if scene.image.shape != expected:
            raise DataError(f"Scene {scene.seed} has image shape {scene.image.shape}, config expects {expected}")
    return scenes[:limit] if limit else scenes


def _default_checkpoint(cfg: RunConfig, settings: RuntimeSettings, variant: str = "hier") -> Path:
    out = resolve_output_dir(cfg, settings) / variant
    for stage in sorted((s.stage for s in cfg.train.stages), reverse=True):
        path = out / f"stage{stage}" / "model.ckpt"
        if path.exists():
            return path
    raise DataError(f"No checkpoint under {out}; run train first or pass --checkpoint")


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """Looped multimodal transformer: data, training, evaluation and adaptive inference."""
    level = "DEBUG" if verbose else RuntimeSettings().LOG_LEVEL
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@cli.command("gen-data")
@run_options
def gen_data(cfg: RunConfig, settings: RuntimeSettings, force: bool):
    """Generate the train/eval/calib splits and their manifest."""
    out = _data_dir(cfg, settings)
    manifest = build_dataset(cfg.data, cfg.vision.image_size, out, force=force, progress=settings.PROGRESS)
    for name, split in manifest["splits"].items():
        click.echo(f"{name}: {split['size']} scenes {split['counts']} sha256={split['sha256'][:12]}")
    click.echo(f"Manifest written to {out / 'manifest.json'}")


@cli.command()
@run_options
@click.option("--stage", type=click.IntRange(1, 3), default=None, help="Run a single stage")
@click.option("--variant", type=click.Choice(sorted(VARIANTS)), default="hier", help="Model variant")
@click.option("--resume", is_flag=True, help="Resume from the stage's partial checkpoint")
def train(cfg: RunConfig, settings: RuntimeSettings, force: bool, stage: Optional[int], variant: str, resume: bool):
    """Run the staged training pipeline (all stages, or one with --stage)."""
    variant_cfg = apply_overrides(cfg, VARIANTS[variant])

    out = resolve_output_dir(cfg, settings) / variant
    if stage is None and not resume and not force and (out / "stage1" / "model.ckpt").exists():
        raise DataError(f"Training output already exists at {out}; pass --force or --resume")
    scenes = _load_scenes(cfg, settings, "train")
    trainer = Trainer(variant_cfg, out, progress=settings.PROGRESS)
    results = trainer.run(scenes, stages=[stage] if stage else None, resume=resume)
    for result in results:
        state = "interrupted" if result.interrupted else "done"
        click.echo(f"stage {result.stage} {state}: {result.steps_completed} steps, "
                   f"loss {result.final_loss:.4f} -> {result.checkpoint}")
    click.echo(f"optimizer steps: {trainer.stats['steps']:,} ({trainer.stats['skipped']} skipped), "
               f"checkpoints written: {trainer.stats['checkpoints']}")


@cli.command("eval")
@run_options
@click.option("--checkpoint", "checkpoints", multiple=True, help="LABEL=PATH (repeatable)")
@click.option("--r-list", default="1,4,8,16", show_default=True, help="Comma-separated depths")
@click.option("--split", default="eval", show_default=True)
@click.option("--limit", type=int, default=None, help="Evaluate the first N samples only")
@click.option("--plot", is_flag=True, help="Render accuracy vs r")
def eval_cmd(cfg: RunConfig, settings: RuntimeSettings, force: bool, checkpoints: Tuple[str, ...],
             r_list: str, split: str, limit: Optional[int], plot: bool):
    """Exact-match accuracy at each recurrence depth, for one or more checkpoints."""
    specs = parse_labeled_paths(list(checkpoints)) if checkpoints else {"hier": _default_checkpoint(cfg, settings)}
    models = {label: load_model(path) for label, path in specs.items()}
    r_max = min([cfg.inference_r_max] + [m.cfg.model.r_max for m in models.values()])
    depths = parse_r_list(r_list, r_max)
    scenes = _load_scenes(cfg, settings, split, limit)
    rows = compare_variants(models, scenes, depths, seed=cfg.seed, workers=settings.EVAL_WORKERS,
                            progress=settings.PROGRESS)
    out = resolve_output_dir(cfg, settings) / "eval"
    paths = write_results(rows, out)
    click.echo(paths["text"].read_text(encoding="utf-8"), nl=False)
    if plot:
        from .plots import plot_accuracy_vs_r
        plot_accuracy_vs_r(rows, out / "accuracy_vs_r.png")


@cli.command()
@run_options
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--image", type=click.Path(), default=None, help="Image file to ask about")
@click.option("--question", default=None, help="Question for --image")
@click.option("--split", default="eval", show_default=True)
@click.option("--limit", type=int, default=8, show_default=True)
@click.option("--epsilon", type=float, default=None, help="Exit threshold (0 disables early exit)")
@click.option("--calibrate", is_flag=True, help="Tune epsilon on the calib split first")
@click.option("--plot", is_flag=True, help="Render the exit histogram")
def infer(cfg: RunConfig, settings: RuntimeSettings, force: bool, checkpoint: Optional[str], image: Optional[str],
          question: Optional[str], split: str, limit: int, epsilon: Optional[float], calibrate: bool, plot: bool):
    """Adaptive-depth answers with per-token exit steps."""
    model = load_model(checkpoint or _default_checkpoint(cfg, settings))
    r_max = cfg.inference_r_max
    if r_max > model.cfg.model.r_max:
        raise ConfigError(f"inference r_max {r_max} exceeds the model's r_max {model.cfg.model.r_max}")
    if calibrate:
        epsilon = calibrate_epsilon(model, _load_scenes(cfg, settings, "calib"), cfg.inference.calibration_grid,
                                    r_max, cfg.inference.min_steps, cfg.inference.target_exit_fraction,
                                    seed=cfg.seed, prefill_steps=cfg.prefill_steps, workers=settings.EVAL_WORKERS)
        click.echo(f"calibrated epsilon: {epsilon:g}")
    policy = ExitPolicy.from_config(cfg, epsilon)
    n_v = cfg.vision.n_visual_tokens

    if image is not None:
        if not question:
            raise ConfigError("--image needs --question")
        pixels = load_image(image, cfg.vision.image_size)
        jobs = [("image", question, None, pixels)]
    else:
        jobs = [(s.task_kind, s.question, s.answer, s.image) for s in _load_scenes(cfg, settings, split, limit)]

    by_benchmark: Dict[str, List[int]] = {}
    for benchmark, q, expected, pixels in jobs:
        sample = encode(q, "", n_v)
        result = answer_sample(model, sample, pixels, policy, seed=cfg.seed,
                               prefill_steps=cfg.prefill_steps, max_new_tokens=cfg.inference.max_new_tokens)
        by_benchmark.setdefault(benchmark, []).extend(result.exit_steps)
        verdict = "" if expected is None else (" ok" if result.text == expected else f" (expected {expected})")
        click.echo(f"{q} -> {result.text!r}{verdict} | exit steps {result.exit_steps} "
                   f"| mean {result.mean_steps:.2f}")

    rows = [exit_histogram(name, steps, r_max) for name, steps in sorted(by_benchmark.items())]
    out = resolve_output_dir(cfg, settings) / "infer"
    write_exit_histograms(out / "exit_histogram.jsonl", rows)
    all_steps = [s for steps in by_benchmark.values() for s in steps]
    click.echo(f"mean steps: {float(np.mean(all_steps)) if all_steps else 0.0:.2f} (r_max {r_max}, epsilon {policy.epsilon:g})")
    if plot:
        from .plots import plot_exit_histograms
        plot_exit_histograms(rows, out / "exit_histogram.png")


@cli.command()
@run_options
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--split", default="eval", show_default=True)
@click.option("--index", type=int, default=0, show_default=True, help="Sample index in the split")
@click.option("--steady-step", type=int, default=None, help="Reference iteration T")
@click.option("--plot", is_flag=True, help="Render heatmap, norm_diff curves and trajectories")
def trace(cfg: RunConfig, settings: RuntimeSettings, force: bool, checkpoint: Optional[str], split: str,
          index: int, steady_step: Optional[int], plot: bool):
    """Export latent-state distances to the steady state for one sample."""
    steady = steady_step if steady_step is not None else cfg.trace.steady_step
    depth = cfg.inference_r_max
    if not 1 <= steady <= depth:
        raise ConfigError(f"steady step {steady} beyond r_max {depth}")
    model = load_model(checkpoint or _default_checkpoint(cfg, settings))
    scenes = _load_scenes(cfg, settings, split)
    if not 0 <= index < len(scenes):
        raise DataError(f"Sample index {index} outside split of {len(scenes)}")
    scene = scenes[index]
    sample = encode(scene.question, scene.answer, cfg.vision.n_visual_tokens)
    run = record_trace(model, sample.token_ids, scene.image, depth, seed=cfg.seed)

    out = resolve_output_dir(cfg, settings) / "trace"
    paths = export_trace(run, steady, out)
    paths["trajectories"] = export_trajectories(run, out / "trace_trajectories.csv")
    if plot or cfg.trace.plot:
        from .plots import plot_distance_heatmap, plot_norm_diff, plot_trajectories
        plot_distance_heatmap(steady_state_distances(run, steady), out / "trace_heatmap.png", steady)
        plot_norm_diff(norm_diff_curves(run), out / "trace_norm_diff.png")
        plot_trajectories(trajectory_projection(run), out / "trace_trajectories.png")
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


def main():
    cli()


if __name__ == '__main__':
    main()
