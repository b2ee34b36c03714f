"""Pixel-token Vision Transformer lab: training, ablations and attention analysis."""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import click
import numpy as np

from config import ExperimentConfig, Study, apply_overrides, desk_preset, load_config, save_config, _parse_delta
from errors import ConfigError

logger = logging.getLogger(__name__)

VERSION = "0.1.0"


def _delta_option(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Any:
    if value is None:
        return None
    try:
        return _parse_delta(value)
    except ValueError:
        raise click.BadParameter(f"expected an integer or 'inf', got {value!r}")


def experiment_options(fn: Any) -> Any:
    """Options shared by every study subcommand."""
    decorators = [
        click.option("--config", "-c", "config_path", type=click.Path(), help="Experiment config (JSON or YAML)"),
        click.option("--seed", type=int, help="Override the experiment seed"),
        click.option("--out", "out_dir", type=click.Path(), help="Override the output directory"),
        click.option("--T", "swaps", type=int, multiple=True, help="Swap count(s) for the permutation study"),
        click.option("--delta", multiple=True, help="Distance bound(s); an integer >= 2 or 'inf'"),
        click.option("--patch-size", type=int, help="Patch size p"),
        click.option("--pe", type=click.Choice(["learned", "sincos", "none"]), help="Position embedding"),
        click.option("--tokenizer", type=click.Choice(["pixel", "patch"]), help="Tokenizer"),
        click.option("--epochs", type=int, help="Override schedule.total_epochs"),
        click.option("--resume", is_flag=True, help="Continue from last.ckpt in the output directory"),
    ]
    for decorator in reversed(decorators):
        fn = decorator(fn)
    return fn


def resolve_config(study: Study, config_path: Optional[str], **flags: Any) -> ExperimentConfig:
    """Config file (or the desk preset) with CLI flags applied on top.

    Raises:
        ConfigError: Missing or invalid file, or flags that fail validation.
    """
    overrides: dict[str, Any] = {"study": study}
    if flags.get("seed") is not None:
        overrides["seed"] = flags["seed"]
    if flags.get("out_dir") is not None:
        overrides["output_dir"] = str(Path(flags["out_dir"]).resolve())
    if flags.get("swaps"):
        overrides["T_list"] = list(flags["swaps"])
    if flags.get("delta"):
        try:
            overrides["delta_list"] = [_parse_delta(d) for d in flags["delta"]]
        except ValueError as exc:
            raise ConfigError(f"invalid --delta: {exc}") from exc
    if flags.get("patch_size") is not None:
        overrides["model.patch_size"] = flags["patch_size"]
    if flags.get("pe") is not None:
        overrides["model.pe"] = flags["pe"]
    if flags.get("tokenizer") is not None:
        overrides["model.tokenizer"] = flags["tokenizer"]
    if flags.get("epochs") is not None:
        overrides["schedule.total_epochs"] = flags["epochs"]
    if config_path is not None:
        return load_config(config_path, overrides)
    return apply_overrides(desk_preset(study), overrides)


def _run(study: Study, config_path: Optional[str], **flags: Any) -> Any:
    from experiments import run_study

    cfg = resolve_config(study, config_path, **flags)
    click.echo(f"Running {study} into {cfg.out_path}")
    return run_study(cfg, resume=flags.get("resume", False))


@click.group()
@click.version_option(version=VERSION)
@click.option("--quiet", "-q", is_flag=True, help="Only warnings and errors")
@click.option("--json-logs", is_flag=True, help="One JSON object per log line")
def cli(quiet: bool, json_logs: bool) -> None:
    """Pixel-token ViT lab - locality ablations on desk-scale Vision Transformers."""
    from logs import configure_logging

    configure_logging(quiet=quiet, json_logs=json_logs)


@cli.command()
@experiment_options
def train(config_path: Optional[str], **flags: Any) -> None:
    """Supervised training from scratch."""
    result = _run("supervised", config_path, **flags)
    click.echo(json.dumps(result.summary, indent=2, default=str))


@cli.command("mae-pretrain")
@experiment_options
def mae_pretrain(config_path: Optional[str], **flags: Any) -> None:
    """Masked-autoencoder pretraining."""
    result = _run("mae_pretrain", config_path, **flags)
    click.echo(f"Encoder checkpoint: {result.out_dir / 'last.ckpt'}")


@cli.command("mae-finetune")
@experiment_options
@click.option("--init", "init_checkpoint", type=click.Path(), help="MAE checkpoint to fine-tune")
@click.option("--compare/--no-compare", default=False, help="Also train from random initialization")
def mae_finetune(config_path: Optional[str], init_checkpoint: Optional[str], compare: bool, **flags: Any) -> None:
    """Fine-tune an MAE encoder; optionally compare against random init."""
    from experiments import run_mae_finetune

    cfg = resolve_config("mae_finetune", config_path, **flags)
    if init_checkpoint is not None:
        cfg = apply_overrides(cfg, {"init_checkpoint": str(Path(init_checkpoint).resolve())})
    results = run_mae_finetune(cfg, compare=compare)
    for label, result in results.items():
        click.echo(f"{label}: {json.dumps(result.summary, default=str)}")


@cli.command("pe-ablation")
@experiment_options
def pe_ablation(config_path: Optional[str], **flags: Any) -> None:
    """Train one model per position-embedding mode."""
    for row in _run("pe_ablation", config_path, **flags):
        click.echo(f"  pe={row.pe:<8} acc1={row.acc1:.4f} acc5={row.acc5:.4f}")


@cli.command("permute-study")
@experiment_options
def permute_study(config_path: Optional[str], **flags: Any) -> None:
    """Accuracy under distance-bounded pixel permutations."""
    from experiments import delta_label

    for row in _run("permutation_study", config_path, **flags):
        click.echo(
            f"  T={row.swaps:<6} delta={delta_label(row.delta):<4} acc1={row.acc1:.4f} change={row.delta_acc1:+.4f}"
        )


@cli.command("trend-sweep")
@experiment_options
@click.option(
    "--mode", type=click.Choice(["fixed_sequence_length", "fixed_input_size"]), help="Which quantity stays fixed"
)
def trend_sweep(config_path: Optional[str], mode: Optional[str], **flags: Any) -> None:
    """Accuracy as the patch size shrinks toward 1."""
    from experiments import run_trend_sweep

    cfg = resolve_config("trend_sweep", config_path, **flags)
    for row in run_trend_sweep(cfg, mode=mode):
        click.echo(f"  input={row.input_size:<4} p={row.patch_size:<3} L={row.seq_len:<6} acc1={row.acc1:.4f}")


@cli.command("lr-sweep")
@experiment_options
@click.option("--lr", "lrs", type=float, multiple=True, help="Peak learning rate(s)")
def lr_sweep(config_path: Optional[str], lrs: Sequence[float], **flags: Any) -> None:
    """Training-loss curves per peak learning rate."""
    from experiments import run_lr_sweep

    cfg = resolve_config("lr_sweep", config_path, **flags)
    for curve in run_lr_sweep(cfg, lr_list=list(lrs) or None):
        status = click.style("DIVERGED", fg="red") if curve.diverged else click.style("ok", fg="green")
        click.echo(f"  lr={curve.lr:<10g} steps={len(curve.losses):<5} final={curve.final_loss:.4f} {status}")


@cli.command()
@click.argument("checkpoint", type=click.Path())
@click.option("--config", "-c", "config_path", type=click.Path(), help="Config whose dataset supplies images")
@click.option("--out", "out_dir", type=click.Path(), help="Directory for stats, figures and the query map")
@click.option("--seed", type=int, default=0, help="Seed for the image sample")
@click.option("--images", "num_images", type=int, default=16, help="Number of validation images")
@click.option("--layer", type=int, help="Layer for the query map (default: last)")
@click.option("--query", nargs=2, type=int, help="Query row and column on the token grid (default: centre)")
def analyze(
    checkpoint: str,
    config_path: Optional[str],
    out_dir: Optional[str],
    seed: int,
    num_images: int,
    layer: Optional[int],
    query: Optional[tuple[int, int]],
) -> None:
    """Attention distance/offset statistics and a query heat map."""
    from analysis import analyze as run_analysis
    from checkpoint import read_checkpoint
    from data import load_dataset
    from tokenization import normalize

    ckpt = read_checkpoint(checkpoint)
    model_cfg = ckpt.config
    cfg = load_config(config_path) if config_path else desk_preset("supervised")
    spec = cfg.dataset.model_copy(update={"image_size": model_cfg.image_size})
    dataset = load_dataset(spec, "val", model_cfg.num_classes)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=min(num_images, len(dataset)), replace=False)
    images = normalize(dataset.images[np.sort(idx)], dataset.normalization)
    out = Path(out_dir) if out_dir else Path(checkpoint).resolve().parent / "analysis"
    report = run_analysis(ckpt, images, out, query=tuple(query) if query else None, query_layer=layer)
    click.echo(json.dumps(report, indent=2))
    click.echo(f"Wrote analysis to {out}")


@cli.command("perm-gen")
@click.option("--H", "height", type=int, required=True, help="Image height")
@click.option("--W", "width", type=int, required=True, help="Image width")
@click.option("--T", "swaps", type=int, required=True, help="Number of disjoint swaps")
@click.option("--delta", callback=_delta_option, default="inf", show_default=True, help="Distance bound or 'inf'")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), help="Permutation file (default: perm_<H>x<W>_T<T>.txt)")
def perm_gen(height: int, width: int, swaps: int, delta: Optional[int], seed: int, out_path: Optional[str]) -> None:
    """Generate and save a shared pixel permutation."""
    from tokenization import PermutationMap, generate_permutation

    perm = generate_permutation(height, width, swaps, delta, seed)
    path = perm.save(out_path or f"perm_{height}x{width}_T{swaps}.txt")
    PermutationMap.load(path)
    click.echo(f"Wrote {len(perm.pairs)} swaps ({perm.moved_pixels} moved pixels) to {path}")


@cli.command("inspect-ckpt")
@click.argument("checkpoint", type=click.Path())
def inspect_ckpt(checkpoint: str) -> None:
    """Print a checkpoint's config, tensor shapes and parameter breakdown."""
    from checkpoint import describe_checkpoint, read_checkpoint

    info = describe_checkpoint(read_checkpoint(checkpoint))
    click.echo(f"Kind: {click.style(info['kind'], bold=True)}")
    click.echo("Config:")
    click.echo(json.dumps(info["config"], indent=2, sort_keys=True))
    if info["mae"]:
        click.echo("MAE:")
        click.echo(json.dumps(info["mae"], indent=2, sort_keys=True))
    click.echo("Tensors:")
    for name, shape in info["tensors"]:
        click.echo(f"  {name:<48} {'x'.join(str(s) for s in shape) or 'scalar'}")
    if info["components"]:
        click.echo("Parameters:")
        for component, count in info["components"].items():
            click.echo(f"  {component:<10} {count:>12,}")
        click.echo(f"  {'total':<10} {sum(info['components'].values()):>12,}")


@cli.command("init-config")
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(),
    default="pixtok.json",
    help="Path where the config file will be created",
)
@click.option(
    "--study",
    type=click.Choice(
        ["supervised", "mae_pretrain", "mae_finetune", "pe_ablation", "permutation_study", "trend_sweep", "lr_sweep"]
    ),
    default="supervised",
    show_default=True,
)
def init_config(config_path: str, study: Study) -> None:
    """Create a desk-scale configuration file."""
    save_config(desk_preset(study), config_path)
    click.echo(f"Default configuration saved to: {config_path}")
    click.echo("Edit this file to customize the experiment.")


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and map failures to exit codes.

    Returns:
        0 on success, 1 on configuration or usage errors, 2 on any other failure.
    """
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="pixtok", standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"Configuration error: {exc}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("Aborted", err=True)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        click.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    """Main entry point."""
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
