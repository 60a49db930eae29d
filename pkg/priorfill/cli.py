"""CLI entry point and argument parsing for PriorFill."""

import sys
import tomllib
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

import click

from priorfill import __version__, output
from priorfill.config import (
    PROFILES,
    RUN_DIR_ENV,
    AlignVariant,
    RunConfig,
    SamplerConfig,
    load_mask_config,
    load_run_config,
)
from priorfill.curation import SourceSpec
from priorfill.errors import PriorFillError
from priorfill.ledger import RunLedger
from priorfill.models import TrainingStep
from priorfill.pipeline import (
    ABLATION_PRESETS,
    Stage,
    ablate,
    curate,
    evaluate_run,
    generate_mask_batch,
    inpaint,
    inpaint_manifest,
    run_stage,
)


@dataclass
class CliState:
    """Options given to the command group, shared by every subcommand."""

    config_path: Optional[Path]
    run_dir: Optional[Path]
    seed: Optional[int]
    overrides: tuple[str, ...]


@contextmanager
def handle_errors() -> Iterator[None]:
    """Print library errors and exit with status 1."""
    try:
        yield
    except PriorFillError as e:
        output.print_error(str(e))
        sys.exit(1)


def parse_override(item: str) -> tuple[str, Any]:
    """
    Parse a `key=value` override; the value is read as a TOML literal, else kept as a string.

    Examples: `alignment.lr=1e-4`, `decoder.color_augment=false`, `masks.ratio_max=0.7`
    """
    if "=" not in item:
        raise click.BadParameter(f"Expected KEY=VALUE, got '{item}'", param_hint="--set")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw
    if isinstance(value, list):
        value = tuple(value)
    return key.strip(), value


def build_config(state: CliState, **overrides: Any) -> RunConfig:
    """Config file values, then --set overrides, then command options."""
    merged: dict[str, Any] = dict(parse_override(item) for item in state.overrides)
    if state.run_dir is not None:
        merged["run_dir"] = str(state.run_dir)
    if state.seed is not None:
        merged["seed"] = state.seed
    merged.update({key: value for key, value in overrides.items() if value is not None})
    return load_run_config(state.config_path, merged)


def stage_totals(config: RunConfig, steps: Optional[int]) -> dict[str, int]:
    """Number of steps each logged training curve will have."""
    totals = {
        "vae": config.vae.steps,
        "backbone": config.backbone.steps,
        "mae_pretrain": config.mae.pretrain_steps,
        "mae": config.mae.finetune_steps,
        "alignment": config.alignment.steps,
        "decoder": config.decoder.steps,
        "featnet": config.featnet.steps,
    }
    if steps is not None:
        totals = dict.fromkeys(totals, steps)
    return totals


def train_command(state: CliState, stage: Stage, steps: Optional[int], quiet: bool, **overrides: Any) -> None:
    """Run one training stage with progress output and report where its checkpoint went."""
    with handle_errors():
        config = build_config(state, **overrides)
        run_dir = config.resolved_run_dir
        if not quiet:
            output.print_header(f"PriorFill - {stage.value}", width=70)
            output.print_info(f"Run directory: {run_dir}")
            output.print_info(f"Seed: {config.seed}")
            print()

        totals = stage_totals(config, steps)

        def progress(entry: TrainingStep) -> None:
            if not quiet:
                output.print_progress(entry, totals.get(entry.stage, 0))

        path = run_stage(stage, config, steps, progress)

    with RunLedger() as ledger:
        record = ledger.get_record(run_dir, stage.value)
    output.print_success(f"Checkpoint written: {path}")
    if record is not None and record.final_loss is not None and not quiet:
        output.print_info(f"Final loss: {record.final_loss:.6f}")
        output.print_info(f"For details about this run, use: priorfill --run-dir {run_dir} history")


steps_option = click.option("--steps", type=int, default=None, help="Override the stage's configured step count.")
quiet_option = click.option("--quiet", "-q", is_flag=True, help="Minimal output - only errors and the result.")


@click.group()
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="TOML run configuration (one table per stage).",
)
@click.option(
    "--run-dir",
    "-r",
    type=click.Path(file_okay=False, path_type=Path),
    envvar=RUN_DIR_ENV,
    default=None,
    help=f"Run directory for checkpoints and logs (env: {RUN_DIR_ENV}).",
)
@click.option("--seed", type=int, default=None, help="Global seed for every stage.")
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config key, e.g. --set alignment.lr=1e-4 (can be used multiple times).",
)
@click.version_option(__version__, prog_name="PriorFill")
@click.pass_context
def main(
    ctx: click.Context,
    config_path: Optional[Path],
    run_dir: Optional[Path],
    seed: Optional[int],
    overrides: tuple[str, ...],
) -> None:
    """
    PriorFill - desk-scale inpainting with a masked auto-encoder prior and a frozen diffusion backbone.

    Stages run in order: train-vae, train-backbone, finetune-mae, train-alignment,
    train-decoder (train-featnet is optional and feeds the metrics).

    Examples:

      \b
      # Train the whole pipeline with reduced steps
      $ priorfill -r runs/demo train-vae --steps 200
      $ priorfill -r runs/demo train-backbone --steps 200

      \b
      # Inpaint one image
      $ priorfill -r runs/demo inpaint photo.png mask.png --out filled.png

      \b
      # Build a benchmark and score a method
      $ priorfill -r runs/demo curate --out bench
      $ priorfill -r runs/demo inpaint-set bench/manifest.jsonl --out outputs
      $ priorfill -r runs/demo evaluate bench/manifest.jsonl outputs
    """
    ctx.obj = CliState(config_path=config_path, run_dir=run_dir, seed=seed, overrides=overrides)


# ============================================================================
# Training stages
# ============================================================================


@main.command("train-vae")
@steps_option
@quiet_option
@click.pass_obj
def train_vae_command(state: CliState, steps: Optional[int], quiet: bool) -> None:
    """Train the KL autoencoder and estimate its latent scale."""
    train_command(state, Stage.VAE, steps, quiet)


@main.command("train-backbone")
@steps_option
@quiet_option
@click.pass_obj
def train_backbone_command(state: CliState, steps: Optional[int], quiet: bool) -> None:
    """Train the inpainting diffusion U-Net on the frozen autoencoder's latents."""
    train_command(state, Stage.BACKBONE, steps, quiet)


@main.command("finetune-mae")
@steps_option
@quiet_option
@click.pass_obj
def finetune_mae_command(state: CliState, steps: Optional[int], quiet: bool) -> None:
    """Pretrain the masked auto-encoder, then fine-tune it on inpainting masks."""
    train_command(state, Stage.MAE, steps, quiet)


@main.command("train-alignment")
@steps_option
@quiet_option
@click.option(
    "--align-variant",
    type=click.Choice([v.value for v in AlignVariant]),
    default=None,
    help="Alignment module variant (default from config: self_x4).",
)
@click.option("--large-lr", is_flag=True, help="Use the large alignment learning rate (5e-2).")
@click.pass_obj
def train_alignment_command(
    state: CliState, steps: Optional[int], quiet: bool, align_variant: Optional[str], large_lr: bool
) -> None:
    """Train the alignment module through the frozen backbone and MAE."""
    overrides = {"alignment.variant": align_variant, "alignment.use_large_lr": True if large_lr else None}
    train_command(state, Stage.ALIGNMENT, steps, quiet, **overrides)


@main.command("train-decoder")
@steps_option
@quiet_option
@click.option("--no-color-augment", is_flag=True, help="Disable color augmentation.")
@click.option("--no-latent-augment", is_flag=True, help="Disable latent augmentation.")
@click.pass_obj
def train_decoder_command(
    state: CliState, steps: Optional[int], quiet: bool, no_color_augment: bool, no_latent_augment: bool
) -> None:
    """Train the mask-unmask consistent decoder."""
    train_command(
        state,
        Stage.DECODER,
        steps,
        quiet,
        **{
            "decoder.color_augment": False if no_color_augment else None,
            "decoder.use_latent_augment": False if no_latent_augment else None,
        },
    )


@main.command("train-featnet")
@steps_option
@quiet_option
@click.pass_obj
def train_featnet_command(state: CliState, steps: Optional[int], quiet: bool) -> None:
    """Train the scene classifier used as the metric feature extractor."""
    train_command(state, Stage.FEATNET, steps, quiet)


# ============================================================================
# Masks, curation, inference and evaluation
# ============================================================================


@main.command("maskgen")
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory.")
@click.option("--count", "-n", type=int, default=100, help="Number of masks (default: 100).")
@click.option("--size", type=int, default=PROFILES["desk"], help="Mask side length in pixels (default: 64).")
@click.option("--eval", "eval_mode", is_flag=True, help="Use the evaluation mixture instead of the training mixture.")
@click.option(
    "--mask-config",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Standalone mask generator TOML (overrides the [masks] table of --config).",
)
@click.pass_obj
def maskgen_command(
    state: CliState, out: Path, count: int, size: int, eval_mode: bool, mask_config: Optional[Path]
) -> None:
    """Write a batch of masks as PNGs plus a stats.json sidecar."""
    with handle_errors():
        config = build_config(state)
        masks = load_mask_config(mask_config) if mask_config else config.masks
        samples = generate_mask_batch(masks, count, size, config.seed, out, eval_mode)
    ratios = [s.ratio for s in samples]
    output.print_success(f"Wrote {len(samples)} masks to {out}")
    if samples:
        mean = sum(ratios) / len(ratios)
        output.print_info(f"Hole ratio: min {min(ratios):.3f}, mean {mean:.3f}, max {max(ratios):.3f}")


def parse_source(item: str) -> SourceSpec:
    """NAME:IMAGE_DIR[:SEGMENTATION_DIR]; the name doubles as the domain tag."""
    parts = item.split(":")
    if len(parts) not in (2, 3) or not all(parts):
        raise click.BadParameter(f"Expected NAME:IMAGE_DIR[:SEG_DIR], got '{item}'", param_hint="--source")
    return SourceSpec(
        name=parts[0],
        image_dir=parts[1],
        domain_tag=parts[0],
        segmentation_dir=parts[2] if len(parts) == 3 else None,
    )


@main.command("curate")
@click.option(
    "--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Benchmark directory."
)
@click.option(
    "--sources",
    "--source",
    "sources",
    multiple=True,
    metavar="NAME:IMAGE_DIR[:SEG_DIR]",
    help="Image source (can be used multiple times). Default: four generated scene domains.",
)
@click.option("--k", "per_source_k", type=int, default=None, help="Images kept per source (default: 25).")
@click.option("--size", type=int, default=None, help="Output side length (default: 64).")
@click.option("--synthetic-count", type=int, default=100, help="Images generated per synthetic domain (default: 100).")
@click.pass_obj
def curate_command(
    state: CliState,
    out: Path,
    sources: tuple[str, ...],
    per_source_k: Optional[int],
    size: Optional[int],
    synthetic_count: int,
) -> None:
    """Build a clustered, mask-paired evaluation set and its manifest."""
    specs = [parse_source(item) for item in sources] or None
    with handle_errors():
        config = build_config(state, **{"curation.per_source_k": per_source_k, "curation.size": size})
        result = curate(config, out, specs, synthetic_count)
    for item, error in result.failures:
        output.print_warning(f"Skipped {item}: {error}")
    output.print_success(f"Curated {len(result.manifest.records)} images: {result.manifest_path}")


def sampler_from(
    config: RunConfig, steps: Optional[int], eta: Optional[float], seed: Optional[int], paste: bool
) -> SamplerConfig:
    changes = {"num_steps": steps, "eta": eta, "seed": seed}
    sampler = replace(config.sampler, **{k: v for k, v in changes.items() if v is not None})
    return replace(sampler, paste_unmasked=True) if paste else sampler


sampler_options = [
    click.option("--steps", type=int, default=None, help="DDIM steps (default: 50)."),
    click.option("--eta", type=float, default=None, help="DDIM eta (default: 0, deterministic)."),
    click.option("--seed", "sampler_seed", type=int, default=None, help="Sampling seed."),
    click.option("--paste-unmasked", is_flag=True, help="Copy the input's unmasked pixels into the output."),
]


def with_sampler_options(func):
    for option in reversed(sampler_options):
        func = option(func)
    return func


@main.command("inpaint")
@click.argument("image", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("mask", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "-o", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Output PNG.")
@with_sampler_options
@click.pass_obj
def inpaint_command(
    state: CliState,
    image: Path,
    mask: Path,
    out: Path,
    steps: Optional[int],
    eta: Optional[float],
    sampler_seed: Optional[int],
    paste_unmasked: bool,
) -> None:
    """Inpaint IMAGE where MASK is white; writes the PNG and a provenance JSON."""
    with handle_errors():
        config = build_config(state)
        path = inpaint(image, mask, config, out, sampler_from(config, steps, eta, sampler_seed, paste_unmasked))
    output.print_success(f"Wrote {path} (provenance: {path.with_suffix('.json')})")


@main.command("inpaint-set")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory.")
@with_sampler_options
@click.pass_obj
def inpaint_set_command(
    state: CliState,
    manifest: Path,
    out: Path,
    steps: Optional[int],
    eta: Optional[float],
    sampler_seed: Optional[int],
    paste_unmasked: bool,
) -> None:
    """Inpaint every record of a benchmark MANIFEST into <out>/<record_id>.png."""
    with handle_errors():
        config = build_config(state)
        paths = inpaint_manifest(manifest, out, config, sampler_from(config, steps, eta, sampler_seed, paste_unmasked))
    output.print_success(f"Wrote {len(paths)} outputs to {out}")


@main.command("evaluate")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("outputs", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option(
    "--report-dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Where report.json and report.csv go (default: OUTPUTS).",
)
@click.pass_obj
def evaluate_command(state: CliState, manifest: Path, outputs: Path, report_dir: Optional[Path]) -> None:
    """Score OUTPUTS against MANIFEST with the six inpainting metrics."""
    with handle_errors():
        config = build_config(state)
        report = evaluate_run(config, manifest, outputs, report_dir or outputs)
    output.print_header("PriorFill - Evaluation", width=70)
    output.print_metric_report(report)
    if report.lpips is None:
        output.print_warning("LPIPS unavailable: run train-featnet to enable it")
    print()
    output.print_success(f"Report written to {report_dir or outputs}")


@main.command("ablate")
@click.argument("preset", type=click.Choice(ABLATION_PRESETS))
@steps_option
@quiet_option
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), default=None, help="Report root.")
@click.pass_obj
def ablate_command(state: CliState, preset: str, steps: Optional[int], quiet: bool, out: Optional[Path]) -> None:
    """Train and compare the variants of an ablation PRESET under identical seeds."""
    with handle_errors():
        config = build_config(state)
        totals = stage_totals(config, steps)

        def progress(entry: TrainingStep) -> None:
            if not quiet:
                output.print_progress(entry, totals.get(entry.stage, 0))

        report = ablate(preset, config, steps, progress, out)
    output.print_ablation_report(report)


@main.command("history")
@click.pass_obj
def history_command(state: CliState) -> None:
    """Show every recorded stage of the run directory."""
    with handle_errors():
        run_dir = build_config(state).resolved_run_dir
    with RunLedger() as ledger:
        records = ledger.run_records(run_dir)
        holder = ledger.lock_holder(run_dir)
    if holder is not None:
        output.print_warning(
            f"A stage holds the run lock: pid {holder.get('pid')} on {holder.get('host')} since {holder.get('started')}"
        )
    if not records:
        output.print_warning(f"No history found for: {run_dir}")
        output.print_info("Run a training stage in this directory first to create a record")
        sys.exit(0)
    output.print_history(str(run_dir), records)


@main.command("unlock")
@click.pass_obj
def unlock_command(state: CliState) -> None:
    """Remove the run lock left behind by a stage that no longer runs."""
    with handle_errors():
        run_dir = build_config(state).resolved_run_dir
    with RunLedger() as ledger:
        removed = ledger.force_unlock(run_dir)
    if removed:
        output.print_success(f"Removed the run lock of {run_dir}")
    else:
        output.print_info(f"No run lock held for {run_dir}")


if __name__ == "__main__":
    main()
