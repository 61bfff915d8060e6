"""Single command-line entry point wiring all modules into reproducible runs.

Every command writes its artifact plus a JSON run-record (config echo, seeds,
input checksums, wall time). Exit codes: 0 success, 1 validation failure,
2 IO failure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation, split_scheme, synthetic_data, training
from .config import RunConfig, config_echo, parse_run_config
from .data_model import read_manifest
from .errors import CampfireError, IOFailure
from .model_core import load_checkpoint, sample_mask
from .split_scheme import read_assignment, write_assignment
from .training import TileStore


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _run_record(command: str, cfg: RunConfig, seed: int | None, inputs: list[Path], outputs: list[Path], t0: float, record_path: Path) -> None:
    record = {
        "command": command,
        "config": config_echo(cfg),
        "seed_override": seed,
        "input_checksums": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": [str(p) for p in outputs],
        "wall_time": time.monotonic() - t0,
    }
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(record, indent=2) + "\n")


def _load_cfg(config: str | None, seed: int | None) -> RunConfig:
    cfg = parse_run_config(config)
    if seed is not None:
        cfg.synth = dataclasses.replace(cfg.synth, seed=seed)
        cfg.split = dataclasses.replace(cfg.split, seed=seed)
        cfg.optim = dataclasses.replace(cfg.optim, seed=seed)
        cfg.eval = dataclasses.replace(cfg.eval, seed=seed)
    return cfg


def _data_dir(value: str | None, cfg: RunConfig) -> Path:
    if value:
        return Path(value)
    if cfg.data.data_dir:
        return Path(cfg.data.data_dir)
    return Path(os.environ.get("CAMPFIRE_DATA_DIR", "."))


def _set_deterministic(on: bool) -> None:
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@click.group()
def main():
    """Channel-agnostic masked autoencoder pipeline."""


def _wrap(fn):
    """Map library errors to the documented exit codes."""

    def runner(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except IOFailure as exc:
            click.echo(f"io error: {exc}", err=True)
            sys.exit(2)
        except (CampfireError, OSError) as exc:
            if isinstance(exc, OSError):
                click.echo(f"io error: {exc}", err=True)
                sys.exit(2)
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    runner.__name__ = fn.__name__
    runner.__doc__ = fn.__doc__
    return runner


@main.command()
@click.option("--config", type=click.Path(), default=None, help="Run config file.")
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path(), help="Output dataset directory.")
@_wrap
def synth(config, seed, out):
    """Generate a synthetic plate dataset and its manifest."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    manifest, manifest_path = synthetic_data.generate_dataset(cfg.synth, out)
    n_tiles = sum(len(w.tile_uris) for w in manifest.wells)
    click.echo(
        f"generated {len(manifest.plate_kind)} plates, {len(manifest.wells)} wells, "
        f"{n_tiles} tiles -> {manifest_path}"
    )
    _run_record("synth", cfg, seed, [], [manifest_path], t0, Path(out) / "run_record_synth.json")


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_wrap
def split(config, seed, manifest_path, out):
    """Assign wells to train/val/test with shift isolation."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    manifest = read_manifest(manifest_path)
    target_wells = manifest.wells_of_kind("target2")
    compound_wells = manifest.wells_of_kind("compound")
    assignments = []
    if target_wells:
        sub = type(manifest)(target_wells, {p: "target2" for p in {w.plate_id for w in target_wells}})
        assignments.append(split_scheme.assign_target2(sub, cfg.split))
    if compound_wells:
        sub = type(manifest)(compound_wells, {p: "compound" for p in {w.plate_id for w in compound_wells}})
        assignments.append(split_scheme.assign_compound_plates(sub, cfg.split))
    assignment = assignments[0]
    for extra in assignments[1:]:
        assignment = assignment.merged_with(extra)
    write_assignment(assignment, manifest, out)
    counts = {s: len(assignment.wells_in(s)) for s in split_scheme.SPLITS}
    click.echo(f"split written to {out}: {counts}")
    _run_record("split", cfg, seed, [Path(manifest_path)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="JSON report path.")
@_wrap
def audit(manifest_path, assignment_path, out):
    """Check an assignment for leakage and tabulate it."""
    manifest = read_manifest(manifest_path)
    assignment = read_assignment(assignment_path, manifest)
    report = split_scheme.audit(assignment, manifest)
    payload = {
        "violations": report.violations,
        "split_counts": report.split_counts,
        "category_counts": report.category_counts,
        "n_compounds": len(report.per_compound_counts),
    }
    if out:
        Path(out).write_text(json.dumps(payload, indent=2) + "\n")
    click.echo(json.dumps(payload["split_counts"]))
    if report.violations:
        click.echo(f"{len(report.violations)} violations", err=True)
        sys.exit(1)
    click.echo("audit clean")


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path(), help="Run directory.")
@click.option("--epochs", type=int, default=None, help="Override total epochs.")
@click.option("--deterministic", is_flag=True)
@_wrap
def train(config, seed, manifest_path, assignment_path, data_dir, out, epochs, deterministic):
    """Pretrain the masked autoencoder on the train split."""
    t0 = time.monotonic()
    _set_deterministic(deterministic)
    cfg = _load_cfg(config, seed)
    if epochs is not None:
        cfg.optim = dataclasses.replace(cfg.optim, total_epochs=epochs)
    manifest = read_manifest(manifest_path)
    assignment = read_assignment(assignment_path, manifest)
    result = training.fit(
        manifest,
        assignment,
        cfg.model,
        cfg.optim,
        cfg.loss.weights(),
        _data_dir(data_dir, cfg),
        out,
        channels=cfg.channels.id_channels,
        masked_loss_only=cfg.loss.masked_only,
    )
    click.echo(f"trained {len(result.metrics)} epochs -> {result.checkpoint_path}")
    _run_record(
        "train", cfg, seed, [Path(manifest_path), Path(assignment_path)],
        [result.checkpoint_path], t0, Path(out) / "run_record_train.json",
    )


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--channels", default="Nu,Ac,M", help="Comma-separated channel ids fed to the model.")
@click.option("--out", required=True, type=click.Path(), help="Embedding table path.")
@click.option("--tsv", type=click.Path(), default=None, help="Also export as delimited text.")
@_wrap
def embed(config, seed, checkpoint, manifest_path, data_dir, channels, out, tsv):
    """Extract tile embeddings for a channel set."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    model, meta, _ = load_checkpoint(checkpoint)
    stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
    manifest = read_manifest(manifest_path)
    store = TileStore(_data_dir(data_dir, cfg))
    channel_set = tuple(c.strip() for c in channels.split(",") if c.strip())
    table = evaluation.extract_embeddings(model, store, manifest, channel_set, stats)
    table.save(out)
    if tsv:
        table.to_tsv(tsv)
    click.echo(f"embedded {len(table)} tiles with channels {channel_set} -> {out}")
    _run_record("embed", cfg, seed, [Path(checkpoint), Path(manifest_path)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--assignment", "assignment_path", required=True, type=click.Path(exists=True))
@click.option("--task", type=click.Choice(["controls", "heldout"]), default="controls")
@click.option("--out", required=True, type=click.Path(), help="JSON report path.")
@_wrap
def probe(config, seed, embeddings, manifest_path, assignment_path, task, out):
    """Train linear probes and report accuracy per shift category."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    table = evaluation.EmbeddingTable.load(embeddings)
    manifest = read_manifest(manifest_path)
    assignment = read_assignment(assignment_path, manifest)
    rng = np.random.default_rng(cfg.eval.seed)
    ds = evaluation.sample_embeddings(table, manifest, assignment, cfg.eval.n_control, cfg.eval.n_heldout, rng)
    if task == "controls":
        results = evaluation.controls_protocol(ds, cfg.eval.n_subsets, cfg.eval.probe_epochs, cfg.eval.seed)
    else:
        results = evaluation.heldout_protocol(ds, cfg.eval.n_folds, cfg.eval.probe_epochs, cfg.eval.seed)
    payload = {cat: res.to_dict() for cat, res in results.items()}
    payload["channel_set"] = list(table.channel_set)
    Path(out).write_text(json.dumps(payload, indent=2) + "\n")
    for cat, res in results.items():
        click.echo(f"{task} {cat}: {res.mean:.3f} +/- {res.std:.3f}")
    _run_record("probe", cfg, seed, [Path(embeddings), Path(assignment_path)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="JSON report path.")
@_wrap
def zprime(config, seed, embeddings, out):
    """Z'-score matrix over all compound-label pairs of well-level embeddings."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    table = evaluation.EmbeddingTable.load(embeddings)
    per_well = evaluation.collect_well_tile_embeddings(table)
    label_of = {}
    for i in range(len(table)):
        label_of[(table.plates[i], table.wells[i])] = table.compounds[i]
    groups: dict[str, list[np.ndarray]] = {}
    for key, tiles in per_well.items():
        groups.setdefault(label_of[key], []).append(evaluation.well_embedding(tiles))
    labels = sorted(groups)
    matrix = {}
    for ref in labels:
        for tgt in labels:
            if ref == tgt:
                continue
            rep = evaluation.zprime(np.stack(groups[ref]), np.stack(groups[tgt]))
            matrix[f"{ref}|{tgt}"] = {
                "z_prime": rep.z_prime,
                "mu_r": rep.mu_r,
                "mu_t": rep.mu_t,
                "sigma_r": rep.sigma_r,
                "sigma_t": rep.sigma_t,
            }
    Path(out).write_text(json.dumps({"labels": labels, "pairs": matrix}, indent=2) + "\n")
    click.echo(f"z-prime over {len(labels)} labels -> {out}")
    _run_record("zprime", cfg, seed, [Path(embeddings)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--train-plates", required=True, help="Comma-separated plate ids used for finetuning.")
@click.option("--out", required=True, type=click.Path(), help="Head checkpoint path.")
@_wrap
def finetune(config, seed, checkpoint, manifest_path, data_dir, train_plates, out):
    """Triplet-finetune an MLP head on a frozen backbone."""
    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    model, meta, _ = load_checkpoint(checkpoint)
    stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
    manifest = read_manifest(manifest_path)
    store = TileStore(_data_dir(data_dir, cfg))
    plates = {p.strip() for p in train_plates.split(",") if p.strip()}
    table = evaluation.extract_embeddings(model, store, manifest, tuple(meta["channels"]), stats, plates=plates)
    per_well = evaluation.collect_well_tile_embeddings(table)
    labels = {w.key: w.compound_id for w in manifest.wells if w.key in per_well}
    tcfg = evaluation.TripletConfig(
        hidden=cfg.eval.triplet_hidden,
        out_dim=cfg.eval.triplet_out_dim,
        margin=cfg.eval.triplet_margin,
        epochs=cfg.eval.triplet_epochs,
        lr=cfg.eval.triplet_lr,
        wells_per_batch=cfg.eval.wells_per_batch,
        tiles_per_well=cfg.eval.tiles_per_well,
        seed=cfg.eval.seed,
    )
    before = evaluation.parameter_checksum(model)
    head = evaluation.triplet_finetune(model, per_well, labels, tcfg)
    after = evaluation.parameter_checksum(model)
    if before != after:
        raise CampfireError("backbone parameters changed during finetuning")
    from .container import write_container

    write_container(
        out,
        {"kind": "triplet_head", "in_dim": model.cfg.enc_dim, "hidden": tcfg.hidden, "out_dim": tcfg.out_dim, "backbone_checksum": before},
        {k: v.detach().numpy().astype(np.float32) for k, v in head.state_dict().items()},
    )
    click.echo(f"finetuned head on plates {sorted(plates)} -> {out}")
    _run_record("finetune", cfg, seed, [Path(checkpoint), Path(manifest_path)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--seed", type=int, default=0)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--data-dir", type=click.Path(), default=None)
@click.option("--plate", required=True)
@click.option("--well", required=True)
@click.option("--tile-index", type=int, default=0)
@click.option("--out", required=True, type=click.Path(), help="PNG path.")
@_wrap
def reconstruct(config, seed, checkpoint, manifest_path, data_dir, plate, well, tile_index, out):
    """Render masked input / reconstruction / original grids for one tile."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t0 = time.monotonic()
    cfg = _load_cfg(config, seed)
    model, meta, _ = load_checkpoint(checkpoint)
    stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
    manifest = read_manifest(manifest_path)
    store = TileStore(_data_dir(data_dir, cfg))
    record = manifest.well(plate, well)
    tile = store.load(record.tile_uris[tile_index], purpose="reconstruct")
    channels = tuple(meta["channels"])
    from .data_model import normalize_channels

    norm = normalize_channels(tile.select_channels(channels), stats)
    P = model.cfg.patch_size
    side = norm.height // P
    rng = np.random.default_rng(seed)
    spec = sample_mask(side * side, len(channels), model.cfg.mask_fraction, model.cfg.sync_mask, rng)
    pixels = torch.from_numpy(norm.pixels[None])
    visible_idx = torch.from_numpy(np.stack(spec.visible)[None].astype(np.int64))
    with torch.no_grad():
        recon = model.forward_pretrain(pixels, visible_idx)[0].numpy()
    masked = norm.pixels.copy()
    for c, masked_pos in enumerate(spec.masked):
        grid = np.zeros(side * side, dtype=bool)
        grid[masked_pos] = True
        block = np.repeat(np.repeat(grid.reshape(side, side), P, axis=0), P, axis=1)
        masked[c][block] = 0.0

    n_ch = len(channels)
    fig, axes = plt.subplots(n_ch, 3, figsize=(9, 3 * n_ch), squeeze=False)
    for c in range(n_ch):
        for j, (img, title) in enumerate(
            ((masked[c], "masked input"), (recon[c], "reconstruction"), (norm.pixels[c], "original"))
        ):
            ax = axes[c][j]
            ax.imshow(img, cmap="magma")
            ax.set_axis_off()
            if c == 0:
                ax.set_title(title)
            if j == 0:
                ax.text(-10, norm.height // 2, channels[c], rotation=90, va="center")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    click.echo(f"wrote reconstruction grid -> {out}")
    _run_record("reconstruct", cfg, seed, [Path(checkpoint)], [Path(out)], t0, Path(out).with_suffix(".run.json"))


if __name__ == "__main__":
    main()
