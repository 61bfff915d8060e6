"""Procedural generator of desk-scale multi-channel "microscopy" plates.

Each compound gets a latent morphology (blob radius/eccentricity, texture
frequency, spot count); each plate gets per-channel affine batch effects
(gain, offset); tiles are rendered deterministically from counter-based rng
streams keyed by (plate, well, tile), so parallel generation would match
serial output byte for byte.

Channel content (each identity channel carries exactly one latent axis, so a
single channel never identifies a compound but the three together do):
  Nu     centred anisotropic Gaussian blob (radius from theta; eccentricity
         and orientation are per-tile nuisances)
  Ac     oriented sinusoidal texture (frequency from theta; angle per tile)
         inside a fixed-size cell mask
  M      theta-determined count of small bright spots in the cell mask
  ER     fixed linear mixture of Nu-style content plus independent texture
  cyRNA  fixed linear mixture of Ac-style content plus independent texture
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import CANONICAL_CHANNELS, Manifest, Tile, WellRecord, write_manifest, write_tile
from .errors import IOFailure

# Latent levels for the first 9 compounds are placed on a 3x3x3 grid such that
# no single channel identifies the compound but the three ID channels jointly do.
RADIUS_LEVELS = (0.10, 0.22, 0.38)  # fraction of tile size
FREQ_LEVELS = (2.0, 4.5, 8.0)  # texture cycles across the tile
SPOT_LEVELS = (0, 8, 16)


@dataclass
class CompoundLatent:
    """Per-channel morphology parameters of one compound."""

    blob_radius: float  # fraction of tile size
    texture_freq: float
    spot_count: int


@dataclass
class SynthConfig:
    n_target_plates: int = 8
    n_ood_plates_hint: int = 2
    wells_per_plate: int = 96
    n_compounds: int = 9
    n_pos_controls: int = 8
    n_neg_controls: int = 1
    tiles_per_well: int = 16
    tile_size: int = 112
    channel_set: tuple[str, ...] = CANONICAL_CHANNELS
    plate_effect_strength: float = 0.15
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_compounds < self.n_pos_controls + self.n_neg_controls:
            raise ValueError("n_compounds must cover the controls")
        self.channel_set = tuple(self.channel_set)

    @property
    def n_plates(self) -> int:
        return self.n_target_plates + self.n_ood_plates_hint

    def compound_ids(self) -> list[str]:
        return [f"c{i:03d}" for i in range(self.n_compounds)]

    def role_of(self, compound_index: int) -> str:
        if compound_index < self.n_neg_controls:
            return "negative_control"
        if compound_index < self.n_neg_controls + self.n_pos_controls:
            return "positive_control"
        return "standard"


def compound_latents(cfg: SynthConfig) -> dict[str, CompoundLatent]:
    """Deterministic latent per compound; grid levels for the first 9, jittered draws after."""
    latents = {}
    for i, cid in enumerate(cfg.compound_ids()):
        rng = np.random.default_rng([cfg.seed, 1, i])
        if i < 9:
            radius = RADIUS_LEVELS[i % 3]
            freq = FREQ_LEVELS[(i // 3) % 3]
            spots = SPOT_LEVELS[(i + i // 3) % 3]
        else:
            radius = float(rng.uniform(RADIUS_LEVELS[0], RADIUS_LEVELS[-1]))
            freq = float(rng.uniform(FREQ_LEVELS[0], FREQ_LEVELS[-1]))
            spots = int(rng.integers(0, SPOT_LEVELS[-1] + 1))
        latents[cid] = CompoundLatent(blob_radius=radius, texture_freq=freq, spot_count=spots)
    return latents


def plate_effects(cfg: SynthConfig) -> dict[str, dict[str, tuple[float, float]]]:
    """Per plate, per channel (gain, offset) affine batch effect."""
    effects = {}
    for p in range(cfg.n_plates):
        rng = np.random.default_rng([cfg.seed, 2, p])
        per_channel = {}
        for cid in cfg.channel_set:
            gain = float(np.exp(cfg.plate_effect_strength * rng.standard_normal()))
            offset = float(0.3 * cfg.plate_effect_strength * rng.standard_normal())
            per_channel[cid] = (gain, offset)
        effects[f"plate{p:02d}"] = per_channel
    return effects


IDENTITY_EFFECT = {cid: (1.0, 0.0) for cid in CANONICAL_CHANNELS}


def render_tile(
    latent: CompoundLatent,
    plate_effect: dict[str, tuple[float, float]],
    channel_set: tuple[str, ...],
    rng: np.random.Generator,
    tile_size: int = 112,
    noise_std: float = 0.05,
    well_ref: str = "",
) -> Tile:
    if not channel_set:
        raise ValueError("channel_set must be non-empty")
    n = tile_size
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")

    # Shared per-tile nuisance randomness, drawn before any channel content so
    # the layout does not depend on which channels are requested. Eccentricity
    # and texture angle are nuisances, not compound signal: a single channel
    # must not identify the compound.
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    phi = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    ecc = rng.uniform(1.0, 1.8)
    angle = rng.uniform(0.0, np.pi)

    xr = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
    yr = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
    a = latent.blob_radius * np.sqrt(ecc)
    b = latent.blob_radius / np.sqrt(ecc)
    nu = np.exp(-0.5 * ((xr / a) ** 2 + (yr / b) ** 2))
    # Fixed-size soft cell-body mask: its extent is independent of the
    # compound, so Ac and M carry no radius information.
    a0 = 0.5 * np.sqrt(ecc)
    b0 = 0.5 / np.sqrt(ecc)
    mask = np.exp(-0.5 * ((xr / a0) ** 2 + (yr / b0) ** 2))

    wave = np.sin(2 * np.pi * latent.texture_freq * (xx * np.cos(angle) + yy * np.sin(angle)) / 2 + phase)
    ac = mask * 0.5 * (1.0 + wave)

    spots = np.zeros_like(nu)
    spot_sigma = 2.0 / (n / 2)  # ~2 px
    for _ in range(latent.spot_count):
        # rejection-free placement inside the fixed cell-body ellipse
        r = np.sqrt(rng.uniform(0.0, 1.0))
        t = rng.uniform(0.0, 2 * np.pi)
        sx = 0.9 * a0 * r * np.cos(t)
        sy = 0.9 * b0 * r * np.sin(t)
        px = cx + sx * np.cos(phi) - sy * np.sin(phi)
        py = cy + sx * np.sin(phi) + sy * np.cos(phi)
        spots += np.exp(-0.5 * (((xx - px) / spot_sigma) ** 2 + ((yy - py) / spot_sigma) ** 2))
    m_chan = np.clip(spots, 0.0, 1.5)

    # Held-out channels: correlated-but-distinct mixtures of the ID content.
    er_tex = mask * 0.5 * (1.0 + np.sin(2 * np.pi * 5.0 * (yy * np.cos(phase) + xx * np.sin(phase)) / 2))
    cy_tex = mask * 0.5 * (1.0 + np.cos(2 * np.pi * 3.0 * (xx - yy) / 2 + phi))
    content = {
        "Nu": nu,
        "Ac": ac,
        "M": m_chan,
        "ER": 0.6 * nu + 0.4 * er_tex,
        "cyRNA": 0.6 * ac + 0.4 * cy_tex,
    }

    planes = []
    for cid in channel_set:
        base = content.get(cid)
        if base is None:
            base = mask * 0.5  # unknown channel id: bland cell-shaped content
        gain, offset = plate_effect.get(cid, (1.0, 0.0))
        plane = gain * base + offset
        if noise_std > 0:
            plane = plane + noise_std * rng.standard_normal(base.shape)
        planes.append(plane.astype(np.float32))
    return Tile(tuple(channel_set), np.stack(planes), well_ref)


def _well_id(index: int) -> str:
    row, col = divmod(index, 24)
    return f"{chr(ord('A') + row)}{col + 1:02d}"


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> tuple[Manifest, Path]:
    """Render all plates to `out_dir` and write the manifest.

    Returns the manifest and the path it was written to. Byte-identical for
    equal configs: tile rng streams are keyed by (plate, well, tile) indices.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc}") from exc

    latents = compound_latents(cfg)
    effects = plate_effects(cfg)
    compound_ids = cfg.compound_ids()

    wells: list[WellRecord] = []
    plate_kind: dict[str, str] = {}
    for p in range(cfg.n_plates):
        plate_id = f"plate{p:02d}"
        plate_kind[plate_id] = "target2"
        plate_dir = out_dir / "tiles" / plate_id
        plate_dir.mkdir(exist_ok=True)
        for w in range(cfg.wells_per_plate):
            well_id = _well_id(w)
            ci = w % cfg.n_compounds
            compound = compound_ids[ci]
            uris = []
            for t in range(cfg.tiles_per_well):
                rng = np.random.default_rng([cfg.seed, 3, p, w, t])
                tile = render_tile(
                    latents[compound],
                    effects[plate_id],
                    cfg.channel_set,
                    rng,
                    tile_size=cfg.tile_size,
                    noise_std=cfg.noise_std,
                    well_ref=f"{plate_id}/{well_id}",
                )
                uri = plate_dir / f"{well_id}_t{t:02d}.tile"
                try:
                    write_tile(tile, uri)
                except OSError as exc:
                    raise IOFailure(f"cannot write {uri}: {exc}") from exc
                uris.append(str(uri.relative_to(out_dir)))
            wells.append(WellRecord(plate_id, well_id, compound, cfg.role_of(ci), uris))

    manifest = Manifest(wells=wells, plate_kind=plate_kind)
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest, manifest_path)
    return manifest, manifest_path


def oracle_features(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """True theta vectors per compound: the generator-side upper bound for probes."""
    return {
        cid: np.array([lat.blob_radius, lat.texture_freq, lat.spot_count], dtype=np.float64)
        for cid, lat in compound_latents(cfg).items()
    }
