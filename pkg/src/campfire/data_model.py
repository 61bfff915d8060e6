"""Domain types and IO: tiles, wells, manifests, and the binary tile container.

A tile is a C x H x W float32 stack of fluorescent channel images cut around
a single cell. Wells bind tiles to plate / compound provenance through a
tab-separated manifest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ChannelMismatch,
    CorruptTile,
    MalformedManifest,
    MissingStats,
    ZeroStd,
)

# Canonical channel ids of the five-dye screen; the set is open for other screens.
CANONICAL_CHANNELS = ("Nu", "Ac", "M", "ER", "cyRNA")

ROLES = ("positive_control", "negative_control", "standard")
PLATE_KINDS = ("target2", "compound")

TILE_MAGIC = b"CMPF"
TILE_VERSION = 1

MANIFEST_COLUMNS = ("plate_id", "well_id", "compound_id", "role", "plate_kind", "tile_uri")


@dataclass(frozen=True)
class Tile:
    """A multi-channel cell-centred image.

    channels: ordered channel ids, unique and non-empty.
    pixels: C x H x W float32 array, all values finite.
    well_ref: identifier of the source well, "plate_id/well_id".
    """

    channels: tuple[str, ...]
    pixels: np.ndarray
    well_ref: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "channels", tuple(self.channels))
        if px.ndim != 3:
            raise ChannelMismatch(f"pixels must be C x H x W, got shape {px.shape}")
        if len(self.channels) != px.shape[0]:
            raise ChannelMismatch(
                f"{len(self.channels)} channel ids for {px.shape[0]} planes"
            )
        if len(self.channels) < 1:
            raise ChannelMismatch("tile must have at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise ChannelMismatch(f"duplicate channel ids: {self.channels}")
        if any(not c for c in self.channels):
            raise ChannelMismatch("channel ids must be non-empty")
        if not np.all(np.isfinite(px)):
            raise ChannelMismatch("tile contains non-finite pixels")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def select_channels(self, wanted: Sequence[str]) -> "Tile":
        """Return a tile restricted to `wanted`, in the given order."""
        missing = [c for c in wanted if c not in self.channels]
        if missing:
            raise ChannelMismatch(f"channels {missing} not present in {self.channels}")
        idx = [self.channels.index(c) for c in wanted]
        return Tile(tuple(wanted), self.pixels[idx], self.well_ref)


@dataclass
class WellRecord:
    plate_id: str
    well_id: str
    compound_id: str
    role: str  # positive_control | negative_control | standard
    tile_uris: list[str] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str]:
        return (self.plate_id, self.well_id)


@dataclass
class Manifest:
    wells: list[WellRecord]
    plate_kind: dict[str, str]  # plate_id -> target2 | compound

    def well(self, plate_id: str, well_id: str) -> WellRecord:
        for w in self.wells:
            if w.plate_id == plate_id and w.well_id == well_id:
                return w
        raise KeyError((plate_id, well_id))

    def plates(self) -> list[str]:
        return sorted(self.plate_kind)

    def wells_of_kind(self, kind: str) -> list[WellRecord]:
        return [w for w in self.wells if self.plate_kind[w.plate_id] == kind]


def read_manifest(path: str | Path) -> Manifest:
    """Parse a tab-separated manifest file.

    Rows may repeat per well to list multiple tiles; repeated rows must agree
    on compound, role, and plate kind, and must not repeat a tile uri.
    """
    path = Path(path)
    if not path.exists():
        raise MalformedManifest(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise MalformedManifest("empty manifest")
    header = tuple(lines[0].rstrip("\n").split("\t"))
    if header != MANIFEST_COLUMNS:
        raise MalformedManifest(f"bad header {header}, expected {MANIFEST_COLUMNS}")

    wells: dict[tuple[str, str], WellRecord] = {}
    plate_kind: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise MalformedManifest(f"line {lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        plate_id, well_id, compound_id, role, kind, tile_uri = cols
        if role not in ROLES:
            raise MalformedManifest(f"line {lineno}: unknown role {role!r}")
        if kind not in PLATE_KINDS:
            raise MalformedManifest(f"line {lineno}: unknown plate_kind {kind!r}")
        if plate_id in plate_kind and plate_kind[plate_id] != kind:
            raise MalformedManifest(f"line {lineno}: plate {plate_id} declared as both kinds")
        plate_kind[plate_id] = kind
        key = (plate_id, well_id)
        if key in wells:
            rec = wells[key]
            if rec.compound_id != compound_id or rec.role != role:
                raise MalformedManifest(
                    f"line {lineno}: duplicate well {key} with conflicting metadata"
                )
            if tile_uri in rec.tile_uris:
                raise MalformedManifest(f"line {lineno}: duplicate tile uri for well {key}")
            rec.tile_uris.append(tile_uri)
        else:
            wells[key] = WellRecord(plate_id, well_id, compound_id, role, [tile_uri])
    return Manifest(wells=list(wells.values()), plate_kind=plate_kind)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    rows = ["\t".join(MANIFEST_COLUMNS)]
    for w in manifest.wells:
        kind = manifest.plate_kind[w.plate_id]
        for uri in w.tile_uris:
            rows.append("\t".join((w.plate_id, w.well_id, w.compound_id, w.role, kind, uri)))
    path.write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Tile container: magic "CMPF", version u16, C u16, H u32, W u32,
# C length-prefixed channel ids (u16 byte length + utf-8), then
# C*H*W little-endian float32 in channel-major order.
# ---------------------------------------------------------------------------

def write_tile(tile: Tile, uri: str | Path) -> None:
    parts = [TILE_MAGIC, struct.pack("<HHII", TILE_VERSION, tile.n_channels, tile.height, tile.width)]
    for cid in tile.channels:
        raw = cid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(tile.pixels, dtype="<f4").tobytes())
    Path(uri).write_bytes(b"".join(parts))


def read_tile(uri: str | Path) -> Tile:
    try:
        blob = Path(uri).read_bytes()
    except OSError as exc:
        raise CorruptTile(f"cannot read {uri}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != TILE_MAGIC:
        raise CorruptTile(f"bad magic in {uri}")
    version, n_channels, height, width = struct.unpack_from("<HHII", blob, 4)
    if version != TILE_VERSION:
        raise CorruptTile(f"unsupported tile version {version}")
    offset = 16
    channels = []
    for _ in range(n_channels):
        if offset + 2 > len(blob):
            raise CorruptTile(f"truncated channel table in {uri}")
        (nbytes,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + nbytes > len(blob):
            raise CorruptTile(f"truncated channel id in {uri}")
        channels.append(blob[offset : offset + nbytes].decode("utf-8"))
        offset += nbytes
    expected = n_channels * height * width * 4
    if len(blob) - offset != expected:
        raise CorruptTile(
            f"payload size mismatch in {uri}: got {len(blob) - offset} bytes, expected {expected}"
        )
    pixels = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(n_channels, height, width)
    return Tile(tuple(channels), pixels.copy())


# ---------------------------------------------------------------------------
# Normalization and augmentation
# ---------------------------------------------------------------------------

def normalize_channels(tile: Tile, stats: Mapping[str, tuple[float, float]]) -> Tile:
    """Standardize each channel with its (mean, std) from `stats`."""
    out = np.empty_like(tile.pixels)
    for i, cid in enumerate(tile.channels):
        if cid not in stats:
            raise MissingStats(f"no normalization stats for channel {cid!r}")
        mean, std = stats[cid]
        if not std > 0:
            raise ZeroStd(f"std for channel {cid!r} must be > 0, got {std}")
        out[i] = (tile.pixels[i] - mean) / std
    return Tile(tile.channels, out, tile.well_ref)


def denormalize_channels(tile: Tile, stats: Mapping[str, tuple[float, float]]) -> Tile:
    out = np.empty_like(tile.pixels)
    for i, cid in enumerate(tile.channels):
        mean, std = stats[cid]
        out[i] = tile.pixels[i] * std + mean
    return Tile(tile.channels, out, tile.well_ref)


def augment(tile: Tile, rng: np.random.Generator) -> Tile:
    """Random flips and 90-degree rotations, applied identically to all channels.

    Horizontal flip with p=0.5, vertical flip with p=0.5, then rotation by
    k*90 degrees with k uniform in {0,1,2,3}. Restricting rotation to
    multiples of 90 degrees keeps the map exact (no interpolation).
    """
    if tile.height != tile.width:
        raise ChannelMismatch("augment requires square tiles")
    px = tile.pixels
    if rng.random() < 0.5:
        px = px[:, :, ::-1]
    if rng.random() < 0.5:
        px = px[:, ::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        px = np.rot90(px, k=k, axes=(1, 2))
    return Tile(tile.channels, np.ascontiguousarray(px), tile.well_ref)


def compute_channel_stats(tiles: Iterable[Tile]) -> dict[str, tuple[float, float]]:
    """Per-channel mean/std over a collection of tiles (one pass, float64 accumulators)."""
    acc: dict[str, list[float]] = {}
    for tile in tiles:
        for i, cid in enumerate(tile.channels):
            plane = tile.pixels[i].astype(np.float64)
            s = acc.setdefault(cid, [0.0, 0.0, 0.0])
            s[0] += plane.sum()
            s[1] += np.square(plane).sum()
            s[2] += plane.size
    stats = {}
    for cid, (total, total_sq, n) in acc.items():
        mean = total / n
        var = max(total_sq / n - mean * mean, 0.0)
        stats[cid] = (float(mean), float(np.sqrt(var)))
    return stats
