"""Channel-agnostic masked autoencoder.

One linear projection (the (1,P,P) convolution unrolled) maps every P x P
patch of every channel to an encoder token, so the encoder never sees channel
identity; spatial structure enters through shared 2-D sinusoidal embeddings
and axial 2-D RoPE inside attention. The decoder rebuilds the full sequence
with a learned mask token and adds per-channel embeddings computed from the
batch-mean patch embedding of each channel through a single shared linear map.

At inference the decoder is discarded: a tile's representation is the mean
encoder latent over the full unmasked token sequence, which makes it
invariant to channel order and closed under arbitrary channel subsets.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .container import read_container, write_container
from .errors import EmptyChannel, EmptySequence, IndivisibleTile, ShapeMismatch


@dataclass
class ModelConfig:
    patch_size: int = 14
    enc_dim: int = 192
    enc_depth: int = 6
    enc_heads: int = 4
    dec_dim: int = 96
    dec_depth: int = 2
    dec_heads: int = 4
    mask_fraction: float = 0.8
    sync_mask: bool = True
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must be in [0,1)")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must be in [0,1)")
        if self.dec_dim >= self.enc_dim:
            raise ValueError("decoder dim must be smaller than encoder dim")
        for dim, heads, tag in ((self.enc_dim, self.enc_heads, "enc"), (self.dec_dim, self.dec_heads, "dec")):
            if dim % heads:
                raise ValueError(f"{tag}_dim must be divisible by {tag}_heads")
            if (dim // heads) % 4:
                raise ValueError(f"{tag} head dim must be divisible by 4 for axial 2-D RoPE")


# Large-encoder configuration matching the full.ini preset; not exercised by tests.
FULL_SCALE = ModelConfig(
    patch_size=14,
    enc_dim=1024,
    enc_depth=24,
    enc_heads=16,
    dec_dim=512,
    dec_depth=8,
    dec_heads=16,
    mask_fraction=0.8,
    sync_mask=True,
    drop_path_rate=0.0,
)


@dataclass
class MaskSpec:
    """Masked/visible patch positions per channel. Counts always satisfy
    len(masked) == floor(mask_fraction * N) and masked + visible == N."""

    n_positions: int
    masked: list[np.ndarray]
    visible: list[np.ndarray]

    @property
    def n_channels(self) -> int:
        return len(self.masked)

    @property
    def synced(self) -> bool:
        first = self.masked[0]
        return all(np.array_equal(first, m) for m in self.masked)


def sample_mask(n_positions: int, n_channels: int, mask_fraction: float, sync_mask: bool, rng: np.random.Generator) -> MaskSpec:
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError("mask_fraction must be in [0,1)")
    n_masked = int(np.floor(mask_fraction * n_positions))
    masked, visible = [], []
    if sync_mask:
        mset = np.sort(rng.choice(n_positions, size=n_masked, replace=False)) if n_masked else np.empty(0, dtype=np.int64)
        vset = np.setdiff1d(np.arange(n_positions), mset)
        masked = [mset.astype(np.int64)] * n_channels
        visible = [vset.astype(np.int64)] * n_channels
    else:
        for _ in range(n_channels):
            mset = np.sort(rng.choice(n_positions, size=n_masked, replace=False)) if n_masked else np.empty(0, dtype=np.int64)
            masked.append(mset.astype(np.int64))
            visible.append(np.setdiff1d(np.arange(n_positions), mset).astype(np.int64))
    return MaskSpec(n_positions, masked, visible)


def sinusoidal_positions(grid_side: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """2-D sine/cosine table, shape (grid_side**2, dim), row-major positions.

    First half of the features encodes the row index, second half the column,
    each as interleaved sin/cos over a geometric frequency ladder.
    """
    if dim % 2:
        raise ValueError("dim must be even")
    half = dim // 2
    pairs = half // 2
    inv_freq = 1.0 / (10000.0 ** (torch.arange(pairs, dtype=torch.float64) / max(pairs, 1)))
    pos = torch.arange(grid_side, dtype=torch.float64)
    angles = pos[:, None] * inv_freq[None, :]  # (side, pairs)
    enc = torch.zeros(grid_side, half, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles)
    rows = enc[:, None, :].expand(grid_side, grid_side, half)
    cols = enc[None, :, :].expand(grid_side, grid_side, half)
    table = torch.cat([rows, cols], dim=-1).reshape(grid_side * grid_side, dim)
    return table.to(dtype=dtype, device=device)


def grid_positions(grid_side: int, device=None) -> torch.Tensor:
    """(N, 2) integer (row, col) coordinates in row-major order."""
    r = torch.arange(grid_side, device=device)
    rr, cc = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=-1)


def _rope_angles(coord: torch.Tensor, quarter: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (10000.0 ** (torch.arange(quarter, device=coord.device, dtype=torch.float64) / max(quarter, 1)))
    angles = coord.to(torch.float64)[..., None] * inv_freq
    return torch.cos(angles).to(dtype), torch.sin(angles).to(dtype)


def _rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(q: torch.Tensor, k: torch.Tensor, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Axial 2-D rotary embedding.

    q, k: (B, heads, T, head_dim) with head_dim divisible by 4;
    positions: (T, 2) or (B, T, 2) integer (row, col) grid coordinates.
    Attention logits then depend on positions only through their difference.
    """
    head_dim = q.shape[-1]
    if head_dim % 4:
        raise ValueError("head_dim must be divisible by 4")
    half = head_dim // 2
    quarter = head_dim // 4
    if positions.dim() == 2:
        positions = positions[None]
    cos_r, sin_r = _rope_angles(positions[..., 0], quarter, q.dtype)  # (B, T, quarter)
    cos_c, sin_c = _rope_angles(positions[..., 1], quarter, q.dtype)
    cos_r, sin_r, cos_c, sin_c = (t[:, None] for t in (cos_r, sin_r, cos_c, sin_c))

    def rot(x):
        return torch.cat(
            [_rotate_pairs(x[..., :half], cos_r, sin_r), _rotate_pairs(x[..., half:], cos_c, sin_c)],
            dim=-1,
        )

    return rot(q), rot(k)


class DropPath(nn.Module):
    """Per-sample stochastic depth."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x):
        if self.rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.rate
        shape = (x.shape[0],) + (1,) * (x.dim() - 1)
        mask = torch.bernoulli(torch.full(shape, keep, device=x.device, dtype=x.dtype))
        return x * mask / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        q, k = apply_rope(q, k, positions)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP of expansion 4."""

    def __init__(self, dim: int, heads: int, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, positions):
        x = x + self.drop_path(self.attn(self.norm1(x), positions))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class CampfireMAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        P = cfg.patch_size
        self.patch_proj = nn.Linear(P * P, cfg.enc_dim)
        rates = np.linspace(0.0, cfg.drop_path_rate, cfg.enc_depth) if cfg.enc_depth > 1 else [cfg.drop_path_rate]
        self.enc_blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.enc_heads, float(r)) for r in rates)
        self.enc_norm = nn.LayerNorm(cfg.enc_dim)

        self.enc_to_dec = nn.Linear(cfg.enc_dim, cfg.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dec_dim))
        self.channel_proj = nn.Linear(cfg.dec_dim, cfg.dec_dim)
        self.dec_blocks = nn.ModuleList(Block(cfg.dec_dim, cfg.dec_heads) for _ in range(cfg.dec_depth))
        self.dec_norm = nn.LayerNorm(cfg.dec_dim)
        self.head = nn.Linear(cfg.dec_dim, P * P)

        nn.init.normal_(self.mask_token, std=0.02)

    # -- geometry -----------------------------------------------------------

    def _grid_side(self, h: int, w: int) -> int:
        P = self.cfg.patch_size
        if h % P or w % P or h != w:
            raise IndivisibleTile(f"tile {h}x{w} not divisible into square {P}x{P} patches")
        return h // P

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, C, N, P*P) patch pixels, row-major per channel."""
        B, C, H, W = pixels.shape
        P = self.cfg.patch_size
        side = self._grid_side(H, W)
        x = pixels.reshape(B, C, side, P, side, P)
        return x.permute(0, 1, 2, 4, 3, 5).reshape(B, C, side * side, P * P)

    def unpatchify(self, patches: torch.Tensor, side: int) -> torch.Tensor:
        B, C, N, PP = patches.shape
        P = self.cfg.patch_size
        x = patches.reshape(B, C, side, side, P, P)
        return x.permute(0, 1, 2, 4, 3, 5).reshape(B, C, side * P, side * P)

    # -- encoder ------------------------------------------------------------

    def encode_tokens(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Run the encoder stack over (B, T, enc_dim) tokens with (.., T, 2) positions."""
        if tokens.shape[1] == 0:
            raise EmptySequence("encoder received zero tokens")
        x = tokens
        for block in self.enc_blocks:
            x = block(x, positions)
        return self.enc_norm(x)

    def _embed_patches(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, int]:
        """Shared projection + sinusoidal positions; returns (tokens (B,C,N,D), positions (N,2), side)."""
        B, C, H, W = pixels.shape
        side = self._grid_side(H, W)
        patches = self.patchify(pixels)
        tok = self.patch_proj(patches)
        sin = sinusoidal_positions(side, self.cfg.enc_dim, dtype=tok.dtype, device=tok.device)
        tok = tok + sin[None, None]
        return tok, grid_positions(side, device=tok.device), side

    def embed_tile(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, enc_dim): mean encoder latent over the full sequence."""
        tok, positions, _ = self._embed_patches(pixels)
        B, C, N, D = tok.shape
        latents = self.encode_tokens(tok.reshape(B, C * N, D), positions.repeat(C, 1))
        return latents.mean(dim=1)

    # -- decoder ------------------------------------------------------------

    def make_channel_embeddings(self, dec_tokens: torch.Tensor, channel_of: torch.Tensor) -> torch.Tensor:
        """Batch-mean of dec_dim tokens per channel through the shared linear map.

        dec_tokens: (B, T, dec_dim); channel_of: (T,) channel index per token.
        Returns (C, dec_dim) with C = channel_of.max()+1.
        """
        n_channels = int(channel_of.max().item()) + 1
        flat = dec_tokens.reshape(-1, dec_tokens.shape[-1])
        chan = channel_of.repeat(dec_tokens.shape[0])
        means = []
        for c in range(n_channels):
            sel = flat[chan == c]
            if sel.shape[0] == 0:
                raise EmptyChannel(f"channel {c} has no tokens in the batch")
            means.append(sel.mean(dim=0))
        return self.channel_proj(torch.stack(means))

    def forward_pretrain(self, pixels: torch.Tensor, visible_idx: torch.Tensor) -> torch.Tensor:
        """Masked reconstruction.

        pixels: (B, C, H, W); visible_idx: (B, C, n_vis) visible patch positions.
        Returns the full reconstruction (B, C, H, W).
        """
        B, C, H, W = pixels.shape
        if visible_idx.shape[:2] != (B, C):
            raise ShapeMismatch("visible_idx must be (B, C, n_vis)")
        tok, positions, side = self._embed_patches(pixels)
        N, D = tok.shape[2], tok.shape[3]
        n_vis = visible_idx.shape[2]

        gather = visible_idx[..., None].expand(B, C, n_vis, D)
        vis_tok = torch.gather(tok, 2, gather).reshape(B, C * n_vis, D)
        vis_pos = positions[visible_idx.reshape(B, C * n_vis)]  # (B, C*n_vis, 2)
        latents = self.encode_tokens(vis_tok, vis_pos)

        dec_vis = self.enc_to_dec(latents).reshape(B, C, n_vis, self.cfg.dec_dim)
        channel_of = torch.arange(C, device=tok.device).repeat_interleave(n_vis)
        chan_emb = self.make_channel_embeddings(dec_vis.reshape(B, C * n_vis, -1), channel_of)

        full = self.mask_token.expand(B, C, N, self.cfg.dec_dim).clone()
        scatter = visible_idx[..., None].expand(B, C, n_vis, self.cfg.dec_dim)
        full = full.scatter(2, scatter, dec_vis)

        dec_sin = sinusoidal_positions(side, self.cfg.dec_dim, dtype=full.dtype, device=full.device)
        full = full + dec_sin[None, None] + chan_emb[None, :, None, :]
        seq = full.reshape(B, C * N, self.cfg.dec_dim)
        pos_full = positions.repeat(C, 1)
        x = seq
        for block in self.dec_blocks:
            x = block(x, pos_full)
        pred = self.head(self.dec_norm(x)).reshape(B, C, N, -1)
        return self.unpatchify(pred, side)


def parameter_checksum(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: CampfireMAE, meta: dict | None = None, extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    full_meta = {"kind": "checkpoint", "format_version": 1, "model_config": asdict(model.cfg)}
    if meta:
        full_meta.update(meta)
    tensors = {f"model.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    write_container(path, full_meta, tensors)


def load_checkpoint(path: str | Path) -> tuple[CampfireMAE, dict, dict[str, np.ndarray]]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ShapeMismatch(f"{path} is not a checkpoint container")
    cfg = ModelConfig(**meta["model_config"])
    model = CampfireMAE(cfg)
    state = {k[len("model.") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    extras = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, meta, extras
