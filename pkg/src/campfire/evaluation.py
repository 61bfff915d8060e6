"""Downstream protocols: embedding extraction, linear probes with shift-category
reporting, channel-combination evaluation, the Z'-score, and frozen-backbone
triplet finetuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .container import read_container, write_container
from .data_model import Manifest, normalize_channels
from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    EmptyWell,
    InsufficientData,
    NoTriplets,
    UnknownChannel,
)
from .model_core import CampfireMAE, parameter_checksum
from .split_scheme import SplitAssignment
from .training import TileStore


# ---------------------------------------------------------------------------
# Embedding tables
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # (N, D) float32
    plates: list[str]
    wells: list[str]
    compounds: list[str]
    channel_set: tuple[str, ...]
    model_checksum: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")
        if not self.channel_set:
            raise ValueError("channel_set must be non-empty")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "embeddings",
            "dim": int(self.dim),
            "channel_set": list(self.channel_set),
            "model_checksum": self.model_checksum,
            "plates": self.plates,
            "wells": self.wells,
            "compounds": self.compounds,
        }
        write_container(path, meta, {"vectors": self.vectors})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        meta, tensors = read_container(path)
        if meta.get("kind") != "embeddings":
            raise ValueError(f"{path} is not an embedding table")
        return cls(
            tensors["vectors"],
            meta["plates"],
            meta["wells"],
            meta["compounds"],
            tuple(meta["channel_set"]),
            meta.get("model_checksum", ""),
        )

    def to_tsv(self, path: str | Path) -> None:
        rows = ["\t".join(("plate_id", "well_id", "compound_id", "vector"))]
        for i in range(len(self)):
            vec = ",".join(f"{v:.7g}" for v in self.vectors[i])
            rows.append("\t".join((self.plates[i], self.wells[i], self.compounds[i], vec)))
        Path(path).write_text("\n".join(rows) + "\n")


def extract_embeddings(
    model: CampfireMAE,
    store: TileStore,
    manifest: Manifest,
    channel_set: tuple[str, ...],
    stats: dict[str, tuple[float, float]],
    plates: set[str] | None = None,
    batch_size: int = 64,
) -> EmbeddingTable:
    """Embed every tile of the selected wells with only `channel_set` fed to the model."""
    model.eval()
    rows: list[tuple[str, str, str]] = []
    batches: list[np.ndarray] = []
    pending: list[np.ndarray] = []
    wells = sorted(manifest.wells, key=lambda w: w.key)
    for w in wells:
        if plates is not None and w.plate_id not in plates:
            continue
        for uri in w.tile_uris:
            if not store.exists(uri):
                continue
            tile = store.load(uri, purpose="embed")
            missing = [c for c in channel_set if c not in tile.channels]
            if missing:
                raise UnknownChannel(f"channels {missing} absent from tile {uri}")
            tile = normalize_channels(tile.select_channels(channel_set), stats)
            pending.append(tile.pixels)
            rows.append((w.plate_id, w.well_id, w.compound_id))

    vectors = []
    with torch.no_grad():
        for i in range(0, len(pending), batch_size):
            batch = torch.from_numpy(np.stack(pending[i : i + batch_size]))
            vectors.append(model.embed_tile(batch).cpu().numpy())
    vecs = np.concatenate(vectors) if vectors else np.zeros((0, model.cfg.enc_dim), np.float32)
    return EmbeddingTable(
        vecs,
        [r[0] for r in rows],
        [r[1] for r in rows],
        [r[2] for r in rows],
        tuple(channel_set),
        parameter_checksum(model),
    )


def embed_by_channel_sets(
    model: CampfireMAE,
    store: TileStore,
    manifest: Manifest,
    channel_sets: list[tuple[str, ...]],
    stats: dict[str, tuple[float, float]],
    plates: set[str] | None = None,
) -> dict[tuple[str, ...], EmbeddingTable]:
    """One embedding table per channel combination, over the identical tile population."""
    if not channel_sets:
        raise ValueError("channel_sets must be non-empty")
    return {
        tuple(cs): extract_embeddings(model, store, manifest, tuple(cs), stats, plates)
        for cs in channel_sets
    }


# ---------------------------------------------------------------------------
# Probe datasets and linear probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeDataset:
    """Sampled embeddings annotated with everything the probe protocols need."""

    X: np.ndarray
    compounds: list[str]
    roles: list[str]
    splits: list[str]
    plate_status: list[str]
    compound_status: list[str]

    def rows(self, **conds) -> np.ndarray:
        keep = np.ones(len(self.compounds), dtype=bool)
        for attr, value in conds.items():
            col = getattr(self, attr)
            values = value if isinstance(value, (set, tuple, list)) else {value}
            keep &= np.array([v in values for v in col])
        return np.flatnonzero(keep)


def sample_embeddings(
    table: EmbeddingTable,
    manifest: Manifest,
    assignment: SplitAssignment,
    n_control: int = 100,
    n_heldout: int = 30,
    rng: np.random.Generator | None = None,
) -> ProbeDataset:
    """Per-well subsample: up to n_control records per control well, up to
    n_heldout per held-out-compound well. Deterministic in the rng seed."""
    rng = rng or np.random.default_rng(0)
    wells = {w.key: w for w in manifest.wells}
    by_well: dict[tuple[str, str], list[int]] = {}
    for i in range(len(table)):
        by_well.setdefault((table.plates[i], table.wells[i]), []).append(i)

    chosen: list[int] = []
    for key in sorted(by_well):
        w = wells.get(key)
        if w is None:
            continue
        is_control = w.role != "standard"
        is_heldout = assignment.compound_status.get(w.compound_id) == "OOD"
        if not (is_control or is_heldout):
            continue
        cap = n_control if is_control else n_heldout
        idx = np.array(sorted(by_well[key]))
        if len(idx) > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        chosen.extend(int(i) for i in idx)

    comps = [table.compounds[i] for i in chosen]
    return ProbeDataset(
        X=table.vectors[chosen],
        compounds=comps,
        roles=[wells[(table.plates[i], table.wells[i])].role for i in chosen],
        splits=[assignment.well_split.get((table.plates[i], table.wells[i]), "excluded") for i in chosen],
        plate_status=[assignment.plate_status.get(table.plates[i], "ID") for i in chosen],
        compound_status=[assignment.compound_status.get(c, "ID") for c in comps],
    )


@dataclass
class LinearProbe:
    weight: np.ndarray  # (n_classes, D)
    bias: np.ndarray
    classes: list[str]
    feat_mean: np.ndarray | None = None  # input standardization, fit on train
    feat_std: np.ndarray | None = None

    def predict(self, X: np.ndarray) -> list[str]:
        if self.feat_mean is not None:
            X = (X - self.feat_mean) / self.feat_std
        logits = X @ self.weight.T + self.bias
        return [self.classes[i] for i in logits.argmax(axis=1)]

    def accuracy(self, X: np.ndarray, y: list[str]) -> float:
        pred = self.predict(X)
        return float(np.mean([p == t for p, t in zip(pred, y)]))


def train_linear_probe(
    X_train: np.ndarray,
    y_train: list[str],
    X_val: np.ndarray,
    y_val: list[str],
    classes: list[str],
    epochs: int = 100,
    lr: float = 3e-2,
    seed: int = 0,
) -> LinearProbe:
    """Single affine map + softmax cross-entropy on standardized features,
    full-batch adaptive-moment updates, best-validation-accuracy parameters
    returned. Standardization statistics come from the training rows only."""
    class_index = {c: i for i, c in enumerate(classes)}
    missing = [c for c in classes if c not in set(y_train)]
    if missing:
        raise DegenerateLabels(f"classes with no training examples: {missing}")
    torch.manual_seed(seed)
    X_train = np.asarray(X_train, dtype=np.float32)
    feat_mean = X_train.mean(axis=0)
    feat_std = X_train.std(axis=0) + 1e-8
    Xt = torch.from_numpy((X_train - feat_mean) / feat_std)
    yt = torch.tensor([class_index[c] for c in y_train])
    Xv = torch.from_numpy((np.asarray(X_val, dtype=np.float32) - feat_mean) / feat_std)
    yv = np.array([class_index[c] for c in y_val])
    layer = nn.Linear(Xt.shape[1], len(classes))
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    best_acc, best_state = -1.0, None
    for _ in range(epochs):
        opt.zero_grad()
        loss = ce(layer(Xt), yt)
        loss.backward()
        opt.step()
        with torch.no_grad():
            acc = float((layer(Xv).argmax(1).numpy() == yv).mean()) if len(yv) else 0.0
        if acc > best_acc:
            best_acc = acc
            best_state = {k: v.detach().clone() for k, v in layer.state_dict().items()}
    layer.load_state_dict(best_state)
    return LinearProbe(
        layer.weight.detach().numpy().copy(),
        layer.bias.detach().numpy().copy(),
        list(classes),
        feat_mean,
        feat_std,
    )


@dataclass
class ProbeResult:
    task: str
    category: str
    accuracies: list[float]
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.accuracies, dtype=np.float64)
        self.mean = float(arr.mean()) if len(arr) else float("nan")
        self.std = float(arr.std()) if len(arr) else float("nan")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "category": self.category,
            "accuracies": self.accuracies,
            "mean": self.mean,
            "std": self.std,
        }


def controls_protocol(
    ds: ProbeDataset,
    n_subsets: int = 10,
    epochs: int = 100,
    seed: int = 0,
) -> dict[str, ProbeResult]:
    """Control-compound probes: training-well control embeddings split into
    n_subsets, one probe each, early-stopped on validation-well embeddings,
    scored on test wells from ID and OOD plates separately."""
    control = {"positive_control", "negative_control"}
    train_idx = ds.rows(roles=control, splits="train")
    val_idx = ds.rows(roles=control, splits="val")
    test_id = ds.rows(roles=control, splits="test", plate_status="ID")
    test_ood = ds.rows(roles=control, splits="test", plate_status="OOD")
    if len(train_idx) < n_subsets or not len(val_idx) or not len(test_id) or not len(test_ood):
        raise InsufficientData(
            f"controls protocol needs train>={n_subsets}, val/test nonempty; got "
            f"{len(train_idx)}/{len(val_idx)}/{len(test_id)}/{len(test_ood)}"
        )
    classes = sorted({ds.compounds[i] for i in train_idx})
    rng = np.random.default_rng(seed)
    # Stratified: deal each class's rows round-robin so every subset covers
    # all classes even when the training pool is small.
    buckets: list[list[int]] = [[] for _ in range(n_subsets)]
    for cls in classes:
        rows = rng.permutation([i for i in train_idx if ds.compounds[i] == cls])
        for j, row in enumerate(rows):
            buckets[j % n_subsets].append(int(row))
    parts = [np.array(sorted(b)) for b in buckets]
    if any(len(b) == 0 for b in parts):
        raise InsufficientData("too few training rows to fill every probe subset")
    acc_id, acc_ood = [], []
    for k, part in enumerate(parts):
        probe = train_linear_probe(
            ds.X[part],
            [ds.compounds[i] for i in part],
            ds.X[val_idx],
            [ds.compounds[i] for i in val_idx],
            classes,
            epochs=epochs,
            seed=seed + k,
        )
        acc_id.append(probe.accuracy(ds.X[test_id], [ds.compounds[i] for i in test_id]))
        acc_ood.append(probe.accuracy(ds.X[test_ood], [ds.compounds[i] for i in test_ood]))
    return {
        "ID_plate": ProbeResult("controls_9way", "ID_plate", acc_id),
        "OOD_plate": ProbeResult("controls_9way", "OOD_plate", acc_ood),
    }


def heldout_protocol(
    ds: ProbeDataset,
    n_folds: int = 5,
    epochs: int = 100,
    seed: int = 0,
) -> dict[str, ProbeResult]:
    """Held-out-compound probes: ID-plate embeddings k-fold cross-validated;
    each fold's probe is scored on its ID test part and on all OOD-plate
    held-out-compound embeddings."""
    id_idx = ds.rows(compound_status="OOD", plate_status="ID")
    ood_idx = ds.rows(compound_status="OOD", plate_status="OOD")
    if len(id_idx) < n_folds or not len(ood_idx):
        raise InsufficientData("held-out protocol needs ID-plate folds and OOD-plate rows")
    classes = sorted({ds.compounds[i] for i in id_idx})
    rng = np.random.default_rng(seed)
    folds = np.array_split(rng.permutation(id_idx), n_folds)
    acc_id, acc_ood = [], []
    for k in range(n_folds):
        test_part = folds[k]
        train_part = np.concatenate([folds[j] for j in range(n_folds) if j != k])
        probe = train_linear_probe(
            ds.X[train_part],
            [ds.compounds[i] for i in train_part],
            ds.X[train_part],
            [ds.compounds[i] for i in train_part],
            classes,
            epochs=epochs,
            seed=seed + k,
        )
        acc_id.append(probe.accuracy(ds.X[test_part], [ds.compounds[i] for i in test_part]))
        acc_ood.append(probe.accuracy(ds.X[ood_idx], [ds.compounds[i] for i in ood_idx]))
    return {
        "ID_plate": ProbeResult("heldout_60way", "ID_plate", acc_id),
        "OOD_plate": ProbeResult("heldout_60way", "OOD_plate", acc_ood),
    }


# ---------------------------------------------------------------------------
# Z'-score
# ---------------------------------------------------------------------------

@dataclass
class ZPrimeReport:
    mu_r: float
    mu_t: float
    sigma_r: float
    sigma_t: float
    z_prime: float | None  # None when the projection axis or the mean gap degenerates

    @property
    def defined(self) -> bool:
        return self.z_prime is not None


def zprime(reference: np.ndarray, target: np.ndarray) -> ZPrimeReport:
    """Project both groups onto the direction of the (reference-centred) target
    mean and apply the screening statistic 1 - 3(sr+st)/|mr-mt|."""
    X = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"dims differ: {X.shape[1]} vs {Y.shape[1]}")
    mu_x = X.mean(axis=0)
    Xc, Yc = X - mu_x, Y - mu_x
    mu_y = Yc.mean(axis=0)
    norm = np.linalg.norm(mu_y)
    if norm == 0.0:
        return ZPrimeReport(0.0, 0.0, 0.0, 0.0, None)
    axis = mu_y / norm
    r, t = Xc @ axis, Yc @ axis
    mu_r, mu_t = float(r.mean()), float(t.mean())
    sigma_r, sigma_t = float(r.std()), float(t.std())  # population std
    gap = abs(mu_r - mu_t)
    if gap == 0.0:
        return ZPrimeReport(mu_r, mu_t, sigma_r, sigma_t, None)
    return ZPrimeReport(mu_r, mu_t, sigma_r, sigma_t, 1.0 - 3.0 * (sigma_r + sigma_t) / gap)


# ---------------------------------------------------------------------------
# Triplet finetuning on a frozen backbone
# ---------------------------------------------------------------------------

def well_embedding(vectors: np.ndarray, head: "TripletHead | None" = None) -> np.ndarray:
    """Mean of per-tile embeddings, through the finetune head when present."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
    if vectors.shape[0] == 0:
        raise EmptyWell("well has no tile embeddings")
    if head is not None:
        with torch.no_grad():
            vectors = head(torch.from_numpy(vectors)).numpy()
    return vectors.mean(axis=0)


class TripletHead(nn.Module):
    """2-layer MLP head attached to the frozen backbone."""

    def __init__(self, in_dim: int, hidden: int = 1024, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


@dataclass
class TripletConfig:
    hidden: int = 1024
    out_dim: int = 128
    margin: float = 1.0
    epochs: int = 500
    lr: float = 1e-3
    wells_per_batch: int = 16
    tiles_per_well: int = 4
    seed: int = 0


def batch_hard_triplet_loss(embeddings: torch.Tensor, labels: list[str], margin: float) -> torch.Tensor:
    """Squared-Euclidean batch-hard triplet hinge over well-level embeddings."""
    if len(set(labels)) < 2:
        raise NoTriplets("batch needs at least two distinct labels")
    lab = np.array(labels)
    d = torch.cdist(embeddings, embeddings) ** 2
    same = torch.from_numpy(lab[:, None] == lab[None, :])
    eye = torch.eye(len(lab), dtype=torch.bool)
    losses = []
    for a in range(len(lab)):
        pos_mask = same[a] & ~eye[a]
        neg_mask = ~same[a]
        if not pos_mask.any() or not neg_mask.any():
            continue
        hardest_pos = d[a][pos_mask].max()
        hardest_neg = d[a][neg_mask].min()
        losses.append(torch.relu(hardest_pos - hardest_neg + margin))
    if not losses:
        raise NoTriplets("no valid anchors in batch")
    return torch.stack(losses).mean()


def triplet_finetune(
    model: CampfireMAE,
    well_tile_embeddings: dict[tuple[str, str], np.ndarray],
    labels: dict[tuple[str, str], str],
    cfg: TripletConfig,
) -> TripletHead:
    """Train the head on well-level embeddings; the backbone stays frozen.

    `well_tile_embeddings` holds the frozen backbone's per-tile embeddings for
    each training well (precomputed once: with frozen parameters the per-tile
    embeddings never change, so this is exactly the per-batch recomputation).
    """
    for p in model.parameters():
        p.requires_grad_(False)
    keys = sorted(well_tile_embeddings)
    if len({labels[k] for k in keys}) < 2:
        raise NoTriplets("finetuning needs at least two perturbation labels")
    dim = next(iter(well_tile_embeddings.values())).shape[1]
    torch.manual_seed(cfg.seed)
    head = TripletHead(dim, cfg.hidden, cfg.out_dim)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        batch_keys = keys
        if len(keys) > cfg.wells_per_batch:
            batch_keys = [keys[i] for i in rng.choice(len(keys), size=cfg.wells_per_batch, replace=False)]
        well_vecs, well_labels = [], []
        for key in batch_keys:
            tiles = well_tile_embeddings[key]
            take = min(cfg.tiles_per_well, tiles.shape[0])
            sel = rng.choice(tiles.shape[0], size=take, replace=False)
            emb = head(torch.from_numpy(tiles[sel].astype(np.float32)))
            well_vecs.append(emb.mean(dim=0))
            well_labels.append(labels[key])
        loss = batch_hard_triplet_loss(torch.stack(well_vecs), well_labels, cfg.margin)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head


def collect_well_tile_embeddings(table: EmbeddingTable) -> dict[tuple[str, str], np.ndarray]:
    out: dict[tuple[str, str], list[np.ndarray]] = {}
    for i in range(len(table)):
        out.setdefault((table.plates[i], table.wells[i]), []).append(table.vectors[i])
    return {k: np.stack(v) for k, v in out.items()}
