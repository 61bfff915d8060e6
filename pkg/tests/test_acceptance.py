"""End-to-end acceptance checks.

Each test covers one numbered criterion; the terminal summary prints one
pass/fail line per criterion (see conftest.pytest_terminal_summary).
Criteria 7-9 share one desk-scale pipeline run through module fixtures.
"""

import math
import time

import numpy as np
import pytest
import torch

from campfire import evaluation as ev
from campfire.data_model import Manifest, WellRecord
from campfire.model_core import CampfireMAE, ModelConfig, parameter_checksum
from campfire.objective import LossWeights, fft2_centered, ifft2_centered, total_loss, zero_inner, zero_outer
from campfire.split_scheme import SHIFT_CATEGORIES, SplitConfig, assign_target2, audit
from campfire.synthetic_data import SynthConfig, generate_dataset
from campfire.training import OptimConfig, fit, lr_at

DESK_SYNTH = SynthConfig(
    n_target_plates=6,
    n_ood_plates_hint=2,
    wells_per_plate=9,
    n_compounds=9,
    n_pos_controls=8,
    n_neg_controls=1,
    tiles_per_well=16,
    tile_size=112,
    seed=0,
)
DESK_SPLIT = SplitConfig(n_heldout_compounds=0, n_ood_plates=2, plates_train=4, plates_val=1, plates_test=1, seed=0)
DESK_MODEL = ModelConfig(patch_size=14, enc_dim=96, enc_depth=3, enc_heads=2, dec_dim=48, dec_depth=1, dec_heads=2)
DESK_OPTIM = OptimConfig(warmup_epochs=2, total_epochs=20, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    t0 = time.monotonic()
    manifest, _ = generate_dataset(DESK_SYNTH, root)
    assignment = assign_target2(manifest, DESK_SPLIT)
    assert audit(assignment, manifest).clean
    return {"root": root, "manifest": manifest, "assignment": assignment, "synth_seconds": time.monotonic() - t0}


@pytest.fixture(scope="module")
def desk_run(desk_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.monotonic()
    result = fit(
        desk_data["manifest"], desk_data["assignment"], DESK_MODEL, DESK_OPTIM,
        LossWeights(), desk_data["root"], out,
    )
    return {"result": result, "out": out, "fit_seconds": time.monotonic() - t0, **desk_data}


@pytest.fixture(scope="module")
def desk_probes(desk_run):
    """Controls-protocol accuracies per channel set on the desk run."""
    result = desk_run["result"]
    t0 = time.monotonic()
    scores = {}
    for chset in (("Nu", "Ac", "M"), ("Nu",), ("Ac",), ("M",)):
        table = ev.extract_embeddings(result.model, result.store, desk_run["manifest"], chset, result.stats)
        ds = ev.sample_embeddings(table, desk_run["manifest"], desk_run["assignment"], rng=np.random.default_rng(0))
        res = ev.controls_protocol(ds, n_subsets=10, epochs=100, seed=0)
        scores[chset] = {"ID_plate": res["ID_plate"].mean, "OOD_plate": res["OOD_plate"].mean}
    return {"scores": scores, "probe_seconds": time.monotonic() - t0}


# -- criterion 1: channel-permutation invariance -------------------------------

def test_criterion_1_channel_permutation_invariance():
    torch.manual_seed(0)
    model = CampfireMAE(
        ModelConfig(patch_size=14, enc_dim=64, enc_depth=2, enc_heads=2, dec_dim=32, dec_depth=1, dec_heads=2)
    ).eval()
    rng = np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            c = int(rng.integers(2, 6))
            x = torch.from_numpy(rng.normal(size=(1, c, 56, 56)).astype(np.float32))
            perm = torch.from_numpy(rng.permutation(c))
            a = model.embed_tile(x)
            b = model.embed_tile(x[:, perm])
            worst = max(worst, float(torch.max(torch.abs(a - b))))
    assert worst < 1e-5, f"max embedding deviation under channel permutation: {worst}"


# -- criterion 2: objective gradients vs finite differences --------------------

def test_criterion_2_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    shape = (1, 2, 28, 28)
    y = torch.from_numpy(rng.normal(size=shape))
    base = rng.normal(size=shape)
    configs = {
        "spatial": LossWeights(1.0, 0.0, 0.0, 0.0),
        "high_filtered": LossWeights(0.0, 1.0, 0.0, 0.0, h=0.3),
        "low_filtered": LossWeights(0.0, 0.0, 1.0, 0.0, l=0.3),
        "frequency_l1": LossWeights(0.0, 0.0, 0.0, 1.0),
        "combined": LossWeights(0.75, 0.1, 0.25, 0.05),
    }
    eps = 1e-6
    for name, w in configs.items():
        y_hat = torch.from_numpy(base.copy()).requires_grad_(True)
        total_loss(y_hat, y, w).backward()
        grad = y_hat.grad.numpy().ravel()
        flat = base.ravel()
        fd = np.zeros_like(grad)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            fd[i] = (
                total_loss(torch.from_numpy(plus.reshape(shape)), y, w).item()
                - total_loss(torch.from_numpy(minus.reshape(shape)), y, w).item()
            ) / (2 * eps)
        rel = np.linalg.norm(grad - fd) / np.linalg.norm(fd)
        assert rel < 1e-3, f"{name}: relative gradient error {rel}"


# -- criterion 3: frequency filters --------------------------------------------

def test_criterion_3_fft_filters():
    rng = np.random.default_rng(2)
    x = torch.from_numpy(rng.normal(size=(112, 112)).astype(np.float32))
    # round trip
    assert float(torch.max(torch.abs(ifft2_centered(fft2_centered(x)).real - x))) < 1e-5
    coeffs = fft2_centered(x)
    # f = 0 is the identity
    assert torch.equal(zero_outer(coeffs, 0.0), coeffs)
    assert torch.equal(zero_inner(coeffs, 0.0), coeffs)
    for f in (0.05, 0.1, 0.3):
        for mode, fn in (("outer", zero_outer), ("inner", zero_inner)):
            out = fn(coeffs, f)
            # idempotence
            assert torch.equal(fn(out, f), out)
            # zeroed-coefficient count matches independent brute-force enumeration
            ci = cj = 56
            expected = 0
            for i in range(112):
                for j in range(112):
                    ratio = max(abs(i - ci) / ci, abs(j - cj) / cj)
                    if (mode == "outer" and ratio > 1.0 - f) or (mode == "inner" and ratio < f):
                        expected += 1
            mask = fn(torch.ones(112, 112, dtype=torch.complex64), f)
            assert int((mask == 0).sum()) == expected, (mode, f)


# -- criterion 4: split scheme over 50 seeds ------------------------------------

def _big_manifest():
    """25 target plates x 302 compounds (2 controls), one well per compound per plate."""
    compounds = [f"c{i:03d}" for i in range(302)]
    wells, plate_kind = [], {}
    for p in range(25):
        plate = f"plate{p:02d}"
        plate_kind[plate] = "target2"
        for i, comp in enumerate(compounds):
            role = "negative_control" if i == 0 else ("positive_control" if i == 1 else "standard")
            wells.append(WellRecord(plate, f"w{i:03d}", comp, role, [f"t/{plate}/{i}.tile"]))
    return Manifest(wells=wells, plate_kind=plate_kind)


def test_criterion_4_split_invariants_over_50_seeds():
    manifest = _big_manifest()
    cfg_base = SplitConfig(n_heldout_compounds=60, n_ood_plates=5, plates_train=14, plates_val=2, plates_test=4)
    wells_by_compound = {}
    for w in manifest.wells:
        wells_by_compound.setdefault(w.compound_id, []).append(w)
    for seed in range(50):
        cfg = SplitConfig(
            n_heldout_compounds=60, n_ood_plates=5, plates_train=14, plates_val=2, plates_test=4, seed=seed
        )
        a = assign_target2(manifest, cfg)
        report = audit(a, manifest)
        assert report.clean, f"seed {seed}: {report.violations[:3]}"
        ood_compounds = {c for c, s in a.compound_status.items() if s == "OOD"}
        ood_plates = {p for p, s in a.plate_status.items() if s == "OOD"}
        assert len(ood_compounds) == 60, seed
        assert len(ood_plates) == 5, seed
        for comp, comp_wells in wells_by_compound.items():
            if comp in ood_compounds:
                assert all(a.well_split[w.key] == "test" for w in comp_wells)
                continue
            counts = {"train": 0, "val": 0, "test": 0, "excluded": 0}
            for w in comp_wells:
                if w.plate_id not in ood_plates:
                    counts[a.well_split[w.key]] += 1
            assert (counts["train"], counts["val"], counts["test"]) == (14, 2, 4), (seed, comp, counts)
        assert set(report.test_categories.values()) == set(SHIFT_CATEGORIES), seed
    assert cfg_base.plates_total == 20


# -- criterion 5: learning-rate schedule endpoints -------------------------------

def test_criterion_5_lr_schedule_endpoints():
    cfg = OptimConfig(lr_peak=5e-4, lr_warmup_start=1e-5, eta_min=1e-6, warmup_epochs=20, total_epochs=50)
    for steps_per_epoch in (1, 37, 100):
        assert abs(lr_at(0, steps_per_epoch, cfg) - 1e-5) <= 1e-12
        assert abs(lr_at(cfg.warmup_epochs * steps_per_epoch, steps_per_epoch, cfg) - 5e-4) <= 1e-12
        assert abs(lr_at(cfg.total_epochs * steps_per_epoch - 1, steps_per_epoch, cfg) - 1e-6) <= 1e-12
    assert math.cos(math.pi) == -1.0  # the cosine tail reaches eta_min exactly


# -- criterion 6: Z'-score oracles ------------------------------------------------

def test_criterion_6_zprime_oracles():
    # textbook example: X = {-1, 1}, Y = {3, 5} -> 1 - 3*(1+1)/4 = -0.5
    rep = ev.zprime(np.array([[-1.0], [1.0]]), np.array([[3.0], [5.0]]))
    assert rep.defined and abs(rep.z_prime - (-0.5)) <= 1e-9
    # zero-variance groups with separated means -> exactly 1
    rep1 = ev.zprime(np.zeros((3, 2)), np.ones((3, 2)))
    assert rep1.defined and abs(rep1.z_prime - 1.0) <= 1e-9
    # degenerate cases are flagged undefined rather than returning a number
    same = np.array([[0.0, 1.0], [2.0, -1.0]])
    assert not ev.zprime(same, same.copy()).defined
    assert not ev.zprime(np.array([[1.0, 1.0]] * 3), np.array([[1.0, 1.0]] * 4)).defined
    # invariance under a random rotation applied to both groups
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 6))
    Y = rng.normal(size=(25, 6)) + 2.0
    base = ev.zprime(X, Y).z_prime
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    rotated = ev.zprime(X @ Q, Y @ Q).z_prime
    assert abs(base - rotated) <= 1e-9


# -- criterion 7: desk-scale end-to-end run ---------------------------------------

def test_criterion_7_end_to_end_desk_run(desk_run, desk_probes):
    metrics = desk_run["result"].metrics
    first_val, last_val = metrics[0]["val_loss"], metrics[-1]["val_loss"]
    assert last_val <= 0.7 * first_val, f"val loss {first_val} -> {last_val}"

    scores = desk_probes["scores"]
    chance = 1.0 / 9.0
    joint = scores[("Nu", "Ac", "M")]
    assert joint["ID_plate"] >= 2 * chance, joint
    assert joint["OOD_plate"] > chance, joint
    singles_id = max(scores[c]["ID_plate"] for c in (("Nu",), ("Ac",), ("M",)))
    singles_ood = max(scores[c]["OOD_plate"] for c in (("Nu",), ("Ac",), ("M",)))
    assert joint["ID_plate"] >= singles_id, (joint, scores)
    assert joint["OOD_plate"] >= singles_ood, (joint, scores)

    elapsed = desk_run["synth_seconds"] + desk_run["fit_seconds"] + desk_probes["probe_seconds"]
    assert elapsed < 1800, f"desk run took {elapsed:.0f}s"


# -- criterion 8: frozen-backbone finetuning improves separation -------------------

def test_criterion_8_finetune_improves_heldout_zprime(desk_run):
    result = desk_run["result"]
    model = result.model
    manifest, assignment = desk_run["manifest"], desk_run["assignment"]
    train_plates = {k[0] for k, s in assignment.well_split.items() if s == "train"}
    ood_plates = {p for p, s in assignment.plate_status.items() if s == "OOD"}

    table_train = ev.extract_embeddings(model, result.store, manifest, ("Nu", "Ac", "M"), result.stats, plates=train_plates)
    table_ood = ev.extract_embeddings(model, result.store, manifest, ("Nu", "Ac", "M"), result.stats, plates=ood_plates)
    per_well = ev.collect_well_tile_embeddings(table_train)
    labels = {w.key: w.compound_id for w in manifest.wells if w.key in per_well}

    role_of = {w.key: w.role for w in manifest.wells}
    ood_tiles = ev.collect_well_tile_embeddings(table_ood)

    def heldout_zprime(head):
        neg = np.stack([ev.well_embedding(v, head) for k, v in ood_tiles.items() if role_of[k] == "negative_control"])
        pos = np.stack([ev.well_embedding(v, head) for k, v in ood_tiles.items() if role_of[k] == "positive_control"])
        rep = ev.zprime(neg, pos)
        assert rep.defined
        return rep.z_prime

    z_before = heldout_zprime(None)
    checksum_before = parameter_checksum(model)
    head = ev.triplet_finetune(
        model, per_well, labels,
        ev.TripletConfig(hidden=256, out_dim=64, epochs=200, wells_per_batch=16, tiles_per_well=4, seed=0),
    )
    assert parameter_checksum(model) == checksum_before, "backbone changed during finetuning"
    z_after = heldout_zprime(head)
    assert z_after > z_before, f"z' {z_before} -> {z_after}"


# -- criterion 9: bit-exact reproducibility ----------------------------------------

def test_criterion_9_rerun_reproduces_metrics(desk_run, tmp_path):
    rerun = fit(
        desk_run["manifest"], desk_run["assignment"], DESK_MODEL, DESK_OPTIM,
        LossWeights(), desk_run["root"], tmp_path / "rerun",
    )
    first = [{k: v for k, v in e.items() if k != "wall_time"} for e in desk_run["result"].metrics]
    second = [{k: v for k, v in e.items() if k != "wall_time"} for e in rerun.metrics]
    assert first == second
    assert parameter_checksum(rerun.model) == parameter_checksum(desk_run["result"].model)
