import os

import numpy as np
import pytest
import torch

from campfire.data_model import Manifest, Tile, WellRecord

torch.set_num_threads(min(4, os.cpu_count() or 1))


def make_tile(channels=("Nu", "Ac"), size=28, seed=0, well_ref=""):
    rng = np.random.default_rng(seed)
    return Tile(tuple(channels), rng.normal(size=(len(channels), size, size)).astype(np.float32), well_ref)


def make_manifest(n_plates=5, compounds=("c000", "c001", "c002"), controls=1, kind="target2", tiles_per_well=1):
    """One well per compound per plate; the first `controls` compounds are controls."""
    wells, plate_kind = [], {}
    for p in range(n_plates):
        plate = f"plate{p:02d}"
        plate_kind[plate] = kind
        for i, comp in enumerate(compounds):
            role = "negative_control" if i == 0 and controls else ("positive_control" if i < controls else "standard")
            uris = [f"tiles/{plate}/w{i:03d}_t{t:02d}.tile" for t in range(tiles_per_well)]
            wells.append(WellRecord(plate, f"A{i + 1:02d}", comp, role, uris))
    return Manifest(wells=wells, plate_kind=plate_kind)


@pytest.fixture
def tiny_model_cfg():
    from campfire.model_core import ModelConfig

    return ModelConfig(patch_size=14, enc_dim=64, enc_depth=2, enc_heads=2, dec_dim=32, dec_depth=1, dec_heads=2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small rendered dataset shared by training/evaluation/cli tests."""
    from campfire.split_scheme import SplitConfig, assign_target2
    from campfire.synthetic_data import SynthConfig, generate_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    cfg = SynthConfig(
        n_target_plates=4,
        n_ood_plates_hint=1,
        wells_per_plate=9,
        n_compounds=3,
        n_pos_controls=2,
        n_neg_controls=1,
        tiles_per_well=2,
        tile_size=56,
        seed=0,
    )
    manifest, manifest_path = generate_dataset(cfg, root)
    split_cfg = SplitConfig(n_heldout_compounds=0, n_ood_plates=1, plates_train=2, plates_val=1, plates_test=1, seed=0)
    assignment = assign_target2(manifest, split_cfg)
    return {
        "root": root,
        "synth_cfg": cfg,
        "manifest": manifest,
        "manifest_path": manifest_path,
        "split_cfg": split_cfg,
        "assignment": assignment,
    }


@pytest.fixture(scope="session")
def tiny_fit(tiny_dataset, tmp_path_factory):
    """Two-epoch pretraining run on the tiny dataset."""
    from campfire.model_core import ModelConfig
    from campfire.objective import LossWeights
    from campfire.training import OptimConfig, fit

    out = tmp_path_factory.mktemp("tiny_run")
    model_cfg = ModelConfig(patch_size=14, enc_dim=64, enc_depth=2, enc_heads=2, dec_dim=32, dec_depth=1, dec_heads=2)
    optim_cfg = OptimConfig(warmup_epochs=1, total_epochs=2, batch_size=8, seed=0)
    result = fit(
        tiny_dataset["manifest"],
        tiny_dataset["assignment"],
        model_cfg,
        optim_cfg,
        LossWeights(),
        tiny_dataset["root"],
        out,
    )
    return {"result": result, "model_cfg": model_cfg, "optim_cfg": optim_cfg, "out": out, **tiny_dataset}


ACCEPTANCE_PREFIX = "tests/test_acceptance.py::test_criterion_"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::", 1)[1]
            number = name.replace("test_criterion_", "").split("_")[0]
            tag = "PASS" if outcome == "passed" else "FAIL"
            lines[int(number)] = f"[{tag}] criterion {number}: {name}"
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
