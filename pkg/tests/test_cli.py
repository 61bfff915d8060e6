import json

import numpy as np
import pytest
from click.testing import CliRunner

from campfire.cli import main


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """synth -> split -> train -> embed pipeline driven through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(
        "\n".join(
            [
                "[synth]",
                "n_target_plates = 3",
                "n_ood_plates_hint = 1",
                "wells_per_plate = 3",
                "n_compounds = 3",
                "n_pos_controls = 2",
                "n_neg_controls = 1",
                "tiles_per_well = 2",
                "tile_size = 56",
                "[split]",
                "n_heldout_compounds = 0",
                "n_ood_plates = 1",
                "plates_train = 1",
                "plates_val = 1",
                "plates_test = 1",
                "[model]",
                "enc_dim = 64",
                "enc_depth = 2",
                "enc_heads = 2",
                "dec_dim = 32",
                "dec_depth = 1",
                "dec_heads = 2",
                "[optim]",
                "warmup_epochs = 1",
                "total_epochs = 2",
                "batch_size = 4",
                "[eval]",
                "n_subsets = 2",
                "probe_epochs = 20",
            ]
        )
        + "\n"
    )
    runner = CliRunner()
    data = root / "data"
    r = runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(data)])
    assert r.exit_code == 0, r.output
    manifest = data / "manifest.tsv"
    split = root / "split.tsv"
    r = runner.invoke(main, ["split", "--config", str(cfg), "--manifest", str(manifest), "--out", str(split)])
    assert r.exit_code == 0, r.output
    run_dir = root / "run"
    r = runner.invoke(
        main,
        [
            "train", "--config", str(cfg), "--manifest", str(manifest),
            "--assignment", str(split), "--data-dir", str(data), "--out", str(run_dir),
        ],
    )
    assert r.exit_code == 0, r.output
    return {
        "root": root, "cfg": cfg, "data": data, "manifest": manifest,
        "split": split, "run_dir": run_dir, "runner": runner,
    }


def test_synth_produces_dataset_and_run_record(cli_workspace):
    assert cli_workspace["manifest"].exists()
    record = json.loads((cli_workspace["data"] / "run_record_synth.json").read_text())
    assert record["command"] == "synth"
    assert record["config"]["synth"]["n_target_plates"] == 3
    assert "wall_time" in record


def test_audit_command_reports_clean(cli_workspace):
    runner = cli_workspace["runner"]
    report = cli_workspace["root"] / "audit.json"
    r = runner.invoke(
        main,
        ["audit", "--manifest", str(cli_workspace["manifest"]), "--assignment", str(cli_workspace["split"]), "--out", str(report)],
    )
    assert r.exit_code == 0, r.output
    assert "audit clean" in r.output
    payload = json.loads(report.read_text())
    assert payload["violations"] == []


def test_train_writes_checkpoint_and_metrics(cli_workspace):
    assert (cli_workspace["run_dir"] / "checkpoint.ckpt").exists()
    lines = (cli_workspace["run_dir"] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads((cli_workspace["run_dir"] / "run_record_train.json").read_text())
    assert str(cli_workspace["manifest"]) in record["input_checksums"]


def test_embed_and_zprime_commands(cli_workspace):
    runner = cli_workspace["runner"]
    emb = cli_workspace["root"] / "emb.bin"
    r = runner.invoke(
        main,
        [
            "embed", "--checkpoint", str(cli_workspace["run_dir"] / "checkpoint.ckpt"),
            "--manifest", str(cli_workspace["manifest"]), "--data-dir", str(cli_workspace["data"]),
            "--channels", "Nu,Ac", "--out", str(emb), "--tsv", str(cli_workspace["root"] / "emb.tsv"),
        ],
    )
    assert r.exit_code == 0, r.output
    from campfire.evaluation import EmbeddingTable

    table = EmbeddingTable.load(emb)
    assert table.channel_set == ("Nu", "Ac")
    assert len(table) == sum(1 for _ in open(cli_workspace["root"] / "emb.tsv")) - 1

    zp = cli_workspace["root"] / "zp.json"
    r = runner.invoke(main, ["zprime", "--embeddings", str(emb), "--out", str(zp)])
    assert r.exit_code == 0, r.output
    payload = json.loads(zp.read_text())
    assert set(payload["labels"]) == {"c000", "c001", "c002"}
    assert len(payload["pairs"]) == 6


def test_finetune_command_keeps_backbone_frozen(cli_workspace):
    runner = cli_workspace["runner"]
    head = cli_workspace["root"] / "head.bin"
    # train on the two ID plates that have training wells
    r = runner.invoke(
        main,
        [
            "finetune", "--checkpoint", str(cli_workspace["run_dir"] / "checkpoint.ckpt"),
            "--manifest", str(cli_workspace["manifest"]), "--data-dir", str(cli_workspace["data"]),
            "--train-plates", "plate00,plate01", "--out", str(head),
            "--config", str(cli_workspace["cfg"]),
        ],
    )
    assert r.exit_code == 0, r.output
    from campfire.container import read_container
    from campfire.model_core import load_checkpoint, parameter_checksum

    meta, tensors = read_container(head)
    assert meta["kind"] == "triplet_head"
    model, _, _ = load_checkpoint(cli_workspace["run_dir"] / "checkpoint.ckpt")
    assert meta["backbone_checksum"] == parameter_checksum(model)


def test_reconstruct_command_writes_png(cli_workspace):
    runner = cli_workspace["runner"]
    png = cli_workspace["root"] / "recon.png"
    r = runner.invoke(
        main,
        [
            "reconstruct", "--checkpoint", str(cli_workspace["run_dir"] / "checkpoint.ckpt"),
            "--manifest", str(cli_workspace["manifest"]), "--data-dir", str(cli_workspace["data"]),
            "--plate", "plate00", "--well", "A01", "--out", str(png),
        ],
    )
    assert r.exit_code == 0, r.output
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_validation_errors_exit_1(cli_workspace, tmp_path):
    runner = cli_workspace["runner"]
    bad_manifest = tmp_path / "bad.tsv"
    bad_manifest.write_text("plate\twell\n")
    r = runner.invoke(main, ["split", "--manifest", str(bad_manifest), "--out", str(tmp_path / "s.tsv")])
    assert r.exit_code == 1
    bad_cfg = tmp_path / "bad.ini"
    bad_cfg.write_text("[nothing]\nx = 1\n")
    r = runner.invoke(main, ["synth", "--config", str(bad_cfg), "--out", str(tmp_path / "d")])
    assert r.exit_code == 1


def test_missing_inputs_exit_nonzero(cli_workspace, tmp_path):
    runner = cli_workspace["runner"]
    r = runner.invoke(main, ["audit", "--manifest", str(tmp_path / "nope.tsv"), "--assignment", str(tmp_path / "nope2.tsv")])
    assert r.exit_code != 0


def test_probe_command(cli_workspace, tmp_path):
    """Controls probes run end to end through the CLI on the tiny dataset."""
    runner = cli_workspace["runner"]
    emb = cli_workspace["root"] / "emb_full.bin"
    r = runner.invoke(
        main,
        [
            "embed", "--checkpoint", str(cli_workspace["run_dir"] / "checkpoint.ckpt"),
            "--manifest", str(cli_workspace["manifest"]), "--data-dir", str(cli_workspace["data"]),
            "--channels", "Nu,Ac,M", "--out", str(emb),
        ],
    )
    assert r.exit_code == 0, r.output
    out = tmp_path / "probe.json"
    r = runner.invoke(
        main,
        [
            "probe", "--config", str(cli_workspace["cfg"]), "--embeddings", str(emb),
            "--manifest", str(cli_workspace["manifest"]),
            "--assignment", str(cli_workspace["split"]), "--task", "controls", "--out", str(out),
        ],
    )
    assert r.exit_code == 0, r.output
    payload = json.loads(out.read_text())
    assert "ID_plate" in payload and "OOD_plate" in payload
    assert 0.0 <= payload["ID_plate"]["mean"] <= 1.0
