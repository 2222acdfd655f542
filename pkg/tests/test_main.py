import json

import numpy as np
import pytest

from main import build_parser, build_run_config, main
from settings import MAX_WORKERS
from storage import calculate_file_hash, load_checkpoint, load_dataset, read_split, read_table, write_dm21_factors

SYNTH = ["--n-species", "12", "--n-reactions", "10", "--points-per-axis", "6", "--seed", "5"]
TINY = ["--hidden-widths", "8,4", "--head-width", "3", "--epochs", "2", "--batch-size", "3", "--learning-rate", "1e-4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", *SYNTH, "--out", str(data)]) == 0
    manifest = data / "manifest.json"
    assert main(["split", "--manifest", str(manifest), "--seed", "5", "--out", str(root)]) == 0
    split = root / "split.json"
    run = root / "run"
    code = main(["train", "--manifest", str(manifest), "--split", str(split), "--seed", "5", *TINY, "--out", str(run)])
    assert code == 0
    return {"root": root, "manifest": manifest, "split": split, "run": run, "checkpoint": run / "checkpoint.json"}


# ===== config assembly =====

def test_flags_override_the_config_file(tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"seed": 3, "train": {"epochs": 7, "learning_rate": 0.01}}))
    args = build_parser().parse_args(["train", "--config", str(config_path), "--epochs", "4"])
    config, _ = build_run_config(args)
    assert config.train.epochs == 4
    assert config.train.learning_rate == 0.01
    assert config.train.seed == 3


def test_unknown_config_key_exits_with_config_code(tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"train": {"epoch": 3}}))
    assert main(["train", "--config", str(config_path)]) == 1


def test_missing_command_and_bad_flag(capsys):
    assert main([]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert "❌" in capsys.readouterr().err


# ===== synth / split =====

def test_synth_is_byte_deterministic(tmp_path):
    args = ["synth", "--n-species", "3", "--n-reactions", "2", "--points-per-axis", "4", "--seed", "9"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert calculate_file_hash(tmp_path / "a" / name) == calculate_file_hash(tmp_path / "b" / name)


def test_synth_rejects_empty_reaction_set(tmp_path):
    assert main(["synth", "--n-species", "3", "--n-reactions", "0", "--out", str(tmp_path)]) == 1


def test_synth_rejects_more_reactions_than_species(tmp_path):
    assert main(["synth", "--n-species", "2", "--n-reactions", "3", "--out", str(tmp_path)]) == 1


def test_split_file_partitions_every_reaction(workspace):
    split = read_split(workspace["split"])
    manifest = json.loads(workspace["manifest"].read_text())
    ids = {r["reaction_id"] for r in manifest["reactions"]}
    assigned = split["train"] + split["validation"] + split["test"]
    assert sorted(assigned) == sorted(ids)
    assert (len(split["train"]), len(split["validation"]), len(split["test"])) == (6, 2, 2)


def test_manifest_with_missing_species_exits_with_data_code(tmp_path):
    payload = {
        "format": "rbnet-manifest",
        "species": [{"species_id": "H", "composition": {"H": 1}}],
        "reactions": [{"reaction_id": "r", "terms": [["H2", -1], ["H", 2]], "e_star_kcal": 1.0}],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(payload))
    assert main(["split", "--manifest", str(path), "--out", str(tmp_path)]) == 2


def test_missing_manifest_path_exits_with_data_code(tmp_path):
    assert main(["split", "--manifest", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2


# ===== train / eval / export / sweep =====

def test_train_writes_checkpoint_and_log(workspace):
    model, spec, train_config, metadata = load_checkpoint(workspace["checkpoint"])
    assert model.feature_set == "Y16"
    assert train_config["epochs"] == 2 and train_config["hidden_widths"] == [8, 4]
    assert "best_epoch" in metadata
    log = read_table(workspace["run"] / "train_log.tsv")
    assert list(log["epoch"]) == [1, 2]


def test_eval_writes_summary(workspace, tmp_path):
    args = ["eval", "--manifest", str(workspace["manifest"]), "--split", str(workspace["split"])]
    code = main([*args, "--checkpoint", str(workspace["checkpoint"]), "--partition", "all", "--out", str(tmp_path)])
    assert code == 0
    summary = read_table(tmp_path / "eval_summary.tsv")
    assert set(summary["metric"]) == {"rmse", "mae", "mad"}
    assert len(read_table(tmp_path / "eval_reactions.tsv")) == 10
    assert len(read_table(tmp_path / "eval_baseline.tsv")) == 10


def test_eval_needs_a_checkpoint(workspace, tmp_path):
    assert main(["eval", "--manifest", str(workspace["manifest"]), "--out", str(tmp_path)]) == 1


def test_eval_rejects_feature_set_mismatch(workspace, tmp_path):
    args = ["eval", "--manifest", str(workspace["manifest"]), "--split", str(workspace["split"])]
    code = main([*args, "--checkpoint", str(workspace["checkpoint"]), "--feature-set", "X11", "--out", str(tmp_path)])
    assert code == 1


def test_export_residuals_for_one_species(workspace, tmp_path):
    manifest = json.loads(workspace["manifest"].read_text())
    species_id = manifest["species"][0]["species_id"]
    args = ["export-residuals", "--manifest", str(workspace["manifest"]), "--checkpoint", str(workspace["checkpoint"])]
    assert main([*args, "--species", species_id, "--out", str(tmp_path)]) == 0
    field = read_table(tmp_path / f"residuals_{species_id}.tsv")
    assert len(field) == 6 ** 3


def test_export_unknown_species_exits_with_data_code(workspace, tmp_path):
    args = ["export-residuals", "--manifest", str(workspace["manifest"]), "--checkpoint", str(workspace["checkpoint"])]
    assert main([*args, "--species", "mol_9999", "--out", str(tmp_path)]) == 2


def test_sweep_writes_one_row_per_setting(workspace, tmp_path):
    args = ["sweep", "--manifest", str(workspace["manifest"]), "--split", str(workspace["split"]), *TINY]
    assert main([*args, "--k1-values", "0,1", "--k2-values", "1", "--out", str(tmp_path)]) == 0
    table = read_table(tmp_path / "sweep.tsv")
    assert len(table) == 2
    zero = table[table["k1"] == 0.0].iloc[0]
    assert zero["rmse"] == zero["baseline_rmse"]


# ===== per-point DM21 factors / worker pool =====

def test_workers_flag_sets_the_pool_width():
    config, _ = build_run_config(build_parser().parse_args(["eval", "--workers", "2"]))
    assert config.max_workers == 2
    assert build_run_config(build_parser().parse_args(["eval"]))[0].max_workers == MAX_WORKERS
    assert main(["train", "--workers", "0"]) == 1


def test_factor_dir_feeds_train_and_export(workspace, tmp_path):
    factor_dir = tmp_path / "factors"
    factor_dir.mkdir()
    dataset = load_dataset(workspace["manifest"])
    for species_id, grid in dataset.grids.items():
        write_dm21_factors(species_id, np.tile([0.6, 0.25, 0.15], (grid.n_points, 1)), factor_dir / f"{species_id}.dm21.txt")
    config_path = tmp_path / "dm21.json"
    config_path.write_text(json.dumps({"conventional": {"kind": "DM21_FORM", "dm21_per_point": True}}))

    data = ["--manifest", str(workspace["manifest"]), "--split", str(workspace["split"]), "--config", str(config_path)]
    run = tmp_path / "run"
    assert main(["train", *data, *TINY, "--factor-dir", str(factor_dir), "--workers", "1", "--out", str(run)]) == 0
    checkpoint = str(run / "checkpoint.json")
    assert load_checkpoint(checkpoint)[1].dm21_per_point

    species_id = next(iter(dataset.grids))
    export = ["export-residuals", "--manifest", str(workspace["manifest"]), "--checkpoint", checkpoint, "--species", species_id]
    assert main([*export, "--factor-dir", str(factor_dir), "--out", str(tmp_path)]) == 0
    assert len(read_table(tmp_path / f"residuals_{species_id}.tsv")) == 6 ** 3
    assert main([*export, "--out", str(tmp_path)]) == 1
    assert main([*export, "--factor-dir", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 2
