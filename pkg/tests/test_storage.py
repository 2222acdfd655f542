import json

import numpy as np
import pandas as pd
import pytest

from catalog import HARTREE_TO_KCAL
from dataset import Dataset
from errors import DataError
from functionals import ConventionalSpec
from rbnet import ClampConfig, ResidualModel, Standardizer, default_log_mask, init_params
from storage import (
    TRAINING_LOG_COLUMNS,
    append_training_log,
    calculate_file_hash,
    load_checkpoint,
    load_dataset,
    load_grid,
    read_dm21_factors,
    read_manifest,
    read_split,
    read_table,
    save_checkpoint,
    save_dataset,
    save_grid,
    write_dm21_factors,
    write_split,
    write_table,
)
from training import SplitAssignment


def assert_same_grid(a, b):
    assert a.species_id == b.species_id
    assert (a.n_electrons_up, a.n_electrons_down) == (b.n_electrons_up, b.n_electrons_down)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.weights, b.weights)
    np.testing.assert_array_equal(a.feature_matrix(), b.feature_matrix())


def trained_looking_model(seed=0):
    params = init_params(seed, hidden_widths=(8, 4), head_width=3)
    rng = np.random.default_rng(seed)
    params.head_mean[1].weight[:] = rng.normal(size=(3, 1)) / 3.0
    rows = rng.lognormal(size=(40, 16))
    return ResidualModel(params, Standardizer.fit(rows, default_log_mask("Y16")), ClampConfig(k1=0.8, k2=1.5))


# ===== grids =====

@pytest.mark.parametrize("suffix", [".grid.txt", ".grid.bin"])
def test_grid_round_trip_is_exact(two_electron_grid, tmp_path, suffix):
    path = save_grid(two_electron_grid, tmp_path / f"he{suffix}")
    assert_same_grid(load_grid(path), two_electron_grid)


def test_text_grid_header(two_electron_grid, tmp_path):
    path = save_grid(two_electron_grid, tmp_path / "he.grid.txt")
    lines = path.read_text().splitlines()
    assert lines[0] == "# rbnet-grid-text"
    assert "# species_id: two_electron" in lines
    assert len(lines) == 7 + two_electron_grid.n_points


def test_grid_writes_are_byte_identical(two_electron_grid, tmp_path):
    a = save_grid(two_electron_grid, tmp_path / "a.grid.bin")
    b = save_grid(load_grid(a), tmp_path / "b.grid.bin")
    assert calculate_file_hash(a) == calculate_file_hash(b)


def test_missing_grid_file(tmp_path):
    with pytest.raises(DataError):
        load_grid(tmp_path / "nope.grid.txt")


def test_truncated_text_grid_is_rejected(two_electron_grid, tmp_path):
    path = save_grid(two_electron_grid, tmp_path / "he.grid.txt")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(DataError):
        load_grid(path)


def test_wrong_magic_is_rejected(tmp_path):
    path = tmp_path / "junk.grid.bin"
    path.write_bytes(b"not a grid at all")
    with pytest.raises(DataError):
        load_grid(path)


@pytest.mark.parametrize("cut", [5, 8, 8 * 15])
def test_truncated_binary_grid_is_rejected(two_electron_grid, tmp_path, cut):
    path = save_grid(two_electron_grid, tmp_path / "he.grid.bin")
    path.write_bytes(path.read_bytes()[:-cut])
    with pytest.raises(DataError):
        load_grid(path)


# ===== manifests / datasets =====

def test_dataset_round_trip(small_dataset, tmp_path):
    manifest_path = save_dataset(small_dataset, tmp_path / "data")
    loaded = load_dataset(manifest_path)
    assert [r.reaction_id for r in loaded.reactions] == [r.reaction_id for r in small_dataset.reactions]
    for original, reread in zip(small_dataset.reactions, loaded.reactions):
        assert reread.terms == original.terms
        assert reread.e_star == pytest.approx(original.e_star, rel=1e-14)
    for species_id, grid in small_dataset.grids.items():
        assert_same_grid(loaded.grids[species_id], grid)
    assert loaded.manifest.metadata["truth"]["amplitude"] == small_dataset.manifest.metadata["truth"]["amplitude"]


def test_manifest_stores_kcal(small_dataset, tmp_path):
    manifest_path = save_dataset(small_dataset, tmp_path / "data")
    payload = json.loads(manifest_path.read_text())
    first = payload["reactions"][0]
    assert payload["format"] == "rbnet-manifest"
    assert first["e_star_kcal"] == small_dataset.reactions[0].e_star * HARTREE_TO_KCAL


def test_manifest_converts_kcal_to_hartree(tmp_path):
    payload = {
        "format": "rbnet-manifest",
        "version": 1,
        "species": [
            {"species_id": "H2", "composition": {"H": 2}},
            {"species_id": "H", "composition": {"H": 1}},
        ],
        "reactions": [{"reaction_id": "h2", "terms": [["H2", -1], ["H", 2]], "e_star_kcal": HARTREE_TO_KCAL}],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(payload))
    manifest = read_manifest(path)
    assert manifest.reactions[0].e_star == 1.0
    assert manifest.reactions[0].dataset == "default"


def test_manifest_with_unknown_species(tmp_path):
    payload = {
        "format": "rbnet-manifest",
        "species": [{"species_id": "H", "composition": {"H": 1}}],
        "reactions": [{"reaction_id": "r", "terms": [["H2", -1], ["H", 2]], "e_star_kcal": 1.0}],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(DataError) as info:
        read_manifest(path)
    assert info.value.species_id == "H2"


def test_dataset_with_missing_grid(small_dataset, tmp_path):
    manifest_path = save_dataset(small_dataset, tmp_path / "data")
    atom = next(sid for sid in small_dataset.grids if sid.startswith("atom_"))
    (tmp_path / "data" / f"{atom}.grid.txt").unlink()
    with pytest.raises(DataError) as info:
        load_dataset(manifest_path)
    assert info.value.species_id == atom


def test_malformed_manifest_json_is_a_data_error(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{\"format\": \"rbnet-manifest\", \"species\": [")
    with pytest.raises(DataError):
        read_manifest(path)
    path.write_text(json.dumps({"format": "rbnet-manifest", "species": [{"species_id": "H"}], "reactions": []}))
    with pytest.raises(DataError):
        read_manifest(path)


# ===== DM21 factor files =====

def test_dataset_round_trip_carries_dm21_factors(small_dataset, tmp_path):
    rng = np.random.default_rng(8)
    factors = {sid: rng.uniform(-1, 1, size=(grid.n_points, 3)) for sid, grid in small_dataset.grids.items()}
    dataset = Dataset(small_dataset.manifest, small_dataset.grids, factors)
    manifest_path = save_dataset(dataset, tmp_path / "data")
    loaded = load_dataset(manifest_path)
    assert sorted(loaded.dm21_factors) == sorted(factors)
    for species_id, values in factors.items():
        np.testing.assert_array_equal(loaded.dm21_factors[species_id], values)


def test_datasets_without_factor_files_load_empty(small_dataset, tmp_path):
    assert load_dataset(save_dataset(small_dataset, tmp_path / "data")).dm21_factors == {}


def test_explicit_factor_dir_needs_every_species(small_dataset, tmp_path):
    manifest_path = save_dataset(small_dataset, tmp_path / "data")
    factor_dir = tmp_path / "factors"
    factor_dir.mkdir()
    first, grid = next(iter(small_dataset.grids.items()))
    write_dm21_factors(first, np.zeros((grid.n_points, 3)), factor_dir / f"{first}.dm21.txt")
    with pytest.raises(DataError):
        load_dataset(manifest_path, factor_dir=factor_dir)


def test_factor_file_header_is_checked(tmp_path):
    path = write_dm21_factors("H", np.ones((4, 3)), tmp_path / "H.dm21.txt")
    assert read_dm21_factors(path)[0] == "H"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataError):
        read_dm21_factors(path)
    path.write_text("\n".join(lines[:4] + ["1 2"]) + "\n")
    with pytest.raises(DataError):
        read_dm21_factors(path)
    path.write_text("\n".join(["# rbnet-grid-text"] + lines[1:]) + "\n")
    with pytest.raises(DataError):
        read_dm21_factors(path)


def test_factor_file_for_another_species_is_rejected(small_dataset, tmp_path):
    manifest_path = save_dataset(small_dataset, tmp_path / "data")
    first, grid = next(iter(small_dataset.grids.items()))
    write_dm21_factors("someone_else", np.zeros((grid.n_points, 3)), tmp_path / "data" / f"{first}.dm21.txt")
    with pytest.raises(DataError) as info:
        load_dataset(manifest_path)
    assert info.value.species_id == first


# ===== checkpoints =====

def test_checkpoint_reload_is_bit_exact(tmp_path):
    model = trained_looking_model()
    spec = ConventionalSpec(vwn_variant="VWN5")
    path = save_checkpoint(tmp_path / "ckpt.json", model, spec, {"epochs": 3}, {"best_epoch": 2})
    loaded, loaded_spec, train_config, metadata = load_checkpoint(path)
    for a, b in zip(model.params.arrays(), loaded.params.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(loaded.standardizer.shift, model.standardizer.shift)
    np.testing.assert_array_equal(loaded.standardizer.log_mask, model.standardizer.log_mask)
    assert loaded.clamp == model.clamp
    assert loaded.feature_set == "Y16" and loaded.loss_mode == "RBNET"
    assert loaded_spec == spec
    assert train_config == {"epochs": 3}
    assert metadata == {"best_epoch": 2}


def test_checkpoint_resave_is_byte_identical(tmp_path):
    model = trained_looking_model(1)
    first = save_checkpoint(tmp_path / "a.json", model, ConventionalSpec())
    loaded, spec, train_config, metadata = load_checkpoint(first)
    second = save_checkpoint(tmp_path / "b.json", loaded, spec, train_config, metadata)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(DataError):
        load_checkpoint(path)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.json")
    path.write_text(json.dumps({"format": "rbnet-checkpoint", "version": 1, "model": {}}))
    with pytest.raises(DataError):
        load_checkpoint(path)
    path.write_text("not json")
    with pytest.raises(DataError):
        load_checkpoint(path)


# ===== tables / logs =====

def test_table_round_trip_keeps_full_precision(tmp_path):
    frame = pd.DataFrame({"name": ["a", "b"], "value": [1.0 / 3.0, np.pi * 1e-12]})
    path = write_table(frame, tmp_path / "t.tsv")
    back = read_table(path)
    assert list(back["name"]) == ["a", "b"]
    np.testing.assert_array_equal(back["value"], frame["value"])


def test_split_file(tmp_path):
    split = SplitAssignment(train=["a", "b"], validation=["c"], test=["d"], seed=3)
    path = write_split(split, tmp_path / "split.json")
    assert SplitAssignment(**read_split(path)) == split


def test_training_log_appends_under_one_header(tmp_path):
    path = tmp_path / "log.tsv"
    record = {"epoch": 1, "learning_rate": 1e-3, "train_loss": 0.5, "val_loss": 0.6, "val_rmse_kcal": 2.0}
    append_training_log(path, [record])
    append_training_log(path, [{**record, "epoch": 2}])
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == list(TRAINING_LOG_COLUMNS)
    assert len(lines) == 3
    assert lines[2].split("\t")[1] == "2"


def test_file_hash_of_bytes_and_path(tmp_path):
    path = tmp_path / "blob"
    path.write_bytes(b"abc")
    expected = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert calculate_file_hash(b"abc") == expected
    assert calculate_file_hash(path) == expected
