# File storage for grids, manifests, checkpoints and reports
# Every writer is deterministic: same inputs give byte-identical files

import base64
import hashlib
import json
import struct
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from catalog import HARTREE_TO_KCAL
from dataset import Dataset, Manifest, SpeciesMeta
from energy import ReactionRecord
from errors import DataError
from functionals import ConventionalSpec
from grid_core import FEATURE_NAMES, MolecularGrid, PointFeatures
from rbnet import ClampConfig, Dense, NetworkParams, ResidualModel, Standardizer

PathLike = Union[str, Path]

GRID_TEXT_MAGIC = "# rbnet-grid-text"
GRID_BINARY_MAGIC = b"RBGRID\x00\x01"
GRID_FORMAT_VERSION = 1
DM21_TEXT_MAGIC = "# rbnet-dm21-factors"
DM21_SUFFIX = ".dm21.txt"
CHECKPOINT_FORMAT = "rbnet-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_FORMAT = "rbnet-manifest"

GRID_COLUMNS = ("x", "y", "z", "weight") + FEATURE_NAMES
TRAINING_LOG_COLUMNS = ("timestamp", "epoch", "learning_rate", "train_loss", "val_loss", "val_rmse_kcal")


def calculate_file_hash(content: Union[bytes, PathLike]) -> str:
    """SHA-256 of bytes or of a file's contents."""
    if not isinstance(content, (bytes, bytearray)):
        content = Path(content).read_bytes()
    return hashlib.sha256(content).hexdigest()


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: {what} is not valid JSON ({e})")


# ============================================================================
# GRIDS
# ============================================================================

def _grid_header(grid: MolecularGrid) -> Dict:
    return {
        "format_version": GRID_FORMAT_VERSION,
        "species_id": grid.species_id,
        "n_electrons_up": grid.n_electrons_up,
        "n_electrons_down": grid.n_electrons_down,
        "n_points": grid.n_points,
        "columns": list(GRID_COLUMNS),
    }


def _grid_matrix(grid: MolecularGrid) -> np.ndarray:
    return np.column_stack([grid.positions, grid.weights, grid.feature_matrix()])


def _grid_from(header: Dict, matrix: np.ndarray, path: PathLike) -> MolecularGrid:
    if header.get("format_version") != GRID_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported grid format version {header.get('format_version')!r}")
    if list(header.get("columns", GRID_COLUMNS)) != list(GRID_COLUMNS):
        raise DataError(f"{path}: grid columns are not in the expected order")
    matrix = np.atleast_2d(matrix)
    if matrix.shape != (int(header["n_points"]), len(GRID_COLUMNS)):
        raise DataError(f"{path}: expected {header['n_points']} rows of {len(GRID_COLUMNS)} columns, got {matrix.shape}")
    return MolecularGrid(
        species_id=str(header["species_id"]),
        positions=matrix[:, 0:3],
        weights=matrix[:, 3],
        features=PointFeatures.from_array(matrix[:, 4:]),
        n_electrons_up=float(header["n_electrons_up"]),
        n_electrons_down=float(header["n_electrons_down"]),
    )


def write_grid_text(grid: MolecularGrid, path: PathLike) -> Path:
    """Human-readable interchange form: '# key: value' header lines, then one row per point."""
    path = Path(path)
    header = _grid_header(grid)
    lines = [GRID_TEXT_MAGIC]
    for key in ("format_version", "species_id", "n_electrons_up", "n_electrons_down", "n_points"):
        lines.append(f"# {key}: {header[key]!r}" if isinstance(header[key], float) else f"# {key}: {header[key]}")
    lines.append("# " + " ".join(GRID_COLUMNS))
    body = [" ".join(f"{v:.17g}" for v in row) for row in _grid_matrix(grid)]
    path.write_text("\n".join(lines + body) + "\n")
    return path


def read_grid_text(path: PathLike) -> MolecularGrid:
    path = Path(path)
    header: Dict = {}
    rows: List[List[float]] = []
    with path.open() as handle:
        first = handle.readline().rstrip("\n")
        if first != GRID_TEXT_MAGIC:
            raise DataError(f"{path}: not a text grid file")
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, value = (part.strip() for part in body.split(":", 1))
                    header[key] = value
                else:
                    header["columns"] = body.split()
                continue
            rows.append([float(v) for v in line.split()])
    try:
        header["format_version"] = int(header["format_version"])
        header["n_points"] = int(header["n_points"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed grid header ({e})")
    return _grid_from(header, np.asarray(rows, dtype=np.float64), path)


def write_grid_binary(grid: MolecularGrid, path: PathLike) -> Path:
    """Compact form: magic, header length, JSON header, little-endian float64 rows."""
    path = Path(path)
    header = json.dumps(_grid_header(grid), sort_keys=True).encode()
    with path.open("wb") as handle:
        handle.write(GRID_BINARY_MAGIC)
        handle.write(struct.pack("<I", len(header)))
        handle.write(header)
        handle.write(np.ascontiguousarray(_grid_matrix(grid), dtype="<f8").tobytes())
    return path


def read_grid_binary(path: PathLike) -> MolecularGrid:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(GRID_BINARY_MAGIC):
        raise DataError(f"{path}: not a binary grid file")
    offset = len(GRID_BINARY_MAGIC)
    try:
        (length,) = struct.unpack("<I", raw[offset:offset + 4])
        header = json.loads(raw[offset + 4:offset + 4 + length])
        data = np.frombuffer(raw[offset + 4 + length:], dtype="<f8").astype(np.float64)
        matrix = data.reshape(-1, len(GRID_COLUMNS))
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated or corrupt binary grid ({e})")
    return _grid_from(header, matrix, path)


def save_grid(grid: MolecularGrid, path: PathLike) -> Path:
    path = Path(path)
    return write_grid_binary(grid, path) if path.suffix == ".bin" else write_grid_text(grid, path)


def load_grid(path: PathLike) -> MolecularGrid:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Grid file not found: {path}")
    return read_grid_binary(path) if path.suffix == ".bin" else read_grid_text(path)


# ============================================================================
# DM21 FACTOR FILES
# ============================================================================

def write_dm21_factors(species_id: str, factors: np.ndarray, path: PathLike) -> Path:
    """Per-point (a1, a2, a3) mixing factors of one species, in grid point order."""
    path = Path(path)
    factors = np.asarray(factors, dtype=np.float64)
    lines = [DM21_TEXT_MAGIC, f"# species_id: {species_id}", f"# n_points: {len(factors)}", "# a1 a2 a3"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in factors]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dm21_factors(path: PathLike) -> Tuple[str, np.ndarray]:
    """Returns (species_id, factors) with factors shaped (n_points, 3)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"DM21 factor file not found: {path}")
    header: Dict = {}
    rows: List[List[float]] = []
    with path.open() as handle:
        if handle.readline().rstrip("\n") != DM21_TEXT_MAGIC:
            raise DataError(f"{path}: not a DM21 factor file")
        for line in handle:
            line = line.strip()
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, value = (part.strip() for part in body.split(":", 1))
                    header[key] = value
            elif line:
                rows.append(line.split())
    try:
        species_id = header["species_id"]
        n_points = int(header["n_points"])
        factors = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed DM21 factor file ({e})")
    if len(factors) != n_points:
        raise DataError(f"{path}: header says {n_points} points but {len(factors)} rows were read", species_id=species_id)
    return species_id, factors


# ============================================================================
# MANIFESTS
# ============================================================================

def write_manifest(manifest: Manifest, path: PathLike) -> Path:
    """Reference energies are stored in kcal/mol, as published benchmark tables give them."""
    path = Path(path)
    payload = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "metadata": manifest.metadata,
        "species": [meta.model_dump() for meta in manifest.species.values()],
        "reactions": [
            {
                "reaction_id": r.reaction_id,
                "dataset": r.dataset,
                "terms": [[s, c] for s, c in r.terms],
                "e_star_kcal": r.e_star * HARTREE_TO_KCAL,
            }
            for r in manifest.reactions
        ],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path: PathLike) -> Manifest:
    """Load a manifest; E* is converted from kcal/mol to hartree here."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    payload = _read_json(path, "manifest")
    if not isinstance(payload, dict) or payload.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a reaction manifest")
    try:
        species = {}
        for entry in payload.get("species", []):
            meta = SpeciesMeta(**entry)
            species[meta.species_id] = meta
        reactions = [
            ReactionRecord(
                reaction_id=entry["reaction_id"],
                dataset=entry.get("dataset", "default"),
                terms=tuple((s, int(c)) for s, c in entry["terms"]),
                e_star=float(entry["e_star_kcal"]) / HARTREE_TO_KCAL,
            )
            for entry in payload.get("reactions", [])
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: invalid manifest entry ({e})")
    manifest = Manifest(species=species, reactions=reactions, metadata=payload.get("metadata", {}))
    manifest.check_species()
    return manifest


def load_dataset(manifest_path: PathLike, grid_dir: Optional[PathLike] = None, factor_dir: Optional[PathLike] = None) -> Dataset:
    """Manifest plus every grid it references (grid paths resolve against grid_dir or the manifest folder).

    DM21 factor files (`<species>.dm21.txt`) are picked up from the grid folder when present.
    With an explicit factor_dir every species must have one.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = Path(grid_dir) if grid_dir is not None else manifest_path.parent
    grids = {}
    for species_id, meta in manifest.species.items():
        grid_file = meta.grid_file or f"{species_id}.grid.txt"
        path = base / grid_file
        if not path.exists():
            raise DataError(f"Grid for species '{species_id}' not found at {path}", species_id=species_id)
        grids[species_id] = load_grid(path)
    factors = {}
    for species_id in manifest.species:
        path = (Path(factor_dir) if factor_dir is not None else base) / f"{species_id}{DM21_SUFFIX}"
        if factor_dir is None and not path.exists():
            continue
        file_species, values = read_dm21_factors(path)
        if file_species != species_id:
            raise DataError(f"{path}: factors belong to '{file_species}', expected '{species_id}'", species_id=species_id)
        factors[species_id] = values
    return Dataset(manifest=manifest, grids=grids, dm21_factors=factors)


def save_dataset(dataset: Dataset, out_dir: PathLike, binary: bool = False) -> Path:
    """Write every grid, any DM21 factors and the manifest into out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".grid.bin" if binary else ".grid.txt"
    species = {}
    for species_id, meta in dataset.manifest.species.items():
        grid_file = f"{species_id}{suffix}"
        save_grid(dataset.grids[species_id], out_dir / grid_file)
        species[species_id] = meta.model_copy(update={"grid_file": grid_file})
    for species_id, values in dataset.dm21_factors.items():
        write_dm21_factors(species_id, values, out_dir / f"{species_id}{DM21_SUFFIX}")
    manifest = Manifest(species=species, reactions=dataset.manifest.reactions, metadata=dataset.manifest.metadata)
    return write_manifest(manifest, out_dir / "manifest.json")



# ============================================================================
# CHECKPOINTS
# ============================================================================

def _encode_array(arr: np.ndarray) -> Dict:
    arr = np.ascontiguousarray(arr)
    dtype = "<f8" if arr.dtype != bool else "|b1"
    return {
        "dtype": dtype,
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype(dtype).tobytes()).decode("ascii"),
    }


def _decode_array(payload: Dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    arr = np.frombuffer(raw, dtype=payload["dtype"]).reshape(payload["shape"])
    return arr.astype(bool) if payload["dtype"] == "|b1" else arr.astype(np.float64)


def checkpoint_payload(model: ResidualModel, conventional: ConventionalSpec, train_config: Optional[Dict] = None, metadata: Optional[Dict] = None) -> Dict:
    params = model.params
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": {
            "feature_set": model.feature_set,
            "loss_mode": model.loss_mode,
            "activation": params.activation,
            "seed": params.seed,
            "init_scheme": params.init_scheme,
            "clamp": model.clamp.model_dump(),
            "layers": {
                name: {"weight": _encode_array(layer.weight), "bias": _encode_array(layer.bias)}
                for name, layer in params.named_layers()
            },
        },
        "standardizer": {
            "shift": _encode_array(model.standardizer.shift),
            "scale": _encode_array(model.standardizer.scale),
            "log_mask": _encode_array(model.standardizer.log_mask),
        },
        "conventional": conventional.model_dump(),
        "train_config": train_config or {},
        "metadata": metadata or {},
    }


def save_checkpoint(path: PathLike, model: ResidualModel, conventional: ConventionalSpec, train_config: Optional[Dict] = None, metadata: Optional[Dict] = None) -> Path:
    """Versioned JSON container; weights are base64 float64 so reload is bit-exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_payload(model, conventional, train_config, metadata)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: PathLike):
    """
    Returns: (model, conventional_spec, train_config dict, metadata dict)
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    payload = _read_json(path, "checkpoint")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    try:
        return _checkpoint_from(payload)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint ({e!r})")


def _checkpoint_from(payload: Dict):
    spec = payload["model"]
    layers = spec["layers"]

    def group(prefix):
        out = []
        i = 0
        while f"{prefix}.{i}" in layers:
            entry = layers[f"{prefix}.{i}"]
            out.append(Dense(_decode_array(entry["weight"]), _decode_array(entry["bias"])))
            i += 1
        return out

    params = NetworkParams(
        trunk=group("trunk"),
        head_mean=group("head_mean"),
        head_var=group("head_var"),
        activation=spec["activation"],
        seed=spec["seed"],
        init_scheme=spec["init_scheme"],
    )
    std = payload["standardizer"]
    model = ResidualModel(
        params=params,
        standardizer=Standardizer(_decode_array(std["shift"]), _decode_array(std["scale"]), _decode_array(std["log_mask"])),
        clamp=ClampConfig(**spec["clamp"]),
        feature_set=spec["feature_set"],
        loss_mode=spec["loss_mode"],
    )
    return model, ConventionalSpec(**payload["conventional"]), payload.get("train_config", {}), payload.get("metadata", {})


# ============================================================================
# TABLES AND LOGS
# ============================================================================

def write_table(frame: pd.DataFrame, path: PathLike) -> Path:
    """Tab-separated with a header row; floats keep full precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", index=False, float_format="%.17g")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Table not found: {path}")
    return pd.read_csv(path, sep="\t", float_precision="round_trip")


def write_split(split, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.model_dump(), indent=1, sort_keys=True) + "\n")
    return path


def read_split(path: PathLike) -> Dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Split file not found: {path}")
    return _read_json(path, "split file")


def append_training_log(path: PathLike, records: List[Dict]) -> Path:
    """Append epoch records; the header is written once, timestamps stay in their own column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with path.open("a") as handle:
        if new_file:
            handle.write("\t".join(TRAINING_LOG_COLUMNS) + "\n")
        for record in records:
            row = dict(record)
            row.setdefault("timestamp", datetime.now().isoformat())
            handle.write("\t".join(
                f"{row[c]:.17g}" if isinstance(row[c], float) else str(row[c]) for c in TRAINING_LOG_COLUMNS
            ) + "\n")
    return path
