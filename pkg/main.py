# Command-line entry point
# python main.py <synth|split|train|eval|export-residuals|sweep> [options]

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import ConfigError, DataError, RBNetError, exit_code_for
from evaluation import evaluate_checkpoints, export_model_residuals, sweep_clamp
from functionals import ConventionalSpec
from settings import MAX_WORKERS, get_output_root
from storage import (
    load_checkpoint,
    load_dataset,
    read_split,
    save_checkpoint,
    save_dataset,
    write_split,
    write_table,
)
from synth_oracle import DEFAULT_POINTS_PER_AXIS, TruthSpec, make_synthetic_dataset
from training import SplitAssignment, TrainConfig, split_dataset, train

PARTITIONS = ("train", "validation", "test", "all")


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_species: int = Field(200, ge=1)
    n_reactions: int = Field(200, ge=1)
    points_per_axis: int = Field(DEFAULT_POINTS_PER_AXIS, ge=2)
    amplitude: float = Field(0.25, ge=0.0, le=0.3)
    binary: bool = False


class RunConfig(BaseModel):
    """Config file of record. Flags given on the command line win over these values."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out: Optional[str] = None
    manifest: Optional[str] = None
    grid_dir: Optional[str] = None
    factor_dir: Optional[str] = None
    split: Optional[str] = None
    repetitions: int = Field(1, ge=1)
    partition: str = "test"
    max_workers: int = Field(MAX_WORKERS, ge=1)
    train: TrainConfig = TrainConfig()
    conventional: ConventionalSpec = ConventionalSpec()
    synth: SynthConfig = SynthConfig()


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError instead of exiting."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ============================================================================
# CONFIG ASSEMBLY
# ============================================================================

def _read_config_file(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}", field="config")
    try:
        return json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_path} is not valid JSON ({e})", field="config")


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# (flag attribute, path inside the config)
OVERRIDES: List[Tuple[str, Tuple[str, ...]]] = [
    ("seed", ("seed",)),
    ("out", ("out",)),
    ("manifest", ("manifest",)),
    ("grid_dir", ("grid_dir",)),
    ("factor_dir", ("factor_dir",)),
    ("max_workers", ("max_workers",)),
    ("split", ("split",)),
    ("repetitions", ("repetitions",)),
    ("partition", ("partition",)),
    ("n_species", ("synth", "n_species")),
    ("n_reactions", ("synth", "n_reactions")),
    ("points_per_axis", ("synth", "points_per_axis")),
    ("amplitude", ("synth", "amplitude")),
    ("binary", ("synth", "binary")),
    ("epochs", ("train", "epochs")),
    ("learning_rate", ("train", "learning_rate")),
    ("batch_size", ("train", "batch_size")),
    ("loss_mode", ("train", "loss_mode")),
    ("feature_set", ("train", "feature_set")),
    ("hidden_widths", ("train", "hidden_widths")),
    ("head_width", ("train", "head_width")),
    ("activation", ("train", "activation")),
    ("momentum", ("train", "momentum")),
    ("k1", ("train", "clamp", "k1")),
    ("k2", ("train", "clamp", "k2")),
    ("functional", ("conventional", "kind")),
    ("vwn_variant", ("conventional", "vwn_variant")),
]


def build_run_config(args: argparse.Namespace) -> Tuple[RunConfig, Dict]:
    """
    Merge the config file with command-line flags (flags win).

    Returns: (validated RunConfig, the merged raw dict)

    Raises:
        ConfigError: unknown keys or invalid values; `field` names the first offending key
    """
    raw = _read_config_file(getattr(args, "config", None))
    for attr, path in OVERRIDES:
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        node = raw
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    train_section = raw.setdefault("train", {})
    if "seed" in raw:
        train_section["seed"] = raw["seed"]
    try:
        return RunConfig.model_validate(raw), raw
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid config value for '{field}': {first['msg']}", field=field)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out) if config.out else get_output_root()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(config: RunConfig, name: str) -> str:
    value = getattr(config, name)
    if not value:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command", field=name)
    if not Path(value).exists():
        raise DataError(f"{name} path does not exist: {value}", field=name)
    return value


def _load(config: RunConfig):
    factor_dir = _require(config, "factor_dir") if config.factor_dir else None
    return load_dataset(_require(config, "manifest"), config.grid_dir, factor_dir)


def _split_for(config: RunConfig, dataset) -> SplitAssignment:
    if config.split:
        return SplitAssignment(**read_split(_require(config, "split")))
    return split_dataset(dataset.reactions, dataset.manifest.species, config.seed)


def _partition_ids(split: SplitAssignment, partition: str, dataset) -> List[str]:
    if partition not in PARTITIONS:
        raise ConfigError(f"partition must be one of {PARTITIONS}", field="partition")
    if partition == "all":
        return [r.reaction_id for r in dataset.reactions]
    return list(getattr(split, partition))


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(config: RunConfig, raw: Dict) -> int:
    s = config.synth
    truth = TruthSpec(amplitude=s.amplitude, conventional=config.conventional)
    dataset = make_synthetic_dataset(s.n_species, s.n_reactions, config.seed, truth, s.points_per_axis, verbose=True)
    manifest_path = save_dataset(dataset, _out_dir(config), binary=s.binary)
    print(f"💾 Wrote {len(dataset.grids)} grids and {manifest_path}")
    return 0


def cmd_split(config: RunConfig, raw: Dict) -> int:
    dataset = _load(config)
    split = split_dataset(dataset.reactions, dataset.manifest.species, config.seed)
    path = write_split(split, _out_dir(config) / "split.json")
    n_train, n_val, n_test = split.sizes()
    print(f"✅ Split {len(dataset.reactions)} reactions: {n_train} train / {n_val} validation / {n_test} test")
    print(f"💾 {path}")
    return 0


def cmd_train(config: RunConfig, raw: Dict) -> int:
    dataset = _load(config)
    split = _split_for(config, dataset)
    out = _out_dir(config)
    for rep in range(config.repetitions):
        seed = config.seed + rep
        train_config = config.train.model_copy(update={"seed": seed})
        suffix = "" if config.repetitions == 1 else f"_seed{seed}"
        log_path = out / f"train_log{suffix}.tsv"
        if log_path.exists():
            log_path.unlink()
        result = train(
            train_config, dataset, split, config.conventional, verbose=True, log_path=log_path, max_workers=config.max_workers
        )
        path = save_checkpoint(
            out / f"checkpoint{suffix}.json",
            result.model,
            config.conventional,
            train_config.model_dump(mode="json"),
            result.metadata(),
        )
        print(f"💾 Checkpoint {path} (best validation RMSE {result.best_val_rmse_kcal:.4f} kcal/mol)")
    return 0


def cmd_eval(config: RunConfig, raw: Dict, checkpoints: List[str]) -> int:
    if not checkpoints:
        raise ConfigError("--checkpoint is required for eval", field="checkpoint")
    dataset = _load(config)
    split = _split_for(config, dataset)
    records = dataset.manifest.select(_partition_ids(split, config.partition, dataset))

    models, spec = [], None
    for path in checkpoints:
        model, conventional, _, _ = load_checkpoint(path)
        wanted = raw.get("train", {}).get("feature_set")
        if wanted is not None and wanted != model.feature_set:
            raise ConfigError(
                f"Checkpoint {path} was trained on {model.feature_set} features, config asks for {wanted}",
                field="feature_set",
            )
        if spec is not None and conventional != spec:
            raise ConfigError(f"Checkpoint {path} uses a different conventional functional", field="conventional")
        spec = conventional
        models.append(model)

    report = evaluate_checkpoints(dataset, records, spec, models, config.max_workers, verbose=True)
    out = _out_dir(config)
    write_table(report.baseline_rows, out / "eval_baseline.tsv")
    for i, rows in enumerate(report.model_rows):
        write_table(rows, out / ("eval_reactions.tsv" if len(models) == 1 else f"eval_reactions_{i}.tsv"))
    path = write_table(report.summary, out / "eval_summary.tsv")
    print(f"💾 {path}")
    return 0


def cmd_export(config: RunConfig, raw: Dict, checkpoint: Optional[str], species_id: Optional[str]) -> int:
    if not checkpoint or not species_id:
        raise ConfigError("export-residuals needs --checkpoint and --species", field="species" if checkpoint else "checkpoint")
    dataset = _load(config)
    if species_id not in dataset.grids:
        raise DataError(f"Unknown species '{species_id}'", species_id=species_id)
    model, conventional, _, _ = load_checkpoint(checkpoint)
    field = export_model_residuals(dataset.grids[species_id], conventional, model, dataset.dm21_factors.get(species_id))
    path = write_table(field, _out_dir(config) / f"residuals_{species_id}.tsv")
    print(f"💾 {len(field)} points -> {path}")
    return 0


def cmd_sweep(config: RunConfig, raw: Dict, k1_values: List[float], k2_values: List[float]) -> int:
    dataset = _load(config)
    split = _split_for(config, dataset)
    table = sweep_clamp(
        config.train, dataset, split, config.conventional, k1_values, k2_values, verbose=True, max_workers=config.max_workers
    )
    path = write_table(table, _out_dir(config) / "sweep.tsv")
    print(f"💾 {len(table)} settings -> {path}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbnet", description="Residual XC-uncertain functional: data, training and evaluation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="Seed for generation, splitting and training")
    common.add_argument("--out", help="Output directory (default: $RBNET_OUTPUT_ROOT or ./runs)")
    common.add_argument("--manifest", help="Reaction manifest (JSON)")
    common.add_argument("--grid-dir", dest="grid_dir", help="Directory holding grid files (default: manifest folder)")
    common.add_argument("--factor-dir", dest="factor_dir", help="Directory of per-point DM21 factor files (<species>.dm21.txt)")
    common.add_argument("--split", help="Split file written by the split command")
    common.add_argument("--workers", dest="max_workers", type=int, help="Species evaluated in parallel")
    common.add_argument("--functional", choices=["B3LYP", "DM21_FORM", "LDA_ONLY"], help="Conventional functional")
    common.add_argument("--vwn-variant", dest="vwn_variant", help="VWN parameter set")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--learning-rate", dest="learning_rate", type=float)
    training.add_argument("--batch-size", dest="batch_size", type=int)
    training.add_argument("--loss-mode", dest="loss_mode", choices=["RBNET", "DIRECT_U", "MSE_RESNET"])
    training.add_argument("--feature-set", dest="feature_set", choices=["Y16", "X11"])
    training.add_argument("--hidden-widths", dest="hidden_widths", type=_int_list, help="Comma-separated trunk widths")
    training.add_argument("--head-width", dest="head_width", type=int)
    training.add_argument("--activation", choices=["silu", "tanh", "softplus"])
    training.add_argument("--momentum", type=float)
    training.add_argument("--k1", type=float)
    training.add_argument("--k2", type=float)

    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--n-species", dest="n_species", type=int)
    synth.add_argument("--n-reactions", dest="n_reactions", type=int)
    synth.add_argument("--points-per-axis", dest="points_per_axis", type=int)
    synth.add_argument("--amplitude", type=float, help="Residual amplitude (<= 0.3)")
    synth.add_argument("--binary", action="store_true", help="Write binary grid files")

    sub.add_parser("split", parents=[common], help="Partition reactions 6:2:2")

    tr = sub.add_parser("train", parents=[common, training], help="Train a residual model")
    tr.add_argument("--repetitions", type=int, help="Train this many seeds (seed, seed+1, ...)")

    ev = sub.add_parser("eval", parents=[common, training], help="Evaluate checkpoints against the baseline")
    ev.add_argument("--checkpoint", action="append", default=[], help="Checkpoint file (repeat for repetitions)")
    ev.add_argument("--partition", choices=PARTITIONS)

    ex = sub.add_parser("export-residuals", parents=[common], help="Write the per-point residual field of one species")
    ex.add_argument("--checkpoint")
    ex.add_argument("--species")

    sw = sub.add_parser("sweep", parents=[common, training], help="Retrain over a k1 x k2 grid")
    sw.add_argument("--k1-values", dest="k1_values", type=_float_list, default=[1.0])
    sw.add_argument("--k2-values", dest="k2_values", type=_float_list, default=[1.0])
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not args.command:
        raise ConfigError("a command is required: synth, split, train, eval, export-residuals or sweep")
    config, raw = build_run_config(args)
    if args.command == "synth":
        return cmd_synth(config, raw)
    if args.command == "split":
        return cmd_split(config, raw)
    if args.command == "train":
        return cmd_train(config, raw)
    if args.command == "eval":
        return cmd_eval(config, raw, args.checkpoint)
    if args.command == "export-residuals":
        return cmd_export(config, raw, args.checkpoint, args.species)
    return cmd_sweep(config, raw, args.k1_values, args.k2_values)


def main(argv: Optional[List[str]] = None) -> int:
    """Run a command and map failures to exit codes (1 config, 2 data, 3 numerical)."""
    try:
        return run(argv)
    except RBNetError as e:
        print(f"❌ {e}", file=sys.stderr)
        return exit_code_for(e)
    except ValidationError as e:
        print(f"❌ Invalid value: {e.errors()[0]['msg']}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
