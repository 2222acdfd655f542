# Evaluation - error metrics, significance testing, reaction reports, residual fields and clamp sweeps
# Energies stay in hartree until a report is built; reports carry both hartree and kcal/mol

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from catalog import HARTREE_TO_KCAL
from dataset import Dataset
from energy import ReactionRecord, evaluate_species_batch, prepare_species, reaction_energy
from errors import ConfigError, DataError
from functionals import ConventionalSpec
from grid_core import MolecularGrid
from rbnet import ClampConfig, NetworkParams, ResidualModel, Standardizer, clamp_residual, forward
from settings import MAX_WORKERS

RESIDUAL_LOG_FLOOR = 1e-30
METRICS = ("rmse", "mae", "mad")
ALL_DATASETS = "all"

REACTION_COLUMNS = [
    "reaction_id", "dataset",
    "e_conv_ha", "e_ru_ha", "sigma_ha", "prediction_ha", "e_star_ha", "error_ha",
    "e_conv_kcal", "e_ru_kcal", "sigma_kcal", "prediction_kcal", "e_star_kcal", "error_kcal",
]
RESIDUAL_FIELD_COLUMNS = ["x", "y", "z", "log_abs_e_bar", "s_bar", "rho"]


@dataclass
class MetricReport:
    """Error statistics in kcal/mol. MAD is taken about the mean error."""

    rmse: float
    mae: float
    mad: float
    n: int
    per_reaction_errors: List[float] = field(default_factory=list)

    def as_dict(self) -> Dict:
        return {"rmse": self.rmse, "mae": self.mae, "mad": self.mad, "n": self.n}


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def compute_metrics(errors: Sequence[float]) -> MetricReport:
    """
    RMSE, MAE and MAD of signed errors (predicted - reference, kcal/mol).

    Raises:
        DataError: errors is empty
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise DataError("Cannot compute metrics of an empty error list")
    # scaled by the largest error so tiny errors do not underflow when squared
    peak = float(np.max(np.abs(e)))
    rmse = peak * float(np.sqrt(np.mean((e / peak) ** 2))) if peak > 0 else 0.0
    mae = float(np.mean(np.abs(e)))
    mad = float(np.mean(np.abs(e - e.mean())))
    return MetricReport(rmse=rmse, mae=mae, mad=mad, n=int(e.size), per_reaction_errors=e.tolist())


def improvement_pct(baseline_metric: float, new_metric: float) -> float:
    """Relative reduction of a metric against the baseline, in percent."""
    if not baseline_metric > 0:
        raise DataError(f"Baseline metric must be positive (got {baseline_metric})")
    return 100.0 * (baseline_metric - new_metric) / baseline_metric


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> WelchResult:
    """
    Two-sided Welch t-test. t and p come from scipy.stats.ttest_ind(equal_var=False);
    df is the Welch-Satterthwaite value.

    Raises:
        DataError: a sample has fewer than two values, or both samples have zero variance
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError(f"Welch's t-test needs at least two values per sample (got {a.size} and {b.size})")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va + vb == 0:
        raise DataError("Welch's t-test is undefined when both samples have zero variance")
    result = stats.ttest_ind(a, b, equal_var=False)
    df = float((va + vb) ** 2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1)))
    t, p = float(result.statistic), float(result.pvalue)
    return WelchResult(t=t, df=df, p=min(max(p, 0.0), 1.0))


def significance_marker(p: float) -> str:
    """'✓' below 0.05, '★' below 0.10, '' otherwise."""
    if p is None or not math.isfinite(p):
        return ""
    if p < 0.05:
        return "✓"
    if p < 0.10:
        return "★"
    return ""


# ============================================================================
# REACTION REPORTS
# ============================================================================

def evaluate_reactions(
    dataset: Dataset,
    records: Sequence[ReactionRecord],
    spec: ConventionalSpec,
    model: Optional[ResidualModel] = None,
    max_workers: int = MAX_WORKERS,
) -> pd.DataFrame:
    """
    One row per reaction (REACTION_COLUMNS). A None model gives the conventional baseline.
    """
    species_ids = dataset.species_for(records)
    energies = evaluate_species_batch(dataset.grids, spec, model, species_ids, max_workers, dataset.dm21_factors)
    epsilon = model.clamp.epsilon if model is not None else ClampConfig().epsilon
    rows = []
    for record in records:
        b = reaction_energy(record, energies, epsilon)
        values_ha = [b.e_conv_total, b.e_ru_total, b.sigma, b.prediction, record.e_star, b.prediction - record.e_star]
        rows.append([record.reaction_id, record.dataset] + values_ha + [v * HARTREE_TO_KCAL for v in values_ha])
    return pd.DataFrame(rows, columns=REACTION_COLUMNS)


def metrics_by_dataset(rows: pd.DataFrame) -> pd.DataFrame:
    """RMSE / MAE / MAD in kcal/mol per dataset tag, plus an 'all' row."""
    out = []
    for tag in sorted(rows["dataset"].unique()) + [ALL_DATASETS]:
        subset = rows if tag == ALL_DATASETS else rows[rows["dataset"] == tag]
        report = compute_metrics(subset["error_kcal"].to_numpy())
        out.append({"dataset": tag, **report.as_dict()})
    return pd.DataFrame(out, columns=["dataset", "n"] + list(METRICS))


@dataclass
class EvaluationReport:
    baseline_rows: pd.DataFrame
    model_rows: List[pd.DataFrame]
    summary: pd.DataFrame


def _welch_row(baseline_abs: np.ndarray, model_abs: np.ndarray) -> Dict:
    try:
        result = welch_t_test(baseline_abs, model_abs)
    except DataError:
        return {"t": float("nan"), "df": float("nan"), "p": float("nan"), "marker": ""}
    return {"t": result.t, "df": result.df, "p": result.p, "marker": significance_marker(result.p)}


def compare_to_baseline(baseline_rows: pd.DataFrame, model_rows: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """
    Per dataset tag and metric: baseline value, model mean and std over repetitions,
    improvement of the mean, and Welch's test of per-reaction absolute errors
    (baseline vs the repetition-averaged model errors).
    """
    if not model_rows:
        raise DataError("Nothing to compare: no model results")
    baseline_metrics = metrics_by_dataset(baseline_rows).set_index("dataset")
    per_model = [metrics_by_dataset(rows).set_index("dataset") for rows in model_rows]
    mean_abs = np.mean([np.abs(rows["error_kcal"].to_numpy()) for rows in model_rows], axis=0)

    out = []
    for tag in baseline_metrics.index:
        mask = np.ones(len(baseline_rows), dtype=bool) if tag == ALL_DATASETS else (baseline_rows["dataset"] == tag).to_numpy()
        welch = _welch_row(np.abs(baseline_rows["error_kcal"].to_numpy()[mask]), mean_abs[mask])
        for metric in METRICS:
            values = np.array([m.loc[tag, metric] for m in per_model])
            base = float(baseline_metrics.loc[tag, metric])
            mean = float(values.mean())
            out.append({
                "dataset": tag,
                "metric": metric,
                "n": int(baseline_metrics.loc[tag, "n"]),
                "baseline": base,
                "model_mean": mean,
                "model_std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
                "improvement_pct": improvement_pct(base, mean) if base > 0 else float("nan"),
                "repetitions": int(values.size),
                **welch,
            })
    return pd.DataFrame(out)


def evaluate_checkpoints(
    dataset: Dataset,
    records: Sequence[ReactionRecord],
    spec: ConventionalSpec,
    models: Sequence[ResidualModel],
    max_workers: int = MAX_WORKERS,
    verbose: bool = False,
) -> EvaluationReport:
    """Baseline vs one or more trained models (repetitions) on the same reactions."""
    if not records:
        raise DataError("No reactions to evaluate")
    baseline_rows = evaluate_reactions(dataset, records, spec, None, max_workers)
    model_rows = [evaluate_reactions(dataset, records, spec, m, max_workers) for m in models]
    summary = compare_to_baseline(baseline_rows, model_rows)
    if verbose:
        for _, row in summary[summary["dataset"] == ALL_DATASETS].iterrows():
            print(
                f"📊 {row['metric'].upper()}: baseline {row['baseline']:.4f}, model {row['model_mean']:.4f} "
                f"± {row['model_std']:.2e} kcal/mol ({row['improvement_pct']:+.2f}%) {row['marker']}"
            )
    return EvaluationReport(baseline_rows=baseline_rows, model_rows=model_rows, summary=summary)


# ============================================================================
# RESIDUAL FIELDS
# ============================================================================

def export_residual_field(
    grid: MolecularGrid,
    spec: ConventionalSpec,
    params: NetworkParams,
    cfg: ClampConfig,
    standardizer: Optional[Standardizer] = None,
    dm21_factors=None,
) -> pd.DataFrame:
    """
    Per-point residual field: position, log(|e_bar| + 1e-30), s_bar and rho.

    Only the residual energy density is exported; the network is a pointwise
    function of the features, so symmetric densities give symmetric fields.
    """
    feature_set = "Y16" if params.input_width == 16 else "X11"
    prepared = prepare_species(grid, spec, feature_set, dm21_factors)
    inputs = prepared.inputs if standardizer is None else standardizer.apply(prepared.inputs)
    e0, s0 = forward(params, inputs)
    out = clamp_residual(e0, s0, prepared.e_conv, cfg)
    return pd.DataFrame({
        "x": grid.positions[:, 0],
        "y": grid.positions[:, 1],
        "z": grid.positions[:, 2],
        "log_abs_e_bar": np.log(np.abs(out.e_bar) + RESIDUAL_LOG_FLOOR),
        "s_bar": out.s_bar,
        "rho": grid.rho,
    }, columns=RESIDUAL_FIELD_COLUMNS)


def export_model_residuals(grid: MolecularGrid, spec: ConventionalSpec, model: ResidualModel, dm21_factors=None) -> pd.DataFrame:
    if model.direct:
        raise ConfigError("A direct-mode model predicts the full energy density and has no residual field", field="loss_mode")
    return export_residual_field(grid, spec, model.params, model.clamp, model.standardizer, dm21_factors)


# ============================================================================
# CLAMP SWEEP
# ============================================================================

def held_out_rmse(
    dataset: Dataset,
    records: Sequence[ReactionRecord],
    spec: ConventionalSpec,
    model: Optional[ResidualModel],
    max_workers: int = MAX_WORKERS,
) -> float:
    rows = evaluate_reactions(dataset, records, spec, model, max_workers)
    return compute_metrics(rows["error_kcal"].to_numpy()).rmse


def sweep_clamp(
    config,
    dataset: Dataset,
    split,
    spec: ConventionalSpec,
    k1_values: Sequence[float],
    k2_values: Sequence[float],
    verbose: bool = False,
    max_workers: int = MAX_WORKERS,
) -> pd.DataFrame:
    """
    Retrain and evaluate for every (k1, k2) pair; everything else in config stays fixed.

    RMSE is measured on the test reactions (validation when the test split is empty).
    """
    from training import train

    held_out = split.test or split.validation
    if not held_out:
        raise DataError("Sweep needs test or validation reactions")
    records = dataset.manifest.select(held_out)
    baseline = held_out_rmse(dataset, records, spec, None, max_workers)
    rows = []
    for k1 in k1_values:
        for k2 in k2_values:
            clamp = ClampConfig(k1=k1, k2=k2, epsilon=config.clamp.epsilon)
            result = train(config.model_copy(update={"clamp": clamp}), dataset, split, spec, max_workers=max_workers)
            rmse = held_out_rmse(dataset, records, spec, result.model, max_workers)
            rows.append({"k1": float(k1), "k2": float(k2), "rmse": rmse, "baseline_rmse": baseline})
            if verbose:
                print(f"📊 k1={k1:g} k2={k2:g}: RMSE {rmse:.4f} kcal/mol (baseline {baseline:.4f})")
    return pd.DataFrame(rows, columns=["k1", "k2", "rmse", "baseline_rmse"])
