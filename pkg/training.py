# Training - losses, learning-rate schedule, dataset partition and the SGD loop
# Reactions are the training unit; gradients flow back through reaction sums, species integrals and the clamp

import concurrent.futures
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from catalog import ATOMIC_NUMBERS, HARTREE_TO_KCAL, SIZE_BUCKETS, size_bucket
from dataset import Dataset, SpeciesMeta
from energy import (
    EnergyBreakdown,
    PreparedSpecies,
    ReactionRecord,
    SpeciesEnergies,
    evaluate_prepared,
    prepare_species,
    reaction_energy,
    species_gradients,
)
from errors import DataError, NumericalError
from functionals import ConventionalSpec
from rbnet import (
    ACTIVATIONS,
    DEFAULT_HIDDEN_WIDTHS,
    FEATURE_WIDTHS,
    ClampConfig,
    Dense,
    NetworkParams,
    ResidualModel,
    Standardizer,
    default_log_mask,
    init_params,
)
from settings import MAX_WORKERS

LOSS_MODES = ("RBNET", "DIRECT_U", "MSE_RESNET")
SPLIT_RATIOS = (0.6, 0.2, 0.2)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    loss_mode: str = "RBNET"
    feature_set: str = "Y16"
    clamp: ClampConfig = ClampConfig()
    hidden_widths: Tuple[int, ...] = DEFAULT_HIDDEN_WIDTHS
    head_width: int = Field(50, ge=1)
    activation: str = "silu"
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    min_learning_rate: float = Field(0.0, ge=0.0)
    divergence_factor: float = Field(1e6, gt=1.0)
    # global-norm clip on each batch gradient; None turns clipping off
    gradient_clip: Optional[float] = Field(1.0, gt=0.0)
    # leading share of epochs that fit the mean with squared error before the NLL takes over
    mean_warmup_fraction: float = Field(0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.feature_set not in FEATURE_WIDTHS:
            raise ValueError(f"feature_set must be one of {tuple(FEATURE_WIDTHS)}")
        if self.loss_mode == "DIRECT_U" and self.feature_set != "X11":
            raise ValueError("loss_mode DIRECT_U predicts from the 11 raw features; set feature_set to X11")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden_widths must be a nonempty list of positive widths")
        if self.min_learning_rate > self.learning_rate:
            raise ValueError("min_learning_rate cannot exceed learning_rate")
        return self

    def warmup_epochs(self) -> int:
        """Epochs trained on squared error first (never any in MSE_RESNET mode, which is all squared error)."""
        if self.loss_mode == "MSE_RESNET":
            return 0
        return math.ceil(self.mean_warmup_fraction * self.epochs)


class SplitAssignment(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train: List[str]
    validation: List[str]
    test: List[str]
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _disjoint(self):
        seen = set()
        for name in ("train", "validation", "test"):
            for reaction_id in getattr(self, name):
                if reaction_id in seen:
                    raise ValueError(f"reaction '{reaction_id}' is assigned twice")
                seen.add(reaction_id)
        return self

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


# ============================================================================
# LOSSES
# ============================================================================

def _check_lengths(*seqs) -> int:
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise DataError(f"Loss inputs have mismatched lengths {[len(s) for s in seqs]}")
    if n == 0:
        raise DataError("Loss needs at least one reaction")
    return n


def nll_terms(residuals, log_variances) -> np.ndarray:
    """0.5 exp(-s) r^2 + 0.5 s, elementwise."""
    r = np.asarray(residuals, dtype=np.float64)
    s = np.asarray(log_variances, dtype=np.float64)
    return 0.5 * np.exp(-s) * r * r + 0.5 * s


def rbnet_loss(breakdowns: Sequence[EnergyBreakdown], references: Sequence[float]) -> Tuple[float, np.ndarray]:
    """
    Mean heteroscedastic loss over reactions, with the per-reaction terms.

    The residual of a reaction is E° - E* + E^RU.
    """
    _check_lengths(breakdowns, references)
    residuals = [b.e_conv_total - ref + b.e_ru_total for b, ref in zip(breakdowns, references)]
    terms = nll_terms(residuals, [b.s for b in breakdowns])
    return float(np.mean(terms)), terms


def direct_loss(
    e_u: Sequence[float], sigmas: Sequence[float], references: Sequence[float], epsilon: float = 1e-4
) -> float:
    """
    Same inverse-variance form as rbnet_loss, for directly predicted energies E^U with std sigma.

    log sigma^2 is floored at log epsilon, as reaction log-variances are.
    """
    _check_lengths(e_u, sigmas, references)
    if any(not sigma >= 0 for sigma in sigmas):
        raise DataError("direct_loss needs non-negative, non-NaN sigmas")
    residuals = [u - ref for u, ref in zip(e_u, references)]
    floor = math.log(epsilon)
    log_variances = [max(math.log(sigma * sigma), floor) if sigma > 0 else floor for sigma in sigmas]
    return float(np.mean(nll_terms(residuals, log_variances)))


def mse_loss(predictions: Sequence[float], references: Sequence[float]) -> float:
    _check_lengths(predictions, references)
    errors = np.asarray(predictions, dtype=np.float64) - np.asarray(references, dtype=np.float64)
    return float(np.mean(errors * errors))


def _loss_gradients(loss_mode: str, breakdown: EnergyBreakdown, reference: float, n: int) -> Tuple[float, float, float]:
    """
    (term, dL/dE^RU_rxn, dL/dsigma_rxn) for one reaction of a batch of n.
    """
    r = breakdown.e_conv_total - reference + breakdown.e_ru_total
    if loss_mode == "MSE_RESNET":
        return r * r, 2.0 * r / n, 0.0
    inv_var = math.exp(-breakdown.s)
    term = 0.5 * inv_var * r * r + 0.5 * breakdown.s
    d_s = 0.5 * (1.0 - inv_var * r * r) / n
    d_sigma = 0.0 if breakdown.s_floored else d_s * 2.0 / breakdown.sigma
    return term, inv_var * r / n, d_sigma


# ============================================================================
# SCHEDULE / OPTIMIZER
# ============================================================================

class CosineSchedule:
    """Single cosine decay from base_lr at epoch 0 to min_lr at the last epoch."""

    def __init__(self, base_lr: float, epochs: int, min_lr: float = 0.0):
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.t_max = max(epochs - 1, 1)

    def get_lr(self, epoch: int) -> float:
        cos_factor = 0.5 * (1.0 + math.cos(math.pi * min(epoch, self.t_max) / self.t_max))
        return self.min_lr + cos_factor * (self.base_lr - self.min_lr)


class MomentumSGD:
    """v <- momentum * v + g;  p <- p - lr * v."""

    def __init__(self, params: NetworkParams, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: NetworkParams, grads: NetworkParams, lr: float) -> NetworkParams:
        updated = []
        for i, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            self.velocity[i] = self.momentum * self.velocity[i] + g
            updated.append(p - lr * self.velocity[i])
        return params.with_arrays(updated)


def clip_gradients(grads: NetworkParams, max_norm: Optional[float]) -> NetworkParams:
    """Scale every gradient array by one factor so the global L2 norm is at most max_norm."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays()))
    if not math.isfinite(norm):
        raise NumericalError(f"Gradient norm is not finite ({norm!r})")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return grads.with_arrays([g * scale for g in grads.arrays()])


# ============================================================================
# SPLIT
# ============================================================================

def _subject_species(record: ReactionRecord) -> List[str]:
    return record.reactants()


def split_dataset(
    reactions: Sequence[ReactionRecord],
    species: Dict[str, SpeciesMeta],
    seed: int = 0,
    required_elements: Optional[Sequence[str]] = None,
) -> SplitAssignment:
    """
    Partition reactions 6:2:2 while every element stays represented in training.

    Order of assignment:
      1. reactions whose reactants are all single-element species go to train
      2. elements by descending atomic number: an uncovered element pulls one random
         reaction containing it into train
      3. every reactant size bucket (2, 3, 4, 5, 6, >6) gets at least one train reaction
      4. the rest is shuffled and fills train, validation and test

    Raises:
        DataError: an element (from required_elements) appears in no reaction's species
    """
    n = len(reactions)
    if n == 0:
        raise DataError("Cannot split an empty reaction list")
    for record in reactions:
        for species_id in record.species_ids():
            if species_id not in species:
                raise DataError(f"Reaction '{record.reaction_id}' references unknown species '{species_id}'", species_id=species_id)

    rng = np.random.default_rng(seed)
    n_train = int(round(SPLIT_RATIOS[0] * n))
    n_val = int(round(SPLIT_RATIOS[1] * n))
    n_test = n - n_train - n_val

    def elements_of(record):
        return {e for sid in record.species_ids() for e in species[sid].composition}

    def subject_atoms(record):
        return sum(species[sid].atom_count for sid in _subject_species(record))

    train = set()
    for i, record in enumerate(reactions):
        subjects = _subject_species(record)
        if subjects and all(species[sid].single_element for sid in subjects):
            train.add(i)

    present = set().union(*(elements_of(r) for r in reactions))
    required = set(required_elements) if required_elements is not None else present
    for element in sorted(required, key=lambda e: -ATOMIC_NUMBERS.get(e, 0)):
        if any(element in elements_of(reactions[i]) for i in train):
            continue
        candidates = [i for i, r in enumerate(reactions) if i not in train and element in elements_of(r)]
        if not candidates:
            raise DataError(f"Element '{element}' appears in no species of the dataset", field=element)
        train.add(candidates[int(rng.integers(len(candidates)))])

    for bucket in SIZE_BUCKETS:
        in_bucket = [i for i, r in enumerate(reactions) if size_bucket(subject_atoms(r)) == bucket]
        if not in_bucket or any(i in train for i in in_bucket):
            continue
        train.add(in_bucket[int(rng.integers(len(in_bucket)))])

    rest = [i for i in range(n) if i not in train]
    rest = [rest[j] for j in rng.permutation(len(rest))]
    take = max(0, n_train - len(train))
    train.update(rest[:take])
    rest = rest[take:]
    n_val_eff = n_val if len(rest) == n_val + n_test else int(round(len(rest) * n_val / max(n_val + n_test, 1)))
    validation = set(rest[:n_val_eff])
    test = set(rest[n_val_eff:])

    ids = lambda chosen: [reactions[i].reaction_id for i in range(n) if i in chosen]
    return SplitAssignment(train=ids(train), validation=ids(validation), test=ids(test), seed=seed)


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float
    val_rmse_kcal: float

    def as_dict(self) -> Dict:
        return {
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_rmse_kcal": self.val_rmse_kcal,
        }


@dataclass
class TrainResult:
    model: ResidualModel
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse_kcal: float = math.inf
    baseline_val_rmse_kcal: float = math.inf

    def metadata(self) -> Dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_rmse_kcal": self.best_val_rmse_kcal,
            "baseline_val_rmse_kcal": self.baseline_val_rmse_kcal,
            "epochs_run": len(self.history),
        }


def _ordered_map(fn: Callable, items: Sequence, max_workers: int) -> List:
    """fn over items on a thread pool; results come back in input order."""
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(fn, items))


def _sum_grads(grads: List[NetworkParams]) -> NetworkParams:
    total = [a.copy() for a in grads[0].arrays()]
    for g in grads[1:]:
        for acc, a in zip(total, g.arrays()):
            acc += a
    return grads[0].with_arrays(total)


class _Trainer:
    """Holds the prepared species and evaluates / differentiates reaction batches."""

    def __init__(self, config: TrainConfig, prepared: Dict[str, PreparedSpecies], standardizer: Standardizer, max_workers: int):
        self.config = config
        self.prepared = prepared
        self.standardizer = standardizer
        self.direct = config.loss_mode == "DIRECT_U"
        self.max_workers = max_workers

    def energies(self, params: NetworkParams, species_ids: Sequence[str]) -> Dict[str, SpeciesEnergies]:
        fn = lambda sid: evaluate_prepared(self.prepared[sid], params, self.config.clamp, self.standardizer, self.direct)
        return dict(zip(species_ids, _ordered_map(fn, list(species_ids), self.max_workers)))

    def breakdowns(self, params: NetworkParams, records: Sequence[ReactionRecord]) -> List[EnergyBreakdown]:
        energies = self.energies(params, _species_of(records))
        return [reaction_energy(r, energies, self.config.clamp.epsilon) for r in records]

    def loss(self, params: NetworkParams, records: Sequence[ReactionRecord]) -> Tuple[float, float]:
        """(mode loss, RMSE in kcal/mol) over the records."""
        breakdowns = self.breakdowns(params, records)
        references = [r.e_star for r in records]
        if self.config.loss_mode == "MSE_RESNET":
            value = mse_loss([b.prediction for b in breakdowns], references)
        else:
            value, _ = rbnet_loss(breakdowns, references)
        errors = np.array([b.prediction - ref for b, ref in zip(breakdowns, references)]) * HARTREE_TO_KCAL
        return value, float(np.sqrt(np.mean(errors * errors)))

    def batch_gradients(
        self, params: NetworkParams, records: Sequence[ReactionRecord], mean_only: bool = False
    ) -> Tuple[float, NetworkParams]:
        """
        Forward pass for energies, loss gradients per reaction, then cached re-forward + backward per species.

        mean_only takes squared-error gradients and leaves the variance head still;
        the returned loss is always the configured mode's loss.
        """
        species_ids = _species_of(records)
        energies = self.energies(params, species_ids)
        n = len(records)
        d_e_ru = {sid: 0.0 for sid in species_ids}
        d_sigma = {sid: 0.0 for sid in species_ids}
        total = 0.0
        for record in records:
            breakdown = reaction_energy(record, energies, self.config.clamp.epsilon)
            term, g_e, g_sigma = _loss_gradients(self.config.loss_mode, breakdown, record.e_star, n)
            if mean_only:
                _, g_e, g_sigma = _loss_gradients("MSE_RESNET", breakdown, record.e_star, n)
            if not (math.isfinite(term) and math.isfinite(g_e) and math.isfinite(g_sigma)):
                raise NumericalError(
                    f"Non-finite loss on reaction '{record.reaction_id}' (s = {breakdown.s!r}, sigma = {breakdown.sigma!r})",
                    reaction_id=record.reaction_id,
                )
            total += term
            for species_id, coefficient in record.terms:
                d_e_ru[species_id] += coefficient * g_e
                d_sigma[species_id] += abs(coefficient) * g_sigma

        def grad_one(sid):
            return species_gradients(
                self.prepared[sid], params, self.config.clamp, d_e_ru[sid], d_sigma[sid], self.standardizer, self.direct
            )

        grads = _sum_grads(_ordered_map(grad_one, species_ids, self.max_workers))
        if mean_only or self.config.loss_mode == "MSE_RESNET":
            grads.head_var = [Dense(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in grads.head_var]
        return total / n, grads


def _species_of(records: Sequence[ReactionRecord]) -> List[str]:
    ordered, seen = [], set()
    for record in records:
        for species_id in record.species_ids():
            if species_id not in seen:
                seen.add(species_id)
                ordered.append(species_id)
    return ordered


def fit_standardizer(prepared: Dict[str, PreparedSpecies], species_ids: Sequence[str], feature_set: str) -> Standardizer:
    rows = np.concatenate([prepared[sid].inputs for sid in species_ids], axis=0)
    return Standardizer.fit(rows, default_log_mask(feature_set))


def train(
    config: TrainConfig,
    dataset: Dataset,
    split: SplitAssignment,
    spec: ConventionalSpec,
    verbose: bool = False,
    log_path=None,
    dm21_factors: Optional[Dict[str, np.ndarray]] = None,
    max_workers: int = MAX_WORKERS,
) -> TrainResult:
    """
    Train a residual model with momentum SGD and a cosine learning rate.

    Args:
        config: training hyperparameters (loss mode, feature set, clamp, widths)
        dataset: manifest plus grids
        split: reaction ids per partition; train must be nonempty
        spec: the conventional functional the residual sits on
        verbose: print one status line per epoch
        log_path: optional training log file, appended per epoch
        dm21_factors: per-species (N, 3) per-point DM21 factors; defaults to the ones the dataset carries

    Returns: TrainResult whose model is the lowest-validation-RMSE checkpoint

    Raises:
        DataError: split references unknown reactions or has an empty train set
        NumericalError: non-finite loss or divergence past divergence_factor x the initial loss
    """
    if not split.train:
        raise DataError("Training split is empty")
    train_records = dataset.manifest.select(split.train)
    val_records = dataset.manifest.select(split.validation) if split.validation else train_records

    needed = _species_of(list(train_records) + list(val_records))
    factors = dm21_factors if dm21_factors is not None else dataset.dm21_factors
    prepared = {
        sid: prepare_species(dataset.grids[sid], spec, config.feature_set, factors.get(sid))
        for sid in needed
    }
    standardizer = fit_standardizer(prepared, _species_of(train_records), config.feature_set)
    params = init_params(
        config.seed,
        input_width=FEATURE_WIDTHS[config.feature_set],
        hidden_widths=config.hidden_widths,
        head_width=config.head_width,
        activation=config.activation,
        var_bias=math.log(config.clamp.epsilon),
    )
    trainer = _Trainer(config, prepared, standardizer, max_workers)
    schedule = CosineSchedule(config.learning_rate, config.epochs, config.min_learning_rate)
    optimizer = MomentumSGD(params, config.momentum)
    warmup = config.warmup_epochs()
    rng = np.random.default_rng([config.seed, 1])

    initial_loss, _ = trainer.loss(params, train_records)
    if not math.isfinite(initial_loss):
        raise NumericalError("Initial training loss is not finite")
    limit = config.divergence_factor * max(abs(initial_loss), 1.0)

    _, baseline_rmse = trainer.loss(params, val_records)
    result = TrainResult(
        model=_model(params, standardizer, config),
        best_epoch=0,
        best_val_rmse_kcal=baseline_rmse,
        baseline_val_rmse_kcal=baseline_rmse,
    )
    if verbose:
        print(f"🧪 Training {config.loss_mode}/{config.feature_set}: {len(train_records)} train, {len(val_records)} validation reactions")
        if warmup:
            print(f"🧪 Epochs 1-{warmup} fit the mean on squared error first")
        print(f"📊 Epoch 0: train loss {initial_loss:.6g}, val RMSE {baseline_rmse:.4f} kcal/mol")

    for epoch in range(1, config.epochs + 1):
        lr = schedule.get_lr(epoch - 1)
        order = rng.permutation(len(train_records))
        epoch_total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_records[i] for i in order[start:start + config.batch_size]]
            batch_loss, grads = trainer.batch_gradients(params, batch, mean_only=epoch <= warmup)
            epoch_total += batch_loss * len(batch)
            params = optimizer.step(params, clip_gradients(grads, config.gradient_clip), lr)
            if not params.is_finite():
                raise NumericalError(f"Parameters became non-finite at epoch {epoch}")
        train_loss = epoch_total / len(train_records)
        if train_loss > limit:
            raise NumericalError(
                f"Training diverged at epoch {epoch}: loss {train_loss:.6g} exceeds {config.divergence_factor:g} x initial"
            )

        val_loss, val_rmse = trainer.loss(params, val_records)
        record = EpochRecord(epoch, lr, train_loss, val_loss, val_rmse)
        result.history.append(record)
        if log_path is not None:
            from storage import append_training_log
            append_training_log(log_path, [record.as_dict()])
        if val_rmse < result.best_val_rmse_kcal:
            result.best_val_rmse_kcal = val_rmse
            result.best_epoch = epoch
            result.model = _model(params.copy(), standardizer, config)
        if verbose:
            print(f"🧪 Epoch {epoch}/{config.epochs}: lr {lr:.3g}, train {train_loss:.6g}, val {val_loss:.6g}, RMSE {val_rmse:.4f} kcal/mol")

    if verbose:
        print(f"✅ Best validation RMSE {result.best_val_rmse_kcal:.4f} kcal/mol at epoch {result.best_epoch}")
    return result


def _model(params: NetworkParams, standardizer: Standardizer, config: TrainConfig) -> ResidualModel:
    return ResidualModel(
        params=params,
        standardizer=standardizer,
        clamp=config.clamp,
        feature_set=config.feature_set,
        loss_mode=config.loss_mode,
    )
