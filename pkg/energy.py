# Species and reaction energies
# Integrates conventional and residual energy densities over grids and combines them stoichiometrically

import concurrent.futures
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from errors import DataError, NumericalError
from functionals import ConventionalSpec, conventional_density, lda_xc_density
from grid_core import MolecularGrid, build_extended_features, integrate_density_weighted
from rbnet import (
    ClampConfig,
    NetworkParams,
    ResidualModel,
    Standardizer,
    backward,
    clamp_backward,
    clamp_residual,
    forward,
    forward_with_cache,
)
from settings import MAX_WORKERS


class ReactionRecord(BaseModel):
    """Signed stoichiometry (products > 0, reactants < 0) and the reference energy in hartree."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    reaction_id: str
    terms: Tuple[Tuple[str, int], ...]
    e_star: float
    dataset: str = "default"

    @field_validator("terms")
    @classmethod
    def _products_and_reactants(cls, terms):
        coefficients = [c for _, c in terms]
        if any(c == 0 for c in coefficients):
            raise ValueError("stoichiometric coefficients must be nonzero")
        if not any(c > 0 for c in coefficients) or not any(c < 0 for c in coefficients):
            raise ValueError("a reaction needs at least one positive and one negative coefficient")
        return terms

    def species_ids(self) -> List[str]:
        seen = []
        for species_id, _ in self.terms:
            if species_id not in seen:
                seen.append(species_id)
        return seen

    def reactants(self) -> List[str]:
        return [s for s, c in self.terms if c < 0]


@dataclass(frozen=True)
class SpeciesEnergies:
    """E° , E^RU and the integrated standard deviation sigma, all in hartree."""

    e_conv: float
    e_ru: float
    sigma: float


@dataclass(frozen=True)
class EnergyBreakdown:
    e_conv_total: float
    e_ru_total: float
    s: float
    sigma: float
    s_floored: bool = False

    @property
    def prediction(self) -> float:
        return self.e_conv_total + self.e_ru_total


# ============================================================================
# NETWORK INPUTS PER SPECIES
# ============================================================================

@dataclass
class PreparedSpecies:
    """Per-point arrays a species needs for repeated network evaluation."""

    species_id: str
    density_weights: np.ndarray  # w * rho
    e_conv: np.ndarray           # conventional energy density
    inputs: np.ndarray           # raw (unstandardized) network inputs

    @property
    def n_points(self) -> int:
        return self.e_conv.shape[0]


def model_inputs(grid: MolecularGrid, spec: ConventionalSpec, feature_set: str = "Y16", dm21_factors=None):
    """
    Raw network inputs and e_conv for every grid point.

    Returns: (inputs, e_conv) with inputs of width 16 (Y16) or 11 (X11)
    """
    e_conv = np.asarray(conventional_density(grid.features, spec, dm21_factors), dtype=np.float64)
    if feature_set == "X11":
        return grid.feature_matrix(), e_conv
    e_lda = lda_xc_density(grid.features.rho_up, grid.features.rho_down, spec.vwn_variant)
    return build_extended_features(grid.features, e_lda, e_conv, grid.weights), e_conv


def prepare_species(grid: MolecularGrid, spec: ConventionalSpec, feature_set: str = "Y16", dm21_factors=None) -> PreparedSpecies:
    inputs, e_conv = model_inputs(grid, spec, feature_set, dm21_factors)
    return PreparedSpecies(grid.species_id, grid.density_weights(), e_conv, inputs)


def _standardized(prepared: PreparedSpecies, standardizer: Optional[Standardizer]) -> np.ndarray:
    if standardizer is None:
        return prepared.inputs
    return standardizer.apply(prepared.inputs)


def _checked_total(value: float, what: str, species_id: str) -> float:
    if not math.isfinite(value):
        raise NumericalError(f"Non-finite {what} for species '{species_id}'", species_id=species_id)
    return value


def evaluate_prepared(
    prepared: PreparedSpecies,
    params: NetworkParams,
    cfg: ClampConfig,
    standardizer: Optional[Standardizer] = None,
    direct: bool = False,
) -> SpeciesEnergies:
    """Integrate E° , E^RU and sigma for one prepared species (fixed grid-order sums)."""
    inputs = _standardized(prepared, standardizer)
    e0, s0 = forward(params, inputs)
    dw = prepared.density_weights
    if direct:
        e_conv = 0.0
        e_ru = float(np.sum(dw * e0))
        sigma = float(np.sum(dw * np.exp(0.5 * s0)))
    else:
        out = clamp_residual(e0, s0, prepared.e_conv, cfg)
        e_conv = float(np.sum(dw * prepared.e_conv))
        e_ru = float(np.sum(dw * out.e_bar))
        sigma = float(np.sum(dw * np.exp(0.5 * out.s_bar)))
    sid = prepared.species_id
    return SpeciesEnergies(
        e_conv=_checked_total(e_conv, "E_conv", sid),
        e_ru=_checked_total(e_ru, "E_RU", sid),
        sigma=_checked_total(sigma, "sigma", sid),
    )


def species_gradients(
    prepared: PreparedSpecies,
    params: NetworkParams,
    cfg: ClampConfig,
    d_e_ru: float,
    d_sigma: float,
    standardizer: Optional[Standardizer] = None,
    direct: bool = False,
) -> NetworkParams:
    """
    Parameter gradients of d_e_ru * E^RU + d_sigma * sigma for one species.

    The upstream scalars come from the loss; this runs the chain rule back through
    the spatial sums, the clamp and the network.
    """
    inputs = _standardized(prepared, standardizer)
    e0, s0, cache = forward_with_cache(params, inputs)
    dw = prepared.density_weights
    if direct:
        grad_e0 = d_e_ru * dw
        grad_s0 = d_sigma * dw * 0.5 * np.exp(0.5 * s0)
    else:
        out = clamp_residual(e0, s0, prepared.e_conv, cfg)
        grad_e_bar = d_e_ru * dw
        grad_s_bar = d_sigma * dw * 0.5 * np.exp(0.5 * out.s_bar)
        grad_e0, grad_s0 = clamp_backward(e0, s0, prepared.e_conv, cfg, grad_e_bar, grad_s_bar)
    return backward(params, cache, grad_e0, grad_s0)


def species_energies(
    grid: MolecularGrid,
    spec: ConventionalSpec,
    params: NetworkParams,
    cfg: ClampConfig,
    standardizer: Optional[Standardizer] = None,
    direct: bool = False,
    dm21_factors=None,
) -> SpeciesEnergies:
    """
    E° = sum w rho e_conv, E^RU = sum w rho e_bar, sigma = sum w rho exp(s_bar / 2).

    The feature set follows the network's input width (16 -> Y16, 11 -> X11).
    In direct mode the network predicts the whole energy density, so E° is 0
    and E^RU carries the direct energy.
    """
    feature_set = "Y16" if params.input_width == 16 else "X11"
    prepared = prepare_species(grid, spec, feature_set, dm21_factors)
    return evaluate_prepared(prepared, params, cfg, standardizer, direct)


def conventional_energy(grid: MolecularGrid, spec: ConventionalSpec, dm21_factors=None) -> float:
    """E° alone, independent of any network."""
    return integrate_density_weighted(grid, conventional_density(grid.features, spec, dm21_factors))


def evaluate_species_batch(
    grids: Dict[str, MolecularGrid],
    spec: ConventionalSpec,
    model: Optional[ResidualModel],
    species_ids: Optional[Sequence[str]] = None,
    max_workers: int = MAX_WORKERS,
    dm21_factors: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, SpeciesEnergies]:
    """
    Species energies for many grids in parallel.

    Each result is placed by its index, so the returned mapping has the same
    order and values whatever order the workers finish in. A None model gives
    the conventional baseline (E^RU = sigma = 0).
    dm21_factors maps species ids to per-point DM21 factors.
    """
    ids = list(species_ids) if species_ids is not None else list(grids)
    missing = [s for s in ids if s not in grids]
    if missing:
        raise DataError(f"No grid for species '{missing[0]}'", species_id=missing[0])

    def evaluate_one(species_id: str) -> SpeciesEnergies:
        grid = grids[species_id]
        factors = (dm21_factors or {}).get(species_id)
        if model is None:
            return SpeciesEnergies(conventional_energy(grid, spec, factors), 0.0, 0.0)
        return species_energies(grid, spec, model.params, model.clamp, model.standardizer, model.direct, factors)

    results: List[Optional[SpeciesEnergies]] = [None] * len(ids)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        future_to_index = {executor.submit(evaluate_one, sid): i for i, sid in enumerate(ids)}
        for future in concurrent.futures.as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return dict(zip(ids, results))


# ============================================================================
# REACTIONS
# ============================================================================

def reaction_energy(record: ReactionRecord, per_species: Dict[str, SpeciesEnergies], epsilon: float = 1e-4) -> EnergyBreakdown:
    """
    Signed stoichiometric sums of E° and E^RU; sigma_rxn = sum |c| sigma_i; s = log sigma_rxn^2 floored at log epsilon.

    Raises:
        DataError: a species of the reaction has no energies
    """
    e_conv_total = 0.0
    e_ru_total = 0.0
    sigma = 0.0
    for species_id, coefficient in record.terms:
        energies = per_species.get(species_id)
        if energies is None:
            raise DataError(
                f"Reaction '{record.reaction_id}' needs species '{species_id}', which is missing",
                species_id=species_id,
                reaction_id=record.reaction_id,
            )
        e_conv_total += coefficient * energies.e_conv
        e_ru_total += coefficient * energies.e_ru
        sigma += abs(coefficient) * energies.sigma

    variance = sigma * sigma
    floored = variance <= epsilon
    s = math.log(epsilon) if floored else math.log(variance)
    return EnergyBreakdown(e_conv_total, e_ru_total, s, sigma, floored)


def sample_reaction_energies(breakdown: EnergyBreakdown, n: int, seed: int = 0) -> np.ndarray:
    """Draws of E° + E^RU + sigma * eps, eps ~ N(0, 1)."""
    rng = np.random.default_rng(seed)
    return breakdown.prediction + breakdown.sigma * rng.standard_normal(n)


def integrated_residual_bound(grid: MolecularGrid, e_conv, k1: float) -> float:
    """k1 * sum w rho |e_conv|: no species E^RU can exceed this in magnitude."""
    return k1 * float(np.sum(grid.density_weights() * np.abs(np.asarray(e_conv))))
