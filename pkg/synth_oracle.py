# Synthetic data - analytic Gaussian densities on uniform grids
# Closed-form features, a known bounded residual on top of the conventional functional, and refinement oracles

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from catalog import SYNTHETIC_ATOMS
from dataset import Dataset, Manifest, SpeciesMeta
from energy import ReactionRecord
from errors import ConfigError, DataError
from functionals import CX_SPIN, ConventionalSpec, conventional_density
from grid_core import MolecularGrid, PointFeatures

# Stand-in local HF exchange: e_hf_sigma = -c * rho_sigma^(4/3), one c per channel.
# There are no orbitals here; the form only has to be smooth, negative and spin-resolved.
HF_W1_COEFF = 0.6 * CX_SPIN
HF_W2_COEFF = 1.05 * CX_SPIN

DEFAULT_POINTS_PER_AXIS = 16
BOX_MARGIN = 4.5     # bohr beyond the outermost center
BOND_LENGTH = (1.4, 2.2)
MOLECULE_SIZES = (2, 3, 4, 5, 6, 7, 8)

TRUTH_FORM = "delta = amplitude * e_conv * (1 - 0.5 * exp(-rho / rho_scale))"


@dataclass(frozen=True)
class GaussianSpecies:
    """
    Sum of normalized s-type Gaussians.

    centers: (M, 3) bohr, exponents: (M,) bohr^-2, occupations: (M, 2) electrons (up, down) per center.
    """

    centers: np.ndarray
    exponents: np.ndarray
    occupations: np.ndarray
    species_id: str = "gaussian"

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        exponents = np.atleast_1d(np.asarray(self.exponents, dtype=np.float64))
        occupations = np.atleast_2d(np.asarray(self.occupations, dtype=np.float64))
        m = centers.shape[0]
        if centers.shape != (m, 3) or exponents.shape != (m,) or occupations.shape != (m, 2):
            raise DataError(f"Gaussian species '{self.species_id}': centers, exponents and occupations disagree in shape")
        if not (exponents > 0).all():
            raise DataError(f"Gaussian species '{self.species_id}': exponents must be positive")
        if not (occupations >= 0).all():
            raise DataError(f"Gaussian species '{self.species_id}': occupations must be non-negative")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "exponents", exponents)
        object.__setattr__(self, "occupations", occupations)

    @property
    def n_electrons(self) -> Tuple[float, float]:
        up, down = self.occupations.sum(axis=0)
        return float(up), float(down)


@dataclass(frozen=True)
class BoxSpec:
    """Uniform midpoint grid on the cube center +/- extent."""

    extent: float
    points_per_axis: int
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.points_per_axis < 2:
            raise DataError(f"points_per_axis must be >= 2 (got {self.points_per_axis})", field="points_per_axis")
        if not self.extent > 0:
            raise DataError(f"extent must be positive (got {self.extent})", field="extent")

    @property
    def spacing(self) -> float:
        return 2.0 * self.extent / self.points_per_axis

    def refined(self) -> "BoxSpec":
        return BoxSpec(self.extent, 2 * self.points_per_axis, self.center)

    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        """(positions (N, 3), weights (N,)) in x-major order."""
        h = self.spacing
        offsets = -self.extent + h * (np.arange(self.points_per_axis) + 0.5)
        axes = [c + offsets for c in self.center]
        mesh = np.meshgrid(*axes, indexing="ij")
        positions = np.stack([m.reshape(-1) for m in mesh], axis=1)
        return positions, np.full(positions.shape[0], h ** 3)


# ============================================================================
# ANALYTIC FIELDS
# ============================================================================

def gaussian_fields(species: GaussianSpecies, positions: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Closed-form spin densities, gradients and kinetic energy densities.

    Returns: dict with rho (N, 2), grad (N, 2, 3) and tau (N, 2)
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    rho = np.zeros((n, 2))
    grad = np.zeros((n, 2, 3))
    tau = np.zeros((n, 2))
    for center, alpha, occupation in zip(species.centers, species.exponents, species.occupations):
        d = positions - center
        r2 = np.einsum("ij,ij->i", d, d)
        shape = (alpha / math.pi) ** 1.5 * np.exp(-alpha * r2)
        for s in range(2):
            if occupation[s] == 0:
                continue
            rho_c = occupation[s] * shape
            rho[:, s] += rho_c
            grad[:, s, :] += -2.0 * alpha * d * rho_c[:, None]
            # |grad rho_c|^2 / (8 rho_c) for one orbital per center
            tau[:, s] += 0.5 * alpha * alpha * r2 * rho_c
    return {"rho": rho, "grad": grad, "tau": tau}


def gaussian_features(species: GaussianSpecies, positions: np.ndarray) -> PointFeatures:
    fields = gaussian_fields(species, positions)
    rho, grad, tau = fields["rho"], fields["grad"], fields["tau"]
    grad_sq = np.einsum("nsk,nsk->ns", grad, grad)
    grad_total = grad[:, 0, :] + grad[:, 1, :]
    rho_43 = rho ** (4.0 / 3.0)
    return PointFeatures(
        rho_up=rho[:, 0],
        rho_down=rho[:, 1],
        grad_sq_up=grad_sq[:, 0],
        grad_sq_down=grad_sq[:, 1],
        grad_sq_total=np.einsum("nk,nk->n", grad_total, grad_total),
        tau_up=tau[:, 0],
        tau_down=tau[:, 1],
        e_hf_w1_up=-HF_W1_COEFF * rho_43[:, 0],
        e_hf_w1_down=-HF_W1_COEFF * rho_43[:, 1],
        e_hf_w2_up=-HF_W2_COEFF * rho_43[:, 0],
        e_hf_w2_down=-HF_W2_COEFF * rho_43[:, 1],
    )


def default_box(species: GaussianSpecies, points_per_axis: int = DEFAULT_POINTS_PER_AXIS) -> BoxSpec:
    """Cube centered on the centroid, wide enough for every Gaussian tail."""
    centroid = species.centers.mean(axis=0)
    reach = float(np.max(np.abs(species.centers - centroid))) if len(species.centers) > 1 else 0.0
    return BoxSpec(reach + BOX_MARGIN, points_per_axis, tuple(float(c) for c in centroid))


def make_gaussian_grid(
    species: GaussianSpecies,
    extent: Optional[float] = None,
    points_per_axis: int = DEFAULT_POINTS_PER_AXIS,
    center: Optional[Sequence[float]] = None,
) -> MolecularGrid:
    """
    Uniform Cartesian grid (w = cell volume) with analytic features.

    HF channels hold the synthetic -c rho^(4/3) stand-ins.
    """
    if extent is None:
        box = default_box(species, points_per_axis)
    else:
        box = BoxSpec(extent, points_per_axis, tuple(center) if center is not None else (0.0, 0.0, 0.0))
    positions, weights = box.points()
    up, down = species.n_electrons
    return MolecularGrid(
        species_id=species.species_id,
        positions=positions,
        weights=weights,
        features=gaussian_features(species, positions),
        n_electrons_up=up,
        n_electrons_down=down,
    )


def box_integral(box: BoxSpec, integrand: Callable[[np.ndarray], np.ndarray]) -> float:
    positions, weights = box.points()
    return float(np.sum(weights * np.asarray(integrand(positions), dtype=np.float64)))


def refined_reference(box: BoxSpec, integrand: Callable[[np.ndarray], np.ndarray]) -> float:
    """The same integral on a grid with twice the points per axis."""
    return box_integral(box.refined(), integrand)


# ============================================================================
# SYNTHETIC TRUTH
# ============================================================================

class TruthSpec(BaseModel):
    """Known residual on top of the conventional functional; |delta| <= amplitude |e_conv|."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    amplitude: float = Field(0.25, ge=0.0, le=0.3)
    rho_scale: float = Field(0.05, gt=0.0)
    conventional: ConventionalSpec = ConventionalSpec()

    def describe(self) -> Dict:
        return {"form": TRUTH_FORM, **self.model_dump()}


def truth_residual(grid: MolecularGrid, truth: TruthSpec, e_conv: Optional[np.ndarray] = None) -> np.ndarray:
    if e_conv is None:
        e_conv = np.asarray(conventional_density(grid.features, truth.conventional))
    return truth.amplitude * e_conv * (1.0 - 0.5 * np.exp(-grid.rho / truth.rho_scale))


def true_species_energy(grid: MolecularGrid, truth: TruthSpec) -> float:
    e_conv = np.asarray(conventional_density(grid.features, truth.conventional))
    return float(np.sum(grid.density_weights() * (e_conv + truth_residual(grid, truth, e_conv))))


def reference_reaction_energy(record: ReactionRecord, species_energy: Dict[str, float]) -> float:
    """Signed stoichiometric sum, accumulated in term order."""
    total = 0.0
    for species_id, coefficient in record.terms:
        total += coefficient * species_energy[species_id]
    return total


def _atom_species(element: str) -> GaussianSpecies:
    entry = SYNTHETIC_ATOMS[element]
    return GaussianSpecies(
        centers=np.zeros((1, 3)),
        exponents=np.array([entry["exponent"]]),
        occupations=np.array([entry["electrons"]]),
        species_id=f"atom_{element}",
    )


def _random_molecule(rng: np.random.Generator, species_id: str) -> Tuple[GaussianSpecies, Dict[str, int]]:
    elements = sorted(SYNTHETIC_ATOMS)
    size = int(rng.choice(MOLECULE_SIZES))
    atoms = [str(rng.choice(elements)) for _ in range(size)]
    centers = [np.zeros(3)]
    for _ in range(1, size):
        anchor = centers[int(rng.integers(len(centers)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        centers.append(anchor + rng.uniform(*BOND_LENGTH) * direction)

    # molecule electrons are shared evenly between the spin channels
    occupations = [[sum(SYNTHETIC_ATOMS[a]["electrons"]) / 2.0] * 2 for a in atoms]
    composition: Dict[str, int] = {}
    for a in atoms:
        composition[a] = composition.get(a, 0) + 1
    species = GaussianSpecies(
        centers=np.array(centers),
        exponents=np.array([SYNTHETIC_ATOMS[a]["exponent"] for a in atoms]),
        occupations=np.array(occupations),
        species_id=species_id,
    )
    return species, composition


def make_synthetic_dataset(
    n_species: int,
    n_reactions: int,
    seed: int = 0,
    truth_spec: Optional[TruthSpec] = None,
    points_per_axis: int = DEFAULT_POINTS_PER_AXIS,
    verbose: bool = False,
) -> Dataset:
    """
    Random molecules of synthetic atoms, one atomisation reaction per molecule.

    Each reaction is molecule -> constituent atoms (molecule -1, atoms +count).
    E* integrates e_conv + delta on every grid and combines stoichiometrically;
    the closed form of delta goes into the manifest metadata.

    Raises:
        ConfigError: counts are not positive, or more reactions than molecules are asked for
    """
    if n_species < 1:
        raise ConfigError(f"n_species must be >= 1 (got {n_species})", field="n_species")
    if n_reactions < 1:
        raise ConfigError(f"n_reactions must be >= 1 (got {n_reactions})", field="n_reactions")
    if n_reactions > n_species:
        raise ConfigError(
            f"n_reactions ({n_reactions}) cannot exceed n_species ({n_species}): one atomisation per molecule",
            field="n_reactions",
        )
    truth = truth_spec or TruthSpec()
    rng = np.random.default_rng(seed)

    grids: Dict[str, MolecularGrid] = {}
    species_meta: Dict[str, SpeciesMeta] = {}
    molecules: List[Tuple[str, Dict[str, int]]] = []
    for i in range(n_species):
        species_id = f"mol_{i:04d}"
        gaussian, composition = _random_molecule(rng, species_id)
        grids[species_id] = make_gaussian_grid(gaussian, points_per_axis=points_per_axis)
        species_meta[species_id] = SpeciesMeta(species_id=species_id, composition=composition)
        molecules.append((species_id, composition))

    for element in sorted({e for _, comp in molecules[:n_reactions] for e in comp}):
        gaussian = _atom_species(element)
        grids[gaussian.species_id] = make_gaussian_grid(gaussian, points_per_axis=points_per_axis)
        species_meta[gaussian.species_id] = SpeciesMeta(species_id=gaussian.species_id, composition={element: 1})

    energies = {sid: true_species_energy(grid, truth) for sid, grid in grids.items()}

    reactions = []
    for species_id, composition in molecules[:n_reactions]:
        terms = ((species_id, -1),) + tuple((f"atom_{e}", composition[e]) for e in sorted(composition))
        draft = ReactionRecord(reaction_id=f"atomise_{species_id}", terms=terms, e_star=0.0, dataset="atomisation")
        reactions.append(draft.model_copy(update={"e_star": reference_reaction_energy(draft, energies)}))

    used = {s for r in reactions for s in r.species_ids()}
    grids = {sid: g for sid, g in grids.items() if sid in used}
    species_meta = {sid: m for sid, m in species_meta.items() if sid in used}
    metadata = {
        "generator": "synthetic-gaussian",
        "seed": seed,
        "points_per_axis": points_per_axis,
        "truth": truth.describe(),
    }
    if verbose:
        print(f"✅ Synthetic dataset: {len(grids)} species, {len(reactions)} reactions (seed {seed})")
    return Dataset(manifest=Manifest(species=species_meta, reactions=reactions, metadata=metadata), grids=grids)
