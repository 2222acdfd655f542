# Grid data model - per-point density features, quadrature grids and integration
# Features are stored column-wise in a fixed order; every energy is integrated as sum(w * rho * value)

from dataclasses import dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import DataError, NumericalError

FEATURE_NAMES = (
    "rho_up",
    "rho_down",
    "grad_sq_up",
    "grad_sq_down",
    "grad_sq_total",
    "tau_up",
    "tau_down",
    "e_hf_w1_up",
    "e_hf_w1_down",
    "e_hf_w2_up",
    "e_hf_w2_down",
)

EXTENDED_FEATURE_NAMES = FEATURE_NAMES + (
    "e_hf_w1",
    "e_hf_w2",
    "e_lda",
    "e_conv",
    "weight",
)

N_FEATURES = len(FEATURE_NAMES)
N_EXTENDED_FEATURES = len(EXTENDED_FEATURE_NAMES)

# Features that must be non-negative
NON_NEGATIVE_FEATURES = FEATURE_NAMES[:7]
HF_FEATURES = FEATURE_NAMES[7:]

DEFAULT_ELECTRON_TOLERANCE = 0.005


@dataclass(frozen=True)
class PointFeatures:
    """The 11 local quantities at one point, or columns of them over a grid.

    Every field is either a float (one point) or a 1-D array (all points of a grid).
    """

    rho_up: np.ndarray
    rho_down: np.ndarray
    grad_sq_up: np.ndarray
    grad_sq_down: np.ndarray
    grad_sq_total: np.ndarray
    tau_up: np.ndarray
    tau_down: np.ndarray
    e_hf_w1_up: np.ndarray
    e_hf_w1_down: np.ndarray
    e_hf_w2_up: np.ndarray
    e_hf_w2_down: np.ndarray

    @classmethod
    def from_array(cls, values) -> "PointFeatures":
        """Build from an array whose last axis holds the 11 features in order."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape[-1] != N_FEATURES:
            raise DataError(f"Expected {N_FEATURES} features, got {arr.shape[-1]}")
        return cls(*[arr[..., i] for i in range(N_FEATURES)])

    @classmethod
    def zeros(cls, n: Optional[int] = None) -> "PointFeatures":
        shape = () if n is None else (n,)
        return cls.from_array(np.zeros(shape + (N_FEATURES,)))

    def to_array(self) -> np.ndarray:
        return np.stack([np.asarray(getattr(self, name), dtype=np.float64) for name in FEATURE_NAMES], axis=-1)

    @property
    def rho(self) -> np.ndarray:
        return np.asarray(self.rho_up) + np.asarray(self.rho_down)

    def spin_swapped(self) -> "PointFeatures":
        """Same point with the up and down channels exchanged."""
        return PointFeatures(
            rho_up=self.rho_down,
            rho_down=self.rho_up,
            grad_sq_up=self.grad_sq_down,
            grad_sq_down=self.grad_sq_up,
            grad_sq_total=self.grad_sq_total,
            tau_up=self.tau_down,
            tau_down=self.tau_up,
            e_hf_w1_up=self.e_hf_w1_down,
            e_hf_w1_down=self.e_hf_w1_up,
            e_hf_w2_up=self.e_hf_w2_down,
            e_hf_w2_down=self.e_hf_w2_up,
        )

    def take(self, index) -> "PointFeatures":
        return PointFeatures(*[np.asarray(getattr(self, f.name))[index] for f in fields(self)])


@dataclass(frozen=True)
class GridPoint:
    position: Tuple[float, float, float]
    weight: float
    features: PointFeatures


@dataclass(frozen=True)
class MolecularGrid:
    """A species' quadrature grid. Immutable once built."""

    species_id: str
    positions: np.ndarray          # (N, 3) bohr
    weights: np.ndarray            # (N,) bohr^3
    features: PointFeatures        # columns of length N
    n_electrons_up: float
    n_electrons_down: float

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise DataError(f"Grid '{self.species_id}': positions must have shape (N, 3)", species_id=self.species_id)
        if weights.shape != (positions.shape[0],):
            raise DataError(f"Grid '{self.species_id}': weights length does not match positions", species_id=self.species_id)
        if positions.shape[0] == 0:
            raise DataError(f"Grid '{self.species_id}' has no points", species_id=self.species_id)
        columns = self.features.to_array()
        if columns.shape != (positions.shape[0], N_FEATURES):
            raise DataError(f"Grid '{self.species_id}': feature columns do not match point count", species_id=self.species_id)
        for arr in (positions, weights, columns):
            arr.flags.writeable = False
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "features", PointFeatures.from_array(columns))

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def n_electrons(self) -> float:
        return self.n_electrons_up + self.n_electrons_down

    @property
    def rho(self) -> np.ndarray:
        return self.features.rho

    def density_weights(self) -> np.ndarray:
        """w * rho per point: the measure every energy integral is taken against."""
        return self.weights * self.rho

    def point(self, index: int) -> GridPoint:
        return GridPoint(
            position=tuple(float(v) for v in self.positions[index]),
            weight=float(self.weights[index]),
            features=self.features.take(index),
        )

    def points(self) -> Iterator[GridPoint]:
        for i in range(self.n_points):
            yield self.point(i)

    def feature_matrix(self) -> np.ndarray:
        return self.features.to_array()


@dataclass
class ValidationReport:
    """Every violated invariant, with the offending point index (None for grid-level issues)."""

    species_id: str
    violations: List[Tuple[Optional[int], str]] = field(default_factory=list)
    warnings: List[Tuple[Optional[int], str]] = field(default_factory=list)
    electron_count: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def indices(self) -> List[int]:
        return [i for i, _ in self.violations if i is not None]


# ============================================================================
# FEATURE ASSEMBLY
# ============================================================================

def build_extended_features(x: PointFeatures, e_lda, e_conv, w) -> np.ndarray:
    """
    Assemble the 16-component input vector(s) in EXTENDED_FEATURE_NAMES order.

    Works for a single point (returns shape (16,)) or a whole grid of columns
    (returns shape (N, 16)). The spin-summed HF channels are computed here.

    Raises:
        DataError: a component is non-finite; `index` names the offending field
    """
    base = x.to_array()
    e_hf_w1 = base[..., 7] + base[..., 8]
    e_hf_w2 = base[..., 9] + base[..., 10]
    tail = [
        e_hf_w1,
        e_hf_w2,
        np.broadcast_to(np.asarray(e_lda, dtype=np.float64), e_hf_w1.shape),
        np.broadcast_to(np.asarray(e_conv, dtype=np.float64), e_hf_w1.shape),
        np.broadcast_to(np.asarray(w, dtype=np.float64), e_hf_w1.shape),
    ]
    y = np.concatenate([base, np.stack(tail, axis=-1)], axis=-1)

    finite = np.isfinite(y)
    if not finite.all():
        bad = np.argwhere(~finite)[0]
        index = int(bad[-1])
        raise DataError(
            f"Non-finite extended feature '{EXTENDED_FEATURE_NAMES[index]}' (component {index})",
            index=index,
            field=EXTENDED_FEATURE_NAMES[index],
        )
    return y


# ============================================================================
# INTEGRATION
# ============================================================================

def integrate_density_weighted(grid: MolecularGrid, values) -> float:
    """
    Integrate sum_r w(r) * rho(r) * value(r) over the grid.

    The reduction runs over the contiguous product array in grid index order,
    so repeated calls on the same grid are bit-identical.

    Raises:
        DataError: values length differs from the point count
        NumericalError: the accumulated sum is not finite
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (grid.n_points,):
        raise DataError(
            f"Grid '{grid.species_id}' has {grid.n_points} points but {values.size} values were given",
            species_id=grid.species_id,
        )
    total = float(np.sum(grid.density_weights() * values))
    if not np.isfinite(total):
        raise NumericalError(f"Non-finite integral on grid '{grid.species_id}'", species_id=grid.species_id)
    return total


def integrate_electrons(grid: MolecularGrid) -> float:
    """sum_r w(r) * rho(r)."""
    return float(np.sum(grid.density_weights()))


def canonicalize_grid(grid: MolecularGrid) -> MolecularGrid:
    """Re-order points lexicographically by (x, y, z), then weight as a tie-breaker."""
    order = np.lexsort((grid.weights, grid.positions[:, 2], grid.positions[:, 1], grid.positions[:, 0]))
    return MolecularGrid(
        species_id=grid.species_id,
        positions=grid.positions[order],
        weights=grid.weights[order],
        features=PointFeatures.from_array(grid.feature_matrix()[order]),
        n_electrons_up=grid.n_electrons_up,
        n_electrons_down=grid.n_electrons_down,
    )


# ============================================================================
# VALIDATION
# ============================================================================

def validate_grid(grid: MolecularGrid, tolerance: float = DEFAULT_ELECTRON_TOLERANCE) -> ValidationReport:
    """
    Check every point and grid-level invariant. Never raises.

    Args:
        grid: the grid to check
        tolerance: relative tolerance on the integrated electron count

    Returns: ValidationReport listing violations (and HF-sign warnings) with point indices
    """
    report = ValidationReport(species_id=grid.species_id)
    columns = grid.feature_matrix()

    bad_weight = ~(np.isfinite(grid.weights) & (grid.weights > 0))
    for i in np.flatnonzero(bad_weight):
        report.violations.append((int(i), f"weight must be > 0 (got {grid.weights[i]!r})"))

    for j, name in enumerate(FEATURE_NAMES):
        column = columns[:, j]
        for i in np.flatnonzero(~np.isfinite(column)):
            report.violations.append((int(i), f"{name} is not finite"))
        if name in NON_NEGATIVE_FEATURES:
            for i in np.flatnonzero(column < 0):
                report.violations.append((int(i), f"{name} must be >= 0 (got {column[i]!r})"))
        else:
            for i in np.flatnonzero(column > 0):
                report.warnings.append((int(i), f"{name} is positive ({column[i]!r}); physical HF exchange is <= 0"))

    report.electron_count = integrate_electrons(grid) if np.isfinite(columns).all() else float("nan")
    expected = grid.n_electrons
    if expected <= 0:
        report.violations.append((None, f"declared electron count must be positive (got {expected})"))
    elif not abs(report.electron_count - expected) <= tolerance * expected:
        report.violations.append((
            None,
            f"electron normalization: grid integrates to {report.electron_count:.6f}, declared {expected:.6f}",
        ))

    report.violations.sort(key=lambda item: (-1 if item[0] is None else item[0]))
    return report


def grid_summary(grid: MolecularGrid) -> Dict:
    """Small dict describing a grid, for status lines and reports."""
    return {
        "species_id": grid.species_id,
        "n_points": grid.n_points,
        "n_electrons_up": grid.n_electrons_up,
        "n_electrons_down": grid.n_electrons_down,
        "integrated_electrons": integrate_electrons(grid),
    }
