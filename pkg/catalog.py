# Catalog - constant tables used across the functional and data layers
# Parameter sets, element data and unit constants live here, nowhere else

import math

HARTREE_TO_KCAL = 627.5094740631

# Range-separation parameters of the two local HF exchange channels
OMEGA_1 = 0.4
OMEGA_2 = math.inf

# Density floor inside fractional powers and logarithms
DENSITY_FLOOR = 1e-30

# ============================================================================
# VWN CORRELATION PARAMETER SETS
# ============================================================================
# Each channel: (A, x0, b, c) in hartree, x = sqrt(rs).
# "paramagnetic" / "ferromagnetic" are the zeta = 0 / zeta = 1 fits,
# "stiffness" is the spin-stiffness fit (only used with "interpolation": "stiffness").

VWN_PARAMETERS = {
    "VWN5": {
        "name": "VWN5",
        "description": "Fit to Ceperley-Alder Monte Carlo data (functional V)",
        "paramagnetic": (0.0310907, -0.10498, 3.72744, 12.9352),
        "ferromagnetic": (0.01554535, -0.32500, 7.06042, 18.0578),
        "stiffness": (-1.0 / (6.0 * math.pi ** 2), -0.0047584, 1.13107, 13.0045),
        "interpolation": "stiffness",
    },
    "VWN_RPA": {
        "name": "VWN_RPA",
        "description": "Fit to RPA correlation energies (functional III, historical B3LYP choice)",
        "paramagnetic": (0.0310907, -0.409286, 13.0720, 42.7198),
        "ferromagnetic": (0.01554535, -0.743294, 20.1231, 101.578),
        "stiffness": (-1.0 / (6.0 * math.pi ** 2), -0.228344, 1.06835, 11.4813),
        "interpolation": "zeta",
    },
}

DEFAULT_VWN_VARIANT = "VWN_RPA"

# ============================================================================
# B88 / LYP CONSTANTS
# ============================================================================

B88_BETA = 0.0042

LYP_PARAMETERS = {
    "a": 0.04918,
    "b": 0.132,
    "c": 0.2533,
    "d": 0.349,
}

# ============================================================================
# ELEMENTS
# ============================================================================

ATOMIC_NUMBERS = {
    "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8,
    "F": 9, "Ne": 10, "Na": 11, "Mg": 12, "Al": 13, "Si": 14, "P": 15,
    "S": 16, "Cl": 17, "Ar": 18, "K": 19, "Ca": 20,
}

# Synthetic atoms: one Gaussian per atom; electrons split (up, down).
# Small electron counts keep analytic densities well resolved on coarse grids.
SYNTHETIC_ATOMS = {
    "H": {"exponent": 1.0, "electrons": (1.0, 0.0)},
    "C": {"exponent": 1.6, "electrons": (2.0, 1.0)},
    "N": {"exponent": 1.8, "electrons": (2.0, 2.0)},
    "O": {"exponent": 2.0, "electrons": (3.0, 2.0)},
    "F": {"exponent": 2.2, "electrons": (3.0, 3.0)},
}

# Size buckets used by the dataset partition (atom counts 2, 3, 4, 5, 6 and >6)
SIZE_BUCKETS = ("2", "3", "4", "5", "6", ">6")


def size_bucket(atom_count: int) -> str:
    """Bucket label for a species with this many atoms ("1" for isolated atoms)."""
    if atom_count <= 1:
        return "1"
    if atom_count > 6:
        return ">6"
    return str(atom_count)
