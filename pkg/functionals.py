# Conventional exchange-correlation energy densities
# Component functionals (Slater, VWN, B88, LYP, local HF lookup) and the B3LYP / DM21-form compositions
#
# All densities are per unit volume (hartree / bohr^3) and accept scalars or arrays.

import math
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from catalog import (
    B88_BETA,
    DEFAULT_VWN_VARIANT,
    DENSITY_FLOOR,
    LYP_PARAMETERS,
    OMEGA_1,
    OMEGA_2,
    VWN_PARAMETERS,
)
from errors import ConfigError, DataError
from grid_core import PointFeatures

CX = 0.75 * (3.0 / math.pi) ** (1.0 / 3.0)
CX_SPIN = CX * 2.0 ** (1.0 / 3.0)
CF = 0.3 * (3.0 * math.pi ** 2) ** (2.0 / 3.0)
FPP0 = 4.0 / (9.0 * (2.0 ** (1.0 / 3.0) - 1.0))

DEFAULT_B3LYP_COEFFS = (0.20, 0.72, 0.81)


class ConventionalSpec(BaseModel):
    """Which conventional functional produces e_xc at each point."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["B3LYP", "DM21_FORM", "LDA_ONLY"] = "B3LYP"
    b3lyp_coeffs: Tuple[float, float, float] = DEFAULT_B3LYP_COEFFS
    dm21_factors: Optional[Tuple[float, float, float]] = None
    dm21_per_point: bool = False
    vwn_variant: str = DEFAULT_VWN_VARIANT

    @field_validator("vwn_variant")
    @classmethod
    def _known_variant(cls, value: str) -> str:
        if value not in VWN_PARAMETERS:
            raise ValueError(f"unknown VWN variant '{value}' (known: {sorted(VWN_PARAMETERS)})")
        return value

    @model_validator(mode="after")
    def _dm21_needs_factors(self):
        if self.kind == "DM21_FORM" and self.dm21_factors is None and not self.dm21_per_point:
            raise ValueError("DM21_FORM needs dm21_factors or dm21_per_point = true")
        for value in self.b3lyp_coeffs + (self.dm21_factors or ()):
            if not math.isfinite(value):
                raise ValueError("functional coefficients must be finite")
        return self


def _non_negative(name: str, *values) -> Tuple[np.ndarray, ...]:
    arrays = tuple(np.asarray(v, dtype=np.float64) for v in values)
    for arr in arrays:
        if np.any(arr < 0):
            raise DataError(f"{name}: negative density or gradient input")
    return arrays


def _finish(value: np.ndarray):
    # 0-d arrays come back as numpy scalars
    return value[()] if value.ndim == 0 else value


# ============================================================================
# LDA
# ============================================================================

def _slater_spin(rho_sigma: np.ndarray) -> np.ndarray:
    return -CX_SPIN * rho_sigma ** (4.0 / 3.0)


def slater_exchange_density(rho_up, rho_down):
    """Dirac/Slater exchange: -Cx 2^(1/3) (rho_up^(4/3) + rho_down^(4/3))."""
    ru, rd = _non_negative("slater_exchange_density", rho_up, rho_down)
    return _finish(_slater_spin(ru) + _slater_spin(rd))


def _vwn_fit(x: np.ndarray, params: Tuple[float, float, float, float]) -> np.ndarray:
    A, x0, b, c = params
    X = x * x + b * x + c
    X0 = x0 * x0 + b * x0 + c
    Q = math.sqrt(4.0 * c - b * b)
    atan_term = np.arctan(Q / (2.0 * x + b))
    return A * (
        np.log(x * x / X)
        + 2.0 * b / Q * atan_term
        - b * x0 / X0 * (np.log((x - x0) ** 2 / X) + 2.0 * (b + 2.0 * x0) / Q * atan_term)
    )


def _spin_interpolation(zeta: np.ndarray) -> np.ndarray:
    return ((1.0 + zeta) ** (4.0 / 3.0) + (1.0 - zeta) ** (4.0 / 3.0) - 2.0) / (2.0 ** (4.0 / 3.0) - 2.0)


def vwn_correlation_density(rho_up, rho_down, variant: str = DEFAULT_VWN_VARIANT):
    """VWN local correlation, rho * eps_c(rs, zeta), for the chosen parameter set."""
    if variant not in VWN_PARAMETERS:
        raise ConfigError(f"Unknown VWN variant '{variant}'", field="vwn_variant")
    ru, rd = _non_negative("vwn_correlation_density", rho_up, rho_down)
    table = VWN_PARAMETERS[variant]

    rho = ru + rd
    safe = np.maximum(rho, DENSITY_FLOOR)
    x = np.sqrt((3.0 / (4.0 * math.pi * safe)) ** (1.0 / 3.0))
    zeta = np.clip((ru - rd) / safe, -1.0, 1.0)
    f = _spin_interpolation(zeta)

    eps_p = _vwn_fit(x, table["paramagnetic"])
    eps_f = _vwn_fit(x, table["ferromagnetic"])
    if table["interpolation"] == "stiffness":
        zeta4 = zeta ** 4
        alpha = _vwn_fit(x, table["stiffness"])
        eps = eps_p + alpha * f / FPP0 * (1.0 - zeta4) + (eps_f - eps_p) * f * zeta4
    else:
        eps = eps_p + f * (eps_f - eps_p)

    return _finish(np.where(rho > 0, rho * eps, 0.0))


def lda_xc_density(rho_up, rho_down, variant: str = DEFAULT_VWN_VARIANT):
    """e_x^LDA + e_c^LDA."""
    return _finish(
        np.asarray(slater_exchange_density(rho_up, rho_down))
        + np.asarray(vwn_correlation_density(rho_up, rho_down, variant))
    )


# ============================================================================
# GGA
# ============================================================================

def b88_exchange_density(rho_sigma, grad_sq_sigma):
    """Becke 1988 exchange for one spin channel (the full exchange, not only the correction)."""
    r, g = _non_negative("b88_exchange_density", rho_sigma, grad_sq_sigma)
    r43 = np.maximum(r, DENSITY_FLOOR) ** (4.0 / 3.0)
    x = np.sqrt(g) / r43
    correction = B88_BETA * r43 * x * x / (1.0 + 6.0 * B88_BETA * x * np.arcsinh(x))
    value = _slater_spin(r) - correction
    return _finish(np.where(r > 0, value, 0.0))


def lyp_correlation_density(rho_up, rho_down, grad_sq_up, grad_sq_down, grad_sq_total):
    """Lee-Yang-Parr correlation in its spin-polarized closed form (no Laplacian terms)."""
    ra, rb, ga, gb, gt = _non_negative(
        "lyp_correlation_density", rho_up, rho_down, grad_sq_up, grad_sq_down, grad_sq_total
    )
    a, b, c, d = (LYP_PARAMETERS[k] for k in ("a", "b", "c", "d"))

    rho = ra + rb
    safe = np.maximum(rho, DENSITY_FLOOR)
    rm13 = safe ** (-1.0 / 3.0)
    denom = 1.0 + d * rm13
    omega = np.exp(-c * rm13) / denom * safe ** (-11.0 / 3.0)
    delta = c * rm13 + d * rm13 / denom

    two_thirds_rho2 = (2.0 / 3.0) * rho * rho
    pair = ra * rb * (
        2.0 ** (11.0 / 3.0) * CF * (ra ** (8.0 / 3.0) + rb ** (8.0 / 3.0))
        + (47.0 / 18.0 - 7.0 * delta / 18.0) * gt
        - (2.5 - delta / 18.0) * (ga + gb)
        - (delta - 11.0) / 9.0 * (ra / safe * ga + rb / safe * gb)
    )
    gradient = -two_thirds_rho2 * gt + (two_thirds_rho2 - ra * ra) * gb + (two_thirds_rho2 - rb * rb) * ga

    value = -4.0 * a / denom * ra * rb / safe - a * b * omega * (pair + gradient)
    return _finish(np.where(rho > 0, value, 0.0))


# ============================================================================
# LOCAL HF EXCHANGE (precomputed features)
# ============================================================================

def hf_exchange_density(features: PointFeatures, omega: float):
    """Spin-summed local HF exchange for the omega_1 or omega_2 (-> infinity) channel."""
    if omega == OMEGA_1:
        return _finish(np.asarray(features.e_hf_w1_up) + np.asarray(features.e_hf_w1_down))
    if omega == OMEGA_2 or math.isinf(omega):
        return _finish(np.asarray(features.e_hf_w2_up) + np.asarray(features.e_hf_w2_down))
    raise ConfigError(f"No local HF channel stored for omega = {omega}", field="omega")


# ============================================================================
# COMPOSITIONS
# ============================================================================

def compose_b3lyp(ex_lda, ec_lda, ex_hf, ex_gga, ec_gga, coeffs=DEFAULT_B3LYP_COEFFS):
    """
    e_x^LDA + e_c^LDA + a (e_x^HF - e_x^LDA) + b (e_x^GGA - e_x^LDA) + c (e_c^GGA - e_c^LDA)
    """
    a, b, c = coeffs
    ex_lda, ec_lda, ex_hf, ex_gga, ec_gga = (
        np.asarray(v, dtype=np.float64) for v in (ex_lda, ec_lda, ex_hf, ex_gga, ec_gga)
    )
    return _finish(ex_lda + ec_lda + a * (ex_hf - ex_lda) + b * (ex_gga - ex_lda) + c * (ec_gga - ec_lda))


def _vacuum(features: PointFeatures) -> np.ndarray:
    return (np.asarray(features.rho_up) == 0) & (np.asarray(features.rho_down) == 0)


def b3lyp_density(features: PointFeatures, coeffs=DEFAULT_B3LYP_COEFFS, vwn_variant: str = DEFAULT_VWN_VARIANT):
    """B3LYP energy density, exact exchange taken from the omega_2 channel."""
    ex_lda = slater_exchange_density(features.rho_up, features.rho_down)
    ec_lda = vwn_correlation_density(features.rho_up, features.rho_down, vwn_variant)
    ex_hf = hf_exchange_density(features, OMEGA_2)
    ex_gga = np.asarray(b88_exchange_density(features.rho_up, features.grad_sq_up)) + np.asarray(
        b88_exchange_density(features.rho_down, features.grad_sq_down)
    )
    ec_gga = lyp_correlation_density(
        features.rho_up, features.rho_down, features.grad_sq_up, features.grad_sq_down, features.grad_sq_total
    )
    value = np.asarray(compose_b3lyp(ex_lda, ec_lda, ex_hf, ex_gga, ec_gga, coeffs))
    return _finish(np.where(_vacuum(features), 0.0, value))


def dm21_form_density(features: PointFeatures, factors, vwn_variant: str = DEFAULT_VWN_VARIANT):
    """
    a1 e^LDA + a2 e^{omega_2 HF} + a3 e^{omega_1 HF}.

    Args:
        features: point features (single point or grid columns)
        factors: (a1, a2, a3) constants, or an (N, 3) array of per-point factors

    Raises:
        DataError: factors are non-finite or have the wrong shape
    """
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape[-1:] != (3,):
        raise DataError(f"DM21 factors must have a trailing dimension of 3, got shape {factors.shape}")
    if not np.isfinite(factors).all():
        raise DataError("DM21 factors must be finite")
    a1, a2, a3 = factors[..., 0], factors[..., 1], factors[..., 2]

    e_lda = np.asarray(lda_xc_density(features.rho_up, features.rho_down, vwn_variant))
    value = (
        a1 * e_lda
        + a2 * np.asarray(hf_exchange_density(features, OMEGA_2))
        + a3 * np.asarray(hf_exchange_density(features, OMEGA_1))
    )
    return _finish(np.where(_vacuum(features), 0.0, value))


def conventional_density(features: PointFeatures, spec: ConventionalSpec, dm21_factors=None):
    """e_xc at every point for the configured conventional functional."""
    if spec.kind == "B3LYP":
        return b3lyp_density(features, spec.b3lyp_coeffs, spec.vwn_variant)
    if spec.kind == "LDA_ONLY":
        return lda_xc_density(features.rho_up, features.rho_down, spec.vwn_variant)
    factors = dm21_factors if dm21_factors is not None else spec.dm21_factors
    if factors is None:
        raise ConfigError("DM21_FORM evaluation needs per-point factors", field="dm21_factors")
    return dm21_form_density(features, factors, spec.vwn_variant)
