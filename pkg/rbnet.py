# Residual network - trunk + two heads with hand-written forward and backward passes
# The clamp maps raw head outputs to a bounded residual energy density and log-variance

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from errors import DataError, NumericalError

DEFAULT_HIDDEN_WIDTHS = (128, 256, 256, 256, 128)
DEFAULT_HEAD_WIDTH = 50
DEFAULT_ACTIVATION = "silu"
INIT_SCHEME = "lecun_normal+zero_head_output"

# Offset of the signed-log transform applied to density-like inputs
SIGNED_LOG_SCALE = 1e-4

FEATURE_WIDTHS = {"Y16": 16, "X11": 11}


class ClampConfig(BaseModel):
    """k1 bounds the residual mean, k2 and epsilon bound the log-variance."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    k1: float = Field(1.0, ge=0.0, le=2.0)
    k2: float = Field(1.0, gt=0.0, le=2.0)
    epsilon: float = Field(1e-4, gt=0.0)


@dataclass(frozen=True)
class ResidualOutput:
    e_bar: np.ndarray
    s_bar: np.ndarray


# ============================================================================
# ACTIVATIONS
# ============================================================================

def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s + z * s * (1.0 - s)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    # name: (function, derivative, Lipschitz constant)
    "silu": (_silu, _silu_grad, 1.0999),
    "tanh": (np.tanh, _tanh_grad, 1.0),
    "softplus": (lambda z: np.logaddexp(0.0, z), expit, 1.0),
}


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)


@dataclass
class NetworkParams:
    """Trunk + mean head + variance head. Weights are float64, shapes (fan_in, fan_out)."""

    trunk: List[Dense]
    head_mean: List[Dense]
    head_var: List[Dense]
    activation: str = DEFAULT_ACTIVATION
    seed: int = 0
    init_scheme: str = INIT_SCHEME

    @property
    def input_width(self) -> int:
        return self.trunk[0].weight.shape[0]

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return tuple(layer.weight.shape[1] for layer in self.trunk)

    @property
    def head_width(self) -> int:
        return self.head_mean[0].weight.shape[1]

    def named_layers(self) -> List[Tuple[str, Dense]]:
        named = [(f"trunk.{i}", layer) for i, layer in enumerate(self.trunk)]
        named += [(f"head_mean.{i}", layer) for i, layer in enumerate(self.head_mean)]
        named += [(f"head_var.{i}", layer) for i, layer in enumerate(self.head_var)]
        return named

    def arrays(self) -> List[np.ndarray]:
        """Every weight and bias in a fixed order (trunk, mean head, variance head)."""
        out = []
        for _, layer in self.named_layers():
            out.extend([layer.weight, layer.bias])
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "NetworkParams":
        it = iter(arrays)

        def rebuild(layers):
            return [Dense(next(it), next(it)) for _ in layers]

        return replace(self, trunk=rebuild(self.trunk), head_mean=rebuild(self.head_mean), head_var=rebuild(self.head_var))

    def copy(self) -> "NetworkParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def _layer_shapes(input_width: int, hidden_widths: Sequence[int], head_width: int):
    trunk = list(zip([input_width] + list(hidden_widths[:-1]), hidden_widths))
    head = [(hidden_widths[-1], head_width), (head_width, 1)]
    return trunk, head


def init_params(
    seed: int,
    input_width: int = 16,
    hidden_widths: Sequence[int] = DEFAULT_HIDDEN_WIDTHS,
    head_width: int = DEFAULT_HEAD_WIDTH,
    activation: str = DEFAULT_ACTIVATION,
    var_bias: float = 0.0,
) -> NetworkParams:
    """
    Fan-in scaled normal weights (variance 1 / fan_in), zero biases.

    The last layer of each head starts at zero weights so a fresh network
    reproduces the conventional functional exactly (e_bar = 0). The variance
    head's output bias is var_bias, so s0 starts there; training passes
    log(epsilon), the value the clamp ceiling takes at e_bar = 0.
    """
    if activation not in ACTIVATIONS:
        raise DataError(f"Unknown activation '{activation}' (known: {sorted(ACTIVATIONS)})")
    rng = np.random.default_rng(seed)
    trunk_shapes, head_shapes = _layer_shapes(input_width, hidden_widths, head_width)

    def dense(fan_in, fan_out, zero=False):
        if zero:
            return Dense(np.zeros((fan_in, fan_out)), np.zeros(fan_out))
        return Dense(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), np.zeros(fan_out))

    trunk = [dense(i, o) for i, o in trunk_shapes]
    head_mean = [dense(*head_shapes[0]), dense(*head_shapes[1], zero=True)]
    head_var = [dense(*head_shapes[0]), dense(*head_shapes[1], zero=True)]
    head_var[1].bias[:] = var_bias
    return NetworkParams(trunk, head_mean, head_var, activation=activation, seed=seed)


def zero_params(
    input_width: int = 16,
    hidden_widths: Sequence[int] = DEFAULT_HIDDEN_WIDTHS,
    head_width: int = DEFAULT_HEAD_WIDTH,
    activation: str = DEFAULT_ACTIVATION,
) -> NetworkParams:
    """All-zero network: e0 = s0 = 0 for every input (the conventional baseline)."""
    trunk_shapes, head_shapes = _layer_shapes(input_width, hidden_widths, head_width)
    zeros = lambda i, o: Dense(np.zeros((i, o)), np.zeros(o))
    return NetworkParams(
        [zeros(i, o) for i, o in trunk_shapes],
        [zeros(*s) for s in head_shapes],
        [zeros(*s) for s in head_shapes],
        activation=activation,
        seed=0,
        init_scheme="zeros",
    )


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

@dataclass
class ForwardCache:
    inputs: np.ndarray
    trunk: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (pre, post) per layer
    head_mean: Tuple[np.ndarray, np.ndarray] = None
    head_var: Tuple[np.ndarray, np.ndarray] = None


def _checked(values: np.ndarray, layer: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NumericalError(f"Non-finite activation in layer '{layer}'", layer=layer)
    return values


def _run(params: NetworkParams, y: np.ndarray, cache: Optional[ForwardCache]):
    act = ACTIVATIONS[params.activation][0]
    h = y
    for i, layer in enumerate(params.trunk):
        z = _checked(h @ layer.weight + layer.bias, f"trunk.{i}")
        h = act(z)
        if cache is not None:
            cache.trunk.append((z, h))

    outputs = []
    for name, head in (("head_mean", params.head_mean), ("head_var", params.head_var)):
        z = _checked(h @ head[0].weight + head[0].bias, f"{name}.0")
        m = act(z)
        out = _checked(m @ head[1].weight + head[1].bias, f"{name}.1")
        if cache is not None:
            setattr(cache, name, (z, m))
        outputs.append(out[..., 0])
    return outputs[0], outputs[1]


def _as_batch(params: NetworkParams, y) -> Tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    batch = y[None, :] if single else y
    if batch.ndim != 2 or batch.shape[1] != params.input_width:
        raise DataError(f"Network expects inputs of width {params.input_width}, got shape {y.shape}")
    _checked(batch, "input")
    return batch, single


def forward(params: NetworkParams, y) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw head outputs (e0, s0) for one input vector or a batch of rows.

    Raises:
        NumericalError: a layer produced a non-finite value; `layer` names it
    """
    batch, single = _as_batch(params, y)
    e0, s0 = _run(params, batch, None)
    if single:
        return e0[0], s0[0]
    return e0, s0


def forward_with_cache(params: NetworkParams, y) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    batch, _ = _as_batch(params, y)
    cache = ForwardCache(inputs=batch)
    e0, s0 = _run(params, batch, cache)
    return e0, s0, cache


def backward(params: NetworkParams, cache: ForwardCache, grad_e0, grad_s0) -> NetworkParams:
    """
    Exact gradients of sum(grad_e0 * e0 + grad_s0 * s0) with respect to every weight and bias.

    Args:
        params: the parameters the cached forward pass used
        cache: from forward_with_cache on the same batch
        grad_e0, grad_s0: upstream gradients, one per batch row

    Returns: NetworkParams holding the gradients
    """
    n = cache.inputs.shape[0]
    grad_e0 = np.asarray(grad_e0, dtype=np.float64).reshape(-1)
    grad_s0 = np.asarray(grad_s0, dtype=np.float64).reshape(-1)
    if grad_e0.shape != (n,) or grad_s0.shape != (n,):
        raise DataError(f"Upstream gradients must have length {n} (got {grad_e0.size} and {grad_s0.size})")

    act_grad = ACTIVATIONS[params.activation][1]
    h_top = cache.trunk[-1][1]

    def head_backward(head: List[Dense], saved, upstream):
        z, m = saved
        d_out = upstream[:, None]
        out_layer = Dense(m.T @ d_out, d_out.sum(axis=0))
        dz = (d_out @ head[1].weight.T) * act_grad(z)
        in_layer = Dense(h_top.T @ dz, dz.sum(axis=0))
        return [in_layer, out_layer], dz @ head[0].weight.T

    grads_mean, dh_mean = head_backward(params.head_mean, cache.head_mean, grad_e0)
    grads_var, dh_var = head_backward(params.head_var, cache.head_var, grad_s0)

    dh = dh_mean + dh_var
    grads_trunk = [None] * len(params.trunk)
    for i in range(len(params.trunk) - 1, -1, -1):
        z, _ = cache.trunk[i]
        below = cache.inputs if i == 0 else cache.trunk[i - 1][1]
        dz = dh * act_grad(z)
        grads_trunk[i] = Dense(below.T @ dz, dz.sum(axis=0))
        if i > 0:
            dh = dz @ params.trunk[i].weight.T

    return replace(params, trunk=grads_trunk, head_mean=grads_mean, head_var=grads_var)


def direct_forward(params_11: NetworkParams, x) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unclamped (e_hat, s_hat) from the 11 raw-order point features.

    This is the non-residual ablation: nothing bounds either output, so
    variances integrated over many points can grow without limit.
    """
    if params_11.input_width != 11:
        raise DataError(f"Direct mode needs an 11-wide network, got {params_11.input_width}")
    if hasattr(x, "to_array"):
        x = x.to_array()
    return forward(params_11, x)


# ============================================================================
# CLAMP
# ============================================================================

def clamp_residual(e0, s0, e_conv, cfg: ClampConfig) -> ResidualOutput:
    """
    e_bar = k1 tanh(e0) e_conv,  s_bar = min(s0, log(k2^2 e_bar^2 + epsilon)).

    Both s values live in log-variance space.
    """
    e0 = np.asarray(e0, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    e_conv = np.asarray(e_conv, dtype=np.float64)
    e_bar = cfg.k1 * np.tanh(e0) * e_conv
    s_bar = np.minimum(s0, variance_ceiling(e_bar, cfg))
    return ResidualOutput(e_bar=e_bar, s_bar=s_bar)


def variance_ceiling(e_bar, cfg: ClampConfig) -> np.ndarray:
    return np.log((cfg.k2 * cfg.k2) * (e_bar * e_bar) + cfg.epsilon)


def clamp_backward(e0, s0, e_conv, cfg: ClampConfig, grad_e_bar, grad_s_bar) -> Tuple[np.ndarray, np.ndarray]:
    """Chain rule through clamp_residual. Ties in the min go to the s0 branch."""
    e0 = np.asarray(e0, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    e_conv = np.asarray(e_conv, dtype=np.float64)
    t = np.tanh(e0)
    e_bar = cfg.k1 * t * e_conv
    ceiling = variance_ceiling(e_bar, cfg)
    use_s0 = s0 <= ceiling

    de_bar_de0 = cfg.k1 * (1.0 - t * t) * e_conv
    dceiling_de_bar = 2.0 * cfg.k2 * cfg.k2 * e_bar / (cfg.k2 * cfg.k2 * e_bar * e_bar + cfg.epsilon)

    grad_s_bar = np.asarray(grad_s_bar, dtype=np.float64)
    grad_e_total = np.asarray(grad_e_bar, dtype=np.float64) + np.where(use_s0, 0.0, grad_s_bar * dceiling_de_bar)
    grad_e0 = grad_e_total * de_bar_de0
    grad_s0 = np.where(use_s0, grad_s_bar, 0.0)
    return grad_e0, grad_s0


# ============================================================================
# INPUT STANDARDIZATION
# ============================================================================

def signed_log(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.log1p(np.abs(values) / SIGNED_LOG_SCALE)


@dataclass
class Standardizer:
    """Per-feature affine map applied after an optional signed-log squash."""

    shift: np.ndarray
    scale: np.ndarray
    log_mask: np.ndarray

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width), np.zeros(width, dtype=bool))

    @classmethod
    def fit(cls, rows: np.ndarray, log_mask: np.ndarray) -> "Standardizer":
        """Fit on training rows; constant columns keep unit scale."""
        log_mask = np.asarray(log_mask, dtype=bool)
        squashed = np.where(log_mask, signed_log(rows), rows)
        shift = squashed.mean(axis=0)
        scale = squashed.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(shift, scale, log_mask)

    @property
    def width(self) -> int:
        return self.shift.shape[0]

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        squashed = np.where(self.log_mask, signed_log(rows), rows)
        return (squashed - self.shift) / self.scale


def default_log_mask(feature_set: str) -> np.ndarray:
    """Squash every density-like column; the Y16 weight column stays linear."""
    width = FEATURE_WIDTHS[feature_set]
    mask = np.ones(width, dtype=bool)
    if feature_set == "Y16":
        mask[-1] = False
    return mask


@dataclass
class ResidualModel:
    """Everything needed to turn a grid into residual energies."""

    params: NetworkParams
    standardizer: Standardizer
    clamp: ClampConfig
    feature_set: str = "Y16"
    loss_mode: str = "RBNET"

    @property
    def direct(self) -> bool:
        return self.loss_mode == "DIRECT_U"

    def describe(self) -> Dict:
        return {
            "feature_set": self.feature_set,
            "loss_mode": self.loss_mode,
            "activation": self.params.activation,
            "hidden_widths": list(self.params.hidden_widths),
            "head_width": self.params.head_width,
            "clamp": self.clamp.model_dump(),
        }
