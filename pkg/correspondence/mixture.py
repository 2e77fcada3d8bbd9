"""
Constrained mixture-of-Laplace predictive distribution.

Each pixel's flow y is modelled as

    p(y) = sum_m alpha_m * 1/(2 sigma_m^2) * exp(-sqrt(2/sigma_m^2) * |y - mu|_1)

with alpha = softmax(component logits) and every variance confined to its own
interval [beta_minus_m, beta_plus_m] through a sigmoid of an unconstrained raw
scale. All functions broadcast over leading grid dimensions: ``mu`` has shape
(..., 2), logits and raw scales have shape (..., M).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import InvalidConstraintSpec

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
LOG2 = np.log(2.0)


@dataclass(frozen=True)
class ConstraintSpec:
    """Ordered variance intervals (px^2), one per mixture component"""

    bounds: Tuple[Tuple[float, float], ...]
    ordered: bool = True
    min_variance: float = 1.0

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, 'bounds', bounds)
        self.validate()

    def validate(self):
        """Check the interval chain and the variance floor"""
        if not self.bounds:
            raise InvalidConstraintSpec("at least one mixture component is required")
        for m, (lo, hi) in enumerate(self.bounds):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise InvalidConstraintSpec(f"component {m + 1} has non-finite bounds")
            if lo <= 0 or lo > hi:
                raise InvalidConstraintSpec(
                    f"component {m + 1} needs 0 < beta_minus <= beta_plus, got ({lo}, {hi})"
                )
        if self.bounds[0][0] < self.min_variance:
            raise InvalidConstraintSpec(
                f"beta_minus of component 1 must be >= {self.min_variance}, got {self.bounds[0][0]}"
            )
        if self.ordered:
            for m in range(len(self.bounds) - 1):
                if self.bounds[m][1] > self.bounds[m + 1][0]:
                    raise InvalidConstraintSpec(
                        f"beta_plus of component {m + 1} exceeds beta_minus of component {m + 2}"
                    )

    @property
    def num_components(self) -> int:
        return len(self.bounds)

    @property
    def beta_minus(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def beta_plus(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    @property
    def fixed(self) -> np.ndarray:
        """Components whose variance does not depend on their raw scale"""
        return self.beta_minus == self.beta_plus

    @classmethod
    def default(cls, height: int, width: int) -> 'ConstraintSpec':
        """Two components: sigma_1^2 = 1 fixed, 2 <= sigma_2^2 <= H*W"""
        return cls(bounds=((1.0, 1.0), (2.0, float(height * width))))

    @classmethod
    def three_component(cls, height: int, width: int) -> 'ConstraintSpec':
        """Adds a fixed outlier component sigma_3^2 = H*W to the default spec"""
        area = float(height * width)
        return cls(bounds=((1.0, 1.0), (2.0, area), (area, area)))

    @classmethod
    def unconstrained(cls, num_components: int, low: float, high: float) -> 'ConstraintSpec':
        """Every component shares one interval, so component order is not identifiable"""
        return cls(bounds=tuple((low, high) for _ in range(num_components)), ordered=False,
                   min_variance=min(1.0, low))

    def to_dict(self) -> dict:
        return {'bounds': [list(b) for b in self.bounds], 'ordered': self.ordered,
                'min_variance': self.min_variance}

    @classmethod
    def from_dict(cls, data: dict) -> 'ConstraintSpec':
        return cls(bounds=tuple(tuple(b) for b in data['bounds']),
                   ordered=data.get('ordered', True),
                   min_variance=data.get('min_variance', 1.0))


@dataclass
class MixtureParams:
    """Predictive distribution parameters for one pixel or a grid of pixels"""

    mu: np.ndarray
    component_logits: np.ndarray
    raw_scales: np.ndarray
    constraints: ConstraintSpec = field(default_factory=lambda: ConstraintSpec.default(1, 2))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.component_logits = np.asarray(self.component_logits, dtype=np.float64)
        self.raw_scales = np.asarray(self.raw_scales, dtype=np.float64)
        m = self.constraints.num_components
        if self.component_logits.shape[-1] != m or self.raw_scales.shape[-1] != m:
            raise InvalidConstraintSpec(
                f"expected {m} components, got logits {self.component_logits.shape} "
                f"and raw scales {self.raw_scales.shape}"
            )

    @property
    def weights(self) -> np.ndarray:
        """alpha_m = softmax of the component logits (max-shifted)"""
        shifted = self.component_logits - self.component_logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def variances(self) -> np.ndarray:
        return constrain_variance(self.raw_scales, self.constraints.beta_minus,
                                  self.constraints.beta_plus)

    @property
    def log_variances(self) -> np.ndarray:
        return np.log(self.variances)


def constrain_variance(h, beta_minus, beta_plus):
    """Map an unconstrained raw scale into [beta_minus, beta_plus]"""
    h = np.asarray(h, dtype=np.float64)
    beta_minus = np.asarray(beta_minus, dtype=np.float64)
    beta_plus = np.asarray(beta_plus, dtype=np.float64)
    value = beta_minus + (beta_plus - beta_minus) * expit(h)
    value = np.clip(value, beta_minus, beta_plus)
    if value.ndim == 0:
        return float(value)
    return value


def _l1_residual(y, mu) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=np.float64) - mu).sum(axis=-1)


def density(y, params: MixtureParams):
    """Mixture density at y (px^-2)"""
    var = params.variances
    l1 = _l1_residual(y, params.mu)[..., None]
    comps = params.weights / (2.0 * var) * np.exp(-np.sqrt(2.0 / var) * l1)
    result = comps.sum(axis=-1)
    return float(result) if result.ndim == 0 else result


def _component_log_terms(y, params: MixtureParams):
    s = params.log_variances
    l1 = _l1_residual(y, params.mu)[..., None]
    a = params.component_logits - LOG2 - s - SQRT2 * np.exp(-0.5 * s) * l1
    return a, s, l1


def nll(y, params: MixtureParams):
    """Negative log-likelihood in nats, evaluated in log-variance space with logsumexp"""
    a, _, _ = _component_log_terms(y, params)
    result = logsumexp(params.component_logits, axis=-1) - logsumexp(a, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


@dataclass
class MixtureGradient:
    """Partial derivatives of the NLL w.r.t. the public parametrisation"""

    mu: np.ndarray
    component_logits: np.ndarray
    raw_scales: np.ndarray


def nll_gradient(y, params: MixtureParams) -> MixtureGradient:
    """Analytic gradient of ``nll`` through the sigmoid constraint and the softmax.

    The L1 residual uses the subgradient 0 on an axis where y equals mu exactly.
    """
    a, s, l1 = _component_log_terms(y, params)
    resp = np.exp(a - logsumexp(a, axis=-1, keepdims=True))
    alpha = params.weights

    d_logits = alpha - resp

    inv_sigma = np.exp(-0.5 * s)
    d_s = resp * (1.0 - (SQRT2 / 2.0) * inv_sigma * l1)
    spec = params.constraints
    span = spec.beta_plus - spec.beta_minus
    sig_slope = expit(params.raw_scales) * expit(-params.raw_scales)
    var = np.exp(s)
    d_raw = np.where(spec.fixed, 0.0, d_s * span * sig_slope / var)

    residual = np.asarray(y, dtype=np.float64) - params.mu
    pull = (resp * SQRT2 * inv_sigma).sum(axis=-1, keepdims=True)
    d_mu = -np.sign(residual) * pull

    return MixtureGradient(mu=d_mu, component_logits=d_logits, raw_scales=d_raw)


def confidence_pr(params: MixtureParams, radius):
    """Probability mass inside the L-infinity box of half-width ``radius`` around mu"""
    radius = np.asarray(radius, dtype=np.float64)
    sigma = np.sqrt(params.variances)
    inside = -np.expm1(-SQRT2 * np.expand_dims(radius, -1) / sigma)
    result = (params.weights * inside ** 2).sum(axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def mixture_variance(params: MixtureParams):
    """V = sum_m alpha_m sigma_m^2"""
    result = (params.weights * params.variances).sum(axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def sample(params: MixtureParams, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw a component from alpha, then each axis from Laplace(mu, sigma_m / sqrt(2))"""
    batch_shape = params.mu.shape[:-1]
    shape = batch_shape if size is None else (size,) + batch_shape
    cumulative = np.cumsum(params.weights, axis=-1)
    u = rng.random(shape)
    index = (u[..., None] >= cumulative).sum(axis=-1)
    index = np.minimum(index, params.constraints.num_components - 1)
    scales = np.sqrt(params.variances) / SQRT2
    chosen = np.take_along_axis(np.broadcast_to(scales, shape + scales.shape[-1:]),
                                index[..., None], axis=-1)
    noise = rng.laplace(0.0, 1.0, size=shape + (2,)) * chosen
    return params.mu + noise

