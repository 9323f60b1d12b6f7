"""Von Mises mixture distributions on the m-torus and trajectory containers.

Angles live in [0, 2pi). Mixture parameters are per-torsion: shape (m, K)
arrays of weights, locations and concentrations. Log-density code runs on
torch tensors so the same formulas serve both plain evaluation and
gradient-based training; plain-array inputs are converted and a float is
returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

TWO_PI = 2.0 * math.pi
LOG_TWO_PI = math.log(TWO_PI)

DEFAULT_KAPPA_MAX = 500.0

# I0(k) ~ exp(k)/sqrt(2 pi k) * (1 + sum a_n / k^n); a_n = prod_{i<=n}(2i-1)^2 / (n! 8^n)
_I0_ASYMPTOTIC_COEFFS = []
_num, _den = 1.0, 1.0
for _n in range(1, 9):
    _num *= (2 * _n - 1) ** 2
    _den *= _n * 8.0
    _I0_ASYMPTOTIC_COEFFS.append(_num / _den)
_I0_SERIES_CUTOFF = 20.0
_I0_SERIES_TERMS = 30


class KappaOverflowError(ValueError):
    """Concentration above the configured ceiling."""


def wrap(x):
    """Map angles into [0, 2pi)."""
    if isinstance(x, torch.Tensor):
        return torch.remainder(x, TWO_PI)
    return np.mod(x, TWO_PI)


def wrapped_delta(a, b):
    """Signed smallest angular difference a - b, in (-pi, pi]."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), TWO_PI)
    return np.where(d > math.pi, d - TWO_PI, d)


def wrapped_linf(a, b):
    """Wrapped L-infinity distance between two angle vectors."""
    return float(np.max(np.abs(wrapped_delta(a, b)))) if np.size(a) else 0.0


def log_bessel_i0(kappa: torch.Tensor) -> torch.Tensor:
    """log I0(kappa): power series below kappa=20, asymptotic expansion above."""
    kappa = torch.as_tensor(kappa, dtype=torch.float64)
    small = kappa < _I0_SERIES_CUTOFF
    # series branch; clamp keeps the dead branch finite so autograd stays NaN-free
    ks = torch.clamp(kappa, max=_I0_SERIES_CUTOFF)
    q = (ks * ks) / 4.0
    term = torch.ones_like(ks)
    acc = torch.ones_like(ks)
    for n in range(1, _I0_SERIES_TERMS):
        term = term * q / (n * n)
        acc = acc + term
    log_series = torch.log(acc)
    # asymptotic branch
    kl = torch.clamp(kappa, min=_I0_SERIES_CUTOFF)
    corr = torch.zeros_like(kl)
    inv = 1.0 / kl
    p = inv
    for c in _I0_ASYMPTOTIC_COEFFS:
        corr = corr + c * p
        p = p * inv
    log_asym = kl - 0.5 * torch.log(TWO_PI * kl) + torch.log1p(corr)
    return torch.where(small, log_series, log_asym)


@dataclass
class MixtureParams:
    """Per-torsion von Mises mixture parameters, each of shape (m, K)."""

    weights: np.ndarray | torch.Tensor
    locations: np.ndarray | torch.Tensor
    concentrations: np.ndarray | torch.Tensor
    kappa_max: float = DEFAULT_KAPPA_MAX

    @property
    def m(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[1])

    def validate(self) -> None:
        w = _to_numpy(self.weights)
        k = _to_numpy(self.concentrations)
        if w.shape != _to_numpy(self.locations).shape or w.shape != k.shape:
            raise ValueError("mixture parameter arrays must share shape (m, K)")
        if np.any(w < -1e-12):
            raise ValueError("mixture weights must be non-negative")
        if np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("mixture weights must sum to 1 per torsion")
        if np.any(k < 0):
            raise ValueError("concentrations must be non-negative")
        if np.any(k > self.kappa_max):
            raise KappaOverflowError(
                f"concentration {k.max():g} exceeds kappa_max={self.kappa_max:g}"
            )

    @staticmethod
    def uniform(m: int, n_components: int = 1) -> "MixtureParams":
        """The uniform distribution on the m-torus (kappa = 0)."""
        return MixtureParams(
            weights=np.full((m, n_components), 1.0 / n_components),
            locations=np.zeros((m, n_components)),
            concentrations=np.zeros((m, n_components)),
        )


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x, dtype=float)


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def vm_mixture_logpdf_t(
    x: torch.Tensor, w: torch.Tensor, mu: torch.Tensor, kappa: torch.Tensor
) -> torch.Tensor:
    """Joint log-density over independent per-torsion mixtures, torch tensors.

    Shapes: x (..., m); w, mu, kappa (..., m, K). Returns (...).
    Per torsion: logsumexp_k[log w_k + kappa_k cos(x - mu_k) - log I0(kappa_k)] - log 2pi.
    """
    comp = torch.log(w) + kappa * torch.cos(x.unsqueeze(-1) - mu) - log_bessel_i0(kappa)
    return (torch.logsumexp(comp, dim=-1) - LOG_TWO_PI).sum(dim=-1)


def vm_mixture_logpdf(x, params: MixtureParams):
    """Log-density of the angle vector x under the mixture; sums over torsions.

    Returns a float for plain-array inputs, a tensor when any input carries
    gradients.
    """
    kk = _to_numpy(params.concentrations)
    if np.any(kk > params.kappa_max):
        raise KappaOverflowError(
            f"concentration {kk.max():g} exceeds kappa_max={params.kappa_max:g}"
        )
    tensor_in = isinstance(params.weights, torch.Tensor) or isinstance(x, torch.Tensor)
    out = vm_mixture_logpdf_t(
        _to_tensor(x),
        _to_tensor(params.weights),
        _to_tensor(params.locations),
        _to_tensor(params.concentrations),
    )
    return out if tensor_in else float(out)


def _sample_von_mises(mu: float, kappa: float, rng: np.random.Generator) -> float:
    """Best-Fisher rejection sampler for a single von Mises draw."""
    if kappa < 1e-8:
        return float(rng.uniform(0.0, TWO_PI))
    tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
    rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
    r = (1.0 + rho * rho) / (2.0 * rho)
    while True:
        u1, u2 = rng.uniform(size=2)
        z = math.cos(math.pi * u1)
        f = (1.0 + r * z) / (r + z)
        c = kappa * (r - f)
        if c * (2.0 - c) - u2 > 0.0 or math.log(c / u2) + 1.0 - c >= 0.0:
            break
    u3 = rng.uniform()
    angle = mu + math.copysign(math.acos(max(-1.0, min(1.0, f))), u3 - 0.5)
    return float(np.mod(angle, TWO_PI))


def vm_mixture_sample(params: MixtureParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one angle per torsion: categorical component, then Best-Fisher."""
    w = _to_numpy(params.weights)
    mu = _to_numpy(params.locations)
    kappa = _to_numpy(params.concentrations)
    out = np.empty(params.m)
    for i in range(params.m):
        k = rng.choice(w.shape[1], p=w[i] / w[i].sum())
        out[i] = _sample_von_mises(float(mu[i, k]), float(kappa[i, k]), rng)
    return out


def _check_step(t: int, n_steps: int) -> None:
    if not 1 <= t <= n_steps:
        raise ValueError(f"step index {t} outside 1..{n_steps}")


def forward_step_logpdf(t: int, frm, to, params: MixtureParams | None, n_steps: int, m: int):
    """Forward transition log-density at step t.

    The first transition (source -> state) is uniform on the torus; later
    steps evaluate the mixture conditioned on the departing state.
    """
    _check_step(t, n_steps)
    if t == 1:
        return -m * LOG_TWO_PI
    return vm_mixture_logpdf(to, params)


def backward_step_logpdf(t: int, frm, to, params: MixtureParams | None, n_steps: int, m: int):
    """Backward transition log-density at step t; t=1 collapses to the source."""
    _check_step(t, n_steps)
    if t == 1:
        return 0.0
    return vm_mixture_logpdf(to, params)


@dataclass
class Trajectory:
    """A source-to-terminal walk with accumulated policy log-densities.

    states[0] is None (abstract source); states[1..n] are angle vectors.
    """

    states: list = field(default_factory=list)
    log_pf: float = 0.0
    log_pb: float = 0.0
    log_reward: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]
