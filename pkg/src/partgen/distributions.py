"""Attribute distributions: categorical, discretized mixture of logistics, k-means codebooks.

Continuous attributes live in the normalized interval [-1, 1] which is split
into 256 bins of half-width ``BIN_HALF_WIDTH``; the two edge bins extend to
infinity.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

BIN_HALF_WIDTH = 1.0 / 255.0
LOG_SCALE_MIN = -7.0


@dataclass
class MixtureOfLogisticsParams:
    """Mixture parameters for a batch of d-dimensional attributes.

    logits: (..., K); means and log_scales: (..., d, K).
    """

    logits: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    def __post_init__(self):
        # scales below exp(LOG_SCALE_MIN) carry no extra information at this bin width
        self.log_scales = self.log_scales.clamp(min=LOG_SCALE_MIN)

    @classmethod
    def from_flat(cls, raw: torch.Tensor, dim: int, n_mix: int) -> "MixtureOfLogisticsParams":
        """Split a (..., (1 + 2 d) K) head output."""
        logits = raw[..., :n_mix]
        rest = raw[..., n_mix:].reshape(*raw.shape[:-1], 2, dim, n_mix)
        return cls(logits, rest[..., 0, :, :], rest[..., 1, :, :])

    @property
    def n_mix(self) -> int:
        return self.logits.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-2]


def _log1mexp(x: torch.Tensor) -> torch.Tensor:
    """log(1 - exp(x)) for x < 0."""
    x = x.clamp(max=-1e-30)
    return torch.where(x > -math.log(2.0), torch.log(-torch.expm1(x)), torch.log1p(-torch.exp(x)))


def _log_sigmoid_diff(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """log(sigmoid(a) - sigmoid(b)) for a > b, accurate in both tails."""
    # sigmoid(a) - sigmoid(b) == sigmoid(-b) - sigmoid(-a); use the side with small values
    flip = (a + b) > 0
    hi = torch.where(flip, -b, a)
    lo = torch.where(flip, -a, b)
    lhi = F.logsigmoid(hi)
    return lhi + _log1mexp(F.logsigmoid(lo) - lhi)


def mol_log_prob(params: MixtureOfLogisticsParams, x: torch.Tensor, bin_half_width: float = BIN_HALF_WIDTH) -> torch.Tensor:
    """Discretized mixture-of-logistics log-likelihood of x with shape (..., d)."""
    h = bin_half_width
    x = x.clamp(-1.0, 1.0).unsqueeze(-1)
    inv_s = torch.exp(-params.log_scales)
    centered = x - params.means
    plus = inv_s * (centered + h)
    minus = inv_s * (centered - h)

    interior = _log_sigmoid_diff(plus, minus)
    # pdf * 2h, only used if the interval mass underflows
    mid = inv_s * centered
    log_pdf = mid - params.log_scales - 2.0 * F.softplus(mid)
    interior = torch.where(torch.isfinite(interior), interior, log_pdf + math.log(2.0 * h))

    low_edge = F.logsigmoid(plus)
    high_edge = F.logsigmoid(-minus)
    log_mass = torch.where(x <= -1.0 + h, low_edge, torch.where(x >= 1.0 - h, high_edge, interior))
    joint = log_mass.sum(dim=-2) + F.log_softmax(params.logits, dim=-1)
    return torch.logsumexp(joint, dim=-1)


def bin_centers(bin_half_width: float = BIN_HALF_WIDTH) -> torch.Tensor:
    n = int(round(1.0 / bin_half_width)) + 1
    return torch.linspace(-1.0, 1.0, n, dtype=torch.float64)


def mol_sample(params: MixtureOfLogisticsParams, generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw x ~ MoL, shape (..., d), clamped to [-1, 1]."""
    probs = F.softmax(params.logits, dim=-1)
    flat = probs.reshape(-1, params.n_mix)
    k = torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])
    idx = k[..., None, None].expand(*params.means.shape[:-1], 1)
    mu = params.means.gather(-1, idx).squeeze(-1)
    s = params.log_scales.gather(-1, idx).squeeze(-1).exp()
    u = torch.rand(mu.shape, generator=generator, dtype=mu.dtype).clamp(1e-5, 1.0 - 1e-5)
    return (mu + s * (torch.log(u) - torch.log1p(-u))).clamp(-1.0, 1.0)


def categorical_nll(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    return -F.log_softmax(logits, dim=-1).gather(-1, label.unsqueeze(-1)).squeeze(-1)


def categorical_sample(
    logits: torch.Tensor, generator: torch.Generator | None = None, temperature: float = 1.0
) -> torch.Tensor:
    """Sample labels; temperature <= 0 means argmax."""
    if temperature <= 0:
        return logits.argmax(dim=-1)
    probs = F.softmax(logits / temperature, dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    return torch.multinomial(flat, 1, generator=generator).reshape(probs.shape[:-1])


@dataclass
class ClusterCodebook:
    name: str
    centers: np.ndarray  # (k, d)

    def assign(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64).reshape(-1, self.centers.shape[1])
        d = ((values[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return d.argmin(axis=1)

    def to_dict(self) -> dict:
        return {"name": self.name, "centers": self.centers.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterCodebook":
        return cls(d["name"], np.asarray(d["centers"], dtype=np.float64))


def fit_kmeans(values, k: int = 20, rng: np.random.Generator | None = None, name: str = "") -> ClusterCodebook:
    """Lloyd's k-means with k-means++ seeding (scikit-learn backend)."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) < k:
        raise ValueError(f"k-means needs at least k={k} samples, got {len(values)}")
    seed = int(rng.integers(2**31 - 1)) if rng is not None else 0
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(values)
    return ClusterCodebook(name, np.asarray(km.cluster_centers_, dtype=np.float64))
