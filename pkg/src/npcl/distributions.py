"""Diagonal Gaussians and the divergences used throughout the model.

Means and variances are held as autodiff tensors so that KL and JS terms
remain differentiable end to end. Variances are floored at ``VAR_FLOOR``;
upstream variance heads are expected to map raw outputs through softplus
plus the floor before constructing a distribution.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


VAR_FLOOR = 1e-8


class InvalidDistributionError(ValueError):
    pass


class DiagGaussian:
    """Diagonal Gaussian over a latent vector, parameterized by mean and variance."""

    __slots__ = ("mean", "var")

    def __init__(self, mean, var):
        self.mean = mean if isinstance(mean, Tensor) else Tensor(mean)
        self.var = var if isinstance(var, Tensor) else Tensor(var)
        if self.mean.data.shape != self.var.data.shape:
            raise InvalidDistributionError(
                f"dimension mismatch: {self.mean.data.shape} vs {self.var.data.shape}"
            )
        if self.mean.data.ndim != 1:
            raise InvalidDistributionError(
                f"DiagGaussian expects 1-d mean/var, got shape {self.mean.data.shape}"
            )
        if np.any(self.var.data < VAR_FLOOR * (1.0 - 1e-9)):
            raise InvalidDistributionError(
                f"variance components must be >= {VAR_FLOOR}, got min {self.var.data.min()}"
            )

    @property
    def dim(self) -> int:
        return self.mean.data.shape[0]

    def detached(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.var.detach())

    def to_lists(self) -> dict:
        return {"mean": self.mean.data.tolist(), "var": self.var.data.tolist()}

    @classmethod
    def from_lists(cls, payload: dict) -> "DiagGaussian":
        return cls(np.asarray(payload["mean"]), np.asarray(payload["var"]))

    def __repr__(self):
        return f"DiagGaussian(dim={self.dim})"


def _check_dims(a: DiagGaussian, b: DiagGaussian):
    if a.dim != b.dim:
        raise InvalidDistributionError(f"dimension mismatch: {a.dim} vs {b.dim}")


def reparam_sample(g: DiagGaussian, n: int, rng: np.random.Generator, eps=None) -> Tensor:
    """Draw n samples z = mean + sqrt(var) * eps with eps ~ N(0, I).

    Returns an (n, dim) tensor differentiable through the mean and variance.
    ``eps`` may be supplied explicitly (test hook); eps of zero reproduces
    the mean exactly.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if eps is None:
        eps = rng.standard_normal((n, g.dim))
    else:
        eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n, g.dim))
    std = T.sqrt(T.reshape(g.var, (1, g.dim)))
    mean = T.reshape(g.mean, (1, g.dim))
    return T.add(mean, T.mul(std, Tensor(eps)))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dimensions."""
    _check_dims(q, p)
    ratio = T.div(q.var, p.var)
    diff = T.sub(p.mean, q.mean)
    maha = T.div(T.square(diff), p.var)
    log_term = T.sub(T.log(p.var), T.log(q.var))
    per_dim = T.sub(T.add(T.add(ratio, maha), log_term), 1.0)
    return T.mul(T.tsum(per_dim), 0.5)


def js_diag(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Symmetric divergence via the moment-matched Gaussian of the mixture.

    The midpoint m matches the first two moments of the equal-weight mixture
    of p and q, giving a closed-form, differentiable score that is zero iff
    the two distributions coincide; it is symmetric by construction.
    """
    _check_dims(p, q)
    half = 0.5
    m_mean = T.mul(T.add(p.mean, q.mean), half)
    delta = T.mul(T.sub(p.mean, q.mean), half)
    m_var = T.add(T.mul(T.add(p.var, q.var), half), T.square(delta))
    m = DiagGaussian(m_mean, m_var)
    return T.add(T.mul(kl_diag(p, m), half), T.mul(kl_diag(q, m), half))


def shannon_entropy(probs) -> float:
    """-sum(p * ln p) with the 0 * ln 0 := 0 convention (natural log)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < -1e-12):
        raise InvalidDistributionError(f"negative probability component: min {p.min()}")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise InvalidDistributionError(f"probabilities sum to {total}, expected 1 within 1e-6")
    mask = p > 0.0
    return float(-(p[mask] * np.log(p[mask])).sum())


def average_distributions(ds: Sequence[DiagGaussian]) -> DiagGaussian:
    """Componentwise arithmetic mean of means and of variances."""
    ds = list(ds)
    if not ds:
        raise InvalidDistributionError("cannot average an empty list of distributions")
    dim = ds[0].dim
    for d in ds[1:]:
        if d.dim != dim:
            raise InvalidDistributionError(f"dimension mismatch: {dim} vs {d.dim}")
    if len(ds) == 1:
        return ds[0]
    means = T.concat([T.reshape(d.mean, (1, dim)) for d in ds], axis=0)
    vars_ = T.concat([T.reshape(d.var, (1, dim)) for d in ds], axis=0)
    return DiagGaussian(T.tmean(means, axis=0), T.tmean(vars_, axis=0))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis of a plain array (no autodiff)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gaussian_logpdf(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)
