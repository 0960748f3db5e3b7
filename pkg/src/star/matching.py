"""Numeral-state matching.

A trainable linear projection aligns backbone patch embeddings with the
state embedding dimension; an in-batch InfoNCE loss over patches treats the
index-aligned (numeral, state) pair as positive and every other numeral
embedding in the batch as a negative for that state. At inference the
per-patch cosine similarity becomes the match score.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import Linear, prefixed

NORM_GUARD = 1e-16  # added under the sqrt: norms are floored at 1e-8


def _normalize(x: Tensor) -> Tensor:
    norm = ad.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_GUARD)
    return x / norm


class MatchingHead:
    """Projection of backbone patch embeddings into the state dimension."""

    def __init__(self, d_backbone: int, d_state: int, tau: float = 0.1,
                 rng: np.random.Generator | None = None):
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tau = tau
        self.proj = Linear(d_backbone, d_state, rng)

    def parameters(self) -> dict[str, Tensor]:
        return prefixed("proj", self.proj.parameters())

    def project(self, hidden: Tensor) -> Tensor:
        return self.proj(hidden)


def match_loss(n_patch: Tensor, s_patch: Tensor, tau: float) -> Tensor:
    """In-batch InfoNCE over M index-aligned patch pairs.

    loss = -(1/M) sum_t log( exp(sim(N_t, S_t)/tau)
                             / sum_k exp(sim(N_k, S_t)/tau) )
    with cosine similarity; negatives vary the numeral side only.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if n_patch.shape != s_patch.shape or n_patch.ndim != 2:
        raise ConfigError("expected aligned (M, d) embedding batches")
    M = n_patch.shape[0]
    n_hat = _normalize(n_patch)
    s_hat = _normalize(s_patch)
    sim = (n_hat @ s_hat.transpose(1, 0)) * (1.0 / tau)       # [k, t] = sim(N_k, S_t)/tau
    diag = (sim * Tensor(np.eye(M))).sum(axis=0)              # sim(N_t, S_t)/tau
    lse = ad.logsumexp(sim, axis=0)                           # over numeral index k
    return (lse - diag).mean()


def match_score(n_patch: np.ndarray, s_patch: np.ndarray) -> np.ndarray:
    """Per-patch cosine similarity in [-1, 1]; rows are index-aligned."""
    n = np.asarray(n_patch, dtype=np.float64)
    s = np.asarray(s_patch, dtype=np.float64)
    if n.shape != s.shape:
        raise ConfigError("expected aligned embedding arrays")
    nn = np.sqrt((n * n).sum(axis=-1) + NORM_GUARD)
    ss = np.sqrt((s * s).sum(axis=-1) + NORM_GUARD)
    return (n * s).sum(axis=-1) / (nn * ss)
