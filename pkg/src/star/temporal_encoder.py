"""Patch-level temporal encoding of point-wise state embeddings.

Points are reshaped into m patches of length l, aggregated within each patch
(f1 on the flattened patch), mixed across patches per (variable, channel)
with a residual (f2), then collapsed across state variables with learned
scalar weights (f3) and refined (f4).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import MLP, prefixed


@dataclass
class PatchTensor:
    P: Tensor          # (..., m, l, C_s, d) pure reshape of the input
    P_intra: Tensor    # (..., m, C_s, d)
    P_inter: Tensor    # (..., m, C_s, d)


@dataclass
class PatchStateEmbedding:
    S_patch: Tensor    # (..., m, d)
    W_agg: Tensor      # (..., m, C_s) unnormalized aggregation weights


class TemporalEncoder:
    """f1..f4 of the patch encoder; all two-layer perceptrons."""

    def __init__(self, d: int, l: int, m: int, hidden: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.l, self.m = d, l, m
        if m == 1:
            warnings.warn("m=1: inter-patch mixing degenerates to a 1x1 map")
        self.f1 = MLP([l * d, hidden, d], rng)
        self.f2 = MLP([m, hidden, m], rng)
        self.f3 = MLP([d, hidden, 1], rng)
        self.f4 = MLP([d, hidden, d], rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("f1", "f2", "f3", "f4"):
            out.update(prefixed(name, getattr(self, name).parameters()))
        return out

    def intra_inter(self, S_point: Tensor) -> PatchTensor:
        """(..., T_w, C_s, d) -> patch tensors with T_w = m*l."""
        *lead, T_w, C_s, d = S_point.shape
        if T_w % self.l != 0:
            raise ConfigError(f"patch length {self.l} must divide window length {T_w}")
        m = T_w // self.l
        if m != self.m:
            raise ConfigError(f"encoder built for m={self.m}, got m={m}")
        P = S_point.reshape(*lead, m, self.l, C_s, d)
        # f1 consumes the flattened patch: move l next to d, then merge.
        n = P.ndim
        flat = P.transpose(*range(n - 3), n - 2, n - 3, n - 1).reshape(*lead, m, C_s, self.l * d)
        P_intra = self.f1(flat)
        # f2 mixes along the patch axis, shared across (variable, channel).
        n = P_intra.ndim
        perm = (*range(n - 3), n - 2, n - 1, n - 3)          # (..., C_s, d, m)
        mixed = self.f2(P_intra.transpose(*perm))
        inv = (*range(n - 3), n - 1, n - 3, n - 2)           # back to (..., m, C_s, d)
        P_inter = mixed.transpose(*inv) + P_intra
        return PatchTensor(P=P, P_intra=P_intra, P_inter=P_inter)

    def aggregate(self, P_inter: Tensor, normalize: bool = False) -> PatchStateEmbedding:
        """Collapse the state-variable axis with learned weights.

        Weights stay unnormalized by default; ``normalize=True`` applies a
        softmax across variables instead.
        """
        W_agg = self.f3(P_inter)                             # (..., m, C_s, 1)
        if normalize:
            W_agg = ad.softmax(W_agg, axis=-2)
        fused = (W_agg * P_inter).sum(axis=-2)               # (..., m, d)
        S_patch = self.f4(fused)
        squeezed = W_agg.reshape(W_agg.shape[:-1])
        return PatchStateEmbedding(S_patch=S_patch, W_agg=squeezed)

    def __call__(self, S_point: Tensor, normalize: bool = False) -> PatchStateEmbedding:
        return self.aggregate(self.intra_inter(S_point).P_inter, normalize=normalize)
