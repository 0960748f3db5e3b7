"""Conditional bottleneck adapter.

A frozen weight W0 is split once by SVD into fixed low-rank factors A, B.
Per patch, three small generators driven by the patch state embedding emit a
mixing matrix R_init, an output scaling D, per-row mask scores and a
threshold; a sharp sigmoid turns the scores into a soft row mask M that
shrinks the effective bottleneck. The delta is applied in factored form,
h = W0 x + ((x A) R) B * D, never materializing the full update.

A plain LoRA adapter (trainable A, B, zero-initialized delta) is provided as
the fine-tuning baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import MLP, parameter, prefixed


@dataclass(frozen=True)
class AdapterFactorization:
    """Frozen SVD factors of one hosted weight; A @ B is the best rank-r
    approximation of W0 (sqrt split)."""

    A: np.ndarray        # (d_in, r)
    B: np.ndarray        # (r, d_out)
    r: int
    site_id: str = ""


def decompose(W0: np.ndarray, r: int, site_id: str = "",
              split: str = "sqrt") -> AdapterFactorization:
    """SVD-decompose W0 into rank-r factors.

    ``split='sqrt'`` uses A = U_r sqrt(S_r), B = sqrt(S_r) V_r^T, which makes
    A @ B the Frobenius-optimal rank-r approximation. ``split='paper'``
    keeps the singular values unsplit on both factors and an untransposed V
    (A @ B then scales like the squared spectrum); available for comparison.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    if W0.ndim != 2:
        raise ConfigError("W0 must be a matrix")
    if not 1 <= r <= min(W0.shape):
        raise ConfigError(f"rank {r} out of range for shape {W0.shape}")
    try:
        U, s, Vh = np.linalg.svd(W0, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"SVD did not converge for site {site_id!r}") from exc
    if split == "sqrt":
        root = np.sqrt(s[:r])
        A = U[:, :r] * root
        B = root[:, None] * Vh[:r, :]
    elif split == "paper":
        A = U[:, :r] * s[:r]
        B = s[:r, None] * Vh.T[:r, :]
    else:
        raise ConfigError(f"unknown svd split {split!r}")
    return AdapterFactorization(A=A, B=B, r=r, site_id=site_id)


@dataclass
class GeneratedParams:
    """Patch-conditioned adapter parameters (leading axes = patch axes)."""

    R_init: Tensor       # (..., r, r)
    D: Tensor            # (..., d_out)
    R_mask: Tensor       # (..., r) per-row scores
    Gamma: Tensor        # (..., 1) threshold
    M: Tensor            # (..., r) soft row mask in (0, 1)
    R: Tensor            # (..., r, r) masked mixing matrix


class ParamGenerator:
    """g1 (R_init and D), g2 (row scores), g3 (threshold) for one site.

    g1's output layer starts at zero weights with the D slice biased to one,
    so freshly initialized adapters inject an exactly-zero delta while
    keeping a live gradient path through R.
    """

    def __init__(self, d: int, r: int, d_out: int, epsilon: float = 0.05,
                 hidden: int = 32, rng: np.random.Generator | None = None):
        if r < 1:
            raise ConfigError("rank must be >= 1")
        if epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.r, self.d_out, self.epsilon = d, r, d_out, epsilon
        last_bias = np.concatenate([np.zeros(r * r), np.ones(d_out)])
        self.g1 = MLP([d, hidden, r * r + d_out], rng, zero_last=True, last_bias=last_bias)
        self.g2 = MLP([d, hidden, r], rng)
        self.g3 = MLP([d, hidden, 1], rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("g1", "g2", "g3"):
            out.update(prefixed(name, getattr(self, name).parameters()))
        return out

    def generate(self, s_patch: Tensor | np.ndarray) -> GeneratedParams:
        """Map patch state embeddings (..., d) to adapter parameters."""
        if not isinstance(s_patch, Tensor):
            s_patch = Tensor(s_patch)
        if s_patch.ndim == 1:
            s_patch = s_patch.reshape(1, -1)
        r, d_out = self.r, self.d_out
        raw = self.g1(s_patch)                                  # (..., r*r + d_out)
        lead = raw.shape[:-1]
        R_init = raw[..., : r * r].reshape(*lead, r, r)
        D = raw[..., r * r:]
        R_mask = self.g2(s_patch)
        Gamma = self.g3(s_patch)
        M = ad.sigmoid((R_mask - Gamma) * (1.0 / self.epsilon))
        R = R_init * M.reshape(*lead, r, 1)                     # row-wise mask
        return GeneratedParams(R_init=R_init, D=D, R_mask=R_mask,
                               Gamma=Gamma, M=M, R=R)


def delta_apply(x: Tensor | np.ndarray, fac: AdapterFactorization,
                gp: GeneratedParams, W0: np.ndarray) -> Tensor:
    """h = W0 x + ((x A) R) B * D for a single input row and its patch
    parameters; cost O(d_in r + r^2 + r d_out) without forming the delta."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    vec = x.ndim == 1
    if vec:
        x = x.reshape(1, -1)
    base = x @ Tensor(W0)
    u = x @ Tensor(fac.A)                                       # (..., r)
    mixed = (u.reshape(*u.shape[:-1], 1, fac.r) @ gp.R).reshape(u.shape)
    delta = (mixed @ Tensor(fac.B)) * gp.D
    out = base + delta
    return out.reshape(out.shape[1:]) if vec else out


def delta_only(x: Tensor, fac: AdapterFactorization, gp: GeneratedParams) -> Tensor:
    """Factored delta for batched backbone inputs.

    ``x`` has shape (B, C_n, m, d_in); R is (B, m, r, r) and D (B, m, d_out),
    broadcast across the variable axis (state conditioning is shared by all
    numerical variables of a window).
    """
    B, C_n, m, d_in = x.shape
    r = fac.r
    u = x @ Tensor(fac.A)                                       # (B, C_n, m, r)
    R = gp.R.reshape(B, 1, m, r, r)
    mixed = (u.reshape(B, C_n, m, 1, r) @ R).reshape(B, C_n, m, r)
    D = gp.D.reshape(B, 1, m, -1)
    return (mixed @ Tensor(fac.B)) * D


def materialize_delta(fac: AdapterFactorization, gp: GeneratedParams) -> np.ndarray:
    """Dense per-patch delta (..., d_in, d_out); column j scaled by D_j.
    Diagnostics only, never used on the hot path."""
    ARB = fac.A @ gp.R.data @ fac.B
    return ARB * gp.D.data[..., None, :]


# -- LoRA baseline -----------------------------------------------------------


@dataclass
class LoraFactors:
    A_l: Tensor          # (d_in, r) trainable, Gaussian init
    B_l: Tensor          # (r, d_out) trainable, zero init

    def parameters(self) -> dict[str, Tensor]:
        return {"A_l": self.A_l, "B_l": self.B_l}


def lora_init(W0: np.ndarray, r: int, rng: np.random.Generator | None = None,
              std: float = 0.02) -> LoraFactors:
    """Standard LoRA init: delta is exactly zero until B_l moves."""
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    d_in, d_out = W0.shape
    if r > min(d_in, d_out):
        raise ConfigError(f"rank {r} out of range for shape {W0.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return LoraFactors(A_l=parameter(rng.normal(0.0, std, size=(d_in, r))),
                       B_l=parameter(np.zeros((r, d_out))))


def lora_apply(x: Tensor | np.ndarray, lf: LoraFactors, W0: np.ndarray) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    vec = x.ndim == 1
    if vec:
        x = x.reshape(1, -1)
    out = x @ Tensor(W0) + (x @ lf.A_l) @ lf.B_l
    return out.reshape(out.shape[1:]) if vec else out


def lora_delta(x: Tensor, lf: LoraFactors) -> Tensor:
    return (x @ lf.A_l) @ lf.B_l
