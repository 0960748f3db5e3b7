"""Identity-guided state encoding.

Each (time, state variable) pair is described by two sinusoidal identity
encodings: one for the variable's index and one for its current category.
A learnable memory of N vectors is combined through a soft top-K router into
a point-wise state embedding; a coefficient-of-variation penalty keeps the
routing load balanced across memory slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .layers import MLP, parameter, prefixed


def sinusoidal_encode(index, d: int, lam: float = 10000.0) -> np.ndarray:
    """Sinusoidal position code: entry 2k is sin(i / lam^(2k/d)), entry 2k+1
    the matching cos. ``index`` may be a scalar or an integer array; the code
    dimension d is appended as the last axis."""
    if d % 2 != 0 or d <= 0:
        raise ConfigError(f"encoding dimension must be even and positive, got {d}")
    if lam <= 0:
        raise ConfigError("lambda must be positive")
    idx = np.asarray(index, dtype=np.float64)
    if np.any(idx < 0):
        raise DataError("identity indices must be non-negative")
    k = np.arange(d // 2)
    freq = lam ** (-2.0 * k / d)                      # (d/2,)
    angle = idx[..., None] * freq                     # (..., d/2)
    out = np.empty(idx.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


@dataclass
class IdentityEncodings:
    """Variable-identity and state-identity codes, (T, C_s, d) each."""

    I_v: np.ndarray
    I_s: np.ndarray
    lam: float


def build_identities(state_ids: np.ndarray, d: int, lam: float = 10000.0) -> IdentityEncodings:
    """Encode variable indices (constant over time) and per-time category ids."""
    state_ids = np.asarray(state_ids)
    if state_ids.ndim != 2:
        raise DataError("state_ids must be (T, C_s)")
    if state_ids.size and state_ids.min() < 0:
        raise DataError("state ids must be non-negative")
    T, C_s = state_ids.shape
    I_v = np.broadcast_to(sinusoidal_encode(np.arange(C_s), d, lam), (T, C_s, d)).copy()
    I_s = sinusoidal_encode(state_ids, d, lam)
    return IdentityEncodings(I_v=I_v, I_s=I_s, lam=lam)


@dataclass
class RouterOutput:
    """Routing tensors for one batch of identity encodings.

    ``W_s`` are raw logits, ``theta`` the per-row K-th largest logit, and
    ``W_mask`` the soft-masked softmax weights (rows sum to 1).
    """

    W_s: Tensor          # (..., N)
    theta: Tensor        # (..., 1)
    W_mask: Tensor       # (..., N)
    epsilon: float
    K: int


@dataclass
class BalanceStats:
    E_sel: Tensor        # (N,) mean soft selection frequency
    E_imp: Tensor        # (N,) mean routing importance
    L_bal: Tensor        # scalar


class StateEncoder:
    """Learnable State Memory plus the soft top-K Memory Router."""

    def __init__(self, d: int, N: int = 25, K: int = 7, epsilon: float = 0.05,
                 lam: float = 10000.0, hidden: int = 64, depth: int = 2,
                 rng: np.random.Generator | None = None, memory_std: float = 0.02):
        if K < 1 or K > N:
            raise ConfigError(f"need 1 <= K <= N, got K={K}, N={N}")
        if epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.N, self.K, self.epsilon, self.lam = d, N, K, epsilon, lam
        self.memory = parameter(rng.normal(0.0, memory_std, size=(N, d)))
        dims = [2 * d] + [hidden] * (depth - 1) + [N]
        self.router = MLP(dims, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {"memory": self.memory}
        out.update(prefixed("router", self.router.parameters()))
        return out

    def route(self, ids: IdentityEncodings) -> RouterOutput:
        feats = Tensor(np.concatenate([ids.I_v, ids.I_s], axis=-1))
        W_s = self.router(feats)
        return mask_topk(W_s, self.K, self.epsilon)

    def point_state_embed(self, router: RouterOutput) -> Tensor:
        """Convex combination of memory rows: (..., N) @ (N, d) -> (..., d)."""
        return router.W_mask @ self.memory


def mask_topk(W_s: Tensor, K: int, epsilon: float) -> RouterOutput:
    """Soft top-K: attenuate logits below the K-th largest via a scaled
    log-sigmoid gate, then renormalize with softmax. Entries exactly at the
    boundary receive log(1/2); everything stays differentiable, including
    the path through theta."""
    N = W_s.shape[-1]
    if K < 1 or K > N:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={N}")
    order = np.argsort(W_s.data, axis=-1)
    kth = order[..., N - K: N - K + 1]              # index of K-th largest
    theta = ad.take_along_axis(W_s, kth, axis=-1)
    gate = ad.log_sigmoid((W_s - theta) * (1.0 / epsilon))
    W_mask = ad.softmax(W_s + gate, axis=-1)
    return RouterOutput(W_s=W_s, theta=theta, W_mask=W_mask, epsilon=epsilon, K=K)


def balance_from_means(E_sel: Tensor, E_imp: Tensor,
                       denominator: str = "corrected") -> Tensor:
    """Squared coefficient of variation (population variance over mean) of the
    selection and importance profiles. ``denominator='paper'`` divides the
    importance variance by the selection mean instead of its own."""
    if denominator not in ("corrected", "paper"):
        raise ConfigError(f"unknown balance denominator {denominator!r}")

    def cv2(vec: Tensor, avg_of: Tensor) -> Tensor:
        mu = vec.mean()
        var = ((vec - mu) ** 2).mean()
        # Floor (rather than shift) the denominator: a zero mean is guarded
        # at 1e-8 while ordinary means keep the ratio exact.
        denom = avg_of.mean()
        if float(denom.data) < 1e-8:
            denom = denom + Tensor(1e-8 - float(denom.data))
        return (var / denom) ** 2

    first = cv2(E_sel, E_sel)
    second = cv2(E_imp, E_imp if denominator == "corrected" else E_sel)
    return first + second


def load_balance_loss(router: RouterOutput, denominator: str = "corrected",
                      weights: np.ndarray | None = None) -> BalanceStats:
    """Load-balance penalty over all routed rows.

    ``weights`` (leading-shaped, summing to 1) turn the plain mean over rows
    into a weighted one; the pipeline routes each distinct (variable, state)
    pair once and weights by its frequency, which is the same expectation.
    """
    soft_sel = ad.sigmoid((router.W_s - router.theta) * (1.0 / router.epsilon))
    if weights is None:
        lead = tuple(range(router.W_s.ndim - 1))
        E_sel = soft_sel.mean(axis=lead)
        E_imp = router.W_mask.mean(axis=lead)
    else:
        w = Tensor(np.asarray(weights, dtype=np.float64)[..., None])
        lead = tuple(range(router.W_s.ndim - 1))
        E_sel = (soft_sel * w).sum(axis=lead)
        E_imp = (router.W_mask * w).sum(axis=lead)
    L_bal = balance_from_means(E_sel, E_imp, denominator)
    return BalanceStats(E_sel=E_sel, E_imp=E_imp, L_bal=L_bal)
