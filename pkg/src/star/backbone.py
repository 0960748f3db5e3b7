"""Desk-scale channel-independent patch-reconstruction backbone.

Each numerical variable is patchified, linearly embedded, passed through
residual mixer blocks (token mix along the patch axis, then a feed-forward
pair), and decoded back to the patch. The feed-forward linear maps are the
adapter sites: a per-patch additive delta can be injected at each of them.
After pretraining on normal data the backbone is frozen; a checksum guards
the freeze contract.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DataError
from .layers import Linear, make_optimizer, parameter, prefixed

# An adapter hook maps (site_id, pre-activation input) -> additive delta.
DeltaFn = Callable[[str, Tensor], Tensor]


@dataclass(frozen=True)
class AdapterSite:
    """One hosted linear map that accepts a low-rank delta."""

    site_id: str
    d_in: int
    d_out: int


@dataclass
class BackboneConfig:
    patch_len: int = 16
    window_len: int = 64
    d_model: int = 32
    d_hidden: int = 64
    n_blocks: int = 2
    lr: float = 1e-2
    steps: int = 1500
    batch_windows: int = 32
    stride: int = 32
    optimizer: str = "adam"

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(**d)


class _Block:
    def __init__(self, m: int, d_model: int, d_hidden: int, rng: np.random.Generator):
        self.mix = Linear(m, m, rng)
        self.ff1 = Linear(d_model, d_hidden, rng)
        self.ff2 = Linear(d_hidden, d_model, rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("mix", "ff1", "ff2"):
            out.update(prefixed(name, getattr(self, name).parameters()))
        return out


class Backbone:
    """Frozen patch-reconstruction model exposing adapter sites."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        if cfg.window_len % cfg.patch_len != 0:
            raise ConfigError("patch length must divide window length")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.m = cfg.window_len // cfg.patch_len
        self.patch_embed = Linear(cfg.patch_len, cfg.d_model, rng)
        self.blocks = [_Block(self.m, cfg.d_model, cfg.d_hidden, rng)
                       for _ in range(cfg.n_blocks)]
        self.decode = Linear(cfg.d_model, cfg.patch_len, rng)
        self.frozen = False
        self._frozen_checksum: str | None = None

    # -- parameters -----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = prefixed("patch_embed", self.patch_embed.parameters())
        for i, blk in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", blk.parameters()))
        out.update(prefixed("decode", self.decode.parameters()))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters()):
            h.update(name.encode())
            h.update(self.parameters()[name].data.tobytes())
        return h.hexdigest()

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False
        self.frozen = True
        self._frozen_checksum = self.checksum()

    def assert_frozen_intact(self) -> None:
        if not self.frozen:
            raise RuntimeError("backbone is not frozen")
        if self.checksum() != self._frozen_checksum:
            raise RuntimeError("frozen backbone parameters changed")

    def adapter_sites(self) -> list[AdapterSite]:
        sites = []
        for i in range(len(self.blocks)):
            sites.append(AdapterSite(f"block{i}.ff1", self.cfg.d_model, self.cfg.d_hidden))
            sites.append(AdapterSite(f"block{i}.ff2", self.cfg.d_hidden, self.cfg.d_model))
        return sites

    def site_weight(self, site_id: str) -> np.ndarray:
        block_name, ff_name = site_id.split(".")
        blk = self.blocks[int(block_name.removeprefix("block"))]
        return getattr(blk, ff_name).W.data

    # -- forward --------------------------------------------------------

    def forward(self, numeric: Tensor | np.ndarray,
                deltas: DeltaFn | None = None) -> tuple[Tensor, Tensor]:
        """Reconstruct windows of shape (B, T_w, C_n) (or one (T_w, C_n)).

        Returns (reconstruction with the input's shape, per-patch hidden
        state of the final block averaged over variables: (B, m, d_model)).
        """
        x = numeric if isinstance(numeric, Tensor) else Tensor(numeric)
        single = x.ndim == 2
        if single:
            x = x.reshape(1, *x.shape)
        B, T_w, C_n = x.shape
        if T_w != self.cfg.window_len:
            raise DataError(f"expected window length {self.cfg.window_len}, got {T_w}")
        l, m, d = self.cfg.patch_len, self.m, self.cfg.d_model

        h = x.transpose(0, 2, 1).reshape(B, C_n, m, l)
        h = self.patch_embed(h)                               # (B, C_n, m, d)
        for i, blk in enumerate(self.blocks):
            mixed = blk.mix(h.transpose(0, 1, 3, 2)).transpose(0, 1, 3, 2)
            h = h + mixed
            z = blk.ff1(h)
            if deltas is not None:
                z = z + deltas(f"block{i}.ff1", h)
            z = ad.tanh(z)
            u = blk.ff2(z)
            if deltas is not None:
                u = u + deltas(f"block{i}.ff2", z)
            h = h + u
        hidden = h.mean(axis=1)                               # (B, m, d)
        recon = self.decode(h).reshape(B, C_n, T_w).transpose(0, 2, 1)
        if single:
            recon = recon.reshape(T_w, C_n)
        return recon, hidden

    def reconstruct(self, numeric, deltas: DeltaFn | None = None) -> np.ndarray:
        with no_grad():
            recon, _ = self.forward(numeric, deltas)
        return recon.data

    def patch_embeddings(self, numeric) -> np.ndarray:
        with no_grad():
            _, hidden = self.forward(numeric)
        return hidden.data

    # -- serialization helpers -------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ConfigError("backbone parameter names do not match checkpoint")
        for k, p in params.items():
            if p.data.shape != arrays[k].shape:
                raise ConfigError(f"shape mismatch for {k}")
            p.data = arrays[k].astype(np.float64).copy()


def pretrain(train_numeric: np.ndarray, cfg: BackboneConfig, seed: int = 0,
             log_every: int = 0) -> Backbone:
    """Fit the backbone on normal numeric data by plain reconstruction MSE,
    then freeze it. Deterministic given the seed."""
    ss = np.random.SeedSequence(seed)
    rng_init, rng_batch = [np.random.default_rng(s) for s in ss.spawn(2)]
    bb = Backbone(cfg, rng_init)

    T = train_numeric.shape[0]
    if T < cfg.window_len:
        raise DataError("training series shorter than one window")
    offsets = np.arange(0, T - cfg.window_len + 1, cfg.stride)
    windows = np.stack([train_numeric[o: o + cfg.window_len] for o in offsets])

    params = list(bb.parameters().values())
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    for step in range(cfg.steps):
        take = min(cfg.batch_windows, len(windows))
        idx = rng_batch.choice(len(windows), size=take, replace=False)
        batch = Tensor(windows[idx])
        recon, _ = bb.forward(batch)
        loss = ((recon - batch) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: mse {loss.item():.6f}")
    opt.zero_grad()
    bb.freeze()
    return bb
