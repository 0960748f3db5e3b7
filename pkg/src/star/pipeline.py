"""Fine-tuning and inference pipeline.

Bundles the state encoder, temporal encoder, per-site adapter generators and
the matching head around a frozen backbone; optimizes the total loss
(reconstruction + weighted balance + weighted matching); scores test series
point-wise (reconstruction error) and patch-wise (negated match similarity,
linearly interpolated and fused multiplicatively).
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tensor, no_grad
from .backbone import Backbone, BackboneConfig
from .cond_adapter import (AdapterFactorization, LoraFactors, ParamGenerator,
                           decompose, delta_only, lora_delta, lora_init)
from .dataset import SeriesDataset, window_and_patch
from .errors import CheckpointError, ConfigError
from .layers import make_optimizer, prefixed
from .matching import MatchingHead, match_loss, match_score
from .state_encoder import (IdentityEncodings, StateEncoder, load_balance_loss,
                            sinusoidal_encode)
from .temporal_encoder import TemporalEncoder

FORMAT_VERSION = 1
MODES = ("star", "lora", "full", "frozen")


@dataclass
class StarConfig:
    """Architecture hyperparameters of the adapter stack."""

    d: int = 32                     # state embedding dimension
    N: int = 25                     # memory slots
    K: int = 7                      # soft top-K selection count
    epsilon: float = 0.05           # sigmoid sharpness (router and rank mask)
    lam: float = 10000.0            # sinusoidal wavelength base
    tau: float = 0.1                # matching temperature
    rank_divisor: int = 2           # adapter rank r = d_in // rank_divisor
    hidden: int = 32                # generator / temporal hidden width
    router_hidden: int = 64
    router_depth: int = 2
    memory_std: float = 0.02
    svd_split: str = "sqrt"         # {"sqrt", "paper"}
    balance_denominator: str = "corrected"   # {"corrected", "paper"}
    match_sign: str = "negated"     # {"negated", "paper"}
    normalize_agg: bool = False
    use_state_encoder: bool = True
    use_adapter: bool = True
    use_matching: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "StarConfig":
        return StarConfig(**d)


@dataclass
class FinetuneConfig:
    mode: str = "star"              # {"star", "lora", "full", "frozen"}
    lambda1: float = 0.01           # balance loss weight
    lambda2: float = 0.1            # matching loss weight
    lr: float = 1e-2
    steps: int = 800
    batch_windows: int = 32
    stride: int = 32                # training window stride
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "FinetuneConfig":
        return FinetuneConfig(**d)


@dataclass
class AnomalyScores:
    """Point-wise and patch-wise anomaly scores plus their fusion."""

    score_rec: np.ndarray            # (T,)
    score_match: np.ndarray          # (M,) raw per-patch scores (post sign flip)
    match_centers: np.ndarray        # (M,) patch centers in time
    score_match_interp: np.ndarray   # (T,)
    score_total: np.ndarray          # (T,)


class StarModel:
    """All trainable adapter-side modules for one backbone."""

    def __init__(self, backbone: Backbone, cfg: StarConfig, seed: int = 0):
        self.backbone = backbone
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        bc = backbone.cfg
        self.encoder = None
        if cfg.use_state_encoder:
            self.encoder = StateEncoder(cfg.d, N=cfg.N, K=cfg.K, epsilon=cfg.epsilon,
                                        lam=cfg.lam, hidden=cfg.router_hidden,
                                        depth=cfg.router_depth, rng=rng,
                                        memory_std=cfg.memory_std)
        self.temporal = TemporalEncoder(cfg.d, bc.patch_len, backbone.m,
                                        hidden=cfg.hidden, rng=rng)
        self.factors: dict[str, AdapterFactorization] = {}
        self.generators: dict[str, ParamGenerator] = {}
        if cfg.use_adapter:
            for site in backbone.adapter_sites():
                r = max(1, site.d_in // cfg.rank_divisor)
                self.factors[site.site_id] = decompose(
                    backbone.site_weight(site.site_id), r, site.site_id, cfg.svd_split)
                self.generators[site.site_id] = ParamGenerator(
                    cfg.d, r, site.d_out, epsilon=cfg.epsilon,
                    hidden=cfg.hidden, rng=rng)
        self.matching = None
        if cfg.use_matching:
            self.matching = MatchingHead(bc.d_model, cfg.d, tau=cfg.tau, rng=rng)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.encoder is not None:
            out.update(prefixed("encoder", self.encoder.parameters()))
        out.update(prefixed("temporal", self.temporal.parameters()))
        for site_id in sorted(self.generators):
            out.update(prefixed(f"gen.{site_id}", self.generators[site_id].parameters()))
        if self.matching is not None:
            out.update(prefixed("matching", self.matching.parameters()))
        return out

    def state_embeddings(self, state_ids: np.ndarray):
        """(B, T_w, C_s) int ids -> (S_patch (B, m, d), router output or None,
        per-unique-row frequency weights or None).

        Routing is a pure function of the (variable index, state id) pair, so
        only the distinct pairs are routed; point embeddings are gathered back
        through the inverse index (gradients scatter-add through the gather).
        """
        B, T_w, C_s = state_ids.shape
        flat = state_ids.reshape(-1, C_s)
        inverse = np.empty(flat.shape, dtype=np.int64)
        var_idx, sid_idx = [], []
        offset = 0
        for i in range(C_s):
            uniq, inv = np.unique(flat[:, i], return_inverse=True)
            inverse[:, i] = offset + inv.ravel()
            var_idx.append(np.full(uniq.size, i))
            sid_idx.append(uniq)
            offset += uniq.size
        ids = IdentityEncodings(
            I_v=sinusoidal_encode(np.concatenate(var_idx), self.cfg.d, self.cfg.lam),
            I_s=sinusoidal_encode(np.concatenate(sid_idx), self.cfg.d, self.cfg.lam),
            lam=self.cfg.lam)
        router = None
        weights = None
        if self.encoder is not None:
            router = self.encoder.route(ids)
            s_point_unique = self.encoder.point_state_embed(router)      # (U, d)
            weights = np.bincount(inverse.ravel(), minlength=offset) / inverse.size
        else:
            # encoder ablated: raw sinusoidal identity features stand in
            s_point_unique = Tensor(0.5 * (ids.I_v + ids.I_s))
        s_point = s_point_unique[inverse.reshape(B, T_w, C_s)]
        patch = self.temporal(s_point, normalize=self.cfg.normalize_agg)
        return patch.S_patch, router, weights

    def deltas_for(self, s_patch: Tensor):
        """Per-site generated parameters and the backbone delta hook."""
        generated = {site_id: gen.generate(s_patch)
                     for site_id, gen in self.generators.items()}

        def hook(site_id: str, x: Tensor) -> Tensor:
            return delta_only(x, self.factors[site_id], generated[site_id])

        return (hook if generated else None), generated


@dataclass
class TrainedModel:
    """A scoring-ready bundle: backbone plus whichever adapter was trained."""

    mode: str
    backbone: Backbone
    backbone_cfg: BackboneConfig
    star_cfg: StarConfig
    finetune_cfg: FinetuneConfig
    star: StarModel | None = None
    lora: dict[str, LoraFactors] = field(default_factory=dict)
    tuned_backbone: Backbone | None = None     # "full" mode result
    loss_history: list[float] = field(default_factory=list)

    def scoring_backbone(self) -> Backbone:
        return self.tuned_backbone if self.tuned_backbone is not None else self.backbone


def _total_loss(model: StarModel, numeric: np.ndarray, state_ids: np.ndarray,
                fcfg: FinetuneConfig,
                plain_hidden: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """L_total = L_rec + lambda1 * L_bal + lambda2 * L_match on one batch.

    ``plain_hidden`` is the unadapted backbone hidden state for the matching
    side (it depends only on frozen weights and the window content, so the
    training loop precomputes it once per window set).
    """
    x = Tensor(numeric)
    s_patch, router, weights = model.state_embeddings(state_ids)
    hook, _ = model.deltas_for(s_patch)
    recon, hidden = model.backbone.forward(x, deltas=hook)
    loss = ((recon - x) ** 2).mean()
    parts = {"rec": loss.item()}
    if router is not None and fcfg.lambda1 > 0:
        l_bal = load_balance_loss(router, model.cfg.balance_denominator,
                                  weights=weights).L_bal
        loss = loss + fcfg.lambda1 * l_bal
        parts["bal"] = l_bal.item()
    if model.matching is not None and fcfg.lambda2 > 0:
        B, m, _ = s_patch.shape
        if plain_hidden is None:
            with no_grad():
                _, ph = model.backbone.forward(x)
            plain_hidden = ph.data
        n_patch = model.matching.project(Tensor(plain_hidden)).reshape(B * m, model.cfg.d)
        l_match = match_loss(n_patch, s_patch.reshape(B * m, model.cfg.d), model.cfg.tau)
        loss = loss + fcfg.lambda2 * l_match
        parts["match"] = l_match.item()
    parts["total"] = loss.item()
    return loss, parts


def _lora_loss(backbone: Backbone, lora: dict[str, LoraFactors],
               numeric: np.ndarray) -> Tensor:
    x = Tensor(numeric)

    def hook(site_id: str, inp: Tensor) -> Tensor:
        return lora_delta(inp, lora[site_id])

    recon, _ = backbone.forward(x, deltas=hook)
    return ((recon - x) ** 2).mean()


def finetune(backbone: Backbone, train: SeriesDataset,
             fcfg: FinetuneConfig, scfg: StarConfig | None = None) -> TrainedModel:
    """Fit the adapter stack selected by ``fcfg.mode`` on normal data.

    The backbone stays frozen except in "full" mode, which tunes a copy.
    Deterministic given the seed.
    """
    scfg = scfg if scfg is not None else StarConfig()
    bc = backbone.cfg
    if fcfg.mode == "star" and train.n_state == 0:
        raise ConfigError("star mode requires at least one state column")
    backbone.assert_frozen_intact()

    ss = np.random.SeedSequence(fcfg.seed)
    seed_init, seed_batch = ss.spawn(2)
    rng_batch = np.random.default_rng(seed_batch)

    wb = window_and_patch(train, bc.window_len, fcfg.stride, bc.patch_len)
    model = TrainedModel(mode=fcfg.mode, backbone=backbone, backbone_cfg=bc,
                         star_cfg=scfg, finetune_cfg=fcfg)

    if fcfg.mode == "frozen":
        return model

    if fcfg.mode == "star":
        star = StarModel(backbone, scfg, seed=int(seed_init.generate_state(1)[0]))
        model.star = star
        params = list(star.parameters().values())
    elif fcfg.mode == "lora":
        rng_lora = np.random.default_rng(seed_init)
        lora = {}
        for site in backbone.adapter_sites():
            r = max(1, site.d_in // scfg.rank_divisor)
            lora[site.site_id] = lora_init(backbone.site_weight(site.site_id), r, rng_lora)
        model.lora = lora
        params = [p for lf in lora.values() for p in lf.parameters().values()]
    else:  # full: tune a copy, original stays frozen
        tuned = Backbone(bc, np.random.default_rng(0))
        tuned.load_state_arrays(backbone.state_arrays())
        for p in tuned.parameters().values():
            p.requires_grad = True
        model.tuned_backbone = tuned
        params = list(tuned.parameters().values())

    hidden_all = None
    if fcfg.mode == "star" and model.star.matching is not None and fcfg.lambda2 > 0:
        with no_grad():
            chunks = [model.star.backbone.forward(Tensor(wb.numeric[i: i + 64]))[1].data
                      for i in range(0, wb.n_windows, 64)]
        hidden_all = np.concatenate(chunks, axis=0)

    opt = make_optimizer(fcfg.optimizer, params, fcfg.lr)
    n_windows = wb.n_windows
    for step in range(fcfg.steps):
        take = min(fcfg.batch_windows, n_windows)
        idx = rng_batch.choice(n_windows, size=take, replace=False)
        numeric = wb.numeric[idx]
        if fcfg.mode == "star":
            ph = hidden_all[idx] if hidden_all is not None else None
            loss, parts = _total_loss(model.star, numeric, wb.state_ids[idx], fcfg,
                                      plain_hidden=ph)
        elif fcfg.mode == "lora":
            loss = _lora_loss(backbone, model.lora, numeric)
        else:
            recon, _ = model.tuned_backbone.forward(Tensor(numeric))
            loss = ((recon - Tensor(numeric)) ** 2).mean()
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {step}: {value} "
                               f"(mode={fcfg.mode}, lr={fcfg.lr})")
        model.loss_history.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    opt.zero_grad()
    backbone.assert_frozen_intact()
    return model


# -- scoring ------------------------------------------------------------------


def _num_threads() -> int:
    raw = os.environ.get("STAR_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"STAR_NUM_THREADS must be an integer, got {raw!r}") from None


def score(model: TrainedModel, test: SeriesDataset) -> AnomalyScores:
    """Score a test series: point-wise reconstruction error fused with the
    interpolated patch-wise match score (star mode with matching enabled);
    other modes return the reconstruction score unchanged."""
    bc = model.backbone_cfg
    if test.T < bc.patch_len:
        raise ConfigError("test series shorter than one patch")
    wb = window_and_patch(test, bc.window_len, bc.window_len, bc.patch_len)
    bb = model.scoring_backbone()
    use_match = model.mode == "star" and model.star is not None \
        and model.star.matching is not None
    l, m = bc.patch_len, wb.n_patches

    def run_chunk(sl: slice):
        numeric = wb.numeric[sl]
        with no_grad():
            if model.mode == "star" and model.star is not None:
                s_patch, _, _ = model.star.state_embeddings(wb.state_ids[sl])
                hook, _ = model.star.deltas_for(s_patch)
                recon, _ = bb.forward(Tensor(numeric), deltas=hook)
                match = None
                if use_match:
                    # matching reads the unadapted hidden state, so the
                    # numeral side carries only numeric content
                    _, hidden = bb.forward(Tensor(numeric))
                    n_patch = model.star.matching.project(hidden)
                    match = match_score(n_patch.data, s_patch.data)
                return recon.data, match
            if model.mode == "lora" and model.lora:
                def hook(site_id, inp):
                    return lora_delta(inp, model.lora[site_id])
                recon, _ = bb.forward(Tensor(numeric), deltas=hook)
                return recon.data, None
            recon, _ = bb.forward(Tensor(numeric))
            return recon.data, None

    n = wb.n_windows
    chunk = 16
    slices = [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    threads = _num_threads()
    with no_grad():
        if threads > 1 and len(slices) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_chunk, slices))
        else:
            results = [run_chunk(sl) for sl in slices]

    # assemble point scores; overlapping tail points take the later window
    T = test.T
    score_rec = np.zeros(T)
    center_map: dict[float, float] = {}
    for sl, (recon, match) in zip(slices, results):
        for w_local, w in enumerate(range(sl.start, sl.stop)):
            o = int(wb.origin[w])
            err = ((recon[w_local] - wb.numeric[w]) ** 2).mean(axis=-1)
            score_rec[o: o + bc.window_len] = err
            if match is not None:
                for p in range(m):
                    center = o + p * l + (l - 1) / 2.0
                    raw = match[w_local, p]
                    center_map[center] = -raw if model.star.cfg.match_sign == "negated" else raw

    if not use_match:
        centers = wb.origin[:, None] + np.arange(m)[None, :] * l + (l - 1) / 2.0
        zeros = np.zeros(centers.size)
        return AnomalyScores(score_rec=score_rec, score_match=zeros,
                             match_centers=np.unique(centers.ravel()),
                             score_match_interp=np.zeros(T),
                             score_total=score_rec.copy())

    centers = np.array(sorted(center_map))
    values = np.array([center_map[c] for c in centers])
    interp = np.interp(np.arange(T, dtype=np.float64), centers, values)
    # fused as rec * softmax(match') * T; computed as (T * e) / sum(e) so a
    # uniform match profile multiplies by exactly 1
    e = np.exp(interp - interp.max())
    weights = (T * e) / e.sum()
    return AnomalyScores(score_rec=score_rec, score_match=values,
                         match_centers=centers, score_match_interp=interp,
                         score_total=score_rec * weights)


def write_scores_csv(scores: AnomalyScores, path: str | Path,
                     labels: np.ndarray | None = None) -> None:
    path = Path(path)
    cols = ["t", "score_rec", "score_match_interp", "score_total"]
    if labels is not None:
        cols.append("label")
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in range(len(scores.score_rec)):
            row = [str(t), repr(scores.score_rec[t]),
                   repr(scores.score_match_interp[t]), repr(scores.score_total[t])]
            if labels is not None:
                row.append(str(int(labels[t])))
            fh.write(",".join(row) + "\n")


# -- checkpointing ------------------------------------------------------------


def _collect_arrays(model: TrainedModel) -> dict[str, np.ndarray]:
    arrays = {f"backbone/{k}": v for k, v in model.backbone.state_arrays().items()}
    if model.star is not None:
        arrays.update({f"star/{k}": v.data.copy()
                       for k, v in model.star.parameters().items()})
    for site_id, lf in model.lora.items():
        for k, v in lf.parameters().items():
            arrays[f"lora/{site_id}/{k}"] = v.data.copy()
    if model.tuned_backbone is not None:
        arrays.update({f"tuned/{k}": v for k, v in model.tuned_backbone.state_arrays().items()})
    return arrays


def _arrays_checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(arrays[name].tobytes())
    return h.hexdigest()


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Versioned container: named float64 arrays plus a JSON config blob."""
    path = Path(path)
    arrays = _collect_arrays(model)
    meta = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "mode": model.mode,
        "seed": model.finetune_cfg.seed,
        "backbone_cfg": model.backbone_cfg.to_dict(),
        "star_cfg": model.star_cfg.to_dict(),
        "finetune_cfg": model.finetune_cfg.to_dict(),
        "checksum": _arrays_checksum(arrays),
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect_mode: str | None = None) -> TrainedModel:
    """Rebuild a TrainedModel; bit-exact parameter round trip."""
    path = Path(path)
    with np.load(path) as zf:
        raw = {k: zf[k] for k in zf.files}
    if "__meta__" not in raw:
        raise CheckpointError(f"{path}: not a checkpoint (missing metadata)")
    meta = json.loads(bytes(raw.pop("__meta__")).decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} "
                              f"unsupported (expected {FORMAT_VERSION}); no migration")
    if _arrays_checksum(raw) != meta["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupt")
    mode = meta["mode"]
    if expect_mode is not None and expect_mode != mode:
        raise CheckpointError(f"{path}: checkpoint mode {mode!r} does not match "
                              f"requested mode {expect_mode!r}")

    bc = BackboneConfig.from_dict(meta["backbone_cfg"])
    scfg = StarConfig.from_dict(meta["star_cfg"])
    fcfg = FinetuneConfig.from_dict(meta["finetune_cfg"])
    backbone = Backbone(bc, np.random.default_rng(0))
    backbone.load_state_arrays({k.removeprefix("backbone/"): v
                                for k, v in raw.items() if k.startswith("backbone/")})
    backbone.freeze()
    model = TrainedModel(mode=mode, backbone=backbone, backbone_cfg=bc,
                         star_cfg=scfg, finetune_cfg=fcfg)
    if mode == "star":
        star = StarModel(backbone, scfg, seed=0)
        params = star.parameters()
        stored = {k.removeprefix("star/"): v for k, v in raw.items() if k.startswith("star/")}
        if set(stored) != set(params):
            raise CheckpointError(f"{path}: star parameter names do not match")
        for k, p in params.items():
            p.data = stored[k].astype(np.float64).copy()
        model.star = star
    elif mode == "lora":
        lora: dict[str, LoraFactors] = {}
        for site in backbone.adapter_sites():
            a = raw.get(f"lora/{site.site_id}/A_l")
            b = raw.get(f"lora/{site.site_id}/B_l")
            if a is None or b is None:
                raise CheckpointError(f"{path}: missing LoRA arrays for {site.site_id}")
            lf = lora_init(backbone.site_weight(site.site_id), a.shape[1])
            lf.A_l.data, lf.B_l.data = a.astype(np.float64), b.astype(np.float64)
            lora[site.site_id] = lf
        model.lora = lora
    elif mode == "full":
        tuned = Backbone(bc, np.random.default_rng(0))
        tuned.load_state_arrays({k.removeprefix("tuned/"): v
                                 for k, v in raw.items() if k.startswith("tuned/")})
        model.tuned_backbone = tuned
    return model


def save_backbone(backbone: Backbone, path: str | Path) -> None:
    """Checkpoint a pretrained backbone alone (mode 'frozen')."""
    model = TrainedModel(mode="frozen", backbone=backbone, backbone_cfg=backbone.cfg,
                         star_cfg=StarConfig(), finetune_cfg=FinetuneConfig(mode="frozen"))
    save_checkpoint(model, path)


def load_backbone(path: str | Path) -> Backbone:
    return load_checkpoint(path, expect_mode="frozen").backbone
