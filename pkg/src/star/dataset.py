"""Data model for mixed numerical/state series, plus the inputs the rest of
the pipeline consumes: a synthetic state-conditioned generator with labeled
anomalies, CSV ingestion with a JSON schema sidecar, equal-frequency
pseudo-state discretization, and window/patch segmentation.

State columns are stored as category indices. Unseen test-time categories map
to a reserved index equal to the column's cardinality, so downstream encoders
never fail on novel states.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SchemaError

NUMERICAL = "numerical"
STATE = "state"


@dataclass
class SeriesDataset:
    """A typed multivariate series.

    ``values`` holds one column per variable; state columns contain mapped
    category indices in ``[0, cardinality]`` where the top index is the
    reserved "unknown" bucket. Arrays are frozen after construction.
    """

    values: np.ndarray                       # (T, C_n + C_s) float64
    var_kinds: tuple[str, ...]               # per column: "numerical" | "state"
    cardinalities: tuple[int, ...]           # per state column
    category_maps: tuple[tuple, ...]         # per state column: ordered raw values
    labels: np.ndarray | None = None         # (T,) in {0,1}, optional
    split: str = "train"
    column_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("values must be a T x C array")
        if len(self.var_kinds) != self.values.shape[1]:
            raise DataError("var_kinds length must match the column count")
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")
        state_cols = self.state_indices
        if len(self.cardinalities) != len(state_cols) or len(self.category_maps) != len(state_cols):
            raise DataError("cardinalities/category_maps must align with state columns")
        for k, col in enumerate(state_cols):
            ids = self.values[:, col]
            card = self.cardinalities[k]
            if card < 1:
                raise DataError("cardinality must be positive")
            if ids.size and (ids.min() < 0 or ids.max() > card):
                raise DataError(f"state column {col}: ids must lie in [0, {card}] "
                                "(top index reserved for unknown)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.values.shape[0],):
                raise DataError("labels must have length T")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must contain only 0/1")
            self.labels = self.labels.astype(np.int64)
            self.labels.setflags(write=False)
        if not self.column_names:
            self.column_names = tuple(f"c{i}" for i in range(self.values.shape[1]))
        self.values.setflags(write=False)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def numeric_indices(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.var_kinds) if k == NUMERICAL)

    @property
    def state_indices(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.var_kinds) if k == STATE)

    @property
    def n_numeric(self) -> int:
        return len(self.numeric_indices)

    @property
    def n_state(self) -> int:
        return len(self.state_indices)

    def numeric(self) -> np.ndarray:
        return self.values[:, list(self.numeric_indices)]

    def state_ids(self) -> np.ndarray:
        return self.values[:, list(self.state_indices)].astype(np.int64)

    def raw_state_value(self, state_col: int, category_id: int):
        """Invert a category index back to the raw value (round trip)."""
        cmap = self.category_maps[state_col]
        if category_id >= len(cmap):
            raise DataError(f"category id {category_id} is the reserved unknown index "
                            "and has no raw value")
        return cmap[category_id]


@dataclass
class WindowBatch:
    """Windows tiling a series: numeric (B, T_w, C_n), state ids (B, T_w, C_s)."""

    numeric: np.ndarray
    state_ids: np.ndarray
    origin: np.ndarray           # per-window start offsets, strictly increasing
    patch_len: int

    @property
    def n_windows(self) -> int:
        return self.numeric.shape[0]

    @property
    def window_len(self) -> int:
        return self.numeric.shape[1]

    @property
    def n_patches(self) -> int:
        return self.window_len // self.patch_len


# -- patterns and synthetic generation --------------------------------------


@dataclass(frozen=True)
class Pattern:
    """Per-regime generating rule for a numerical variable.

    Closed forms (t is the global time index, t0 the start of the current
    regime segment):
      stable:    level
      oscillate: amplitude * sin(2*pi*t/period)     (global phase)
      ramp:      slope * (t - t0)
    """

    kind: str
    level: float = 0.0
    amplitude: float = 1.0
    period: float = 16.0
    slope: float = 0.02

    def __post_init__(self):
        if self.kind not in ("stable", "oscillate", "ramp"):
            raise ConfigError(f"unknown pattern kind {self.kind!r}")

    def evaluate(self, t_global: np.ndarray, seg_start: np.ndarray | float = 0.0) -> np.ndarray:
        t = np.asarray(t_global, dtype=np.float64)
        if self.kind == "stable":
            return np.full_like(t, self.level)
        if self.kind == "oscillate":
            return self.amplitude * np.sin(2.0 * np.pi * t / self.period)
        return self.slope * (t - np.asarray(seg_start, dtype=np.float64))

    def to_dict(self) -> dict:
        if self.kind == "stable":
            return {"kind": "stable", "level": self.level}
        if self.kind == "oscillate":
            return {"kind": "oscillate", "amplitude": self.amplitude, "period": self.period}
        return {"kind": "ramp", "slope": self.slope}

    @staticmethod
    def from_dict(d: dict) -> "Pattern":
        return Pattern(**d)


DEFAULT_PATTERNS = (
    Pattern("stable", level=0.0),
    Pattern("oscillate", amplitude=1.0, period=16.0),
    Pattern("stable", level=1.5),
    Pattern("oscillate", amplitude=0.6, period=8.0),
    Pattern("ramp", slope=0.05),
    Pattern("stable", level=-1.2),
)


@dataclass
class SyntheticConfig:
    """Configuration of the regime-switching generator.

    Each numerical variable is driven by one "primary" state variable
    (``v mod n_state_vars``): the active regime value selects the pattern.
    Other state variables add a linear level offset ``cross_scale * id`` so
    the numeric value is a function of the joint state.
    """

    n_state_vars: int = 3
    n_numeric_vars: int = 2
    regime_count: int = 3                    # per state variable
    dwell_range: tuple[int, int] = (64, 192)
    patterns: tuple[Pattern, ...] = ()
    noise_std: float = 0.05
    frac_point_spike: float = 0.0125
    frac_state_mismatch: float = 0.025
    frac_state_only: float = 0.0125
    T_train: int = 8000
    T_test: int = 4000
    seed: int = 0
    cross_scale: float = 0.2
    min_patch_len: int = 16                  # dwell invariant reference

    def __post_init__(self):
        if not self.patterns:
            self.patterns = DEFAULT_PATTERNS[: max(self.regime_count, 2)]
        if len(self.patterns) < self.regime_count:
            raise ConfigError("need at least one pattern per regime value")
        lo, hi = self.dwell_range
        if lo < 2 * self.min_patch_len:
            raise ConfigError(f"dwell lower bound {lo} must be >= 2*patch length "
                              f"({2 * self.min_patch_len}) so regimes span whole patches")
        if lo > hi or lo < 2:
            raise ConfigError("dwell_range must satisfy 2 <= lo <= hi")
        total = self.frac_point_spike + self.frac_state_mismatch + self.frac_state_only
        if total > 0.2:
            raise ConfigError(f"anomaly fractions sum to {total:.3f} > 0.2")
        if self.n_state_vars < 1 or self.n_numeric_vars < 1:
            raise ConfigError("need at least one state and one numeric variable")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_state_vars", "n_numeric_vars", "regime_count", "noise_std",
            "frac_point_spike", "frac_state_mismatch", "frac_state_only",
            "T_train", "T_test", "seed", "cross_scale", "min_patch_len")}
        d["dwell_range"] = list(self.dwell_range)
        d["patterns"] = [p.to_dict() for p in self.patterns]
        return d

    @staticmethod
    def from_dict(d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "dwell_range" in d:
            d["dwell_range"] = tuple(d["dwell_range"])
        if "patterns" in d:
            d["patterns"] = tuple(Pattern.from_dict(p) for p in d["patterns"])
        return SyntheticConfig(**d)


def _regime_sequence(T: int, n_regimes: int, dwell: tuple[int, int],
                     rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant regime ids with no immediate repeats."""
    out = np.empty(T, dtype=np.int64)
    t = 0
    prev = -1
    while t < T:
        value = int(rng.integers(0, n_regimes))
        if n_regimes > 1:
            while value == prev:
                value = int(rng.integers(0, n_regimes))
        length = int(rng.integers(dwell[0], dwell[1] + 1))
        out[t: t + length] = value
        prev = value
        t += length
    return out


def segment_starts(states: np.ndarray) -> np.ndarray:
    """For each t, the start index of the current run of equal values."""
    T = len(states)
    starts = np.zeros(T, dtype=np.int64)
    for t in range(1, T):
        starts[t] = starts[t - 1] if states[t] == states[t - 1] else t
    return starts


def _numeric_from_states(states: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Deterministic numeric base signal: joint state in, values out."""
    T, C_s = states.shape
    out = np.zeros((T, cfg.n_numeric_vars))
    t = np.arange(T)
    for v in range(cfg.n_numeric_vars):
        p = v % C_s
        starts = segment_starts(states[:, p])
        base = np.zeros(T)
        for r in range(cfg.regime_count):
            mask = states[:, p] == r
            base[mask] = cfg.patterns[r].evaluate(t[mask], starts[mask])
        cross = cfg.cross_scale * (states.sum(axis=1) - states[:, p])
        out[:, v] = base + cross
    return out


def _place_segments(T: int, budget: int, occupied: np.ndarray,
                    rng: np.random.Generator, seg_range=(16, 48),
                    margin: int = 50, gap: int = 20) -> list[tuple[int, int]]:
    """Non-overlapping [a, b) segments totalling exactly ``budget`` points."""
    segments: list[tuple[int, int]] = []
    placed = 0
    attempts = 0
    while placed < budget and attempts < 20000:
        attempts += 1
        length = min(int(rng.integers(seg_range[0], seg_range[1] + 1)), budget - placed)
        a = int(rng.integers(margin, T - margin - length))
        if occupied[max(0, a - gap): a + length + gap].any():
            continue
        occupied[a: a + length] = True
        segments.append((a, a + length))
        placed += length
    if placed < budget:
        raise ConfigError("could not place anomaly segments; lower the fractions")
    return segments


def generate_synthetic(cfg: SyntheticConfig) -> tuple[SeriesDataset, SeriesDataset]:
    """Generate (train, test): train is anomaly-free, test carries labels."""
    ss = np.random.SeedSequence(cfg.seed)
    rng_train, rng_test, rng_anom = [np.random.default_rng(s) for s in ss.spawn(3)]

    datasets = []
    for split, T, rng in (("train", cfg.T_train, rng_train), ("test", cfg.T_test, rng_test)):
        states = np.stack([_regime_sequence(T, cfg.regime_count, cfg.dwell_range, rng)
                           for _ in range(cfg.n_state_vars)], axis=1)
        numeric = _numeric_from_states(states, cfg)
        if cfg.noise_std > 0:
            numeric = numeric + rng.normal(0.0, cfg.noise_std, size=numeric.shape)
        labels = np.zeros(T, dtype=np.int64)

        if split == "test":
            occupied = np.zeros(T, dtype=bool)

            n_mismatch = round(cfg.frac_state_mismatch * T)
            if n_mismatch:
                for i, (a, b) in enumerate(_place_segments(T, n_mismatch, occupied, rng_anom)):
                    v = i % cfg.n_numeric_vars
                    p = v % cfg.n_state_vars
                    current = int(states[a, p])
                    other = (current + 1 + int(rng_anom.integers(0, cfg.regime_count - 1))) \
                        % cfg.regime_count if cfg.regime_count > 1 else current
                    swapped = cfg.patterns[other].evaluate(np.arange(a, b), float(a))
                    cross = cfg.cross_scale * (states[a:b].sum(axis=1) - states[a:b, p])
                    noise = rng_anom.normal(0.0, cfg.noise_std, size=b - a) if cfg.noise_std > 0 else 0.0
                    numeric[a:b, v] = swapped + cross + noise
                    labels[a:b] = 1

            n_state_only = round(cfg.frac_state_only * T)
            if n_state_only:
                for i, (a, b) in enumerate(_place_segments(T, n_state_only, occupied, rng_anom)):
                    j = i % cfg.n_state_vars
                    current = int(states[a, j])
                    other = (current + 1 + int(rng_anom.integers(0, cfg.regime_count - 1))) \
                        % cfg.regime_count if cfg.regime_count > 1 else current
                    states[a:b, j] = other
                    labels[a:b] = 1

            n_spikes = round(cfg.frac_point_spike * T)
            free = np.flatnonzero(~occupied[50: T - 50]) + 50
            picks = rng_anom.choice(free, size=min(n_spikes, free.size), replace=False)
            for i, t in enumerate(np.sort(picks)):
                v = i % cfg.n_numeric_vars
                sign = 1.0 if rng_anom.random() < 0.5 else -1.0
                numeric[t, v] += sign * (3.0 + 3.0 * rng_anom.random())
                labels[t] = 1

        values = np.concatenate([numeric, states.astype(np.float64)], axis=1)
        kinds = (NUMERICAL,) * cfg.n_numeric_vars + (STATE,) * cfg.n_state_vars
        names = tuple(f"num{v}" for v in range(cfg.n_numeric_vars)) + \
            tuple(f"state{j}" for j in range(cfg.n_state_vars))
        datasets.append(SeriesDataset(
            values=values,
            var_kinds=kinds,
            cardinalities=(cfg.regime_count,) * cfg.n_state_vars,
            category_maps=(tuple(range(cfg.regime_count)),) * cfg.n_state_vars,
            labels=labels if split == "test" else None,
            split=split,
            column_names=names,
        ))
    return datasets[0], datasets[1]


# -- CSV ingestion -----------------------------------------------------------


def load_csv(path: str | Path, schema_path: str | Path,
             category_reference: SeriesDataset | None = None) -> SeriesDataset:
    """Load a CSV with a JSON schema sidecar.

    The schema names state columns, the (optional) label column, and the
    split. Category maps are fitted on the data itself for train splits; test
    splits should pass the train dataset as ``category_reference`` so unseen
    raw values map to the reserved unknown index.
    """
    path, schema_path = Path(path), Path(schema_path)
    schema = json.loads(schema_path.read_text())
    for key in ("state_columns", "label_column", "split"):
        if key not in schema:
            raise SchemaError(f"schema missing key {key!r}")

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or (len(rows) == 1 and not any(rows[0])):
        raise DataError(f"{path}: empty input")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")

    col_index = {name: i for i, name in enumerate(header)}
    for name in schema["state_columns"]:
        if name not in col_index:
            raise SchemaError(f"state column {name!r} not present in CSV header")
    label_col = schema["label_column"]
    if label_col is not None and label_col not in col_index:
        raise SchemaError(f"label column {label_col!r} not present in CSV header")

    state_names = list(schema["state_columns"])
    data_names = [n for n in header if n != label_col]
    kinds = tuple(STATE if n in state_names else NUMERICAL for n in data_names)

    def parse_cell(raw: str, row: int, name: str) -> float:
        try:
            return float(raw)
        except ValueError:
            raise DataError(f"{path}: non-numeric value {raw!r} at row {row + 2}, "
                            f"column {name!r}") from None

    raw_columns: dict[str, list] = {n: [] for n in header}
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        for name, cell in zip(header, row):
            raw_columns[name].append(cell)

    T = len(body)
    values = np.zeros((T, len(data_names)))
    cardinalities: list[int] = []
    category_maps: list[tuple] = []
    state_seen = 0
    for j, name in enumerate(data_names):
        cells = raw_columns[name]
        if kinds[j] == NUMERICAL:
            values[:, j] = [parse_cell(c, r, name) for r, c in enumerate(cells)]
            continue
        # state column: keep raw values (numeric if all parse, else strings)
        try:
            raw = [float(c) for c in cells]
        except ValueError:
            raw = list(cells)
        if category_reference is not None:
            k = state_seen
            cmap = category_reference.category_maps[k]
            card = category_reference.cardinalities[k]
        else:
            cmap = tuple(sorted(set(raw)))
            card = len(cmap)
        lookup = {v: i for i, v in enumerate(cmap)}
        values[:, j] = [lookup.get(v, card) for v in raw]
        cardinalities.append(card)
        category_maps.append(tuple(cmap))
        state_seen += 1

    labels = None
    if label_col is not None:
        labels = np.array([parse_cell(c, r, label_col)
                           for r, c in enumerate(raw_columns[label_col])])
        labels = labels.astype(np.int64)

    return SeriesDataset(values=values, var_kinds=kinds,
                         cardinalities=tuple(cardinalities),
                         category_maps=tuple(category_maps),
                         labels=labels, split=schema["split"],
                         column_names=tuple(data_names))


def write_csv(ds: SeriesDataset, path: str | Path, schema_path: str | Path) -> None:
    """Write a dataset and its schema sidecar (inverse of load_csv)."""
    path, schema_path = Path(path), Path(schema_path)
    header = list(ds.column_names)
    if ds.labels is not None:
        header.append("label")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        state_pos = {col: k for k, col in enumerate(ds.state_indices)}
        for t in range(ds.T):
            row = []
            for j in range(ds.values.shape[1]):
                if ds.var_kinds[j] == STATE:
                    row.append(ds.category_maps[state_pos[j]][int(ds.values[t, j])])
                else:
                    row.append(repr(float(ds.values[t, j])))
            if ds.labels is not None:
                row.append(int(ds.labels[t]))
            w.writerow(row)
    schema = {
        "state_columns": [ds.column_names[j] for j in ds.state_indices],
        "label_column": "label" if ds.labels is not None else None,
        "split": ds.split,
    }
    schema_path.write_text(json.dumps(schema, indent=2) + "\n")


# -- pseudo-state discretization ----------------------------------------------


def discretize_pseudo_states(ds: SeriesDataset, column: int, n_bins: int,
                             edges: np.ndarray | None = None) -> SeriesDataset:
    """Append a state column binning a numerical column into equal-frequency
    quantile bins.

    Edges are fitted on ``ds`` when it is the train split; apply to a test
    split by passing the train-fitted ``edges`` (recoverable from the
    appended column's category map, which stores them). Out-of-range finite
    values clamp into the boundary bins; non-finite values map to the
    reserved unknown index.
    """
    if ds.var_kinds[column] != NUMERICAL:
        raise ConfigError(f"column {column} is not numerical")
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    x = ds.values[:, column]
    if edges is None:
        if ds.split != "train":
            raise ConfigError("fit edges on the train split (or pass edges=)")
        finite = x[np.isfinite(x)]
        if finite.size == 0 or finite.min() == finite.max():
            raise DataError(f"column {column} is constant; cannot form >= 2 bins")
        qs = np.arange(1, n_bins) / n_bins
        edges = np.quantile(finite, qs)
        if np.unique(edges).size != len(edges):
            raise DataError(f"column {column}: degenerate quantile bins "
                            "(duplicated edges)")
    edges = np.asarray(edges, dtype=np.float64)
    ids = np.searchsorted(edges, x, side="right").astype(np.float64)
    ids[~np.isfinite(x)] = n_bins   # reserved unknown

    values = np.concatenate([ds.values, ids[:, None]], axis=1)
    return SeriesDataset(
        values=values,
        var_kinds=ds.var_kinds + (STATE,),
        cardinalities=ds.cardinalities + (n_bins,),
        category_maps=ds.category_maps + (tuple(edges.tolist()),),
        labels=None if ds.labels is None else ds.labels.copy(),
        split=ds.split,
        column_names=ds.column_names + (f"{ds.column_names[column]}_bin",),
    )


# -- windowing ----------------------------------------------------------------


def window_and_patch(ds: SeriesDataset, T_w: int, stride: int, l: int) -> WindowBatch:
    """Tile the series with windows of length T_w; a trailing remainder is
    covered by one extra window ending at T (overlapping the previous)."""
    if T_w % l != 0:
        raise ConfigError(f"patch length {l} must divide window length {T_w}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if ds.T < T_w:
        raise DataError(f"series of length {ds.T} shorter than one window ({T_w})")
    offsets = list(range(0, ds.T - T_w + 1, stride))
    if offsets[-1] + T_w < ds.T:
        offsets.append(ds.T - T_w)
    numeric = ds.numeric()
    states = ds.state_ids()
    num = np.stack([numeric[o: o + T_w] for o in offsets])
    st = np.stack([states[o: o + T_w] for o in offsets]) if ds.n_state else \
        np.zeros((len(offsets), T_w, 0), dtype=np.int64)
    return WindowBatch(numeric=num, state_ids=st,
                       origin=np.asarray(offsets, dtype=np.int64), patch_len=l)
