"""Synthetic multimodal datasets with controllable informativeness and missing rates.

Generation is label-conditioned: each sample draws a shared latent vector
around its class center, and every modality observes a fixed random linear
readout of that latent plus Gaussian noise whose variance is set by the
modality's informativeness. Missing entries are masked via a presence matrix
and zero-filled in storage; the model never consumes zero-filled features
because all routing goes through the presence matrix.

Everything is a pure function of its config: the same seed reproduces the
dataset bit for bit. Task-defining randomness (class centers, readout maps)
and per-sample randomness live on separate seed streams so a fully-present
evaluation split can be drawn from the same task (see gen_train_eval).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DegenerateModality, ParseError

_TASK_STREAM = 0
_SAMPLE_STREAM = 1
_MASK_STREAM = 2

_CLASS_SPREAD = 2.0   # std of class centers in latent space
_WITHIN_STD = 0.5     # within-class latent std


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


@dataclass(frozen=True)
class GenConfig:
    n_samples: int
    n_classes: int
    latent_dim: int
    modality_dims: tuple[int, ...]
    informativeness: tuple[float, ...]
    missing_rates: tuple[float, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "informativeness", tuple(float(v) for v in self.informativeness))
        object.__setattr__(self, "missing_rates", tuple(float(r) for r in self.missing_rates))
        m = len(self.modality_dims)
        if m == 0 or len(self.informativeness) != m or len(self.missing_rates) != m:
            raise ConfigError("modality_dims, informativeness, missing_rates must share a length >= 1")
        if self.n_samples < 1 or self.n_classes < 2 or self.latent_dim < 1:
            raise ConfigError("need n_samples >= 1, n_classes >= 2, latent_dim >= 1")
        if any(d < 1 for d in self.modality_dims):
            raise ConfigError("modality dims must be positive")
        if any(not (0.0 < v <= 1.0) for v in self.informativeness):
            raise ConfigError("informativeness must lie in (0, 1]")
        if any(not (0.0 <= r < 1.0) for r in self.missing_rates):
            raise ConfigError("missing rates must lie in [0, 1)")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class MultimodalDataset:
    """Per-modality feature matrices plus labels and the presence matrix.

    Feature entries at positions with presence 0 are zero-filled and must be
    treated as unusable; consumers route on `presence` only.
    """

    features: list[np.ndarray]                 # M arrays of shape (N, d_m)
    labels: np.ndarray                         # (N,) ints in [0, n_classes)
    presence: np.ndarray                       # (N, M) ints in {0, 1}
    declared_rates: np.ndarray                 # (M,) floats in [0, 1)
    n_classes: int
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.presence.shape[1]

    @property
    def modality_dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)


def _debiased_rates(rates: np.ndarray) -> np.ndarray:
    """Draw rates whose post-rejection marginals match the declared rates.

    Rejecting all-missing rows conditions the Bernoulli columns, shifting the
    realized missing rate of modality m to (r_m - P)/(1 - P) with P = prod(r).
    Solving r'_m = r_m + P'(1 - r_m), P' = prod(r'), removes the shift. When
    the target is infeasible under the at-least-one-present constraint the
    fixed point runs to 1; fall back to the uncorrected rates.
    """
    if rates.max(initial=0.0) <= 0.0 or rates.size == 1:
        return rates.copy()
    adj = rates.copy()
    for _ in range(500):
        p = adj.prod()
        if p > 1.0 - 1e-9:
            return rates.copy()
        new = rates + p * (1.0 - rates)
        if np.max(np.abs(new - adj)) < 1e-14:
            return new
        adj = new
    return rates.copy()


def sample_mask(rates, n: int, seed: int) -> np.ndarray:
    """(n, M) presence matrix with i.i.d.-style Bernoulli columns.

    Rows that come out with no modality present are redrawn until at least one
    is; the draw probabilities are bias-corrected so realized column rates
    still match `rates` (see _debiased_rates).
    """
    rates = np.asarray(rates, dtype=np.float64)
    if np.any((rates < 0) | (rates >= 1)):
        raise ConfigError("missing rates must lie in [0, 1)")
    rng = _rng(seed, _MASK_STREAM)
    draw = _debiased_rates(rates)
    mask = (rng.random((n, rates.size)) >= draw).astype(np.int64)
    bad = mask.sum(axis=1) == 0
    while bad.any():
        mask[bad] = (rng.random((int(bad.sum()), rates.size)) >= draw).astype(np.int64)
        bad = mask.sum(axis=1) == 0
    return mask


def missing_rate(presence: np.ndarray, m: int) -> float:
    """Realized missing rate of modality m: (N - sum_n C_nm) / N."""
    if not (0 <= m < presence.shape[1]):
        raise ConfigError(f"modality index {m} out of range for {presence.shape[1]} modalities")
    col = presence[:, m]
    if col.sum() == 0:
        raise DegenerateModality(f"modality {m} is absent from every sample")
    return float((presence.shape[0] - col.sum()) / presence.shape[0])


def _draw_features(cfg: GenConfig, n_total: int):
    """Fully-present features and labels for n_total samples of cfg's task.

    Each random component uses its own derived stream so that drawing
    n_total > n samples yields the n-sample dataset as an exact prefix
    (gen_train_eval relies on this).
    """
    task = _rng(cfg.seed, _TASK_STREAM)
    centers = task.normal(scale=_CLASS_SPREAD, size=(cfg.n_classes, cfg.latent_dim))
    readouts = [task.normal(scale=1.0 / math.sqrt(cfg.latent_dim),
                            size=(cfg.latent_dim, d)) for d in cfg.modality_dims]

    labels = _rng(cfg.seed, _SAMPLE_STREAM, 0).integers(0, cfg.n_classes, size=n_total)
    latents = centers[labels] + _rng(cfg.seed, _SAMPLE_STREAM, 1).normal(
        scale=_WITHIN_STD, size=(n_total, cfg.latent_dim))
    features = []
    for m, d in enumerate(cfg.modality_dims):
        x = latents @ readouts[m]
        info = cfg.informativeness[m]
        noise_std = math.sqrt((1.0 - info) / info)
        if noise_std > 0:
            x = x + _rng(cfg.seed, _SAMPLE_STREAM, 2 + m).normal(
                scale=noise_std, size=(n_total, d))
        features.append(x)
    return features, labels


def gen_dataset(cfg: GenConfig) -> MultimodalDataset:
    """Generate a dataset with cfg's missing rates applied (zero-filled)."""
    features, labels = _draw_features(cfg, cfg.n_samples)
    presence = sample_mask(np.array(cfg.missing_rates), cfg.n_samples, cfg.seed)
    for m in range(cfg.n_modalities):
        features[m] = features[m] * presence[:, m][:, None]
    return MultimodalDataset(features, labels, presence,
                             np.array(cfg.missing_rates, dtype=np.float64),
                             cfg.n_classes, cfg.seed)


def gen_train_eval(cfg: GenConfig, n_eval: int) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Train split with cfg's missing rates plus a fully-present eval split.

    Both splits come from one sample stream, so the task (class centers and
    readouts) is shared and the train split equals gen_dataset(cfg) exactly.
    """
    if n_eval < 1:
        raise ConfigError("n_eval must be >= 1")
    features, labels = _draw_features(cfg, cfg.n_samples + n_eval)
    n = cfg.n_samples
    presence = sample_mask(np.array(cfg.missing_rates), n, cfg.seed)
    train_feats = [f[:n] * presence[:, m][:, None] for m, f in enumerate(features)]
    train = MultimodalDataset(train_feats, labels[:n], presence,
                              np.array(cfg.missing_rates, dtype=np.float64),
                              cfg.n_classes, cfg.seed)
    eval_feats = [np.ascontiguousarray(f[n:]) for f in features]
    eval_presence = np.ones((n_eval, cfg.n_modalities), dtype=np.int64)
    evals = MultimodalDataset(eval_feats, labels[n:], eval_presence,
                              np.zeros(cfg.n_modalities), cfg.n_classes, cfg.seed)
    return train, evals


# ---------------------------------------------------------------------------
# on-disk layout: meta.json + modality_<m>.csv + labels.csv + presence.csv
# ---------------------------------------------------------------------------

def save_csv(ds: MultimodalDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_samples": int(ds.n_samples),
        "n_classes": int(ds.n_classes),
        "modality_dims": [int(d) for d in ds.modality_dims],
        "declared_rates": [float(r) for r in ds.declared_rates],
        "seed": int(ds.seed),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for m, feats in enumerate(ds.features):
        np.savetxt(directory / f"modality_{m}.csv", feats, fmt="%.17g", delimiter=",")
    np.savetxt(directory / "labels.csv", ds.labels[:, None], fmt="%d", delimiter=",")
    np.savetxt(directory / "presence.csv", ds.presence, fmt="%d", delimiter=",")


def _load_matrix(path: Path, n_rows: int, n_cols: int, *, integral=False,
                 allowed=None) -> np.ndarray:
    if not path.exists():
        raise ParseError(f"{path}: file missing")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise ParseError(f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if integral and any(v != int(v) for v in vals):
                raise ParseError(f"{path}:{lineno}: expected integer entries")
            if allowed is not None and any(v not in allowed for v in vals):
                raise ParseError(f"{path}:{lineno}: entry outside {sorted(allowed)}")
            rows.append(vals)
    if len(rows) != n_rows:
        raise ParseError(f"{path}: expected {n_rows} rows, got {len(rows)}")
    return np.array(rows, dtype=np.float64)


def load_csv(directory) -> MultimodalDataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ParseError(f"{meta_path}: file missing")
    try:
        meta = json.loads(meta_path.read_text())
        n = int(meta["n_samples"])
        n_classes = int(meta["n_classes"])
        dims = [int(d) for d in meta["modality_dims"]]
        rates = np.array([float(r) for r in meta["declared_rates"]])
        seed = int(meta.get("seed", 0))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"{meta_path}: {exc}") from None
    features = [_load_matrix(directory / f"modality_{m}.csv", n, d)
                for m, d in enumerate(dims)]
    labels = _load_matrix(directory / "labels.csv", n, 1, integral=True)[:, 0].astype(np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ParseError(f"{directory / 'labels.csv'}: labels outside [0, {n_classes})")
    presence = _load_matrix(directory / "presence.csv", n, len(dims),
                            integral=True, allowed={0.0, 1.0}).astype(np.int64)
    return MultimodalDataset(features, labels, presence, rates, n_classes, seed)


def batches(ds: MultimodalDataset, batch_size: int, seed: int = 0,
            shuffle: bool = True) -> Iterator[tuple[list[np.ndarray], np.ndarray, np.ndarray]]:
    """One epoch of (features-per-modality, labels, presence-rows) batches.

    Deterministic shuffle given seed; the last partial batch is emitted.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = ds.n_samples
    order = _rng(seed, 3).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ([f[idx] for f in ds.features], ds.labels[idx], ds.presence[idx])
