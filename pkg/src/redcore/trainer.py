"""Training loop: K parameter steps per supervision update, Adam, evaluation.

The outer iteration first refreshes the supervision weights from the running
moving-average imputation losses (their relative advantage), then runs K
stochastic inner steps on the composite objective. Batches come from a
persistent epoch-shuffled stream and the reparameterization noise is drawn
per inner step; both are pure functions of (seed, step index), which makes
runs bit-reproducible and lets a checkpoint resume continue the exact
trajectory of an unbroken run.

Ablation modes:
  redcore  - full method;
  core     - supervision regulation disabled (step size alpha1 forced to 0);
  red      - per-modality prediction heads removed from the objective and
             their decoder parameters excluded from the optimizer; the
             regulator stays active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datagen import MultimodalDataset
from .errors import CheckpointError, ConfigError, ShapeError
from .losses import ABSENT_IN_BATCH, total_loss
from .model import (ArchConfig, ModelParams, _arch_manifest, forward_all,
                    init_params, params_from_manifest, read_tensor_blob,
                    write_tensor_blob)
from .regulator import (SupervisionState, eta_update, make_state, mal_update,
                        relative_advantage)

_SHUFFLE_STREAM = 50
_EPS_STREAM = 51

MODES = ("redcore", "core", "red")


@dataclass(frozen=True)
class TrainConfig:
    outer_steps: int                     # S
    inner_steps: int = 3                 # K
    gamma: float = 0.008
    adam_lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 128
    alpha1: float = 0.1
    beta: float = 0.7
    xi1: float = 0.015
    xi2: float = 0.15
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    eval_every: int = 25
    eta_init: str = "symmetric"

    def __post_init__(self):
        if self.outer_steps < 1 or self.inner_steps < 1:
            raise ConfigError("outer_steps and inner_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(t) for k, t in tensors.items()},
                   v={k: np.zeros_like(t) for k, t in tensors.items()})


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, betas: tuple[float, float],
              eps: float, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns a new tensor mapping.

    Only `names` (default: every gradient key) are updated; other tensors are
    carried over unchanged.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = dict(tensors)
    for name in (names if names is not None else grads):
        g = grads[name]
        if g.shape != tensors[name].shape:
            raise ShapeError("gradient shape %s does not match parameter %s %s"
                             % (g.shape, name, tensors[name].shape))
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        out[name] = tensors[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    """Support-weighted F1; classes with zero precision+recall score 0."""
    total = 0.0
    n = len(y_true)
    for c in range(n_classes):
        support = int((y_true == c).sum())
        if support == 0:
            continue
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = support - tp
        denom = 2 * tp + fp + fn
        f1 = (2.0 * tp / denom) if denom > 0 else 0.0
        total += (support / n) * f1
    return total


def all_combos(m_count: int) -> list[tuple[int, ...]]:
    """Every non-empty modality subset, singletons first, then by size/lex."""
    combos = []
    for size in range(1, m_count + 1):
        def grow(start, chosen):
            if len(chosen) == size:
                combos.append(tuple(chosen))
                return
            for i in range(start, m_count):
                grow(i + 1, chosen + [i])
        grow(0, [])
    return combos


def combo_label(combo: Sequence[int]) -> str:
    return "+".join(str(i + 1) for i in sorted(combo))


def evaluate(params: ModelParams, ds: MultimodalDataset,
             modality_subset: Sequence[int], chunk: int = 512) -> tuple[float, float]:
    """Weighted F1 and accuracy with only `modality_subset` usable.

    Modalities outside the subset count as missing for every sample and are
    routed through imputation. The subset is intersected with the stored
    presence matrix: a stored-missing entry is zero-filled on disk and must
    never be consumed as a real feature.
    """
    subset = sorted(set(int(m) for m in modality_subset))
    if not subset or subset[0] < 0 or subset[-1] >= ds.n_modalities:
        raise ConfigError(f"modality subset {modality_subset!r} invalid for "
                          f"{ds.n_modalities} modalities")
    keep = np.zeros(ds.n_modalities, dtype=np.int64)
    keep[subset] = 1
    presence = ds.presence * keep[None, :]
    preds = np.empty(ds.n_samples, dtype=np.int64)
    for start in range(0, ds.n_samples, chunk):
        stop = min(start + chunk, ds.n_samples)
        pres = presence[start:stop]
        feats = [f[start:stop] * pres[:, m][:, None]
                 for m, f in enumerate(ds.features)]
        out = forward_all(params, (feats, ds.labels[start:stop], pres), eps=None)
        preds[start:stop] = out.joint_logits.value.argmax(axis=1)
    acc = float((preds == ds.labels).mean())
    return weighted_f1(ds.labels, preds, ds.n_classes), acc


# ---------------------------------------------------------------------------
# deterministic batch / noise streams
# ---------------------------------------------------------------------------

def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])


def batch_at(ds: MultimodalDataset, batch_size: int, seed: int, step: int):
    """Batch for global inner step `step` of the epoch-shuffled stream."""
    n = ds.n_samples
    per_epoch = math.ceil(n / batch_size)
    epoch, slot = divmod(step, per_epoch)
    perm = _stream(seed, _SHUFFLE_STREAM, epoch).permutation(n)
    idx = perm[slot * batch_size:(slot + 1) * batch_size]
    feats = [f[idx] for f in ds.features]
    return feats, ds.labels[idx], ds.presence[idx]


def eps_at(seed: int, step: int, m_count: int, batch: int, d: int) -> list[np.ndarray]:
    draw = _stream(seed, _EPS_STREAM, step).standard_normal((m_count, batch, d))
    return [draw[m] for m in range(m_count)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    params: ModelParams
    adam: AdamState
    sup: SupervisionState
    outer_step: int
    mode: str


def save_checkpoint(directory, params: ModelParams, adam: AdamState,
                    sup: SupervisionState, outer_step: int, mode: str) -> None:
    named = dict(params.tensors)
    for key, arr in adam.m.items():
        named[f"adam.m.{key}"] = arr
    for key, arr in adam.v.items():
        named[f"adam.v.{key}"] = arr
    manifest = {
        "format": "train-v1",
        **_arch_manifest(params),
        "adam": {"step": adam.step},
        "supervision": {
            "eta": [float(x) for x in sup.eta],
            "mal": [None if v is None else float(v) for v in sup.mal],
            "beta": sup.beta, "xi1": sup.xi1, "xi2": sup.xi2,
            "alpha1": sup.alpha1, "p_norm": sup.p_norm,
        },
        "progress": {"outer_step": int(outer_step), "mode": mode},
    }
    write_tensor_blob(directory, named, manifest)


def load_checkpoint(directory) -> CheckpointBundle:
    manifest, named = read_tensor_blob(directory)
    if manifest.get("format") != "train-v1":
        raise CheckpointError(f"not a training checkpoint: {directory}")
    model_named = {k: v for k, v in named.items() if not k.startswith("adam.")}
    params = params_from_manifest(manifest, model_named)
    adam = AdamState.fresh(params.tensors)
    try:
        adam.step = int(manifest["adam"]["step"])
        for key in params.tensors:
            adam.m[key] = named[f"adam.m.{key}"]
            adam.v[key] = named[f"adam.v.{key}"]
        sup_doc = manifest["supervision"]
        sup = SupervisionState(
            eta=np.array([float(x) for x in sup_doc["eta"]]),
            mal=[None if v is None else float(v) for v in sup_doc["mal"]],
            beta=float(sup_doc["beta"]), xi1=float(sup_doc["xi1"]),
            xi2=float(sup_doc["xi2"]), alpha1=float(sup_doc["alpha1"]),
            p_norm=int(sup_doc["p_norm"]))
        progress = manifest["progress"]
        bundle = CheckpointBundle(params, adam, sup,
                                  int(progress["outer_step"]),
                                  str(progress["mode"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{directory}: malformed training sections: {exc}") from None
    for key, arr in adam.m.items():
        if arr.shape != params.tensors[key].shape:
            raise CheckpointError(f"adam state shape mismatch for {key}")
    return bundle


# ---------------------------------------------------------------------------
# the double loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    sup: SupervisionState
    metrics: list[dict]
    trace: list[dict]
    mode: str
    adam_steps_run: int
    eta_events: int


def _nan_list(m_count: int) -> list[float]:
    return [float("nan")] * m_count


def run_training(cfg: TrainConfig, dataset: MultimodalDataset, mode: str = "redcore",
                 eval_dataset: MultimodalDataset | None = None,
                 resume: CheckpointBundle | None = None,
                 eval_combos: Sequence[Sequence[int]] | None = None) -> TrainResult:
    """Execute the double loop for cfg.outer_steps outer iterations.

    Returns metrics and trace rows covering the executed span only (resumed
    runs re-emit rows from their resume point onward, matching an unbroken
    run's rows for those steps exactly).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    m_count = dataset.n_modalities
    if eval_dataset is not None and eval_dataset.n_modalities != m_count:
        raise ConfigError("eval dataset modality count differs from training data")
    alpha_eff = 0.0 if mode == "core" else cfg.alpha1

    if resume is not None:
        if resume.mode != mode:
            raise CheckpointError(f"checkpoint was written by mode {resume.mode!r},"
                                  f" cannot resume as {mode!r}")
        if resume.params.modality_dims != dataset.modality_dims:
            raise ConfigError("checkpoint modality dims do not match the dataset")
        params = resume.params
        adam = resume.adam
        sup = resume.sup
        start_step = resume.outer_step
    else:
        params = init_params(cfg.arch, dataset.modality_dims, dataset.n_classes,
                             cfg.seed)
        adam = AdamState.fresh(params.tensors)
        sup = make_state(m_count, beta=cfg.beta, xi1=cfg.xi1, xi2=cfg.xi2,
                         alpha1=alpha_eff, init=cfg.eta_init, seed=cfg.seed)
        start_step = 0

    if mode == "red":
        optimized = [n for n in params.tensors
                     if not (n.startswith("dec") and n[3].isdigit())]
    else:
        optimized = list(params.tensors)
    combos = ([tuple(c) for c in eval_combos] if eval_combos
              else all_combos(m_count))

    metrics: list[dict] = []
    trace: list[dict] = []
    last_losses = (float("nan"), float("nan"), _nan_list(m_count))
    adam_steps_run = 0
    eta_events = 0

    for s in range(start_step, cfg.outer_steps):
        # regulation event: read the MAL snapshot, update eta (Eq. 7 step is
        # the identity while alpha1 == 0 or before any MAL exists)
        mal_vec = sup.mal_vector()
        ra = None
        if mal_vec is not None and np.all(mal_vec > 0):
            ra = relative_advantage(mal_vec)
            eta_update(sup, ra)
        eta_events += 1
        ra_list = [float(x) for x in ra] if ra is not None else _nan_list(m_count)
        mal_list = [float("nan") if v is None else float(v) for v in sup.mal]
        for m in range(m_count):
            trace.append({"step": s, "m": m + 1, "eta_m": float(sup.eta[m]),
                          "mal_m": mal_list[m], "ra_m": ra_list[m]})

        for k in range(cfg.inner_steps):
            t = s * cfg.inner_steps + k
            batch = batch_at(dataset, cfg.batch_size, cfg.seed, t)
            eps = eps_at(cfg.seed, t, m_count, len(batch[1]), cfg.arch.rep_dim)
            outputs = forward_all(params, batch, eps)
            loss, mses = total_loss(outputs, batch[1], batch[2], cfg.gamma,
                                    sup.eta, per_modality_heads=(mode != "red"))
            ad.backward(loss)
            grads = {name: outputs.param_nodes[name].grad for name in optimized}
            params.tensors = adam_step(params.tensors, grads, adam, cfg.adam_lr,
                                       cfg.adam_betas, cfg.adam_eps, names=optimized)
            adam_steps_run += 1
            mal_update(sup, [(m, v) for m, v in enumerate(mses)
                             if v is not ABSENT_IN_BATCH and v > 0])
            total_val = float(loss.value)
            eta_dot_mse = sum(float(sup.eta[m]) * v for m, v in enumerate(mses)
                              if v is not ABSENT_IN_BATCH)
            mse_list = [float("nan") if v is ABSENT_IN_BATCH else float(v)
                        for v in mses]
            last_losses = (total_val, total_val - eta_dot_mse, mse_list)

        if s % cfg.eval_every == 0 or s == cfg.outer_steps - 1:
            total_val, vib_val, mse_list = last_losses
            shared = {"total_loss": total_val, "vib_loss": vib_val}
            for m in range(m_count):
                shared[f"mse_{m + 1}"] = mse_list[m]
                shared[f"eta_{m + 1}"] = float(sup.eta[m])
                shared[f"ra_{m + 1}"] = ra_list[m]
            splits = [("train", dataset)]
            if eval_dataset is not None:
                splits.append(("test", eval_dataset))
            for split, ds in splits:
                for combo in combos:
                    f1, acc = evaluate(params, ds, combo)
                    metrics.append({"outer_step": s, "split": split,
                                    "modality_combo": combo_label(combo),
                                    "f1_weighted": f1, "accuracy": acc, **shared})

    return TrainResult(params, adam, sup, metrics, trace, mode,
                       adam_steps_run, eta_events)


# ---------------------------------------------------------------------------
# CSV emission (schema-stable; floats via repr for exact round-trips)
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_columns(m_count: int) -> list[str]:
    cols = ["outer_step", "split", "modality_combo", "f1_weighted", "accuracy",
            "total_loss", "vib_loss"]
    cols += [f"mse_{m + 1}" for m in range(m_count)]
    cols += [f"eta_{m + 1}" for m in range(m_count)]
    cols += [f"ra_{m + 1}" for m in range(m_count)]
    return cols


def write_metrics_csv(rows: list[dict], path, m_count: int) -> None:
    cols = metrics_columns(m_count)
    lines = [",".join(cols)]
    lines += [",".join(_fmt(row[c]) for c in cols) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_trace_csv(rows: list[dict], path) -> None:
    cols = ["step", "m", "eta_m", "mal_m", "ra_m"]
    lines = [",".join(cols)]
    lines += [",".join(_fmt(row[c]) for c in cols) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
