"""Training objectives: the variational bottleneck loss, imputation MSE, total.

The bottleneck loss sums, over modalities, the KL of each available row's
encoding distribution against the standard-normal prior (averaged over the
rows where the modality is present), plus a gamma-weighted cross-entropy for
every prediction head including the joint one. Missing rows carry no KL term:
there is no feature to encode, so their supervision comes from the label
alone through the imputed representation.

The imputation loss for modality m is the mean squared distance between the
self-encoded representation (treated as a fixed target: stop-gradient) and
the cross-modal imputation, over the batch rows where m is present. A
modality absent from the whole batch yields the ABSENT_IN_BATCH sentinel
instead of a loss; callers skip it and keep the previous running statistics.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .model import ForwardOutputs


class _AbsentInBatch:
    """Sentinel: the modality had no available rows in this batch."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "AbsentInBatch"


ABSENT_IN_BATCH = _AbsentInBatch()


def vib_loss(outputs: ForwardOutputs, labels, presence: np.ndarray, gamma: float,
             per_modality_heads: bool = True) -> ad.Node:
    """Bottleneck objective: masked KL sum + gamma * cross-entropy over heads.

    With per_modality_heads False only the joint head contributes
    cross-entropy (the regulation-only ablation); the KL terms are unchanged.
    """
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    m_count = len(outputs.mu)
    batch = presence.shape[0]

    terms = []
    for m in range(m_count):
        avail = presence[:, m].astype(np.float64)
        n_m = avail.sum()
        if n_m > 0:
            terms.append(ad.gaussian_kl(outputs.mu[m], outputs.log_var[m],
                                        row_weights=avail / n_m))
    ce_heads = []
    if per_modality_heads:
        ce_heads += [ad.softmax_cross_entropy(outputs.logits[m], labels)
                     for m in range(m_count)]
    ce_heads.append(ad.softmax_cross_entropy(outputs.joint_logits, labels))
    terms += [ad.scale(ce, gamma) for ce in ce_heads]

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def mse_loss(outputs: ForwardOutputs, presence: np.ndarray, m: int, target=None):
    """Imputation loss of modality m, or ABSENT_IN_BATCH when no row has it.

    Sum over available rows of ||z_bar - z_hat||^2 divided by the batch-local
    available count. The target is the detached self-encoded representation:
    gradients flow only into the imputation path, never into the target
    encoder. Passing an explicit `target` array pins the target to a constant,
    which is the same stop-gradient semantics made externally visible (the
    finite-difference oracle relies on it).
    """
    if not (0 <= m < len(outputs.z_bar)):
        raise ConfigError(f"modality index {m} out of range")
    avail = presence[:, m].astype(np.float64)
    n_m = avail.sum()
    if n_m == 0:
        return ABSENT_IN_BATCH
    target_node = ad.detach(outputs.z_bar[m]) if target is None else ad.var(target)
    diff = ad.add(outputs.z_hat[m], ad.scale(target_node, -1.0))
    sq = ad.mul_elem(diff, diff)
    mask = np.repeat(avail[:, None], sq.value.shape[1], axis=1)
    return ad.scale(ad.sum(ad.mul_elem(sq, ad.var(mask))), 1.0 / n_m)


def total_loss(outputs: ForwardOutputs, labels, presence: np.ndarray,
               gamma: float, eta, per_modality_heads: bool = True,
               mse_targets=None):
    """Composite objective and the raw per-modality imputation losses.

    Returns (loss node, per-modality list of float | ABSENT_IN_BATCH). The
    reported floats are the unweighted imputation losses, which feed the
    supervision regulator. `mse_targets` optionally pins the per-modality
    imputation targets to constants (see mse_loss).
    """
    eta = np.asarray(eta, dtype=np.float64)
    m_count = len(outputs.z_bar)
    if eta.shape != (m_count,):
        raise ConfigError("eta must have one weight per modality")
    if np.any(eta < 0):
        raise ConfigError("eta must be nonnegative")

    total = vib_loss(outputs, labels, presence, gamma, per_modality_heads)
    reported: list = []
    for m in range(m_count):
        target = None if mse_targets is None else mse_targets[m]
        mse = mse_loss(outputs, presence, m, target=target)
        if mse is ABSENT_IN_BATCH:
            reported.append(ABSENT_IN_BATCH)
            continue
        reported.append(float(mse.value))
        if eta[m] != 0.0:
            total = ad.add(total, ad.scale(mse, float(eta[m])))
    return total, reported
