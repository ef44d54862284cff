"""Supervision regulation: relative advantage, moving averages, projections.

The supervision weights eta live on the nonconvex set

    Gamma1 = {eta : eta >= floor * 1, ||eta||_2 = radius},

and are updated by a projected gradient step against the relative-advantage
vector: modalities whose imputation loss sits below the cross-modality mean
(positive relative advantage, "strong") lose supervision weight, weak ones
gain it. project_gamma1 computes the exact Euclidean projection via an
active-set argument: clamp a prefix of the ascending-sorted coordinates to
the floor and scale the rest onto the remaining sphere radius, growing the
clamp set until the scaled free coordinates clear the floor.

lemma1_verify checks, for a given zero-sum advantage vector, that the
minimizer of r^T eta over the convex relaxation (||eta||_2 <= radius) lands
on the sphere — i.e. the equality constraint is inactive-free at optimum.
It solves the relaxation by projected gradient with an exact convex
projection (bisection on the ball-scaling multiplier), a route fully
independent of the active-set code above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

_FLOOR_SLACK = 1e-12     # tolerance for floor feasibility checks
_NORM_SLACK = 1e-10      # tolerance for sphere membership checks


def relative_advantage(losses) -> np.ndarray:
    """r_m = (mean(losses) - losses_m) / mean(losses); sums to zero."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise DomainError("losses must be a non-empty vector")
    if np.any(losses <= 0):
        raise DomainError("losses must be strictly positive")
    mean = losses.mean()
    if np.all(losses == losses[0]):
        return np.zeros_like(losses)  # balancing point
    return (mean - losses) / mean


@dataclass
class SupervisionState:
    eta: np.ndarray
    mal: list            # per-modality moving-average loss, None = uninitialized
    beta: float = 0.7
    xi1: float = 0.015
    xi2: float = 0.15
    alpha1: float = 0.1
    p_norm: int = 2

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)
        m = self.eta.size
        if len(self.mal) != m:
            raise ConfigError("mal length must match eta")
        if not (0.0 < self.beta <= 1.0):
            raise ConfigError("beta must lie in (0, 1]")
        if self.xi1 <= 0 or self.alpha1 < 0:
            raise ConfigError("xi1 must be positive and alpha1 nonnegative")
        if self.p_norm != 2:
            raise ConfigError("only the euclidean norm constraint is supported")
        if self.xi1 * math.sqrt(m) >= self.xi2:
            raise ConfigError("infeasible constraint set: xi1*sqrt(M) >= xi2")
        self.check_feasible()

    def check_feasible(self):
        if np.any(self.eta < self.xi1 - _FLOOR_SLACK):
            raise ConfigError("eta violates the floor constraint")
        if abs(np.linalg.norm(self.eta) - self.xi2) > 1e-9:
            raise ConfigError("eta violates the norm constraint")

    @property
    def n_modalities(self) -> int:
        return self.eta.size

    def mal_vector(self) -> np.ndarray | None:
        """MAL as an array, or None while any entry is uninitialized."""
        if any(v is None for v in self.mal):
            return None
        return np.asarray(self.mal, dtype=np.float64)


def symmetric_eta(m: int, xi1: float = 0.015, xi2: float = 0.15) -> np.ndarray:
    if xi1 * math.sqrt(m) >= xi2:
        raise ConfigError("infeasible constraint set: xi1*sqrt(M) >= xi2")
    return np.full(m, xi2 / math.sqrt(m))


def random_feasible_eta(m: int, xi1: float, xi2: float, seed: int) -> np.ndarray:
    """Seeded random point of Gamma1 (uniform draw pushed through projection)."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 20])
    return project_gamma1(rng.uniform(xi1, xi2, size=m), xi1, xi2)


def make_state(m: int, beta: float = 0.7, xi1: float = 0.015, xi2: float = 0.15,
               alpha1: float = 0.1, init: str = "symmetric", seed: int = 0) -> SupervisionState:
    if init == "symmetric":
        eta = symmetric_eta(m, xi1, xi2)
    elif init == "random":
        eta = random_feasible_eta(m, xi1, xi2, seed)
    else:
        raise ConfigError(f"unknown eta init mode: {init}")
    return SupervisionState(eta=eta, mal=[None] * m, beta=beta, xi1=xi1,
                            xi2=xi2, alpha1=alpha1)


def mal_update(state: SupervisionState, batch_losses) -> list:
    """Fold fresh per-modality losses into the moving averages.

    `batch_losses` is an iterable of (modality, value) for the modalities
    that were present in the batch; others keep their stale average. First
    observations seed the average directly.
    """
    for m, value in batch_losses:
        value = float(value)
        if value <= 0:
            raise DomainError(f"loss for modality {m} must be positive, got {value}")
        if not (0 <= m < state.n_modalities):
            raise ConfigError(f"modality index {m} out of range")
        if state.mal[m] is None:
            state.mal[m] = value
        else:
            state.mal[m] = (1.0 - state.beta) * state.mal[m] + state.beta * value
    return state.mal


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_gamma1(v, xi1: float, xi2: float) -> np.ndarray:
    """Euclidean-nearest point of {eta >= xi1, ||eta||_2 = xi2} to v.

    Active-set search: clamp the k smallest coordinates to the floor and
    scale the rest onto the residual sphere; the first k whose scaled free
    coordinates all clear the floor is optimal. Degenerate inputs (zero free
    mass, all-nonpositive v) fall back to deterministic tie-break rules:
    equal distribution of the residual, respectively clamping everything but
    the largest coordinate (lowest index on ties).
    """
    v = np.asarray(v, dtype=np.float64)
    m = v.size
    if xi1 <= 0 or xi1 * math.sqrt(m) >= xi2:
        raise ConfigError("infeasible constraint set: xi1*sqrt(M) >= xi2")

    # fast path keeps projection idempotent bit-for-bit
    if np.all(v >= xi1 - _FLOOR_SLACK) and abs(np.linalg.norm(v) - xi2) <= _NORM_SLACK:
        return v.copy()

    order = np.argsort(v, kind="stable")  # ascending; ties resolve to low index
    for k in range(m):
        clamp = order[:k]
        free = order[k:]
        residual_sq = xi2 * xi2 - k * xi1 * xi1
        fv = v[free]
        norm_sq = float(fv @ fv)
        out = np.empty(m)
        out[clamp] = xi1
        if norm_sq > 0.0 and fv.max() > 0.0:
            t = math.sqrt(residual_sq / norm_sq)
            scaled = t * fv
            if scaled.min() >= xi1 - _FLOOR_SLACK:
                out[free] = scaled
                return out
        elif norm_sq == 0.0:
            # no direction information left: spread the residual evenly
            out[free] = math.sqrt(residual_sq / free.size)
            return out
    # every coordinate nonpositive: keep the largest (ties: lowest index)
    keep = int(np.argmax(v))
    out = np.full(m, xi1)
    out[keep] = math.sqrt(xi2 * xi2 - (m - 1) * xi1 * xi1)
    return out


def eta_update(state: SupervisionState, ra) -> np.ndarray:
    """One projected-gradient step of the supervision weights."""
    ra = np.asarray(ra, dtype=np.float64)
    if ra.shape != state.eta.shape:
        raise ConfigError("relative advantage length must match eta")
    state.eta = project_gamma1(state.eta - state.alpha1 * ra, state.xi1, state.xi2)
    state.check_feasible()
    return state.eta


def project_gamma2(w, xi1: float, xi2: float) -> np.ndarray:
    """Euclidean projection onto the convex set {eta >= xi1, ||eta||_2 <= xi2}.

    If clamping to the floor already satisfies the ball constraint that is the
    projection; otherwise bisect the ball multiplier lam >= 0 in
    eta(lam) = max(w / (1 + lam), xi1), whose norm decreases monotonically.
    """
    w = np.asarray(w, dtype=np.float64)
    m = w.size
    if xi1 <= 0 or xi1 * math.sqrt(m) >= xi2:
        raise ConfigError("infeasible constraint set: xi1*sqrt(M) >= xi2")
    clamped = np.maximum(w, xi1)
    if np.linalg.norm(clamped) <= xi2:
        return clamped
    lo, hi = 0.0, 1.0
    while np.linalg.norm(np.maximum(w / (1.0 + hi), xi1)) > xi2:
        hi *= 2.0
        if hi > 1e18:  # pragma: no cover - unreachable for feasible sets
            raise DomainError("ball projection failed to bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(np.maximum(w / (1.0 + mid), xi1)) > xi2:
            lo = mid
        else:
            hi = mid
    return np.maximum(w / (1.0 + hi), xi1)


def lemma1_verify(r, xi1: float, xi2: float, trials: int = 200_000) -> dict:
    """Check that the convex-relaxation minimizer sits on the sphere.

    Minimizes r^T eta over {eta >= xi1, ||eta|| <= xi2} by projected gradient
    (`trials` caps the iteration count), then reports whether the optimum
    attained the norm bound — the equivalence the regulation update relies on.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0 or np.all(r == 0):
        raise DomainError("advantage vector must be nonzero")
    if abs(r.sum()) > 1e-9 * max(1.0, np.abs(r).max()):
        raise DomainError("advantage vector must sum to zero")
    m = r.size
    eta = symmetric_eta(m, xi1, xi2)
    step = 0.25 * xi2 / np.linalg.norm(r)
    iterations = 0
    for iterations in range(1, int(trials) + 1):
        nxt = project_gamma2(eta - step * r, xi1, xi2)
        moved = np.linalg.norm(nxt - eta)
        eta = nxt
        if moved <= 1e-8 * step:
            break
    norm = float(np.linalg.norm(eta))
    return {
        "eta_star": eta,
        "norm": norm,
        "on_sphere": abs(norm - xi2) < 1e-6,
        "objective": float(r @ eta),
        "iterations": iterations,
    }
