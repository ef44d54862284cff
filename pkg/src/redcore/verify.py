"""Oracle-backed verification suites.

Each suite pits a production code path against an independent reference:

- gradients: analytic backward pass vs central finite differences, sampled
  per parameter tensor on randomly drawn small models and batches;
- projection: the active-set sphere projection vs a brute grid search over
  the feasible set (coarse-to-fine for 3 modalities, arc grid for 2);
- lemma1: the convex-relaxation solve must land on the norm boundary;
- ra: algebraic identities of the relative-advantage map;
- regulation: the argmax-advantage modality never gains supervision weight.

The suites return plain records so both the CLI `verify` subcommand and the
test suite can consume them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import total_loss, vib_loss
from .model import ArchConfig, forward_all, init_params
from .regulator import (SupervisionState, eta_update, lemma1_verify,
                        project_gamma1, relative_advantage)

XI1_DEFAULT = 0.015
XI2_DEFAULT = 0.15


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

def model_gradient_check(params, batch, eps, loss_builder, rng,
                         coords_per_tensor: int = 4, h: float = 2e-5,
                         tensors_per_check: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to `coords_per_tensor` coordinates per parameter tensor
    (optionally on a random subset of tensors); relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8). The loss builder must
    define a function of the parameters alone — in particular it must pin
    any stop-gradient targets to constants, since finite differences of a
    full re-evaluation would wrongly differentiate through them.
    """
    outputs = forward_all(params, batch, eps)
    ad.backward(loss_builder(outputs))
    names = list(params.tensors)
    if tensors_per_check is not None and tensors_per_check < len(names):
        picked = rng.choice(len(names), size=tensors_per_check, replace=False)
        names = [names[i] for i in picked]
    worst = 0.0
    for name in names:
        arr = params.tensors[name]
        analytic = outputs.param_nodes[name].grad.ravel()
        k = min(coords_per_tensor, arr.size)
        for i in rng.choice(arr.size, size=k, replace=False):
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            f_plus = float(loss_builder(forward_all(params, batch, eps)).value)
            arr.flat[i] = orig - h
            f_minus = float(loss_builder(forward_all(params, batch, eps)).value)
            arr.flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def random_instance(seed: int):
    """A small random model + batch + noise + loss weights for grad checks."""
    rng = np.random.default_rng([seed, 30])
    m_count = 3
    d = int(rng.integers(2, 9))
    dims = tuple(int(x) for x in rng.integers(3, 7, size=m_count))
    arch = ArchConfig(rep_dim=d, senc_hidden=int(rng.integers(4, 9)),
                      xenc_bottlenecks=tuple(int(x) for x in rng.integers(3, 7, size=2)))
    n_classes = int(rng.integers(2, 5))
    batch_size = int(rng.integers(2, 9))
    params = init_params(arch, dims, n_classes, seed=int(rng.integers(0, 2**31)))

    feats = [rng.normal(scale=1.0, size=(batch_size, dm)) for dm in dims]
    labels = rng.integers(0, n_classes, size=batch_size)
    presence = (rng.random((batch_size, m_count)) > 0.3).astype(np.int64)
    presence[presence.sum(axis=1) == 0, 0] = 1
    for m in range(m_count):
        feats[m] = feats[m] * presence[:, m][:, None]
    eps = [rng.normal(size=(batch_size, d)) for _ in range(m_count)]
    eta = rng.uniform(0.01, 0.2, size=m_count)
    gamma = float(rng.choice([0.008, 0.1, 0.7]))
    return params, (feats, labels, presence), eps, eta, gamma


def suite_gradients(trials: int = 50, seed: int = 0) -> SuiteResult:
    worst = 0.0
    for t in range(trials):
        params, batch, eps, eta, gamma = random_instance(seed * 1000 + t)
        rng = np.random.default_rng([seed, 31, t])
        labels, presence = batch[1], batch[2]
        # freeze the stop-gradient imputation targets at their baseline values
        baseline = forward_all(params, batch, eps)
        targets = [zb.value.copy() for zb in baseline.z_bar]
        err_vib = model_gradient_check(
            params, batch, eps,
            lambda out: vib_loss(out, labels, presence, gamma),
            rng, coords_per_tensor=3, tensors_per_check=16)
        err_total = model_gradient_check(
            params, batch, eps,
            lambda out: total_loss(out, labels, presence, gamma, eta,
                                   mse_targets=targets)[0],
            rng, coords_per_tensor=3, tensors_per_check=16)
        worst = max(worst, err_vib, err_total)
    return SuiteResult("gradients", bool(worst < 1e-4),
                       f"max relative error {worst:.3e} over {trials} instances (bound 1e-4)")


# ---------------------------------------------------------------------------
# projection suite
# ---------------------------------------------------------------------------

def _feasible_arc_grid(xi1: float, xi2: float, res: float) -> np.ndarray:
    """Grid over the feasible circle arc for 2 modalities (spacing <= res)."""
    ratio = xi1 / xi2
    lo, hi = math.asin(ratio), math.acos(ratio)
    n = max(2, int(math.ceil((hi - lo) * xi2 / res)) + 1)
    phi = np.linspace(lo, hi, n)
    return xi2 * np.stack([np.cos(phi), np.sin(phi)], axis=1)


def _sphere_patch(theta, phi, xi2):
    t, p = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)],
                   axis=-1).reshape(-1, 3)
    return xi2 * pts


def grid_nearest_feasible(v: np.ndarray, xi1: float, xi2: float,
                          res: float = 1e-4) -> np.ndarray:
    """Brute grid search for the feasible point nearest to v.

    Nearest on the sphere means maximal dot product. For 3 modalities a
    coarse angular grid is refined around the best few cells down to `res`
    spacing; for 2 modalities the arc is gridded directly.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 2:
        pts = _feasible_arc_grid(xi1, xi2, res)
        return pts[np.argmax(pts @ v)]
    if v.size != 3:
        raise ValueError("grid oracle supports 2 or 3 modalities")

    def best_of(pts):
        ok = np.all(pts >= xi1 - 1e-12, axis=1)
        pts = pts[ok]
        return pts[np.argmax(pts @ v)] if pts.size else None

    coarse_step = 0.02
    angles = np.arange(0.0, math.pi / 2 + coarse_step, coarse_step)
    pts = _sphere_patch(angles, angles, xi2)
    ok = np.all(pts >= xi1 - 1e-12, axis=1)
    pts = pts[ok]
    scores = pts @ v
    top = pts[np.argsort(scores)[-12:]]

    fine_step = res / xi2
    best = None
    for center in top:
        theta0 = math.acos(np.clip(center[2] / xi2, -1, 1))
        phi0 = math.atan2(center[1], center[0])
        window = 3.0 * coarse_step
        thetas = np.arange(theta0 - window, theta0 + window, fine_step)
        phis = np.arange(phi0 - window, phi0 + window, fine_step)
        cand = best_of(_sphere_patch(thetas, phis, xi2))
        if cand is not None and (best is None or cand @ v > best @ v):
            best = cand
    return best


def random_projection_input(rng: np.random.Generator, m: int) -> np.ndarray:
    scale = float(rng.choice([0.02, 0.1, 0.3, 1.5]))
    v = rng.normal(scale=scale, size=m)
    if rng.random() < 0.3:
        v = np.abs(v)
    if rng.random() < 0.15:
        v = -np.abs(v)
    return v


def suite_projection(trials: int = 200, seed: int = 0,
                     xi1: float = XI1_DEFAULT, xi2: float = XI2_DEFAULT) -> SuiteResult:
    rng = np.random.default_rng([seed, 40])
    worst_gap = -np.inf
    for t in range(trials):
        m = 2 if t % 2 == 0 else 3
        v = random_projection_input(rng, m)
        proj = project_gamma1(v, xi1, xi2)
        if np.any(proj < xi1 - 1e-12) or abs(np.linalg.norm(proj) - xi2) > 1e-10:
            return SuiteResult("projection", False, f"infeasible output for v={v}")
        again = project_gamma1(proj, xi1, xi2)
        if not np.array_equal(proj, again):
            return SuiteResult("projection", False, f"projection not idempotent for v={v}")
        oracle = grid_nearest_feasible(v, xi1, xi2)
        gap = np.linalg.norm(proj - v) - np.linalg.norm(oracle - v)
        worst_gap = max(worst_gap, gap)
        if gap > 2e-4:
            return SuiteResult("projection", False,
                               f"suboptimal by {gap:.2e} vs grid oracle for v={v}")
    return SuiteResult("projection", True,
                       f"worst distance gap vs grid oracle {worst_gap:.2e} over "
                       f"{trials} points (bound 2e-4)")


# ---------------------------------------------------------------------------
# lemma 1, relative advantage, regulation direction
# ---------------------------------------------------------------------------

def random_zero_sum(rng: np.random.Generator, m: int) -> np.ndarray:
    r = rng.normal(size=m)
    r -= r.mean()
    while np.all(r == 0):  # pragma: no cover - essentially impossible
        r = rng.normal(size=m)
        r -= r.mean()
    return r


def suite_lemma1(trials: int = 100, seed: int = 0,
                 xi1: float = XI1_DEFAULT, xi2: float = XI2_DEFAULT) -> SuiteResult:
    rng = np.random.default_rng([seed, 41])
    sizes = [2, 3, 5]
    worst = 0.0
    for t in range(trials):
        r = random_zero_sum(rng, sizes[t % len(sizes)])
        report = lemma1_verify(r, xi1, xi2)
        worst = max(worst, abs(report["norm"] - xi2))
        if not report["on_sphere"]:
            return SuiteResult("lemma1", False,
                               f"relaxation optimum off the sphere for r={r}: "
                               f"norm={report['norm']:.8f}")
    return SuiteResult("lemma1", True,
                       f"max |norm - xi2| = {worst:.2e} over {trials} vectors (bound 1e-6)")


def suite_ra(trials: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, 42])
    for _ in range(trials):
        losses = rng.uniform(0.01, 10.0, size=int(rng.integers(2, 6)))
        r = relative_advantage(losses)
        if abs(r.sum()) > 1e-12:
            return SuiteResult("ra", False, f"sum {r.sum():.2e} for losses={losses}")
        c = float(rng.uniform(0.1, 100.0))
        if np.max(np.abs(relative_advantage(c * losses) - r)) > 1e-12:
            return SuiteResult("ra", False, f"not scale-free for losses={losses}")
    return SuiteResult("ra", True, f"sum-zero and scale invariance hold over {trials} draws")


def random_state(rng: np.random.Generator, xi1: float = XI1_DEFAULT,
                 xi2: float = XI2_DEFAULT) -> SupervisionState:
    m = int(rng.integers(2, 6))
    eta = project_gamma1(rng.uniform(0.0, 2.0 * xi2, size=m), xi1, xi2)
    mal = list(rng.uniform(0.05, 5.0, size=m))
    return SupervisionState(eta=eta, mal=mal, alpha1=float(rng.uniform(0.01, 0.5)),
                            xi1=xi1, xi2=xi2)


def suite_regulation(trials: int = 1000, seed: int = 0, update_fn=eta_update) -> SuiteResult:
    rng = np.random.default_rng([seed, 43])
    checked = 0
    for _ in range(trials):
        state = random_state(rng)
        ra = relative_advantage(state.mal_vector())
        if np.all(ra == 0):
            continue
        j = int(np.argmax(ra))
        before = state.eta[j]
        update_fn(state, ra)
        if before > state.xi1 + 1e-9:
            checked += 1
            if state.eta[j] > before + 1e-12:
                return SuiteResult("regulation", False,
                                   f"argmax-advantage eta rose {before} -> {state.eta[j]}")
    return SuiteResult("regulation", True,
                       f"argmax-advantage weight never rose ({checked} unclamped cases)")


ALL_SUITES = {
    "gradients": suite_gradients,
    "projection": suite_projection,
    "lemma1": suite_lemma1,
    "ra": suite_ra,
    "regulation": suite_regulation,
}


def run_suites(names=None, trials: int | None = None, seed: int = 0) -> list[SuiteResult]:
    results = []
    for name in (names or ALL_SUITES):
        fn = ALL_SUITES[name]
        kwargs = {"seed": seed}
        if trials is not None:
            kwargs["trials"] = trials
        results.append(fn(**kwargs))
    return results
