"""Dual-scope counterfactual feature generation.

Two generators produce constrained perturbations of a factual feature
vector: the intra-scope generator climbs the cross-entropy gradient of the
current-task head, the inter-scope generator pulls the feature toward the
projected old-feature approximation. Both enforce a semantic budget by
geometric backtracking on the step scale: halve until the divergence
between softmax-normalized counterfactual and factual drops under epsilon
(at most 30 halvings, then give up and emit the factual flagged
degenerate). Zero-gradient inputs are degenerate immediately.

Two reference perturbers (isotropic random, projected gradient) exist for
baseline comparisons at a matched budget.

All generators are deterministic given their inputs; `perturb_random`
takes an explicit numpy Generator. A module-level counter records how
many samples each scope has generated, which lets the trainer assert its
stage ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

MAX_HALVINGS = 30

# running totals of generated samples per scope, reset by the trainer at
# stage boundaries to assert which generator ran when
CALL_COUNTS = {"intra": 0, "inter": 0, "baseline": 0}


def reset_counters():
    for key in CALL_COUNTS:
        CALL_COUNTS[key] = 0


@dataclass
class CounterfactualSample:
    """One generated counterfactual.

    `delta` is the displacement actually applied, so counterfactual =
    factual + delta always holds; `applied_scale` is the post-backtracking
    step size (alpha for intra, beta for inter, 0 when degenerate).
    `kl_value` is the softmax-KL of the counterfactual from the factual
    under the default constraint metric; alternate metrics report their
    own value in this field. Inter-scope samples carry the projected
    old-feature target they were pulled toward in `reference`.
    """

    scope: str
    factual: np.ndarray
    counterfactual: np.ndarray
    delta: np.ndarray
    applied_scale: float
    kl_value: float
    degenerate: bool
    reference: np.ndarray = None


# ---------------------------------------------------------------------------
# constraint metrics (row-wise, plain numpy)

def _metric_rows(metric, cand, base):
    if metric == "kl":
        return ad.kl_softmax_value(cand, base)
    if metric == "mse":
        return np.mean((cand - base) ** 2, axis=-1)
    if metric == "wasserstein":
        # exact 1-D transport between the coordinate distributions
        return np.mean(np.abs(np.sort(cand, axis=-1) - np.sort(base, axis=-1)),
                       axis=-1)
    raise ConfigurationError(f"unknown constraint metric {metric!r}")


def intra_directions(feats, labels, w, b=None):
    """Exact gradient of the cross-entropy of w·c (+b) at each feature row.

    Closed form w.T @ (softmax - onehot); identical to running the graph
    engine, which the tests assert.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    w = np.asarray(w, dtype=np.float64)
    logits = feats @ w.T + (0.0 if b is None else np.asarray(b, dtype=np.float64))
    p = ad.softmax(logits)
    p[np.arange(len(feats)), labels] -= 1.0
    return p @ w


def _backtrack_batch(feats, directions, init_scale, epsilon, metric="kl"):
    """Vectorized scale halving; returns (scales, degenerate mask).

    Rows whose direction vanishes, or that stay infeasible after
    MAX_HALVINGS halvings, come back with scale 0 and degenerate=True.
    """
    n = len(feats)
    norms = np.linalg.norm(directions, axis=-1)
    degenerate = norms == 0.0
    chosen = np.zeros(n)
    scales = np.full(n, float(init_scale))
    done = degenerate.copy()
    for _ in range(MAX_HALVINGS + 1):
        if done.all():
            break
        cand = feats + scales[:, None] * directions
        feasible = _metric_rows(metric, cand, feats) <= epsilon
        newly = ~done & feasible
        chosen[newly] = scales[newly]
        done |= newly
        scales = np.where(done, scales, scales / 2.0)
    degenerate = degenerate | ~done
    return chosen, degenerate


def generate_intra_batch(feats, labels, w, b=None, alpha=1.0, epsilon=0.05,
                         metric="kl"):
    """Ascend the head loss under the budget, whole batch at once.

    Returns (counterfactuals, metric values, applied scales, degenerate
    mask). Degenerate rows carry the factual feature and metric value 0.
    """
    if alpha <= 0 or epsilon <= 0:
        raise ConfigurationError("alpha and epsilon must be positive")
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    directions = intra_directions(feats, labels, w, b)
    scales, degenerate = _backtrack_batch(feats, directions, alpha, epsilon, metric)
    cfs = feats + scales[:, None] * directions
    vals = np.where(degenerate, 0.0, _metric_rows(metric, cfs, feats))
    CALL_COUNTS["intra"] += len(feats)
    return cfs, vals, scales, degenerate


def generate_inter_batch(feats, projected, beta=0.03, epsilon=0.05, metric="kl"):
    """Pull each feature toward its projected old-feature proxy.

    The displacement is beta_eff times the exact gradient of the squared
    distance, so the closed form c_bar = (1 - 2 beta_eff) c + 2 beta_eff
    c_tilde holds to machine precision.
    """
    if beta <= 0 or epsilon <= 0:
        raise ConfigurationError("beta and epsilon must be positive")
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    projected = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    if feats.shape != projected.shape:
        raise ConfigurationError(
            f"factual {feats.shape} and projected {projected.shape} differ")
    directions = 2.0 * (projected - feats)
    scales, degenerate = _backtrack_batch(feats, directions, beta, epsilon, metric)
    cfs = feats + scales[:, None] * directions
    vals = np.where(degenerate, 0.0, _metric_rows(metric, cfs, feats))
    CALL_COUNTS["inter"] += len(feats)
    return cfs, vals, scales, degenerate


def _single(scope, feats, cfs, vals, scales, degenerate, reference=None):
    return CounterfactualSample(
        scope=scope,
        factual=feats[0].copy(),
        counterfactual=cfs[0].copy(),
        delta=cfs[0] - feats[0],
        applied_scale=float(scales[0]),
        kl_value=float(vals[0]),
        degenerate=bool(degenerate[0]),
        reference=reference,
    )


def gen_intra(factual, label, w_intra, alpha=1.0, epsilon=0.05, b=None,
              metric="kl") -> CounterfactualSample:
    """Single-sample intra-scope generation; see generate_intra_batch."""
    feats = np.atleast_2d(np.asarray(factual, dtype=np.float64))
    out = generate_intra_batch(feats, [label], w_intra, b=b, alpha=alpha,
                               epsilon=epsilon, metric=metric)
    return _single("intra", feats, *out)


def gen_inter(factual, projected, beta=0.03, epsilon=0.05,
              metric="kl") -> CounterfactualSample:
    """Single-sample inter-scope generation; see generate_inter_batch."""
    feats = np.atleast_2d(np.asarray(factual, dtype=np.float64))
    proj = np.atleast_2d(np.asarray(projected, dtype=np.float64))
    out = generate_inter_batch(feats, proj, beta=beta, epsilon=epsilon,
                               metric=metric)
    return _single("inter", feats, *out, reference=proj[0].copy())


def perturb_random(factual, budget_kl, rng) -> CounterfactualSample:
    """Isotropic Gaussian direction at unit initial scale, backtracked
    under the budget; the reference point for flip-rate comparisons."""
    if budget_kl <= 0:
        raise ConfigurationError("budget_kl must be positive")
    feats = np.atleast_2d(np.asarray(factual, dtype=np.float64))
    direction = rng.standard_normal(feats.shape)
    scales, degenerate = _backtrack_batch(feats, direction, 1.0, budget_kl)
    cfs = feats + scales[:, None] * direction
    vals = np.where(degenerate, 0.0, _metric_rows("kl", cfs, feats))
    CALL_COUNTS["baseline"] += len(feats)
    return _single("intra", feats, cfs, vals, scales, degenerate)


def perturb_pgd(factual, label, w_intra, steps=10, step_size=1.0,
                budget_kl=0.05, b=None) -> CounterfactualSample:
    """Iterated gradient ascent with projection back onto the budget ball.

    The ball has no closed-form projection, so each violating iterate is
    shrunk toward the factual point by bisection (10 steps) on the
    interpolation coefficient; the feasible end of the bracket is kept,
    which keeps every emitted iterate strictly inside the budget.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if budget_kl <= 0:
        raise ConfigurationError("budget_kl must be positive")
    feats = np.atleast_2d(np.asarray(factual, dtype=np.float64))
    cur = feats.copy()
    moved = False
    for _ in range(steps):
        g = intra_directions(cur, [label], w_intra, b)
        if np.linalg.norm(g) == 0.0:
            break
        cur = cur + step_size * g
        moved = True
        if _metric_rows("kl", cur, feats)[0] > budget_kl:
            lo, hi = 0.0, 1.0
            for _ in range(10):
                mid = (lo + hi) / 2.0
                point = feats + mid * (cur - feats)
                if _metric_rows("kl", point, feats)[0] <= budget_kl:
                    lo = mid
                else:
                    hi = mid
            cur = feats + lo * (cur - feats)
    degenerate = not moved or bool(np.all(cur == feats))
    kl = 0.0 if degenerate else float(_metric_rows("kl", cur, feats)[0])
    CALL_COUNTS["baseline"] += 1
    return CounterfactualSample(
        scope="intra",
        factual=feats[0].copy(),
        counterfactual=cur[0].copy(),
        delta=cur[0] - feats[0],
        applied_scale=0.0 if degenerate else 1.0,
        kl_value=kl,
        degenerate=degenerate,
    )
