"""Evaluation instruments for incremental runs.

Incremental accuracy (last and average), old-to-new leakage grouped by
prototype overlap, linear CKA between activation sets, saliency-guided
masking curves over annotated causal dimensions, counterfactual quality
(flip rate, latent divergence, historical similarity), and an exact 1-D
Wasserstein distance for distributional consistency checks.

Everything here is a pure function over model snapshots and arrays; nothing
mutates the model.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, InputError, UsageError

OVERLAP_GROUPS = ("low", "medium", "high")


def _check_unit(name, value, slack=1e-9):
    if not -slack <= value <= 1.0 + slack:
        raise InputError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class EvalRecord:
    """One evaluation snapshot taken after a task.

    Accuracy fields are mandatory; the diagnostic fields are None when the
    stage they need has not happened (no old classes yet, no counterfactual
    batch requested, and so on).
    """

    task_index: int
    per_task_acc: list
    last_acc: float
    avg_acc: float
    old_new_errors: Optional[dict] = None
    cka_by_layer: Optional[list] = None
    masking_curve: Optional[list] = None
    cf_quality: Optional[tuple] = None

    def __post_init__(self):
        for i, acc in enumerate(self.per_task_acc):
            _check_unit(f"per_task_acc[{i}]", acc)
        _check_unit("last_acc", self.last_acc)
        _check_unit("avg_acc", self.avg_acc)
        if self.old_new_errors is not None:
            for group, rate in self.old_new_errors.items():
                if not np.isnan(rate):
                    _check_unit(f"old_new_errors[{group}]", rate)
        if self.cka_by_layer is not None:
            for layer, value in self.cka_by_layer:
                _check_unit(f"cka_by_layer[{layer}]", value)
        if self.masking_curve is not None:
            ks = [k for k, _ in self.masking_curve]
            if any(b <= a for a, b in zip(ks, ks[1:])):
                raise InputError(f"masking_curve ks must strictly increase: {ks}")
            for k, acc in self.masking_curve:
                _check_unit(f"masking_curve[k={k}]", acc)
        if self.cf_quality is not None:
            pfr, lkld, hss = self.cf_quality
            _check_unit("cf_quality.pfr", pfr)
            if lkld < 0:
                raise InputError(f"cf_quality.lkld must be >= 0, got {lkld}")
            if hss is not None and not -1.0 - 1e-9 <= hss <= 1.0 + 1e-9:
                raise InputError(f"cf_quality.hss must lie in [-1, 1], got {hss}")

    def to_json_dict(self):
        return {
            "task_index": int(self.task_index),
            "per_task_acc": [float(a) for a in self.per_task_acc],
            "last_acc": float(self.last_acc),
            "avg_acc": float(self.avg_acc),
            "old_new_errors": (None if self.old_new_errors is None else
                               {k: float(v) for k, v in self.old_new_errors.items()}),
            "cka_by_layer": (None if self.cka_by_layer is None else
                             [[int(l), float(v)] for l, v in self.cka_by_layer]),
            "masking_curve": (None if self.masking_curve is None else
                              [[int(k), float(a)] for k, a in self.masking_curve]),
            "cf_quality": (None if self.cf_quality is None else
                           [float(self.cf_quality[0]), float(self.cf_quality[1]),
                            None if self.cf_quality[2] is None
                            else float(self.cf_quality[2])]),
        }

    @classmethod
    def from_json_dict(cls, d):
        cf = d.get("cf_quality")
        return cls(
            task_index=d["task_index"],
            per_task_acc=list(d["per_task_acc"]),
            last_acc=d["last_acc"],
            avg_acc=d["avg_acc"],
            old_new_errors=d.get("old_new_errors"),
            cka_by_layer=(None if d.get("cka_by_layer") is None else
                          [(l, v) for l, v in d["cka_by_layer"]]),
            masking_curve=(None if d.get("masking_curve") is None else
                           [(k, a) for k, a in d["masking_curve"]]),
            cf_quality=None if cf is None else (cf[0], cf[1], cf[2]),
        )


# ---------------------------------------------------------------------------
# incremental accuracy

def incremental_accuracy(history):
    """(last, avg) over the per-stage accuracy history.

    history[i] is the accuracy over all classes seen so far, measured after
    stage i. last is the final entry, avg the mean across stages.
    """
    history = [float(h) for h in history]
    if not history:
        raise InputError("accuracy history is empty")
    for h in history:
        _check_unit("stage accuracy", h)
    return history[-1], float(np.mean(history))


# ---------------------------------------------------------------------------
# old-to-new leakage by overlap group

def feature_prototypes(model, labeled_sets):
    """Class-mean concatenated features over one or more (x, y) sets."""
    sums, counts = {}, {}
    for x, y in labeled_sets:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        feats = model.concat_features_np(x)
        for c in np.unique(y):
            block = feats[y == c].sum(axis=0)
            sums[int(c)] = sums.get(int(c), 0.0) + block
            counts[int(c)] = counts.get(int(c), 0) + int(np.sum(y == c))
    return {c: sums[c] / counts[c] for c in sums}


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def old_new_error(model, old_test_sets, new_class_range, prototypes):
    """Per-overlap-group rate of old samples predicted as new classes.

    Each old class's overlap is its maximum prototype cosine against the new
    classes; old classes are split into low/medium/high groups at the
    tertiles of that overlap distribution, and each group's rate is the
    fraction of its test samples whose argmax prediction falls inside
    new_class_range. Groups left empty by ties come back as NaN.
    """
    if getattr(model, "task_count", 0) < 2:
        raise UsageError("old-to-new error needs at least two tasks")
    if not old_test_sets:
        raise UsageError("no old test sets supplied")
    lo, hi = new_class_range
    if not lo < hi:
        raise InputError(f"empty new-class range [{lo}, {hi})")

    xs = [np.asarray(x, dtype=np.float64) for x, _ in old_test_sets]
    ys = [np.asarray(y, dtype=np.int64) for _, y in old_test_sets]
    old_classes = sorted({int(c) for y in ys for c in np.unique(y)})
    new_classes = list(range(lo, hi))
    for c in old_classes + new_classes:
        if c not in prototypes:
            raise InputError(f"missing prototype for class {c}")

    overlap = {c: max(_cosine(prototypes[c], prototypes[n]) for n in new_classes)
               for c in old_classes}
    values = np.array([overlap[c] for c in old_classes])
    q1, q2 = np.quantile(values, [1.0 / 3.0, 2.0 / 3.0])
    group_of = {}
    for c in old_classes:
        if overlap[c] <= q1:
            group_of[c] = "low"
        elif overlap[c] <= q2:
            group_of[c] = "medium"
        else:
            group_of[c] = "high"

    hits = {g: 0 for g in OVERLAP_GROUPS}
    totals = {g: 0 for g in OVERLAP_GROUPS}
    for x, y in zip(xs, ys):
        pred = np.argmax(model.forward_concat_np(x), axis=1)
        into_new = (pred >= lo) & (pred < hi)
        for c in np.unique(y):
            g = group_of[int(c)]
            mask = y == c
            hits[g] += int(np.sum(into_new[mask]))
            totals[g] += int(np.sum(mask))
    return {g: (hits[g] / totals[g] if totals[g] else float("nan"))
            for g in OVERLAP_GROUPS}


# ---------------------------------------------------------------------------
# linear CKA

def linear_cka(x, y):
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered inputs.

    Symmetric, bounded by [0, 1], invariant to orthogonal maps and isotropic
    scaling of either side. Zero-variance input is defined as similarity 0
    (with a warning) rather than an error so sweeps over dead layers do not
    abort.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise InputError(f"activations must be 2-D, got {x.shape} and {y.shape}")
    if len(x) != len(y):
        raise InputError(f"row counts differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise InputError("need at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    denom_x = np.linalg.norm(xc.T @ xc)
    denom_y = np.linalg.norm(yc.T @ yc)
    if denom_x == 0.0 or denom_y == 0.0:
        warnings.warn("zero-variance activations: linear CKA defined as 0")
        return 0.0
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (denom_x * denom_y))


def cka_by_layer(model, x, reference_model):
    """Linear CKA per extractor layer between two models on shared inputs.

    Returns [(layer_index, value)] where layers run through each extractor's
    hidden activations in order. Both models must have the same extractor
    layout.
    """
    acts_a = model_layer_activations(model, x)
    acts_b = model_layer_activations(reference_model, x)
    if len(acts_a) != len(acts_b):
        raise InputError("models expose different layer counts")
    return [(i, linear_cka(a, b)) for i, (a, b) in enumerate(zip(acts_a, acts_b))]


def extractor_cka(ext_a, ext_b, x):
    """Layerwise linear CKA between two extractors on shared inputs.

    Pairs the i-th activation of each extractor; both must have the same
    depth. This is the shallow-vs-deep comparison between the feature
    stacks of consecutive tasks.
    """
    acts_a = ext_a.activations_np(np.asarray(x, dtype=np.float64))
    acts_b = ext_b.activations_np(np.asarray(x, dtype=np.float64))
    if len(acts_a) != len(acts_b):
        raise InputError(
            f"extractor depths differ: {len(acts_a)} vs {len(acts_b)}")
    return [(i, linear_cka(a, b)) for i, (a, b) in enumerate(zip(acts_a, acts_b))]


def model_layer_activations(model, x):
    """Every extractor's per-layer activations, flattened across extractors."""
    x = np.asarray(x, dtype=np.float64)
    acts = []
    for ext in model.extractors:
        acts.extend(ext.activations_np(x))
    return acts


# ---------------------------------------------------------------------------
# saliency masking

def input_saliency(model, x):
    """|d logit_pred / d x| per sample and input dimension."""
    x = np.asarray(x, dtype=np.float64)
    node = ad.leaf(x)
    logits = model.full_graph_logits(node)
    preds = np.argmax(logits.values, axis=1)
    score = ad.sum_picked(logits, preds)
    ad.backward(score)
    return np.abs(node.grad.copy())


def masking_curve(model, x, y, dim_tags, ks):
    """Accuracy after zeroing each sample's top-k salient causal dims.

    Causal dims are those tagged causal or minimal_causal; they are ranked
    per sample by input-gradient magnitude. Returns ([(k, acc)], avg_drop)
    where avg_drop is the mean decrement between consecutive ks.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    causal_cols = np.array([i for i, t in enumerate(dim_tags)
                            if t in ("causal", "minimal_causal")], dtype=np.int64)
    if len(causal_cols) == 0:
        raise ConfigurationError("no dimensions are annotated causal")
    ks = [int(k) for k in ks]
    if any(b <= a for a, b in zip(ks, ks[1:])) or not ks:
        raise InputError(f"ks must be non-empty and strictly increasing: {ks}")
    if ks[0] < 0 or ks[-1] > len(causal_cols):
        raise ConfigurationError(
            f"k up to {ks[-1]} exceeds the {len(causal_cols)} annotated dims")

    sal = input_saliency(model, x)[:, causal_cols]
    order = np.argsort(-sal, axis=1)  # per-sample causal cols, most salient first
    curve = []
    for k in ks:
        masked = x.copy()
        if k:
            rows = np.repeat(np.arange(len(x)), k)
            cols = causal_cols[order[:, :k]].ravel()
            masked[rows, cols] = 0.0
        pred = np.argmax(model.forward_concat_np(masked), axis=1)
        curve.append((k, float(np.mean(pred == y))))
    accs = [a for _, a in curve]
    avg_drop = float(np.mean(-np.diff(accs))) if len(accs) > 1 else 0.0
    return curve, avg_drop


# ---------------------------------------------------------------------------
# counterfactual quality

def counterfactual_quality(samples, model, require_hss=False):
    """(pfr, lkld, hss) over a list of generated counterfactual samples.

    All samples live in the current feature space, so flips are read from
    the current-task head: PFR is the fraction whose argmax changed between
    factual and counterfactual. LKLD is the mean constraint-metric value.
    HSS is the mean cosine between inter-scope counterfactuals and their
    attached projected references; it is None when no inter samples are
    present unless require_hss, which then raises.
    """
    samples = list(samples)
    if not samples:
        raise InputError("no counterfactual samples supplied")
    w = model.heads["intra_w"].values
    b = model.heads["intra_b"].values
    factual = np.stack([s.factual for s in samples])
    counter = np.stack([s.counterfactual for s in samples])
    if factual.shape[1] != w.shape[1]:
        raise InputError(
            f"sample dim {factual.shape[1]} does not match head dim {w.shape[1]}")
    pred_f = np.argmax(factual @ w.T + b, axis=1)
    pred_c = np.argmax(counter @ w.T + b, axis=1)
    pfr = float(np.mean(pred_f != pred_c))
    lkld = float(np.mean([s.kl_value for s in samples]))
    inter = [s for s in samples if s.scope == "inter" and s.reference is not None]
    if not inter:
        if require_hss:
            raise UsageError("hss requested but no inter-scope samples present")
        hss = None
    else:
        hss = float(np.mean([_cosine(s.counterfactual, s.reference)
                             for s in inter]))
    return pfr, lkld, hss


# ---------------------------------------------------------------------------
# 1-D Wasserstein

def _w1_single(u, v):
    # exact W1 between empirical distributions: integrate |F_u - F_v|
    u = np.sort(u)
    v = np.sort(v)
    grid = np.concatenate([u, v])
    grid.sort(kind="mergesort")
    deltas = np.diff(grid)
    if not len(deltas):
        return 0.0
    cdf_u = np.searchsorted(u, grid[:-1], side="right") / len(u)
    cdf_v = np.searchsorted(v, grid[:-1], side="right") / len(v)
    return float(np.sum(np.abs(cdf_u - cdf_v) * deltas))


def wasserstein_1d(a, b):
    """Exact 1-D W1 distance, averaged over feature dimensions.

    1-D inputs are treated as a single dimension; 2-D inputs are sliced per
    column and the per-column distances averaged. Sample counts may differ.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise InputError("both sample sets must be non-empty")
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError(f"incompatible shapes {a.shape} vs {b.shape}")
    return float(np.mean([_w1_single(a[:, j], b[:, j])
                          for j in range(a.shape[1])]))
