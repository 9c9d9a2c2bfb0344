"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: every operation returns a `Tensor` node holding
values, an accumulated gradient buffer, and a backward closure. Nodes are
either 1-D (a single vector / logit row) or 2-D (a batch, one sample per
row); reductions always produce a scalar (size-1) node so `backward` has a
well-defined root. All arithmetic is float64.

Loss-like operations (`softmax_cross_entropy`, `kl_softmax`,
`neglog_complement_prob`) accept both the single-sample form and a batched
form with per-row labels, reduced by mean or sum. Log-sum-exp is always
computed with max subtraction.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, InputError, UsageError


class Tensor:
    """A node in the computation graph.

    `grad` always has the same shape as `values` and accumulates across
    backward passes until `zero_grad` resets it. Leaves carry `op == "leaf"`
    and may be flagged `frozen`, in which case optimizers must not update
    them.
    """

    __slots__ = ("values", "grad", "parents", "op", "_backward_fn", "frozen",
                 "_visited")

    def __init__(self, values, parents=(), op="leaf", backward_fn=None,
                 frozen=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.parents = tuple(parents)
        self.op = op
        self._backward_fn = backward_fn
        self.frozen = frozen
        self._visited = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.values.shape})"


def leaf(values, frozen=False):
    return Tensor(values, op="leaf", frozen=frozen)


def constant(values):
    """A leaf that participates in forward values only; grad is still
    allocated but nothing downstream reads it."""
    return Tensor(values, op="const")


# ---------------------------------------------------------------------------
# numerically stable primitives (plain numpy, shared by forward and backward)

def log_softmax(x):
    """Row-wise (or vector) log softmax with max subtraction."""
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def softmax(x):
    return np.exp(log_softmax(x))


# ---------------------------------------------------------------------------
# graph operations

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map `x @ w.T + b`.

    `w` is [n_out, n_in]; `x` is a vector [n_in] or a batch [n, n_in].
    Backward produces exact gradients for x, w and b.
    """
    if w.ndim != 2:
        raise ConfigurationError(f"linear: weight must be 2-D, got {w.shape}")
    n_out, n_in = w.shape
    if b.shape != (n_out,):
        raise ConfigurationError(
            f"linear: bias shape {b.shape} does not match weight rows {n_out}")
    if x.shape[-1] != n_in:
        raise ConfigurationError(
            f"linear: input dim {x.shape[-1]} does not match weight cols {n_in}")
    out_vals = x.values @ w.values.T + b.values
    out = Tensor(out_vals, parents=(x, w, b), op="linear")

    def _backward():
        go = out.grad
        if x.ndim == 1:
            x.grad += go @ w.values
            w.grad += np.outer(go, x.values)
            b.grad += go
        else:
            x.grad += go @ w.values
            w.grad += go.T @ x.values
            b.grad += go.sum(axis=0)

    out._backward_fn = _backward
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    mask = x.values > 0.0
    out = Tensor(np.where(mask, x.values, 0.0), parents=(x,), op="relu")

    def _backward():
        x.grad += out.grad * mask

    out._backward_fn = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values, parents=(a, b), op="add")

    def _backward():
        a.grad += out.grad
        b.grad += out.grad

    out._backward_fn = _backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.values - b.values, parents=(a, b), op="sub")

    def _backward():
        a.grad += out.grad
        b.grad -= out.grad

    out._backward_fn = _backward
    return out


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = Tensor(a.values * k, parents=(a,), op="scale")

    def _backward():
        a.grad += out.grad * k

    out._backward_fn = _backward
    return out


def add_scalars(terms) -> Tensor:
    """Sum of scalar nodes; the usual way a composite loss is assembled."""
    terms = list(terms)
    if not terms:
        raise UsageError("add_scalars: empty term list")
    for t in terms:
        if t.size != 1:
            raise UsageError("add_scalars: all terms must be scalars")
    vals = sum(float(t.values.reshape(())) for t in terms)
    out = Tensor(np.asarray(vals), parents=tuple(terms), op="add_scalars")

    def _backward():
        for t in terms:
            t.grad += out.grad.reshape(t.shape) if t.shape else out.grad

    out._backward_fn = _backward
    return out


def concat(parts) -> Tensor:
    """Concatenate vectors (axis 0) or batches (axis 1, same row count)."""
    parts = list(parts)
    if not parts:
        raise UsageError("concat: empty part list")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise ConfigurationError("concat: mixed ranks")
    axis = 0 if ndim == 1 else 1
    if ndim == 2 and any(p.shape[0] != parts[0].shape[0] for p in parts):
        raise ConfigurationError("concat: row counts differ")
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis),
                 parents=tuple(parts), op="concat")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def _backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if ndim == 1:
                p.grad += out.grad[lo:hi]
            else:
                p.grad += out.grad[:, lo:hi]

    out._backward_fn = _backward
    return out


def take_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous row slice a[lo:hi] of a batched node.

    Pass-through gradient into the sliced rows; the remaining rows of the
    parent receive nothing. Used to address the current-task block of a
    mixed current+rehearsal batch without a second forward pass.
    """
    if a.ndim != 2:
        raise UsageError(f"take_rows: expects a 2-D node, got shape {a.shape}")
    lo, hi = int(lo), int(hi)
    if not 0 <= lo <= hi <= a.shape[0]:
        raise InputError(f"take_rows: range [{lo}, {hi}) outside {a.shape[0]} rows")
    out = Tensor(a.values[lo:hi].copy(), parents=(a,), op="rows")

    def _backward():
        a.grad[lo:hi] += out.grad

    out._backward_fn = _backward
    return out


def sum_squares(a: Tensor) -> Tensor:
    """Scalar sum of all squared entries."""
    out = Tensor(np.asarray(np.sum(a.values * a.values)), parents=(a,),
                 op="sum_squares")

    def _backward():
        a.grad += 2.0 * a.values * float(out.grad)

    out._backward_fn = _backward
    return out


def softmax_cross_entropy(logits: Tensor, label, reduction="mean") -> Tensor:
    """Cross-entropy of softmax(logits) against an integer label.

    Single form: 1-D logits [K] with one label index -> scalar.
    Batched form: 2-D logits [n, K] with label array [n] -> scalar,
    reduced by `reduction` ("mean" or "sum").
    Backward yields softmax(logits) - onehot(label), scaled by the
    reduction.
    """
    if logits.ndim == 1:
        k = logits.shape[0]
        label = int(label)
        if not 0 <= label < k:
            raise InputError(f"label {label} out of range for {k} classes")
        ls = log_softmax(logits.values)
        out = Tensor(np.asarray(-ls[label]), parents=(logits,), op="ce")
        p = np.exp(ls)

        def _backward():
            g = p.copy()
            g[label] -= 1.0
            logits.grad += g * float(out.grad)

        out._backward_fn = _backward
        return out

    labels = np.asarray(label, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range for {k} classes")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    ls = log_softmax(logits.values)
    picked = ls[np.arange(n), labels]
    total = -picked.sum()
    val = total / n if reduction == "mean" else total
    out = Tensor(np.asarray(val), parents=(logits,), op="ce")
    p = np.exp(ls)

    def _backward():
        g = p.copy()
        g[np.arange(n), labels] -= 1.0
        if reduction == "mean":
            g /= n
        logits.grad += g * float(out.grad)

    out._backward_fn = _backward
    return out


def kl_softmax(a: Tensor, b: Tensor, reduction="mean") -> Tensor:
    """KL(softmax(a) || softmax(b)); >= 0, zero iff a - b is constant.

    Differentiable with respect to both arguments. Batched rows are
    reduced by mean or sum.
    """
    if a.shape != b.shape:
        raise ConfigurationError(f"kl_softmax: shape mismatch {a.shape} vs {b.shape}")
    la = log_softmax(a.values)
    lb = log_softmax(b.values)
    p = np.exp(la)
    r = la - lb
    row_kl = np.sum(p * r, axis=-1)
    if a.ndim == 1:
        val = row_kl
        denom = 1.0
    else:
        if reduction not in ("mean", "sum"):
            raise UsageError(f"unknown reduction {reduction!r}")
        denom = a.shape[0] if reduction == "mean" else 1.0
        val = row_kl.sum() / denom
    out = Tensor(np.asarray(val), parents=(a, b), op="kl_softmax")
    q = np.exp(lb)

    def _backward():
        go = float(out.grad) / denom
        inner = np.sum(p * r, axis=-1, keepdims=True)
        a.grad += go * p * (r - inner)
        b.grad += go * (q - p)

    out._backward_fn = _backward
    return out


def kl_softmax_value(a_vals, b_vals):
    """Plain-numpy KL(softmax(a) || softmax(b)) per row; no graph."""
    la = log_softmax(np.asarray(a_vals, dtype=np.float64))
    lb = log_softmax(np.asarray(b_vals, dtype=np.float64))
    return np.sum(np.exp(la) * (la - lb), axis=-1)


def neglog_complement_prob(logits: Tensor, label, eps=1e-12,
                           reduction="mean") -> Tensor:
    """-log(1 - softmax(logits)[label] + eps).

    Zero when the label probability is 0; grows as the label probability
    approaches 1. Same single/batched convention as softmax_cross_entropy.
    """
    if logits.ndim == 1:
        k = logits.shape[0]
        label = int(label)
        if not 0 <= label < k:
            raise InputError(f"label {label} out of range for {k} classes")
        p = softmax(logits.values)
        s = 1.0 - p[label] + eps
        out = Tensor(np.asarray(-np.log(s)), parents=(logits,), op="nlcp")

        def _backward():
            g = -p[label] * p
            g[label] += p[label]
            logits.grad += (g / s) * float(out.grad)

        out._backward_fn = _backward
        return out

    labels = np.asarray(label, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range for {k} classes")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    p = softmax(logits.values)
    py = p[np.arange(n), labels]
    s = 1.0 - py + eps
    total = -np.log(s).sum()
    val = total / n if reduction == "mean" else total
    out = Tensor(np.asarray(val), parents=(logits,), op="nlcp")

    def _backward():
        go = float(out.grad) / (n if reduction == "mean" else 1.0)
        g = -(py / s)[:, None] * p
        g[np.arange(n), labels] += py / s
        logits.grad += g * go

    out._backward_fn = _backward
    return out


def sum_picked(mat: Tensor, idx) -> Tensor:
    """Scalar sum of mat[i, idx[i]]; used for per-sample logit saliency."""
    idx = np.asarray(idx, dtype=np.int64)
    if mat.ndim != 2 or idx.shape != (mat.shape[0],):
        raise UsageError("sum_picked: expects 2-D node and one index per row")
    rows = np.arange(mat.shape[0])
    out = Tensor(np.asarray(mat.values[rows, idx].sum()), parents=(mat,),
                 op="sum_picked")

    def _backward():
        g = np.zeros_like(mat.values)
        g[rows, idx] = float(out.grad)
        mat.grad += g

    out._backward_fn = _backward
    return out


# ---------------------------------------------------------------------------
# graph traversal

def _toposort(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor):
    """Propagate gradients from a scalar root to all ancestors.

    Each call contributes one fresh gradient; contributions accumulate
    across calls until `zero_grad` resets them. The pass runs on zeroed
    buffers and adds prior accumulations back at the end, so repeated
    calls never feed stale interior gradients downstream.
    """
    if root.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    saved = [node.grad for node in order]
    for node in order:
        node.grad = np.zeros_like(node.values)
    root.grad += 1.0
    for node in reversed(order):
        node._visited = True
        if node._backward_fn is not None:
            node._backward_fn()
    for node, old in zip(order, saved):
        node.grad = node.grad + old


def zero_grad(root: Tensor):
    """Reset gradients of the root and every ancestor."""
    for node in _toposort(root):
        node.grad = np.zeros_like(node.values)
        node._visited = False


def grad_wrt(node: Tensor):
    """Accumulated gradient of the backward root with respect to `node`.

    Requires that a backward pass has already visited the node.
    """
    if not node._visited:
        raise UsageError("grad_wrt: node was not part of any backward pass")
    return node.grad.copy()


# ---------------------------------------------------------------------------
# parameters

class ParameterSet:
    """Ordered, named collection of leaf tensors.

    Frozen entries keep their values fixed for the rest of the run: the
    optimizer skips them entirely.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, values, frozen=False) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = leaf(np.array(values, dtype=np.float64), frozen=frozen)
        self._params[name] = t
        return t

    def adopt(self, name, tensor: Tensor):
        """Register an existing leaf under this set."""
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def freeze(self):
        for t in self._params.values():
            t.frozen = True

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.values)
            t._visited = False

    def check_finite(self):
        for name, t in self._params.items():
            if not np.all(np.isfinite(t.values)):
                raise ConfigurationError(f"parameter {name!r} contains non-finite values")

    def copy_values(self):
        return {name: t.values.copy() for name, t in self._params.items()}


def combine(*sets: ParameterSet) -> ParameterSet:
    """View over several parameter sets; shares the underlying tensors."""
    merged = ParameterSet()
    for i, ps in enumerate(sets):
        for name, t in ps.items():
            key = name if name not in merged._params else f"{i}/{name}"
            merged._params[key] = t
    return merged
