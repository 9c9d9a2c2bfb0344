"""Expansion-based incremental model.

One frozen feature extractor per finished task plus a trainable extractor
for the current task. A unified linear classifier reads the concatenation
of all extractor outputs; three narrow heads (auxiliary, intra-task,
inter-task) and a projector from frozen features into the current feature
space support the training losses. Expansion widens the classifier while
copying old weights verbatim, so old-class logits are untouched by the
expansion step itself.

Checkpoints are JSON documents tagged with the magic string "CPNSLAB1";
floats survive the round trip bit-exactly because python's repr of a
double is shortest-exact.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FormatError, InputError, UsageError

CHECKPOINT_MAGIC = "CPNSLAB1"


def _init_matrix(rng, n_out, n_in):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def _init_bias(rng, n_out, n_in):
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=n_out)


class FeatureExtractor:
    """Small MLP mapping inputs to a d-dimensional feature vector.

    Hidden layers use ReLU; the feature output is linear. Once frozen the
    parameters never change again, so outputs for a fixed input are
    bit-stable for the rest of the run.
    """

    def __init__(self, layer_dims, rng, task_index):
        if len(layer_dims) < 2:
            raise ConfigurationError("extractor needs at least input and output dims")
        self.layer_dims = list(int(v) for v in layer_dims)
        self.task_index = int(task_index)
        self.params = ad.ParameterSet()
        for i, (n_in, n_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            self.params.add(f"w{i}", _init_matrix(rng, n_out, n_in))
            self.params.add(f"b{i}", _init_bias(rng, n_out, n_in))

    @property
    def frozen(self):
        return all(t.frozen for t in self.params.tensors())

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        """Graph-mode forward; gradients flow into x and the parameters."""
        h = x
        for i in range(self.n_layers):
            h = ad.linear(h, self.params[f"w{i}"], self.params[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def forward_np(self, x):
        """Plain-numpy forward for frozen/evaluation paths."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.params[f"w{i}"].values.T + self.params[f"b{i}"].values
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def activations_np(self, x):
        """Per-layer activations (post-ReLU hiddens, then the feature)."""
        acts = []
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.params[f"w{i}"].values.T + self.params[f"b{i}"].values
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts


class ExpandableModel:
    """Holds the extractor stack, the widening classifier, and the heads.

    Task t state after `expand` was called t+1 times:
      extractors[0..t-1] frozen, extractors[t] trainable;
      cls head over (t+1)*d concatenated features -> all seen classes;
      aux head over f_t -> |C_t|+1 logits (absent at t=0);
      intra head over f_t -> |C_t| logits;
      inter head: weight-tied to cls by default, separate on request;
      projector: t*d -> d (absent at t=0).
    """

    def __init__(self, input_dim, feature_dim=32, hidden_dims=(64,),
                 projector_hidden=None, separate_inter_head=False, seed=0):
        self.input_dim = int(input_dim)
        self.feature_dim = int(feature_dim)
        self.hidden_dims = tuple(int(v) for v in hidden_dims)
        self.projector_hidden = int(projector_hidden if projector_hidden
                                    is not None else feature_dim)
        self.separate_inter_head = bool(separate_inter_head)
        self.seed = int(seed)
        self.rng = np.random.default_rng(seed)
        self.extractors: list[FeatureExtractor] = []
        self.heads: dict[str, ad.Tensor] = {}
        self.class_offsets: list[tuple[int, int]] = []

    # -- bookkeeping ---------------------------------------------------

    @property
    def task_count(self):
        return len(self.extractors)

    @property
    def current_task(self):
        if not self.extractors:
            raise UsageError("model has no tasks yet")
        return len(self.extractors) - 1

    @property
    def total_classes(self):
        return self.class_offsets[-1][1] if self.class_offsets else 0

    @property
    def current_class_count(self):
        if not self.class_offsets:
            raise UsageError("model has no tasks yet")
        lo, hi = self.class_offsets[-1]
        return hi - lo

    def task_of_label(self, label):
        for t, (lo, hi) in enumerate(self.class_offsets):
            if lo <= label < hi:
                return t
        raise InputError(f"label {label} outside every task range")

    # -- expansion -----------------------------------------------------

    def expand(self, new_class_count):
        if new_class_count <= 0:
            raise ConfigurationError(
                f"new_class_count must be positive, got {new_class_count}")
        t = self.task_count  # index of the task being opened
        d = self.feature_dim
        for ext in self.extractors:
            ext.params.freeze()

        dims = [self.input_dim, *self.hidden_dims, d]
        self.extractors.append(FeatureExtractor(dims, self.rng, task_index=t))

        old_total = self.total_classes
        new_total = old_total + new_class_count
        width = (t + 1) * d
        w = np.zeros((new_total, width))
        b = np.zeros(new_total)
        if t > 0:
            w[:old_total, :t * d] = self.heads["cls_w"].values
            b[:old_total] = self.heads["cls_b"].values
        w[old_total:] = _init_matrix(self.rng, new_class_count, width)
        b[old_total:] = _init_bias(self.rng, new_class_count, width)
        self.heads["cls_w"] = ad.leaf(w)
        self.heads["cls_b"] = ad.leaf(b)

        self.heads["intra_w"] = ad.leaf(_init_matrix(self.rng, new_class_count, d))
        self.heads["intra_b"] = ad.leaf(_init_bias(self.rng, new_class_count, d))

        if t >= 1:
            n_aux = new_class_count + 1
            self.heads["aux_w"] = ad.leaf(_init_matrix(self.rng, n_aux, d))
            self.heads["aux_b"] = ad.leaf(_init_bias(self.rng, n_aux, d))
            h = self.projector_hidden
            self.heads["proj_w0"] = ad.leaf(_init_matrix(self.rng, h, t * d))
            self.heads["proj_b0"] = ad.leaf(_init_bias(self.rng, h, t * d))
            self.heads["proj_w1"] = ad.leaf(_init_matrix(self.rng, d, h))
            self.heads["proj_b1"] = ad.leaf(_init_bias(self.rng, d, h))
            if self.separate_inter_head:
                self.heads["inter_w"] = ad.leaf(_init_matrix(self.rng, new_total, width))
                self.heads["inter_b"] = ad.leaf(_init_bias(self.rng, new_total, width))

        self.class_offsets.append((old_total, new_total))
        return self

    # -- forward passes (plain numpy) -----------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise InputError(
                f"input dim {x.shape[-1]} does not match model input {self.input_dim}")
        return x

    def features_np(self, x):
        """Per-extractor features, task order."""
        x = self._check_input(x)
        return [ext.forward_np(x) for ext in self.extractors]

    def concat_features_np(self, x):
        return np.concatenate(self.features_np(x), axis=-1)

    def current_feature_np(self, x):
        x = self._check_input(x)
        return self.extractors[-1].forward_np(x)

    def frozen_concat_np(self, x):
        """Concatenated frozen features [f_0 .. f_{t-1}], numpy only."""
        if self.task_count < 2:
            raise UsageError("no frozen extractors before the second task")
        x = self._check_input(x)
        return np.concatenate(
            [ext.forward_np(x) for ext in self.extractors[:-1]], axis=-1)

    def forward_concat_np(self, x):
        if not self.extractors:
            raise UsageError("model has no extractors")
        z = self.concat_features_np(x)
        return z @ self.heads["cls_w"].values.T + self.heads["cls_b"].values

    def forward_aux_np(self, x):
        if self.task_count < 2:
            raise UsageError("auxiliary head is inactive on the first task")
        c = self.current_feature_np(x)
        return c @ self.heads["aux_w"].values.T + self.heads["aux_b"].values

    def forward_intra_np(self, x):
        c = self.current_feature_np(x)
        return c @ self.heads["intra_w"].values.T + self.heads["intra_b"].values

    def project_old_np(self, x):
        z = self.frozen_concat_np(x)
        return self.project_values(z)

    def project_values(self, z_old):
        """Apply the projector to already-computed frozen features."""
        if "proj_w0" not in self.heads:
            raise UsageError("projector is absent on the first task")
        h = np.asarray(z_old) @ self.heads["proj_w0"].values.T + self.heads["proj_b0"].values
        h = np.maximum(h, 0.0)
        return h @ self.heads["proj_w1"].values.T + self.heads["proj_b1"].values

    def inter_logits_np(self, z_concat):
        """Inter-scope logits from concatenated features (tied or separate)."""
        wk, bk = ("inter_w", "inter_b") if self.separate_inter_head else ("cls_w", "cls_b")
        return np.asarray(z_concat) @ self.heads[wk].values.T + self.heads[bk].values

    # -- graph-mode builders (for training) -----------------------------

    def current_feature_graph(self, x_node: ad.Tensor) -> ad.Tensor:
        return self.extractors[-1].forward(x_node)

    def head_graph(self, name, feat_node: ad.Tensor) -> ad.Tensor:
        return ad.linear(feat_node, self.heads[f"{name}_w"], self.heads[f"{name}_b"])

    def cls_graph(self, concat_node: ad.Tensor) -> ad.Tensor:
        return self.head_graph("cls", concat_node)

    def inter_graph(self, concat_node: ad.Tensor) -> ad.Tensor:
        name = "inter" if self.separate_inter_head else "cls"
        return self.head_graph(name, concat_node)

    def projector_graph(self, zold_node: ad.Tensor) -> ad.Tensor:
        if "proj_w0" not in self.heads:
            raise UsageError("projector is absent on the first task")
        h = ad.relu(ad.linear(zold_node, self.heads["proj_w0"], self.heads["proj_b0"]))
        return ad.linear(h, self.heads["proj_w1"], self.heads["proj_b1"])

    def full_graph_logits(self, x_node: ad.Tensor) -> ad.Tensor:
        """Classifier logits with gradients flowing back to the input.

        Runs every extractor (frozen ones included) in graph mode; used by
        input-saliency diagnostics, not by training.
        """
        feats = [ext.forward(x_node) for ext in self.extractors]
        z = feats[0] if len(feats) == 1 else ad.concat(feats)
        return self.cls_graph(z)

    # -- parameter views -------------------------------------------------

    def stage1_params(self) -> ad.ParameterSet:
        """Current extractor plus the intra head."""
        ps = ad.ParameterSet()
        for name, t in self.extractors[-1].params.items():
            ps.adopt(f"f{self.current_task}/{name}", t)
        ps.adopt("intra_w", self.heads["intra_w"])
        ps.adopt("intra_b", self.heads["intra_b"])
        return ps

    def stage2_params(self) -> ad.ParameterSet:
        """Current extractor, every head, and the projector."""
        ps = ad.ParameterSet()
        for name, t in self.extractors[-1].params.items():
            ps.adopt(f"f{self.current_task}/{name}", t)
        for key in ("cls_w", "cls_b", "aux_w", "aux_b", "intra_w", "intra_b",
                    "inter_w", "inter_b",
                    "proj_w0", "proj_b0", "proj_w1", "proj_b1"):
            if key in self.heads:
                ps.adopt(key, self.heads[key])
        return ps

    def all_params(self) -> ad.ParameterSet:
        ps = ad.ParameterSet()
        for ext in self.extractors:
            for name, t in ext.params.items():
                ps.adopt(f"f{ext.task_index}/{name}", t)
        for key in sorted(self.heads):
            ps.adopt(key, self.heads[key])
        return ps

    def frozen_snapshot(self):
        """Copies of every frozen extractor parameter, for stability checks."""
        snap = {}
        for ext in self.extractors:
            if ext.frozen:
                for name, t in ext.params.items():
                    snap[f"f{ext.task_index}/{name}"] = t.values.copy()
        return snap


# ---------------------------------------------------------------------------
# module-level functional wrappers around the model methods

def expand(model: ExpandableModel, new_class_count: int) -> ExpandableModel:
    return model.expand(new_class_count)


def forward_concat(model: ExpandableModel, x):
    return model.forward_concat_np(x)


def forward_aux(model: ExpandableModel, x):
    return model.forward_aux_np(x)


def forward_intra(model: ExpandableModel, x):
    return model.forward_intra_np(x)


def project_old(model: ExpandableModel, x):
    return model.project_old_np(x)


# ---------------------------------------------------------------------------
# checkpointing

def _array_out(a):
    return a.tolist()


def _array_in(data, shape):
    arr = np.asarray(data, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise FormatError(f"array shape {arr.shape} does not match header {shape}")
    return arr


def save_checkpoint(model: ExpandableModel, path):
    """Write the model as a canonical JSON document.

    Serialization is deterministic (sorted keys, fixed separators) and
    floats round-trip bit-exactly, so identical models produce identical
    bytes.
    """
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": 1,
        "input_dim": model.input_dim,
        "feature_dim": model.feature_dim,
        "hidden_dims": list(model.hidden_dims),
        "projector_hidden": model.projector_hidden,
        "separate_inter_head": model.separate_inter_head,
        "seed": model.seed,
        "class_offsets": [list(pair) for pair in model.class_offsets],
        "rng_state": model.rng.bit_generator.state,
        "extractors": [
            {
                "task_index": ext.task_index,
                "layer_dims": ext.layer_dims,
                "frozen": ext.frozen,
                "params": {
                    name: {"shape": list(t.values.shape),
                           "data": _array_out(t.values)}
                    for name, t in ext.params.items()
                },
            }
            for ext in model.extractors
        ],
        "heads": {
            name: {"shape": list(t.values.shape), "data": _array_out(t.values)}
            for name, t in model.heads.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> ExpandableModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad checkpoint magic: expected {CHECKPOINT_MAGIC!r}, "
            f"got {doc.get('magic')!r}" if isinstance(doc, dict)
            else "checkpoint root is not an object")
    if doc.get("format_version") != 1:
        raise FormatError(f"unsupported checkpoint version {doc.get('format_version')!r}")

    model = ExpandableModel(
        input_dim=doc["input_dim"],
        feature_dim=doc["feature_dim"],
        hidden_dims=doc["hidden_dims"],
        projector_hidden=doc["projector_hidden"],
        separate_inter_head=doc["separate_inter_head"],
        seed=doc["seed"],
    )
    model.class_offsets = [tuple(pair) for pair in doc["class_offsets"]]
    for ext_doc in doc["extractors"]:
        ext = FeatureExtractor.__new__(FeatureExtractor)
        ext.layer_dims = list(ext_doc["layer_dims"])
        ext.task_index = int(ext_doc["task_index"])
        ext.params = ad.ParameterSet()
        for name in sorted(ext_doc["params"]):
            entry = ext_doc["params"][name]
            ext.params.add(name, _array_in(entry["data"], entry["shape"]),
                           frozen=ext_doc["frozen"])
        model.extractors.append(ext)
    for name in sorted(doc["heads"]):
        entry = doc["heads"][name]
        model.heads[name] = ad.leaf(_array_in(entry["data"], entry["shape"]))
    model.rng.bit_generator.state = doc["rng_state"]
    return model
