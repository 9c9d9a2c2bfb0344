"""Experiment orchestration: config parsing, the incremental loop, artifact
persistence, and ablation/sensitivity sweeps.

A run walks the task stream with the expand / train / commit / evaluate
cycle once per seed, writing everything under output_dir/run_id/seed-{s}/:
per-epoch JSONL, one EvalRecord JSON per task, one checkpoint per task, and
a single-row CSV summary. A run-level summary.csv collects every seed. All
result artifacts are byte-stable under re-runs with the same config and
seed; the epoch log is excluded from that promise because it carries wall
times.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import counterfactual as cf
from . import data as dt
from . import metrics as mt
from . import model as mdl
from . import trainer as tr
from .errors import ConfigurationError, ParseError
from .risk import GenConfig, check_proposition1
from .errors import PropositionViolation

SUMMARY_HEADER = "method,scenario,seed,last,avg"
SWEEP_PARAMS = ("lambda", "gamma", "beta", "epsilon", "alpha", "nu")

ABLATION_VARIANTS = (
    "baseline",
    "+intra",
    "+inter_no2stage",
    "+inter_2stage",
    "both_no2stage",
    "full",
)


@dataclass
class MetricsConfig:
    old_new: bool = True
    cka: bool = True
    masking: bool = True
    cf_quality: bool = True
    masking_ks: tuple = (0, 2, 4, 8)
    probe_limit: int = 64

    def __post_init__(self):
        self.masking_ks = tuple(int(k) for k in self.masking_ks)
        if self.probe_limit < 1:
            raise ConfigurationError("probe_limit must be positive")


@dataclass
class ModelConfig:
    feature_dim: int = 16
    hidden_dims: tuple = (32,)
    projector_hidden: Optional[int] = None
    separate_inter_head: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(v) for v in self.hidden_dims)
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be positive")


@dataclass
class ExperimentConfig:
    """Validated experiment description; see docs/formats.md for the JSON."""

    data: dict
    run_id: str = "run"
    output_dir: str = "output"
    seeds: tuple = (0,)
    method_label: Optional[str] = None
    use_baseline_trainer: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigurationError("seed list must be non-empty")
        if not self.run_id or "/" in self.run_id:
            raise ConfigurationError(f"bad run id {self.run_id!r}")
        kind = self.data.get("kind")
        if kind == "synthetic":
            extra = {k: v for k, v in self.data.items() if k != "kind"}
            self._scm = dt.SyntheticScmConfig(**extra)
        elif kind == "table":
            for key in ("path", "B", "I"):
                if key not in self.data:
                    raise ConfigurationError(f"table data needs {key!r}")
            if not os.path.exists(self.data["path"]):
                raise ConfigurationError(
                    f"table path does not exist: {self.data['path']}")
            self._scm = None
        else:
            raise ConfigurationError(
                f"data.kind must be 'synthetic' or 'table', got {kind!r}")

    @property
    def scenario(self):
        if self._scm is not None:
            s = self._scm
            return (f"scm-{s.classes_per_task}x{s.num_tasks}"
                    f"-ov{s.overlap}-sp{s.spurious_strength}")
        base = os.path.basename(str(self.data["path"]))
        return f"{base}-B{self.data['B']}-I{self.data['I']}"

    @property
    def method(self):
        if self.method_label:
            return self.method_label
        if self.use_baseline_trainer:
            return "baseline"
        t = self.train
        degenerate = (t.lam == 0.0 and t.gamma == 0.0 and t.nu == 0.0
                      and t.stage1_epochs == 0)
        return "baseline" if degenerate else "cpns"

    def build_stream(self, seed):
        if self._scm is not None:
            fields = asdict(self._scm)
            fields["seed"] = self._scm.seed + int(seed)
            return dt.gen_scm_stream(dt.SyntheticScmConfig(**fields))
        table = dt.load_table(self.data["path"])
        n = len(table)
        split = max(1, int(0.8 * n))
        order = np.random.default_rng(self.data.get("split_seed", 0)).permutation(n)
        tr_idx, te_idx = order[:split], order[split:]
        dataset = ((table.x[tr_idx], table.y[tr_idx]),
                   (table.x[te_idx], table.y[te_idx]))
        stream = dt.split_tasks(dataset, int(self.data["B"]),
                                int(self.data["I"]), seed=int(seed))
        if table.dim_tags is not None:
            stream.factor_annotations = {"dim_tags": table.dim_tags}
        return stream

    def input_dim(self, stream):
        return stream.tasks[0][0][0].shape[1]


def _dict_to_dataclass(name, d, builder, allowed):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {name} keys: {sorted(unknown)}")
    return builder(**d)


def config_from_dict(doc) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    allowed = {"data", "run_id", "output_dir", "seeds", "method_label",
               "use_baseline_trainer", "model", "train", "metrics"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    if "data" not in doc:
        raise ConfigurationError("config needs a 'data' section")

    kwargs = {k: doc[k] for k in
              ("run_id", "output_dir", "seeds", "method_label",
               "use_baseline_trainer") if k in doc}
    kwargs["data"] = dict(doc["data"])

    model_doc = dict(doc.get("model", {}))
    kwargs["model"] = _dict_to_dataclass(
        "model", model_doc, ModelConfig,
        ("feature_dim", "hidden_dims", "projector_hidden",
         "separate_inter_head"))

    train_doc = dict(doc.get("train", {}))
    gen_doc = dict(train_doc.pop("gen", {}))
    gen = _dict_to_dataclass("train.gen", gen_doc, GenConfig,
                             ("alpha", "beta", "epsilon", "metric"))
    if "adam_betas" in train_doc:
        train_doc["adam_betas"] = tuple(train_doc["adam_betas"])
    allowed_train = ("stage1_epochs", "stage2_epochs", "batch_size", "lr",
                     "momentum", "weight_decay", "optimizer", "adam_betas",
                     "adam_eps", "schedule", "lam", "gamma", "nu",
                     "two_stage", "buffer_capacity", "buffer_policy",
                     "report_limit")
    train = _dict_to_dataclass("train", train_doc,
                               lambda **kw: tr.TrainConfig(gen=gen, **kw),
                               allowed_train)
    kwargs["train"] = train

    metrics_doc = dict(doc.get("metrics", {}))
    kwargs["metrics"] = _dict_to_dataclass(
        "metrics", metrics_doc, MetricsConfig,
        ("old_new", "cka", "masking", "cf_quality", "masking_ks",
         "probe_limit"))
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})")
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# evaluation helpers

def _pooled_accuracy(model, test_sets):
    hits = total = 0
    for x, y in test_sets:
        pred = np.argmax(model.forward_concat_np(x), axis=1)
        hits += int(np.sum(pred == y))
        total += len(y)
    return hits / total if total else float("nan")


def _per_task_accuracy(model, test_sets):
    out = []
    for x, y in test_sets:
        pred = np.argmax(model.forward_concat_np(x), axis=1)
        out.append(float(np.mean(pred == y)))
    return out


def _cf_quality_probe(model, x, y, lo, cfgm: MetricsConfig, gen: GenConfig):
    n = min(cfgm.probe_limit, len(x))
    if n == 0:
        return None
    xs, ys = x[:n], y[:n]
    feats = model.current_feature_np(xs)
    w = model.heads["intra_w"].values
    b = model.heads["intra_b"].values
    samples = [cf.gen_intra(feats[i], int(ys[i] - lo), w, b=b,
                            alpha=gen.alpha, epsilon=gen.epsilon,
                            metric=gen.metric)
               for i in range(n)]
    if model.task_count > 1:
        proj = model.project_old_np(xs)
        samples += [cf.gen_inter(feats[i], proj[i], beta=gen.beta,
                                 epsilon=gen.epsilon, metric=gen.metric)
                    for i in range(n)]
    return mt.counterfactual_quality(samples, model)


def evaluate_task(model, stream, task_index, history, cfgm: MetricsConfig,
                  gen: GenConfig) -> mt.EvalRecord:
    """Build the EvalRecord after training task `task_index`."""
    seen = stream.tasks[:task_index + 1]
    test_sets = [test for _, test, _ in seen]
    per_task = _per_task_accuracy(model, test_sets)
    history.append(_pooled_accuracy(model, test_sets))
    last, avg = mt.incremental_accuracy(history)

    old_new = None
    if cfgm.old_new and task_index >= 1:
        protos = mt.feature_prototypes(model, test_sets)
        _, _, (lo, hi) = stream.tasks[task_index]
        old_new = mt.old_new_error(model, test_sets[:task_index], (lo, hi),
                                   protos)

    cka = None
    if cfgm.cka and task_index >= 1:
        # balanced probe: an equal prefix from every seen task's test split
        per = max(1, (4 * cfgm.probe_limit) // len(test_sets))
        probe_x = np.concatenate([x[:per] for x, _ in test_sets])
        cka = mt.extractor_cka(model.extractors[task_index - 1],
                               model.extractors[task_index], probe_x)

    masking = None
    ann = stream.factor_annotations
    if cfgm.masking and ann and "dim_tags" in ann:
        tags = ann["dim_tags"]
        n_causal = sum(t in ("causal", "minimal_causal") for t in tags)
        ks = [k for k in cfgm.masking_ks if k <= n_causal]
        if ks:
            probe_x = np.concatenate([x for x, _ in test_sets])
            probe_y = np.concatenate([y for _, y in test_sets])
            curve, _ = mt.masking_curve(model, probe_x, probe_y, tags, ks)
            masking = curve

    quality = None
    if cfgm.cf_quality:
        (x_cur, y_cur), _, (lo, _) = stream.tasks[task_index]
        quality = _cf_quality_probe(model, x_cur, y_cur, lo, cfgm, gen)

    return mt.EvalRecord(
        task_index=task_index, per_task_acc=per_task, last_acc=last,
        avg_acc=avg, old_new_errors=old_new, cka_by_layer=cka,
        masking_curve=masking, cf_quality=quality)


# ---------------------------------------------------------------------------
# the incremental loop

def _write_json(path, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def _csv_row(method, scenario, seed, last, avg):
    return f"{method},{scenario},{seed},{repr(float(last))},{repr(float(avg))}"


def run_seed(config: ExperimentConfig, seed: int, out_dir=None):
    """One full incremental pass; returns (records, summary_row_dict).

    Artifacts land under out_dir (default output_dir/run_id/seed-{seed}):
    epochs.jsonl, task-{t}.eval.json, task-{t}.ckpt, summary.csv.
    """
    stream = config.build_stream(seed)
    if out_dir is None:
        out_dir = os.path.join(config.output_dir, config.run_id,
                               f"seed-{seed}")
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "epochs.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)

    model = mdl.ExpandableModel(
        input_dim=config.input_dim(stream),
        feature_dim=config.model.feature_dim,
        hidden_dims=config.model.hidden_dims,
        projector_hidden=config.model.projector_hidden,
        separate_inter_head=config.model.separate_inter_head,
        seed=seed)
    rng = np.random.default_rng(seed + 1)
    buffer = tr.RehearsalBuffer(config.train.buffer_capacity,
                                config.train.buffer_policy)
    train_fn = (tr.train_task_baseline if config.use_baseline_trainer
                else tr.train_task)

    history = []
    records = []
    for t, (train_split, _, (lo, hi)) in enumerate(stream.tasks):
        model.expand(hi - lo)
        result = train_fn(model, train_split, buffer if t else None,
                          config.train, rng, log_path=log_path)
        tr.buffer_commit(buffer, train_split, model, rng=rng)

        record = evaluate_task(model, stream, t, history, config.metrics,
                               config.train.gen)
        final_report = result.get("final_report")
        if final_report is not None and not check_proposition1(final_report):
            raise PropositionViolation(
                f"task {t}: violation bound breached at write time")
        _write_json(os.path.join(out_dir, f"task-{t}.eval.json"),
                    record.to_json_dict())
        mdl.save_checkpoint(model, os.path.join(out_dir, f"task-{t}.ckpt"))
        records.append(record)

    last, avg = records[-1].last_acc, records[-1].avg_acc
    row = {"method": config.method, "scenario": config.scenario,
           "seed": seed, "last": last, "avg": avg}
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        fh.write(_csv_row(row["method"], row["scenario"], seed, last, avg) + "\n")
    return records, row


def run_experiment(config: ExperimentConfig):
    """All seeds of a run; writes the run-level summary.csv and returns rows."""
    rows = []
    for seed in config.seeds:
        _, row = run_seed(config, seed)
        rows.append(row)
    run_dir = os.path.join(config.output_dir, config.run_id)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "summary.csv"), "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for row in rows:
            fh.write(_csv_row(row["method"], row["scenario"], row["seed"],
                              row["last"], row["avg"]) + "\n")
    return rows


# ---------------------------------------------------------------------------
# sweeps and ablations

def _with_param(config: ExperimentConfig, param, value):
    """Clone the config with one generator/loss knob changed."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(
            f"unknown sweep parameter {param!r}; pick one of {SWEEP_PARAMS}")
    train = asdict(config.train)
    gen = train.pop("gen")
    train["adam_betas"] = tuple(train["adam_betas"])
    if param == "lambda":
        train["lam"] = float(value)
    elif param in ("gamma", "nu"):
        train[param] = float(value)
    else:
        gen[param] = float(value)
    new_train = tr.TrainConfig(gen=GenConfig(**gen), **train)
    return ExperimentConfig(
        data=dict(config.data), run_id=config.run_id,
        output_dir=config.output_dir, seeds=config.seeds,
        method_label=config.method_label,
        use_baseline_trainer=config.use_baseline_trainer,
        model=config.model, train=new_train, metrics=config.metrics)


def run_sweep(config: ExperimentConfig, param, values):
    """One run per value; emits sweep-{param}.csv with seed-averaged rows."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(
            f"unknown sweep parameter {param!r}; pick one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    run_dir = os.path.join(config.output_dir, config.run_id)
    os.makedirs(run_dir, exist_ok=True)
    out_rows = []
    for value in values:
        sub = _with_param(config, param, value)
        rows = []
        for seed in sub.seeds:
            out_dir = os.path.join(run_dir, f"sweep-{param}",
                                   f"value-{value}", f"seed-{seed}")
            _, row = run_seed(sub, seed, out_dir=out_dir)
            rows.append(row)
        out_rows.append((float(value),
                         float(np.mean([r["last"] for r in rows])),
                         float(np.mean([r["avg"] for r in rows]))))
    path = os.path.join(run_dir, f"sweep-{param}.csv")
    with open(path, "w") as fh:
        fh.write("value,last,avg\n")
        for value, last, avg in out_rows:
            fh.write(f"{repr(value)},{repr(last)},{repr(avg)}\n")
    return out_rows


def ablation_train_config(base: tr.TrainConfig, variant) -> tr.TrainConfig:
    """The six-variant grid over {intra, inter, two_stage}."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}")
    kw = asdict(base)
    gen = kw.pop("gen")
    kw["adam_betas"] = tuple(kw["adam_betas"])
    if variant == "baseline":
        kw.update(lam=0.0, gamma=0.0, nu=0.0, stage1_epochs=0)
    elif variant == "+intra":
        kw.update(lam=0.0, two_stage=True)
    elif variant == "+inter_no2stage":
        kw.update(nu=0.0, gamma=0.0, two_stage=False)
    elif variant == "+inter_2stage":
        kw.update(nu=0.0, gamma=0.0, two_stage=True)
    elif variant == "both_no2stage":
        kw.update(two_stage=False)
    else:  # full
        kw.update(two_stage=True)
    return tr.TrainConfig(gen=GenConfig(**gen), **kw)


def run_ablation(config: ExperimentConfig):
    """Six-variant ablation; emits ablation.csv with one row per variant."""
    run_dir = os.path.join(config.output_dir, config.run_id)
    os.makedirs(run_dir, exist_ok=True)
    table = []
    for variant in ABLATION_VARIANTS:
        train = ablation_train_config(config.train, variant)
        sub = ExperimentConfig(
            data=dict(config.data), run_id=config.run_id,
            output_dir=config.output_dir, seeds=config.seeds,
            method_label=variant,
            use_baseline_trainer=(variant == "baseline"),
            model=config.model, train=train, metrics=config.metrics)
        rows = []
        for seed in sub.seeds:
            out_dir = os.path.join(run_dir, "ablation", variant,
                                   f"seed-{seed}")
            _, row = run_seed(sub, seed, out_dir=out_dir)
            rows.append(row)
        table.append((variant,
                      float(np.mean([r["last"] for r in rows])),
                      float(np.mean([r["avg"] for r in rows]))))
    path = os.path.join(run_dir, "ablation.csv")
    with open(path, "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for variant, last, avg in table:
            fh.write(_csv_row(variant, config.scenario, "mean", last, avg) + "\n")
    return table


def evaluate_checkpoint(ckpt_path, table_path):
    """Accuracy of a saved model over one tabular file."""
    model = mdl.load_checkpoint(ckpt_path)
    table = dt.load_table(table_path)
    pred = np.argmax(model.forward_concat_np(table.x), axis=1)
    return {"accuracy": float(np.mean(pred == table.y)),
            "n_samples": int(len(table)),
            "n_classes_model": int(model.total_classes),
            "n_classes_data": int(table.n_classes)}
