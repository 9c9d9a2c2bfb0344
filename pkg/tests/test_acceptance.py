"""End-to-end acceptance gate.

Each test pins one externally checkable property of the assembled system:
gradient fidelity against finite differences, the violation/risk upper
bound, budget satisfaction of every counterfactual generator, exact
degeneration to the plain rehearsal baseline, directional gains on the
shortcut-trap stream, masking-curve flattening, old-to-new error ordering
by overlap group, the depth-resolved representation-similarity pattern,
counterfactual quality orderings, two-stage necessity, interventional
estimate sanity, and byte-level reproducibility with checkpoint
round-trips.

Training fixtures are session-scoped and shared across tests. Operating
points (stream shape, buffer sizes, regularizer weights) were chosen by
measurement; where a choice is load-bearing the reason is stated inline.
"""

import json
import os
import time

import numpy as np
import pytest

from conftest import numeric_grad, rel_err

from cpnslab import autodiff as ad
from cpnslab import counterfactual as cf
from cpnslab import data as dt
from cpnslab import experiment as ex
from cpnslab import metrics as mt
from cpnslab import model as mdl
from cpnslab import risk as rk
from cpnslab import trainer as tr


# ---------------------------------------------------------------------------
# shared configuration

# The shortcut-trap stream: a spurious block that agrees with the label on
# 95% of training rows but is shuffled at test time, plus consecutive-task
# causal subspaces at cosine 0.7. Wide enough (5 tasks x 4 classes) for the
# overlap tertiles to be populated.
TRAP_DATA = {
    "kind": "synthetic",
    "num_tasks": 5,
    "classes_per_task": 4,
    "input_dim": 64,
    "d_c": 4,
    "d_mc": 1,
    "d_s": 4,
    "overlap": 0.7,
    "spurious_strength": 0.95,
    "n_train_per_class": 150,
    "n_test_per_class": 100,
}

TRAP_TRAIN = {
    "stage1_epochs": 8,
    "stage2_epochs": 14,
    "batch_size": 32,
    "lr": 0.01,
    "buffer_capacity": 2000,
    "report_limit": 128,
}

TRAP_SEEDS = [0, 1, 2, 3, 4, 5]


def _trap_config(out, run_id, **overrides):
    doc = {
        "data": dict(TRAP_DATA),
        "run_id": run_id,
        "output_dir": out,
        "seeds": list(TRAP_SEEDS),
        "model": {"feature_dim": 16, "hidden_dims": [32]},
        "train": dict(TRAP_TRAIN),
        "metrics": {"masking_ks": [0, 1], "probe_limit": 64},
    }
    doc.update(overrides)
    return ex.config_from_dict(doc)


def _run_all_seeds(config):
    """(records_by_seed, rows, seconds_by_seed) for one method."""
    records_by_seed, rows, secs = [], [], []
    for seed in config.seeds:
        t0 = time.perf_counter()
        records, row = ex.run_seed(config, seed)
        secs.append(time.perf_counter() - t0)
        records_by_seed.append(records)
        rows.append(row)
    return records_by_seed, rows, secs


@pytest.fixture(scope="session")
def trap_runs(tmp_path_factory):
    """Baseline and regularized runs on the shortcut-trap stream.

    buffer_capacity=2000 holds every training row of this stream, so the
    baseline barely forgets: the comparison then isolates what the
    counterfactual terms change about the learned representation rather
    than measuring forgetting itself.
    """
    out = str(tmp_path_factory.mktemp("trap"))
    base = _trap_config(out, "base", use_baseline_trainer=True)
    full = _trap_config(out, "full")
    base_recs, base_rows, base_secs = _run_all_seeds(base)
    full_recs, full_rows, full_secs = _run_all_seeds(full)
    return {
        "base": {"records": base_recs, "rows": base_rows, "secs": base_secs},
        "full": {"records": full_recs, "rows": full_rows, "secs": full_secs},
    }


@pytest.fixture(scope="session")
def two_stage_pair(tmp_path_factory):
    """Full two-stage training versus the same objective in one stage.

    The stream is the trap stream; the buffer is cut to 200 rows because
    staging is an optimization-dynamics effect: with rehearsal-complete
    buffers both schedules converge to near-identical solutions and the
    comparison loses its signal.
    """
    out = str(tmp_path_factory.mktemp("stage"))
    train = dict(TRAP_TRAIN, buffer_capacity=200)
    staged = _trap_config(out, "staged", train=dict(train))
    merged = _trap_config(out, "merged", train=dict(train, two_stage=False),
                          method_label="merged")
    _, staged_rows, _ = _run_all_seeds(staged)
    _, merged_rows, _ = _run_all_seeds(merged)
    return staged_rows, merged_rows


@pytest.fixture(scope="session")
def similarity_runs(tmp_path_factory):
    """Two-task high-overlap runs for the layerwise similarity pattern.

    The stream pushes literal subspace overlap to 0.9 with a wide spurious
    block so consecutive extractors can share shallow structure while
    specializing deep structure. The inter head is separated from the
    classifier; with a tied head the inter terms also shape the classifier
    rows and drag deep features toward the old ones, which inverts the
    deep half of the pattern. Short stage 1 plus mild weight decay keeps
    early layers from diverging before the anchored stage.
    """
    out = str(tmp_path_factory.mktemp("sim"))
    doc = {
        "data": dict(TRAP_DATA, num_tasks=2, overlap=0.9, d_s=16),
        "run_id": "sim",
        "output_dir": out,
        "seeds": list(range(12)),
        "model": {"feature_dim": 16, "hidden_dims": [32, 32],
                  "separate_inter_head": True},
        "train": dict(TRAP_TRAIN, stage1_epochs=4, weight_decay=1e-3,
                      lam=1.8, gen={"beta": 0.12}),
        "metrics": {"old_new": False, "masking": False, "cf_quality": False,
                    "probe_limit": 128},
    }
    full = ex.config_from_dict(doc)
    base = ex.config_from_dict({**doc, "run_id": "sim-base",
                                "use_baseline_trainer": True})
    full_recs, _, _ = _run_all_seeds(full)
    base_recs, _, _ = _run_all_seeds(base)
    return full_recs, base_recs


def _train_two_task_model(seed):
    scm = dt.SyntheticScmConfig(num_tasks=2, classes_per_task=4, input_dim=64,
                                d_c=4, d_mc=1, d_s=4, overlap=0.7,
                                spurious_strength=0.95, n_train_per_class=150,
                                n_test_per_class=100, seed=seed)
    stream = dt.gen_scm_stream(scm)
    cfg = tr.TrainConfig(stage1_epochs=8, stage2_epochs=14, batch_size=32,
                         lr=0.01, buffer_capacity=2000, report_limit=128)
    model = mdl.ExpandableModel(64, feature_dim=16, hidden_dims=(32,),
                                seed=seed)
    buffer = tr.RehearsalBuffer(cfg.buffer_capacity)
    rng = np.random.default_rng(seed + 1)
    for t, (train, _, (lo, hi)) in enumerate(stream.tasks):
        model.expand(hi - lo)
        tr.train_task(model, train, buffer if t else None, cfg, rng)
        tr.buffer_commit(buffer, train, model, rng=rng)
    return model, stream


@pytest.fixture(scope="session")
def quality_models():
    """Trained two-task models for the counterfactual quality orderings."""
    return [_train_two_task_model(seed) for seed in range(5)]


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _avg_drop(curve):
    accs = [a for _, a in curve]
    return float(np.mean(-np.diff(accs)))


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# 1. gradient fidelity

def _check_grads(pairs, builders, tol=1e-4):
    """Compare each tensor's reverse-mode grad to central differences.

    pairs is [(tensor, base_values)], builders maps the index of the
    perturbed tensor to a scalar-valued forward function of its values.
    """
    for i, (tensor, base) in enumerate(pairs):
        want = numeric_grad(builders[i], base)
        assert rel_err(tensor.grad, want) < tol


def test_gradients_match_finite_differences():
    start = time.perf_counter()
    for j in range(100):
        rng = np.random.default_rng(1000 + j)
        n, d, c = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 5)
        xv = rng.normal(size=(n, d))
        wv = rng.normal(size=(c, d))
        bv = rng.normal(size=c)

        def linear_loss(x=None, w=None, b=None):
            t = (ad.leaf(x if x is not None else xv),
                 ad.leaf(w if w is not None else wv),
                 ad.leaf(b if b is not None else bv))
            return t, ad.sum_squares(ad.linear(*t))

        (x, w, b), root = linear_loss()
        ad.backward(root)
        _check_grads(
            [(x, xv), (w, wv), (b, bv)],
            {0: lambda v: float(linear_loss(x=v)[1].values),
             1: lambda v: float(linear_loss(w=v)[1].values),
             2: lambda v: float(linear_loss(b=v)[1].values)})

    for j in range(100):
        rng = np.random.default_rng(2000 + j)
        xv = rng.normal(size=(3, 4))
        xv += 0.2 * np.sign(xv)        # keep every entry away from the kink
        x = ad.leaf(xv)
        root = ad.sum_squares(ad.relu(x))
        ad.backward(root)
        want = numeric_grad(
            lambda v: float(np.sum(np.maximum(v, 0.0) ** 2)), xv)
        assert rel_err(x.grad, want) < 1e-4

    for j in range(100):
        rng = np.random.default_rng(3000 + j)
        n, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        lv = rng.normal(size=(n, c))
        y = rng.integers(0, c, n)
        logits = ad.leaf(lv)
        ad.backward(ad.softmax_cross_entropy(logits, y))
        want = numeric_grad(
            lambda v: float(ad.softmax_cross_entropy(ad.leaf(v), y).values),
            lv)
        assert rel_err(logits.grad, want) < 1e-4

    for j in range(100):
        rng = np.random.default_rng(4000 + j)
        n, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        av, bv2 = rng.normal(size=(n, c)), rng.normal(size=(n, c))
        a, b2 = ad.leaf(av), ad.leaf(bv2)
        ad.backward(ad.kl_softmax(a, b2))
        ga = numeric_grad(
            lambda v: float(ad.kl_softmax(ad.leaf(v), ad.leaf(bv2)).values), av)
        gb = numeric_grad(
            lambda v: float(ad.kl_softmax(ad.leaf(av), ad.leaf(v)).values), bv2)
        assert rel_err(a.grad, ga) < 1e-4
        assert rel_err(b2.grad, gb) < 1e-4

    # the two surrogate losses, with the perturbation offset held fixed so
    # finite differences probe the same function the graph differentiates
    for kind in ("intra", "inter"):
        loss_fn = (rk.surrogate_intra_loss if kind == "intra"
                   else rk.surrogate_inter_loss)
        for j in range(100):
            rng = np.random.default_rng((5000 if kind == "intra" else 6000) + j)
            n, d, c = 3, int(rng.integers(3, 7)), int(rng.integers(2, 4))
            fv = rng.normal(size=(n, d))
            delta0 = 0.1 * rng.normal(size=(n, d))
            wv = rng.normal(size=(c, d))
            bv = rng.normal(size=c)
            y = rng.integers(0, c, n)
            nu = float(rng.uniform(0.2, 2.0))

            def build(f=None, w=None, b=None):
                fx = f if f is not None else fv
                t = (ad.leaf(fx), ad.leaf(w if w is not None else wv),
                     ad.leaf(b if b is not None else bv))
                return t, loss_fn(t[0], fx + delta0, y, t[1], t[2], nu=nu)

            (f, w, b), root = build()
            ad.backward(root)
            _check_grads(
                [(f, fv), (w, wv), (b, bv)],
                {0: lambda v: float(build(f=v)[1].values),
                 1: lambda v: float(build(w=v)[1].values),
                 2: lambda v: float(build(b=v)[1].values)})

    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 2. the violation measure never exceeds the risk

def test_violation_bound_holds_on_fuzzed_triples():
    start = time.perf_counter()
    rng = np.random.default_rng(20)
    violations = 0
    for i in range(10000):
        tasks = 1 + (i % 2)
        model = mdl.ExpandableModel(8, feature_dim=4, hidden_dims=(8,),
                                    seed=i % 97)
        for _ in range(tasks):
            model.expand(3)
        n = int(rng.integers(4, 12))
        cur = (rng.standard_normal((n, 8)),
               rng.integers((tasks - 1) * 3, tasks * 3, n))
        buf = None
        if tasks > 1:
            m = int(rng.integers(4, 12))
            buf = (rng.standard_normal((m, 8)), rng.integers(0, 3, m))
        cfg = rk.GenConfig(alpha=float(rng.uniform(0.1, 2.0)),
                           beta=float(rng.uniform(0.01, 0.3)),
                           epsilon=float(rng.uniform(0.01, 0.2)))
        report = rk.empirical_cpns_risk(cur, buf, model, cfg)
        if not rk.check_proposition1(report):
            violations += 1
        assert -1.0 <= report.pns_intra_est <= 1.0
        assert -1.0 <= report.pns_inter_est <= 1.0
    assert violations == 0
    assert time.perf_counter() - start < 60.0


# ---------------------------------------------------------------------------
# 3. generator budget satisfaction and the interpolation closed form

def test_generators_respect_budget_or_flag_degenerate():
    for i in range(1000):
        rng = np.random.default_rng(30000 + i)
        d = 3 + i % 5
        c = 2 + i % 3
        feats = rng.normal(size=d)
        wv = rng.normal(size=(c, d))
        bv = rng.normal(size=c)
        label = int(rng.integers(0, c))
        eps = float(rng.uniform(0.005, 0.2))

        s = cf.gen_intra(feats, label, wv, alpha=float(rng.uniform(0.05, 2.0)),
                         epsilon=eps, b=bv)
        assert s.degenerate or s.kl_value <= eps + 1e-12

        proj = rng.normal(size=d)
        beta = float(rng.uniform(0.01, 0.45))
        s2 = cf.gen_inter(feats, proj, beta=beta, epsilon=eps)
        assert s2.degenerate or s2.kl_value <= eps + 1e-12
        want = (1.0 - 2.0 * s2.applied_scale) * feats \
            + 2.0 * s2.applied_scale * proj
        assert np.max(np.abs(s2.counterfactual - want)) <= 1e-12

        budget = float(rng.uniform(1e-4, 0.3))
        s3 = cf.perturb_random(feats, budget, rng)
        assert s3.degenerate or s3.kl_value <= budget + 1e-12

        budget4 = float(rng.uniform(1e-3, 0.2))
        s4 = cf.perturb_pgd(feats, label, wv, steps=5,
                            step_size=float(rng.uniform(0.1, 2.0)),
                            budget_kl=budget4, b=bv)
        assert s4.degenerate or s4.kl_value <= budget4 + 1e-12


# ---------------------------------------------------------------------------
# 4. exact degeneration to the plain rehearsal baseline

def _tiny_doc(out, run_id):
    return {
        "data": {"kind": "synthetic", "num_tasks": 2, "classes_per_task": 2,
                 "input_dim": 16, "d_c": 2, "d_mc": 1, "d_s": 4,
                 "n_train_per_class": 20, "n_test_per_class": 10},
        "run_id": run_id,
        "output_dir": out,
        "seeds": [0],
        "model": {"feature_dim": 8, "hidden_dims": [16]},
        "train": {"stage1_epochs": 0, "stage2_epochs": 3, "batch_size": 16,
                  "buffer_capacity": 40, "lam": 0.0, "gamma": 0.0, "nu": 0.0},
        "metrics": {"probe_limit": 16},
    }


def test_zeroed_objective_is_bitwise_identical_to_baseline(tmp_path):
    out = str(tmp_path)
    zeroed = ex.config_from_dict(_tiny_doc(out, "zeroed"))
    plain = ex.config_from_dict({**_tiny_doc(out, "plain"),
                                 "use_baseline_trainer": True})
    ex.run_experiment(zeroed)
    ex.run_experiment(plain)

    for t in range(2):
        za = _read(os.path.join(out, "zeroed", "seed-0", f"task-{t}.ckpt"))
        pa = _read(os.path.join(out, "plain", "seed-0", f"task-{t}.ckpt"))
        assert za == pa
    assert _read(os.path.join(out, "zeroed", "summary.csv")) \
        == _read(os.path.join(out, "plain", "summary.csv"))


# ---------------------------------------------------------------------------
# 5. directional gain on the shortcut-trap stream

def test_trap_stream_gain(trap_runs):
    base_last = np.mean([r["last"] for r in trap_runs["base"]["rows"]])
    base_avg = np.mean([r["avg"] for r in trap_runs["base"]["rows"]])
    full_last = np.mean([r["last"] for r in trap_runs["full"]["rows"]])
    full_avg = np.mean([r["avg"] for r in trap_runs["full"]["rows"]])
    assert full_last > base_last
    assert full_avg > base_avg
    # accuracies live in [0, 1]; two points = 0.02
    assert full_last - base_last >= 0.02
    assert full_avg - base_avg >= 0.02
    assert max(trap_runs["full"]["secs"]) < 300.0
    assert max(trap_runs["base"]["secs"]) < 300.0


# ---------------------------------------------------------------------------
# 6. masking-curve flattening

def test_masking_drop_is_reduced(trap_runs):
    def drops(runs):
        out = []
        for records in runs["records"]:
            curve = records[-1].masking_curve
            assert curve is not None
            out.append(_avg_drop(curve))
        return out

    base = np.mean(drops(trap_runs["base"]))
    full = np.mean(drops(trap_runs["full"]))
    assert full < base


# ---------------------------------------------------------------------------
# 7. old-to-new error ordering by overlap group

def test_overlap_group_error_ordering(trap_runs):
    def groups(runs, key):
        vals = [records[-1].old_new_errors[key]
                for records in runs["records"]]
        assert not any(np.isnan(v) for v in vals)
        return float(np.mean(vals))

    base_high = groups(trap_runs["base"], "high")
    base_low = groups(trap_runs["base"], "low")
    full_high = groups(trap_runs["full"], "high")
    assert base_high > base_low
    assert full_high < base_high


# ---------------------------------------------------------------------------
# 8. layerwise similarity: shallow preserved, deep specialized

def test_similarity_shallow_high_deep_low(similarity_runs):
    full_recs, base_recs = similarity_runs

    def ends(records_by_seed):
        shallow, deep = [], []
        for records in records_by_seed:
            cka = records[-1].cka_by_layer
            assert cka is not None
            shallow.append(cka[0][1])
            deep.append(cka[-1][1])
        return float(np.mean(shallow)), float(np.mean(deep))

    full_sh, full_dp = ends(full_recs)
    base_sh, base_dp = ends(base_recs)
    assert full_sh >= base_sh
    assert full_dp <= base_dp


# ---------------------------------------------------------------------------
# 9. counterfactual quality orderings

def test_flip_rate_ordering_at_matched_budget(quality_models):
    gen = rk.GenConfig()
    pfr_gen, pfr_rand = [], []
    for seed, (model, stream) in enumerate(quality_models):
        xte, yte = stream.tasks[1][1]
        lo = stream.tasks[1][2][0]
        n = 128
        xs, ys = xte[:n], yte[:n]
        feats = model.current_feature_np(xs)
        w = model.heads["intra_w"].values
        b = model.heads["intra_b"].values
        intra = [cf.gen_intra(feats[i], int(ys[i] - lo), w, b=b,
                              alpha=gen.alpha, epsilon=gen.epsilon)
                 for i in range(n)]
        p_i, lkld_i, _ = mt.counterfactual_quality(intra, model)

        # calibrate the random perturbation budget until its realized mean
        # divergence matches the generator's (backtracking lands below the
        # requested budget, so one multiplicative correction per round)
        budget = lkld_i
        p_r, lkld_r = None, None
        for _ in range(10):
            rng = np.random.default_rng(seed * 7919 + 13)
            rand = [cf.perturb_random(feats[i], budget, rng)
                    for i in range(n)]
            p_r, lkld_r, _ = mt.counterfactual_quality(rand, model)
            if abs(lkld_r - lkld_i) <= 0.08 * lkld_i:
                break
            budget *= lkld_i / max(lkld_r, 1e-12)
        assert abs(lkld_r - lkld_i) <= 0.10 * lkld_i
        pfr_gen.append(p_i)
        pfr_rand.append(p_r)
    assert np.mean(pfr_gen) > np.mean(pfr_rand)


def test_shared_structure_similarity_gap(quality_models):
    # the interpolation budget is opened up (beta=0.25, loose divergence
    # cap) so the generator actually travels toward its reference; at tiny
    # budgets both sample sets trivially coincide and the measure is
    # uninformative
    gaps = []
    for model, stream in quality_models:
        xte, _ = stream.tasks[1][1]
        xs = xte[:128]
        feats = model.current_feature_np(xs)
        proj = model.project_old_np(xs)
        inter = [cf.gen_inter(feats[i], proj[i], beta=0.25, epsilon=0.5)
                 for i in range(len(xs))]
        _, _, hss = mt.counterfactual_quality(inter, model)
        hss_factual = float(np.mean([_cosine(feats[i], proj[i])
                                     for i in range(len(xs))]))
        gaps.append(hss - hss_factual)
    assert np.mean(gaps) >= 0.05


# ---------------------------------------------------------------------------
# 10. staging is necessary: merged single-stage training underperforms

def test_two_stage_beats_merged_single_stage(two_stage_pair):
    staged_rows, merged_rows = two_stage_pair
    staged = np.mean([r["avg"] for r in staged_rows])
    merged = np.mean([r["avg"] for r in merged_rows])
    assert staged > merged


# ---------------------------------------------------------------------------
# 11. interventional estimate sanity

def test_estimates_are_bounded_on_random_inputs():
    for i in range(200):
        rng = np.random.default_rng(11000 + i)
        model = mdl.ExpandableModel(8, feature_dim=4, hidden_dims=(8,),
                                    seed=i)
        model.expand(3)
        x = rng.standard_normal((16, 8))
        y = rng.integers(0, 3, 16)
        est = rk.estimate_pns_interventional((x, y), model, "intra")
        assert -1.0 <= est <= 1.0


def test_converged_model_shows_strong_intra_effect():
    scm = dt.SyntheticScmConfig(num_tasks=1, classes_per_task=4, input_dim=64,
                                d_c=4, d_mc=1, d_s=4, spurious_strength=0.5,
                                n_train_per_class=150, n_test_per_class=100,
                                seed=0)
    stream = dt.gen_scm_stream(scm)
    train, test, (lo, hi) = stream.tasks[0]
    cfg = tr.TrainConfig(stage1_epochs=8, stage2_epochs=14, batch_size=32,
                         lr=0.01, buffer_capacity=2000, report_limit=128)
    model = mdl.ExpandableModel(64, feature_dim=16, hidden_dims=(32,), seed=0)
    model.expand(hi - lo)
    tr.train_task(model, train, None, cfg, np.random.default_rng(1))
    assert rk.estimate_pns_interventional(test, model, "intra") > 0.5


def test_untrained_model_shows_no_effect_on_signal_free_data():
    # the null experiment uses labels independent of the inputs: an
    # untrained extractor is still a random projection that preserves class
    # geometry, so class-structured inputs transmit a genuine effect even
    # before training and are not a null
    n, d, c = 400, 64, 4
    three_sigma = 3.0 * (0.5 / n) ** 0.5
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d))
        y = rng.integers(0, c, n)
        model = mdl.ExpandableModel(d, feature_dim=16, hidden_dims=(32,),
                                    seed=seed)
        model.expand(c)
        est = rk.estimate_pns_interventional((x, y), model, "intra")
        assert abs(est) < three_sigma


# ---------------------------------------------------------------------------
# 12. reproducibility and persistence

def _artifact_map(run_dir):
    out = {}
    for root, _, names in os.walk(run_dir):
        for name in names:
            path = os.path.join(root, name)
            out[os.path.relpath(path, run_dir)] = path
    return out


def test_identical_config_and_seed_reproduce_byte_identical_outputs(tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    ex.run_experiment(ex.config_from_dict(_tiny_doc(out_a, "rep")))
    ex.run_experiment(ex.config_from_dict(_tiny_doc(out_b, "rep")))

    map_a = _artifact_map(os.path.join(out_a, "rep"))
    map_b = _artifact_map(os.path.join(out_b, "rep"))
    assert sorted(map_a) == sorted(map_b)
    for rel in map_a:
        if os.path.basename(rel) == "epochs.jsonl":
            # wall-clock milliseconds are the one permitted difference
            def scrub(path):
                rows = []
                with open(path) as fh:
                    for line in fh:
                        doc = json.loads(line)
                        doc.pop("wall_ms", None)
                        rows.append(doc)
                return rows
            assert scrub(map_a[rel]) == scrub(map_b[rel])
        else:
            assert _read(map_a[rel]) == _read(map_b[rel]), rel


def test_checkpoint_roundtrip_preserves_forward_bits(tmp_path):
    out = str(tmp_path)
    config = ex.config_from_dict(_tiny_doc(out, "ck"))
    ex.run_experiment(config)
    stream = config.build_stream(0)
    x = np.concatenate([xt for _, (xt, _), _ in stream.tasks])

    first = mdl.load_checkpoint(os.path.join(out, "ck", "seed-0",
                                             "task-1.ckpt"))
    logits_first = first.forward_concat_np(x)
    resaved = os.path.join(out, "resaved.ckpt")
    mdl.save_checkpoint(first, resaved)
    second = mdl.load_checkpoint(resaved)
    logits_second = second.forward_concat_np(x)
    assert logits_first.dtype == logits_second.dtype
    assert np.array_equal(logits_first, logits_second)
