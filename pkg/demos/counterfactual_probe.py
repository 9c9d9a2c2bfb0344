"""What the two counterfactual generators actually produce.

Trains a two-task model, then generates within-task counterfactuals (label
flipped under a divergence budget) and cross-task counterfactuals
(interpolation toward the projected old representation), and compares them
against random perturbations of the same magnitude.

Run from the repository root:

    python3 demos/counterfactual_probe.py
"""

import numpy as np

from cpnslab import counterfactual as cf
from cpnslab import data as dt
from cpnslab import metrics as mt
from cpnslab import model as mdl
from cpnslab import trainer as tr


def train_two_task(seed=0):
    scm = dt.SyntheticScmConfig(num_tasks=2, classes_per_task=4,
                                input_dim=64, d_c=4, d_mc=1, d_s=4,
                                overlap=0.7, spurious_strength=0.95,
                                n_train_per_class=150, n_test_per_class=100,
                                seed=seed)
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


def main():
    print("training a two-task model ...")
    model, stream = train_two_task()
    xte, yte = stream.tasks[1][1]
    lo = stream.tasks[1][2][0]
    n = 128
    xs, ys = xte[:n], yte[:n]
    feats = model.current_feature_np(xs)
    w = model.heads["intra_w"].values
    b = model.heads["intra_b"].values

    intra = [cf.gen_intra(feats[i], int(ys[i] - lo), w, b=b)
             for i in range(n)]
    pfr, lkld, _ = mt.counterfactual_quality(intra, model)
    print(f"\nwithin-task generator: flip rate {pfr:.3f} "
          f"at mean divergence {lkld:.4f}")

    # one multiplicative correction: backtracking lands below the requested
    # budget, so the first round's realized divergence recalibrates it
    budget = lkld
    for _ in range(2):
        rng = np.random.default_rng(7)
        rand = [cf.perturb_random(feats[i], budget, rng) for i in range(n)]
        pfr_r, lkld_r, _ = mt.counterfactual_quality(rand, model)
        budget *= lkld / max(lkld_r, 1e-12)
    print(f"random perturbation:   flip rate {pfr_r:.3f} "
          f"at mean divergence {lkld_r:.4f}")
    print("targeted perturbations of the same size flip far more labels;"
          "\nthe necessity signal is in the direction, not the magnitude.")

    proj = model.project_old_np(xs)
    inter = [cf.gen_inter(feats[i], proj[i], beta=0.25, epsilon=0.5)
             for i in range(n)]
    _, _, hss = mt.counterfactual_quality(inter, model)

    def cosine(a, c):
        den = np.linalg.norm(a) * np.linalg.norm(c)
        return float(a @ c / den) if den else 0.0

    hss_factual = float(np.mean([cosine(feats[i], proj[i])
                                 for i in range(n)]))
    print(f"\ncross-task generator: similarity to the projected old "
          f"representation {hss:.3f}")
    print(f"factual features:     {hss_factual:.3f}")
    print("the generator interpolates toward the old representation, so "
          "its samples\nprobe the shared structure the projector has "
          "learned.")


if __name__ == "__main__":
    main()
