"""Acceptance gate. Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line, printed together in the terminal summary."""

import time

import numpy as np
import torch
from conftest import record_gate

from dicnet.distill import (
    ChannelStatsAccumulator,
    TrainConfig,
    discrepancy_t,
    distill_student,
    distillation_loss_t,
    estimate_channel_stats,
)
from dicnet.metrics import (
    ScoreLabelAccumulator,
    aupr,
    auroc,
    exact_oracle,
    fpr_at_recall,
    report,
)
from dicnet.model import EPS, BackboneConfig, Branch, channel_normalize, copy_as_student
from dicnet.pipeline import Pipeline, RunConfig
from dicnet.scoring import anomaly_score, score_samples, upsample_scores

A = 4
RECALLS = (0.95, 0.85, 0.75)
# a channel is non-degenerate when eps/(b+eps) stays below the 1e-4 std tolerance with margin
NONDEGENERATE = 1e5 * EPS


def gate(name, ok, detail=""):
    record_gate(name, bool(ok), detail)
    assert ok, detail


def test_01_metric_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    s = rng.random(10**4)
    y = rng.integers(0, 2, 10**4).astype(bool)
    labels = np.where(y, A, 0)
    ref = exact_oracle(s, y, recalls=RECALLS)
    ex = report(ScoreLabelAccumulator(A, exact=True).add(s, labels), RECALLS)
    hist = report(ScoreLabelAccumulator(A, bins=4096, score_range=(s.min(), s.max())).add(s, labels), RECALLS)
    elapsed = time.perf_counter() - t0

    def worst(rep):
        errs = [abs(rep.auroc - ref.auroc), abs(rep.aupr - ref.aupr)]
        errs += [abs(rep.fpr_at[k] - ref.fpr_at[k]) for k in ref.fpr_at]
        return max(errs)

    e_ex, e_hist = worst(ex), worst(hist)
    gate("01 metric oracle equivalence", e_ex <= 1e-12 and e_hist <= 1e-3 and elapsed < 10,
         f"exact err {e_ex:.1e}, histogram err {e_hist:.1e}, {elapsed:.2f}s")


def test_02_hand_cases():
    def acc(s, y):
        return ScoreLabelAccumulator(A, exact=True).add(np.array(s), np.array(y))

    a = auroc(acc([0.9, 0.8, 0.7, 0.1], [A, 0, A, 0]))
    ap = aupr(acc([0.9, 0.8, 0.7], [A, 0, A]))
    f = fpr_at_recall(acc([0.9, 0.8, 0.7, 0.1], [A, 0, A, 0]), 1.0)
    ok = a == 0.75 and abs(ap - (0.5 + 0.5 * 2 / 3)) < 1e-15 and f == 0.5
    gate("02 hand-case metrics", ok, f"AUROC {a}, AP {ap:.4f}, FPR@1.0 {f}")


def test_03_normalization_contract():
    rng = np.random.default_rng(3)
    worst_mean = worst_std = worst_inv = 0.0
    checked = 0
    for _ in range(100):
        h, w, c = rng.integers(2, 17), rng.integers(2, 17), rng.integers(1, 65)
        scale = 10.0 ** rng.uniform(-4, 3, size=c)
        f = rng.normal(size=(h, w, c)) * scale + rng.normal(size=c) * 100
        f[..., rng.random(c) < 0.1] = rng.normal()  # some constant channels
        out = channel_normalize(f)
        ok = out.stats.std >= NONDEGENERATE
        checked += int(ok.sum())
        v = out.values[..., ok]
        worst_mean = max(worst_mean, np.abs(v.mean(axis=(0, 1))).max(initial=0))
        worst_std = max(worst_std, np.abs(v.std(axis=(0, 1)) - 1).max(initial=0))
        alpha = 10.0 ** rng.uniform(-1, 1, size=c)
        beta = rng.normal(size=c) * 10
        both = ok & (alpha * out.stats.std >= NONDEGENERATE)
        moved = channel_normalize(alpha * f + beta).values
        worst_inv = max(worst_inv, np.abs(moved[..., both] - out.values[..., both]).max(initial=0))
    gate("03 normalization contract", worst_mean <= 1e-5 and worst_std <= 1e-4 and worst_inv <= 1e-4,
         f"{checked} channels: mean err {worst_mean:.1e}, std err {worst_std:.1e}, invariance err {worst_inv:.1e}")


def test_04_gradient_check():
    t0 = time.perf_counter()
    cfg = BackboneConfig(family="tiny", feature_channels=16, width_mult=0.25, seed=11)
    teacher = Branch(BackboneConfig(**{**cfg.__dict__, "seed": 12}), "teacher", 4).double().eval()
    student = Branch(cfg, "student").double().eval()
    n_params = student.num_parameters()
    rng = np.random.default_rng(4)
    x = torch.from_numpy(rng.normal(size=(2, 3, 32, 32)))

    def loss():
        return distillation_loss_t(discrepancy_t(teacher, student, x))

    student.zero_grad()
    loss().backward()
    params = [p for p in student.parameters()]
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=32, replace=False)
    offsets = np.cumsum(sizes) - sizes
    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, j = params[i], int(flat - offsets[i])
            view = p.view(-1)
            analytic = p.grad.view(-1)[j].item()
            orig = view[j].item()
            view[j] = orig + h
            up = loss().item()
            view[j] = orig - h
            down = loss().item()
            view[j] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    gate("04 gradient check", n_params <= 10**4 and worst < 1e-4 and elapsed < 60,
         f"{n_params} params, 32 coordinates, max rel err {worst:.1e}, {elapsed:.1f}s")


def test_05_fixed_point_and_convergence(toy):
    teacher = toy.teacher
    train = toy.split("train")[:64]
    _, fp_log = distill_student(teacher, train, teacher.config, TrainConfig(batch_size=16, epochs=3, seed=5),
                                student=copy_as_student(teacher))
    fixed = all(v == 0.0 for v in fp_log.losses)
    losses = toy.student_log.losses
    snaps = toy.snapshots()
    first, last = snaps[0], snaps[-1]
    mu0, mu1 = np.abs(first.mu).mean(), np.abs(last.mu).mean()
    s0, s1 = first.sigma.mean(), last.sigma.mean()
    runtime = toy.student_log.records[-1].wall_time
    ok = fixed and losses[-1] < 0.1 * losses[0] and mu1 < mu0 and s1 < s0 and runtime < 600
    gate("05 distillation fixed point and convergence", ok,
         f"fixed-point losses {fp_log.losses}; loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
         f"mean|mu| {mu0:.3e} -> {mu1:.3e} (epoch {first.epoch} -> {last.epoch}); "
         f"mean sigma {s0:.4f} -> {s1:.4f}; distillation {runtime:.0f}s")


def test_06_end_to_end_toy(toy):
    spec = toy.cfg.dataset
    assert spec.num_known_classes == 4 and spec.resolution == (64, 64)
    assert spec.synth.split_sizes == {"train": 512, "val": 64, "test": 64}
    test = toy.split("test")
    dicnet = toy.report.auroc

    control_student = Branch(toy.cfg.student_model, "student").eval()
    control_stats = estimate_channel_stats(toy.teacher, control_student, toy.split(toy.cfg.stats_split))
    acc = ScoreLabelAccumulator(spec.anomaly_id, spec.ignore_id, exact=True)
    for s, m in zip(test, score_samples(toy.teacher, control_student, control_stats, test)):
        acc.add(m.values, s.label)
    control = auroc(acc)

    anom, known = [], []
    for s, m in zip(test, score_samples(toy.teacher, toy.student, toy.stats, test)):
        anom.append(m.values[s.label == spec.anomaly_id])
        known.append(m.values[(s.label != spec.anomaly_id) & (s.label != spec.ignore_id)])
    a_mean, k_mean = np.concatenate(anom).mean(), np.concatenate(known).mean()
    ok = dicnet >= 0.80 and abs(control - 0.5) <= 0.10 and a_mean > k_mean and toy.elapsed < 900
    gate("06 end-to-end toy benchmark", ok,
         f"AUROC {dicnet:.4f}, untrained control {control:.4f}, "
         f"mean score anomaly {a_mean:.4f} vs known {k_mean:.4f}, {toy.elapsed:.0f}s")


def test_07_decomposition_identity(toy):
    worst = 0.0
    cols = []
    for method in ("dicnet", "msp"):
        rep = toy.report if method == "dicnet" else toy.evaluate("test", "msp")
        ne, nc = rep.counts["normal_incorrect"], rep.counts["normal_correct"]
        for r in RECALLS:
            k = f"{r:.2f}"
            e, c = rep.e_fpr_at[k], rep.c_fpr_at[k]
            worst = max(worst, abs((ne * e + nc * c) / (ne + nc) - rep.fpr_at[k]))
        cols = rep.table(method).splitlines()[2].split()
    expected = ["E-FPR95", "E-FPR85", "E-FPR75", "C-FPR95", "C-FPR85", "C-FPR75"]
    gate("07 decomposition identity", worst <= 1e-15 and cols == expected,
         f"max identity err {worst:.1e}, columns {' '.join(cols)}")


def test_08_channel_separability(toy):
    c = toy.cfg.student_model.feature_channels
    out = toy.diagnose(5, k_list=[1, 8, c // 2, c], plot=False)
    means = [r["mean_auroc"] for r in out["rows"]]
    full = out["rows"][-1]["aurocs"]
    ok = all(b >= a for a, b in zip(means, means[1:])) and full == [toy.report.auroc]
    gate("08 channel-separability trend", ok,
         "k=1,8,%d,%d mean AUROC %s; full pipeline %.6f" % (c // 2, c, [round(m, 4) for m in means],
                                                          toy.report.auroc))


def test_09_determinism(toy, tmp_path):
    rerun = Pipeline(RunConfig(output_dir=str(tmp_path)), reuse=False)
    first = toy.report.to_json()
    second = rerun.evaluate("test", "dicnet").to_json()
    gate("09 determinism", first == second, f"{len(first)} bytes, identical={first == second}")


def test_10_scoring_algebra():
    rng = np.random.default_rng(10)
    neg = zero = shift = 0
    for _ in range(1000):
        n, h, w, c = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 17)
        d = rng.normal(size=(n, h, w, c)) * 10.0 ** rng.uniform(-3, 3)
        stats = ChannelStatsAccumulator().update(d).finalize()
        scores = [anomaly_score(x, stats) for x in d]
        up = [upsample_scores(s, 8 * h, 8 * w) for s in scores]
        neg += any((s < 0).any() for s in scores + up)
        # zero law: zero exactly where d equals mu in every channel, positive elsewhere
        x = stats.mu + rng.normal(size=(h, w, c)) * 10.0 ** rng.uniform(-3, 3)
        at_mu = rng.random((h, w)) < 0.5
        x[at_mu] = stats.mu
        s0 = anomaly_score(x, stats)
        zero += not (np.all(s0[at_mu] == 0) and np.all(s0[~at_mu] > 0))
        # shift consistency: shift every d by kappa and re-estimate
        kappa = rng.normal(size=c) * 10
        shifted = ChannelStatsAccumulator().update(d + kappa).finalize()
        for x, s in zip(d, scores):
            if not np.allclose(anomaly_score(x + kappa, shifted), s, rtol=1e-6, atol=1e-9 * s.max(initial=1)):
                shift += 1
                break
    gate("10 scoring algebra", neg == zero == shift == 0,
         f"1000 trials: non-negativity failures {neg}, zero-law failures {zero}, shift failures {shift}")
