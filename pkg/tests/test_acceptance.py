"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines live; they
are also collected in the terminal summary by ``conftest.py``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from oracles import (
    analytic_inside_length,
    analytic_length,
    brute_overall,
    contracted_branch_count,
    flood_fill_components,
    render,
    small_case,
    subtree,
)
from scipy import ndimage

from airwayseg.backbone import LayerSpec, probe_receptive_field, probe_receptive_field_3d, receptive_field_dilated
from airwayseg.backbone import ModelConfig, build_model, receptive_field_standard
from airwayseg.config import RunConfig
from airwayseg.experiment import run_ablation
from airwayseg.loss import grad_airway, grad_background, loss_airway, loss_background
from airwayseg.metrics import evaluate
from airwayseg.phantom import PhantomConfig, generate
from airwayseg.postproc import ReconnectConfig, as_confidence, postprocess
from airwayseg.runlog import RunLog
from airwayseg.sampler import MORE_HIGH, MORE_LOW, SamplerConfig, build_table, draw_indices
from airwayseg.semisup import TeacherStudentConfig, draw_threshold, run_teacher_student
from airwayseg.training import TrainConfig
from airwayseg.volume import ConfidenceMaps

RESULTS = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _rel(x, ref):
    return float(np.max(np.abs(x - ref)) / max(np.max(np.abs(ref)), 1e-12))


def _autograd(kind, p, a, w):
    t = torch.tensor(p, dtype=torch.float64, requires_grad=True)
    at = torch.tensor(a, dtype=torch.float64)
    q = t**2 if kind == "airway" else t
    loss = 1 - 2 * w * (q * at).sum() / ((q * q).sum() + (at * at).sum())
    loss.backward()
    return t.grad.numpy()


def _central(f, p, h=1e-4):
    g = np.zeros_like(p)
    flat, gflat = p.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(p)
        flat[i] = old - h
        down = f(p)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def test_criterion_1_gradient_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        shape = tuple(int(n) for n in rng.integers(4, 9, size=3))
        p = rng.uniform(0.02, 0.98, size=shape)
        a = (rng.random(shape) < rng.uniform(0.1, 0.6)).astype(float)
        a.flat[0] = 1.0
        # printed form first (w = 1), then the weighted form
        w = 1.0 if i < 50 else float(rng.uniform(0.01, 10.0))
        for kind, fn, gfn, target in (
            ("airway", loss_airway, grad_airway, a),
            ("background", loss_background, grad_background, 1 - a),
        ):
            g = gfn(p, target, w)
            worst = max(worst, _rel(g, _autograd(kind, p, target, w)),
                        _rel(g, _central(lambda q: fn(q, target, w), p.copy())))
    seconds = time.perf_counter() - t0
    report("1", worst < 1e-5 and seconds < 10,
           f"100 instances, max relative error {worst:.2e} (< 1e-5), {seconds:.1f} s (< 10 s)")


def test_criterion_2_loss_sanity():
    rng = np.random.default_rng(7)
    zero = True
    for _ in range(50):
        a = (rng.random((5, 6, 7)) < 0.3).astype(float)
        a.flat[0], a.flat[1] = 1.0, 0.0
        zero &= loss_airway(a, a, 1.0) == 0.0 and loss_background(1 - a, 1 - a, 1.0) == 0.0
    value = loss_airway(np.array([0.5]), np.array([1.0]), 1.0)
    ok = zero and abs(value - 0.5294117647058824) <= 1e-9
    report("2", ok, f"L(a, a) == 0 exactly on 50 masks: {zero}; single voxel p=0.5 -> {value:.12f}")


def _random_stack(rng):
    return [LayerSpec(int(rng.choice([3, 5])), int(rng.choice([1, 2])), int(rng.integers(1, 5)))
            for _ in range(int(rng.integers(1, 6)))]


def test_criterion_3_receptive_field():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    mismatches = []
    cross_checked = 0
    for i in range(20):
        layers = _random_stack(rng)
        rf = receptive_field_dilated(layers)
        if all(l.dilation == 1 for l in layers):
            assert receptive_field_standard(layers) == rf
        probed = probe_receptive_field(layers)
        if probed != (rf, rf, rf):
            mismatches.append((layers, rf, probed))
        if rf <= 40:
            cross_checked += 1
            if probe_receptive_field_3d(layers, rf + 8) != (rf, rf, rf):
                mismatches.append((layers, rf, "3d"))
    seconds = time.perf_counter() - t0
    report("3", not mismatches and seconds < 60,
           f"20 stacks, {len(mismatches)} mismatches ({cross_checked} also probed in full 3D), {seconds:.1f} s (< 60 s)")


def _expected_probabilities(t, beta, mode):
    """Weights written out directly: beta*t or 1/(beta*t), empty cuboids at 1% of the mean airway weight."""
    w = []
    for x in t:
        if x == 0:
            w.append(None)
        else:
            w.append(beta * x if mode == MORE_HIGH else 1.0 / (beta * x))
    airway = [v for v in w if v is not None]
    zero = 0.01 * (sum(airway) / len(airway))
    w = np.array([zero if v is None else v for v in w])
    return w / w.sum()


def test_criterion_4_sampler_statistics():
    rng = np.random.default_rng(5)
    draws = 300_000
    worst = 0.0
    reversed_ok = True
    for n, beta in ((2, 1.0), (10, 10.0), (50, 1.0), (100, 3.0)):
        t = rng.choice(np.arange(1, 1001), size=n, replace=False) / 1000.0
        t[rng.random(n) < 0.2] = 0.0
        if not t.any():
            t[0] = 0.5
        cfg = SamplerConfig(beta=beta)
        for mode in (MORE_HIGH, MORE_LOW):
            table = build_table(list(t), cfg, mode)
            expected = _expected_probabilities(t, beta, mode)
            assert np.allclose(table.probabilities, expected, rtol=1e-12, atol=0)
            freq = np.bincount(draw_indices(table, draws, rng), minlength=n) / draws
            worst = max(worst, float(np.max(np.abs(freq - expected))))
        nz = t > 0
        high = build_table(list(t[nz]), cfg, MORE_HIGH).probabilities
        low = build_table(list(t[nz]), cfg, MORE_LOW).probabilities
        reversed_ok &= list(np.argsort(high, kind="stable")) == list(np.argsort(low, kind="stable"))[::-1]
    report("4", worst <= 0.01 and reversed_ok,
           f"3e5 draws per table, max |freq - p| = {worst:.4f} (<= 0.01); more_low ranking reversed: {reversed_ok}")


def _metric_pairs():
    """25 (pred, ref, expected) triples with structural expectations from phantom metadata."""
    pairs = []
    for seed in range(5):
        case = small_case(seed)
        total = case.tree_length()
        leaves = [b.index for b in case.branches if b.generation == 2]
        mids = [b.index for b in case.branches if b.generation == 1]
        for removed in ([leaves[0]], [mids[0]], leaves[:2], [leaves[0], leaves[3]]):
            kept = subtree(case, removed)
            expected = {
                "bd": len(kept) / case.branch_count,
                "br": contracted_branch_count(case, kept) / case.branch_count,
                "td": analytic_inside_length(case, kept) / total,
                "tr": analytic_length(case, kept) / total,
            }
            pairs.append((render(case, kept), case.mask.data, case.skeleton, expected))
        # superset: the full tree predicted against a pruned reference
        kept = subtree(case, [mids[1]])
        n_ref = contracted_branch_count(case, kept)
        l_ref = analytic_length(case, kept)
        expected = {"bd": 1.0, "td": 1.0, "br": case.branch_count / n_ref, "tr": total / l_ref}
        pairs.append((case.mask.data, render(case, kept), None, expected))
    return pairs


def test_criterion_5_metric_oracles():
    pairs = _metric_pairs()
    assert len(pairs) == 25
    overlap_bad, count_bad, length_bad = 0, 0, 0
    worst_len = 0.0
    for pred, ref, ref_skel, exp in pairs:
        r = evaluate(pred, ref, ref_skel=ref_skel)
        brute = brute_overall(pred, ref)
        overlap_bad += any(getattr(r, k) != v for k, v in brute.items())
        count_bad += not (np.isclose(r.bd, exp["bd"], rtol=0, atol=1e-12)
                          and np.isclose(r.br, exp["br"], rtol=0, atol=1e-12))
        for k in ("td", "tr"):
            dev = abs(getattr(r, k) / exp[k] - 1)
            worst_len = max(worst_len, dev)
            length_bad += dev > 0.05
    ok = overlap_bad == 0 and count_bad == 0 and length_bad == 0
    report("5", ok, f"25 pairs: overlap mismatches {overlap_bad}, count mismatches {count_bad}, "
                    f"worst length deviation {100 * worst_len:.1f}% (<= 5%)")


def _smooth_map(seed, shape=(24, 24, 24), sigma=1.5):
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.random(shape), sigma)
    return (noise - noise.min()) / (noise.max() - noise.min())


def test_criterion_6_postprocessing_contract():
    single, idempotent = 0, 0
    for seed in range(20):
        maps = ConfidenceMaps(_smooth_map(seed), 1 - _smooth_map(seed))
        once = postprocess(maps)
        single += len(flood_fill_components(once.data)) == 1
        idempotent += np.array_equal(postprocess(as_confidence(once)).data, once.data)
    a = np.zeros((9, 40, 9), np.float32)
    a[3:6, 2:21, 3:6] = 0.9
    a[3:6, 21:23, 3:6] = 0.4
    a[3:6, 23:31, 3:6] = 0.9
    gap = postprocess(ConfidenceMaps(a, 1 - a), ReconnectConfig(0.5, 5.0, 0.3))
    reconnected = len(flood_fill_components(gap.data)) == 1 and gap.data[4, 28, 4] and gap.data[4, 21, 4]
    report("6", single == 20 and idempotent == 20 and reconnected,
           f"single component {single}/20, idempotent {idempotent}/20, 2-voxel gap reconnected: {bool(reconnected)}")


def test_criterion_9_teacher_student_fidelity():
    cfg_case = PhantomConfig(max_generation=1, volume_shape=(32, 48, 48), root_radius=3, radius_ratio=0.8,
                             root_fraction=0.4)
    cases = [generate(replace(cfg_case, seed=s), name=f"c{s}", with_skeleton=False) for s in range(4)]
    log = RunLog()
    model = build_model(ModelConfig(channels=(4, 8), patch_shape=(16, 16, 16)), seed=0)
    ts = TeacherStudentConfig(n_batches=3, n_iterations=2)
    run_teacher_student(cases[:1], cases[1:], ts, model, TrainConfig(steps=1, augment=False), log=log)
    kinds = [r["event"] for r in log.records]
    expected = (["pseudo_label", "train_student"] * 3 + ["teacher_update"]) * 2
    order_ok = kinds == expected
    batches = [(r["iteration"], r["batch"]) for r in log.records if r["event"] == "train_student"]
    order_ok &= batches == [(i, b) for i in range(2) for b in range(3)]
    rng = np.random.default_rng(9)
    devs = []
    for q in (0.2, 0.5, 0.8):
        draws = [draw_threshold(TeacherStudentConfig(q_t=q), rng) for _ in range(10_000)]
        devs.append(abs(draws.count(0.5) / 10_000 - q))
    report("9", order_ok and max(devs) <= 0.02,
           f"event order matches 2x3 nested loop: {order_ok}; max |freq(t=0.5) - q_t| = {max(devs):.4f} (<= 0.02)")


# Criteria 7 and 8 share one run matrix: generation-3 phantoms at 64x128x128, 20 labeled cases,
# 30 unlabeled cases for the semi variant, 5 held-out cases, 800 steps per model.
LEARNING_CFG = RunConfig(threads=1).with_overrides([
    "phantom.max_generation=3", "phantom.volume_shape=[64,128,128]",
    "data.n_cases=55", "data.n_test=5", "data.n_labeled=20",
    "model.channels=[8,16,32]", "model.patch_shape=[32,32,32]",
    "train.steps=800", "semi.n_iterations=1", "semi.student_steps=100",
])
LEARNING_VARIANTS = ["proposed", "dice", "same_frequency", "more_on_fine_beta10", "semi"]
LEARNING_SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="session")
def learning_runs():
    log = RunLog()
    result = run_ablation(LEARNING_CFG, LEARNING_VARIANTS, LEARNING_SEEDS, log)
    return result, log


def _mean(result, variant, key, seeds=None):
    rows = result.per_seed[variant][: seeds or len(result.per_seed[variant])]
    return float(np.mean([r[key] for r in rows]))


def test_criterion_7_end_to_end_learning(learning_runs):
    result, _ = learning_runs
    dsc = _mean(result, "proposed", "dsc", 3)
    td = _mean(result, "proposed", "td", 3)
    minutes = result.seconds["proposed"] / len(LEARNING_SEEDS) / 60
    per_seed = ", ".join(f"{r['dsc']:.3f}" for r in result.per_seed["proposed"][:3])
    report("7", dsc >= 0.85 and td >= 0.80 and minutes < 30,
           f"3-seed mean DSC {dsc:.3f} (>= 0.85, per seed {per_seed}), TD {td:.3f} (>= 0.80), "
           f"{minutes:.1f} min per seed on {torch.get_num_threads()} core(s) (< 30)")


def test_criterion_8a_loss_direction(learning_runs):
    result, _ = learning_runs
    sens = _mean(result, "proposed", "sensitivity"), _mean(result, "dice", "sensitivity")
    prec = _mean(result, "proposed", "precision"), _mean(result, "dice", "precision")
    report("8a", sens[0] > sens[1] and prec[1] >= prec[0],
           f"sensitivity proposed {sens[0]:.4f} > dice {sens[1]:.4f}; "
           f"precision dice {prec[1]:.4f} >= proposed {prec[0]:.4f} ({len(LEARNING_SEEDS)} seeds)")


def test_criterion_8b_sampling_direction(learning_runs):
    result, _ = learning_runs
    it, same = _mean(result, "proposed", "td"), _mean(result, "same_frequency", "td")
    report("8b", it >= same, f"TD iterative {it:.4f} >= same-frequency {same:.4f} ({len(LEARNING_SEEDS)} seeds)")


def test_criterion_8c_more_on_fine_beta10(learning_runs):
    result, _ = learning_runs
    dsc = _mean(result, "more_on_fine_beta10", "dsc")
    report("8c", dsc < 0.2, f"more-on-fine beta=10 mean DSC {dsc:.3f} (< 0.2 required); "
                            f"proposed {_mean(result, 'proposed', 'dsc'):.3f}")


def test_criterion_8d_semi_direction(learning_runs):
    result, _ = learning_runs
    semi, sup = _mean(result, "semi", "td"), _mean(result, "proposed", "td")
    d = LEARNING_CFG.data
    report("8d", semi >= sup, f"TD teacher-student ({d.n_cases - d.n_test - d.n_labeled} unlabeled) {semi:.4f} "
                              f">= supervised {sup:.4f} ({len(LEARNING_SEEDS)} seeds)")
