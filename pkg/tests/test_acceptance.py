"""Acceptance criteria 1-8.

Each test records one ``PASS``/``FAIL`` line (printed in the terminal summary
by ``conftest.py``) before asserting, so a failing criterion still reports
what it measured.
"""

import itertools
import json
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from countadapt import gradsuite
from countadapt import train as T
from countadapt.cli import main
from countadapt.core import Tape, read_dmap, write_dmap
from countadapt.density import AdaptiveSigma, FixedSigma, PointAnnotation, generate_density
from countadapt.losses import adversarial_loss, density_loss, discriminator_loss, ranking_loss
from countadapt.metrics import evaluate_dataset, gmae, mse
from countadapt.pyramid import DEFAULT_SCALES, build_pyramid, sample_patch
from countadapt.synth import DomainSpec, generate_domain, preset_shift_pair, save_dataset


def record(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def rel_close(got, want, rtol):
    return abs(got - want) <= rtol * max(abs(want), 1e-300)


# -- independent oracles -----------------------------------------------------


def ranking_bruteforce(counts, margin=0.0):
    return sum(max(0.0, counts[j] - counts[i] + margin) for i in range(len(counts)) for j in range(i))


def bce_bruteforce(src_maps, tgt_maps):
    def log_sig(x):
        return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))

    m = len(src_maps)
    total = sum(np.mean([-log_sig(v) for v in np.ravel(s)]) for s in src_maps)
    total += sum(np.mean([-log_sig(-v) for v in np.ravel(t)]) for t in tgt_maps)
    return total / (2 * m)


def gmae_bruteforce(pred, gt, level):
    h, w = pred.shape
    parts = 2**level
    total = 0.0
    for i, j in itertools.product(range(parts), repeat=2):
        rows = slice(i * h // parts, (i + 1) * h // parts)
        cols = slice(j * w // parts, (j + 1) * w // parts)
        total += abs(math.fsum(pred[rows, cols].ravel()) - math.fsum(gt[rows, cols].ravel()))
    return total


# -- criteria ----------------------------------------------------------------


def test_1_gradient_suite():
    start = time.perf_counter()
    results = gradsuite.run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda k: results[k]["max_rel_error"])
    failed = [k for k, r in results.items() if not r["ok"]]
    ok = not failed and elapsed < 120
    record(
        1, ok,
        f"{len(results)} cases, worst {worst} rel err {results[worst]['max_rel_error']:.2e} (< 1e-4), "
        f"{elapsed:.1f} s (< 120 s)" + (f", failing: {failed}" if failed else ""),
    )
    assert ok


def test_2_loss_oracles():
    rtol = 1e-9
    checks = []

    x = np.random.default_rng(0).random((2, 1, 4, 4))
    checks.append(("dens equal", float(density_loss(x, x)), 0.0))
    pred = np.zeros((1, 1, 3, 3))
    pred[0, 0, 1, 1] = 2.0
    checks.append(("dens one pixel", float(density_loss(pred, np.zeros_like(pred))), 2.0))
    pred = np.zeros((2, 1, 2, 2))
    pred[0, 0, 0, 0] = 2.0
    pred[1, 0] = 2.0
    checks.append(("dens two items", float(density_loss(pred, np.zeros_like(pred))), 5.0))

    zero = [np.zeros((1, 1, 3, 3))]
    checks.append(("disc zero logits", float(discriminator_loss(zero, zero)), math.log(2)))
    rng = np.random.default_rng(1)
    src = [rng.standard_normal((1, 1, 2, 3)) * 4 for _ in range(3)]
    tgt = [rng.standard_normal((1, 1, 2, 3)) * 4 for _ in range(3)]
    checks.append(("disc brute force", float(discriminator_loss(src, tgt)), bce_bruteforce(src, tgt)))

    checks.append(("adv zero logits", float(adversarial_loss(zero)), math.log(2) / 2))
    tape = Tape()
    logits = tape.param("z", np.zeros((3, 1, 2, 2)))
    grad = tape.gradients(adversarial_loss(logits))["z"]
    checks.append(("adv grad at 0", float(grad.max()), -(1 / 6) * 0.5 / 4))
    checks.append(("adv grad at 0 (min)", float(grad.min()), -(1 / 6) * 0.5 / 4))

    checks.append(("rank monotone", float(ranking_loss([1.0, 2.0, 3.0, 4.0])), 0.0))
    checks.append(("rank pair", float(ranking_loss([5.0, 3.0])), 2.0))
    checks.append(("rank S=3 example", float(ranking_loss([3.0, 1.0, 2.0])), ranking_bruteforce([3.0, 1.0, 2.0])))
    for seed in range(200):
        counts = list(np.random.default_rng(seed).uniform(-20, 20, 3))
        checks.append((f"rank S=3 seed {seed}", float(ranking_loss(counts)), ranking_bruteforce(counts)))

    # limits: perfect classifier and fooled discriminator
    limits_ok = float(discriminator_loss([np.full((1, 1, 2, 2), 60.0)], [np.full((1, 1, 2, 2), -60.0)])) < 1e-20
    limits_ok &= float(adversarial_loss([np.full((1, 1, 2, 2), 60.0)])) < 1e-20
    limits_ok &= float(discriminator_loss(tgt, src)) != float(discriminator_loss(src, tgt))

    bad = [name for name, got, want in checks if not (got == want or rel_close(got, want, rtol))]
    ok = not bad and limits_ok
    record(2, ok, f"{len(checks)} oracle values within 1e-9 relative, limit cases {'ok' if limits_ok else 'wrong'}"
           + (f", mismatches: {bad[:5]}" if bad else ""))
    assert ok


def test_3_count_conservation():
    rng = np.random.default_rng(3)
    worst = 0.0
    evaluated = 0
    for i in range(100):
        h, w = (int(v) * 8 for v in rng.integers(2, 9, 2))
        n = int(rng.integers(0, 51))
        points = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        points = np.minimum(points, np.nextafter([w, h], 0))
        ann = PointAnnotation(image_id=str(i), points=points, image_size=(h, w))
        for mode in (FixedSigma(float(rng.uniform(0.5, 8))), AdaptiveSigma()):
            for scale in (1, 2, 4, 8):
                total = math.fsum(generate_density(ann, mode, scale).grid.ravel())
                worst = max(worst, abs(total - n) / max(n, 1))
                evaluated += 1
    ok = worst <= 1e-6
    record(3, ok, f"{evaluated} maps, worst |integral - count| per point {worst:.2e} (<= 1e-6)")
    assert ok


def test_4_metric_identities():
    rng = np.random.default_rng(4)
    pred_maps, gt_maps = [], []
    exact, monotone, oracle = True, True, True
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(8, 41, 2))
        pred, gt = rng.random((h, w)) * rng.random(), rng.random((h, w)) * rng.random()
        pred_maps.append(pred)
        gt_maps.append(gt)
        single = evaluate_dataset(lambda _, p=pred: p, [gt], levels=(0,))
        exact &= single["gmae"]["0"] == single["mae"]
        values = [gmae(pred, gt, L) for L in range(4)]
        monotone &= all(a <= b + 1e-12 * b for a, b in zip(values, values[1:]))
        oracle &= all(rel_close(v, gmae_bruteforce(pred, gt, L), 1e-9) for L, v in enumerate(values))
    report = evaluate_dataset(lambda i: pred_maps[i], gt_maps, levels=(0, 1, 2, 3))
    exact &= report["gmae"]["0"] == report["mae"]
    mse_ok = mse([(3, 5)]) == 2.0
    mse_ok &= rel_close(mse([(0, 3), (0, 4)]), math.sqrt(12.5), 1e-12)
    mse_ok &= rel_close(mse([(1, 2), (4, 2), (0, 0.5)]), math.sqrt((1 + 4 + 0.25) / 3), 1e-12)
    mse_ok &= mse([(7, 7), (2, 2)]) == 0.0
    ok = exact and monotone and oracle and mse_ok
    record(4, ok, f"GMAE(0)==MAE exact: {exact}; GMAE monotone in L: {monotone}; "
           f"brute-force cells agree: {oracle}; MSE hand cases: {mse_ok}")
    assert ok


def test_5_pyramid_invariants():
    rng = np.random.default_rng(5)
    nested = centred = counts_ok = rank_ok = True
    worst_centre = 0.0
    for i in range(1000):
        h, w = (int(v) for v in rng.integers(40, 200, 2))
        n = int(rng.integers(0, 80))
        points = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        ann = PointAnnotation(image_id=str(i), points=np.minimum(points, np.nextafter([w, h], 0)), image_size=(h, w))
        scales = DEFAULT_SCALES if i % 2 else tuple(rng.uniform(0.4, 1.0, int(rng.integers(1, 5))))
        _, rect = sample_patch(np.zeros((h, w)), rng, float(rng.uniform(0.5, 1.0)))
        pyr = build_pyramid(np.zeros((h, w)), rect, scales, input_size=(8, 8), ann=ann)
        rects = [c.rect for c in pyr.crops]
        px0, py0, px1, py1 = rect
        for (a0, b0, a1, b1), (c0, d0, c1, d1) in zip(rects, rects[1:]):
            nested &= c0 <= a0 and d0 <= b0 and a1 <= c1 and b1 <= d1
        for x0, y0, x1, y1 in rects:
            off = max(abs((x0 + x1) - (px0 + px1)) / 2, abs((y0 + y1) - (py0 + py1)) / 2)
            worst_centre = max(worst_centre, off)
        counts = pyr.gt_counts
        counts_ok &= all(a <= b for a, b in zip(counts, counts[1:]))
        rank_ok &= float(ranking_loss(counts)) == 0.0
    centred = worst_centre <= 0.5
    ok = nested and centred and counts_ok and rank_ok
    record(5, ok, f"1000 pyramids: nested {nested}, worst centre offset {worst_centre:.2f} px (<= 0.5), "
           f"counts monotone {counts_ok}, ranking loss of GT counts exactly 0: {rank_ok}")
    assert ok


def test_6_training_mechanics():
    spec_s, spec_t = preset_shift_pair(6)
    shrink = dict(image_size=(128, 128))
    src = generate_domain(DomainSpec(**{**spec_s.to_dict(), **shrink}), 8)
    tgt = generate_domain(DomainSpec(**{**spec_t.to_dict(), **shrink}), 8)
    cfg = T.TrainConfig(
        input_size=(64, 64), stage1_steps=20, stage2_steps=200, pretrain_optimizer="adam",
        pretrain_lr=1e-4, dtype="float64", seed=6,
    )
    start = time.perf_counter()
    ckpt = T.pretrain(cfg, src, T.TrainLog())
    log = T.TrainLog()
    T.adapt(cfg, ckpt, src, tgt, log)
    elapsed = time.perf_counter() - start

    records = [r for r in log.records if r.get("stage") == 2]
    frozen = max(max(r["frozen_delta_g"], r["frozen_delta_d"]) for r in records)
    finite = all(math.isfinite(r[k]) for r in records for k in ("L_dens", "L_disc", "L_adv", "L_rank"))
    lr_err = max(abs(r["lr_d"] - cfg.lr_d * (1 - r["step"] / cfg.stage2_steps) ** 0.9) for r in records)
    ok = len(records) == 200 and frozen == 0.0 and finite and lr_err <= 1e-12 and elapsed < 600
    record(6, ok, f"{len(records)} adaption steps at 64x64: max frozen-side delta {frozen:g} (== 0), "
           f"losses finite {finite}, lr_d max err {lr_err:.1e} (<= 1e-12), {elapsed:.0f} s (< 600 s)")
    assert ok


def e2e_config(seed: int) -> T.TrainConfig:
    """Desk-scale budget for the synthetic shift experiment.

    The generator optimizer and learning rates are raised from the defaults,
    which are too slow to move a freshly initialised net in 1000 steps.  The
    output layer starts small with a positive bias so every density cell
    begins active near ground-truth scale; with plain He init the final ReLU
    is dead for some seeds before training starts.  The generator rate decays
    over adaption like the discriminator's, so the last few single-patch
    updates cannot throw the final checkpoint far off.
    """
    return T.TrainConfig(
        seed=seed,
        input_size=(128, 128),
        out_weight_scale=0.01,
        out_bias=0.01,
        stage1_steps=1000,
        stage2_steps=200,
        pretrain_optimizer="adam",
        pretrain_lr=1e-4,
        g_optimizer="adam",
        lr_g=3e-5,
        lr_g_decay=True,
    )


def test_7_end_to_end_adaption():
    start = time.perf_counter()
    rows = []
    for seed in range(5):
        spec_s, spec_t = preset_shift_pair(seed * 10)
        source = generate_domain(spec_s, 50)
        target = generate_domain(spec_t, 50)
        target_eval = generate_domain(spec_t, 50, start=50)
        cfg = e2e_config(seed)
        pre = T.pretrain(cfg, source, T.TrainLog())
        baseline = T.evaluate_checkpoint(pre, target_eval, levels=(0,))["mae"]
        # adaption sees target images only
        unlabelled = [type(s)(image=s.image, image_id=s.image_id) for s in target]
        adapted = T.evaluate_checkpoint(T.adapt(cfg, pre, source, unlabelled, T.TrainLog()), target_eval, levels=(0,))["mae"]
        rows.append((seed, baseline, adapted))
        print(f"seed {seed}: target-eval MAE {baseline:.3f} -> {adapted:.3f}")
    elapsed = time.perf_counter() - start
    better = sum(a < b for _, b, a in rows)
    worst_ratio = max(a / b for _, b, a in rows)
    ok = better >= 3 and all(a <= 1.1 * b for _, b, a in rows if a >= b) and elapsed < 1800
    summary = ", ".join(f"{b:.2f}->{a:.2f}" for _, b, a in rows)
    record(7, ok, f"adapted beats baseline in {better}/5 seeds (>= 3), worst adapted/baseline {worst_ratio:.3f} "
           f"(<= 1.10) [{summary}], {elapsed / 60:.1f} min (< 30 min)")
    assert ok


def test_8_determinism_and_persistence(tmp_path, capsys):
    src = generate_domain(DomainSpec(name="s", count_dist=("poisson", 8), blob_radius_range=(1.5, 2.5), image_size=(64, 64), seed=1), 4)
    tgt = generate_domain(DomainSpec(name="t", count_dist=("poisson", 3), blob_radius_range=(3, 5), image_size=(64, 64), seed=2), 4)
    cfg = T.TrainConfig(
        input_size=(32, 32), front_channels=((4, 4), (8, 8)), backend_channels=8, disc_channels=(4, 4, 4, 4, 1),
        stage1_steps=8, stage2_steps=6, pretrain_optimizer="adam", pretrain_lr=1e-3, seed=8,
    )
    digests = []
    for run in "ab":
        log = T.TrainLog(tmp_path / f"{run}.jsonl")
        ckpt = T.adapt(cfg, T.pretrain(cfg, src, log), src, tgt, log)
        ckpt.save(tmp_path / f"{run}.ckpt")
        digests.append(((tmp_path / f"{run}.ckpt").read_bytes(), (tmp_path / f"{run}.jsonl").read_bytes()))
    reproducible = digests[0] == digests[1]

    T.Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "again.ckpt")
    ckpt_round_trip = (tmp_path / "again.ckpt").read_bytes() == digests[0][0]

    grid = np.random.default_rng(8).random((1, 1, 13, 7)).astype(np.float32)
    write_dmap(tmp_path / "g.dmap", grid)
    back = read_dmap(tmp_path / "g.dmap")
    write_dmap(tmp_path / "h.dmap", back)
    dmap_round_trip = back.tobytes() == grid[0, 0].tobytes() and (
        (tmp_path / "g.dmap").read_bytes() == (tmp_path / "h.dmap").read_bytes()
    )

    save_dataset(tgt, tmp_path / "data")
    code = main(["eval", "--oracle", "--data", str(tmp_path / "data"), "--gmae-levels", "0,1,2,3"])
    report = json.loads(capsys.readouterr().out)
    oracle_zero = code == 0 and report["mae"] == report["mse"] == 0 and all(v == 0 for v in report["gmae"].values())

    ok = reproducible and ckpt_round_trip and dmap_round_trip and oracle_zero
    record(8, ok, f"same-seed checkpoint+log bitwise equal: {reproducible}; checkpoint round trip: {ckpt_round_trip}; "
           f"DMAP round trip: {dmap_round_trip}; oracle eval all zero: {oracle_zero}")
    assert ok
