"""End-to-end acceptance suite. Each test prints one PASS/FAIL line
(visible under pytest -s) and asserts the same condition."""

import time

import numpy as np
import pytest

from sonoseg import config
from sonoseg.boxes import decode_deltas, encode_deltas
from sonoseg.cli import EXIT_OK, main
from sonoseg.data import dice_pair, mean_dice
from sonoseg.gradchecks import run_suite, summarize
from sonoseg.losses import (bce_with_logits_mean, classification_loss,
                            mask_loss, objectness_loss, smooth_l1)
from sonoseg.segmenter import OrganSegmenter
from sonoseg.srnn import DIRECTIONS, IrnnWeights, SrnnConfig, scan, srnn_module
from sonoseg.synth import gen_sample
from sonoseg.tensor import ConvWeights, Tensor4


def report(num, ok, detail):
    line = f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


def t4(arr, dtype=np.float64):
    return Tensor4(np.asarray(arr, dtype=dtype))


def test_acceptance_1_gradient_integrity():
    t0 = time.time()
    reports = run_suite(trials=10, tolerance=1e-4)
    text, ok = summarize(reports)
    elapsed = time.time() - t0
    worst = max(r["worst"] for r in reports)
    if not ok:
        print(text)
    report(1, ok and elapsed < 300,
           f"{len(reports)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_acceptance_2_irnn_cumsum_oracle():
    def directional_cumsum(data, direction):
        if direction == "right":
            return np.cumsum(data, axis=3)
        if direction == "left":
            return np.cumsum(data[:, :, :, ::-1], axis=3)[:, :, :, ::-1]
        if direction == "down":
            return np.cumsum(data, axis=2)
        return np.cumsum(data[:, :, ::-1, :], axis=2)[:, :, ::-1, :]

    rng = np.random.default_rng(2024)
    exact = True
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        x = rng.uniform(0.0, 3.0, size=(n, c, h, w))
        eye = Tensor4(np.eye(c).reshape(c, c, 1, 1))
        for d in DIRECTIONS:
            got = scan(t4(x), eye, d).data
            if not np.array_equal(got, directional_cumsum(x, d)):
                exact = False
    report(2, exact, "100 tensors x 4 directions equal directional cumsum "
           "exactly with identity weights")


def _identity_round():
    one = Tensor4(np.ones((1, 1, 1, 1)))
    zero = Tensor4(np.zeros((1, 1, 1, 1)))
    return IrnnWeights(
        input_proj=ConvWeights(one, zero),
        w_hh={d: Tensor4(np.ones((1, 1, 1, 1))) for d in DIRECTIONS},
        mix_proj=ConvWeights(Tensor4(np.ones((1, 4, 1, 1))),
                             Tensor4(np.zeros((1, 1, 1, 1)))))


def test_acceptance_3_two_round_global_context():
    size = 8
    base = np.full((1, 1, size, size), 0.5)
    ok = True
    counts = {1: set(), 2: set()}
    for rounds in (1, 2):
        weights = [_identity_round() for _ in range(rounds)]
        cfg = SrnnConfig(rounds=rounds, c_hid=1, c_out=1)
        ref = srnn_module(t4(base), cfg, weights).data
        for i in range(size):
            for j in range(size):
                bumped = base.copy()
                bumped[0, 0, i, j] += 1.0
                out = srnn_module(t4(bumped), cfg, weights).data
                changed = np.count_nonzero(np.abs(out - ref) > 1e-12)
                counts[rounds].add(changed)
                if rounds == 2 and changed != 64:
                    ok = False
                if rounds == 1 and changed != 2 * size - 1:
                    ok = False
    report(3, ok, f"1 round changes {sorted(counts[1])} locations, "
           f"2 rounds change {sorted(counts[2])} of 64")


def test_acceptance_4_box_coding_roundtrip():
    rng = np.random.default_rng(4)
    n = 1000
    p = np.stack([rng.uniform(0, 512, n), rng.uniform(0, 512, n),
                  rng.uniform(2, 256, n), rng.uniform(2, 256, n)], axis=1)
    g = np.stack([rng.uniform(0, 512, n), rng.uniform(0, 512, n),
                  rng.uniform(2, 256, n), rng.uniform(2, 256, n)], axis=1)
    back = decode_deltas(p, encode_deltas(p, g))
    err = np.abs(back - g).max()
    report(4, err <= 1e-6, f"decode(encode) max abs err {err:.2e} on 1000 pairs")


def test_acceptance_5_loss_golden_values():
    ln2, ln6 = np.log(2.0), np.log(6.0)
    got = {}
    got["objectness"] = float(objectness_loss(
        t4(np.zeros((1, 1, 1, 1))),
        np.ones((1, 1, 1, 1), dtype=np.int64)).data.reshape(()))
    got["classification"] = float(classification_loss(
        t4(np.zeros((1, 6, 1, 1))), np.array([3])).data.reshape(()))
    got["mask"] = float(mask_loss(
        t4(np.zeros((1, 1, 2, 2))), np.ones((1, 1, 2, 2))).data.reshape(()))
    got["smooth_l1_quad"] = float(smooth_l1(
        t4(np.full((1, 1, 1, 1), 0.5))).data.reshape(()))
    got["smooth_l1_lin"] = float(smooth_l1(
        t4(np.full((1, 1, 1, 1), 2.0))).data.reshape(()))
    want = {"objectness": ln2, "classification": ln6, "mask": ln2,
            "smooth_l1_quad": 0.125, "smooth_l1_lin": 1.5}
    errs = {k: abs(got[k] - want[k]) for k in want}
    ok = all(e <= 1e-9 for e in errs.values())
    report(5, ok, "golden losses " + ", ".join(
        f"{k}={got[k]:.9f}" for k in sorted(got)))


def test_acceptance_6_dice_oracle():
    def oracle(x, y, cid, eps=1e-6):
        nx = ny = ni = 0
        for a, b in zip(x.ravel(), y.ravel()):
            nx += a == cid
            ny += b == cid
            ni += (a == cid) and (b == cid)
        return 2.0 * ni / (nx + ny + eps)

    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        x = rng.integers(0, 6, size=(32, 32))
        y = rng.integers(0, 6, size=(32, 32))
        for cid in range(1, 6):
            worst = max(worst, abs(dice_pair(x, y, cid) - oracle(x, y, cid)))
    m = np.zeros((32, 32), dtype=np.int64)
    m[:10, :10] = 1  # |X| = 100
    perfect = dice_pair(m, m, 1)
    ok = worst <= 1e-12 and perfect >= 1.0 - 1e-5
    report(6, ok, f"200 pairs, worst |diff| {worst:.2e} vs oracle; "
           f"perfect-match dice {perfect:.7f}")


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """Shared toy-overfit training run (acceptance 7)."""
    base = tmp_path_factory.mktemp("overfit")
    data = base / "data"
    out = base / "run"
    assert main(["synth-data", "--out", str(data), "--count", "8",
                 "--size", "64", "--seed", "0"]) == EXIT_OK
    t0 = time.time()
    code = main(["train-toy", "--data", str(data), "--out", str(out),
                 "--max-steps", "3500", "--seed", "0"])
    return data, out, code, time.time() - t0


def test_acceptance_7_toy_overfit(overfit_run, capsys):
    data, out, code, elapsed = overfit_run
    assert code == EXIT_OK
    ev = out / "eval"
    code = main(["eval", "--data", str(data),
                 "--checkpoint", str(out / "checkpoint"), "--out", str(ev)])
    capsys.readouterr()  # drop the per-image dump
    assert code == EXIT_OK
    line = [l for l in (ev / "summary.txt").read_text().splitlines()
            if l.startswith("aggregate.per_image_mean")][0]
    dice = float(line.split("=")[1])

    rows = (out / "loss.csv").read_text().strip().split("\n")[1:]
    totals = np.array([float(r.split(",")[1]) for r in rows])
    window = 500
    smoothed = [totals[i:i + window].mean()
                for i in range(0, len(totals) - window + 1, window)]
    trend_ok = all(b <= a * 1.05 for a, b in zip(smoothed, smoothed[1:]))
    trend_ok = trend_ok and smoothed[-1] < smoothed[0]

    ok = dice >= 0.9 and elapsed <= 600 and trend_ok
    report(7, ok, f"train dice {dice:.3f} after 3500 steps in {elapsed:.0f}s; "
           f"smoothed loss {smoothed[0]:.3f} -> {smoothed[-1]:.3f}")


def test_acceptance_8_srnn_ablation_ordering():
    # Relational pair task: identical blobs whose class is decided purely by
    # left-vs-right position, so directional context carries the label.
    rng = np.random.default_rng(777)
    pairs = [gen_sample(rng, size=64, appearance="directional")
             for _ in range(48)]
    X = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    Xtr, ytr, Xte, yte = X[:32], y[:32], X[32:], y[32:]
    cfg = dict(pyramid_width=16, backbone_widths=(4, 8, 16, 32),
               max_steps=2000)
    wins = 0
    details = []
    for seed in range(5):
        score = {}
        for enabled in (True, False):
            est = OrganSegmenter(srnn_enabled=enabled, seed=seed, **cfg)
            est.fit(Xtr, ytr)
            score[enabled] = est.score(Xte, yte)
        wins += score[True] >= score[False]
        details.append(f"seed {seed}: {score[True]:.3f} vs {score[False]:.3f}")
    report(8, wins >= 4, f"SRNN >= no-SRNN in {wins}/5 seeds "
           f"({'; '.join(details)})")


def test_acceptance_9_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["synth-data", "--out", str(data), "--count", "2",
                 "--size", "64", "--seed", "1"]) == EXIT_OK

    def run(tag, threads):
        out = tmp_path / tag
        assert main(["train-toy", "--data", str(data), "--out", str(out),
                     "--pyramid-width", "8", "--max-steps", "3",
                     "--seed", "2", "--threads", str(threads)]) == EXIT_OK
        feats = tmp_path / (tag + "_feat")
        assert main(["extract", "--checkpoint", str(out / "checkpoint"),
                     "--image", str(data / "images" / "000.png"),
                     "--out", str(feats), "--threads", str(threads)]) == EXIT_OK
        blobs = {}
        for p in sorted(out.rglob("*")):
            if p.is_file():
                blobs["run/" + str(p.relative_to(out))] = p.read_bytes()
        for p in sorted(feats.rglob("*")):
            if p.is_file():
                blobs["feat/" + str(p.relative_to(feats))] = p.read_bytes()
        return blobs

    try:
        a = run("a_t1", 1)
        b = run("b_t1", 1)
        c = run("c_t4", 4)
    finally:
        config.set_num_threads(1)
    same_run = set(a) == set(b) and all(a[k] == b[k] for k in a)
    same_threads = set(a) == set(c) and all(a[k] == c[k] for k in a)
    report(9, same_run and same_threads,
           f"{len(a)} artifacts byte-identical across reruns "
           f"(match={same_run}) and across threads 1 vs 4 "
           f"(match={same_threads})")
