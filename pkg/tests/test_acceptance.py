"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also repeated in the terminal
summary).  Criteria 7 to 9 train full desk-scale runs and take most of the
wall-clock of this module, roughly 50 minutes on one core.
"""

import csv
import filecmp
import os
import time

import numpy as np
import pytest

from sfcn import layers as L
from sfcn.bev import apply_homography, evaluate_bev, homography_from_points, warp_to_bev
from sfcn.cli import main
from sfcn.metrics import confusion, default_sweep, max_f, metrics
from sfcn.network import ArchConfig, build_network

from oracles import (
    ACCEPTANCE,
    exhaustive_max_f,
    graph_grad_check,
    graph_inputs,
    loop_confusion,
    loop_warp,
    make_store,
    naive_conv,
    random_quad,
    randomize_scores,
    scalar_metrics,
)

DESK_TRAIN, DESK_TEST, DESK_SEED = 200, 40, 7
ABLATION_SEEDS = "1,2,3,4,5"


@pytest.fixture
def verdict(capsys):
    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"sfcn {argv[0]} exited with {code}"


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    """The 200 / 40 synthetic desk set (seed 7) with contour maps."""
    d = tmp_path_factory.mktemp("desk")
    cli("gen-data", "--out", d, "--count", DESK_TRAIN, "--test-count", DESK_TEST, "--seed", DESK_SEED)
    cli("contour", "--data", d / "manifest.tsv")
    cli("contour", "--data", d / "test_manifest.tsv")
    return d


@pytest.fixture(scope="module")
def ablation(desk_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    cli("ablate", "--data", desk_data / "manifest.tsv", "--val", desk_data / "test_manifest.tsv",
        "--out", out, "--iters", 2000, "--seeds", ABLATION_SEEDS)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- 1


def _layer_errors(rng):
    errs = {}
    x = rng.standard_normal((2, 2, 6, 6))
    for stride, pad in ((1, 1), (2, 1), (1, 0), (2, 0)):
        store = make_store(k=(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)))
        out = L.conv2d_forward(x, "k", stride, pad, store)
        r = rng.standard_normal(out.shape)
        dx = L.conv2d_backward(x, r, "k", stride, pad, store)
        p = store["k"]

        def f():
            return float((L.conv2d_forward(x, "k", stride, pad, store) * r).sum())

        errs[f"conv s{stride} p{pad}"] = L.grad_check(f, [p.weight, p.bias, x], [p.grad_w, p.grad_b, dx])
    for factor in (2, 4, 16):
        store = make_store(up=(rng.standard_normal((2, 2, 2 * factor, 2 * factor)), rng.standard_normal(2)))
        xt = rng.standard_normal((1, 2, 2, 2))
        r = rng.standard_normal(L.tconv2d(xt, "up", factor, store).shape)
        dx = L.tconv2d_backward(xt, r, "up", factor, store)
        p = store["up"]

        def f():
            return float((L.tconv2d(xt, "up", factor, store) * r).sum())

        errs[f"tconv x{factor}"] = L.grad_check(f, [p.weight, p.bias, xt], [p.grad_w, p.grad_b, dx], probes=40)
    xp = rng.standard_normal((1, 2, 6, 6))
    out, arg = L.maxpool2_forward(xp)
    r = rng.standard_normal(out.shape)
    dx = L.maxpool2_backward(r, arg)
    errs["maxpool"] = L.grad_check(lambda: float((L.maxpool2_forward(xp)[0] * r).sum()), [xp], [dx], eps=1e-7)
    # keep relu inputs off the hinge so central differences are valid
    xr = rng.standard_normal((1, 2, 5, 5))
    xr += np.sign(xr) * 0.1
    r = rng.standard_normal(xr.shape)
    errs["relu"] = L.grad_check(lambda: float((L.relu(xr) * r).sum()), [xr], [L.relu_backward(xr, r)])
    mask = L.dropout(np.ones(xr.shape), 0.5, 9, training=True)
    errs["dropout"] = L.grad_check(lambda: float((L.dropout(xr, 0.5, 9, True) * r).sum()), [xr], [mask * r])
    logits = rng.standard_normal((2, 2, 4, 5))
    labels = rng.integers(0, 2, (2, 4, 5))
    labels[0, 0, 0] = 255
    for red in ("mean", "sum"):
        cfg = L.LossConfig(reduction=red)
        _, grad = L.softmax_xent_perpixel(logits, labels, cfg)
        errs[f"softmax {red}"] = L.grad_check(lambda: L.softmax_xent_perpixel(logits, labels, cfg)[0],
                                              [logits], [grad])
    return errs


def test_c1_gradient_suite(verdict):
    t0 = time.perf_counter()
    errs = _layer_errors(np.random.default_rng(1))
    graph_err = max(graph_grad_check("s-fcn-loc", size=32, width=2, probes=5, seed=s) for s in range(3))
    elapsed = time.perf_counter() - t0
    worst_layer = max(errs, key=errs.get)
    ok = max(errs.values()) < 1e-6 and graph_err < 1e-4 and elapsed < 60
    verdict(1, ok, f"worst layer {worst_layer} rel {errs[worst_layer]:.2e} (< 1e-6), "
                   f"s-fcn-loc graph rel {graph_err:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_c2_shared_parameter_law(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        g = build_network(ArchConfig(variant="s-fcn", input_size=32, width=2, seed=trial))
        randomize_scores(g, rng)
        for pid in g.trunk_params:
            p = g.store[pid]
            p.weight[...] = rng.standard_normal(p.weight.shape) * 0.3
        rgb, aux, _ = graph_inputs(g, rng, 2, 32)
        scores, state = g.forward(rgb, aux, training=True, seed=trial)
        _, grad = L.softmax_xent_perpixel(scores, rng.integers(0, 2, (2, 32, 32)))
        single = []
        for streams in ([0], [1]):
            g.store.zero_grad()
            g.backward(state, grad, streams=streams)
            single.append({pid: (g.store[pid].grad_w.copy(), g.store[pid].grad_b.copy()) for pid in g.trunk_params})
        g.store.zero_grad()
        g.backward(state, grad)
        for pid in g.trunk_params:
            p = g.store[pid]
            worst = max(worst, float(L.rel_error(p.grad_w, single[0][pid][0] + single[1][pid][0]).max()),
                        float(L.rel_error(p.grad_b, single[0][pid][1] + single[1][pid][1]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 30
    verdict(2, ok, f"10 random weight draws, max rel {worst:.2e} (< 1e-12), {elapsed:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_convolution_oracle(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        k = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        n, c, o = (int(v) for v in rng.integers(1, 4, 3))
        h, w = (int(v) for v in rng.integers(k, 10, 2))
        x = rng.standard_normal((n, c, h, w))
        store = make_store(k=(rng.standard_normal((o, c, k, k)), rng.standard_normal(o)))
        out = L.conv2d_forward(x, "k", stride, pad, store)
        ref = naive_conv(x, store["k"].weight, store["k"].bias, stride, pad)
        assert out.shape == ref.shape
        worst = max(worst, float(np.abs(out - ref).max()))
    adj = 0.0
    for factor in (1, 2, 3, 4, 16):
        cin, cout = (int(v) for v in rng.integers(1, 4, 2))
        wt = rng.standard_normal((cin, cout, 2 * factor, 2 * factor))
        store = make_store(up=(wt, None))
        x = rng.standard_normal((2, cin, 3, 4))
        y = rng.standard_normal((2, cout, 3 * factor, 4 * factor))
        lo, hi = factor // 2, factor - factor // 2
        conv_y = naive_conv(np.pad(y, ((0, 0), (0, 0), (lo, hi), (lo, hi))), wt, None, factor, 0)
        lhs, rhs = float((L.tconv2d(x, "up", factor, store) * y).sum()), float((x * conv_y).sum())
        adj = max(adj, abs(lhs - rhs) / max(1.0, abs(lhs)))
    ok = worst <= 1e-10 and adj <= 1e-9
    verdict(3, ok, f"20 conv configs max abs {worst:.2e} (<= 1e-10), tconv adjoint rel {adj:.2e} (<= 1e-9)")
    assert ok


# ---------------------------------------------------------------- 4


def _quotient(a, b):
    return a / b if b else 0.0


def test_c4_metrics_oracle(verdict):
    rng = np.random.default_rng(4)
    count_ok, value_err, maxf_err = True, 0.0, 0.0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(3, 9, 2))
        # quantised scores so distinct values repeat
        scores = np.round(rng.random((h, w)) * rng.choice([8, 50, 1000])) / 1000 if rng.random() < 0.5 \
            else rng.random((h, w))
        gt = rng.integers(0, 2, (h, w)).astype(np.uint8)
        gt[rng.random((h, w)) < 0.1] = 255
        gt.flat[int(rng.integers(gt.size))] = 1
        tau = float(rng.choice([0.5, rng.random()]))
        c = confusion(scores, gt, tau)
        tp, fp, tn, fn = loop_confusion(scores, gt, tau)
        count_ok &= (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)
        gamma = float(rng.choice([1.0, 0.5, 2.0]))
        rep = metrics(c, gamma)
        p, r, acc, f = scalar_metrics(tp, fp, tn, fn, gamma)
        ref = [p, r, acc, f, _quotient(fp, fp + tn), _quotient(fn, tp + fn)]
        got = [rep.precision, rep.recall, rep.accuracy, rep.f_measure, rep.fpr, rep.fnr]
        value_err = max(value_err, max(abs(a - b) for a, b in zip(got, ref)))
        maxf_err = max(maxf_err, abs(max_f(scores, gt, gamma).f - exhaustive_max_f(scores, gt, gamma)))
    ok = count_ok and value_err <= 1e-12 and maxf_err <= 1e-12
    verdict(4, ok, f"100 pairs, counts exact {count_ok}, metric err {value_err:.2e} (<= 1e-12), "
                   f"maxF err {maxf_err:.2e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------- 5


def test_c5_bev(verdict):
    rng = np.random.default_rng(5)
    map_err = 0.0
    for _ in range(20):
        src, dst = random_quad(rng), random_quad(rng, 0, 400)
        h = homography_from_points(src, dst)
        map_err = max(map_err, float(np.abs(apply_homography(h, src) - dst).max()))

    scores, gt = rng.random((4, 24, 20)), rng.integers(0, 2, (4, 24, 20)).astype(np.uint8)
    identity_exact = True
    for s, g in zip(scores, gt):
        res = evaluate_bev(s, g, np.eye(3), sweep=default_sweep(), out_shape=s.shape)
        identity_exact &= res.report == metrics(confusion(s, g, 0.5))
        identity_exact &= res.maxf.f == max_f(s, g).f and res.maxf.tau == max_f(s, g).tau

    warp_err = 0.0
    for _ in range(5):
        img = rng.random((18, 22))
        h = np.eye(3) + np.array([[0.2, 0.1, 2.0], [-0.1, 0.15, -1.0], [0.004, -0.003, 0.0]]) \
            * rng.uniform(-1, 1, (3, 3))
        mask = rng.integers(0, 2, img.shape).astype(np.uint8)
        # scores are sampled bilinearly, label masks by nearest neighbour
        for mode, src in (("bilinear", img), ("nearest", mask)):
            got = warp_to_bev(src, h, (20, 16), mode)
            ref, void = loop_warp(src, h, (20, 16), mode)
            got_void = np.isnan(got) if mode == "bilinear" else got == 255
            assert (got_void == void).all()
            warp_err = max(warp_err, float(np.abs(got[~void] - ref[~void]).max(initial=0.0)))
    ok = map_err < 1e-6 and identity_exact and warp_err <= 1e-12
    verdict(5, ok, f"correspondence err {map_err:.2e}px (< 1e-6), identity exact {identity_exact}, "
                   f"5 warps vs scalar oracle {warp_err:.2e}")
    assert ok


# ---------------------------------------------------------------- 6


def test_c6_location_prior_sensitivity(verdict):
    size, lo = 512, 128
    var = {}
    for variant in ("fcn", "s-fcn", "s-fcn-loc"):
        g = build_network(ArchConfig(variant=variant, input_size=size, width=2, seed=6))
        rng = np.random.default_rng(6)
        randomize_scores(g, rng)
        for pid in g.trunk_params:
            g.store[pid].bias[...] = rng.normal(0.0, 0.05, g.store[pid].bias.shape)
        x = np.full((1, 3, size, size), 0.5)
        scores, _ = g.forward(x, x.copy() if g.cfg.siamesed else None, g.location_prior(size))
        var[variant] = float(scores[:, :, lo:size - lo, lo:size - lo].var(axis=(2, 3)).max())
    ok = var["fcn"] <= 1e-12 and var["s-fcn"] <= 1e-12 and var["s-fcn-loc"] > 0
    verdict(6, ok, "interior logit variance " + ", ".join(f"{k} {v:.2e}" for k, v in var.items())
            + " (0 +-1e-12 without prior, > 0 with)")
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_desk_scale_learning(desk_data, tmp_path, verdict):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    cli("train", "--data", desk_data / "manifest.tsv", "--val", desk_data / "test_manifest.tsv",
        "--out", out, "--variant", "s-fcn-loc")
    elapsed = time.perf_counter() - t0
    f1 = float(read_rows(out / "val_metrics.csv")[0]["f_measure"])
    ok = f1 >= 0.90 and elapsed < 15 * 60
    verdict(7, ok, f"s-fcn-loc held-out F1 {f1:.4f} (>= 0.90) after 2000 iterations in {elapsed:.0f}s (< 900s)")
    assert ok


# ---------------------------------------------------------------- 8 / 9


def test_c8_stepwise_ordering(ablation, verdict):
    out, elapsed = ablation
    rows = read_rows(out / "ablation.csv")
    med = {r["variant"]: float(r["f1"]) for r in rows if r["seed"] == "median"}
    per = {}
    for r in rows:
        if r["seed"] != "median":
            per.setdefault(r["seed"], {})[r["variant"]] = float(r["f1"])
    ordered = sum(s["s-fcn-loc"] >= s["s-fcn"] >= s["fcn"] for s in per.values())
    med_ok = med["s-fcn-loc"] >= med["s-fcn"] >= med["fcn"]
    ok = med_ok and ordered >= 3
    verdict(8, ok, f"median F1 s-fcn-loc {med['s-fcn-loc']:.4f} / s-fcn {med['s-fcn']:.4f} / "
                   f"fcn {med['fcn']:.4f}, ordering in {ordered}/5 seeds (>= 3) [{elapsed:.0f}s]")
    assert ok


def test_c9_convergence_direction(ablation, verdict):
    out, _ = ablation
    rows = [r for r in read_rows(out / "convergence.csv") if r["seed"] == "median"]
    med = {r["variant"]: r for r in rows}
    base, sfcn = float(med["fcn"]["seconds"]), float(med["s-fcn"]["seconds"])
    ratio = float(med["s-fcn"]["seconds_ratio"])
    ok = sfcn < base
    verdict(9, ok, f"median seconds to the fcn final loss: s-fcn {sfcn:.1f}s vs fcn {base:.1f}s (strictly less); "
                   f"median wall-clock ratio {ratio:.3f} ({(1 - ratio) * 100:.0f}% faster, reported only)")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_determinism(tmp_path, verdict):
    for run in ("a", "b"):
        d = tmp_path / run
        cli("gen-data", "--out", d, "--count", DESK_TRAIN, "--test-count", DESK_TEST, "--seed", DESK_SEED)
        cli("contour", "--data", d / "manifest.tsv")
        cli("contour", "--data", d / "test_manifest.tsv")
        cli("train", "--data", d / "manifest.tsv", "--val", d / "test_manifest.tsv", "--out", d / "run",
            "--iters", 40, "--eval-interval", 20)
    compared, differ = 0, []
    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            if f == "wall_clock.json":
                continue
            a = os.path.join(root, f)
            b = os.path.join(tmp_path / "b", os.path.relpath(a, tmp_path / "a"))
            compared += 1
            if not filecmp.cmp(a, b, shallow=False):
                differ.append(os.path.relpath(a, tmp_path / "a"))
    key = ["run/loss_curve.csv", "run/val_metrics.csv", "run/checkpoint.bin", "manifest.tsv"]
    present = all((tmp_path / "a" / k).exists() for k in key)
    ok = present and not differ
    verdict(10, ok, f"{compared} files from gen-data, contour and train byte-identical across reruns"
                    + (f"; differing: {differ[:5]}" if differ else ""))
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_attach_ablation(desk_data, tmp_path, verdict):
    out = tmp_path / "attach"
    cli("ablate", "--attach-ablation", "--data", desk_data / "manifest.tsv",
        "--val", desk_data / "test_manifest.tsv", "--out", out, "--seeds", "1", "--iters", 500)
    rows = read_rows(out / "attach_ablation.csv")
    ok = [r["loc_attach"] for r in rows] == ["pool4", "conv7"]
    verdict(11, ok, "attach_ablation.csv rows " + ", ".join(f"{r['loc_attach']} F1 {float(r['f1']):.4f}" for r in rows)
            + " (no ordering asserted)")
    assert ok
