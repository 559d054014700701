"""Command-line entry point: ``sfcn <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
Logs go to stderr; stdout carries only the paths or reports a command
produces.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C

log = logging.getLogger("sfcn")

CONTOUR_DIR_SUFFIX = "_contours"


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _common(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int, help="random seed (default 7)")
    p.add_argument("--threads", type=_positive_int, default=1, help="BLAS worker cap (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _arch_flags(p):
    p.add_argument("--variant", choices=("fcn", "s-fcn", "s-fcn-loc"))
    p.add_argument("--width", type=_positive_int, help="base trunk width C")
    p.add_argument("--loc-attach", dest="loc_attach", choices=("pool4", "conv7"))
    p.add_argument("--dropout", type=float)


def _train_flags(p):
    p.add_argument("--iters", dest="iterations", type=_positive_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", dest="lr_weight", type=float)
    p.add_argument("--lr-bias", dest="lr_bias", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--loss", choices=("mean", "sum"))
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--smoothing-window", dest="smoothing_window", type=_positive_int)


def _eval_flags(p):
    p.add_argument("--tau", type=float, help="classification threshold (default 0.5)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--sweep-size", dest="sweep_size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="sfcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic street-scene dataset")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--count", type=_positive_int, default=200)
    p.add_argument("--test-count", dest="test_count", type=int, default=0,
                   help="also write this many held-out scenes to test_manifest.tsv")
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("contour", help="compute or ingest contour maps for a dataset")
    _common(p)
    p.add_argument("--data", help="manifest to augment in place")
    p.add_argument("--external", help="directory of precomputed maps named after the images")

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    _arch_flags(p)
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="train fcn, s-fcn and s-fcn-loc over several seeds")
    _common(p)
    _arch_flags(p)
    _train_flags(p)
    _eval_flags(p)
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--out")
    p.add_argument("--seeds", type=_seed_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--variants", default="fcn,s-fcn,s-fcn-loc")
    p.add_argument("--attach-ablation", dest="attach_ablation", action="store_true",
                   help="compare s-fcn-loc with the prior at pool4 versus conv7 instead")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    _eval_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--bev-points", dest="bev_points", type=float, nargs=16, metavar="F",
                   help="4 source (x y) then 4 BEV (x y) correspondences")
    p.add_argument("--gt-as-scores", dest="gt_as_scores", action="store_true",
                   help="score the ground truth itself (harness check)")

    p = sub.add_parser("freq-map", help="per-pixel road frequency over a dataset")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    return parser


_NOT_CONFIG = {"command", "config", "threads", "verbose", "count", "test_count", "external", "seeds",
               "variants", "attach_ablation", "gt_as_scores"}


def _run_config(args) -> C.RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    if overrides.get("bev_points") is not None:
        overrides["bev_points"] = tuple(overrides["bev_points"])
    return C.load_config(args.config, overrides)


def _require(value, flag):
    if not value:
        raise UsageError(f"{flag} is required (flag or config key)")
    return value


# ------------------------------------------------------------------ helpers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _load_batch(path, with_aux):
    from .synth import load_dataset
    from .trainer import stack_samples

    samples = load_dataset(path)
    return stack_samples(samples, with_aux)


def _fit_size(cfg, data):
    """Input extent follows the dataset."""
    h, w = data.images.shape[2:]
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    return dataclasses.replace(cfg, size=h) if h != cfg.size else cfg


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg):
    from .synth import generate_dataset

    out = _require(cfg.out, "--out")
    p = cfg.scene()
    path = generate_dataset(p, args.count, out)
    print(path)
    if args.test_count > 0:
        print(generate_dataset(p, args.test_count, out, start=args.count, name="test_manifest.tsv"))
    log.info("wrote %d scenes (seed %d) to %s", args.count + max(args.test_count, 0), p.seed, out)
    return 0


def _external_map(directory, image_path):
    stem = os.path.splitext(os.path.basename(image_path))[0]
    for ext in (".pgm", ".png"):
        cand = os.path.join(directory, stem + ext)
        if os.path.exists(cand):
            return cand
    raise FileNotFoundError(f"no precomputed contour for {stem} in {directory}")


def cmd_contour(args, cfg):
    from .contour import detect_contour, load_contour, save_contour
    from .pnm import read_pnm
    from .synth import image_from_file, read_manifest

    manifest = _require(cfg.data, "--data")
    entries = read_manifest(manifest)
    base = os.path.dirname(os.path.abspath(manifest))
    rel_dir = os.path.splitext(os.path.basename(manifest))[0] + CONTOUR_DIR_SUFFIX
    os.makedirs(os.path.join(base, rel_dir), exist_ok=True)
    rel_paths = []
    for e in entries:
        stem = os.path.splitext(os.path.basename(e.image))[0]
        rel = os.path.join(rel_dir, stem + ".pgm")
        image = read_pnm(e.image)
        if args.external:
            cmap = load_contour(_external_map(args.external, e.image))
            if cmap.shape != image.shape[:2]:
                raise ValueError(f"{stem}: contour extent {cmap.shape} != image extent {image.shape[:2]}")
        else:
            cmap = detect_contour(image_from_file(image))
        save_contour(os.path.join(base, rel), cmap)
        rel_paths.append(rel)

    # rewrite data lines with the contour column, keeping comments
    out_lines, k = [], 0
    with open(manifest) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                out_lines.append(line)
                continue
            cols = line.split("\t")[:3]
            out_lines.append("\t".join(cols + [rel_paths[k]]))
            k += 1
    with open(manifest, "w", newline="\n") as fh:
        fh.write("\n".join(out_lines) + "\n")
    log.info("%s %d contour maps into %s", "ingested" if args.external else "computed", len(entries), rel_dir)
    print(manifest)
    return 0


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _train_one(arch, tcfg, data, val, progress=None):
    from .trainer import train

    return train(arch, tcfg, data, val, progress=progress)


def cmd_train(args, cfg):
    from .checkpoint import save_checkpoint
    from .plotting import plot_loss_curves
    from .trainer import arch_header, evaluate

    data_path = _require(cfg.data, "--data")
    out = _require(cfg.out, "--out")
    arch = cfg.arch()
    data = _load_batch(data_path, arch.siamesed)
    cfg = _fit_size(cfg, data)
    arch = cfg.arch()
    val = _load_batch(cfg.val, arch.siamesed) if cfg.val else None
    os.makedirs(out, exist_ok=True)
    graph, curve = _train_one(arch, cfg.train_config(), data, val, progress=_progress)

    header = arch_header(arch)
    header.update(iterations=cfg.iterations, loss=cfg.loss, train_seed=cfg.seed)
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(ckpt, graph.store, header)
    curve.to_csv(os.path.join(out, "loss_curve.csv"), include_seconds=False)
    # wall-clock varies run to run, so it stays out of the deterministic CSV
    with open(os.path.join(out, "wall_clock.json"), "w") as fh:
        json.dump({"iterations": curve.iterations, "seconds": curve.seconds}, fh)
    plot_loss_curves({arch.variant: curve}, os.path.join(out, "loss_curve.png"),
                     window=min(cfg.smoothing_window, len(curve)))
    if val is not None:
        rep, mf, _ = evaluate(graph, val, cfg.tau, cfg.gamma)
        _write_csv(os.path.join(out, "val_metrics.csv"),
                   ["variant", "tau", *rep.as_dict(), "max_f", "max_f_tau"],
                   [[arch.variant, _fmt(cfg.tau), *map(_fmt, rep.as_dict().values()), _fmt(mf.f), _fmt(mf.tau)]])
        log.info("held-out F1 %.4f (maxF %.4f)", rep.f_measure, mf.f)
    log.info("trained %s for %d iterations in %.1fs", arch.variant, cfg.iterations, curve.seconds[-1])
    print(ckpt)
    return 0


ABLATION_HEADER = ["variant", "seed", "f1", "accuracy", "precision", "recall", "max_f"]


def _median_rows(rows, key, cols):
    out = []
    for name in dict.fromkeys(r[key] for r in rows):
        sel = [r for r in rows if r[key] == name]
        med = {c: float(np.median([r[c] for r in sel])) for c in cols}
        out.append({key: name, "seed": "median", **med})
    return out


def cmd_ablate(args, cfg):
    from .plotting import plot_ablation, plot_loss_curves
    from .trainer import compare_convergence, evaluate, final_loss

    data_path = _require(cfg.data, "--data")
    val_path = _require(cfg.val, "--val")
    out = _require(cfg.out, "--out")
    if args.attach_ablation:
        variants = ["s-fcn-loc"]
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        bad = [v for v in variants if v not in ("fcn", "s-fcn", "s-fcn-loc")]
        if bad or not variants:
            raise UsageError(f"unknown variants {bad}")
    with_aux = any(v != "fcn" for v in variants)
    data = _load_batch(data_path, with_aux)
    val = _load_batch(val_path, with_aux)
    cfg = _fit_size(cfg, data)
    os.makedirs(os.path.join(out, "curves"), exist_ok=True)

    runs = [(v, cfg.loc_attach) for v in variants]
    if args.attach_ablation:
        runs = [("s-fcn-loc", "pool4"), ("s-fcn-loc", "conv7")]
    rows, conv_rows = [], []
    for seed in args.seeds:
        curves = {}
        for variant, attach in runs:
            run_cfg = dataclasses.replace(cfg, variant=variant, loc_attach=attach, seed=seed)
            arch = run_cfg.arch()
            d = data if arch.siamesed else dataclasses.replace(data, aux=None)
            v = val if arch.siamesed else dataclasses.replace(val, aux=None)
            graph, curve = _train_one(arch, run_cfg.train_config(), d, v)
            rep, mf, _ = evaluate(graph, v, cfg.tau, cfg.gamma)
            name = f"{variant}@{attach}" if args.attach_ablation else variant
            curves[name] = curve
            tag = name.replace("@", "_")
            curve.to_csv(os.path.join(out, "curves", f"{tag}_seed{seed}.csv"))
            rows.append({"variant": name, "seed": seed, "f1": rep.f_measure, "accuracy": rep.accuracy,
                         "precision": rep.precision, "recall": rep.recall, "max_f": mf.f})
            log.info("seed %d %s: F1 %.4f in %.1fs", seed, name, rep.f_measure, curve.seconds[-1])
        window = min(cfg.smoothing_window, cfg.iterations)
        plot_loss_curves(curves, os.path.join(out, f"loss_curves_seed{seed}.png"), window=window)
        if len(curves) >= 2:
            baseline = "fcn" if "fcn" in curves else next(iter(curves))
            target = final_loss(curves[baseline], window)
            for r in compare_convergence(curves, target, baseline, window):
                conv_rows.append({"variant": r.name, "seed": seed, "target": target, "iteration": r.iteration,
                                  "seconds": r.seconds, "iteration_ratio": r.iteration_ratio,
                                  "seconds_ratio": r.seconds_ratio})

    metric_cols = ABLATION_HEADER[2:]
    if args.attach_ablation:
        med = _median_rows(rows, "variant", metric_cols)
        path = os.path.join(out, "attach_ablation.csv")
        _write_csv(path, ["loc_attach", "seeds", *metric_cols],
                   [[m["variant"].split("@")[1], len(args.seeds), *(_fmt(m[c]) for c in metric_cols)] for m in med])
        _write_csv(os.path.join(out, "attach_runs.csv"), ABLATION_HEADER,
                   [[_fmt(r[c]) for c in ABLATION_HEADER] for r in rows])
    else:
        table = rows + _median_rows(rows, "variant", metric_cols)
        path = os.path.join(out, "ablation.csv")
        _write_csv(path, ABLATION_HEADER, [[_fmt(r[c]) for c in ABLATION_HEADER] for r in table])
        plot_ablation(rows, os.path.join(out, "ablation.png"))
    if conv_rows:
        _write_convergence(os.path.join(out, "convergence.csv"), conv_rows)
    print(path)
    return 0


CONVERGENCE_HEADER = ["variant", "seed", "target", "iteration", "seconds", "iteration_ratio", "seconds_ratio"]


def _write_convergence(path, conv_rows):
    """Per-seed rows plus a median row per variant.

    Medians over runs that never reached the target are taken with those
    runs counted as infinitely slow, so a majority of misses yields ``inf``.
    """
    table = list(conv_rows)
    for name in dict.fromkeys(r["variant"] for r in conv_rows):
        sel = [r for r in conv_rows if r["variant"] == name]
        med = {"variant": name, "seed": "median", "target": float(np.median([r["target"] for r in sel]))}
        for c in ("iteration", "seconds", "iteration_ratio", "seconds_ratio"):
            med[c] = float(np.median([np.inf if r[c] is None else r[c] for r in sel]))
        table.append(med)
    _write_csv(path, CONVERGENCE_HEADER, [[_fmt(r[c]) for c in CONVERGENCE_HEADER] for r in table])


def cmd_eval(args, cfg):
    from .bev import evaluate_bev_batch, homography_from_points, parse_correspondences
    from .checkpoint import load_into, read_checkpoint
    from .metrics import confusion, default_sweep, max_f, metrics, write_pr_curve
    from .network import build_network
    from .plotting import plot_pr_curve
    from .trainer import arch_from_header, predict_probabilities

    data_path = _require(cfg.data, "--data")
    out = _require(cfg.out, "--out")
    if args.gt_as_scores:
        data = _load_batch(data_path, False)
        probs = np.where(data.labels == 1, 1.0, 0.0)
    else:
        header, records = read_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
        arch = arch_from_header(header)
        graph = build_network(arch)
        load_into(graph.store, records)
        data = _load_batch(data_path, arch.siamesed)
        probs = predict_probabilities(graph, data)
    gt = data.labels
    sweep = default_sweep(cfg.sweep_size)
    os.makedirs(out, exist_ok=True)

    scopes = []
    rep = metrics(confusion(probs, gt, cfg.tau), cfg.gamma)
    mf = max_f(probs, gt, cfg.gamma, sweep)
    scopes.append(("perspective", rep, mf))
    if cfg.bev_points is not None:
        src, dst = parse_correspondences(cfg.bev_points)
        h = homography_from_points(src, dst)
        res = evaluate_bev_batch(probs, gt, h, cfg.gamma, sweep, cfg.tau, (cfg.bev_height, cfg.bev_width))
        scopes.append(("bev", res.report, res.maxf))

    cols = list(rep.as_dict())
    _write_csv(os.path.join(out, "metrics.csv"), ["scope", "tau", *cols, "max_f", "max_f_tau"],
               [[s, _fmt(cfg.tau), *(_fmt(v) for v in r.as_dict().values()), _fmt(m.f), _fmt(m.tau)]
                for s, r, m in scopes])
    lines = []
    for s, r, m in scopes:
        suffix = "" if s == "perspective" else f"_{s}"
        write_pr_curve(os.path.join(out, f"pr_curve{suffix}.csv"), m)
        plot_pr_curve(m, os.path.join(out, f"pr_curve{suffix}.png"), title=f"precision / recall ({s})")
        lines.append(f"[{s}] tau={cfg.tau} " + r.to_text().replace("\n", " ") + f" max_f={m.f!r} max_f_tau={m.tau!r}")
    report = "\n".join(lines) + "\n"
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report)
    sys.stdout.write(report)
    return 0


def cmd_freq_map(args, cfg):
    from .locprior import road_frequency, write_frequency_map
    from .plotting import plot_frequency_map
    from .synth import load_dataset

    samples = load_dataset(_require(cfg.data, "--data"))
    out = _require(cfg.out, "--out")
    os.makedirs(out, exist_ok=True)
    freq = road_frequency([s.mask for s in samples])
    pgm, csv_path = os.path.join(out, "frequency.pgm"), os.path.join(out, "frequency.csv")
    write_frequency_map(freq, pgm, csv_path)
    plot_frequency_map(freq, os.path.join(out, "frequency.png"))
    print(csv_path)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "contour": cmd_contour,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "freq-map": cmd_freq_map,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = _run_config(args)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, C.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sfcn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
