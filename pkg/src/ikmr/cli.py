"""Command-line entry point: ``ikmr <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or artifact, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import IKMRError, SkeletonMismatch, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Argument errors (including unknown flags) raise instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _default_seed():
    raw = os.environ.get("IKMR_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"IKMR_SEED must be an integer, got {raw!r}") from exc


def build_parser(default_seed: int = 0) -> Parser:
    p = Parser(prog="ikmr", description="Skeleton-aware motion retargeting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=default_seed, help="RNG seed (default: $IKMR_SEED or 0)")
        return sp

    d = seeded(sub.add_parser("datagen", help="generate synthetic paired windows"))
    d.add_argument("--output", required=True)
    d.add_argument("--skeleton-a", default="toy-human")
    d.add_argument("--skeleton-b", default="toy-robot")
    d.add_argument("--count", type=_positive_int, default=256)
    d.add_argument("--window", type=_positive_int, default=64)
    d.add_argument("--fps", type=float, default=30.0)
    d.add_argument("--amplitude", type=float, default=1.0)
    d.add_argument("--correspondence", help="joint correspondence JSON (default: shipped table)")
    d.add_argument("--limits", help="filter the B side through these dynamics limits")

    t = seeded(sub.add_parser("pretrain", help="train the dual autoencoder"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--output", required=True, help="model checkpoint path (.ckpt)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--steps", type=int, default=3000)
    t.add_argument("--batch-size", type=_positive_int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--lambda-align", type=float, default=1.0)
    t.add_argument("--lambda-consis", type=float, default=0.1)
    t.add_argument("--log", help="JSONL loss log")
    t.add_argument("--skeleton-a", help="skeleton file or built-in name (default: dataset's)")
    t.add_argument("--skeleton-b")

    f = seeded(sub.add_parser("finetune", help="refine decoder B on feasible targets"))
    f.add_argument("--model", required=True)
    f.add_argument("--output", required=True)
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--feasible", help="dataset whose B side holds feasible targets")
    src.add_argument("--dataset", help="dataset whose A side is retargeted and filtered into targets")
    f.add_argument("--limits", help="limits file for --dataset mode (default: shipped toy-robot limits)")
    f.add_argument("--steps", type=int, default=500)
    f.add_argument("--batch-size", type=_positive_int, default=8)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--lambda-ee", type=float, default=1.0)
    f.add_argument("--log")
    f.add_argument("--workers", type=_positive_int, default=1)

    r = sub.add_parser("retarget", help="retarget motion files from skeleton A to B")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True, help="motion file or directory of *.json motions")
    r.add_argument("--output", required=True)
    r.add_argument("--workers", type=_positive_int, default=1)

    e = seeded(sub.add_parser("eval", help="smoothness, noise sweep, latent correlation, feasibility"))
    e.add_argument("--model", required=True)
    e.add_argument("--baseline-model", help="model to compare smoothness against (e.g. the pretrained one)")
    e.add_argument("--dataset", required=True)
    e.add_argument("--noise-levels", type=_float_list, default=[0.0, 0.01, 0.02, 0.05, 0.1])
    e.add_argument("--limits")
    e.add_argument("--report", required=True, help="JSON report path; the sweep CSV goes next to it")
    e.add_argument("--correlation-pairs", type=_positive_int, default=24)
    e.add_argument("--workers", type=_positive_int, default=1)

    b = seeded(sub.add_parser("bench", help="retargeting throughput per backend"))
    b.add_argument("--model", help="model checkpoint (default: untrained toy-human -> toy-robot)")
    b.add_argument("--batch-sizes", type=_int_list, default=[1, 8, 64])
    b.add_argument("--repeats", type=_positive_int, default=3)
    b.add_argument("--workers", type=_positive_int, default=8)
    b.add_argument("--backends", default=",".join(_kernels.BACKENDS))
    b.add_argument("--output", help="CSV path (default: stdout)")
    return p


# ---------------------------------------------------------------- commands


def _require_file(path, what):
    if not Path(path).is_file():
        raise ValidationError(f"{what} {path} does not exist")


def _load_model(path):
    from .nets import load_model, sidecar_path

    _require_file(path, "model")
    _require_file(sidecar_path(path), "model sidecar")
    return load_model(path)


def _load_dataset(path):
    from .training import load_dataset

    _require_file(path, "dataset")
    return load_dataset(path)


def _load_limits(path):
    from .dynamics import default_limits, load_limits

    if path is None:
        return default_limits()
    _require_file(path, "limits file")
    return load_limits(path)


def cmd_datagen(a):
    from .dynamics import dynamics_filter
    from .resources import resolve_skeleton
    from .training import PairedDataset, generate_synthetic_pairs, load_correspondence, save_dataset

    skA, skB = resolve_skeleton(a.skeleton_a), resolve_skeleton(a.skeleton_b)
    corr = load_correspondence(a.correspondence) if a.correspondence else None
    ds = generate_synthetic_pairs(skA, skB, a.count, a.seed, corr, a.window, a.fps, a.amplitude)
    if a.limits:
        lim = _load_limits(a.limits)
        ds = PairedDataset(ds.skeleton_A, ds.skeleton_B,
                           [(x, dynamics_filter(skB, y, lim)) for x, y in ds.pairs], "filtered")
    save_dataset(ds, a.output)
    print(f"wrote {len(ds)} pairs to {a.output}")


def cmd_pretrain(a):
    from .nets import RetargetModel, save_model
    from .resources import resolve_skeleton
    from .training import Optimizer, TrainConfig, pretrain

    ds = _load_dataset(a.dataset)
    cfg = TrainConfig(learning_rate=a.lr, steps=a.steps, batch_size=a.batch_size, lambda_align=a.lambda_align,
                      lambda_consis=a.lambda_consis, seed=a.seed, optimizer=a.optimizer)
    opt = Optimizer(cfg)
    start = 0
    if a.resume:
        model, _, extra = _load_model(a.resume)
        if (model.skeletons["A"].name, model.skeletons["B"].name) != (ds.skeleton_A, ds.skeleton_B):
            raise SkeletonMismatch("checkpoint and dataset are on different skeletons")
        opt.load_state(extra)
        start = int(extra["train/next_step"][0]) if "train/next_step" in extra else opt.t
    else:
        skA = resolve_skeleton(a.skeleton_a or ds.skeleton_A)
        skB = resolve_skeleton(a.skeleton_b or ds.skeleton_B)
        model = RetargetModel(skA, skB, seed=a.seed)
    model, hist = pretrain(model, ds, cfg, log_path=a.log, start_step=start, optimizer=opt)
    extra = opt.state()
    extra["train/next_step"] = np.array([float(start + cfg.steps)])
    save_model(model, a.output, extra=extra, meta={"stage": "pretrain", "steps": start + cfg.steps})
    if hist:
        print(f"steps {start}..{start + cfg.steps - 1}: loss {hist[0]['loss_total']:.6g} -> {hist[-1]['loss_total']:.6g}")


def cmd_finetune(a):
    from .nets import save_model
    from .training import TrainConfig, feasible_targets, finetune

    model, side, _ = _load_model(a.model)
    ds = _load_dataset(a.feasible or a.dataset)
    if side.get("skeleton_B") != ds.skeleton_B:
        raise SkeletonMismatch(f"model skeleton_B {side.get('skeleton_B')!r} does not match targets on {ds.skeleton_B!r}")
    if side.get("skeleton_A") != ds.skeleton_A:
        raise SkeletonMismatch(f"model skeleton_A {side.get('skeleton_A')!r} does not match {ds.skeleton_A!r}")
    human = ds.clips("A")
    if a.feasible:
        targets = ds.clips("B")
    else:
        targets = feasible_targets(model, human, _load_limits(a.limits), a.workers)
    cfg = TrainConfig(learning_rate=a.lr, steps=a.steps, batch_size=a.batch_size, lambda_ee=a.lambda_ee, seed=a.seed)
    finetune(model, human, targets, cfg, log_path=a.log)
    save_model(model, a.output, meta={"stage": "finetune", "steps": cfg.steps})
    print(f"fine-tuned on {len(human)} pairs, wrote {a.output}")


def _read_motion(path):
    from .skeleton import load_motion

    try:
        return load_motion(path)
    except (IKMRError, OSError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def cmd_retarget(a):
    from .nets import retarget_batch, retarget_long
    from .skeleton import save_motion

    model, _, _ = _load_model(a.model)
    src = Path(a.input)
    if src.is_dir():
        files = sorted(src.glob("*.json"))
        out_dir = Path(a.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / f.name for f in files]
    elif src.is_file():
        files = [src]
        out = Path(a.output)
        targets = [out / src.name if out.is_dir() else out]
    else:
        raise ValidationError(f"input {src} does not exist")
    skA = model.skeletons["A"]
    clips = []
    for f in files:
        c = _read_motion(f)
        try:
            c.check_skeleton(skA)
        except IKMRError as exc:
            raise ValidationError(f"{f}: {exc}") from exc
        clips.append(c)
    fixed = [i for i, c in enumerate(clips) if c.num_frames == model.window]
    results = [None] * len(clips)
    for i, r in zip(fixed, retarget_batch(model, [clips[i] for i in fixed], a.workers)):
        results[i] = r
    for i, c in enumerate(clips):
        if results[i] is None:
            results[i] = retarget_long(model, c, a.workers)
    for r, t in zip(results, targets):
        save_motion(r, t)
    print(f"retargeted {len(results)} clip(s)")


def cmd_eval(a):
    from .dynamics import dynamics_filter, feasibility_report, merge_reports
    from .metrics import diagonal_contrast, latent_correlation_matrix, mean_smoothness, noise_sweep, sweep_to_csv
    from .nets import retarget_batch
    from .skeleton import dumps, write_text

    model, side, _ = _load_model(a.model)
    ds = _load_dataset(a.dataset)
    if (side.get("skeleton_A"), side.get("skeleton_B")) != (ds.skeleton_A, ds.skeleton_B):
        raise SkeletonMismatch("model and dataset are on different skeletons")
    clips = ds.clips("A")
    outputs = retarget_batch(model, clips, a.workers)
    report = {"format_version": 1, "seed": a.seed, "num_clips": len(clips),
              "smoothness": {"model": asdict(mean_smoothness(outputs))}}
    if a.baseline_model:
        base, bside, _ = _load_model(a.baseline_model)
        if bside.get("skeleton_B") != side.get("skeleton_B") or bside.get("skeleton_A") != side.get("skeleton_A"):
            raise SkeletonMismatch("baseline model is on different skeletons")
        report["smoothness"]["baseline"] = asdict(mean_smoothness(retarget_batch(base, clips, a.workers)))
    sweep = noise_sweep(model, clips, a.noise_levels, a.seed, a.workers)
    report["noise_sweep"] = [asdict(p) for p in sweep]
    n = min(a.correlation_pairs, len(ds))
    if n >= 2:
        m = latent_correlation_matrix(model, ds.pairs[:n])
        diag, off = diagonal_contrast(m)
        report["latent_correlation"] = {"pairs": n, "mean_diagonal": diag, "mean_off_diagonal": off,
                                        "matrix": m.tolist()}
    if a.limits:
        lim = _load_limits(a.limits)
        skB = model.skeletons["B"]
        filtered = [dynamics_filter(skB, c, lim) for c in outputs]
        report["feasibility"] = {
            "outputs": merge_reports(feasibility_report(skB, c, lim) for c in outputs).to_dict(),
            "filtered": merge_reports(feasibility_report(skB, c, lim) for c in filtered).to_dict(),
        }
    rp = Path(a.report)
    write_text(rp, dumps(report, indent=2))
    write_text(rp.with_suffix(".csv"), sweep_to_csv(sweep))
    print(f"wrote {rp} and {rp.with_suffix('.csv')}")


def cmd_bench(a):
    from .bench import rows_to_csv, run_bench
    from .nets import RetargetModel
    from .resources import builtin_skeleton
    from .skeleton import write_text

    backends = [b.strip() for b in a.backends.split(",") if b.strip()]
    missing = [b for b in backends if b not in _kernels.BACKENDS]
    if missing or not backends:
        raise ValidationError(f"unknown backend(s) {missing}; have {sorted(_kernels.BACKENDS)}")
    if a.model:
        model, _, _ = _load_model(a.model)
    else:
        model = RetargetModel(builtin_skeleton("toy-human"), builtin_skeleton("toy-robot"), seed=a.seed)
    rows = run_bench(model, a.batch_sizes, a.repeats, a.workers, backends, a.seed)
    text = rows_to_csv(rows)
    if a.output:
        write_text(a.output, text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "retarget": cmd_retarget,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser(_default_seed()).parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IKMRError, ValueError, KeyError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
