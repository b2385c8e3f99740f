"""Command-line harness: generate, train, eval, sweep, benchmark, cs.

Flags map 1:1 onto the config dataclasses; a JSON config file may preload any
of them (``--config``), with explicit flags taking precedence. Every command
writes a manifest carrying the configuration, its hash, the seeds, and the
package version. Exit codes: 0 success, 2 configuration/contract error,
3 numeric failure (divergence or a failed inversion).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cs_baseline import CsConfig, cs_reconstruct
from .data_metrics import (
    DatasetConfig,
    generate_dataset,
    inference_sweep,
    load_dataset,
    metric_set,
    save_dataset,
)
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .train_strategies import TrainConfig, TrainData, train
from .unrolled_nets import build_network, load_snapshot, save_snapshot

_CONFIG_ERRORS = (ConfigError, ShapeError, ContractError, KeyError, FileNotFoundError)


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seeds": seeds,
        "version": __version__,
    }
    if extra:
        manifest.update(extra)
    _write_json(out_dir / "manifest.json", manifest)


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _train_data(split, mu: float, step_size: float) -> TrainData:
    model = split.model(step_size=step_size, mu=mu)
    return TrainData(refs=split.refs, kspace=split.kspace, model=model)


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    cfg = DatasetConfig(
        height=args.height,
        width=args.width,
        coils=args.coils,
        counts={"train": args.train, "val": args.val, "test": args.test},
        mask_kind=args.mask,
        acceleration=args.acceleration,
        calibration_extent=args.calibration,
        noise_snr_db=args.noise_snr_db,
        seed=args.seed,
    )
    splits = generate_dataset(cfg)
    out = Path(args.out)
    save_dataset(splits, out)
    _write_manifest(
        out, "generate", cfg.to_dict(), {"dataset": cfg.seed},
        extra={
            "achieved_acceleration": {
                name: split.meta["achieved_acceleration"]
                for name, split in splits.items()
            }
        },
    )
    print(f"wrote {len(splits)} splits to {out}")
    return 0


def _build_net_from_args(args, model):
    invertible = {"auto": None, "yes": True, "no": False}[args.invertible]
    return build_network(
        args.kind, model, args.n_iters, args.modules,
        features=args.features, cg_iters=args.cg_iters,
        invertible=invertible, seed=args.net_seed,
    )


def cmd_train(args) -> int:
    splits = load_dataset(args.dataset)
    if "train" not in splits:
        raise ConfigError(f"no train split under {args.dataset}")
    data = _train_data(splits["train"], args.mu, args.step_size)
    cfg = TrainConfig(
        strategy=args.strategy,
        workers=args.workers,
        batch_size=args.batch_size,
        total_steps=args.total_steps,
        lr=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        adam_eps=args.adam_eps,
        n_cp=args.n_cp,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    if args.init_snapshot:
        net = load_snapshot(args.init_snapshot, data.model)
    else:
        net = _build_net_from_args(args, data.model)
    val_data = (
        _train_data(splits["val"], args.mu, args.step_size)
        if "val" in splits and cfg.eval_every > 0 else None
    )
    report = train(net, data, cfg, val_data=val_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(net, out / "snapshot.bin")
    report.snapshot_path = "snapshot.bin"  # relative: reports stay rerun-identical
    (out / "report.json").write_text(report.to_json())
    net_config = {
        "kind": net.kind, "n_iters": net.n_iters, "modules": net.n_modules,
        "features": net.features, "cg_iters": net.cg_iters,
        "invertible": net.invertible, "mu": args.mu, "step_size": args.step_size,
        "net_seed": net.seed, "init_snapshot": args.init_snapshot,
    }
    _write_manifest(
        out, "train", {"train": cfg.to_dict(), "network": net_config},
        {"train": cfg.seed, "network": net.seed},
        extra={"numeric_digest": report.numeric_digest},
    )
    print(f"trained {cfg.strategy}: final loss "
          f"{np.asarray(report.loss_trace)[-1].ravel()[-1]:.6f}, "
          f"peak activations {report.peak_activation_elements}")
    return 0


def _load_eval_split(args):
    splits = load_dataset(args.dataset)
    if args.split not in splits:
        raise ConfigError(f"split {args.split!r} not found under {args.dataset}")
    return splits[args.split]


def cmd_eval(args) -> int:
    split = _load_eval_split(args)
    model = split.model(step_size=args.step_size, mu=args.mu)
    net = load_snapshot(args.snapshot, model)
    recon = net.forward_full(split.kspace, n_inf=args.n_inf)
    metrics = metric_set(split.refs, recon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"item": i, **{k: item[k] for k in ("psnr", "ssim", "nrmse")}}
        for i, item in enumerate(metrics["items"])
    ]
    _write_csv(out / "metrics.csv", rows)
    payload = {"split": args.split, "summary": metrics["summary"]}
    if args.sweep:
        payload["sweep"] = inference_sweep(net, split)
    _write_json(out / "metrics.json", payload)
    _write_manifest(
        out, "eval",
        {"snapshot": str(args.snapshot), "dataset": str(args.dataset),
         "split": args.split, "mu": args.mu, "step_size": args.step_size,
         "n_inf": args.n_inf, "sweep": args.sweep},
        {},
    )
    s = metrics["summary"]
    print(f"{args.split}: psnr {s['psnr']['mean']:.2f}({s['psnr']['std']:.2f}) dB, "
          f"ssim {s['ssim']['mean']:.3f}, nrmse {s['nrmse']['mean']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    split = _load_eval_split(args)
    model = split.model(step_size=args.step_size, mu=args.mu)
    net = load_snapshot(args.snapshot, model)
    rows = inference_sweep(net, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", rows)
    _write_json(out / "sweep.json", {"split": args.split, "rows": rows})
    _write_manifest(
        out, "sweep",
        {"snapshot": str(args.snapshot), "dataset": str(args.dataset),
         "split": args.split, "mu": args.mu, "step_size": args.step_size},
        {},
    )
    for row in rows:
        print(f"n_inf {row['n_inf']:3d}: psnr {row['psnr']:.2f} dB")
    return 0


def cmd_benchmark(args) -> int:
    splits = load_dataset(args.dataset)
    data = _train_data(splits["train"], args.mu, args.step_size)
    strategies = ["e2e_bp", "checkpointing", "mel", "gleam"]
    if args.kind != "modl" or args.invertible == "no":
        strategies.remove("mel")
    rows = []
    for strategy in strategies:
        net = _build_net_from_args(args, data.model)
        cfg = TrainConfig(strategy=strategy, batch_size=args.batch_size,
                          total_steps=args.total_steps, seed=args.seed)
        report = train(net, data, cfg)
        rows.append({
            "strategy": strategy,
            "peak_activation_elements": report.peak_activation_elements,
            "predicted_peak_elements": report.predicted_peak_elements,
            "step_s": report.timing["step_s"],
            "forward_s": report.timing.get("forward_s", ""),
            "backward_s": report.timing.get("backward_s", ""),
            "merged": report.timing["merged"],
        })
    if args.workers > 1:
        net = _build_net_from_args(args, data.model)
        cfg = TrainConfig(strategy="gleam", workers=args.workers,
                          batch_size=args.batch_size,
                          total_steps=args.total_steps, seed=args.seed)
        report = train(net, data, cfg)
        rows.append({
            "strategy": f"gleam[workers={args.workers}]",
            "peak_activation_elements": report.peak_activation_elements,
            "predicted_peak_elements": report.predicted_peak_elements,
            "step_s": report.timing["step_s"],
            "forward_s": "",
            "backward_s": "",
            "merged": True,
        })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "benchmark.csv", rows)
    _write_json(out / "benchmark.json", {"rows": rows})
    _write_manifest(
        out, "benchmark",
        {"dataset": str(args.dataset), "kind": args.kind,
         "n_iters": args.n_iters, "modules": args.modules,
         "features": args.features, "steps": args.total_steps,
         "batch_size": args.batch_size, "workers": args.workers},
        {"train": args.seed},
    )
    for row in rows:
        print(f"{row['strategy']:24s} peak={row['peak_activation_elements']:>12d} "
              f"predicted={row['predicted_peak_elements']:>12d} "
              f"step={row['step_s']*1e3:8.1f} ms")
    return 0


def cmd_cs(args) -> int:
    split = _load_eval_split(args)
    model = split.model()
    cfg = CsConfig(lam=args.lam, iterations=args.iterations, levels=args.levels)
    recons = np.stack([
        cs_reconstruct(model, split.kspace[i], cfg) for i in range(split.n_items)
    ])
    metrics = metric_set(split.refs, recons)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        {"item": i, **{k: item[k] for k in ("psnr", "ssim", "nrmse")}}
        for i, item in enumerate(metrics["items"])
    ]
    _write_csv(out / "cs_metrics.csv", rows)
    _write_json(out / "cs_metrics.json",
                {"split": args.split, "summary": metrics["summary"],
                 "lam": args.lam, "iterations": args.iterations})
    _write_manifest(
        out, "cs",
        {"dataset": str(args.dataset), "split": args.split, "lam": args.lam,
         "iterations": args.iterations, "levels": args.levels},
        {},
    )
    s = metrics["summary"]
    print(f"cs {args.split}: psnr {s['psnr']['mean']:.2f}({s['psnr']['std']:.2f}) dB")
    return 0


# ------------------------------------------------------------------- parser

def _add_net_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=("pgd", "modl"), default="pgd")
    p.add_argument("--n-iters", type=int, default=4)
    p.add_argument("--modules", type=int, default=4)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--cg-iters", type=int, default=10)
    p.add_argument("--invertible", choices=("auto", "yes", "no"), default="auto")
    p.add_argument("--net-seed", type=int, default=0)
    p.add_argument("--mu", type=float, default=4.0)
    p.add_argument("--step-size", type=float, default=0.5)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=("e2e_bp", "checkpointing", "mel", "gleam"),
                   default="e2e_bp")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--total-steps", "--steps", dest="total_steps", type=int,
                   default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--n-cp", type=int, default=None)
    p.add_argument("--seed", type=int, required=True,
                   help="training seed (explicit, no default)")
    p.add_argument("--eval-every", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unrolled-mri",
        description="Memory-efficient training strategies for unrolled MRI "
                    "reconstruction on synthetic desk-scale problems.",
    )
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file preloading any flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=200)
    g.add_argument("--val", type=int, default=20)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--coils", type=int, default=4)
    g.add_argument("--mask", choices=("poisson_disc_2d", "random_1d_cartesian"),
                   default="poisson_disc_2d")
    g.add_argument("--acceleration", type=float, default=4.0)
    g.add_argument("--calibration", type=int, default=8)
    g.add_argument("--noise-snr-db", type=float, default=None)
    g.add_argument("--seed", type=int, required=True,
                   help="generation seed (explicit, no default)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an unrolled network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init-snapshot", type=str, default=None)
    _add_net_args(t)
    _add_train_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a snapshot on a dataset split")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--n-inf", type=int, default=None)
    e.add_argument("--sweep", action="store_true")
    e.add_argument("--mu", type=float, default=4.0)
    e.add_argument("--step-size", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="stage-wise inference sweep over n_inf")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--mu", type=float, default=4.0)
    s.add_argument("--step-size", type=float, default=0.5)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("benchmark", help="peak-memory and timing table")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", required=True)
    _add_net_args(b)
    b.add_argument("--batch-size", type=int, default=2)
    b.add_argument("--total-steps", "--steps", dest="total_steps", type=int,
                   default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_benchmark, kind="modl")

    c = sub.add_parser("cs", help="compressed-sensing baseline reconstruction")
    c.add_argument("--dataset", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--out", required=True)
    c.add_argument("--lam", type=float, default=2e-3)
    c.add_argument("--iterations", type=int, default=100)
    c.add_argument("--levels", type=int, default=3)
    c.set_defaults(func=cmd_cs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    # two-phase parse so a JSON config can preload defaults
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    pre, _ = probe.parse_known_args(argv)
    if pre.config:
        try:
            overrides = json.loads(Path(pre.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        parser.set_defaults(**overrides)
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                known = {a.dest for a in sp._actions}
                defaults = {k: v for k, v in overrides.items() if k in known}
                sp.set_defaults(**defaults)
                for a in sp._actions:  # a config value satisfies "required"
                    if a.dest in defaults:
                        a.required = False
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse validation failure (or --help)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
