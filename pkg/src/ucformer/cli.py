"""Command-line entry point: ``ucformer <subcommand> [--profile desk|paper] ...``.

Every subcommand writes its CSV files plus ``run_metadata.txt`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluate as ev
from .config import PROFILES, RunConfig, dump_config, load_config
from .data import Dataset, build_dataset
from .model import CosFormerNet
from .train import load_checkpoint, save_checkpoint, train

log = logging.getLogger("ucformer")


def write_csv(path: Path, rows: list[dict], fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_metadata(out: Path, args, run: RunConfig, extra: dict | None = None) -> None:
    lines = [
        f"command = {args.command}",
        f"profile = {args.profile}",
        f"seed = {args.seed}",
        f"config_sha256 = {run.digest()}",
        f"checkpoint = {args.checkpoint or ''}",
        f"ucformer = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
    ]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    (out / "run_metadata.txt").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(dump_config(run))


def resolve_config(args) -> RunConfig:
    base = PROFILES[args.profile]()
    return load_config(args.config, base) if args.config else base


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _model(args, run: RunConfig) -> CosFormerNet:
    if not args.checkpoint:
        raise SystemExit(f"{args.command}: --checkpoint is required")
    net, _ = load_checkpoint(args.checkpoint)
    if net.L != run.network.L:
        raise SystemExit(f"checkpoint has L={net.L}, config has L={run.network.L}")
    return net


def _scenario(args, run: RunConfig, strategies=ev.STRATEGIES) -> ev.EvalScenario:
    return ev.EvalScenario(
        strategies=tuple(strategies),
        K_values=args.K or (3, 5, 8, 12),
        noise_levels_m=getattr(args, "noise", None) or (0.0, 5.0),
        seed=args.seed,
        n_test=args.n_test,
        Q=args.Q if args.Q else min(8, max(1, run.network.L // 2)),
    )


def cmd_gen_data(args, run, out):
    ds = build_dataset(run.network, run.train, args.seed)
    ds.save(out / "dataset.bin")
    write_csv(out / "manifest.csv", [dict(zip(("seed", "K", "L", "offset", "length"), r)) for r in ds.manifest()])
    return {"samples": len(ds)}


def cmd_train(args, run, out):
    ds = Dataset.load(args.data, run.network) if args.data else build_dataset(run.network, run.train, args.seed)
    net = CosFormerNet(run.model, run.network.L, seed=args.seed)
    history = train(net, ds, run, seed=args.seed)
    history.write_csv(out / "metrics.csv")
    save_checkpoint(out / "checkpoint.npz", net, run)
    mse = history.epoch_means("mse")
    return {"first_epoch_mse": mse[0], "final_epoch_mse": mse[-1]}


def cmd_eval_se(args, run, out):
    net = _model(args, run)
    scenario = _scenario(args, run)
    write_csv(out / "se.csv", ev.eval_se_sweep(scenario, net, run.network))
    return {"Q": scenario.Q, "full_cf_note": "optimal-cf ignores the pilot limit"}


def cmd_eval_connections(args, run, out):
    net = _model(args, run)
    scenario = _scenario(args, run, ("optimal-cf", "dcc", "predicted-uc-cf"))
    write_csv(out / "connections.csv", ev.connection_stats(scenario, net, run.network))
    return {"Q": scenario.Q, "tau_p": run.network.tau_p}


def cmd_eval_cdf(args, run, out):
    net = _model(args, run)
    held = [ev.held_out_sample(run.network, K, args.seed, i) for K in args.K or run.train.K_train for i in range(args.n_test)]
    cdf = ev.power_cdf(net, held, run.network)
    write_csv(out / "power_cdf.csv", cdf.rows)
    write_csv(out / "ks.csv", [dict(direction=d, ks=v) for d, v in cdf.ks.items()])
    return {f"ks_{d}": v for d, v in cdf.ks.items()}


def cmd_eval_robustness(args, run, out):
    net = _model(args, run)
    write_csv(out / "robustness.csv", ev.robustness_sweep(net, _scenario(args, run), run.network))
    return {}


def cmd_bench_flops(args, run, out):
    rows = []
    for K in args.K or (16, 32, 64):
        rep = ev.flops_report(run.model, K, run.network.L)
        rows.append(dict(K=K, **rep.components, total=rep.total, dense_attention=rep.dense_attention, n_params=rep.n_params))
    write_csv(out / "flops.csv", rows)
    extra = {}
    if args.checkpoint:
        lat = ev.latency_comparison(_model(args, run), run.network, max(args.K or (40,)), args.seed)
        write_csv(out / "latency.csv", [lat])
        extra = lat
    return extra


def cmd_bench_attn_oracle(args, run, out):
    rows = ev.attention_oracle_check(args.n_test, args.seed)
    write_csv(out / "attn_oracle.csv", rows)
    return {"max_rel_err": max(r["rel_err"] for r in rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-se": cmd_eval_se,
    "eval-connections": cmd_eval_connections,
    "eval-cdf": cmd_eval_cdf,
    "eval-robustness": cmd_eval_robustness,
    "bench-flops": cmd_bench_flops,
    "bench-attn-oracle": cmd_bench_attn_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file layered over the profile")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--checkpoint", help="trained model (.npz)")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    common.add_argument("--K", type=_ints, help="comma-separated UE counts")
    common.add_argument("--n-test", dest="n_test", type=int, default=20, help="samples per sweep point")
    common.add_argument("--Q", type=int, help="DCC cluster size (default min(8, L/2))")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ucformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--data", help="dataset file from gen-data (generated if omitted)")
        if name == "eval-robustness":
            p.add_argument("--noise", type=_floats, help="comma-separated position error std in m")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = COMMANDS[args.command](args, run, out)
    write_metadata(out, args, run, extra)
    for k, v in (extra or {}).items():
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
