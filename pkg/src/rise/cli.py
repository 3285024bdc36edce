"""Command-line entry point: ``rise generate | train | verify-theory | ablate``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 a theory claim
failed. Output goes under ``--out`` or, by default, under ``$RISE_OUTPUT_ROOT``
(``./rise-out`` when unset).
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import experiments, synthdata, theory
from .errors import ConfigError, DimensionError, FitError, MetricError, NonFiniteLossError
from .trainer import TrainConfig, coarse_arms, fine_arms, run_experiment

OUTPUT_ENV = "RISE_OUTPUT_ROOT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _out_dir(args, name):
    root = os.environ.get(OUTPUT_ENV, "rise-out")
    path = args.out or os.path.join(root, name)
    os.makedirs(path, exist_ok=True)
    return path


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config_path, resolved, seed, outputs):
    """RunManifest: everything needed to repeat the command."""
    manifest = {
        "format": "rise-run-manifest", "version": 1, "command": command,
        "config_file": config_path, "resolved_config": resolved, "seed": seed,
        "output_dir": os.path.abspath(out_dir),
        "artifacts": {os.path.basename(p): _sha256(p) for p in outputs if os.path.exists(p)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
    return manifest


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _pairs(items, what, split=True):
    out = {}
    for item in items or []:
        for part in (item.split(",") if split else [item]):
            key, sep, value = part.partition("=")
            if not sep or not key:
                raise UsageError(f"{what} expects key=value, got {part!r}")
            out[key.strip()] = _parse_scalar(value.strip())
    return out


def resolve_train_config(args):
    """Config file values, then ``--set`` overrides, then explicit flags."""
    flat = TrainConfig().to_flat()
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
        flat.update(file_cfg)
    flat.update(_pairs(args.set, "--set", split=False))
    for key in ("epochs", "lr", "batch_size", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            flat[key] = value
    ablate = getattr(args, "ablate", None)
    if ablate and ablate != "none":
        aliases = {"irm": "irm_type", "mix": "mix_domain", "disentangle": "target"}
        for key, value in _pairs([ablate], "--ablate").items():
            flat[f"ablation.{aliases.get(key, key)}"] = value
    try:
        return TrainConfig.from_flat(flat)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _sweep(text):
    """``d=4:64`` (doubling grid), ``K=1:16`` or an explicit ``d=4,8,16``."""
    var, sep, spec = text.partition("=")
    if not sep or var not in ("d", "K"):
        raise argparse.ArgumentTypeError(f"sweep must look like d=4:64 or K=1,2,4, got {text!r}")
    try:
        if ":" in spec:
            lo, hi = (int(v) for v in spec.split(":"))
            if lo < 1 or hi < lo:
                raise ValueError
            grid = []
            v = lo
            while v <= hi:
                grid.append(v)
                v *= 2
        else:
            grid = [int(v) for v in spec.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad sweep grid {spec!r}") from exc
    if len(grid) < 3:
        raise argparse.ArgumentTypeError("a sweep needs at least three grid points")
    return var, tuple(grid)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    ds = synthdata.build_benchmark(seed=args.seed, n_domains=args.domains,
                                   n_per_domain=args.per_domain, n_attacks=args.attacks,
                                   dim=args.dim, n_modalities=args.modalities,
                                   targets=tuple(args.targets))
    out = _out_dir(args, "data")
    path = os.path.join(out, args.name)
    synthdata.save_dataset(path, ds)
    print(f"wrote {path}")
    print(f"{'domain':>6} {'rows':>6} {'spoof':>6} {'attacks':>10} {'mean |x|':>9}")
    for e in ds.domain_ids():
        s = ds.domains[e]
        attacks = sorted(set(int(a) for a in s.attack if a >= 0))
        norm = float(np.linalg.norm(s.x.reshape(len(s), -1), axis=1).mean())
        print(f"{e:>6} {len(s):>6} {int(s.y.sum()):>6} {','.join(map(str, attacks)):>10} {norm:>9.3f}")
    resolved = ds.config.to_json()
    write_manifest(out, "generate", None, resolved, args.seed, [path])
    return EXIT_OK


def _protocol(args, ds):
    n = ds.config.n_domains
    if args.protocol == "loo":
        return synthdata.complete_protocol(args.target, n)
    if args.protocol == "missing-test":
        if not args.drop:
            raise UsageError("--protocol missing-test needs --drop")
        return synthdata.missing_test_protocol(args.target, args.drop.split(","), n)
    if args.protocol == "missing-train":
        return synthdata.missing_train_protocol(args.target, args.drop_prob, n)
    sources = args.sources or [e for e in range(n) if e != args.target]
    return synthdata.limited_sources_protocol(sources, [args.target])


def cmd_train(args):
    config = resolve_train_config(args)
    if not os.path.exists(args.data):
        print(f"error: dataset {args.data} not found", file=sys.stderr)
        return EXIT_RUNTIME
    ds = synthdata.load_dataset(args.data)
    try:
        protocol = _protocol(args, ds)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args, f"train-{protocol.name}-t{args.target}-s{config.seed}")
    print(json.dumps(config.to_flat(), sort_keys=True))
    log = (lambda row: print(f"epoch {row['epoch']:>3}  loss {row['total']:.4f}")) if args.verbose else None
    result = run_experiment(config, ds, protocol, out, log)
    print(result.report.to_text(), end="")
    outputs = [os.path.join(out, f) for f in ("report.json", "report.txt", "trace.csv", "model.bin", "model.json")]
    resolved = {"train": config.to_flat(), "protocol": asdict(protocol), "data": os.path.abspath(args.data)}
    write_manifest(out, "train", args.config, resolved, config.seed, outputs)
    return EXIT_OK


def cmd_verify_theory(args):
    kwargs = {}
    for var, grid in args.sweep or []:
        kwargs["d_grid" if var == "d" else "k_grid"] = grid
    if args.triples:
        kwargs["n_triples"] = args.triples
    if args.joints:
        kwargs["n_joints"] = kwargs["n_marginals"] = args.joints
    settings = theory.TheorySettings(seed=args.seed, **kwargs)
    results, rows = theory.run_claims(settings)
    out = _out_dir(args, "theory")
    sweep_path = os.path.join(out, "kl_sweeps.csv")
    with open(sweep_path, "w") as fh:
        fh.write(theory.rows_to_csv(rows))
    report_path = os.path.join(out, "claims.json")
    with open(report_path, "w") as fh:
        json.dump([asdict(r) for r in results], fh, indent=2)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.claim:<28} [{r.anchor}]  "
              f"value={r.value:.6g} threshold={r.threshold:.6g}  {r.detail}")
    resolved = {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(settings).items()}
    write_manifest(out, "verify-theory", None, resolved, args.seed, [sweep_path, report_path])
    if failed:
        print("failed claims: " + ", ".join(f"{r.claim} [{r.anchor}]" for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args):
    config = resolve_train_config(args)
    arms = {}
    if args.grid in ("coarse", "all"):
        arms.update(coarse_arms())
    if args.grid in ("fine", "all"):
        arms.update(fine_arms())
    if args.arms:
        unknown = set(args.arms) - set(arms)
        if unknown:
            raise UsageError(f"unknown arms {sorted(unknown)}; available: {sorted(arms)}")
        arms = {k: arms[k] for k in args.arms}
    bench = {}
    if args.data:
        if not os.path.exists(args.data):
            print(f"error: dataset {args.data} not found", file=sys.stderr)
            return EXIT_RUNTIME
        header_cfg = synthdata.load_dataset(args.data).config.to_json()
        header_cfg.pop("seed")
        header_cfg.pop("targets")
        bench = {k: tuple(v) if isinstance(v, list) else v for k, v in header_cfg.items()}
    out = _out_dir(args, "ablate")
    seeds = list(range(args.seeds))
    log = lambda r: print(f"{r.arm:<24} seed {r.seed}  HTER {r.hter:.4f}  AUC {r.auc:.4f}", flush=True)
    records = experiments.run_arms(config, arms, seeds, bench, log=log, target=args.target)
    summaries = experiments.summarize(records)
    csv_path = os.path.join(out, "ablation.csv")
    with open(csv_path, "w") as fh:
        fh.write(experiments.table_csv(summaries))
    runs_path = os.path.join(out, "runs.csv")
    with open(runs_path, "w") as fh:
        fh.write(experiments.records_csv(records))
    print(experiments.table_text(summaries), end="")
    resolved = {"train": config.to_flat(), "arms": {k: asdict(v) for k, v in arms.items()},
                "seeds": seeds, "benchmark": bench, "target": args.target}
    write_manifest(out, "ablate", args.config, resolved, config.seed, [csv_path, runs_path])
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="rise", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-domain dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--per-domain", type=int, default=2000)
    g.add_argument("--attacks", type=int, default=4)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--modalities", type=int, default=3)
    g.add_argument("--targets", type=_int_list, default=[3])
    g.add_argument("--name", default="dataset.bin")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    def train_flags(q):
        q.add_argument("--config", help="flat JSON config (dotted keys)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--ablate", default="none",
                       help="comma-separated ablation overrides, e.g. irm=sym-linear,mmsd=false")
        q.add_argument("--out")

    t = sub.add_parser("train", help="train and evaluate one protocol")
    t.add_argument("--data", required=True)
    t.add_argument("--protocol", choices=["loo", "missing-test", "missing-train", "limited"],
                   default="loo")
    t.add_argument("--target", type=int, default=3)
    t.add_argument("--drop", help="modalities zeroed at test time, e.g. DEP,IR")
    t.add_argument("--drop-prob", type=float, default=0.7)
    t.add_argument("--sources", type=_int_list)
    t.add_argument("--seed", type=int)
    t.add_argument("-v", "--verbose", action="store_true")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify-theory", help="run the divergence and KL-scaling checks")
    v.add_argument("--sweep", type=_sweep, action="append", help="d=4:64 or K=1:16")
    v.add_argument("--triples", type=int)
    v.add_argument("--joints", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify_theory)

    a = sub.add_parser("ablate", help="multi-seed ablation table")
    a.add_argument("--data", help="dataset whose generator settings are reused per seed")
    a.add_argument("--grid", choices=["coarse", "fine", "all"], default="coarse")
    a.add_argument("--arms", nargs="+")
    a.add_argument("--seeds", type=int, default=4)
    a.add_argument("--target", type=int, default=3)
    train_flags(a)
    a.set_defaults(func=cmd_ablate, seed=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DimensionError, MetricError, FitError, NonFiniteLossError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
