"""Command-line front door: synth, train, eval, bench, export-decays."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("DSRD_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import numpy as np  # noqa: E402  (thread cap must precede the import)

from .config import ModelConfig, TrainConfig, config_hash, load_config  # noqa: E402
from . import events as EV  # noqa: E402
from . import synth as SY  # noqa: E402


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command, args, inputs, seed):
    body = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "seed": seed,
    }
    blob = json.dumps(body, sort_keys=True, default=str).encode()
    body["manifest_hash"] = hashlib.sha256(blob).hexdigest()[:16]
    return body


def _write_manifest(manifest, outdir, outputs):
    manifest["outputs"] = {str(p): _sha256(p) for p in outputs}
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2, default=str)
        f.write("\n")


def _load_stream(args):
    return EV.ingest_csv(args.data, getattr(args, "node_feat", None))


def _split_from(args, stream, stored=None):
    if stored:
        if stored["mode"] == "inductive":
            return EV.inductive_split(stream, stored["train_frac"],
                                      stored["val_frac"],
                                      stored["new_node_frac"],
                                      stored["split_seed"])
        return EV.chronological_split(stream, stored["train_frac"],
                                      stored["val_frac"])
    if getattr(args, "inductive", False) or getattr(args, "setting", "") == "ind":
        return EV.inductive_split(stream, args.train_frac, args.val_frac,
                                  args.new_node_frac, args.split_seed)
    return EV.chronological_split(stream, args.train_frac, args.val_frac)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    spec = SY.SynthSpec(
        pattern=args.pattern, num_nodes=args.nodes, num_events=args.events,
        period=args.period, bipartite=args.bipartite, seed=args.seed,
        feature_dims=(args.feat_dim, args.edge_feat_dim),
        label_frac=args.label_frac)
    stream = SY.generate(spec)
    os.makedirs(args.out, exist_ok=True)
    events_path = os.path.join(args.out, "events.csv")
    nodes_path = os.path.join(args.out, "nodes.csv")
    EV.write_csv(stream, events_path,
                 nodes_path if spec.feature_dims[0] > 0 else None)
    manifest = _manifest("synth", args, [], args.seed)
    outputs = [events_path] + ([nodes_path] if spec.feature_dims[0] > 0 else [])
    _write_manifest(manifest, args.out, outputs)
    print(f"wrote {len(stream)} events to {events_path}")
    return 0


def _apply_cli_ablations(config: ModelConfig, args) -> ModelConfig:
    from dataclasses import replace
    flags = replace(config.ablation,
                    no_decay=config.ablation.no_decay or args.no_decay,
                    no_diffusion=config.ablation.no_diffusion or args.no_diffusion,
                    no_state=config.ablation.no_state or args.no_state,
                    no_block=config.ablation.no_block or args.no_block)
    return replace(config, ablation=flags)


def cmd_train(args):
    from .params import init_params, save_checkpoint
    from .train import fit

    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    model_cfg = _apply_cli_ablations(model_cfg, args)
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.max_epochs is not None:
        train_cfg.max_epochs = args.max_epochs

    stream = _load_stream(args)
    split = _split_from(args, stream)
    params = init_params(model_cfg, stream.feature_dims, seed=train_cfg.seed)
    manifest = _manifest("train", args,
                         [args.data, args.node_feat, args.config],
                         train_cfg.seed)
    result = fit(stream, split, params, train_cfg)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    split_info = {"mode": split.mode, "train_frac": args.train_frac,
                  "val_frac": args.val_frac,
                  "new_node_frac": args.new_node_frac,
                  "split_seed": args.split_seed}
    save_checkpoint(result.best_params, ckpt_path,
                    extra={"split": split_info,
                           "train": train_cfg.__dict__,
                           "manifest_hash": manifest["manifest_hash"],
                           "best_epoch": result.best_epoch})
    hist_path = os.path.join(args.out, "history.jsonl")
    with open(hist_path, "w", encoding="utf-8") as f:
        for rec in result.history:
            rec = {**rec, "manifest": manifest["manifest_hash"]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_manifest(manifest, args.out, [ckpt_path, hist_path])
    best = f"{result.best_metric:.4f}" if result.history else "n/a"
    print(f"best epoch {result.best_epoch} (val metric {best}); "
          f"checkpoint at {ckpt_path}")
    return 0


_NSS = {"rnd": "random", "hist": "historical", "ind": "inductive"}


def cmd_eval(args):
    from .params import load_checkpoint
    from .evaluation import evaluate_link, evaluate_node

    params, extra = load_checkpoint(args.checkpoint)
    stream = _load_stream(args)
    stored = extra.get("split") if not args.resplit else None
    if stored and args.setting == "ind" and stored.get("mode") != "inductive":
        stored = None
    split = _split_from(args, stream, stored)
    manifest = _manifest("eval", args, [args.checkpoint, args.data,
                                        args.node_feat], args.seed)
    setting = "inductive" if args.setting == "ind" else "transductive"
    if args.task == "link":
        report = evaluate_link(params, stream, split, setting=setting,
                               strategy=_NSS[args.nss], part=args.part,
                               seed=args.seed, batch_size=args.batch_size)
    else:
        report = evaluate_node(params, stream, split, part=args.part,
                               batch_size=args.batch_size)
    report.extra["config_hash"] = config_hash(params.config)
    report.extra["manifest"] = manifest["manifest_hash"]
    line = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(line + "\n")
    print(line)
    return 0


def cmd_bench(args):
    sizes = [int(float(s)) for s in args.sizes.split(",")]
    config = ModelConfig(dim=args.dim, layers=2, heads=2,
                         neighbors=args.neighbors, time_dim=args.dim)
    rows = SY.scaling_suite(sizes, config, repeats=args.repeats,
                            seed=args.seed, num_nodes=args.nodes)
    SY.write_bench_csv(rows, args.out)
    for r in rows:
        print(f"{r.events} events / {r.nodes} nodes: "
              f"forward {r.forward_ms:.1f} ms, backward {r.backward_ms:.1f} ms")
    return 0


def cmd_export_decays(args):
    from .params import load_checkpoint

    params, _ = load_checkpoint(args.checkpoint)
    cfg = params.config
    steps = np.arange(1, args.retention_steps + 1)
    dt_grid = np.array([0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0])
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("kind,layer,head,grid,value\n")
        for l in range(1, cfg.layers + 1):
            gam = params.gamma(l)
            lam = params.lam(l)
            alp = params.alpha(l)
            dlt = params.delta(l)
            for h in range(cfg.heads):
                f.write(f"gamma,{l},{h},0,{float(gam[h])!r}\n")
                for m in steps:
                    f.write(f"retention,{l},{h},{m},{float(gam[h]) ** int(m)!r}\n")
                for dt in dt_grid:
                    u = np.log1p(dt)
                    fac = float(np.exp(-lam[h] * u ** alp[h])) if u > 0 else 1.0
                    f.write(f"temporal,{l},{h},{float(dt)!r},{fac!r}\n")
                for dt in dt_grid:
                    psi = float(np.exp(-l * dlt[h] * np.log1p(dt)))
                    f.write(f"topo,{l},{h},{float(dt)!r},{psi!r}\n")
    print(f"wrote decay curves to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsrd",
                                description="dual-scale retentive dynamics "
                                            "for event-stream graphs")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic event stream")
    ps.add_argument("--pattern", choices=SY.PATTERNS, default="periodic")
    ps.add_argument("--nodes", type=int, default=100)
    ps.add_argument("--events", type=int, default=1000)
    ps.add_argument("--period", type=float, default=1.0)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--bipartite", action="store_true")
    ps.add_argument("--feat-dim", type=int, default=16)
    ps.add_argument("--edge-feat-dim", type=int, default=0)
    ps.add_argument("--label-frac", type=float, default=0.0)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="train on an event CSV")
    pt.add_argument("--data", required=True)
    pt.add_argument("--node-feat", default=None)
    pt.add_argument("--config", default=None)
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--max-epochs", type=int, default=None)
    pt.add_argument("--train-frac", type=float, default=0.70)
    pt.add_argument("--val-frac", type=float, default=0.15)
    pt.add_argument("--inductive", action="store_true")
    pt.add_argument("--new-node-frac", type=float, default=0.10)
    pt.add_argument("--split-seed", type=int, default=0)
    for flag in ("no-decay", "no-diffusion", "no-state", "no-block"):
        pt.add_argument(f"--{flag}", action="store_true")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--node-feat", default=None)
    pe.add_argument("--task", choices=("link", "node"), default="link")
    pe.add_argument("--setting", choices=("trans", "ind"), default="trans")
    pe.add_argument("--nss", choices=tuple(_NSS), default="rnd")
    pe.add_argument("--part", choices=("val", "test"), default="test")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--batch-size", type=int, default=200)
    pe.add_argument("--train-frac", type=float, default=0.70)
    pe.add_argument("--val-frac", type=float, default=0.15)
    pe.add_argument("--new-node-frac", type=float, default=0.10)
    pe.add_argument("--split-seed", type=int, default=0)
    pe.add_argument("--resplit", action="store_true",
                    help="ignore the split recorded in the checkpoint")
    pe.add_argument("--out", default=None)
    pe.set_defaults(func=cmd_eval)

    pb = sub.add_parser("bench", help="scaling benchmark")
    pb.add_argument("--sizes", default="10000,30000,100000,300000")
    pb.add_argument("--repeats", type=int, default=3)
    pb.add_argument("--nodes", type=int, default=None)
    pb.add_argument("--dim", type=int, default=32)
    pb.add_argument("--neighbors", type=int, default=10)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=cmd_bench)

    pd = sub.add_parser("export-decays", help="dump learned decay curves")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--retention-steps", type=int, default=32)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_export_decays)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime failure -> exit 1, reason on stderr
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
