"""End-to-end desk run: generate a periodic stream, train, evaluate all
negative-sampling strategies, and export the learned decay curves."""
import pathlib
import sys

from dsrd.cli import main

OUT = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else pathlib.Path("desk_out")


def run(*args):
    rc = main([str(a) for a in args])
    if rc != 0:
        sys.exit(rc)


data = OUT / "data"
run("synth", "--pattern", "periodic", "--nodes", 200, "--events", 5000,
    "--seed", 0, "--out", data)

cfg = OUT / "desk.cfg"
OUT.mkdir(parents=True, exist_ok=True)
cfg.write_text("max_epochs = 10\nseed = 0\n")

run_dir = OUT / "run"
run("train", "--data", data / "events.csv", "--node-feat", data / "nodes.csv",
    "--config", cfg, "--out", run_dir)

for nss in ("rnd", "hist", "ind"):
    run("eval", "--checkpoint", run_dir / "checkpoint.bin",
        "--data", data / "events.csv", "--node-feat", data / "nodes.csv",
        "--nss", nss, "--setting", "trans", "--seed", 0,
        "--out", OUT / f"report_{nss}.json")

run("export-decays", "--checkpoint", run_dir / "checkpoint.bin",
    "--out", OUT / "decays.csv")
print(f"artifacts under {OUT}/")
