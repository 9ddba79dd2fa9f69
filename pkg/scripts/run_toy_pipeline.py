"""Run gen -> train-ae -> encode -> train-dyn -> rollout -> eval on a preset and time each stage.

    python3 scripts/run_toy_pipeline.py --root runs/toy
    python3 scripts/run_toy_pipeline.py --root runs/toy --preset toy --steps 32 --force
"""
import argparse
import sys
import time
from pathlib import Path

from meshrom.cli import main as meshrom


def stages(root: Path, preset: str, steps: int, extra: list):
    r = str(root)
    return [
        ("gen", ["gen", "--preset", preset, "--out", f"{r}/data", *extra]),
        ("train-ae", ["train-ae", "--data", f"{r}/data", "--out", f"{r}/ae"]),
        ("encode", ["encode", "--data", f"{r}/data", "--checkpoint", f"{r}/ae/autoencoder.glwt", "--out", f"{r}/lat"]),
        ("train-dyn", ["train-dyn", "--latent", f"{r}/lat", "--out", f"{r}/dyn"]),
        ("rollout", ["rollout", "--data", f"{r}/data", "--traj", "0", "--start", "0", "--steps", str(steps),
                     "--checkpoint", f"{r}/ae/autoencoder.glwt", "--checkpoint", f"{r}/dyn/dynamics.glwt",
                     "--out", f"{r}/pred"]),
        ("eval", ["eval", "--pred", f"{r}/pred", "--truth", f"{r}/data/traj_000", "--out", f"{r}/ev"]),
    ]


def run(root: Path, preset: str, steps: int, force: bool, extra: list) -> int:
    total = time.perf_counter()
    for name, argv in stages(root, preset, steps, extra):
        t = time.perf_counter()
        code = meshrom(argv + (["--force"] if force else []))
        print(f"{name:10s} {time.perf_counter() - t:8.1f}s  exit {code}", flush=True)
        if code:
            return code
    print(f"{'total':10s} {time.perf_counter() - total:8.1f}s")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/toy")
    ap.add_argument("--preset", default="toy")
    ap.add_argument("--steps", type=int, default=32)
    ap.add_argument("--force", action="store_true")
    args, extra = ap.parse_known_args()
    sys.exit(run(Path(args.root), args.preset, args.steps, args.force, extra))
