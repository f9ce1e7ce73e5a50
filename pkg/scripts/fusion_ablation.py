"""Fusion-mode ablation on the toy preset: mean eval CD of multiply, concat and add over seeds.

    python3 scripts/fusion_ablation.py [--steps 400] [--seeds 0 1 2] [--out results/fusion_ablation.csv]
"""
import argparse
from pathlib import Path

from olat.experiments import fusion_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="results/fusion_ablation.csv")
    args = ap.parse_args()

    means, table = fusion_ablation(seeds=tuple(args.seeds), steps=args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = "mode," + ",".join(f"seed{s}" for s in args.seeds) + ",mean\n"
    out.write_text(header + "".join(f"{m},{','.join(f'{v:.6f}' for v in table[m])},{means[m]:.6f}\n"
                                    for m in table))
    for m, v in sorted(means.items(), key=lambda kv: kv[1]):
        print(f"{m:9s} mean eval CD {v:.6f}")


if __name__ == "__main__":
    main()
