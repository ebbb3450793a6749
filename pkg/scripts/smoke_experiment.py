"""Toy smoke experiment: 3 seeds x lambda2 in {5, 0}, 200 iterations each.

Writes a Markdown comparison report and a JSON dump of every run.

    python scripts/smoke_experiment.py --out runs/smoke
"""
import argparse
import json
from pathlib import Path

import torch

from cycletrans.toybench import smoke_experiment, smoke_report_markdown


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--lambda2", type=float, nargs="+", default=[5.0, 0.0])
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    torch.set_num_threads(args.threads)

    result = smoke_experiment(tuple(args.seeds), tuple(args.lambda2), iterations=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "smoke_report.md").write_text(smoke_report_markdown(result))
    dump = {"runs": [r.summary() for r in result["runs"]],
            "medians": {str(k): v for k, v in result["medians"].items()}}
    (out / "smoke_runs.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    print(smoke_report_markdown(result))


if __name__ == "__main__":
    main()
