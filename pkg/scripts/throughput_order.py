"""Forward throughput of R50, R50D and R50D+SK at matched settings, repeated.

Only the ordering is meaningful; absolute numbers depend on the machine and
on numpy's BLAS.  Run it on an otherwise idle machine.

    python3 scripts/throughput_order.py --runs 3 --batch 4
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from cnnkit.nn import preset
from cnnkit.nn.model import ModelGraph
from cnnkit.robustness import hardware_descriptor, throughput_bench

NAMES = ("R50", "R50D", "R50D+SK")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--iters", type=int, default=2)
    ap.add_argument("--resolution", type=int, default=224)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args(argv)
    models = {n: ModelGraph(preset(n)) for n in NAMES}
    runs = []
    for i in range(args.runs):
        r = {n: throughput_bench(models[n], args.batch, 1, args.iters, args.resolution).images_per_sec
             for n in NAMES}
        runs.append(r)
        order = all(r[a] > r[b] for a, b in zip(NAMES, NAMES[1:]))
        print(f"run {i}: " + "  ".join(f"{n} {r[n]:.2f} img/s" for n in NAMES) + f"  ordered={order}")
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps({"runs": runs, "batch": args.batch, "iters": args.iters,
                                         "resolution": args.resolution, "hardware": hardware_descriptor()},
                                        indent=2))


if __name__ == "__main__":
    main()
