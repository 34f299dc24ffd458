"""Parameter and FLOP table for the preset family, with per-stage FLOP breakdowns.

    python3 scripts/cost_table.py [--json results/cost_table.json]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from cnnkit.nn import count_flops, count_params, preset

ROWS = [("R50", 224), ("R50D", 224), ("R50D+SE", 224), ("R50D+SK", 224), ("R50D+SK+AA", 224),
        ("R50D+SK+BL", 256), ("R50D+SK+BL+AA", 256), ("R101D+SK+BL+AA", 256), ("R152D+SK+BL+AA", 256)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--json", type=Path, help="also write the table as JSON")
    args = ap.parse_args(argv)
    table = []
    print(f"{'model':18s} {'res':>4s} {'params (M)':>11s} {'FLOPs (G)':>10s}")
    for name, res in ROWS:
        spec = preset(name).replace(train_resolution=res, eval_resolution=res)
        p, f = count_params(spec), count_flops(spec, res)
        table.append({"model": name, "resolution": res, "params": p.params, "flops": f.flops,
                      "breakdown": f.breakdown})
        print(f"{name:18s} {res:4d} {p.params / 1e6:11.2f} {f.flops / 1e9:10.2f}")
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
