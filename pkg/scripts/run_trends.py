"""Run the full teacher/student distillation matrix over several seeds.

Per seed: synthesize data, train the teacher and fusion LM, cache one-best
targets and pseudo-transcriptions (plain and LM-fused), then train the
student grid: non-streaming {baseline, pseudo, pseudo-fused, ST1, ST2,
ST2-fused} and streaming {baseline, pseudo, ST2 at each tau}.  Prints one
summary block per seed and the cross-seed trend verdicts at the end.

Usage:
    python scripts/run_trends.py [--seeds 101 202 303] [--work DIR]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tdkd.experiments import DEFAULT_SEEDS, run_seed, trend_verdicts


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    ap.add_argument("--work", default="trend_runs")
    args = ap.parse_args()
    work = Path(args.work)
    per_seed = []
    for seed in args.seeds:
        wers = run_seed(seed, work)
        per_seed.append(wers)
        print(f"seed {seed} ({wers['_seconds']}s):")
        for name, wer in sorted(wers.items()):
            if not name.startswith("_"):
                print(f"  {name:<16} {wer:.4f}")
    print("\ntrend verdicts:")
    for name, ok in trend_verdicts(per_seed).items():
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
    (work / "wers.json").write_text(json.dumps(per_seed, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
