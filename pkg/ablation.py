#!/usr/bin/env python3
"""
Iteration ablation on the synthetic benchmark.

Trains and evaluates three variants per seed and prints the comparison at
eval.iou_threshold and at a stricter IoU (0.85 unless --strict-iou says otherwise):
  Iter_1          train with T=1, test with T=1 (no recursive refinement)
  Iter_2          train with T=2, test with T=2
  Iter_2_testing  train with T=1, test with T=2 (recursion at test time only)

    python ablation.py --seeds 0 1 2 3 4
    python ablation.py --strict-iou 0.9
    python ablation.py --config sample_data/config.toml --train.iterations 500
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from app.config import ConfigError, load_config_file
from app.main import LOG_FORMAT, UsageError, parse_overrides
from app.pipeline import STRICT_IOU_THRESHOLD, render_ablation, run_ablation


def main(argv=None) -> int:
    """Run the ablation and print the three-row table."""
    load_dotenv()
    logging.basicConfig(level=os.getenv("GRL_LOG_LEVEL", "INFO").upper(), format=LOG_FORMAT)

    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, default=os.getenv("GRL_CONFIG"), help="TOML configuration file")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="Seeds to average over")
    parser.add_argument("--strict-iou", type=float, default=STRICT_IOU_THRESHOLD,
                        help="Also score at this IoU threshold (0 disables)")
    args, leftovers = parser.parse_known_args(argv)

    try:
        config = load_config_file(args.config, parse_overrides(leftovers))
    except (ConfigError, UsageError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    if not 0.0 <= args.strict_iou <= 1.0:
        print(f"❌ --strict-iou must be in [0, 1], got {args.strict_iou}", file=sys.stderr)
        return 1

    print("\n" + "=" * 80)
    print(f"Iteration ablation over seeds {args.seeds}")
    print("=" * 80)

    strict_iou = args.strict_iou or None
    rows = run_ablation(config, args.seeds, strict_iou)

    print()
    print(render_ablation(rows, strict_iou))
    print("\nPer-seed mAP:")
    for row in rows:
        print(f"  {row.variant.name:<16}" + " ".join(f"{value:.4f}" for value in row.maps))
        if row.strict_maps:
            label = f"  @{strict_iou:g}"
            print(f"  {label:<16}" + " ".join(f"{value:.4f}" for value in row.strict_maps))
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
