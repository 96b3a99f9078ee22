"""Run the desk-scale experiment for several seeds and summarise the directional checks.

Example:
    python3 scripts/run_desk_experiment.py --seeds 0 1 2 --out runs
"""

import argparse
import json
import logging
from pathlib import Path

from overlap_asr.experiment import desk_config, run_experiment, directional_checks


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    summary = {}
    for seed in args.seeds:
        cfg = desk_config(seed)
        report, timings = run_experiment(cfg, Path(args.out) / f"desk-seed{seed}")
        checks = directional_checks(report)
        summary[seed] = {"checks": checks, "total_s": round(timings["total_s"], 1)}
        d = report["diarizer"]
        print(f"seed {seed}  ({timings['total_s']:.0f} s)")
        print(f"  diarizer DER {d['der']['der_pct']} (no collar {d['der_no_collar']['der_pct']}, "
              f"all-silence {d['all_silence_der']})")
        for kind, m in report["models"].items():
            print(f"  {kind:<10} overlapped-frame acc {m['overlap_frame_accuracy']:6.2f}  "
                  f"WER GTS {m['wer_gts']:6.2f}  WER diarizer {m['wer_diarizer']:6.2f}")
        print(f"  accuracy margin {checks['accuracy_margin']:.2f}, WER ordering {checks['wer_ordering']}, "
              f"diarizer gap {checks['diarizer_gap']:.2f}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
