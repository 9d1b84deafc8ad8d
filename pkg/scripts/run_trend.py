"""Component ablation on the size+density shift preset over several seeds.

    python3 scripts/run_trend.py --seeds 0 1 2 3 4 --cache runs/cache --out runs/trend.json
"""
import argparse
import json
import logging
from pathlib import Path

from uda3d.experiments import StudyConfig, ordering_gaps, run_trend
from uda3d.pipeline import VARIANTS, RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n-source", type=int, default=500)
    ap.add_argument("--n-target", type=int, default=500)
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "experiment.json"))
    ap.add_argument("--cache", help="directory for reusable pre-trained checkpoints")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    study = StudyConfig(n_source=args.n_source, n_target=args.n_target, seeds=tuple(args.seeds),
                        base=RunConfig.load(args.config), cache_dir=args.cache)
    res = run_trend(study)
    print("seed  " + "  ".join(f"{v:>11}" for v in VARIANTS))
    for s, row in res.per_seed.items():
        print(f"{s:4d}  " + "  ".join(f"{row[v]:11.2f}" for v in VARIANTS))
    med = res.medians()
    print("med   " + "  ".join(f"{med[v]:11.2f}" for v in VARIANTS))
    print("gaps", [round(g, 2) for g in ordering_gaps(med)], f"{res.seconds / 60:.1f} min")
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_dict(), indent=2))


if __name__ == "__main__":
    main()
