"""No-shift control: adaptation between two samples of the same domain."""
import argparse
import json
import logging
import statistics
from pathlib import Path

from uda3d.experiments import StudyConfig, run_control
from uda3d.pipeline import RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--n", type=int, default=500, help="scenes per domain")
    ap.add_argument("--config", default=str(Path(__file__).parent / "configs" / "experiment.json"))
    ap.add_argument("--cache")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    study = StudyConfig(n_source=args.n, n_target=args.n, seeds=tuple(args.seeds),
                        base=RunConfig.load(args.config), cache_dir=args.cache)
    res = run_control(study)
    deltas = {s: r["full"] - r["source_only"] for s, r in res.per_seed.items()}
    for s, d in deltas.items():
        print(f"seed {s}: source-only {res.per_seed[s]['source_only']:.2f}  adapted {res.per_seed[s]['full']:.2f}  ({d:+.2f})")
    print(f"median change {statistics.median(deltas.values()):+.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_dict(), indent=2))


if __name__ == "__main__":
    main()
