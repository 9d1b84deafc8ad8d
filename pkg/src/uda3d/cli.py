"""Command line entry point: gen, pretrain, adapt, eval, report.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import autograd as ag
from . import simworld
from .evaluation import EvalReport, closed_gap, reports_to_csv, reports_to_markdown
from .pipeline import RunConfig, adapt, evaluate_with_curves, pretrain

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("uda3d")


class ConfigError(ValueError):
    pass


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(_require(args.config, "config")) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "rounds", None) is not None:
        cfg = replace(cfg, rounds=args.rounds)
    return cfg


def _domain_specs(spec_arg: str):
    """A preset name or a JSON file with either {"preset": name} or source/target specs."""
    if spec_arg in simworld.PRESETS:
        return simworld.preset(spec_arg), {}
    d = json.loads(_require(spec_arg, "spec file").read_text())
    if "preset" in d:
        if d["preset"] not in simworld.PRESETS:
            raise ConfigError(f"unknown preset {d['preset']!r}")
        specs = simworld.preset(d["preset"])
    else:
        specs = (simworld.DomainSpec.from_dict(d["source"]), simworld.DomainSpec.from_dict(d["target"]))
    return specs, d


# ---------------------------------------------------------------- subcommands

def cmd_gen(args) -> None:
    (src_spec, tgt_spec), extra = _domain_specs(args.spec)
    n_src = args.n_source or extra.get("n_source", 500)
    n_tgt = args.n_target or extra.get("n_target", 500)
    val = extra.get("val_fraction", 0.2) if args.val_fraction is None else args.val_fraction
    src, tgt = simworld.make_domain_pair(src_spec, tgt_spec, (n_src, n_tgt),
                                         (2 * args.seed, 2 * args.seed + 1), val)
    out = Path(args.out)
    src.save(out / "source")
    tgt.save(out / "target")
    log.info("wrote %d source and %d target scenes to %s", n_src, n_tgt, out)


def _datasets(root):
    root = _require(root, "data directory")
    src = simworld.Dataset.load(_require(root / "source", "source dataset"))
    tgt = simworld.Dataset.load(_require(root / "target", "target dataset"), labels_visible=False)
    return src, tgt


def cmd_pretrain(args) -> None:
    cfg = _load_config(args)
    src, _ = _datasets(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    pretrain(src, cfg, log_path=out / "pretrain_log.csv", checkpoint=out / "pretrain.ckpt")


def cmd_adapt(args) -> None:
    cfg = _load_config(args)
    src, tgt = _datasets(args.data)
    params, meta = ag.load_checkpoint(_require(args.init, "initial checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    eval_set = tgt.eval_view().subset("val") if tgt.indices("val") else None
    final, rounds, _ = adapt(src, tgt, params, cfg, out_dir=out, eval_set=eval_set)
    if rounds:
        meta = {"stage": "adapt", "rounds": len(rounds), "anchor_sizes": cfg.loss.decode_anchor_sizes}
    ag.save_checkpoint(out / "final.ckpt", final, meta)
    summary = [{"round": r.round, "churn": r.churn, "empty_fraction": r.empty_fraction,
                "pseudo_labels": r.pseudo_labels,
                "report": r.report.to_dict() if r.report else None} for r in rounds]
    (out / "rounds.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def cmd_eval(args) -> None:
    cfg = _load_config(args)
    ds = simworld.Dataset.load(_require(args.data, "dataset"))
    params, meta = ag.load_checkpoint(_require(args.ckpt, "checkpoint"))
    split = None if args.split == "all" else args.split
    report, curves = evaluate_with_curves(params, ds, cfg, split, bool(meta.get("anchor_sizes", False)))
    d = report.to_dict()
    d["pr_curves"] = {c: {k: {"precision": p.tolist(), "recall": r.tolist()} for k, (p, r) in v.items()}
                      for c, v in curves.items()}
    text = json.dumps(d, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def _gap_table(fixture) -> tuple[str, str]:
    rows = json.loads(_require(fixture, "closed-gap fixture").read_text())
    head = ["task", "method", "class", "metric", "closed_gap"]
    md = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    buf = [",".join(head)]
    for r in rows:
        g = closed_gap(r["model_ap"], r["source_only_ap"], r["oracle_ap"])
        cell = "undefined" if math.isnan(g) else f"{g:+.2f}"
        vals = [r["task"], r["method"], r["cls"], r["metric"], cell]
        md.append("| " + " | ".join(vals) + " |")
        buf.append(",".join(vals))
    return "\n".join(md) + "\n", "\n".join(buf) + "\n"


def cmd_report(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.gap_fixture:
        md, table = _gap_table(args.gap_fixture)
        (out / "closed_gap.md").write_text(md)
        (out / "closed_gap.csv").write_text(table)
    if not args.reports:
        return
    raw, reports = {}, {}
    for item in args.reports:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"expected NAME=PATH, got {item!r}")
        raw[name] = json.loads(_require(path, "report").read_text())
        reports[name] = EvalReport.from_dict(raw[name])
    if args.source_only or args.oracle:
        if args.source_only not in reports or args.oracle not in reports:
            raise ConfigError("--source-only and --oracle must name reports given with --reports")
        so, orc = reports[args.source_only], reports[args.oracle]
        reports = {k: v.with_gaps(so, orc) for k, v in reports.items()}
    md = reports_to_markdown(reports)
    if args.source_only:
        md += "\nClosed gap (3D):\n\n" + reports_to_markdown(
            {k: EvalReport(v.closed_gap_bev, v.closed_gap_3d) for k, v in reports.items()})
    (out / "report.md").write_text(md)
    (out / "report.csv").write_text(reports_to_csv(reports))
    for name, d in raw.items():
        for cls_name, kinds in d.get("pr_curves", {}).items():
            for kind, pr in kinds.items():
                with open(out / f"pr_{name}_{cls_name}_{kind}.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["recall", "precision"])
                    w.writerows(zip(pr["recall"], pr["precision"]))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uda3d", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a source/target dataset pair")
    g.add_argument("--spec", required=True, help="preset name or JSON spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-source", type=int)
    g.add_argument("--n-target", type=int)
    g.add_argument("--val-fraction", type=float)
    g.set_defaults(fn=cmd_gen)

    for name, fn, helptext in (("pretrain", cmd_pretrain, "supervised source training"),
                               ("adapt", cmd_adapt, "self-training + adversarial adaptation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--data", required=True, help="directory written by gen")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        if name == "adapt":
            p.add_argument("--init", required=True, help="pre-trained checkpoint")
            p.add_argument("--rounds", type=int)
        p.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="AP of a checkpoint on a labelled dataset")
    e.add_argument("--config")
    e.add_argument("--data", required=True, help="dataset directory (e.g. data/target)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "all"))
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="render reports to Markdown/CSV and PR-curve files")
    r.add_argument("--reports", nargs="*", default=[], metavar="NAME=PATH")
    r.add_argument("--source-only", help="report name used as the source-only baseline")
    r.add_argument("--oracle", help="report name used as the oracle baseline")
    r.add_argument("--gap-fixture", help="JSON list of (model, source-only, oracle) AP triples")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ag.NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
