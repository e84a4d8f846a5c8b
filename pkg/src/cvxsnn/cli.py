"""Command line entry point.

Exit codes: 0 success, 2 configuration error or missing checkpoint,
3 certification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ConfigError, load_config
from .tasks import OOD_DIGITS
from .variants import VARIANTS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CERT = 3


def _cell(cfg, variant, reg_beta, lr, lam_carry) -> harness.Cell:
    uses_cvx = variant in ("cvx", "sg-cvx", "cvx-sg")
    uses_sg = variant != "cvx"
    reg = (cfg.solver.reg_beta[0] if reg_beta is None else reg_beta) if uses_cvx else math.nan
    rate = (cfg.sg.lr[0] if lr is None else lr) if uses_sg else math.nan
    lam = cfg.task.lam_carry[0] if lam_carry is None else lam_carry
    return harness.Cell(variant, float(reg), float(rate), float(lam))


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    lams = cfg.task.lam_carry if cfg.task.name == "addition" else cfg.task.lam_carry[:1]
    for lam in lams:
        print(harness.gen_data(cfg, lam))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    variant = args.variant or cfg.variant
    cell = _cell(cfg, variant, args.reg_beta, args.lr, args.lam_carry)
    path = harness.train_cell(cfg, cell, auto_prior=args.with_prior)
    rec = json.loads((path / "run.json").read_text())
    print(json.dumps({"run": str(path), "val_score": rec.get("val_score"), "gap": rec.get("gap")}))
    return EXIT_OK


def cmd_certify(args) -> int:
    out = harness.certify_run(args.run, args.tol)
    print(json.dumps(out, indent=1))
    return EXIT_OK if out["certified"] else EXIT_CERT


def cmd_eval(args) -> int:
    ood = args.ood_lengths
    if ood == ["default"]:
        rec = json.loads((Path(args.run) / "run.json").read_text())
        ood = list(OOD_DIGITS.get(rec["config"]["task"]["base"], ()))
    rows = harness.eval_run(args.run, args.mode, [int(n) for n in ood or ()])
    for r in rows:
        d = r.row()
        print(json.dumps({k: d[k] for k in ("split", "mode", "T", "joint_token_acc", "seq_acc", "accuracy")}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    out = harness.sweep(cfg, args.variant)
    print(json.dumps({"dir": out["dir"], "best": out["best"]}, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvxsnn", description="Convex training of LIF spiking networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and cache dataset splits")
    g.add_argument("config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("config")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--reg-beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam-carry", type=float)
    t.add_argument("--with-prior", action="store_true", help="train a missing prerequisite stage first")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="recompute the duality gap of a stored solution")
    c.add_argument("run")
    c.add_argument("--tol", type=float)
    c.set_defaults(func=cmd_certify)

    e = sub.add_parser("eval", help="teacher-forced or autoregressive evaluation")
    e.add_argument("run")
    e.add_argument("--mode", choices=("tf", "ar"), default="tf")
    e.add_argument("--ood-lengths", nargs="*", default=None,
                   help="digit counts for length-OOD splits, or 'default' for the per-base lengths")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid search with validation selection")
    s.add_argument("config")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
