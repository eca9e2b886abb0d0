"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from genfl import certify, experiment, federation
from genfl.config import ConfigError, parse_config
from genfl.data import DataError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("genfl")


def cmd_run(args):
    spec = parse_config(args.config)
    if args.output_dir:
        spec = dataclasses.replace(spec, output_dir=args.output_dir)
    out_dir = Path(spec.output_dir) / spec.run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    for res in experiment.run_experiment(spec):
        r = res.row
        print(f"{r.run_id} seed={r.seed} bound={r.bound:.4f} test_error={r.test_error:.4f} kl/m={r.kl_over_m:.3g}")
    print(f"reports written to {out_dir}")


def cmd_certify(args):
    spec = parse_config(args.config)
    seed = spec.seeds[0] if args.seed is None else args.seed
    posterior = federation.load_checkpoint(args.checkpoint).params
    prior_path = args.prior or str(args.checkpoint).replace("_posterior", "_prior")
    prior = federation.load_checkpoint(prior_path).params
    train, _ = experiment.load_datasets(spec, seed)
    shards = experiment.build_shards(spec, train, seed)
    cert, estimates = certify.fed_bound(
        train, shards, posterior, prior, spec.effective_n_mc, delta=spec.delta, delta_prime=spec.delta_prime,
        loss_kind=spec.loss_kind, seed=seed, coupled=spec.coupled_mc, p_min=spec.p_min,
    )
    payload = cert.to_dict()
    payload["client_errors"] = {str(e.client_id): e.mean for e in estimates}
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_report(args):
    run_dir = Path(args.run_dir)
    reports = sorted(run_dir.glob("*_report.tsv"))
    if not reports:
        raise DataError(f"no reports found in {run_dir}")
    header = None
    rows = []
    for path in reports:
        header, part = experiment.read_table(path)
        rows += part
    cols = ["run_id", "seed", "prior_mode", "objective", "num_clients", "kl_penalty", "bound", "test_error",
            "kl_over_m"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(_short(r[c]) for c in cols))
    for path in sorted(run_dir.glob("*_summary.tsv")):
        print(f"\n{path.name}")
        _, summary = experiment.read_table(path)
        for r in summary:
            print(f"  {r['metric']:<18} min={_short(r['min'])} mean={_short(r['mean'])} max={_short(r['max'])}")


def _short(v):
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4f}"


def cmd_partition(args):
    spec = parse_config(args.config)
    seed = spec.seeds[0]
    train, _ = experiment.load_datasets(spec, seed)
    shards = experiment.build_shards(spec, train, seed)
    print(f"dataset: N={len(train)} d={train.dim} classes={train.num_classes}")
    print(f"partition={spec.partition} split_policy={spec.effective_split_policy}")
    print("client\tsize\tprior\tposterior\tvalidation\tlabels")
    for s in shards:
        labels = np.unique(train.labels[s.indices]).tolist()
        print(f"{s.client_id}\t{len(s.indices)}\t{len(s.prior)}\t{s.m}\t{len(s.validation)}\t{labels}")
    print(f"total m = {sum(s.m for s in shards)}")


def build_parser():
    p = argparse.ArgumentParser(prog="genfl", description="Federated PAC-Bayes training and certification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and certify as configured")
    run.add_argument("config")
    run.add_argument("--output-dir", default=None)
    run.set_defaults(func=cmd_run)

    cert = sub.add_parser("certify", help="certify a saved posterior checkpoint")
    cert.add_argument("checkpoint")
    cert.add_argument("config")
    cert.add_argument("--prior", default=None, help="prior checkpoint (default: sibling *_prior.ckpt)")
    cert.add_argument("--seed", type=int, default=None)
    cert.set_defaults(func=cmd_certify)

    rep = sub.add_parser("report", help="print the reports of a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    part = sub.add_parser("partition", help="inspect the client partition of a config")
    part.add_argument("--inspect", dest="config", required=True, metavar="CONFIG")
    part.set_defaults(func=cmd_partition)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
