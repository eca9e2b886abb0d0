"""Pipeline wiring (data -> prior -> GenFL / PFL -> certificates) and reports."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from genfl import certify, data, federation, seeding
from genfl.config import ExperimentSpec, dump_config

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
# where and how a run executes; left out of sidecars so reruns match byte for byte
EXECUTION_ONLY = ("output_dir", "parallel", "workers")


@dataclass
class ReportRow:
    run_id: str
    seed: int
    mode: str
    prior_mode: str
    objective: str
    num_clients: int
    kl_penalty: float
    bound: float
    test_error: float
    kl_over_m: float
    mc_risk: float
    m: int
    n_mc: int


@dataclass
class SeedResult:
    seed: int
    row: ReportRow
    certificates: list
    client_rows: list  # per-client dicts in PFL mode, else empty
    files: list


def load_datasets(spec: ExperimentSpec, seed: int):
    """Training and held-out test sets for one seed."""
    if spec.dataset == "mnist":
        train = data.load_mnist_idx(spec.mnist_train_images, spec.mnist_train_labels, spec.num_classes)
        test = data.load_mnist_idx(spec.mnist_test_images, spec.mnist_test_labels, spec.num_classes)
        return train, test
    args = (spec.num_classes, spec.n_per_class, spec.dim, spec.class_separation)
    train = data.gen_synthetic(*args, seed=[seed, seeding.DATA, 0])
    test = data.gen_synthetic(
        spec.num_classes, spec.n_test_per_class, spec.dim, spec.class_separation, seed=[seed, seeding.DATA, 1]
    )
    return train, test


def build_shards(spec: ExperimentSpec, ds: data.Dataset, seed: int):
    part_seed = [seed, seeding.PARTITION]
    if spec.partition == "iid":
        shards = data.partition_iid_balanced(ds, spec.num_clients, spec.per_class_count, part_seed)
    else:
        shards = data.partition_sorted_shards(
            ds, spec.num_clients, spec.shard_size, spec.shards_per_client, part_seed
        )
    policy = spec.effective_split_policy
    return [
        data.apply_split_policy(s, policy, ds.labels, [seed, seeding.PARTITION, 1, s.client_id]) for s in shards
    ]


def run_seed(spec: ExperimentSpec, seed: int, out_dir: Path) -> SeedResult:
    cfg = spec.fl_config(seed)
    stem = f"{spec.run_id}_seed{seed}"
    rounds_log = out_dir / f"{stem}_rounds.jsonl"
    rounds_log.unlink(missing_ok=True)
    train, test = load_datasets(spec, seed)
    shards = build_shards(spec, train, seed)
    kw = dict(
        delta=spec.delta, delta_prime=spec.delta_prime, loss_kind=spec.loss_kind,
        seed=seed, coupled=spec.coupled_mc, p_min=spec.p_min,
    )
    n_mc = spec.effective_n_mc
    files = []
    if spec.mode == "flsob":
        prior, _ = federation.build_prior(cfg, train, shards, spec.sizes, rounds_log)
        model, _ = federation.run_genfl(cfg, train, shards, prior, log_path=rounds_log)
        cert, _ = certify.fed_bound(train, shards, model.params, prior, n_mc, **kw)
        test_err = certify.stochastic_error(
            model.params, test.features, test.labels, spec.n_test_mc, seeding.stream(seed, seeding.TEST_EVAL)
        )
        for name, params, rnd in (("prior", prior, 0), ("posterior", model.params, model.round)):
            path = out_dir / f"{stem}_{name}.ckpt"
            federation.save_checkpoint(path, params, rnd)
            files.append(path)
        row = _row(spec, seed, cert.risk_bound, test_err, cert.kl_over_m, cert.mc_risk, cert.m, n_mc)
        return SeedResult(seed, row, [cert], [], files)

    result = federation.run_pfl(cfg, train, shards, spec.sizes, rounds_log)
    clients = [(s, result.posteriors[s.client_id]) for s in shards]
    certs = certify.personalised_bounds(train, clients, result.prior, n_mc, **kw)
    client_rows = []
    for (shard, post), cert in zip(clients, certs):
        # client-local test set: the validation split, else the global test set
        if len(shard.validation):
            x, y = train.subset(shard.validation)
        else:
            x, y = test.features, test.labels
        rng = lambda: seeding.stream(seed, seeding.TEST_EVAL, shard.client_id)  # noqa: E731
        client_rows.append({
            "client_id": shard.client_id,
            "m": cert.m,
            "risk_bound": cert.risk_bound,
            "mc_risk": cert.mc_risk,
            "kl_over_m": cert.kl_over_m,
            "test_error": certify.stochastic_error(post, x, y, spec.n_test_mc, rng()),
            "prior_test_error": certify.stochastic_error(result.prior, x, y, spec.n_test_mc, rng()),
        })
    path = out_dir / f"{stem}_prior.ckpt"
    federation.save_checkpoint(path, result.prior, cfg.prior_rounds)
    files.append(path)
    mean = lambda key: float(np.mean([r[key] for r in client_rows]))  # noqa: E731
    row = _row(spec, seed, mean("risk_bound"), mean("test_error"), mean("kl_over_m"), mean("mc_risk"),
               int(np.mean([c.m for c in certs])), n_mc)
    return SeedResult(seed, row, certs, client_rows, files)


def _row(spec, seed, bound, test_err, kl_over_m, mc_risk, m, n_mc):
    return ReportRow(
        spec.run_id, seed, spec.mode, spec.prior_mode, spec.objective, spec.num_clients,
        spec.kl_penalty, bound, test_err, kl_over_m, mc_risk, m, n_mc,
    )


def _run_one(args):
    spec, seed, out_dir = args
    res = run_seed(spec, seed, out_dir)
    res.files += emit_report([res.row], res.certificates, out_dir, spec, seed, res.client_rows)
    return res


def run_experiment(spec: ExperimentSpec) -> list[SeedResult]:
    """Run every seed of ``spec`` and write reports under ``output_dir/run_id``."""
    out_dir = Path(spec.output_dir) / spec.run_id
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.effective").write_text(dump_config(spec.resolved()))
    jobs = [(spec, seed, out_dir) for seed in spec.seeds]
    if spec.parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    for res in results:
        log.info("seed %d: bound %.4f test error %.4f", res.seed, res.row.bound, res.row.test_error)
    return results


# ---------------------------------------------------------------- reports

ROW_FIELDS = [f.name for f in fields(ReportRow)]
CLIENT_FIELDS = ["client_id", "m", "risk_bound", "mc_risk", "kl_over_m", "test_error", "prior_test_error"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        return header, [dict(zip(header, row)) for row in reader]


def emit_report(rows, certs, out_dir, spec: ExperimentSpec, seed: int, client_rows=()):
    """Write tab-separated tables and a JSON sidecar for one seed.

    Returns the written paths. Always writes the report row(s), a JSON
    sidecar and a min/mean/max summary over the certificates; in PFL mode
    also per-client results and 20-bin histograms of bounds and test errors.
    """
    out_dir = Path(out_dir)
    stem = f"{spec.run_id}_seed{seed}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        path = out_dir / f"{stem}_report.tsv"
        write_table(path, ROW_FIELDS, [asdict(r) for r in rows])
        written.append(path)

        path = out_dir / f"{stem}_certificate.json"
        config = json.loads(json.dumps(asdict(spec.resolved())))
        for key in EXECUTION_ONLY:
            config.pop(key)
        payload = {
            "run_id": spec.run_id,
            "seed": seed,
            "certificates": [c.to_dict() for c in certs],
            "config": config,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written.append(path)

        summary = []
        if certs:
            extra = None
            if client_rows:
                extra = {"test_error": [r["test_error"] for r in client_rows],
                         "prior_test_error": [r["prior_test_error"] for r in client_rows]}
            for name, (lo, mid, hi) in certify.summarize_certificates(certs, extra).items():
                summary.append({"metric": name, "min": lo, "mean": mid, "max": hi})
        path = out_dir / f"{stem}_summary.tsv"
        write_table(path, ["metric", "min", "mean", "max"], summary)
        written.append(path)

        if spec.mode == "pfl":
            path = out_dir / f"{stem}_clients.tsv"
            write_table(path, CLIENT_FIELDS, list(client_rows))
            written.append(path)
            bounds = certify.histogram([r["risk_bound"] for r in client_rows], HISTOGRAM_BINS)
            errors = certify.histogram([r["test_error"] for r in client_rows], HISTOGRAM_BINS)
            hist = [
                {"bin_lo": i / HISTOGRAM_BINS, "bin_hi": (i + 1) / HISTOGRAM_BINS, "bound": b, "test_error": e}
                for i, (b, e) in enumerate(zip(bounds, errors))
            ]
            path = out_dir / f"{stem}_histograms.tsv"
            write_table(path, ["bin_lo", "bin_hi", "bound", "test_error"], hist)
            written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    return written
