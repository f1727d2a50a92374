"""Command-line experiment runner.

Subcommands: prepare, train, evaluate, sweep-eta, analyze-poisonous, verify.
Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import datamodel as dm
from .experiment import (ExperimentConfig, RunManifest, load_config, load_data, run_cell,
                         propensities_for)
from .metrics import MetricsReport, analyze_poisonous, evaluate
from .models import PropensityTable, load_model, save_model, save_propensities
from .simulator import experiment_tables, make_world
from .trainer import ConfigError, train
from .verification import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p, out_required=True):
    p.add_argument("--config", help="INI experiment configuration")
    p.add_argument("--seed", type=int, help="run this seed only, overriding train.seeds")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel training cells")
    p.add_argument("--k", type=int, default=5, help="cutoff for NDCG@k and Recall@k")


def build_parser():
    parser = _Parser(prog="cdr", description="Conservative doubly robust debiasing experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="convert raw data into train/validation/test triplets")
    _common(p)
    p.add_argument("--format", choices=("coat", "triplets", "synthetic"))
    p.add_argument("--train", help="biased ratings (Coat matrix or raw triplets)")
    p.add_argument("--test", help="unbiased ratings (Coat matrix or raw triplets)")

    p = sub.add_parser("train", help="train one model set per seed")
    _common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test table")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="directory holding rec.npz [and imp.npz]")
    p.add_argument("--test", help="test triplets (default: <data.dir>/test.tsv)")

    p = sub.add_parser("sweep-eta", help="train with the filter over the eta grid")
    _common(p)

    p = sub.add_parser("analyze-poisonous", help="share of poisonous imputations on the test table")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="directory holding rec.npz and imp.npz")
    p.add_argument("--test", help="test triplets (default: <data.dir>/test.tsv)")

    p = sub.add_parser("verify", help="run a verification suite")
    _common(p, out_required=False)
    p.add_argument("--suite", required=True, help=f"one of {', '.join(SUITES)}")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides("train", seeds=(args.seed,))
    if args.workers < 1:
        raise ConfigError("--workers: must be at least 1")
    if args.k < 1:
        raise ConfigError("--k: must be at least 1")
    return cfg


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _manifest(command, cfg, out, artifacts, seeds=None):
    m = RunManifest(command, cfg.snapshot(), list(cfg.seeds if seeds is None else seeds),
                    [str(a) for a in artifacts])
    m.write(Path(out) / "manifest.json")
    return m


# prepare ------------------------------------------------------------------

def _coat_tables(train_path, test_path, threshold):
    train_raw = dm.load_rating_matrix(train_path)
    test_raw = dm.load_rating_matrix(test_path)
    if (train_raw.num_users, train_raw.num_items) != (test_raw.num_users, test_raw.num_items):
        raise dm.DataFormatError("train and test matrices differ in shape")
    return dm.binarize(train_raw, threshold), dm.binarize(test_raw, threshold), None


def _triplet_tables(train_path, test_path, threshold):
    train_raw, mapping = dm.load_raw_triplets(train_path)
    test_raw, mapping = dm.load_raw_triplets(test_path, mapping)
    nu, ni = len(mapping.user_ids), len(mapping.item_ids)
    tables = [dm.RatingTable(nu, ni, t.users, t.items, t.values) for t in (train_raw, test_raw)]
    return dm.binarize(tables[0], threshold), dm.binarize(tables[1], threshold), mapping


def cmd_prepare(args):
    cfg = _config(args)
    d = cfg["data"]
    fmt = args.format or d["format"]
    train_path = args.train or d["train"]
    test_path = args.test or d["test"]
    seed = cfg.seeds[0]
    out = Path(args.out)
    if fmt in ("coat", "triplets"):
        for flag, p in (("--train", train_path), ("--test", test_path)):
            if not p:
                raise ConfigError(f"{flag}: required for format {fmt}")
            if not Path(p).is_file():
                raise ConfigError(f"{flag}: no such file: {p}")
    names = ["train.tsv", "validation.tsv", "test.tsv"]
    artifacts = [out / n for n in names]
    if fmt == "synthetic":
        artifacts.append(out / "propensity.tsv")
    elif fmt == "triplets":
        artifacts += [out / "ids.users.tsv", out / "ids.items.tsv"]
    out.mkdir(parents=True, exist_ok=True)
    _manifest("prepare", cfg, out, artifacts, [seed])

    mapping = None
    if fmt == "synthetic":
        world = make_world(d["num_users"], d["num_items"], seed=seed, bias_strength=d["bias_strength"],
                           mean_propensity=d["mean_propensity"])
        train_t, val_t, test_t = experiment_tables(world, seed, d["unbiased_fraction"],
                                                   d["validation_fraction"])
        save_propensities(PropensityTable(world.propensity_matrix(), world.floor), out / "propensity.tsv")
    else:
        loader = _coat_tables if fmt == "coat" else _triplet_tables
        train_t, unbiased, mapping = loader(train_path, test_path, d["threshold"])
        val_t, test_t = dm.split_unbiased(unbiased, dm.SplitSpec(d["validation_fraction"], seed))
    for table, name in zip((train_t, val_t, test_t), names):
        dm.write_triplets(table, out / name)
    if mapping is not None:
        dm.write_id_mapping(mapping, out / "ids")
    print(f"train={len(train_t)} validation={len(val_t)} test={len(test_t)} "
          f"users={train_t.num_users} items={train_t.num_items}")
    return EXIT_OK


# train --------------------------------------------------------------------

def _run_dir(out, method, cdr, seed, eta=None):
    tag = method + ("-cdr" if cdr else "")
    if eta is not None:
        tag += f"-eta{eta:g}"
    return Path(out) / tag / f"seed-{seed}"


def _train_one(cfg, seed, out):
    data = load_data(cfg)
    tcfg = cfg.train_config(seed)
    run_dir = _run_dir(out, tcfg.method.value, tcfg.cdr_enabled, seed)
    artifacts = [run_dir / "rec.npz", run_dir / "history.csv"]
    if tcfg.method.uses_imputation:
        artifacts.insert(1, run_dir / "imp.npz")
    manifest = _manifest("train", cfg, run_dir, artifacts, [seed])
    result = train(data.train, data.validation, propensities_for(cfg, data), tcfg)
    save_model(result.recommendation_model, run_dir / "rec.npz")
    if result.imputation_model is not None:
        save_model(result.imputation_model, run_dir / "imp.npz")
    result.write_history(run_dir / "history.csv")
    manifest.wall_times = {"train": result.wall_time}
    manifest.write(run_dir / "manifest.json")
    best = result.history[result.best_epoch]
    return f"seed={seed} epochs={len(result.history)} best_epoch={result.best_epoch} val_auc={best.val_auc:.4f} -> {run_dir}"


def _map(fn, jobs, workers):
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def cmd_train(args):
    cfg = _config(args)
    load_data(cfg)  # fail on missing data before any work
    for line in _map(_train_one, [(cfg, s, args.out) for s in cfg.seeds], args.workers):
        print(line)
    return EXIT_OK


# evaluate / analyze -------------------------------------------------------

def _checkpoint(path, need_imp=False):
    path = Path(path)
    rec_path = path / "rec.npz"
    imp_path = path / "imp.npz"
    if not rec_path.is_file():
        raise ConfigError(f"--checkpoint: no rec.npz in {path}")
    if need_imp and not imp_path.is_file():
        raise ConfigError(f"--checkpoint: no imp.npz in {path}; method has no imputation model")
    rec = load_model(rec_path)
    imp = load_model(imp_path) if imp_path.is_file() else None
    return rec, imp


def _test_table(args, cfg, rec):
    path = args.test or (Path(cfg["data"]["dir"]) / "test.tsv" if cfg["data"]["dir"] else None)
    if path is None or not Path(path).is_file():
        raise ConfigError(f"--test: no test table found ({path})")
    return dm.load_table(path, rec.num_users, rec.num_items)


def _loss_kind(cfg):
    return cfg.train_config(cfg.seeds[0]).loss_kind


def cmd_evaluate(args):
    cfg = _config(args)
    rec, imp = _checkpoint(args.checkpoint)
    test = _test_table(args, cfg, rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest("evaluate", cfg, out, [out / "metrics.json"])
    report = evaluate(rec, test, args.k, imp, _loss_kind(cfg))
    body = {"manifest": "manifest.json", "checkpoint": str(args.checkpoint), **json.loads(report.to_json())}
    _write_json(out / "metrics.json", body)
    print(report.to_json())
    return EXIT_OK


def cmd_analyze_poisonous(args):
    cfg = _config(args)
    rec, imp = _checkpoint(args.checkpoint, need_imp=True)
    test = _test_table(args, cfg, rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest("analyze-poisonous", cfg, out, [out / "poisonous.json"])
    ratio = analyze_poisonous(rec, imp, test, _loss_kind(cfg))
    _write_json(out / "poisonous.json", {"manifest": "manifest.json", "checkpoint": str(args.checkpoint),
                                         "pairs": len(test), "poisonous_ratio": ratio})
    print(f"poisonous_ratio={ratio:.6f} pairs={len(test)}")
    return EXIT_OK


# sweep --------------------------------------------------------------------

def _sweep_cell(cfg, method, seed, eta, k):
    cell = run_cell(cfg, load_data(cfg), seed, eta=eta, method=method, cdr=True, k=k)
    return cell.metrics, cell.result.wall_time


def cmd_sweep_eta(args):
    cfg = _config(args)
    load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _manifest("sweep-eta", cfg, out, [out / "sweep.csv"])
    cells = [(m, s, e) for m in cfg["sweep"]["methods"] for s in cfg.seeds for e in cfg["sweep"]["etas"]]
    t0 = time.perf_counter()
    results = _map(_sweep_cell, [(cfg, m, s, e, args.k) for m, s, e in cells], args.workers)
    dataset = Path(cfg["data"]["dir"]).name
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MetricsReport.CSV_HEADER)
        for (m, s, e), (report, _) in zip(cells, results):
            fh.write(report.csv_row(f"{m}+cdr", dataset, s, e))
    manifest = RunManifest.read(out / "manifest.json")
    manifest.wall_times = {"total": time.perf_counter() - t0,
                           **{f"{m}/seed={s}/eta={e:g}": w for (m, s, e), (_, w) in zip(cells, results)}}
    manifest.write(out / "manifest.json")
    print(f"{len(cells)} rows -> {out / 'sweep.csv'}")
    return EXIT_OK


# verify -------------------------------------------------------------------

def cmd_verify(args):
    if args.suite not in SUITES:
        raise ConfigError(f"--suite: unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    cfg = _config(args)
    seed = cfg.seeds[0]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _manifest("verify", cfg, out, [out / f"verify-{args.suite}.json"], [seed])
    result = run_suite(args.suite, seed=seed)
    for c in result.checks:
        print(c.line())
    print(result.summary())
    if args.out:
        (Path(args.out) / f"verify-{args.suite}.json").write_text(result.to_json() + "\n", encoding="utf-8")
    return EXIT_OK if result.passed else EXIT_VERIFY


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-eta": cmd_sweep_eta,
    "analyze-poisonous": cmd_analyze_poisonous,
    "verify": cmd_verify,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, dm.DataFormatError) as exc:
        print(f"cdr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure, reported with its type
        print(f"cdr {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
