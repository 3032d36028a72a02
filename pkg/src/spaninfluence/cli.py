"""Command-line entry point: ``spaninfluence <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data/method
incompatibility, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

log = logging.getLogger("spaninfluence")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_OUT = "spaninfluence-out"
CHUNK = 16  # tests per job; fixed so results do not depend on the worker count
RANKING_COLUMNS = ("test_id", "rank", "train_id", "span_start", "span_end", "score", "method")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    from .data import GeneratorSpec
    from .influence import InfluenceConfig
    from .training import TrainConfig

    def strip(d, *keys):
        return {k: v for k, v in d.items() if k not in keys}

    return {
        "seed": 0,
        "model": {"embed_dim": 32, "hidden_dim": 64},
        "train": strip(dataclasses.asdict(TrainConfig()), "seed"),
        "influence": strip(dataclasses.asdict(InfluenceConfig()), "seed", "method"),
        "generator": strip(GeneratorSpec().to_dict(), "seed"),
    }


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        name = f"{where}{k}"
        if k not in out:
            raise UsageError(f"unknown config field {name!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config field {name!r} must be an object")
            out[k] = merge_config(out[k], v, name + ".")
        else:
            _check_type(name, out[k], v)
            out[k] = v
    return out


def _check_type(name: str, default, value) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(default, bool) and isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config field {name!r} must be {type(default).__name__}, got {value!r}")


def load_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = merge_config(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    flags = {
        "seed": ("seed",),
        "embed_dim": ("model", "embed_dim"),
        "hidden_dim": ("model", "hidden_dim"),
        "lr": ("train", "learning_rate"),
        "epochs": ("train", "max_epochs"),
        "batch_size": ("train", "batch_size"),
        "weight_decay": ("train", "weight_decay"),
        "optimizer": ("train", "optimizer"),
        "ihvp": ("influence", "ihvp"),
        "lissa_depth": ("influence", "lissa_depth"),
        "damping": ("influence", "exact_damping"),
        "loss": ("influence", "loss"),
        "variant_count": ("influence", "variant_count"),
        "variant_lr": ("influence", "variant_lr"),
        "checkpoint_weights": ("influence", "checkpoint_weights"),
        "n_train": ("generator", "n_train"),
        "n_dev": ("generator", "n_dev"),
        "n_test": ("generator", "n_test"),
    }
    for flag, path in flags.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        node = cfg
        for p in path[:-1]:
            node = node[p]
        node[path[-1]] = v
    if getattr(args, "head_only", False):
        cfg["influence"]["include_embeddings"] = False
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise UsageError(f"config field 'seed' must be an integer, got {cfg['seed']!r}")
    return cfg


def cfg_hash(cfg: dict, *sections: str) -> str:
    from .training import config_hash

    return config_hash({"seed": cfg["seed"], **{s: cfg[s] for s in sections}})


def header_line(chash: str, seed: int, **extra) -> str:
    parts = [f"config_hash={chash}", f"seed={seed}"] + [f"{k}={v}" for k, v in extra.items()]
    return "# " + " ".join(parts) + "\n"


def out_dir(args) -> Path:
    return Path(getattr(args, "out_dir", None) or os.environ.get("SPANINF_OUT_DIR") or DEFAULT_OUT)


def influence_config(cfg: dict, method: str):
    from .influence import InfluenceConfig

    inf = dict(cfg["influence"])
    if inf.get("checkpoint_weights") is not None:
        inf["checkpoint_weights"] = tuple(inf["checkpoint_weights"])
    try:
        return InfluenceConfig(method=method, seed=cfg["seed"], **inf)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid influence configuration: {exc}") from None


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .data import GeneratorSpec, generate_synthetic, save_dataset

    cfg = load_config(args)
    if args.spec:
        try:
            spec_dict = json.loads(Path(args.spec).read_text())
        except FileNotFoundError:
            raise UsageError(f"spec file not found: {args.spec}") from None
        cfg = merge_config(cfg, {"generator": {k: v for k, v in spec_dict.items() if k != "seed"}})
        if "seed" in spec_dict:
            cfg["seed"] = spec_dict["seed"]
    try:
        spec = GeneratorSpec.from_dict({**cfg["generator"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator spec: {exc}") from None
    ds, meta = generate_synthetic(spec)
    dest = Path(args.out) if args.out else out_dir(args) / "data"
    meta = {**meta, "config_hash": cfg_hash(cfg, "generator")}
    save_dataset(ds, dest, meta)
    print(f"wrote {len(ds.train)}/{len(ds.dev)}/{len(ds.test)} instances to {dest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .runs import resolve_dataset, save_run
    from .training import TrainConfig, build_model, train

    cfg = load_config(args)
    ds = resolve_dataset(args.data, annotate=args.annotate)
    try:
        tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None
    model = build_model(ds, cfg["model"]["embed_dim"], cfg["model"]["hidden_dim"], seed=cfg["seed"])
    t0 = time.perf_counter()
    result = train(tcfg, ds, model)
    dest = Path(args.out) if args.out else out_dir(args) / "run"
    chash = cfg_hash(cfg, "model", "train")
    save_run(dest, model, result, {**cfg, "config_hash": chash, "data": args.data})
    test_acc = model.accuracy(result.final.params, ds.test) if ds.test else float("nan")
    log.info("training took %.2fs", time.perf_counter() - t0)
    print(f"config_hash={chash} seed={cfg['seed']} final_epoch={result.final.epoch} "
          f"dev_acc={result.dev_accuracy:.4f} test_acc={test_acc:.4f} params_sha256={result.final.params_hash[:16]}")
    return EXIT_OK


def _load_for_influence(args):
    from .data import DataError
    from .runs import load_run, resolve_dataset

    run = load_run(args.run)
    ds = resolve_dataset(args.data, annotate=args.annotate)
    if run.model.vocab is not None and run.model.vocab != ds.vocab:
        raise DataError("dataset vocabulary differs from the trained model's vocabulary; use the training data")
    return run, ds


def _select_tests(ds, ids: Sequence[str] | None, limit: int | None = None):
    if ids:
        tests = [ds.get(i) for i in ids]
    else:
        tests = list(ds.test)
    if limit is not None:
        tests = tests[:limit]
    if not tests:
        raise UsageError("no test instances selected")
    return tests


def _explainer(run, ds, icfg, cache_dir=None):
    from .influence import Explainer, IHVPCache

    return Explainer(run.model, run.final, ds.train, icfg, epoch_checkpoints=run.epochs,
                     cache=IHVPCache(cache_dir), extra_instances=ds.all())


def _explain_parallel(ex, tests, method: str, workers: int):
    chunks = [tests[i:i + CHUNK] for i in range(0, len(tests), CHUNK)]
    if workers <= 1 or len(chunks) == 1:
        return [r for c in chunks for r in ex.explain_many(c, method=method)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: ex.explain_many(c, method=method), chunks))
    return [r for p in parts for r in p]


def ranking_csv(ranking, chash: str, seed: int) -> str:
    buf = io.StringIO()
    span = "" if ranking.test_span is None else f"{ranking.test_span.start}:{ranking.test_span.end}"
    buf.write(header_line(chash, seed, test_span=span or "none"))
    w = csv.DictWriter(buf, fieldnames=RANKING_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(ranking.to_rows())
    return buf.getvalue()


def ranking_json(ranking, chash: str, seed: int) -> str:
    d = ranking.to_dict()
    d["meta"] = {k: v for k, v in d["meta"].items() if k != "runtime_s"}
    return json.dumps({"config_hash": chash, "seed": seed, **d}, indent=1, sort_keys=True) + "\n"


def read_ranking(path: Path):
    from .influence import SUPPORT_SIGN, Ranking, ScoredExplanation
    from .model import Span

    text = path.read_text()
    if path.suffix == ".json":
        return Ranking.from_dict(json.loads(text))
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
        lines = lines[1:]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise UsageError(f"empty ranking file {path}")
    span = meta.get("test_span", "none")
    test_span = None if span in ("", "none") else Span(*map(int, span.split(":")))
    entries = [
        ScoredExplanation(r["train_id"], None if r["span_start"] == "" else Span(int(r["span_start"]), int(r["span_end"])),
                          float(r["score"]), SUPPORT_SIGN[r["method"]] * float(r["score"]), r["method"])
        for r in rows
    ]
    return Ranking(rows[0]["test_id"], test_span, rows[0]["method"], entries)


def cmd_explain(args) -> int:
    cfg = load_config(args)
    run, ds = _load_for_influence(args)
    icfg = influence_config(cfg, args.method)
    tests = _select_tests(ds, args.test_ids, args.limit)
    cache_dir = args.cache_dir or (out_dir(args) / "cache")
    ex = _explainer(run, ds, icfg, cache_dir)
    chash = cfg_hash(cfg, "influence")
    t0 = time.perf_counter()
    rankings = _explain_parallel(ex, tests, args.method, args.workers)
    elapsed = time.perf_counter() - t0
    dest = Path(args.out) if args.out else out_dir(args) / "rankings" / args.method
    ext = "json" if args.format == "json" else "csv"
    for r in rankings:
        body = ranking_json(r, chash, cfg["seed"]) if ext == "json" else ranking_csv(r, chash, cfg["seed"])
        _write(dest / f"{r.test_id}.{ext}", body)
    log.info("explain runtime_s=%.4f cache_hits=%d cache_misses=%d", elapsed, ex.cache.hits, ex.cache.misses)
    if args.record_runtime:
        _write(dest / "runtime.json", json.dumps({"runtime_s": elapsed, "tests": len(tests)}) + "\n")
    print(f"wrote {len(rankings)} ranking(s) to {dest} runtime_s={elapsed:.4f}")
    return EXIT_OK


def _check_ks(Ks: Sequence[int], n_train: int) -> list[int]:
    if not Ks:
        raise UsageError("at least one K value is required")
    bad = [k for k in Ks if not 1 <= k <= n_train]
    if bad:
        raise UsageError(f"K values {bad} outside 1..{n_train} (training set size)")
    return sorted(set(Ks))


def _emit_reports(reports, path: Path | None, fmt: str, chash: str, seed: int, record_runtime: bool) -> None:
    from .metrics import reports_to_csv

    if fmt == "json":
        rows = [r.to_row(with_runtime=record_runtime) for r in reports]
        body = json.dumps({"config_hash": chash, "seed": seed, "rows": rows}, indent=1, sort_keys=True) + "\n"
    else:
        body = reports_to_csv(reports, {"config_hash": chash, "seed": seed}, with_runtime=record_runtime)
    _write(path, body)


def cmd_evaluate(args) -> int:
    from .metrics import MetricReport, evaluate_rankings, ral
    from .training import TrainConfig

    cfg = load_config(args)
    run, ds = _load_for_influence(args)
    Ks = _check_ks(args.K, len(ds.train))
    chash = cfg_hash(cfg, "influence")
    rankings, runtimes = {}, {}
    if args.rankings:
        root = Path(args.rankings)
        files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".json") and p.name != "runtime.json")
        if not files:
            raise UsageError(f"no ranking files under {root}")
        for p in files:
            r = read_ranking(p)
            rankings.setdefault(r.method, []).append(r)
        by_id = {z.id: z for z in ds.test}
        tests_by_method = {m: [by_id[r.test_id] for r in rs] for m, rs in rankings.items()}
    else:
        tests = _select_tests(ds, args.test_ids, args.limit)
        for m in args.methods:
            icfg = influence_config(cfg, m)
            ex = _explainer(run, ds, icfg, args.cache_dir)
            t0 = time.perf_counter()
            rankings[m] = _explain_parallel(ex, tests, m, args.workers)
            runtimes[m] = time.perf_counter() - t0
        tests_by_method = {m: tests for m in rankings}
    reports = []
    dataset = args.dataset_name or Path(args.data).name
    for m, rs in rankings.items():
        reports += evaluate_rankings(run.model, run.final.params, ds.train, tests_by_method[m], {m: rs}, Ks,
                                     dataset=dataset, seed=cfg["seed"], runtimes=runtimes)
    if args.ral:
        tcfg = TrainConfig(seed=cfg["seed"], **run.config.get("train", cfg["train"]))
        for m, rs in rankings.items():
            for frac in args.ral:
                res = ral(run.model, run.final, rs, frac, tcfg, ds)
                reports.append(MetricReport("ral", frac, res.value, m, dataset, cfg["seed"], valid=res.valid))
                reports.append(MetricReport("ral_control", frac, res.control_value if res.control_value is not None else float("nan"),
                                            m, dataset, cfg["seed"], valid=res.control_valid))
    dest = None if args.out == "-" else (Path(args.out) if args.out else out_dir(args) / "reports" / f"metrics.{args.format}")
    _emit_reports(reports, dest, args.format, chash, cfg["seed"], args.record_runtime)
    if dest is not None:
        print(f"wrote {len(reports)} metric rows to {dest}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    from .metrics import evaluate_rankings
    from .plotting import plot_k_sweep

    cfg = load_config(args)
    run, ds = _load_for_influence(args)
    Ks = _check_ks(args.K, len(ds.train))
    tests = _select_tests(ds, args.test_ids, args.limit)
    chash = cfg_hash(cfg, "influence")
    reports = []
    dataset = args.dataset_name or Path(args.data).name
    for m in args.methods:
        ex = _explainer(run, ds, influence_config(cfg, m), args.cache_dir)
        t0 = time.perf_counter()
        rs = _explain_parallel(ex, tests, m, args.workers)
        reports += evaluate_rankings(run.model, run.final.params, ds.train, tests, {m: rs}, Ks, dataset=dataset,
                                     seed=cfg["seed"], runtimes={m: time.perf_counter() - t0})
    dest = Path(args.out) if args.out else out_dir(args) / "reports" / f"k_sweep.{args.format}"
    _emit_reports(reports, dest, args.format, chash, cfg["seed"], args.record_runtime)
    png = plot_k_sweep(reports, dest.with_suffix(".png"), title=f"{dataset} (config {chash})")
    print(f"wrote {dest} and {png}")
    return EXIT_OK


def cmd_faithfulness(args) -> int:
    from .metrics import faithfulness_experiment
    from .plotting import plot_faithfulness

    cfg = load_config(args)
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    run, ds = _load_for_influence(args)
    tests = _select_tests(ds, args.test_ids, args.limit)
    icfg = influence_config(cfg, "tracin_plus_plus")
    table = faithfulness_experiment(run.model, run.as_train_result(), ds, icfg, runs=args.runs, seed=cfg["seed"],
                                    tests=tests, ground_truth=args.ground_truth)
    chash = cfg_hash(cfg, "influence")
    dest = Path(args.out) if args.out else out_dir(args) / "reports" / f"faithfulness.{args.format}"
    if args.format == "json":
        body = json.dumps({"config_hash": chash, "seed": cfg["seed"], "runs": args.runs,
                           "rows": {m: dataclasses.asdict(r) for m, r in table.rows.items()}}, indent=1, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        buf.write(header_line(chash, cfg["seed"], runs=args.runs))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "mean", "variance", "per_run"])
        for m, r in table.rows.items():
            w.writerow([m, f"{r.mean:.10g}", f"{r.variance:.6g}", " ".join(f"{v:.10g}" for v in r.per_run)])
        body = buf.getvalue()
    _write(dest, body)
    png = plot_faithfulness(table, dest.with_suffix(".png"), title=f"config {chash}")
    print(f"wrote {dest} and {png}")
    return EXIT_OK


# ---------------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override file values)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out-dir", help="output root (env SPANINF_OUT_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_influence(p: argparse.ArgumentParser, *, method: bool = False) -> None:
    from .influence import METHODS

    p.add_argument("--data", required=True, help="dataset directory, JSONL file or bundled:<name>")
    p.add_argument("--run", required=True, help="directory written by 'train'")
    p.add_argument("--annotate", action="store_true", help="fill missing spans with the boundary heuristic")
    if method:
        p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--test-ids", nargs="+", help="test instance ids (default: whole test split)")
    p.add_argument("--limit", type=int, help="use only the first N selected test instances")
    p.add_argument("--ihvp", choices=("lissa", "exact"))
    p.add_argument("--lissa-depth", type=int)
    p.add_argument("--damping", type=float, help="Tikhonov damping for the exact solver")
    p.add_argument("--loss", choices=("ce", "neglogit"))
    p.add_argument("--head-only", action="store_true", help="exclude embeddings from the influence parameters")
    p.add_argument("--variant-count", type=int)
    p.add_argument("--variant-lr", type=float)
    p.add_argument("--checkpoint-weights", type=float, nargs="+")
    p.add_argument("--workers", type=int, default=int(os.environ.get("SPANINF_THREADS") or os.cpu_count() or 1),
                   help="worker threads (env SPANINF_THREADS; default: cores)")
    p.add_argument("--cache-dir", help="inverse-HVP cache directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--record-runtime", action="store_true", help="fill runtime columns (breaks byte-identical output)")
    p.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    from .influence import SIX_METHODS

    parser = argparse.ArgumentParser(prog="spaninfluence", description="Span-level influence explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic planted-pattern dataset")
    _add_common(p)
    p.add_argument("--spec", help="JSON generator spec")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-dev", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier and save checkpoints")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--annotate", action="store_true")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="rank training instances for test instances")
    _add_common(p)
    _add_influence(p, method=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="Sag/Lag (and optionally Ral) for one or more methods")
    _add_common(p)
    _add_influence(p)
    p.add_argument("--methods", nargs="+", default=list(SIX_METHODS))
    p.add_argument("--rankings", help="directory of ranking files written by 'explain' (skips recomputation)")
    p.add_argument("--K", type=int, nargs="+", default=[10, 100])
    p.add_argument("--ral", type=float, nargs="*", help="retraining fractions, e.g. 0.2 0.5")
    p.add_argument("--dataset-name")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="Sag/Lag against K, CSV plus PNG")
    _add_common(p)
    _add_influence(p)
    p.add_argument("--methods", nargs="+", default=list(SIX_METHODS))
    p.add_argument("--K", type=int, nargs="*", default=[1, 2, 5, 10, 20, 50, 100])
    p.add_argument("--dataset-name")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("faithfulness", help="agreement with the single-model ground truth over runs")
    _add_common(p)
    _add_influence(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--ground-truth", action="store_true", help="add the ground truth's own row")
    p.set_defaults(func=cmd_faithfulness)
    return parser


def _exit_code(exc: BaseException) -> int:
    from .autodiff import HessianTooLarge, NonFiniteError
    from .data import DataError
    from .influence import InfluenceError, VHPExplosion
    from .metrics import MetricError
    from .model import SpanError
    from .training import DivergenceError

    if isinstance(exc, (VHPExplosion, NonFiniteError, DivergenceError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, SpanError, InfluenceError, MetricError, HessianTooLarge, KeyError)):
        return EXIT_DATA
    return EXIT_USAGE


HINTS = {
    "MissingSpanError": "add spans to the data file or rerun with --annotate to fill them heuristically",
    "HessianTooLarge": "use --ihvp lissa or --head-only with a smaller model",
    "VHPExplosion": "lower --lissa-depth or use --ihvp exact on a small model",
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # mapped to documented exit codes
        code = _exit_code(exc)
        if code == EXIT_USAGE and not isinstance(exc, (ValueError, TypeError)):
            raise
        hint = HINTS.get(type(exc).__name__)
        print(f"error: {exc}" + (f"\nhint: {hint}" if hint else ""), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
