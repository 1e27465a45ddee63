"""alias-forge command line: gen, obfuscate, trace, attack, eval, report."""
from __future__ import annotations

import argparse
import dataclasses
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .attack import (
    PREDICTOR_KINDS, AttackError, AttackPredictor, DefenseReport, build_dataset, evaluate_defense,
    format_table, predict_sequence, split_by_graph, train,
)
from .config import ConfigError, RunConfig, load_config, thread_count
from .ga import LOG_HEADER, Candidate, evolve
from .graph import GraphError, ModelGraph, dumps, infer_shapes, load, to_sequence, validate
from .metrics import FITNESS_MODES, ler
from .netgen import corpus
from .trace import TraceMatrix, export_csv, import_csv, trace
from .transforms import apply_genome

log = logging.getLogger("alias_forge")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_INFEASIBLE = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _load_model(path: str) -> ModelGraph:
    try:
        graph = load(path, init_weights=False)
    except OSError as exc:
        raise GraphError(f"cannot read model {path}: {exc.strerror}") from None
    report = validate(graph)
    if report:
        raise GraphError(f"{path}: invalid model\n{report}")
    return infer_shapes(graph)


def _corpus_files(directory: str) -> list[Path]:
    root = Path(directory)
    manifest = root / MANIFEST
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        return [root / m["file"] for m in doc.get("models", [])]
    if not root.is_dir():
        raise GraphError(f"corpus directory {directory} does not exist")
    return sorted(p for p in root.glob("*.json") if p.name != MANIFEST)


def _config(args) -> RunConfig:
    overrides = {
        "run.seed": getattr(args, "seed", None),
        "ga.budget": getattr(args, "budget", None),
        "fitness.mode": getattr(args, "fitness_mode", None),
        "trace.noise_sigma": getattr(args, "noise_sigma", None),
    }
    cfg = load_config(getattr(args, "config", None), overrides)
    if cfg.attack.predictor not in PREDICTOR_KINDS:
        raise ConfigError(f"attack.predictor must be one of {PREDICTOR_KINDS}")
    return cfg


def _noise_rng(cfg: RunConfig, *salt: int) -> np.random.Generator | None:
    if cfg.trace.noise_sigma <= 0:
        return None
    return np.random.default_rng([cfg.trace.seed, *salt])


# ------------------------------------------------------------------ gen

def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    graphs = corpus(cfg.netgen, args.count, seed=cfg.netgen.seed, with_weights=args.weights)
    entries = []
    for g in graphs:
        name = f"{g.name}.json"
        _write(out / name, dumps(g, include_weights=args.weights))
        entries.append({"file": name, "name": g.name, "nodes": len(g.nodes),
                        "kernels": len(g.kernel_ids()), "hash": g.structure_hash()})
    manifest = {"tool": "alias-forge", "version": __version__, "seed": cfg.seed,
                "netgen_seed": cfg.netgen.seed, "config_hash": cfg.digest(),
                "netgen_digest": cfg.netgen.digest(), "count": args.count, "models": entries}
    _write(out / MANIFEST, _dump_json(manifest))
    print(f"wrote {args.count} models to {out} (config {cfg.digest()})")
    return EXIT_OK


# ------------------------------------------------------------------ obfuscate

def _progress(total: int):
    def report(gen: int, best: Candidate) -> None:
        r = best.fitness_report
        print(f"gen {gen + 1}/{total} fitness={r.fitness:.6g} stdev_sum={r.stdev_sum:.6g} "
              f"T/T*={r.latency / r.baseline_latency:.4f} feasible={best.feasible}",
              file=sys.stderr)
    return report


def _summary(model: ModelGraph, best: Candidate, run, cfg: RunConfig) -> dict[str, Any]:
    r = best.fitness_report
    return {
        "model": model.name,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "budget": cfg.ga.budget,
        "fitness_mode": cfg.ga.fitness_mode,
        "feasible": best.feasible,
        "ops": best.genome.op_count(),
        "baseline_stdev_sum": run.baseline_stdev_sum,
        "fitness": r.as_dict(),
        "latency_ratio": r.latency / r.baseline_latency,
        "stdev_ratio": r.stdev_sum / run.baseline_stdev_sum if run.baseline_stdev_sum else None,
    }


def cmd_obfuscate(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    quiet = args.quiet
    best, run = evolve(model, cfg.ga, cfg.trace, None if quiet else _progress(cfg.ga.generations))
    obf = apply_genome(model, best.genome)
    out = Path(args.out)
    summary = _summary(model, best, run, cfg)
    _write(out / "genome.json", _dump_json(best.genome.to_doc()))
    _write(out / "obfuscated.json", dumps(obf, include_weights=True))
    _write(out / "run_log.csv", run.to_csv())
    _write(out / "summary.json", _dump_json(summary))
    r = best.fitness_report
    print(f"stdev_sum {run.baseline_stdev_sum:.6g} -> {r.stdev_sum:.6g} "
          f"({summary['stdev_ratio']:.3f}x), latency ratio {summary['latency_ratio']:.4f}, "
          f"feasible {best.feasible}, config {cfg.digest()}")
    return EXIT_OK if best.feasible else EXIT_INFEASIBLE


# ------------------------------------------------------------------ trace

def cmd_trace(args, cfg: RunConfig) -> int:
    model = _load_model(args.model)
    tm = trace(model, cfg.trace, _noise_rng(cfg))
    text = export_csv(tm, attack_facing=args.attack_facing)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ attack

def _load_corpus(directory: str) -> list[ModelGraph]:
    return [_load_model(str(p)) for p in _corpus_files(directory)]


def fit_predictor(graphs: Sequence[ModelGraph], cfg: RunConfig) -> tuple[AttackPredictor, dict[str, Any]]:
    """Train on the training share of ``graphs``; score the held-out share."""
    if not graphs:
        raise AttackError("cannot train on an empty corpus")
    tr, te = split_by_graph(len(graphs), cfg.substream("attack-split"), cfg.attack.train_fraction)
    if not tr:
        tr, te = list(range(len(graphs))), []
    ds = build_dataset([graphs[i] for i in tr], cfg.trace, rng=_noise_rng(cfg, 0xA7))
    predictor = train(ds, cfg.attack.predictor, cfg.attack.knn_k)
    stats: dict[str, Any] = {"train_graphs": len(tr), "held_out_graphs": len(te), "samples": len(ds)}
    if te:
        held = [graphs[i] for i in te]
        rng = _noise_rng(cfg, 0xA8)
        lers = [ler(predict_sequence(predictor, trace(g, cfg.trace, rng).without_labels()), to_sequence(g))
                for g in held]
        stats["held_out_median_ler"] = float(np.median(lers))
    return predictor, stats


def _victim_trace(path: str, cfg: RunConfig) -> tuple[TraceMatrix, ModelGraph | None]:
    if path == "-":
        return import_csv(sys.stdin.read()), None
    if path.endswith(".csv"):
        return import_csv(Path(path).read_text()), None
    model = _load_model(path)
    return trace(model, cfg.trace, _noise_rng(cfg)), model


def cmd_attack(args, cfg: RunConfig) -> int:
    if args.train:
        if not args.corpus:
            raise UsageError("attack --train needs --corpus")
        if not args.predictor:
            raise UsageError("attack --train needs --predictor (output path)")
        graphs = _load_corpus(args.corpus)
        predictor, stats = fit_predictor(graphs, cfg)
        _write(Path(args.predictor), predictor.dumps())
        print(_dump_json({"predictor": predictor.kind, "config_hash": cfg.digest(), **stats}), end="")
        return EXIT_OK
    if not args.predict:
        raise UsageError("attack needs either --train or --predict VICTIM")
    if not args.predictor:
        raise UsageError("attack --predict needs --predictor")
    try:
        predictor = AttackPredictor.loads(Path(args.predictor).read_text())
    except OSError as exc:
        raise AttackError(f"no trained predictor at {args.predictor}: {exc.strerror}") from None
    except json.JSONDecodeError:
        raise AttackError(f"{args.predictor} is not a predictor document") from None
    tm, victim = _victim_trace(args.predict, cfg)
    seq = predict_sequence(predictor, tm.without_labels())
    result: dict[str, Any] = {"predicted": [k.value for k in seq]}
    if args.truth:
        truth_graph = _load_model(args.truth)
        truth = to_sequence(truth_graph)
        extracted_org = predict_sequence(predictor, trace(truth_graph, cfg.trace, _noise_rng(cfg, 1)).without_labels())
        result["ler_extracted_original"] = ler(extracted_org, truth)
        result["ler_extracted_obfuscated"] = ler(seq, truth)
        if victim is not None:
            result["ler_obfuscated_structure"] = ler(to_sequence(victim), truth)
    print(_dump_json(result), end="")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _eval_one(model: ModelGraph, index: int, predictor: AttackPredictor, cfg: RunConfig) -> dict[str, Any]:
    # each model of a batch gets its own GA stream
    seed = int(np.random.SeedSequence([cfg.ga.seed, index]).generate_state(1)[0])
    ga = dataclasses.replace(cfg.ga, seed=seed)
    best, run = evolve(model, ga, cfg.trace)
    rep = evaluate_defense(model, best.genome, predictor, cfg.trace, _noise_rng(cfg, 0xE0, index))
    return {
        "report": rep.as_dict(sequences=True),
        "feasible": best.feasible,
        "stdev_sum": best.fitness_report.stdev_sum,
        "baseline_stdev_sum": run.baseline_stdev_sum,
        "ops": best.genome.op_count(),
        "genome": best.genome.to_doc(),
    }


def _eval_job(job):
    return _eval_one(*job)


def _medians(rows: list[dict[str, Any]]) -> dict[str, float]:
    keys = ("ler_extracted_original", "ler_extracted_obfuscated", "ler_obfuscated_structure", "latency_ratio")
    out = {k: float(np.median([r["report"][k] for r in rows])) for k in keys}
    out["stdev_sum"] = float(np.median([r["stdev_sum"] for r in rows]))
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    if bool(args.model) == bool(args.corpus):
        raise UsageError("eval needs exactly one of MODEL or --corpus DIR")
    models = [_load_model(args.model)] if args.model else _load_corpus(args.corpus)
    if not models:
        raise GraphError("no models to evaluate")
    if args.predictor:
        predictor = AttackPredictor.loads(Path(args.predictor).read_text())
        train_stats: dict[str, Any] = {"predictor_file": os.path.basename(args.predictor)}
    else:
        print(f"training {cfg.attack.predictor} on {cfg.attack.train_count} generated networks",
              file=sys.stderr)
        predictor, train_stats = fit_predictor(corpus(cfg.netgen, cfg.attack.train_count, cfg.netgen.seed), cfg)
    jobs = [(m, i, predictor, cfg) for i, m in enumerate(models)]
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_eval_job, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_eval_job(job))
            print(f"evaluated {job[0].name} ({len(rows)}/{len(jobs)})", file=sys.stderr)
    doc = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "budget": cfg.ga.budget,
        "fitness_mode": cfg.ga.fitness_mode,
        "predictor": predictor.kind,
        "attack": train_stats,
        "models": rows,
        "medians": _medians(rows),
    }
    reports = [DefenseReport(**{k: v for k, v in r["report"].items()
                                if k not in ("extracted_original", "extracted_obfuscated")}) for r in rows]
    table = format_table(reports)
    if args.out:
        out = Path(args.out)
        _write(out / "report.json", _dump_json(doc))
        _write(out / "report.txt", table)
    sys.stdout.write(table)
    print(f"config {cfg.digest()} seed {cfg.seed}")
    if not all(r["feasible"] for r in rows):
        print("warning: at least one model has no candidate within budget", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ------------------------------------------------------------------ report

def _report_rows_from_eval(doc: dict[str, Any]) -> list[dict[str, Any]]:
    rows = []
    for r in doc["models"]:
        rep = r["report"]
        rows.append({
            "model": rep["model"], "feasible": r["feasible"], "ops": r["ops"],
            "stdev_ratio": r["stdev_sum"] / r["baseline_stdev_sum"] if r["baseline_stdev_sum"] else float("nan"),
            **{k: rep[k] for k in ("ler_extracted_original", "ler_extracted_obfuscated",
                                   "ler_obfuscated_structure", "latency_ratio")},
        })
    return rows


def _report_rows_from_log(text: str) -> list[dict[str, Any]]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != LOG_HEADER:
        raise GraphError(f"run log must have header {','.join(LOG_HEADER)}")
    by_gen: dict[int, list[dict[str, str]]] = {}
    for rec in reader:
        by_gen.setdefault(int(rec["generation"]), []).append(rec)
    rows = []
    for gen in sorted(by_gen):
        recs = by_gen[gen]
        fit = [float(r["fitness"]) for r in recs]
        i = int(np.argmin(fit))
        rows.append({"generation": gen, "candidates": len(recs), "min_fitness": fit[i],
                     "stdev_sum": float(recs[i]["stdev_sum"]), "latency": float(recs[i]["latency"]),
                     "median_fitness": float(np.median(fit))})
    return rows


def _render(rows: list[dict[str, Any]], fmt: str) -> str:
    if fmt == "json":
        return _dump_json(rows)
    if not rows:
        return ""
    cols = list(rows[0])
    cell = lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([cell(r[c]) for c in cols])
        return buf.getvalue()
    cells = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
    return "\n".join([line(cols)] + [line(r) for r in cells]) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    chunks = []
    for path in args.inputs:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise GraphError(f"cannot read {path}: {exc.strerror}") from None
        if path.endswith(".csv"):
            rows = _report_rows_from_log(text)
        else:
            doc = json.loads(text)
            if "models" not in doc:
                raise GraphError(f"{path} is not an eval report")
            rows = _report_rows_from_eval(doc)
            if len(rows) > 1:
                med = {"model": "median", "feasible": sum(r["feasible"] for r in rows), "ops": ""}
                for k in list(rows[0])[3:]:
                    med[k] = float(np.median([r[k] for r in rows]))
                rows.append(med)
        if len(args.inputs) > 1 and args.format == "table":
            chunks.append(f"# {path}\n")
        chunks.append(_render(rows, args.format))
    sys.stdout.write("".join(chunks))
    return EXIT_OK


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--budget", type=float, help="latency budget B")
    common.add_argument("--fitness-mode", choices=FITNESS_MODES)
    common.add_argument("--noise-sigma", type=float, help="log-normal trace noise")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="alias-forge", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a random model corpus")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--weights", action="store_true", help="store weights in the model documents")

    o = sub.add_parser("obfuscate", parents=[common], help="evolve an obfuscation genome")
    o.add_argument("model")
    o.add_argument("--out", required=True)
    o.add_argument("-q", "--quiet", action="store_true", help="no per-generation progress")

    t = sub.add_parser("trace", parents=[common], help="print the kernel trace as CSV")
    t.add_argument("model")
    t.add_argument("--out")
    t.add_argument("--attack-facing", action="store_true", help="omit ground-truth labels")

    a = sub.add_parser("attack", parents=[common], help="train or run the trace attacker")
    mode = a.add_mutually_exclusive_group()
    mode.add_argument("--train", action="store_true")
    mode.add_argument("--predict", metavar="VICTIM", help="model document, trace CSV, or - for stdin")
    a.add_argument("--corpus")
    a.add_argument("--predictor")
    a.add_argument("--truth", help="original model, enables LER output")

    e = sub.add_parser("eval", parents=[common], help="obfuscate, attack and report")
    e.add_argument("model", nargs="?")
    e.add_argument("--corpus")
    e.add_argument("--predictor")
    e.add_argument("--out")

    r = sub.add_parser("report", parents=[common], help="tabulate eval reports or run logs")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return p


COMMANDS = {"gen": cmd_gen, "obfuscate": cmd_obfuscate, "trace": cmd_trace,
            "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help/--version exit 0, argument errors exit with EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "count", 0) is not None and getattr(args, "count", 0) < 0:
            raise UsageError("--count must be >= 0")
        cfg = _config(args).resolved()
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"alias-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, ConfigError, AttackError, ValueError) as exc:
        print(f"alias-forge: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"alias-forge: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
