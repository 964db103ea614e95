"""Command-line entry point.

Exit codes: 0 success, 1 invalid arguments or missing inputs (detected before
any work starts), 2 failure while running. Warnings go to stderr only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .assign import REGULARIZERS, SelectionConfig
from .bench import dup_robustness
from .knn import IndexParams, build_index, fnv1a64, load_index, save_index
from .oracle import check_instance, random_instance
from .pipeline import select
from .sampler import SamplePlan, sample
from .store import (DuplicationSpec, EmbeddingSet, ingest_jsonl, normalize, read_binary,
                    synth_mixture, write_binary)

log = logging.getLogger("tsds")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


def _setup_logging(level: str | None) -> None:
    name = (level or os.environ.get("TSDS_LOG") or "WARNING").upper()
    lvl = getattr(logging, name, None)
    if not isinstance(lvl, int):
        raise UsageError(f"unknown log level {name!r}")
    log.setLevel(lvl)
    for h in log.handlers:
        if getattr(h, "_tsds_cli", False):
            h.stream = sys.stderr
            return
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    h._tsds_cli = True
    log.addHandler(h)


def _need_file(path, flag):
    if path is None:
        return None
    if not Path(path).is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=True)


class _Out:
    """Text sink: the --out file or stdout."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", newline="\n") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        else:
            self.fh.flush()


# --- argument parsing ----------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    p.add_argument("--threads", type=int, default=1, help="worker cap for index queries")
    p.add_argument("--log-level", default=None, help="overrides TSDS_LOG")


def _selection_flags(p, regularizer_default="kde"):
    p.add_argument("--regularizer", choices=REGULARIZERS, default=regularizer_default)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--c", type=float, default=5.0)
    p.add_argument("--h", type=float, default=None,
                   help="kernel size; default 0.1 for normalized inputs, else 0.2")
    p.add_argument("--prefetch", type=int, default=1000, help="neighbors per query (L)")
    p.add_argument("--kde-neighbors", type=int, default=1000, help="I")
    p.add_argument("--tv-threshold", choices=("theorem", "algorithm"), default="theorem")


def _index_flags(p):
    p.add_argument("--mode", choices=("exact", "two_stage"), default="exact")
    p.add_argument("--partitions", type=int, default=None)
    p.add_argument("--coarse-fetch", type=int, default=4096)
    p.add_argument("--iterations", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tsds", description="Query-guided data selection by regularized transport")
    ap.add_argument("--version", action="version", version=f"tsds {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="JSONL embeddings to the binary format")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("synth", help="write a Gaussian-mixture embedding set")
    _common(p)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--per-component", type=int, default=1000)
    p.add_argument("--spread", type=float, default=3.0)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--queries-out", default=None, help="also write queries from one component")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--query-component", type=int, default=0)

    p = sub.add_parser("index", help="build a retrieval index")
    _common(p)
    p.add_argument("--candidates", required=True)
    _index_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select", help="compute the probability assignment")
    _common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--queries", required=True)
    _selection_flags(p)
    p.add_argument("--index", default=None, help="prebuilt index file")
    _index_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--densities-out", default=None)
    p.add_argument("--figure", default=None)

    p = sub.add_parser("sample", help="draw training ids from an assignment")
    _common(p)
    p.add_argument("--assignment", required=True)
    p.add_argument("--n", type=int, required=True, help="draws per epoch")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--fixed", action="store_true", help="reuse one draw for every epoch")
    p.add_argument("--compact", action="store_true", help="one id array per epoch")
    p.add_argument("--out", default=None)

    p = sub.add_parser("verify", help="check closed forms against the oracle")
    _common(p)
    p.add_argument("--m", type=int, default=None, help="queries per instance (random if unset)")
    p.add_argument("--n", type=int, default=None, help="candidates per instance (random if unset)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--regularizer", choices=REGULARIZERS, default="uniform")
    p.add_argument("--tv-threshold", choices=("theorem", "algorithm"), default="theorem")
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--mc-samples", type=int, default=10_000)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.add_argument("--figure", default=None)

    p = sub.add_parser("bench-dup", help="duplicate-robustness benchmark")
    _common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--queries", required=True)
    _selection_flags(p)
    p.add_argument("--regularizers", default=None,
                   help="comma list; overrides --regularizer (e.g. uniform,kde)")
    p.add_argument("--fraction", type=float, default=0.01)
    p.add_argument("--factor", type=int, default=10)
    p.add_argument("--radius", type=float, default=0.0,
                   help="scatter copies in a ball of this radius (0: exact copies)")
    _index_flags(p)
    p.add_argument("--csv", action="store_true", help="flat CSV rows instead of JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--figure", default=None)
    return ap


# --- validation -----------------------------------------------------------------

def _check_common(a):
    if not 0 <= a.seed < 2**64:
        raise UsageError(f"--seed must be in [0, 2^64), got {a.seed}")
    if a.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {a.threads}")


def _flag_ranges(a):
    checks = [("alpha", "--alpha", lambda v: 0 <= v <= 1, "[0, 1]"),
              ("c", "--c", lambda v: v > 0, "(0, inf)"),
              ("h", "--h", lambda v: v is None or v > 0, "(0, inf)"),
              ("prefetch", "--prefetch", lambda v: v >= 1, "[1, inf)"),
              ("kde_neighbors", "--kde-neighbors", lambda v: v >= 1, "[1, inf)"),
              ("partitions", "--partitions", lambda v: v is None or v >= 1, "[1, inf)"),
              ("coarse_fetch", "--coarse-fetch", lambda v: v >= 1, "[1, inf)"),
              ("iterations", "--iterations", lambda v: v >= 0, "[0, inf)"),
              ("fraction", "--fraction", lambda v: 0 <= v <= 1, "[0, 1]"),
              ("factor", "--factor", lambda v: v >= 1, "[1, inf)"),
              ("radius", "--radius", lambda v: v >= 0, "[0, inf)"),
              ("n", "--n", lambda v: v is None or v >= 1, "[1, inf)"),
              ("m", "--m", lambda v: v is None or v >= 1, "[1, inf)"),
              ("epochs", "--epochs", lambda v: v >= 1, "[1, inf)"),
              ("trials", "--trials", lambda v: v >= 1, "[1, inf)"),
              ("restarts", "--restarts", lambda v: v >= 1, "[1, inf)"),
              ("mc_samples", "--mc-samples", lambda v: v >= 0, "[0, inf)"),
              ("tolerance", "--tolerance", lambda v: v >= 0, "[0, inf)"),
              ("dim", "--dim", lambda v: v >= 1, "[1, inf)"),
              ("components", "--components", lambda v: v >= 1, "[1, inf)"),
              ("per_component", "--per-component", lambda v: v >= 1, "[1, inf)"),
              ("std", "--std", lambda v: v >= 0, "[0, inf)"),
              ("queries", "--queries", lambda v: not isinstance(v, int) or v >= 1, "[1, inf)")]
    for attr, flag, ok, rng in checks:
        if hasattr(a, attr) and not ok(getattr(a, attr)):
            raise UsageError(f"{flag} must be in {rng}, got {getattr(a, attr)}")


def _selection_config(a, regularizer, normalized: bool) -> SelectionConfig:
    h = a.h if a.h is not None else (0.1 if normalized else 0.2)
    try:
        return SelectionConfig(alpha=a.alpha, c=a.c, regularizer=regularizer, h=h,
                               kde_neighbors=a.kde_neighbors, prefetch=a.prefetch,
                               tv_threshold=a.tv_threshold, seed=a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _index_params(a) -> IndexParams:
    try:
        return IndexParams(a.mode, a.coarse_fetch, a.partitions, a.iterations, seed=a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _params_dict(p: IndexParams) -> dict:
    return asdict(p)


# --- subcommands ----------------------------------------------------------------

def cmd_ingest(a):
    _need_file(a.input, "--input")
    es = ingest_jsonl(a.input)
    if a.normalize:
        es = normalize(es)
    write_binary(es, a.out)
    log.info("config %s", _dumps({"command": "ingest", "input": a.input, "normalize": a.normalize,
                                   "count": es.count, "dim": es.dim}))


def cmd_synth(a):
    rng = np.random.default_rng(np.random.SeedSequence([a.seed, 1]))
    means = rng.normal(scale=a.spread, size=(a.components, a.dim))
    es = synth_mixture([(m, a.std, a.per_component) for m in means], a.seed)
    if a.queries_out:
        if not 0 <= a.query_component < a.components:
            raise UsageError("--query-component must index one of the components")
        qr = np.random.default_rng(np.random.SeedSequence([a.seed, 2]))
        q = means[a.query_component] + a.std * qr.standard_normal((a.queries, a.dim))
        qs = EmbeddingSet(np.arange(a.queries, dtype=np.uint64), q)
        write_binary(normalize(qs) if a.normalize else qs, a.queries_out)
    write_binary(normalize(es) if a.normalize else es, a.out)
    log.info("config %s", _dumps({k: v for k, v in vars(a).items() if k != "func"}))


def cmd_index(a):
    _need_file(a.candidates, "--candidates")
    params = _index_params(a)
    raw = Path(a.candidates).read_bytes()
    cands = read_binary(a.candidates)
    index = build_index(cands, params)
    save_index(index, a.out, fnv1a64(raw))
    log.info("config %s", _dumps({"command": "index", "candidates": a.candidates,
                                   **_params_dict(params)}))


def _write_assignment(fh, sel, config, index_params, extra):
    diag = sel.diagnostics
    asg = sel.assignment
    header = {"M": sel.neighbors.M, "N": asg.N, "regularizer": config.regularizer,
              "alpha": config.alpha, "c": config.c, "h": config.h,
              **diag.header_fields(), "config": {**config.to_dict(), **extra,
                                                  "index": _params_dict(index_params)},
              "warnings": list(diag.warnings)}
    fh.write(_dumps(header) + "\n")
    order = np.lexsort((asg.positions, -asg.probs))
    ids = asg.ids[order]
    probs = asg.probs[order]
    fh.writelines(f'{{"id":{int(i)},"p":{float(p)!r}}}\n' for i, p in zip(ids, probs))


def cmd_select(a):
    for path, flag in ((a.candidates, "--candidates"), (a.queries, "--queries"),
                       (a.index, "--index")):
        _need_file(path, flag)
    cands = read_binary(a.candidates)
    queries = read_binary(a.queries)
    config = _selection_config(a, a.regularizer, cands.normalized)
    if config.prefetch > cands.count:
        raise UsageError(f"--prefetch {config.prefetch} exceeds candidate count {cands.count}")
    if a.index:
        index = load_index(a.index, cands, fnv1a64(Path(a.candidates).read_bytes()))
    else:
        index = build_index(cands, _index_params(a))
    sel = select(cands, queries, config, index=index, threads=a.threads)
    extra = {"candidates": a.candidates, "queries": a.queries, "index_file": a.index}
    with _Out(a.out) as fh:
        _write_assignment(fh, sel, config, index.params, extra)
    if a.densities_out and sel.densities is not None:
        dt = sel.densities
        with open(a.densities_out, "w") as fh:
            fh.writelines(f'{{"id":{int(cands.ids[p])},"rho":{float(r)!r}}}\n'
                          for p, r in zip(dt.positions, dt.rho))
    if a.figure:
        from .plotting import plot_assignment
        plot_assignment(sel.assignment, a.figure, title=f"{config.regularizer}, alpha={config.alpha}")


def _read_assignment(path):
    ids, probs = [], []
    header = None
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if header is None and "regularizer" in rec:
                header = rec
                continue
            if "id" not in rec or "p" not in rec:
                raise ValueError(f"{path}: line {n} is not an assignment record")
            ids.append(int(rec["id"]))
            probs.append(float(rec["p"]))
    if not ids:
        raise ValueError(f"{path}: no assignment records")
    return header, np.array(ids, dtype=np.uint64), np.array(probs)


def cmd_sample(a):
    from .assign import ProbabilityAssignment

    _need_file(a.assignment, "--assignment")
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    header, ids, probs = _read_assignment(a.assignment)
    # restore candidate order so draws do not depend on the file's sort order
    order = np.argsort(ids, kind="stable")
    asg = ProbabilityAssignment(int(ids.size), np.arange(ids.size), probs[order], ids[order])
    plan = SamplePlan(a.n, a.epochs, a.seed)
    draws = sample(asg, plan, fixed=a.fixed)
    cfg = {"command": "sample", "assignment": a.assignment, "n": a.n, "epochs": a.epochs,
           "seed": a.seed, "fixed": a.fixed, "compact": a.compact,
           "source": {k: header.get(k) for k in ("regularizer", "alpha", "c", "h")} if header else None}
    with _Out(a.out) as fh:
        fh.write(_dumps({"config": cfg}) + "\n")
        for e, arr in enumerate(draws):
            if a.compact:
                fh.write(_dumps({"epoch": e, "ids": [int(x) for x in arr]}) + "\n")
            else:
                fh.writelines(f'{{"epoch":{e},"ordinal":{k},"id":{int(x)}}}\n'
                              for k, x in enumerate(arr))


def cmd_verify(a):
    cfg = {k: v for k, v in vars(a).items() if k not in ("func", "log_level")}
    reports = []
    failures = 0
    with _Out(a.out) as fh:
        fh.write(_dumps({"config": cfg}) + "\n")
        for t in range(a.trials):
            rng = np.random.default_rng(np.random.SeedSequence([a.seed, t]))
            inst = random_instance(a.regularizer, rng, a.m, a.n, a.tv_threshold)
            M, N = inst.distances.shape
            if M * N > 200:
                raise UsageError(f"M*N={M * N} exceeds the oracle cap of 200")
            rep = check_instance(inst, a.mc_samples, a.tolerance, a.iterations, a.restarts,
                                 seed=a.seed + t)
            rep.extra["trial"] = t
            reports.append(rep)
            if not rep.passed and rep.extra.get("assumption_violated") is False:
                failures += 1
            fh.write(_dumps(rep.to_dict()) + "\n")
            fh.flush()
        excluded = sum(1 for r in reports if r.extra.get("assumption_violated"))
        fh.write(_dumps({"summary": {"trials": a.trials, "excluded": excluded,
                                     "checked": a.trials - excluded, "failures": failures}}) + "\n")
    if a.figure:
        from .plotting import plot_oracle
        plot_oracle(reports, a.figure)
    if failures:
        log.error("%d instance(s) beat the closed form", failures)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench_dup(a):
    _need_file(a.candidates, "--candidates")
    _need_file(a.queries, "--queries")
    regs = [r.strip() for r in a.regularizers.split(",")] if a.regularizers else [a.regularizer]
    for r in regs:
        if r not in REGULARIZERS:
            raise UsageError(f"--regularizers: unknown regularizer {r!r}")
    cands = read_binary(a.candidates)
    queries = read_binary(a.queries)
    configs = [_selection_config(a, r, cands.normalized) for r in regs]
    if a.prefetch > cands.count:
        raise UsageError(f"--prefetch {a.prefetch} exceeds candidate count {cands.count}")
    try:
        spec = DuplicationSpec(a.fraction, a.factor, a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    params = _index_params(a)
    reports = [dup_robustness(cands, queries, cfg, spec, params, a.radius) for cfg in configs]
    header = {"config": {**configs[0].to_dict(), "regularizers": regs, "fraction": a.fraction,
                         "factor": a.factor, "radius": a.radius, "candidates": a.candidates,
                         "queries": a.queries, "index": _params_dict(params)}}
    with _Out(a.out) as fh:
        if a.csv:
            fh.write("# " + _dumps(header) + "\n")
            fields = list(reports[0].to_dict())
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in reports:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.to_dict().items()})
        else:
            fh.write(_dumps({**header, "reports": [r.to_dict() for r in reports]}) + "\n")
    if a.figure:
        from .plotting import plot_dup_reports
        plot_dup_reports(reports, a.figure)


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "index": cmd_index, "select": cmd_select,
            "sample": cmd_sample, "verify": cmd_verify, "bench-dup": cmd_bench_dup}


def run(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_INVALID
    try:
        _setup_logging(a.log_level)
        _check_common(a)
        _flag_ranges(a)
    except UsageError as e:
        sys.stderr.write(f"tsds {a.command}: error: {e}\n")
        return EXIT_INVALID
    try:
        code = COMMANDS[a.command](a)
    except UsageError as e:
        sys.stderr.write(f"tsds {a.command}: error: {e}\n")
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        sys.stderr.write(f"tsds {a.command}: failed: {e}\n")
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


def main() -> None:
    sys.exit(run())
