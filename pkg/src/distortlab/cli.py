"""Command-line front end.

Every flag can also come from a JSON config file (--config) or from an
environment variable named DISTORTLAB_<FLAG>; explicit flags win over the
config file, which wins over the environment.  All file outputs are
written atomically.  Exit codes: 0 success (and all verify assertions
pass), 1 verify assertions failed, 2 usage or input error, 3 cap or
budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import report
from .calibrate import generate_contexts, match_parameters
from .decoding import DecoderSpec, sample_sequence
from .distortion import quantiles_of_records, sample_pair_records
from .equilibrium import verify_variational_max, zero_temperature_scan
from .errors import (
    DistortLabError,
    EmptyCorpus,
    NonConvergence,
    NormalizationError,
    ParseError,
    RejectionBudgetExceeded,
    SupportTooLarge,
    UnknownContext,
    ZeroMass,
)
from .globalnorm import (
    DEFAULT_ENUM_CAP,
    DEFAULT_REJECTION_BUDGET,
    enumerate_global,
    rejection_sample_batch,
    transfer_pressure,
)
from .models import load_model, save_model, train_ngram
from .qd import qd_sweep
from .rng import derive_seed

DEFAULT_SEED = 20240613

_INPUT_ERRORS = (ParseError, EmptyCorpus, UnknownContext, NormalizationError,
                 ZeroMass, OSError, ValueError)
_BUDGET_ERRORS = (SupportTooLarge, RejectionBudgetExceeded, NonConvergence)


class _Opts:
    """Flag resolution: command line > config file > environment > default."""

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        self._config = {}
        config_path = self._args.get("config") or os.environ.get(
            "DISTORTLAB_CONFIG")
        if config_path:
            with open(config_path, "r", encoding="utf-8") as fh:
                self._config = json.load(fh)

    def get(self, key, default=None, cast=None):
        value = self._args.get(key)
        if value is None:
            value = self._config.get(key)
        if value is None:
            value = os.environ.get("DISTORTLAB_" + key.upper())
        if value is None:
            return default
        if cast is None or (isinstance(cast, type) and isinstance(value, cast)):
            return value
        try:
            return cast(value)
        except (TypeError, ValueError):
            raise ParseError(f"bad value {value!r} for --{key}") from None

    def require(self, key, cast=None):
        value = self.get(key, cast=cast)
        if value is None:
            raise ParseError(f"missing required option --{key}")
        return value


def _decoder_list(opts, default=None):
    raw = opts.get("decoder")
    if raw is None:
        raw = default
    if raw is None:
        raise ParseError("missing required option --decoder")
    if isinstance(raw, str):
        raw = [raw]
    specs = []
    for item in raw:
        specs.extend(_expand_decoder(item))
    return specs


def _expand_decoder(text: str) -> list[DecoderSpec]:
    """A decoder argument, possibly with a parameter list and @both.

    ``topk:2,3,5@both`` expands to local and global specs for each k.
    """
    body, _, mode = text.partition("@")
    modes = ["local", "global"] if mode == "both" else [mode or "local"]
    kind, sep, params = body.partition(":")
    param_items = params.split(",") if sep else [None]
    out = []
    for m in modes:
        for p in param_items:
            piece = f"{kind}:{p}@{m}" if p is not None else f"{kind}@{m}"
            out.append(DecoderSpec.parse(piece))
    return out


def _emit(text_or_doc, out_path, as_json=False):
    text = json.dumps(text_or_doc, indent=1) + "\n" if as_json else text_or_doc
    if out_path:
        report.write_text_atomic(out_path, text)
    else:
        sys.stdout.write(text)


def _slug(label: str) -> str:
    return label.replace(":", "-").replace("@", "-").replace(",", "_")


def cmd_train(opts: _Opts) -> int:
    corpus_path = opts.require("corpus")
    with open(corpus_path, "r", encoding="utf-8") as fh:
        corpus = fh.read()
    model = train_ngram(
        corpus,
        order=opts.get("order", 1, int),
        smoothing=opts.get("smoothing", 1.0, float),
        mode=opts.get("mode", "char"),
    )
    save_model(model, opts.require("out"))
    print(f"trained order-{model.order} {model.unit} model "
          f"(|V|={len(model.vocab)}) -> {opts.get('out')}", file=sys.stderr)
    return 0


def cmd_sample(opts: _Opts) -> int:
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    length = opts.get("length", 10, int)
    spec = _decoder_list(opts)[0]
    n = opts.get("n", 10, int)
    seed = opts.get("seed", DEFAULT_SEED, int)
    jobs = opts.get("jobs", 1, int)
    out = opts.get("out")

    if spec.mode == "global" and spec.kind in ("topk", "nucleus", "temperature"):
        budget = opts.get("max_attempts", DEFAULT_REJECTION_BUDGET, int)
        try:
            records, stats = rejection_sample_batch(
                model, prompt, length, spec, seed, n,
                max_attempts=budget, jobs=jobs)
        except RejectionBudgetExceeded as exc:
            print(f"rejection budget exceeded: attempts={exc.stats.attempts} "
                  f"accepted={exc.stats.accepted}", file=sys.stderr)
            return 3
        lines = report.records_jsonl(records, model)
        lines += json.dumps({"stats": {
            "attempts": stats.attempts, "accepted": stats.accepted,
            "acceptance_rate": stats.acceptance_rate}}) + "\n"
        _emit(lines, out)
        return 0

    local = spec.with_mode("local")

    def one(i):
        return sample_sequence(model, prompt, length, local,
                               derive_seed(seed, i))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, range(n)))
    else:
        records = [one(i) for i in range(n)]
    _emit(report.records_jsonl(records, model), out)
    return 0


def cmd_lnd(opts: _Opts) -> int:
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    specs = _decoder_list(opts)
    n_pairs = opts.get("pairs", 1000, int)
    length = opts.get("length", 100, int)
    seed = opts.get("seed", DEFAULT_SEED, int)
    levels = [float(x) for x in
              str(opts.get("levels", "10,25,50,75,90")).split(",")]
    out_dir = opts.get("out_dir", ".")
    keep = bool(opts.get("keep_records", False))

    by_label = {}
    for spec in specs:
        records = sample_pair_records(model, spec, prompt, n_pairs, length,
                                      seed)
        by_label[spec.label] = records
        table = quantiles_of_records(records, levels)
        report.write_text_atomic(
            os.path.join(out_dir, f"lnd_{_slug(spec.label)}.csv"),
            report.quantile_table_csv(table))
        if keep:
            lines = "".join(json.dumps({
                "seq_a": list(r.seq_a), "seq_b": list(r.seq_b),
                "log_ratio": r.log_ratio, "z_sums": list(r.z_sums),
                "decoder": r.decoder.label}) + "\n" for r in records)
            report.write_text_atomic(
                os.path.join(out_dir, f"lnd_records_{_slug(spec.label)}.jsonl"),
                lines)
    report.plot_lnd_cdf(by_label, os.path.join(out_dir, "lnd_cdf.svg"))
    print(f"wrote {len(specs)} quantile tables and lnd_cdf.svg to {out_dir}",
          file=sys.stderr)
    return 0


def cmd_sweep(opts: _Opts) -> int:
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    specs = _decoder_list(opts)
    points, errors = qd_sweep(
        model, prompt, opts.get("length", 10, int), specs,
        n_samples=opts.get("n", 1000, int),
        seed=opts.get("seed", DEFAULT_SEED, int),
        mode=opts.get("mode", "exact"),
        cap=opts.get("cap", DEFAULT_ENUM_CAP, int),
        budget=opts.get("max_attempts", DEFAULT_REJECTION_BUDGET, int),
        jobs=opts.get("jobs", 1, int),
    )
    out_dir = opts.get("out_dir", ".")
    per_token = opts.get("length", 10, int) if opts.get("per_token") else None
    report.write_text_atomic(os.path.join(out_dir, "qd_sweep.csv"),
                             report.qd_points_csv(points, per_token))
    report.plot_qd_scatter(points, os.path.join(out_dir, "qd_scatter.svg"))
    for label, message in errors:
        print(f"point {label} skipped: {message}", file=sys.stderr)
    print(f"wrote {len(points)} sweep points to {out_dir}", file=sys.stderr)
    return 0


def cmd_oracle(opts: _Opts) -> int:
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    spec = _decoder_list(opts)[0]
    dist = enumerate_global(model, prompt, opts.get("length", 10, int), spec,
                            cap=opts.get("cap", DEFAULT_ENUM_CAP, int))
    _emit(report.sequence_distribution_csv(dist, model), opts.get("out"))
    return 0


def cmd_calibrate(opts: _Opts) -> int:
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    contexts = generate_contexts(
        model, prompt, n=opts.get("contexts", 200, int),
        length=opts.get("context_length", 16, int),
        seed=opts.get("seed", DEFAULT_SEED, int))
    result = match_parameters(model, opts.get("k", 5, int), contexts,
                              tol=opts.get("tol", 0.05, float))
    _emit(result.to_dict(), opts.get("out"), as_json=True)
    return 0


def cmd_verify(opts: _Opts) -> int:
    which = opts.require("which")
    model = load_model(opts.require("model"))
    prompt = model.encode(opts.get("prompt", "", str))
    length = opts.get("length", 2, int)
    seed = opts.get("seed", DEFAULT_SEED, int)
    doc = {"which": which, "model": opts.get("model"), "length": length}

    if which == "equilibrium":
        specs = _decoder_list(opts, default=["topk:2", "nucleus:0.65",
                                             "temp:0.8"])
        reports = [verify_variational_max(
            model, s, prompt, length,
            n_perturbations=opts.get("perturbations", 100, int), seed=seed)
            for s in specs]
        doc["decoders"] = reports
        doc["passed"] = all(r["passed"] for r in reports)
    elif which == "zerotemp":
        taus = [float(x) for x in
                str(opts.get("taus", "1,0.8,0.5,0.2,0.1,0.05")).split(",")]
        scan = zero_temperature_scan(model, prompt, length, taus)
        doc.update(scan)
        doc["passed"] = (scan["converged_tau_local"] is not None
                         and scan["converged_tau_global"] is not None)
    elif which == "rejection":
        specs = [s.with_mode("global") for s in _decoder_list(opts)]
        n = opts.get("n", 100_000, int)
        tol = opts.get("tv_tol", 0.02, float)
        checks = []
        for spec in specs:
            oracle = enumerate_global(model, prompt, length, spec)
            records, stats = rejection_sample_batch(
                model, prompt, length, spec, seed, n,
                max_attempts=opts.get("max_attempts",
                                      DEFAULT_REJECTION_BUDGET, int),
                jobs=opts.get("jobs", 1, int))
            counts = {}
            for r in records:
                counts[r.completion] = counts.get(r.completion, 0) + 1
            tv = 0.5 * sum(abs(counts.get(ids, 0) / n - p)
                           for ids, p in oracle.entries.items())
            tv += 0.5 * sum(c / n for ids, c in counts.items()
                            if ids not in oracle.entries)
            checks.append({"decoder": spec.label, "n": n, "tv": tv,
                           "acceptance_rate": stats.acceptance_rate,
                           "passed": tv <= tol})
        doc["decoders"] = checks
        doc["passed"] = all(c["passed"] for c in checks)
    elif which == "pressure":
        tau = opts.get("tau", 1.0, float)
        result = transfer_pressure(model, tau)
        residual = float(abs(
            (result.matrix @ result.right) - result.eigenvalue * result.right
        ).max())
        doc.update({
            "tau": tau, "pressure": result.pressure,
            "eigenvalue": result.eigenvalue, "iterations": result.iterations,
            "residual": residual,
            "stationary": [float(x) for x in result.stationary],
        })
        doc["passed"] = residual <= 1e-8 * result.eigenvalue
    else:
        raise ParseError(f"unknown verification {which!r}")

    _emit(doc, opts.get("out"), as_json=True)
    return 0 if doc["passed"] else 1


def _add_common(sub):
    sub.add_argument("--config", help="JSON file of default option values")
    sub.add_argument("--model", help="model file path")
    sub.add_argument("--prompt", help="prompt text, tokenized by model unit")
    sub.add_argument("--length", type=int, help="completion length T")
    sub.add_argument("--seed", type=int, help="master seed")
    sub.add_argument("--decoder", action="append",
                     help="decoder spec kind[:param][@mode]; repeatable")
    sub.add_argument("--jobs", type=int, help="worker threads")
    sub.add_argument("--out", help="output file (default stdout)")
    sub.add_argument("--out-dir", dest="out_dir", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distortlab",
        description="locally vs globally normalized decoding strategies",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train an additively smoothed n-gram")
    _add_common(p)
    p.add_argument("--corpus", help="training text file")
    p.add_argument("--order", type=int, help="context length L")
    p.add_argument("--smoothing", type=float, help="additive smoothing > 0")
    p.add_argument("--mode", choices=["char", "word"], help="unit mode")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("sample", help="sample generations as JSONL")
    _add_common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--max-attempts", dest="max_attempts", type=int,
                   help="rejection budget per sample")
    p.set_defaults(func=cmd_sample)

    p = subs.add_parser("lnd", help="distortion-ratio quantile tables")
    _add_common(p)
    p.add_argument("--pairs", type=int, help="number of completion pairs")
    p.add_argument("--levels", help="quantile percents, comma separated")
    p.add_argument("--keep-records", dest="keep_records", action="store_true",
                   default=None, help="also write raw pair records JSONL")
    p.set_defaults(func=cmd_lnd)

    p = subs.add_parser("sweep", help="quality-diversity sweep CSV + SVG")
    _add_common(p)
    p.add_argument("--mode", choices=["exact", "sampled"], help="point mode")
    p.add_argument("--n", type=int, help="samples per sampled point")
    p.add_argument("--cap", type=int, help="enumeration cap")
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--per-token", dest="per_token", action="store_true",
                   default=None, help="add per-token columns to the CSV")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("oracle", help="exact global distribution CSV")
    _add_common(p)
    p.add_argument("--cap", type=int, help="enumeration cap")
    p.set_defaults(func=cmd_oracle)

    p = subs.add_parser("calibrate", help="match pi and tau to a top-k level")
    _add_common(p)
    p.add_argument("--k", type=int, help="top-k level to match")
    p.add_argument("--contexts", type=int, help="number of sampled contexts")
    p.add_argument("--context-length", dest="context_length", type=int)
    p.add_argument("--tol", type=float, help="matching tolerance")
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("verify", help="run a verification suite")
    p.add_argument("which",
                   choices=["equilibrium", "zerotemp", "rejection", "pressure"])
    _add_common(p)
    p.add_argument("--perturbations", type=int, help="random test measures")
    p.add_argument("--taus", help="temperature list, comma separated")
    p.add_argument("--tau", type=float, help="temperature for pressure")
    p.add_argument("--n", type=int, help="samples for rejection check")
    p.add_argument("--tv-tol", dest="tv_tol", type=float,
                   help="total-variation tolerance")
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = _Opts(args)
        return args.func(opts)
    except _BUDGET_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DistortLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
