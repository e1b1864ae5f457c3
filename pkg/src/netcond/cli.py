"""Command-line front end.

Exit codes: 0 success, 1 analysis degenerate (every input skipped),
2 input or usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import (FLOAT32_EPS, cumulative_bound, kappa_max, layer_bounds,
                           parallel_map, precision_report, product_bound)
from .errors import DegenerateGradientError, EmptyResultError, NetcondError
from .fixtures import accuracy, load_dataset, make_blobs, make_two_spirals, save_dataset, train_mlp
from .network import Network, forward as net_forward, load_model, model_digest, save_model
from .perturb import PerturbationResult, deepfool, magnitude_profile, random_perturbation
from .quantize import bit_sweep
from .report import decode_array, make_report, read_report, to_structured, to_table, write_report
from .tensor import l2_norm, make_rng

log = logging.getLogger("netcond")

EXIT_OK, EXIT_DEGENERATE, EXIT_USAGE = 0, 1, 2

# Options that never change a report's content.
_NON_SEMANTIC = {"out", "workers", "format", "func", "verbose"}


class UsageError(Exception):
    pass


def _options(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NON_SEMANTIC}


def _load_model(path) -> Network:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(p)


def _load_inputs(args, net: Network):
    p = Path(args.data)
    if not p.is_file():
        raise UsageError(f"data file not found: {args.data}")
    ds = load_dataset(p).subset(args.split)
    if ds.dim != net.input_size:
        raise UsageError(f"{args.data}: {ds.dim} features per row, model expects {net.input_size}")
    xs = [row.reshape(net.input_shape) for row in ds.features]
    data_digest = hashlib.sha256(p.read_bytes()).hexdigest()
    return ds, xs, data_digest


def _emit(report: dict, args) -> None:
    if args.out:
        write_report(report, args.out, args.format)
    else:
        sys.stdout.write(to_table(report) if args.format == "table" else to_structured(report))


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def vars_of(rec) -> dict:
    return {f: getattr(rec, f) for f in rec.__dataclass_fields__}


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    net = _load_model(args.model)
    bounds = layer_bounds(net)
    pb, cb = product_bound(bounds), cumulative_bound(bounds)
    print(f"{'layer':>5}  {'kind':<10}  {'operator_norm':>22}  converged")
    for b in bounds:
        print(f"{b.layer_index:>5}  {b.kind:<10}  {b.operator_norm:>22.17g}  {b.converged}")
    print(f"product_bound     {pb.value:.17g}")
    print(f"cumulative_bound  {cb.value:.17g}")
    if not (pb.converged and cb.converged):
        print("warning: power iteration did not converge for every layer", file=sys.stderr)
    if args.out:
        report = make_report("analyze", _options(args), None, model_digest(net), bounds,
                             {"product_bound": pb.value, "cumulative_bound": cb.value,
                              "converged": pb.converged})
        write_report(report, args.out, args.format)
    return EXIT_OK


def _attack_all(net, xs, ids, args):
    def one(item):
        i, x = item
        try:
            return deepfool(net, x, args.overshoot, args.max_iter, args.clamp01, input_id=i)
        except DegenerateGradientError as exc:
            log.warning("%s", exc)
            k = int(np.argmax(net_forward(net, x)))
            return PerturbationResult(i, np.zeros_like(x), 0.0, l2_norm(x), k, k, 0, False)
    return parallel_map(one, list(zip(ids, xs)), args.workers)


def cmd_attack(args) -> int:
    net = _load_model(args.model)
    ds, xs, data_digest = _load_inputs(args, net)
    ids = list(range(len(xs)))
    results = _attack_all(net, xs, ids, args)
    records = []
    for res, label in zip(results, ds.labels):
        records.append({
            "input_id": res.input_id, "label": int(label),
            "original_class": res.original_class, "perturbed_class": res.perturbed_class,
            "correct": res.original_class == int(label), "success": res.success,
            "iterations": res.iterations, "norm_x": res.norm_x, "norm_r": res.norm_r,
            "r": res.r,
        })
    correct = [r for r in records if r["correct"]]
    summary = {
        "data_digest": data_digest,
        "inputs": len(records),
        "success_rate": sum(r["success"] for r in records) / len(records) if records else None,
        "correct_inputs": len(correct),
        "success_rate_on_correct": (sum(r["success"] for r in correct) / len(correct)
                                    if correct else None),
        "median_iterations": statistics.median(r["iterations"] for r in records) if records else None,
    }
    try:
        prof = magnitude_profile(results)
        summary["log10_norm_x_over_norm_r"] = {"min": prof.minimum, "mean": prof.mean,
                                               "max": prof.maximum, "excluded": prof.excluded}
    except NetcondError:
        pass
    _emit(make_report("attack", _options(args), args.seed, model_digest(net), records, summary), args)
    print(f"attacked {len(records)} inputs, success rate {summary['success_rate']}, "
          f"median iterations {summary['median_iterations']}", file=sys.stderr)
    return EXIT_OK


def _replay_source(path):
    rep = read_report(path)
    stored = {}
    for rec in rep.get("records", []):
        blob = rec.get("dx", rec.get("r"))
        if blob is None:
            continue
        if "success" in rec and not rec["success"]:
            continue
        stored[int(rec["input_id"])] = decode_array(blob)
    if not stored:
        raise UsageError(f"{path}: no stored perturbations found")
    return lambda i, x, t: stored.get(i)


def cmd_kappa(args) -> int:
    net = _load_model(args.model)
    ds, xs, data_digest = _load_inputs(args, net)
    ids = list(range(len(xs)))
    trials = args.trials

    if args.source == "file":
        if not args.perturbations:
            raise UsageError("--source file needs --perturbations PATH")
        source = _replay_source(args.perturbations)
        trials = 1
    else:
        attacks = {r.input_id: r for r in _attack_all(net, xs, ids, args)}
        if args.source == "deepfool":
            source = lambda i, x, t: attacks[i].r if attacks[i].success else None
            trials = 1
        else:
            # One stream per input, consumed trial by trial: independent of --workers.
            streams = {i: make_rng(args.seed, i) for i in ids}

            def source(i, x, t):
                # Every trial draws, so the stream position tracks the trial index.
                d = random_perturbation(x, 1.0, streams[i])
                m = attacks[i].norm_r
                return d * m if attacks[i].success and m > 0 else None

    try:
        res = kappa_max(net, xs, source, trials, workers=args.workers, input_ids=ids)
    except EmptyResultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE

    dx_lookup = {}
    if args.source == "file":
        dx_lookup = {r.input_id: source(r.input_id, None, 0) for r in res.records}
    elif args.source == "deepfool":
        dx_lookup = {r.input_id: attacks[r.input_id].r for r in res.records}
    else:
        # Regenerate the winning random draw for exact replay.
        for r in res.records:
            g = make_rng(args.seed, r.input_id)
            for _ in range(r.trial + 1):
                d = random_perturbation(xs[r.input_id], 1.0, g)
            dx_lookup[r.input_id] = d * attacks[r.input_id].norm_r

    records = [dict(vars_of(r), dx=dx_lookup[r.input_id]) for r in res.records]
    positive = [r.kappa for r in res.records if r.kappa > 0]
    summary = {
        "data_digest": data_digest, "source": args.source, "trials_per_input": trials,
        "inputs": len(xs), "kept": len(res.records), "skipped": len(res.skipped),
        "sample_count": res.sample_count,
        "global_max_kappa": res.global_max.kappa,
        "global_max_input_id": res.global_max.input_id,
        "zero_kappa_inputs": len(res.records) - len(positive),
    }
    if positive:
        summary["precision"] = precision_report(positive, args.epsilon)
    _emit(make_report("kappa", _options(args), args.seed, model_digest(net), records, summary), args)
    if positive:
        p = summary["precision"]
        print(f"kappa mean {p.mean.kappa:.6g} (bits {p.mean.minimum_bits}), "
              f"max {p.max.kappa:.6g} (bits {p.max.minimum_bits}), "
              f"min {p.min.kappa:.6g} (bits {p.min.minimum_bits})", file=sys.stderr)
    return EXIT_OK


def cmd_quantize_sweep(args) -> int:
    net = _load_model(args.model)
    ds, xs, data_digest = _load_inputs(args, net)
    if args.kappa is not None:
        kt = args.kappa
    elif args.kappa_report:
        rep = read_report(args.kappa_report)
        per = {int(r["input_id"]): float(r["kappa"]) for r in rep["records"]}
        if not per:
            raise UsageError(f"{args.kappa_report}: no kappa records")
        top = max(per.values())
        kt = [per.get(i, top) for i in range(len(xs))]
    else:
        attacks = _attack_all(net, xs, list(range(len(xs))), args)
        res = kappa_max(net, xs, lambda i, x, t: attacks[i].r if attacks[i].success else None,
                        1, workers=args.workers)
        kt = res.global_max.kappa
    rows = bit_sweep(net, xs, args.bits, kt, args.range_lo, args.range_hi, workers=args.workers)
    records = []
    for r in rows:
        rec = vars_of(r)
        rec.pop("per_input")
        records.append(rec)
    summary = {"data_digest": data_digest, "kappa_tilde": kt if np.ndim(kt) == 0 else max(kt),
               "product_bound": product_bound(net).value,
               "chain_violations": sum(r.chain_violations for r in rows)}
    _emit(make_report("quantize-sweep", _options(args), args.seed, model_digest(net),
                      records, summary), args)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.kind == "blobs":
        ds = make_blobs(args.n, args.classes, args.dim, args.spread, args.seed, args.test_fraction)
    else:
        ds = make_two_spirals(args.n, args.noise, args.seed, test_fraction=args.test_fraction)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_train_fixture(args) -> int:
    p = Path(args.data)
    if not p.is_file():
        raise UsageError(f"data file not found: {args.data}")
    ds = load_dataset(p)
    hidden = args.hidden or []
    widths = [ds.dim] + hidden + [ds.class_count]
    net = train_mlp(widths, args.activation, ds, args.epochs, args.lr, args.seed,
                    args.batch_size, args.alpha)
    save_model(net, args.out)
    print(f"train accuracy {accuracy(net, ds.subset('train')):.4f}; model written to {args.out}",
          file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netcond", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"netcond {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--model", required=True)
        if data:
            p.add_argument("--data", required=True)
            p.add_argument("--split", choices=["all", "train", "test"], default="all")
        p.add_argument("--out")
        p.add_argument("--format", choices=["table", "structured"], default="structured")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=_seed, default=0)

    def attack_opts(p):
        p.add_argument("--overshoot", type=float, default=0.02)
        p.add_argument("--max-iter", dest="max_iter", type=int, default=50)
        p.add_argument("--clamp01", action="store_true")

    p = sub.add_parser("analyze", help="per-layer operator norms and network bounds")
    common(p, data=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("attack", help="DeepFool on every input")
    common(p)
    attack_opts(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("kappa", help="sampled condition number and precision report")
    common(p)
    attack_opts(p)
    p.add_argument("--source", choices=["deepfool", "random", "file"], default="deepfool")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--perturbations", help="report with stored perturbations (--source file)")
    p.add_argument("--epsilon", type=float, default=FLOAT32_EPS)
    p.set_defaults(func=cmd_kappa)

    p = sub.add_parser("quantize-sweep", help="fixed-point input quantization sweep")
    common(p)
    attack_opts(p)
    p.add_argument("--bits", type=_int_list, default=list(range(2, 13)))
    p.add_argument("--kappa", type=float, help="kappa-tilde to predict with")
    p.add_argument("--kappa-report", dest="kappa_report", help="kappa report for per-input kappa-tilde")
    p.add_argument("--range-lo", dest="range_lo", type=float)
    p.add_argument("--range-hi", dest="range_hi", type=float)
    p.set_defaults(func=cmd_quantize_sweep)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", choices=["blobs", "spirals"], default="blobs")
    p.add_argument("--n", type=int, default=100, help="samples per class (blobs) or total (spirals)")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--spread", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.5)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-fixture", help="train a small MLP on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=_int_list, default=[16, 16])
    p.add_argument("--activation", default="relu",
                   choices=["relu", "leaky_relu", "elu", "sigmoid", "tanh"])
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, NetcondError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
