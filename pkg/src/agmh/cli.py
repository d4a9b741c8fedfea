"""Command-line front end: synth, train, eval, query, export-attn, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import hashing
from .config import ConfigError, RunConfig, parse_config_text
from .errors import ArgumentError, DimensionError, FormatError, TrainingDivergedError
from .head import encode_features, export_attention, head_forward
from .retrieval import (BENCH_FIELDS, CodeDatabase, bench, load_codes,
                        mean_average_precision, pack, precision_at_k, rank_with_distances,
                        rows_to_csv, save_codes)
from .synth import QUERY, RETRIEVAL, generate, load_features, save_features
from .tensor import Tensor

log = logging.getLogger("agmh")

EVAL_FIELDS = ["variant", "bits", "map", "k", "precision_at_k"]
QUERY_FIELDS = ["rank", "id", "label", "distance"]


class UsageError(Exception):
    pass


def model_path(out_dir, variant, bits):
    return os.path.join(out_dir, f"model_{variant}_l{bits}.agmh")


def codes_path(out_dir, variant, bits):
    return os.path.join(out_dir, f"codes_{variant}_l{bits}.agmh")


def loss_path(out_dir, variant, bits):
    return os.path.join(out_dir, f"loss_{variant}_l{bits}.csv")


# --- argument handling --------------------------------------------------------


def _common(p):
    p.add_argument("--config", "--spec", dest="config", help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", help="64-bit seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _switches(p):
    p.add_argument("--features", help="feature file")
    p.add_argument("--bits", help="comma-separated code lengths")
    p.add_argument("--adl", choices=["on", "off"])
    p.add_argument("--siea", choices=["on", "off"])
    p.add_argument("--adl-denominator", dest="adl_denominator", choices=["paper", "pairs"])
    p.add_argument("--variants", help="comma-separated subset of base,adl,adl_siea")


def build_parser():
    parser = argparse.ArgumentParser(prog="agmh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature file")
    _common(p)

    p = sub.add_parser("train", help="train hash models, one per variant and code length")
    _common(p)
    _switches(p)

    p = sub.add_parser("eval", help="mAP and precision@k of trained codes")
    _common(p)
    _switches(p)
    p.add_argument("--models", help="directory written by train")
    p.add_argument("--baseline", action="store_true",
                   help="also report the untrained head with a random projection")

    p = sub.add_parser("query", help="top-k database items for one item")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--codes")
    p.add_argument("--item", type=int, required=True)
    p.add_argument("-k", "--top-k", dest="top_k", type=int)

    p = sub.add_parser("export-attn", help="write aggregation maps of one item as PGM images")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--item", type=int, required=True)

    p = sub.add_parser("bench", help="encode-and-rank timing sweep over batch sizes")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--codes")
    p.add_argument("--repeats", type=int)
    return parser


def _split_override(text):
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def resolve_config(args):
    file_values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read(), args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
    overrides = dict(_split_override(s) for s in args.overrides)
    for key in ("seed", "features", "bits", "adl", "siea", "adl_denominator", "variants",
                "model", "codes", "top_k", "repeats"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = str(v)
    return RunConfig.resolve(file_values, overrides)


def _need(rc, key, args_value=None):
    v = args_value if args_value is not None else rc[key]
    if v is None:
        raise UsageError(f"missing required setting {key!r}")
    return v


def _load_features(path):
    if not os.path.exists(path):
        raise UsageError(f"feature file not found: {path}")
    return load_features(path)


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return hashing.load_model(path)


def _load_codes(path):
    if not os.path.exists(path):
        raise UsageError(f"code file not found: {path}")
    return load_codes(path)


def _write_text(path, text):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _encode_items(features, head, model):
    return np.stack([hashing.encode_binary(encode_features(Tensor(T), head), model)
                     for T in features])


# --- subcommands ------------------------------------------------------------


def cmd_synth(rc, args):
    out = _need(rc, "out", args.out)
    fs = generate(rc.synth_spec())
    d = os.path.dirname(out)
    if d:
        os.makedirs(d, exist_ok=True)
    save_features(fs, out)
    nq = sum(s == QUERY for s in fs.splits)
    print(f"wrote {out}: {len(fs)} items ({nq} query, {len(fs) - nq} retrieval), "
          f"{len(set(fs.labels.tolist()))} classes, shape {tuple(fs.shape)}")
    return 0


def cmd_train(rc, args):
    out_dir = _need(rc, "out", args.out)
    fs = _load_features(_need(rc, "features"))
    os.makedirs(out_dir, exist_ok=True)
    header = rc.header()
    for variant in rc.variants:
        for bits in rc.bits:
            cfg = rc.train_config(bits, variant)
            log.info("training %s at %d bits", variant, bits)
            result = hashing.train(fs, cfg)
            hashing.save_model(model_path(out_dir, variant, bits), cfg, result.head, result.model)
            save_codes(result.code_database(), codes_path(out_dir, variant, bits))
            _write_text(loss_path(out_dir, variant, bits),
                        hashing.loss_trace_csv(result.loss_trace, [header, f"# variant: {variant}"]))
            print(f"{variant} l={bits}: final mean loss {result.loss_trace[-1][2]:.6g}")
    return 0


def eval_rows(fs, rc, models_dir, baseline=False):
    queries = fs.subset(QUERY)
    if len(queries) == 0:
        raise UsageError("feature file has no query items")
    k = rc["precision_k"]
    rows = []
    plan = [(v, b) for v in rc.variants for b in rc.bits]
    if baseline:
        plan += [("random", b) for b in rc.bits]
    for variant, bits in plan:
        if variant == "random":
            cfg = rc.train_config(bits)
            head, model = hashing.random_baseline_codes(fs, cfg)
            db_set = fs.subset(RETRIEVAL)
            db = CodeDatabase.from_codes(
                hashing.update_database_codes(db_set.features, head, model),
                db_set.ids, db_set.labels)
        else:
            _, head, model = _load_model(model_path(models_dir, variant, bits))
            db = _load_codes(codes_path(models_dir, variant, bits))
        if db.nbits != model.bits:
            raise UsageError(f"{variant} l={bits}: code file has {db.nbits} bits, model {model.bits}")
        q = _encode_items(queries.features, head, model)
        m = mean_average_precision(q, queries.labels, db, queries.ids)
        p = precision_at_k(q, queries.labels, db, k, queries.ids)
        rows.append({"variant": variant, "bits": bits, "map": repr(m), "k": k,
                     "precision_at_k": repr(p)})
    return rows


def cmd_eval(rc, args):
    fs = _load_features(_need(rc, "features"))
    models_dir = args.models or rc["model"] or "."
    rows = eval_rows(fs, rc, models_dir, args.baseline)
    text = rows_to_csv(rows, EVAL_FIELDS, [rc.header()])
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def _item_map(fs, item):
    try:
        return fs.features[fs.index_of(item)]
    except KeyError:
        raise UsageError(f"item id {item} not found in {len(fs)} feature records") from None


def cmd_query(rc, args):
    fs = _load_features(_need(rc, "features"))
    _, head, model = _load_model(_need(rc, "model"))
    db = _load_codes(_need(rc, "codes"))
    T = _item_map(fs, args.item)
    code = pack(hashing.encode_binary(encode_features(Tensor(T), head), model))
    if code.nbits != db.nbits:
        raise UsageError(f"model emits {code.nbits}-bit codes, database holds {db.nbits}")
    order, dist = rank_with_distances(code, db)
    k = rc["top_k"]
    rows = [{"rank": r + 1, "id": int(db.ids[i]), "label": int(db.labels[i]), "distance": int(d)}
            for r, (i, d) in enumerate(zip(order[:k], dist[:k]))]
    text = rows_to_csv(rows, QUERY_FIELDS, [rc.header(), f"# query: {args.item}"])
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_export_attn(rc, args):
    fs = _load_features(_need(rc, "features"))
    cfg, head, _ = _load_model(_need(rc, "model"))
    out_dir = _need(rc, "out", args.out)
    T = _item_map(fs, args.item)
    outs = head_forward(Tensor(T), head, siea=cfg.siea, attention=True)
    for path in export_attention(outs.aggregation_dists, args.item, out_dir):
        print(path)
    return 0


def cmd_bench(rc, args):
    fs = _load_features(_need(rc, "features"))
    _, head, model = _load_model(_need(rc, "model"))
    db = _load_codes(_need(rc, "codes"))
    queries = list(fs.subset(QUERY).features) or list(fs.features)
    rows = bench(lambda batch: _encode_items(batch, head, model), queries, db, rc["repeats"])
    for r in rows:
        r["ms_per_query"] = f"{r['ms_per_query']:.4f}"
    text = rows_to_csv(rows, BENCH_FIELDS, [rc.header(), "# timings are machine-dependent"])
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "query": cmd_query,
    "export-attn": cmd_export_attn,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = resolve_config(args)
        log.info("resolved %s", rc.header()[2:])
        return COMMANDS[args.command](rc, args)
    except (ConfigError, UsageError, ArgumentError, DimensionError, FormatError) as exc:
        print(f"agmh {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"agmh {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"agmh {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
