"""Command-line entry point: ``ngcg <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .datagen import generate, write_corpus
from .errors import ConfigError, NGCGError
from .geoeval import evaluate
from .gradsuite import run_suite
from .model import Model
from .retrieval import read_embeddings, write_embeddings
from .trainer import evaluate_model, load_corpus, train

log = logging.getLogger("ngcg")

ABLATION_AXES = {
    "tau": ["0.02", "0.03", "0.05", "0.07", "0.1", "learnable"],
    "alpha": ["16", "32", "64", "128"],
    "pooling": ["eos", "query", "average"],
    "mode": ["lora", "full"],
}
ABLATION_COLUMNS = ["axis_value", "R@1", "R@5", "R@10", "L@50", "L@100", "L@150", "seed",
                    "config_hash"]
LEARNABLE_TAU_INIT = 0.07


def _config(path) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def cmd_gen_data(args) -> int:
    corpus = generate(args.scenes, args.seed, args.noise)
    # provenance: hash of the generator settings, stored in every record
    blob = json.dumps({"scenes": args.scenes, "seed": args.seed, "noise": args.noise},
                      sort_keys=True)
    write_corpus(corpus, args.out, config_hash=hashlib.sha256(blob.encode()).hexdigest()[:16])
    n_test = len(corpus.indices("test"))
    print(f"wrote {len(corpus)} scenes ({len(corpus) - n_test} train, {n_test} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    corpus = load_corpus(cfg)
    model, record = train(corpus, cfg, out_ckpt=args.out_ckpt, log_path=args.log)
    if args.log:
        from .plotting import training_curve

        training_curve(record.losses, record.heldout_r1, Path(args.log).with_suffix(".png"))
    final = record.heldout_r1[-1] if record.heldout_r1 else float("nan")
    print(f"config {cfg.config_hash()}  steps {len(record.steps)}  "
          f"held-out R@1 {final:.4f}  {record.wall_clock:.1f}s")
    if cfg.train.mode == "lora":
        print(f"frozen base unchanged: {record.frozen_base_ok}")
    return 0


def cmd_embed(args) -> int:
    model = Model.load(args.ckpt)
    cfg = model.config.replace(**{"data.corpus": str(args.corpus)})
    part = load_corpus(cfg)
    if args.split != "all":
        part = part.split(args.split)
    if len(part) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    vectors = model.embed_texts(part.texts) if args.side == "text" else model.embed_images(part.grids)
    meta = {"config_hash": model.config.config_hash(), "split": args.split, "side": args.side,
            "corpus": str(args.corpus)}
    write_embeddings(args.out, part.ids, vectors, part.geos, meta)
    print(f"wrote {len(part)} {args.side} embeddings of dim {vectors.shape[1]} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    queries = read_embeddings(args.query_emb)
    index_file = read_embeddings(args.index_emb)
    index = index_file.to_index()
    if args.truth:
        try:
            mapping = json.loads(Path(args.truth).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read truth map {args.truth}: {exc}") from exc
        truth = [mapping.get(q) for q in queries.ids]
        missing = [q for q, t in zip(queries.ids, truth) if t is None]
        if missing:
            raise ConfigError(f"truth map has no entry for query {missing[0]!r}")
    else:
        truth = list(queries.ids)
    cfg = ExperimentConfig()
    ks, distances = cfg.eval.ks, cfg.eval.distances
    order, _ = index.rank(queries.vectors.astype(float), min(max(ks), len(index)))
    ids = index.ids
    ranked = [[ids[j] for j in row] for row in order]
    truth_geo = [index.geo.get(t) or g for t, g in zip(truth, queries.geo)]
    chash = index_file.meta.get("config_hash") or queries.meta.get("config_hash", "")
    report = evaluate(ranked, truth, truth_geo, index.geo, ks=ks, distances=distances,
                      conjunctive=args.conjunctive, split=queries.meta.get("split", ""),
                      config_hash=chash)
    out = Path(args.out)
    report.write(out.with_suffix(".json"), out.with_suffix(".csv"))
    from .plotting import report_figure

    report_figure(report.row(), out.with_suffix(".png"), title=f"{len(truth)} queries")
    for key, value in report.row().items():
        print(f"{key}\t{value:.4f}")
    return 0


def ablation_config(base: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    if axis == "tau":
        if value == "learnable":
            return base.replace(**{"loss.learnable_temperature": True,
                                   "loss.temperature": LEARNABLE_TAU_INIT})
        return base.replace(**{"loss.learnable_temperature": False,
                               "loss.temperature": float(value)})
    if axis == "alpha":
        return base.replace(**{"lora.rank": 16, "lora.alpha": float(value), "train.mode": "lora"})
    if axis == "pooling":
        return base.replace(**{"pooling.strategy": value})
    if axis == "mode":
        return base.replace(**{"train.mode": value})
    raise ConfigError(f"unknown ablation axis {axis!r}")


def run_ablation(axis: str, base: ExperimentConfig) -> list[dict]:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    corpus = load_corpus(base)
    rows = []
    for value in ABLATION_AXES[axis]:
        cfg = ablation_config(base, axis, value)
        model, _ = train(corpus, cfg, eval_every_epoch=False)
        report = evaluate_model(model, corpus, "test", cfg.config_hash())
        row = {"axis_value": value, **{k: v for k, v in report.row().items()},
               "seed": cfg.train.seed, "config_hash": cfg.config_hash()}
        log.info("%s=%s  R@1 %.3f", axis, value, row["R@1"])
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}")
    rows = run_ablation(args.axis, _config(args.config))
    with open(args.out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    from .plotting import ablation_figure

    ablation_figure(args.axis, rows, Path(args.out_csv).with_suffix(".png"))
    print(f"wrote {len(rows)} rows to {args.out_csv}")
    return 0


def cmd_gradcheck(args) -> int:
    result = run_suite(seeds=(args.seed,), inject_bug=args.inject_bug)
    for line in result.lines:
        print(line)
    print(f"{'PASS' if result.passed else 'FAIL'} ({len(result.lines)} checks, "
          f"{result.seconds:.1f}s)")
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ngcg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus (JSON Lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1024)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", help="JSON Lines training log; a curve PNG is written next to it")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed one side of a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--side", choices=["text", "image"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="retrieve queries against an index and score them")
    p.add_argument("--query-emb", required=True)
    p.add_argument("--index-emb", required=True)
    p.add_argument("--truth", help="JSON object mapping query id to index id (default: same id)")
    p.add_argument("--out", required=True, help="output prefix for .json, .csv and .png")
    p.add_argument("--conjunctive", action="store_true",
                   help="L@D also requires the top candidate to be the correct one")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every setting along one axis")
    p.add_argument("--axis", required=True, help=", ".join(ABLATION_AXES))
    p.add_argument("--config")
    p.add_argument("--out-csv", required=True, help="CSV table; a PNG is written next to it")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-bug", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ngcg {args.command}: {exc}", file=sys.stderr)
        return 2
    except NGCGError as exc:
        print(f"ngcg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ngcg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
