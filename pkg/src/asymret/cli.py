"""Command-line entry points: one subcommand per training phase plus eval,
bench and a chained ``pipeline``.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiments as X
from . import formats as F
from . import pruning as P
from . import retrieval as R
from . import synthgen as S
from . import tensor as T
from . import trainer as TR
from .config import RunConfig, load_run_config
from .encoder import ConfigError, Encoder, InputError, ParameterError

log = logging.getLogger("asymret")

THREADS_ENV = "ASYMRET_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    return threadpool_limits(limits=limit)


def _need(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"missing {what}")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load(path: str | None, what: str) -> Encoder:
    return F.load_checkpoint(_need(path, what))


def _check_arch(enc: Encoder, expected, what: str) -> None:
    got = enc.config
    for field in ("vocab_size", "hidden_dim", "n_query_heads", "n_kv_heads", "head_dim", "embed_dim"):
        if getattr(got, field) != getattr(expected, field):
            raise F.FormatError(f"{what}: checkpoint {field}={getattr(got, field)} but config says "
                                f"{getattr(expected, field)}")


def _write_train_metrics(path, out: TR.PhaseOutput) -> None:
    if path:
        F.write_csv(path, F.TRAIN_COLUMNS, F.train_rows(out.losses, out.lrs))


# ------------------------------------------------------------------ commands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    world = X.World(cfg.pipeline.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "documents.jsonl": (world.corpus.documents, "document"),
        "queries.jsonl": (world.corpus.queries, "query"),
        "train_queries.jsonl": (world.corpus.train_queries, "train_query"),
        "alignment.jsonl": (world.align.items, "alignment"),
    }
    for name, (items, kind) in files.items():
        with F.atomic_write(out / name, "w") as fh:
            S.write_jsonl(items, kind, fh)
    with F.atomic_write(out / "pairs.jsonl", "w") as fh:
        for p in world.pairs:
            fh.write(json.dumps({"query_id": p.query_id, "positive_id": p.positive_id,
                                 "hard_negative_ids": list(p.hard_negative_ids)}) + "\n")
    counts, edges = S.score_histogram(world.corpus)
    summary = {
        "documents": len(world.corpus.documents),
        "queries": len(world.corpus.queries),
        "train_queries": len(world.corpus.train_queries),
        "pairs": len(world.pairs),
        "negative_shortfall": S.negative_shortfall(world.pairs, cfg.pipeline.world.hard_negatives),
        "base_rate": S.relevant_base_rate(world.corpus),
        "score_histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }
    with F.atomic_write(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"documents={summary['documents']} queries={summary['queries']} "
          f"train_queries={summary['train_queries']} pairs={summary['pairs']} "
          f"base_rate={summary['base_rate']:.4f}")
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        print(f"  oracle [{lo:.1f},{hi:.1f}) {int(c)}")
    return EXIT_OK


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    world = X.World(pc.world)
    rec = X.RunRecord(pc.seed)
    out = X.teacher_phase(pc, world, rec)
    F.save_checkpoint(args.out_query, out.query, {"role": "teacher_query", "features": pc.teacher_features})
    F.save_checkpoint(args.out_doc, out.doc, {"role": "teacher_doc"})
    _write_train_metrics(args.metrics, out)
    print(f"teacher p@{pc.k}={rec.p('teacher'):.4f} final_loss={out.final_loss:.4f}")
    return EXIT_OK


def _targets(pc, world, teacher_q: Encoder) -> np.ndarray:
    return TR.teacher_targets(teacher_q, world.align.items, pc.teacher_features, world.model)


def cmd_align(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    teacher_q = _load(args.teacher_query, "teacher query checkpoint (--teacher-query)")
    _check_arch(teacher_q, pc.teacher, "teacher query")
    world = X.World(pc.world)
    if args.init == "pretrained":
        student = X.pretrained(pc.student, world.align.sequences, pc.student_pretrain, pc.seed, 2,
                               pc.pretrain_objective)
    else:
        student = Encoder.init(pc.student, seed=pc.seed * 1000 + 2)
    out = TR.align_student(student, _targets(pc, world, teacher_q), world.align, pc.phase2)
    F.save_checkpoint(args.out, out.query, {"role": "aligned_student", "init": args.init})
    _write_train_metrics(args.metrics, out)
    print(f"aligned final_loss={out.final_loss:.6f}")
    return EXIT_OK


def cmd_prune(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    student = _load(args.student, "student checkpoint (--student)")
    teacher_q = _load(args.teacher_query, "teacher query checkpoint (--teacher-query)")
    _check_arch(student, pc.student, "student")
    world = X.World(pc.world)
    targets = _targets(pc, world, teacher_q)

    def realign(enc, r):
        res = TR.align_student(enc, targets, world.align, X._stage_cfg(pc, r))
        return res.query, res.losses

    final, reports = P.progressive_prune_align(student, pc.prune_schedule, world.calibration, realign,
                                               mode=pc.prune_mode)
    F.save_checkpoint(args.out, final, {"role": "pruned_student"})
    if args.stage_dir:
        for rep in reports:
            t = rep.target
            F.save_checkpoint(Path(args.stage_dir) / f"pruned_{t.n_layers}L_{t.ffn_dim}F.hlmc", rep.encoder,
                              {"role": "pruned_student"})
    if args.report:
        with F.atomic_write(args.report, "w") as fh:
            P.write_prune_report(reports, fh)
    print("stages: " + ", ".join(f"{r.target.n_layers}L/{r.target.ffn_dim}F" for r in reports))
    return EXIT_OK


def cmd_refine(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    student = _load(args.student, "student checkpoint (--student)")
    doc = _load(args.doc, "document checkpoint (--doc)")
    _check_arch(doc, pc.teacher, "document tower")
    world = X.World(pc.world)
    out = TR.contrastive_refine(student, doc, world.corpus, world.pairs, pc.phase3)
    F.save_checkpoint(args.out, out.query, {"role": "refined_student"})
    _write_train_metrics(args.metrics, out)
    print(f"refined final_loss={out.final_loss:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    q = _load(args.query, "query checkpoint (--query)")
    d = _load(args.doc, "document checkpoint (--doc)")
    if q.config.embed_dim != d.config.embed_dim:
        raise F.FormatError("query and document checkpoints have different embed_dim")
    world = X.World(pc.world)
    dims = args.truncate_dim or list(cfg.eval.truncate_dims) or [q.config.embed_dim]
    doc_emb = d.encode(world.corpus.doc_tokens())
    seqs = TR.query_inputs(world.corpus.queries, q.config, args.features, world.model)
    rows = []
    for dim in dims:
        if dim > q.config.embed_dim:
            raise UsageError(f"--truncate-dim {dim} exceeds embed_dim {q.config.embed_dim}")
        index = R.index_from_embeddings(doc_emb, truncate_dim=dim)
        p = world.p_at_k(q.encode(seqs, truncate_dim=dim), index, cfg.eval.k, cfg.eval.threshold)
        rows.append([f"{args.label}@{dim}", q.n_params(), None, None, None, p])
        print(f"dim={dim} p@{cfg.eval.k}={p:.4f}")
    if args.out:
        F.write_csv(args.out, R.BENCH_COLUMNS, rows)
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    world = X.World(pc.world)
    d = _load(args.doc, "document checkpoint (--doc)") if args.doc else None
    doc_index = R.index_from_embeddings(d.encode(world.corpus.doc_tokens())) if d else None
    sample = [q.tokens for q in world.corpus.queries[: args.sample]]
    rows = []
    # latency numbers are defined for one worker
    with threadpool_limits(limits=1):
        for path in args.query:
            q = _load(path, "query checkpoint")
            p = world.evaluate(q, doc_index, k=cfg.eval.k) if doc_index is not None else None
            rep = R.bench_encoder(q, sample, repetitions=args.repetitions, label=Path(path).stem, p_at_k=p)
            rows.append(rep.row())
            print(",".join(rep.row()))
    if args.out:
        F.write_csv(args.out, R.BENCH_COLUMNS, rows)
    return EXIT_OK


def cmd_pipeline(args, cfg: RunConfig) -> int:
    pc = cfg.pipeline
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = X.World(pc.world)
    rec = X.run_hlm(pc, world, progressive=bool(pc.prune_schedule))
    save = {
        "teacher_query.hlmc": "teacher_q",
        "teacher_doc.hlmc": "teacher_d",
        "aligned.hlmc": "aligned",
        "refined.hlmc": "refined",
    }
    for t in pc.prune_schedule:
        save[f"pruned_{t.n_layers}L.hlmc"] = f"pruned_{t.n_layers}L"
    for fname, key in save.items():
        if key in rec.models:
            F.save_checkpoint(out / fname, rec.models[key], {"role": key})
    rows = [(s.name, s.steps, s.final_loss, s.p_at_k) for s in rec.stages.values()]
    F.write_csv(out / "phases.csv", F.PHASE_COLUMNS, rows)
    for name in ("teacher", "aligned", "refined"):
        st = rec.stages[name]
        F.write_csv(out / f"train_{name}.csv", F.TRAIN_COLUMNS,
                    [(i + 1, None, v) for i, v in enumerate(st.losses)])
    for s in rec.stages.values():
        print(f"{s.name:<20} steps={s.steps:<5} p@{pc.k}={s.p_at_k:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asymret", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write the synthetic corpus and mined pairs")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-teacher", cmd_train_teacher, "phase 1: contrastive teacher training")
    p.add_argument("--out-query", required=True)
    p.add_argument("--out-doc", required=True)
    p.add_argument("--metrics")

    p = add("align", cmd_align, "phase 2: align a compact query encoder to the teacher")
    p.add_argument("--teacher-query")
    p.add_argument("--init", choices=("pretrained", "random"), default="pretrained")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")

    p = add("prune", cmd_prune, "progressive prune-and-align")
    p.add_argument("--student")
    p.add_argument("--teacher-query")
    p.add_argument("--out", required=True)
    p.add_argument("--stage-dir")
    p.add_argument("--report")

    p = add("refine", cmd_refine, "phase 3: contrastive refinement against a frozen document tower")
    p.add_argument("--student")
    p.add_argument("--doc")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")

    p = add("eval", cmd_eval, "P@K of a query/document checkpoint pair")
    p.add_argument("--query")
    p.add_argument("--doc")
    p.add_argument("--features", choices=("deployable", "oracle"), default="deployable")
    p.add_argument("--truncate-dim", type=int, nargs="+")
    p.add_argument("--label", default="eval")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "latency / throughput of query encoders")
    p.add_argument("--query", nargs="+", required=True)
    p.add_argument("--doc")
    p.add_argument("--repetitions", type=int, default=50)
    p.add_argument("--sample", type=int, default=256)
    p.add_argument("--out")

    p = add("pipeline", cmd_pipeline, "teacher, align, prune, refine and eval in one go")
    p.add_argument("--out", required=True, help="output directory")
    return ap


DATA_ERRORS = (F.FormatError, InputError, TR.FrozenTowerError)
NUMERIC_ERRORS = (T.NumericError, T.DegenerateEmbeddingError, FloatingPointError)
USAGE_ERRORS = (UsageError, ConfigError, ParameterError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            cfg = load_run_config(args.config, args.seed)
            return args.fn(args, cfg)
    # data and numeric errors subclass ValueError/ArithmeticError, so check them first
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
