"""End-to-end runs: the three-phase recipe, its baselines and ablations.

Everything here is a pure function of a :class:`PipelineConfig` (which
carries the seed), so a run can be repeated byte for byte.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import pruning as P
from . import retrieval as R
from . import synthgen as S
from . import trainer as TR
from .encoder import Encoder, EncoderConfig, student_config, teacher_config

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldConfig:
    topics: S.TopicModel = S.TopicModel()
    n_docs: int = 2000
    n_queries: int = 500
    n_train_queries: int = 20000
    hard_negatives: int = 2
    align_size: int = 4000
    general_fraction: float = 0.25
    calibration_size: int = P.CALIBRATION_SIZE


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    world: WorldConfig = WorldConfig()
    teacher: EncoderConfig = teacher_config(prompt_prefix=(2, 3, 4))
    student: EncoderConfig = student_config()
    teacher_features: str = "deployable"
    teacher_mode: str = "full"
    lora_rank: int = 8
    pretrain_objective: str = "views"
    teacher_pretrain: TR.TrainConfig = TR.TrainConfig(steps=200, batch_size=32, peak_lr=1e-3)
    phase1: TR.TrainConfig = TR.TrainConfig(steps=300, batch_size=32, peak_lr=1e-3, hard_negatives=1)
    student_pretrain: TR.TrainConfig = TR.TrainConfig(steps=500, batch_size=64, peak_lr=1e-3)
    phase2: TR.TrainConfig = TR.TrainConfig(steps=600, batch_size=64, peak_lr=1e-3)
    prune_schedule: tuple[P.PruneTarget, ...] = (P.PruneTarget(3, 96), P.PruneTarget(2, 64))
    prune_align: TR.TrainConfig = TR.TrainConfig(steps=300, batch_size=64, peak_lr=1e-3)
    prune_mode: str = "top"
    phase3: TR.TrainConfig = TR.TrainConfig(steps=300, batch_size=32, hard_negatives=1)
    k: int = 10
    threshold: float = S.POSITIVE_THRESHOLD
    align_target: float = 0.15  # loss level for the init-comparison convergence step

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same experiment, new seed for the world and every training phase."""
        w = dataclasses.replace(self.world, topics=dataclasses.replace(self.world.topics, seed=seed))
        out = dataclasses.replace(self, seed=seed, world=w)
        for name in ("teacher_pretrain", "phase1", "student_pretrain", "phase2", "prune_align", "phase3"):
            out = dataclasses.replace(out, **{name: dataclasses.replace(getattr(out, name), seed=seed)})
        return out


class World:
    """Corpus, mined pairs, alignment and calibration text for one seed."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.model = cfg.topics
        self.corpus = S.generate(self.model, cfg.n_docs, cfg.n_queries, cfg.n_train_queries)
        self.pairs = S.mine_pairs(self.corpus, cfg.hard_negatives)
        self.align = S.alignment_corpus(self.model, cfg.align_size, cfg.general_fraction)
        self.calibration = self.align.sequences[: cfg.calibration_size]
        self.query_mixtures = np.stack([q.mixture for q in self.corpus.queries])
        self.doc_mixtures = self.corpus.doc_mixtures

    @cached_property
    def pretrain_text(self) -> list[list[int]]:
        return self.corpus.doc_tokens() + self.align.sequences

    def p_at_k(self, query_emb: np.ndarray, index: R.DocIndex, k: int = 10,
               threshold: float = S.POSITIVE_THRESHOLD) -> float:
        res = R.top_k(index, query_emb, k)
        return R.precision_at_k(res, self.query_mixtures, self.doc_mixtures, k, threshold)

    def evaluate(self, query_enc: Encoder, index: R.DocIndex, features: str = "deployable",
                 truncate_dim: int | None = None, k: int = 10) -> float:
        seqs = TR.query_inputs(self.corpus.queries, query_enc.config, features, self.model)
        return self.p_at_k(query_enc.encode(seqs, truncate_dim=truncate_dim), index, k)


@dataclass
class Stage:
    name: str
    steps: int
    final_loss: float
    p_at_k: float
    seconds: float = 0.0
    losses: list[float] = field(default_factory=list, repr=False)


@dataclass
class RunRecord:
    """Models and per-phase summaries of one pipeline run."""

    seed: int
    stages: dict[str, Stage] = field(default_factory=dict)
    models: dict[str, Encoder] = field(default_factory=dict, repr=False)
    extra: dict = field(default_factory=dict)

    def add(self, stage: Stage) -> None:
        log.info("seed %d %-22s steps=%-5d loss=%.4f p@k=%.4f (%.1fs)", self.seed, stage.name,
                 stage.steps, stage.final_loss, stage.p_at_k, stage.seconds)
        self.stages[stage.name] = stage

    def p(self, name: str) -> float:
        return self.stages[name].p_at_k


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


PRETRAIN_OBJECTIVES = {"views": TR.pretrain_views, "mlm": TR.pretrain_mlm}


def pretrained(config: EncoderConfig, text, train: TR.TrainConfig, seed: int, salt: int,
               objective: str = "views") -> Encoder:
    """Unsupervised warm-up from a seeded random init; ``steps=0`` keeps the init."""
    if objective not in PRETRAIN_OBJECTIVES:
        raise ValueError(f"unknown pretraining objective {objective!r}")
    enc = Encoder.init(config, seed=seed * 1000 + salt)
    if train.steps == 0:
        return enc
    return PRETRAIN_OBJECTIVES[objective](enc, text, train).query


def teacher_phase(cfg: PipelineConfig, world: World, rec: RunRecord, *, loss: str | None = None,
                  features: str | None = None, name: str = "teacher") -> TR.PhaseOutput:
    """Pretrain a shared backbone, then train both towers contrastively."""
    base = rec.models.get("teacher_zero_shot")
    if base is None:
        base, dt = _timed(pretrained, cfg.teacher, world.pretrain_text, cfg.teacher_pretrain, cfg.seed, 1,
                          cfg.pretrain_objective)
        rec.models["teacher_zero_shot"] = base
        idx = R.index_from_embeddings(base.encode(world.corpus.doc_tokens()))
        rec.add(Stage("teacher_zero_shot", cfg.teacher_pretrain.steps, float("nan"),
                      world.evaluate(base, idx, cfg.teacher_features), dt))
    train = cfg.phase1 if loss is None else dataclasses.replace(cfg.phase1, loss=loss)
    feats = features or cfg.teacher_features
    out, dt = _timed(TR.train_teacher, world.corpus, world.pairs, base, base, train,
                     cfg.teacher_mode, cfg.lora_rank, feats)
    idx = R.index_from_embeddings(out.doc.encode(world.corpus.doc_tokens()))
    rec.add(Stage(name, train.steps, out.final_loss, world.evaluate(out.query, idx, feats), dt, out.losses))
    rec.models[name + "_q"], rec.models[name + "_d"] = out.query, out.doc
    return out


def run_hlm(cfg: PipelineConfig, world: World | None = None, progressive: bool = True) -> RunRecord:
    """Teacher, alignment, progressive prune-and-align and refinement for one seed."""
    world = world or World(cfg.world)
    rec = RunRecord(cfg.seed)
    teacher_phase(cfg, world, rec)
    t_q, t_d = rec.models["teacher_q"], rec.models["teacher_d"]
    doc_emb = t_d.encode(world.corpus.doc_tokens())
    index = R.index_from_embeddings(doc_emb)
    rec.extra["doc_emb"] = doc_emb
    targets = TR.teacher_targets(t_q, world.align.items, cfg.teacher_features, world.model)
    rec.extra["targets"] = targets

    student0, dt = _timed(pretrained, cfg.student, world.align.sequences, cfg.student_pretrain, cfg.seed, 2,
                            cfg.pretrain_objective)
    rec.models["student_zero_shot"] = student0
    rec.add(Stage("student_zero_shot", cfg.student_pretrain.steps, float("nan"), world.evaluate(student0, index), dt))

    aligned, dt = _timed(TR.align_student, student0, targets, world.align, cfg.phase2)
    rec.models["aligned"] = aligned.query
    rec.add(Stage("aligned", cfg.phase2.steps, aligned.final_loss, world.evaluate(aligned.query, index), dt,
                  aligned.losses))

    refined, dt = _timed(TR.contrastive_refine, aligned.query, t_d, world.corpus, world.pairs, cfg.phase3, doc_emb)
    rec.models["refined"] = refined.query
    rec.add(Stage("refined", cfg.phase3.steps, refined.final_loss, world.evaluate(refined.query, index), dt,
                  refined.losses))

    if progressive and cfg.prune_schedule:
        run_progressive(cfg, world, rec, aligned.query, targets, index)
    return rec


def _stage_cfg(cfg: PipelineConfig, r: int) -> TR.TrainConfig:
    return dataclasses.replace(cfg.prune_align, seed=cfg.prune_align.seed * 100 + r + 1)


def run_progressive(cfg: PipelineConfig, world: World, rec: RunRecord, aligned: Encoder,
                    targets: np.ndarray, index: R.DocIndex) -> None:
    def realign(enc, r):
        out = TR.align_student(enc, targets, world.align, _stage_cfg(cfg, r))
        return out.query, out.losses

    t0 = time.perf_counter()
    final, reports = P.progressive_prune_align(
        aligned, cfg.prune_schedule, world.calibration, realign,
        evaluate=lambda enc: {"p_at_k": world.evaluate(enc, index)}, mode=cfg.prune_mode)
    dt = time.perf_counter() - t0
    rec.extra["prune_reports"] = reports
    for r, rep in enumerate(reports):
        name = f"pruned_{rep.target.n_layers}L"
        rec.add(Stage(name, cfg.prune_align.steps, float(np.mean(rep.align_losses[-10:])),
                      rep.metrics["p_at_k"], dt / len(reports), rep.align_losses))
        rec.models[name] = rep.encoder


def run_direct_prune(cfg: PipelineConfig, world: World, rec: RunRecord) -> Stage:
    """Prune the pretrained student straight to the final target, then align.

    The alignment budget equals the progressive path's total (initial
    alignment plus every stage).
    """
    target = cfg.prune_schedule[-1]
    steps = cfg.phase2.steps + cfg.prune_align.steps * len(cfg.prune_schedule)
    student0 = rec.models["student_zero_shot"]
    t0 = time.perf_counter()
    pruned, _ = P.structured_prune(student0, target, world.calibration, cfg.prune_mode)
    train = dataclasses.replace(cfg.phase2, steps=steps)
    out = TR.align_student(pruned, rec.extra["targets"], world.align, train)
    index = R.index_from_embeddings(rec.extra["doc_emb"])
    stage = Stage(f"direct_{target.n_layers}L", steps, out.final_loss, world.evaluate(out.query, index),
                  time.perf_counter() - t0, out.losses)
    rec.models[stage.name] = out.query
    rec.add(stage)
    return stage


def run_one_shot(cfg: PipelineConfig, world: World, rec: RunRecord) -> Stage:
    """Compact query tower and teacher-size document tower trained jointly.

    Both towers start from the same pretrained checkpoints the recipe uses;
    the step budget equals the recipe's phase 1 + 2 + 3 steps.
    """
    steps = cfg.phase1.steps + cfg.phase2.steps + cfg.phase3.steps
    train = dataclasses.replace(cfg.phase1, steps=steps)
    out, dt = _timed(TR.one_shot_asymmetric, world.corpus, world.pairs, rec.models["student_zero_shot"],
                     rec.models["teacher_zero_shot"], train)
    idx = R.index_from_embeddings(out.doc.encode(world.corpus.doc_tokens()))
    stage = Stage("one_shot", steps, out.final_loss, world.evaluate(out.query, idx), dt, out.losses)
    rec.models["one_shot_q"], rec.models["one_shot_d"] = out.query, out.doc
    rec.add(stage)
    return stage


def convergence_step(losses, target: float, window: int = 20) -> int:
    """First step whose trailing-window mean loss is <= target; len+1 if never."""
    x = np.asarray(losses, dtype=np.float64)
    if len(x) == 0:
        return 1
    c = np.cumsum(np.insert(x, 0, 0.0))
    for i in range(len(x)):
        lo = max(0, i + 1 - window)
        if (c[i + 1] - c[lo]) / (i + 1 - lo) <= target:
            return i + 1
    return len(x) + 1


def run_init_comparison(cfg: PipelineConfig, world: World, rec: RunRecord) -> dict:
    """Align a randomly initialized student with the same budget as the pretrained one."""
    random0 = Encoder.init(cfg.student, seed=cfg.seed * 1000 + 2)
    out, dt = _timed(TR.align_student, random0, rec.extra["targets"], world.align, cfg.phase2)
    index = R.index_from_embeddings(rec.extra["doc_emb"])
    rec.add(Stage("aligned_random_init", cfg.phase2.steps, out.final_loss, world.evaluate(out.query, index), dt,
                  out.losses))
    return {"pretrained": rec.stages["aligned"].losses, "random": out.losses}


def truncation_sweep(world: World, q: Encoder, d: Encoder, dims, features: str = "deployable") -> dict[int, float]:
    doc_emb = d.encode(world.corpus.doc_tokens())
    q_seqs = TR.query_inputs(world.corpus.queries, q.config, features, world.model)
    out = {}
    for dim in dims:
        idx = R.index_from_embeddings(doc_emb, truncate_dim=dim)
        out[dim] = world.p_at_k(q.encode(q_seqs, truncate_dim=dim), idx)
    return out


TRENDS = ("a", "b", "c", "d", "e", "f", "g", "h")


def seed_trends(cfg: PipelineConfig, world: World | None = None) -> tuple[RunRecord, dict]:
    """Every run the ordinal trend checks need for one seed, plus the checks.

    Returns the run record and a flat dict of the compared quantities and a
    boolean per trend letter.
    """
    world = world or World(cfg.world)
    rec = run_hlm(cfg, world)
    run_direct_prune(cfg, world, rec)
    curves = run_init_comparison(cfg, world, rec)
    run_one_shot(cfg, world, rec)
    teacher_phase(cfg, world, rec, loss="infonce", name="teacher_infonce")
    teacher_phase(cfg, world, rec, features="oracle", name="teacher_oracle")

    full, quarter = cfg.teacher.embed_dim, max(1, cfg.teacher.embed_dim // 4)
    zs = rec.models["teacher_zero_shot"]
    zs_sweep = truncation_sweep(world, zs, zs, (full, quarter), cfg.teacher_features)
    tr_sweep = truncation_sweep(world, rec.models["teacher_q"], rec.models["teacher_d"], (full, quarter),
                                cfg.teacher_features)
    final = f"pruned_{cfg.prune_schedule[-1].n_layers}L" if cfg.prune_schedule else "aligned"
    direct = f"direct_{cfg.prune_schedule[-1].n_layers}L" if cfg.prune_schedule else "aligned"
    conv = {k: convergence_step(v, cfg.align_target) for k, v in curves.items()}
    tail = {k: float(np.mean(v[-max(1, len(v) // 10):])) for k, v in curves.items()}
    p = rec.p
    m = {
        "teacher": p("teacher"), "teacher_infonce": p("teacher_infonce"), "teacher_oracle": p("teacher_oracle"),
        "aligned": p("aligned"), "refined": p("refined"), "progressive": p(final), "direct": p(direct),
        "one_shot": p("one_shot"), "recovery": p("aligned") / p("teacher") if p("teacher") > 0 else float("nan"),
        "conv_pretrained": conv["pretrained"], "conv_random": conv["random"],
        "final_loss_pretrained": tail["pretrained"], "final_loss_random": tail["random"],
        "zs_full": zs_sweep[full], "zs_quarter": zs_sweep[quarter],
        "trained_full": tr_sweep[full], "trained_quarter": tr_sweep[quarter],
    }
    m["a"] = m["teacher"] > m["teacher_infonce"]
    m["b"] = m["teacher_oracle"] > m["teacher"]
    m["c"] = m["aligned"] >= 0.95 * m["teacher"]
    m["d"] = m["refined"] > m["aligned"]
    m["e"] = m["progressive"] >= m["direct"]
    m["f"] = m["refined"] > m["one_shot"]
    m["g"] = conv["pretrained"] < conv["random"] and tail["pretrained"] < tail["random"]
    m["h"] = (m["zs_full"] >= m["zs_quarter"]
              and (m["trained_full"] - m["trained_quarter"]) < (m["zs_full"] - m["zs_quarter"]))
    return rec, m
