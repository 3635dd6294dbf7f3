"""TOML run configuration with strict key checking.

Unknown keys, wrong types and missing required keys raise
:class:`RunConfigError` carrying the offending line when it can be located.
"""

from __future__ import annotations

import dataclasses
import math
import re
from typing import Any, Mapping

import tomli

from . import losses as L
from . import pruning as P
from . import synthgen as S
from . import trainer as TR
from .encoder import ConfigError, EncoderConfig
from .experiments import PipelineConfig, WorldConfig

_WORLD_KEYS = {"n_docs", "n_queries", "n_train_queries", "hard_negatives", "align_size",
               "general_fraction", "calibration_size"}
_TOPIC_KEYS = {f.name for f in dataclasses.fields(S.TopicModel)} - {"seed"}
_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)}
_TRAIN_KEYS = {"steps", "batch_size", "peak_lr", "warmup_fraction", "loss", "temperature",
               "in_batch_negatives", "same_tower_negatives", "false_negative_margin",
               "hard_negatives", "grad_clip", "eval_every"}
_TRAIN_SECTIONS = ("teacher_pretrain", "phase1", "student_pretrain", "phase2", "phase3")
_SECTIONS = {"corpus", "teacher", "student", "prune", "eval", *_TRAIN_SECTIONS}
_PHASE1_EXTRA = {"features", "mode", "lora_rank"}
_PRUNE_EXTRA = {"schedule", "mode"}
_PRETRAIN_EXTRA = {"objective"}
_EVAL_KEYS = {"k", "threshold", "truncate_dims"}
_REQUIRED = ("seed",)


class RunConfigError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    threshold: float = S.POSITIVE_THRESHOLD
    truncate_dims: tuple[int, ...] = ()


@dataclasses.dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    eval: EvalConfig = EvalConfig()

    @property
    def seed(self) -> int:
        return self.pipeline.seed


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    for n, raw in enumerate(text.splitlines(), 1):
        m = header.match(raw)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", raw):
            return n
    return None


class _Parser:
    def __init__(self, text: str):
        self.text = text
        try:
            self.doc = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            m = re.search(r"line (\d+)", str(e))
            line = int(m.group(1)) if m else max(1, len(text.splitlines()))
            raise RunConfigError(f"invalid TOML: {e}", line) from e

    def fail(self, msg: str, section: str | None, key: str | None = None):
        raise RunConfigError(msg, _line_of(self.text, section, key) or _line_of(self.text, section, None))

    def section(self, name: str, allowed: set[str]) -> dict:
        raw = self.doc.get(name, {})
        if not isinstance(raw, dict):
            self.fail(f"[{name}] must be a table", None, name)
        for k in raw:
            if k not in allowed:
                self.fail(f"unknown key {k!r} in [{name}]", name, k)
        return dict(raw)

    def typed(self, section: str, key: str, value: Any, kind) -> Any:
        ok = {
            int: isinstance(value, int) and not isinstance(value, bool),
            float: isinstance(value, (int, float)) and not isinstance(value, bool),
            bool: isinstance(value, bool),
            str: isinstance(value, str),
            list: isinstance(value, list),
        }[kind]
        if not ok:
            self.fail(f"{section}.{key} must be of type {kind.__name__}", section, key)
        return float(value) if kind is float else value

    def train(self, name: str, base: TR.TrainConfig, extra: set[str] = frozenset()) -> tuple[TR.TrainConfig, dict]:
        raw = self.section(name, _TRAIN_KEYS | extra)
        rest = {k: raw.pop(k) for k in list(raw) if k in extra}
        cl = base.cl
        kw = {}
        ints = ("steps", "batch_size", "hard_negatives", "eval_every")
        floats = ("peak_lr", "warmup_fraction")
        for k, v in raw.items():
            if k in ints:
                kw[k] = self.typed(name, k, v, int)
            elif k in floats:
                kw[k] = self.typed(name, k, v, float)
            elif k == "loss":
                kw[k] = self.typed(name, k, v, str)
            elif k == "grad_clip":
                kw[k] = None if v == "none" else self.typed(name, k, v, float)
            elif k == "temperature":
                cl = dataclasses.replace(cl, temperature=self.typed(name, k, v, float))
            elif k == "in_batch_negatives":
                cl = dataclasses.replace(cl, use_in_batch_negatives=self.typed(name, k, v, bool))
            elif k == "same_tower_negatives":
                cl = dataclasses.replace(cl, use_same_tower_negatives=self.typed(name, k, v, bool))
            elif k == "false_negative_margin":
                m = None if v == "none" else self.typed(name, k, v, float)
                cl = dataclasses.replace(cl, false_negative_margin=None if m is not None and math.isinf(m) else m)
        try:
            return dataclasses.replace(base, cl=cl, **kw), rest
        except ValueError as e:
            self.fail(f"[{name}] {e}", name)

    def encoder(self, name: str, base: EncoderConfig) -> EncoderConfig:
        raw = self.section(name, _ENCODER_KEYS)
        for k, v in raw.items():
            if k == "prompt_prefix":
                if not isinstance(v, list) or not all(isinstance(t, int) for t in v):
                    self.fail(f"{name}.prompt_prefix must be a list of token ids", name, k)
            elif k == "rope_base":
                raw[k] = self.typed(name, k, v, float)
            else:
                self.typed(name, k, v, int)
        try:
            return dataclasses.replace(base, **raw)
        except ConfigError as e:
            self.fail(f"[{name}] {e}", name)


def parse_run_config(text: str) -> RunConfig:
    p = _Parser(text)
    for k in p.doc:
        if k not in _SECTIONS and k not in _REQUIRED:
            p.fail(f"unknown key {k!r}", None, k) if not isinstance(p.doc[k], dict) else p.fail(
                f"unknown section [{k}]", k)
    for k in _REQUIRED:
        if k not in p.doc:
            raise RunConfigError(f"missing required key {k!r}")
    seed = p.typed("", "seed", p.doc["seed"], int)
    if seed < 0:
        p.fail("seed must be >= 0", None, "seed")

    base = PipelineConfig()
    corpus = p.section("corpus", _WORLD_KEYS | _TOPIC_KEYS)
    topic_kw, world_kw = {}, {}
    for k, v in corpus.items():
        if k in ("query_len", "doc_len"):
            if not (isinstance(v, list) and len(v) == 2 and all(isinstance(t, int) for t in v) and 1 <= v[0] <= v[1]):
                p.fail(f"corpus.{k} must be [min, max] with 1 <= min <= max", "corpus", k)
            topic_kw[k] = tuple(v)
        elif k in ("token_concentration", "mix_concentration", "general_fraction"):
            (topic_kw if k in _TOPIC_KEYS else world_kw)[k] = p.typed("corpus", k, v, float)
        else:
            (topic_kw if k in _TOPIC_KEYS else world_kw)[k] = p.typed("corpus", k, v, int)
    try:
        world = dataclasses.replace(base.world, topics=dataclasses.replace(base.world.topics, **topic_kw), **world_kw)
    except ValueError as e:
        p.fail(f"[corpus] {e}", "corpus")

    kw: dict[str, Any] = {"world": world}
    kw["teacher"] = p.encoder("teacher", base.teacher)
    kw["student"] = p.encoder("student", base.student)
    kw["teacher_pretrain"], t_extra = p.train("teacher_pretrain", base.teacher_pretrain, _PRETRAIN_EXTRA)
    kw["phase1"], extra = p.train("phase1", base.phase1, _PHASE1_EXTRA)
    if "features" in extra:
        if extra["features"] not in ("deployable", "oracle"):
            p.fail("phase1.features must be 'deployable' or 'oracle'", "phase1", "features")
        kw["teacher_features"] = extra["features"]
    if "mode" in extra:
        if extra["mode"] not in ("full", "lora"):
            p.fail("phase1.mode must be 'full' or 'lora'", "phase1", "mode")
        kw["teacher_mode"] = extra["mode"]
    if "lora_rank" in extra:
        kw["lora_rank"] = p.typed("phase1", "lora_rank", extra["lora_rank"], int)
    kw["student_pretrain"], s_extra = p.train("student_pretrain", base.student_pretrain, _PRETRAIN_EXTRA)
    objectives = {sec: ex["objective"] for sec, ex in (("teacher_pretrain", t_extra), ("student_pretrain", s_extra))
                  if "objective" in ex}
    for sec, obj in objectives.items():
        if obj not in ("views", "mlm"):
            p.fail(f"{sec}.objective must be 'views' or 'mlm'", sec, "objective")
    if len(set(objectives.values())) > 1:
        p.fail("teacher_pretrain.objective and student_pretrain.objective must agree", "student_pretrain", "objective")
    if objectives:
        kw["pretrain_objective"] = next(iter(objectives.values()))
    kw["phase2"], _ = p.train("phase2", base.phase2)
    kw["phase3"], _ = p.train("phase3", base.phase3)
    kw["prune_align"], extra = p.train("prune", base.prune_align, _PRUNE_EXTRA)
    if "schedule" in extra:
        sched = extra["schedule"]
        if not (isinstance(sched, list) and all(isinstance(t, list) and len(t) == 2
                                                and all(isinstance(x, int) for x in t) for t in sched)):
            p.fail("prune.schedule must be a list of [n_layers, ffn_dim] pairs", "prune", "schedule")
        kw["prune_schedule"] = tuple(P.PruneTarget(a, b) for a, b in sched)
        try:
            P.validate_schedule(kw["prune_schedule"])
        except P.ScheduleError as e:
            p.fail(str(e), "prune", "schedule")
    if "mode" in extra:
        if extra["mode"] not in ("top", "far_from_one"):
            p.fail("prune.mode must be 'top' or 'far_from_one'", "prune", "mode")
        kw["prune_mode"] = extra["mode"]

    ev = p.section("eval", _EVAL_KEYS)
    ekw = {}
    if "k" in ev:
        ekw["k"] = p.typed("eval", "k", ev["k"], int)
    if "threshold" in ev:
        ekw["threshold"] = p.typed("eval", "threshold", ev["threshold"], float)
    if "truncate_dims" in ev:
        dims = p.typed("eval", "truncate_dims", ev["truncate_dims"], list)
        if not all(isinstance(d, int) and d >= 1 for d in dims):
            p.fail("eval.truncate_dims must be positive integers", "eval", "truncate_dims")
        ekw["truncate_dims"] = tuple(dims)
    evc = EvalConfig(**ekw)
    kw["k"], kw["threshold"] = evc.k, evc.threshold

    pipeline = dataclasses.replace(base, **kw).with_seed(seed)
    return RunConfig(pipeline, evc)


def load_run_config(path, seed: int | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_run_config(fh.read())
    if seed is not None:
        cfg = dataclasses.replace(cfg, pipeline=cfg.pipeline.with_seed(seed))
    return cfg


def to_mapping(cfg: RunConfig) -> Mapping:
    """Plain-data view of a parsed config (for logging next to outputs)."""
    return dataclasses.asdict(cfg)
