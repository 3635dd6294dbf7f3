"""Optimizer, learning-rate schedule and the training phases.

Phase 1 trains a dual-encoder teacher contrastively, phase 2 regresses a
compact query encoder onto the frozen teacher query embeddings, and phase 3
refines that student contrastively against the frozen teacher document tower.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .encoder import MASK_ID, Encoder, LoraAdapter, apply_prompt, init_lora, merge_lora
from .synthgen import AlignmentCorpus, Item, SupervisedPair, SyntheticCorpus, keyed_rng, oracle_features

log = logging.getLogger(__name__)

LOSSES = ("qwen", "infonce")


class FrozenTowerError(RuntimeError):
    """A tower marked frozen was about to be modified."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.10
    seed: int = 0
    loss: str = "qwen"
    cl: L.CLConfig = L.CLConfig()
    hard_negatives: int = 1
    grad_clip: float | None = 1.0
    eval_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from zero to the peak, then linear decay to zero."""
    total = cfg.steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return 0.0
    warm = min(int(round(cfg.warmup_fraction * total)), total - 1)
    if warm > 0 and step <= warm:
        return cfg.peak_lr * step / warm
    return cfg.peak_lr * (total - step) / (total - warm)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray | None], lr: float) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_gradients(grads: dict[str, np.ndarray | None], max_norm: float | None) -> float:
    sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None)
    norm = float(np.sqrt(sq))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


def weights_digest(enc: Encoder) -> str:
    h = hashlib.sha256()
    for name in sorted(enc.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(enc.params[name]).tobytes())
    return h.hexdigest()


def batch_indices(n: int, batch_size: int, seed: int, stream: int = 0) -> Iterator[np.ndarray]:
    """Endless full batches; the order is reshuffled once per epoch from the seed."""
    if n == 0:
        raise ValueError("no training examples")
    b = min(batch_size, n)
    epoch = 0
    while True:
        perm = keyed_rng(seed, 1000 + stream, epoch).permutation(n)
        for s in range(0, n - b + 1, b):
            yield perm[s : s + b]
        epoch += 1


class Tower:
    """Trainable view of an encoder: full fine-tuning, LoRA, or frozen."""

    def __init__(self, encoder: Encoder, mode: str = "full", lora_rank: int = 8,
                 lora_alpha: float | None = None, seed: int = 0):
        if mode not in ("full", "lora", "frozen"):
            raise ValueError(f"unknown tower mode {mode!r}")
        self.encoder = encoder
        self.mode = mode
        self.adapters: dict[str, LoraAdapter] = {}
        if mode == "lora":
            self.adapters = init_lora(encoder, lora_rank, lora_alpha, seed=seed)
        self._params: dict[str, T.Tensor] = {}
        self._adapter_leaves: dict[str, tuple[T.Tensor, T.Tensor, float]] = {}

    def leaves(self):
        """Fresh leaf tensors for one step; returns (params, adapters)."""
        if self.mode == "full":
            self._params = self.encoder.tensors(trainable=self.encoder.params)
        else:
            self._params = self.encoder.tensors()
        self._adapter_leaves = {
            name: (T.Tensor(ad.A, requires_grad=True), T.Tensor(ad.B, requires_grad=True), ad.scale)
            for name, ad in self.adapters.items()
        }
        return self._params, (self._adapter_leaves or None)

    def arrays(self) -> dict[str, np.ndarray]:
        if self.mode == "frozen":
            return {}
        if self.mode == "full":
            return dict(self.encoder.params)
        out = {}
        for name, ad in self.adapters.items():
            out[name + ".lora_A"] = ad.A
            out[name + ".lora_B"] = ad.B
        return out

    def grads(self) -> dict[str, np.ndarray | None]:
        if self.mode == "frozen":
            touched = [k for k, t in self._params.items() if t.grad is not None]
            if touched:
                raise FrozenTowerError(f"frozen tower received gradients for {touched[:3]}")
            return {}
        if self.mode == "full":
            return {k: t.grad for k, t in self._params.items()}
        out = {}
        for name, (a, b, _) in self._adapter_leaves.items():
            out[name + ".lora_A"] = a.grad
            out[name + ".lora_B"] = b.grad
        return out

    def finalize(self) -> Encoder:
        if self.mode == "lora":
            return Encoder(self.encoder.config, merge_lora(self.encoder.params, self.adapters))
        return self.encoder

    def embed(self, seqs, truncate_dim=None) -> T.Tensor:
        params, adapters = self._params, self._adapter_leaves or None
        return self.encoder.embed(seqs, truncate_dim, params=params, adapters=adapters)


@dataclass
class PhaseOutput:
    query: Encoder
    doc: Encoder | None
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    snapshots: list[tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        if not self.losses:
            return float("nan")
        tail = self.losses[-max(1, len(self.losses) // 10):]
        return float(np.mean(tail))


def _optimize(towers: Mapping[str, Tower], cfg: TrainConfig, batches: Iterator[np.ndarray],
              loss_fn: Callable[[np.ndarray], T.Tensor], evaluate: Callable[[], float] | None = None,
              out: PhaseOutput | None = None) -> PhaseOutput:
    out = out or PhaseOutput(None, None)
    state = OptimizerState()
    arrays = {f"{tn}/{k}": v for tn, tw in towers.items() for k, v in tw.arrays().items()}
    for step in range(cfg.steps):
        idx = next(batches)
        with T.GradTape() as tape:
            for tw in towers.values():
                tw.leaves()
            loss = loss_fn(idx)
            tape.backward(loss)
        grads = {f"{tn}/{k}": g for tn, tw in towers.items() for k, g in tw.grads().items()}
        val = float(loss.data)
        if not np.isfinite(val):
            raise T.NumericError(f"non-finite loss at step {step}")
        clip_gradients(grads, cfg.grad_clip)
        lr = lr_at(step + 1, cfg)
        adam_step(state, arrays, grads, lr)
        out.losses.append(val)
        out.lrs.append(lr)
        if evaluate is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            out.snapshots.append((step + 1, evaluate()))
    return out


# ------------------------------------------------------------------ inputs


def query_inputs(items: Sequence[Item], config, features: str = "deployable", model=None,
                 oracle_factor: float = 2.0) -> list[list[int]]:
    """Encoder-ready query sequences: optional oracle expansion, then the prompt."""
    if features not in ("deployable", "oracle"):
        raise ValueError(f"unknown feature set {features!r}")
    out = []
    for it in items:
        toks = oracle_features(it, model, oracle_factor) if features == "oracle" else it.tokens
        out.append(apply_prompt(toks, config))
    return out


def _hard_negative_slots(pairs: Sequence[SupervisedPair], idx: np.ndarray, h: int):
    ids = np.zeros((len(idx), h), dtype=np.int64)
    valid = np.zeros((len(idx), h), dtype=bool)
    for r, i in enumerate(idx):
        negs = pairs[i].hard_negative_ids[:h]
        ids[r, : len(negs)] = negs
        ids[r, len(negs):] = pairs[i].positive_id
        valid[r, : len(negs)] = True
    return ids, valid


def _contrastive(q: T.Tensor, pos: T.Tensor, hard: T.Tensor | None, valid, cfg: TrainConfig) -> T.Tensor:
    if cfg.loss == "infonce":
        return L.info_nce_loss(q, pos, cfg.cl.temperature)
    return L.qwen_cl_loss(q, pos, hard, cfg.cl, valid)


# ------------------------------------------------------------------ phases


def train_dual_encoder(
    corpus: SyntheticCorpus,
    pairs: Sequence[SupervisedPair],
    query_encoder: Encoder,
    doc_encoder: Encoder,
    cfg: TrainConfig,
    mode: str = "full",
    lora_rank: int = 8,
    features: str = "deployable",
    evaluate: Callable[[Encoder, Encoder], float] | None = None,
) -> PhaseOutput:
    """Joint contrastive training of a query tower and a document tower."""
    if query_encoder.config.embed_dim != doc_encoder.config.embed_dim:
        raise ValueError("query and document towers must share embed_dim")
    q_tower = Tower(query_encoder.copy(), mode, lora_rank, seed=cfg.seed)
    d_tower = Tower(doc_encoder.copy(), mode, lora_rank, seed=cfg.seed + 1)
    q_seqs = query_inputs([corpus.train_queries[p.query_id] for p in pairs], query_encoder.config,
                          features, corpus.model)
    docs = corpus.doc_tokens()
    h = cfg.hard_negatives if cfg.loss == "qwen" else 0
    b = min(cfg.batch_size, len(pairs))

    def loss_fn(idx):
        qs = [q_seqs[i] for i in idx]
        pos_ids = [pairs[i].positive_id for i in idx]
        neg_ids, valid = _hard_negative_slots(pairs, idx, h)
        d_emb = d_tower.embed([docs[j] for j in pos_ids] + [docs[j] for j in neg_ids.reshape(-1)])
        q_emb = q_tower.embed(qs)
        pos = d_emb[:b]
        hard = d_emb[b:].reshape(b, h, -1) if h else None
        return _contrastive(q_emb, pos, hard, valid, cfg)

    ev = None
    if evaluate is not None:
        ev = lambda: evaluate(q_tower.finalize(), d_tower.finalize())  # noqa: E731
    out = _optimize({"q": q_tower, "d": d_tower}, cfg, batch_indices(len(pairs), b, cfg.seed), loss_fn, ev)
    out.query, out.doc = q_tower.finalize(), d_tower.finalize()
    return out


def train_teacher(corpus, pairs, query_encoder, doc_encoder, cfg, mode="full", lora_rank=8,
                  features="deployable", evaluate=None) -> PhaseOutput:
    """Phase 1: symmetric-capacity teacher; ``features="oracle"`` expands queries."""
    return train_dual_encoder(corpus, pairs, query_encoder, doc_encoder, cfg, mode, lora_rank, features, evaluate)


def one_shot_asymmetric(corpus, pairs, student_query, big_doc, cfg, evaluate=None) -> PhaseOutput:
    """Baseline: compact query tower and large document tower trained jointly from init."""
    return train_dual_encoder(corpus, pairs, student_query, big_doc, cfg, "full", features="deployable",
                              evaluate=evaluate)


def teacher_targets(teacher_query: Encoder, items: Sequence[Item], features: str = "deployable",
                    model=None) -> np.ndarray:
    """Frozen teacher query embeddings (teacher keeps its prompt and features)."""
    return teacher_query.encode(query_inputs(items, teacher_query.config, features, model))


def align_student(
    student: Encoder,
    targets: np.ndarray,
    corpus: AlignmentCorpus,
    cfg: TrainConfig,
    evaluate: Callable[[Encoder], float] | None = None,
) -> PhaseOutput:
    """Phase 2: minimize the mean per-item squared distance to teacher embeddings.

    Student inputs never carry a prompt; ``targets[i]`` is the frozen teacher
    embedding of ``corpus.items[i]``.
    """
    if targets.shape != (len(corpus), student.config.embed_dim):
        raise ValueError(f"targets {targets.shape} do not match corpus size / student embed_dim")
    tower = Tower(student.copy(), "full")
    seqs = corpus.sequences
    b = min(cfg.batch_size, len(seqs))

    def loss_fn(idx):
        emb = tower.embed([seqs[i] for i in idx])
        return L.l2_align_loss(emb, T.Tensor(targets[idx])) * (1.0 / len(idx))

    ev = (lambda: evaluate(tower.encoder)) if evaluate is not None else None
    out = _optimize({"s": tower}, cfg, batch_indices(len(seqs), b, cfg.seed, stream=1), loss_fn, ev)
    out.query = tower.encoder
    return out


def align_student_kl(student: Encoder, teacher_q_emb: np.ndarray, doc_emb: np.ndarray,
                     corpus: SyntheticCorpus, pairs: Sequence[SupervisedPair], cfg: TrainConfig,
                     kl: L.KLConfig = L.KLConfig()) -> PhaseOutput:
    """Alternative phase 2: match teacher score distributions over in-batch positives.

    ``teacher_q_emb[i]`` is the teacher embedding of ``pairs[i]``'s query and
    ``doc_emb`` the frozen document index (rows by document id).
    """
    tower = Tower(student.copy(), "full")
    seqs = [corpus.train_queries[p.query_id].tokens for p in pairs]
    pos = np.array([p.positive_id for p in pairs])
    b = min(cfg.batch_size, len(pairs))

    def loss_fn(idx):
        emb = tower.embed([seqs[i] for i in idx])
        return L.kl_distill_loss(emb, teacher_q_emb[idx], doc_emb[pos[idx]], kl)

    out = _optimize({"s": tower}, cfg, batch_indices(len(pairs), b, cfg.seed, stream=2), loss_fn)
    out.query = tower.encoder
    return out


def align_student_kuea(student: Encoder, targets: np.ndarray, corpus: AlignmentCorpus, cfg: TrainConfig,
                       kernel: L.KernelConfig = L.KernelConfig()) -> PhaseOutput:
    """Alternative phase 2: match pairwise polynomial-kernel structure (rotation-blind)."""
    tower = Tower(student.copy(), "full")
    seqs = corpus.sequences
    b = min(cfg.batch_size, len(seqs))

    def loss_fn(idx):
        return L.kuea_loss(tower.embed([seqs[i] for i in idx]), targets[idx], kernel)

    out = _optimize({"s": tower}, cfg, batch_indices(len(seqs), b, cfg.seed, stream=3), loss_fn)
    out.query = tower.encoder
    return out


def contrastive_refine(
    student: Encoder,
    doc_encoder: Encoder,
    corpus: SyntheticCorpus,
    pairs: Sequence[SupervisedPair],
    cfg: TrainConfig,
    doc_emb: np.ndarray | None = None,
    evaluate: Callable[[Encoder], float] | None = None,
) -> PhaseOutput:
    """Phase 3: contrastive training of the student against a frozen document tower."""
    digest = weights_digest(doc_encoder)
    if doc_emb is None:
        doc_emb = doc_encoder.encode(corpus.doc_tokens())
    if doc_emb.shape[1] != student.config.embed_dim:
        raise ValueError("student embed_dim differs from the frozen document index")
    tower = Tower(student.copy(), "full")
    q_seqs = query_inputs([corpus.train_queries[p.query_id] for p in pairs], student.config)
    h = cfg.hard_negatives if cfg.loss == "qwen" else 0
    b = min(cfg.batch_size, len(pairs))

    def loss_fn(idx):
        q_emb = tower.embed([q_seqs[i] for i in idx])
        pos = T.Tensor(doc_emb[[pairs[i].positive_id for i in idx]])
        neg_ids, valid = _hard_negative_slots(pairs, idx, h)
        hard = T.Tensor(doc_emb[neg_ids]) if h else None
        return _contrastive(q_emb, pos, hard, valid, cfg)

    ev = (lambda: evaluate(tower.encoder)) if evaluate is not None else None
    out = _optimize({"s": tower}, cfg, batch_indices(len(pairs), b, cfg.seed, stream=4), loss_fn, ev)
    if weights_digest(doc_encoder) != digest:
        raise FrozenTowerError("document tower changed during refinement")
    out.query, out.doc = tower.encoder, doc_encoder
    return out


class _Bias:
    """Throwaway output bias for the warm-up head; it soaks up token frequencies
    so the pooled state does not have to."""

    def __init__(self, n: int):
        self.value = np.zeros(n, dtype=np.float32)
        self.leaf = None

    def leaves(self):
        self.leaf = T.Tensor(self.value, requires_grad=True)

    def arrays(self):
        return {"bias": self.value}

    def grads(self):
        return {"bias": self.leaf.grad}


def pretrain_mlm(encoder: Encoder, seqs: Sequence[Sequence[int]], cfg: TrainConfig,
                 mask_fraction: float = 0.25) -> PhaseOutput:
    """Warm-up by masked-token prediction from the pooled state.

    A quarter of each sequence (at least one token) is replaced by the mask
    token; the final pooled state predicts the masked tokens through the tied
    token-embedding table.
    """
    tower = Tower(encoder.copy(), "full")
    head = _Bias(encoder.config.vocab_size)
    b = min(cfg.batch_size, len(seqs))

    def loss_fn(idx):
        rng = keyed_rng(cfg.seed, 77, int(idx[0]) * 7919 + len(idx))
        inputs, targets, owners = [], [], []
        for r, i in enumerate(idx):
            s = list(seqs[i])
            k = max(1, int(round(mask_fraction * len(s))))
            pos = rng.choice(len(s), size=k, replace=False)
            for p in pos:
                targets.append(s[p])
                owners.append(r)
                s[p] = MASK_ID
            inputs.append(s)
        params = tower._params
        out = tower.encoder.forward(inputs, params=params)
        logits = T.matmul(out.pooled, params["tok_emb"].T) + head.leaf
        logp = T.log_softmax(logits)
        return -(logp[np.array(owners), np.array(targets)].mean())

    res = _optimize({"s": tower, "head": head}, cfg, batch_indices(len(seqs), b, cfg.seed, stream=5), loss_fn)
    res.query = tower.encoder
    return res


def pretrain_views(encoder: Encoder, seqs: Sequence[Sequence[int]], cfg: TrainConfig,
                   keep_fraction: float = 0.7) -> PhaseOutput:
    """Warm-up by matching two random token subsets of the same text.

    Each view keeps ``keep_fraction`` of the tokens in order (at least one);
    views of the same text are positives and the rest of the batch are
    negatives under vanilla InfoNCE.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    tower = Tower(encoder.copy(), "full")
    b = min(cfg.batch_size, len(seqs))

    def view(rng, s):
        k = max(1, int(round(keep_fraction * len(s))))
        return [s[j] for j in sorted(rng.choice(len(s), size=k, replace=False))]

    def loss_fn(idx):
        rng = keyed_rng(cfg.seed, 78, int(idx[0]) * 7919 + len(idx))
        a = [view(rng, list(seqs[i])) for i in idx]
        c = [view(rng, list(seqs[i])) for i in idx]
        emb = tower.embed(a + c)
        return L.info_nce_loss(emb[: len(idx)], emb[len(idx):], cfg.cl.temperature)

    res = _optimize({"s": tower}, cfg, batch_indices(len(seqs), b, cfg.seed, stream=6), loss_fn)
    res.query = tower.encoder
    return res
