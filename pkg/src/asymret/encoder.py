"""Tiny decoder-style transformer embedding model.

Pre-norm residual blocks (RMSNorm), grouped-query causal attention with rotary
positions, SwiGLU feed-forward, last-token pooling and a linear output head.
Weights are stored as ``[out, in]`` numpy arrays in a flat name -> array dict.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD_ID = 0
MASK_ID = 1

LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class TruncationError(InputError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    hidden_dim: int = 64
    ffn_dim: int = 128
    n_layers: int = 6
    n_query_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    embed_dim: int = 32
    max_seq_len: int = 32
    prompt_prefix: tuple[int, ...] = ()
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "prompt_prefix", tuple(int(t) for t in self.prompt_prefix))
        for name in ("vocab_size", "hidden_dim", "ffn_dim", "n_layers", "n_query_heads",
                     "n_kv_heads", "head_dim", "embed_dim", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_query_heads % self.n_kv_heads:
            raise ConfigError("n_query_heads must be a multiple of n_kv_heads")
        if self.n_query_heads * self.head_dim != self.hidden_dim:
            raise ConfigError("n_query_heads * head_dim must equal hidden_dim")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary encoding")
        if self.embed_dim > self.hidden_dim:
            raise ConfigError("embed_dim must not exceed hidden_dim")
        if len(self.prompt_prefix) >= self.max_seq_len:
            raise ConfigError("prompt_prefix leaves no room for tokens")
        if any(t < 0 or t >= self.vocab_size for t in self.prompt_prefix):
            raise ConfigError("prompt_prefix token out of vocabulary")

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prompt_prefix"] = list(self.prompt_prefix)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Closed-form shape of every weight tensor, in canonical order."""
        h, f = self.hidden_dim, self.ffn_dim
        kv = self.n_kv_heads * self.head_dim
        shapes = {"tok_emb": (self.vocab_size, h)}
        for i in range(self.n_layers):
            shapes.update({
                f"layers.{i}.attn_norm": (h,),
                f"layers.{i}.wq": (h, h),
                f"layers.{i}.wk": (kv, h),
                f"layers.{i}.wv": (kv, h),
                f"layers.{i}.wo": (h, h),
                f"layers.{i}.ffn_norm": (h,),
                f"layers.{i}.w_gate": (f, h),
                f"layers.{i}.w_up": (f, h),
                f"layers.{i}.w_down": (h, f),
            })
        shapes["final_norm"] = (h,)
        shapes["out_proj"] = (self.embed_dim, h)
        return shapes


def student_config(**overrides) -> EncoderConfig:
    return EncoderConfig(**overrides)


def teacher_config(**overrides) -> EncoderConfig:
    base = dict(hidden_dim=96, ffn_dim=192, n_layers=8, n_query_heads=6, n_kv_heads=2, head_dim=16)
    base.update(overrides)
    return EncoderConfig(**base)


@dataclass
class LoraAdapter:
    """Low-rank update ``(alpha / r) * B @ A`` for one weight matrix."""

    A: np.ndarray  # [r, in]
    B: np.ndarray  # [out, r]
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


@dataclass
class LayerRecord:
    h_in: np.ndarray
    h_out: np.ndarray
    ffn_in: np.ndarray | None = None


@dataclass
class EncoderOutput:
    pooled: Tensor
    lengths: np.ndarray
    trace: list[LayerRecord] = field(default_factory=list)


def apply_prompt(tokens: Sequence[int], config: EncoderConfig) -> list[int]:
    """Prepend the configured prompt prefix (identity when none is set)."""
    out = list(config.prompt_prefix) + list(tokens)
    if len(out) > config.max_seq_len:
        raise TruncationError(
            f"prompt + query has {len(out)} tokens, max_seq_len is {config.max_seq_len}")
    return out


def pad_batch(seqs: Sequence[Sequence[int]], config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a ragged batch.  Causal attention keeps padding invisible."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if len(seqs) == 0:
        raise InputError("empty batch")
    if lengths.min() < 1:
        raise InputError("empty token sequence")
    if lengths.max() > config.max_seq_len:
        raise TruncationError(f"sequence of length {lengths.max()} exceeds max_seq_len {config.max_seq_len}")
    ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError("token id outside vocabulary")
    return ids, lengths


def _as_batch(tokens) -> tuple[list, bool]:
    if len(tokens) and np.isscalar(tokens[0]):
        return [list(tokens)], True
    return list(tokens), False


@lru_cache(maxsize=64)
def _rope_tables(length: int, head_dim: int, base: float, dtype_name: str):
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(length, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype_name), np.sin(ang).astype(dtype_name)


@lru_cache(maxsize=64)
def _causal_bias(length: int, dtype_name: str) -> np.ndarray:
    bias = np.zeros((length, length), dtype=dtype_name)
    bias[np.triu_indices(length, 1)] = -np.inf
    return bias


class Encoder:
    """Parameter container plus the forward pass."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.check_shapes()

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        depth_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
        params = {}
        for name, shape in config.param_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm"):
                w = np.ones(shape)
            elif leaf == "tok_emb":
                w = rng.normal(0.0, 1.0, shape)
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
                if leaf in ("wo", "w_down"):
                    w *= depth_scale
            params[name] = w.astype(np.float32)
        return cls(config, params)

    def check_shapes(self) -> None:
        expected = self.config.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ParameterError(f"weight names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ParameterError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, trainable: Iterable[str] = ()) -> dict[str, Tensor]:
        """Wrap weights as leaf tensors; names in ``trainable`` record gradients."""
        trainable = set(trainable)
        dtype = T.get_default_dtype()
        return {k: Tensor(v, requires_grad=k in trainable, dtype=dtype) for k, v in self.params.items()}

    # ------------------------------------------------------------------ forward

    def forward(
        self,
        tokens,
        params: Mapping[str, Tensor] | None = None,
        adapters: Mapping[str, LoraAdapter] | Mapping[str, tuple[Tensor, Tensor, float]] | None = None,
        trace: bool = False,
    ) -> EncoderOutput:
        cfg = self.config
        seqs, _ = _as_batch(tokens)
        ids, lengths = pad_batch(seqs, cfg)
        p = params if params is not None else self.tensors()
        bsz, length = ids.shape
        hd, nkv = cfg.head_dim, cfg.n_kv_heads
        group = cfg.n_query_heads // nkv
        dtype_name = np.dtype(T.get_default_dtype()).name
        cos, sin = _rope_tables(length, hd, cfg.rope_base, dtype_name)
        bias = _causal_bias(length, dtype_name)
        scale = 1.0 / math.sqrt(hd)

        def weight(name: str) -> Tensor:
            w = p[name]
            if adapters and name in adapters:
                ad = adapters[name]
                if isinstance(ad, LoraAdapter):
                    a, b, s = Tensor(ad.A), Tensor(ad.B), ad.scale
                else:
                    a, b, s = ad
                w = w + T.matmul(b, a) * s
            return w

        records = []
        h = T.embedding(p["tok_emb"], ids)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            h_in = h
            a = T.rms_norm(h, p[pre + "attn_norm"])
            q = T.linear(a, weight(pre + "wq")).reshape(bsz, length, nkv, group, hd)
            q = T.transpose(q, (0, 2, 3, 1, 4))
            k = T.linear(a, weight(pre + "wk")).reshape(bsz, length, nkv, 1, hd)
            k = T.transpose(k, (0, 2, 3, 1, 4))
            v = T.linear(a, weight(pre + "wv")).reshape(bsz, length, nkv, 1, hd)
            v = T.transpose(v, (0, 2, 3, 1, 4))
            q = T.rotary(q, cos, sin)
            k = T.rotary(k, cos, sin)
            att = T.attention(q, k, v, bias, scale)  # [B, nkv, group, T, hd]
            att = T.transpose(att, (0, 3, 1, 2, 4)).reshape(bsz, length, cfg.hidden_dim)
            h = h + T.linear(att, weight(pre + "wo"))
            f = T.rms_norm(h, p[pre + "ffn_norm"])
            gated = T.swiglu(T.linear(f, weight(pre + "w_gate")), T.linear(f, weight(pre + "w_up")))
            h = h + T.linear(gated, weight(pre + "w_down"), wide_accumulate=True)
            if trace:
                records.append(LayerRecord(h_in.data, h.data, f.data))
        last = h[np.arange(bsz), lengths - 1]
        pooled = T.rms_norm(last, p["final_norm"])
        return EncoderOutput(pooled=pooled, lengths=lengths, trace=records)

    def project(self, pooled: Tensor, params: Mapping[str, Tensor] | None = None,
                truncate_dim: int | None = None) -> Tensor:
        p = params if params is not None else self.tensors()
        z = T.linear(pooled, p["out_proj"])
        if truncate_dim is not None:
            if truncate_dim < 1:
                raise ParameterError("truncate_dim must be >= 1")
            if truncate_dim > self.config.embed_dim:
                raise ParameterError(f"truncate_dim {truncate_dim} > embed_dim {self.config.embed_dim}")
            z = z[..., :truncate_dim]
        return T.l2_normalize(z)

    def embed(self, tokens, truncate_dim: int | None = None,
              params: Mapping[str, Tensor] | None = None, adapters=None) -> Tensor:
        """Unit-norm embeddings ``[B, dim]`` (or ``[dim]`` for one flat sequence)."""
        _, single = _as_batch(tokens)
        if truncate_dim is not None and truncate_dim < 1:
            raise ParameterError("truncate_dim must be >= 1")
        out = self.forward(tokens, params=params, adapters=adapters)
        emb = self.project(out.pooled, params, truncate_dim)
        return emb[0] if single else emb

    def encode(self, seqs: Sequence[Sequence[int]], batch_size: int = 256,
               truncate_dim: int | None = None) -> np.ndarray:
        """Gradient-free batched embedding of many sequences, in input order."""
        chunks = []
        with T.no_grad():
            for s in range(0, len(seqs), batch_size):
                chunks.append(self.embed(list(seqs[s : s + batch_size]), truncate_dim).data)
        return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------- LoRA


def init_lora(encoder: Encoder, rank: int, alpha: float | None = None,
              targets: Sequence[str] = LINEAR_NAMES, seed: int = 0) -> dict[str, LoraAdapter]:
    """Fresh adapters (A random, B zero) on the named linear maps of every layer."""
    rng = np.random.default_rng(seed)
    alpha = 2.0 * rank if alpha is None else alpha
    out = {}
    for name, w in encoder.params.items():
        if name.rsplit(".", 1)[-1] in targets:
            n_out, n_in = w.shape
            a = rng.normal(0.0, 1.0 / np.sqrt(n_in), (rank, n_in)).astype(np.float32)
            out[name] = LoraAdapter(A=a, B=np.zeros((n_out, rank), np.float32), alpha=alpha)
    return out


def _check_adapter(name: str, w: np.ndarray, ad: LoraAdapter) -> None:
    if ad.A.ndim != 2 or ad.B.ndim != 2 or ad.B.shape[1] != ad.A.shape[0]:
        raise ParameterError(f"{name}: adapter factors are not conformable")
    if (ad.B.shape[0], ad.A.shape[1]) != w.shape:
        raise ParameterError(f"{name}: adapter delta {(ad.B.shape[0], ad.A.shape[1])} != weight {w.shape}")


def merge_lora(params: Mapping[str, np.ndarray], adapters: Mapping[str, LoraAdapter]) -> dict[str, np.ndarray]:
    """Return new weights with every adapter folded in: ``W + (alpha/r) B A``."""
    out = dict(params)
    for name, ad in adapters.items():
        if name not in params:
            raise ParameterError(f"adapter targets unknown weight {name}")
        _check_adapter(name, params[name], ad)
        out[name] = (params[name] + ad.delta()).astype(params[name].dtype)
    return out


def unmerge_lora(params: Mapping[str, np.ndarray], adapters: Mapping[str, LoraAdapter]) -> dict[str, np.ndarray]:
    out = dict(params)
    for name, ad in adapters.items():
        _check_adapter(name, params[name], ad)
        out[name] = (params[name] - ad.delta()).astype(params[name].dtype)
    return out
