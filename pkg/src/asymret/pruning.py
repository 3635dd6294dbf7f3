"""Structured depth/width pruning driven by calibration statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder

log = logging.getLogger(__name__)

CALIBRATION_SIZE = 512


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class PruneTarget:
    n_layers: int
    ffn_dim: int


@dataclass
class ImportanceScores:
    layer_scores: np.ndarray  # [L] on the unpruned encoder
    retained_layers: list[int]  # original indices, ascending
    ffn_scores: np.ndarray  # [len(retained_layers), ffn_dim] after layer removal


@dataclass
class StageReport:
    target: PruneTarget
    importance: ImportanceScores
    align_losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    encoder: Encoder | None = field(default=None, repr=False)


def validate_schedule(schedule: Sequence[PruneTarget], encoder: Encoder | None = None) -> None:
    prev_l = encoder.config.n_layers if encoder else None
    prev_f = encoder.config.ffn_dim if encoder else None
    for t in schedule:
        if t.n_layers < 1 or t.ffn_dim < 1:
            raise ScheduleError(f"prune target {t} must be positive")
        if prev_l is not None and (t.n_layers > prev_l or t.ffn_dim > prev_f):
            raise ScheduleError(f"prune schedule must be nonincreasing; {t} follows ({prev_l}, {prev_f})")
        prev_l, prev_f = t.n_layers, t.ffn_dim


def _calibration_batches(calibration: Sequence[Sequence[int]], batch_size: int):
    if len(calibration) == 0:
        raise ValueError("calibration corpus is empty")
    for s in range(0, len(calibration), batch_size):
        yield list(calibration[s : s + batch_size])


def _valid_positions(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < lengths[:, None]


def layer_importance(encoder: Encoder, calibration: Sequence[Sequence[int]], batch_size: int = 128) -> np.ndarray:
    """Mean over calibration tokens of ||h_out|| / ||h_in|| for every layer."""
    total = np.zeros(encoder.config.n_layers)
    count = 0
    with T.no_grad():
        for batch in _calibration_batches(calibration, batch_size):
            out = encoder.forward(batch, trace=True)
            valid = _valid_positions(out.lengths, out.trace[0].h_in.shape[1])
            count += int(valid.sum())
            for i, rec in enumerate(out.trace):
                n_in = np.linalg.norm(rec.h_in.astype(np.float64), axis=-1)[valid]
                n_out = np.linalg.norm(rec.h_out.astype(np.float64), axis=-1)[valid]
                if np.any(n_in == 0):
                    raise T.NumericError(f"zero hidden state entering layer {i}")
                total[i] += (n_out / n_in).sum()
    return total / count


def ffn_importance(encoder: Encoder, calibration: Sequence[Sequence[int]], batch_size: int = 128) -> np.ndarray:
    """Mean over calibration tokens of |SiLU(W_g h)_j * (W_u h)_j| per layer and unit."""
    cfg = encoder.config
    total = np.zeros((cfg.n_layers, cfg.ffn_dim))
    count = 0
    with T.no_grad():
        for batch in _calibration_batches(calibration, batch_size):
            out = encoder.forward(batch, trace=True)
            valid = _valid_positions(out.lengths, out.trace[0].h_in.shape[1])
            count += int(valid.sum())
            for i, rec in enumerate(out.trace):
                h = rec.ffn_in[valid].astype(np.float64)
                g = h @ encoder.params[f"layers.{i}.w_gate"].T.astype(np.float64)
                u = h @ encoder.params[f"layers.{i}.w_up"].T.astype(np.float64)
                total[i] += np.abs(g * T._sigmoid(g) * u).sum(axis=0)
    return total / count


def _rank_top(scores: np.ndarray, k: int) -> list[int]:
    # descending score, lower index first on ties
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return sorted(int(i) for i in order[:k])


def select_layers(layer_scores: np.ndarray, k: int, mode: str = "top") -> list[int]:
    """Indices of the layers to keep, in original order.

    ``mode="top"`` keeps the k largest ratios; ``mode="far_from_one"`` keeps the
    k layers whose ratio deviates most from 1.
    """
    if mode == "top":
        return _rank_top(layer_scores, k)
    if mode == "far_from_one":
        return _rank_top(np.abs(np.asarray(layer_scores) - 1.0), k)
    raise ValueError(f"unknown layer ranking mode {mode!r}")


def select_units(unit_scores: np.ndarray, k: int) -> list[int]:
    return _rank_top(unit_scores, k)


def drop_layers(encoder: Encoder, keep: Sequence[int]) -> Encoder:
    cfg = encoder.config
    params = {"tok_emb": encoder.params["tok_emb"].copy()}
    for new, old in enumerate(keep):
        for name, w in encoder.params.items():
            if name.startswith(f"layers.{old}."):
                params[f"layers.{new}." + name.split(".", 2)[2]] = w.copy()
    params["final_norm"] = encoder.params["final_norm"].copy()
    params["out_proj"] = encoder.params["out_proj"].copy()
    return Encoder(cfg.replace(n_layers=len(keep)), params)


def shrink_ffn(encoder: Encoder, keep_units: Sequence[Sequence[int]]) -> Encoder:
    """Keep the listed FFN units per layer: rows of W_g, W_u and columns of W_d."""
    widths = {len(k) for k in keep_units}
    if len(widths) != 1 or len(keep_units) != encoder.config.n_layers:
        raise ValueError("every layer must keep the same number of FFN units")
    params = {k: v.copy() for k, v in encoder.params.items()}
    for i, units in enumerate(keep_units):
        idx = np.asarray(units, dtype=np.int64)
        params[f"layers.{i}.w_gate"] = np.ascontiguousarray(params[f"layers.{i}.w_gate"][idx])
        params[f"layers.{i}.w_up"] = np.ascontiguousarray(params[f"layers.{i}.w_up"][idx])
        params[f"layers.{i}.w_down"] = np.ascontiguousarray(params[f"layers.{i}.w_down"][:, idx])
    return Encoder(encoder.config.replace(ffn_dim=widths.pop()), params)


def compute_importance(encoder: Encoder, target: PruneTarget, calibration: Sequence[Sequence[int]],
                       mode: str = "top") -> ImportanceScores:
    """Layer scores on the given encoder, then FFN scores after layer removal."""
    if not 1 <= target.n_layers <= encoder.config.n_layers:
        raise ScheduleError(f"K_L={target.n_layers} outside [1, {encoder.config.n_layers}]")
    if not 1 <= target.ffn_dim <= encoder.config.ffn_dim:
        raise ScheduleError(f"K_F={target.ffn_dim} outside [1, {encoder.config.ffn_dim}]")
    layer_scores = layer_importance(encoder, calibration)
    keep = select_layers(layer_scores, target.n_layers, mode)
    ffn_scores = ffn_importance(drop_layers(encoder, keep), calibration)
    return ImportanceScores(layer_scores, keep, ffn_scores)


def prune(encoder: Encoder, target: PruneTarget, scores: ImportanceScores) -> Encoder:
    """Dense surgery: keep ``scores.retained_layers`` and the top-K_F units of each."""
    if len(scores.retained_layers) != target.n_layers:
        raise ValueError("scores were computed for a different layer target")
    if len(scores.layer_scores) != encoder.config.n_layers:
        raise ValueError("scores were computed on a different encoder")
    shallow = drop_layers(encoder, scores.retained_layers)
    units = [select_units(row, target.ffn_dim) for row in scores.ffn_scores]
    return shrink_ffn(shallow, units)


def structured_prune(encoder: Encoder, target: PruneTarget, calibration: Sequence[Sequence[int]],
                     mode: str = "top") -> tuple[Encoder, ImportanceScores]:
    scores = compute_importance(encoder, target, calibration, mode)
    return prune(encoder, target, scores), scores


def progressive_prune_align(
    student: Encoder,
    schedule: Sequence[PruneTarget],
    calibration: Sequence[Sequence[int]],
    realign: Callable[[Encoder, int], tuple[Encoder, list[float]]],
    evaluate: Callable[[Encoder], dict] | None = None,
    mode: str = "top",
) -> tuple[Encoder, list[StageReport]]:
    """Alternate pruning and re-alignment along a nonincreasing schedule.

    ``realign(encoder, stage_index)`` runs the alignment objective and returns
    the updated encoder with its loss trajectory.
    """
    validate_schedule(schedule, student)
    current = student
    reports = []
    for r, target in enumerate(schedule):
        current, scores = structured_prune(current, target, calibration, mode)
        current, losses = realign(current, r)
        rep = StageReport(target, scores, losses, encoder=current)
        if evaluate is not None:
            rep.metrics = evaluate(current)
        log.info("stage %d -> %s layers / %s ffn, final align loss %.4f", r, target.n_layers,
                 target.ffn_dim, losses[-1] if losses else float("nan"))
        reports.append(rep)
    return current, reports


def write_prune_report(reports: Sequence[StageReport], fh) -> None:
    """CSV: one block of rows per stage (layer scores, retained sets, loss curve)."""
    fh.write("stage,kind,index,value\n")
    for r, rep in enumerate(reports):
        for i, s in enumerate(rep.importance.layer_scores):
            fh.write(f"{r},layer_score,{i},{s:.10g}\n")
        for i in rep.importance.retained_layers:
            fh.write(f"{r},retained_layer,{i},1\n")
        for i, v in enumerate(rep.align_losses):
            fh.write(f"{r},align_loss,{i},{v:.10g}\n")
        for k, v in sorted(rep.metrics.items()):
            fh.write(f"{r},metric:{k},0,{v:.10g}\n")
