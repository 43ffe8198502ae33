"""Training loop, checkpointing and posterior fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import TrainingError
from .dataset import BalancedSampler, ClipRecord, label_matrix, split_by_hash, unbalanced_iter
from .evaluation import TaggingScores, score_tagging, tag_clip
from .features import FeatureChunk, NormStats, load_features, normalize
from .model import (Checkpoint, ModelConfig, ModelParams, ModelRuntimeError, forward, init_params,
                    load_checkpoint, predict, save_checkpoint)

logger = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 10
    lr: float = 0.001
    seed: int = 0
    task_mode: str = "tagging"
    pool: str = "attention"
    checkpoint_every: int = 1
    balance: bool = True
    val_fraction: float = 0.1
    filters: int = 64
    hidden: int = 128
    n_blocks: int = 3
    theta: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def model_config(self, n_classes: int, n_frames: int, n_freq: int) -> ModelConfig:
        return ModelConfig(n_classes=n_classes, n_frames=n_frames, n_freq=n_freq,
                           n_blocks=self.n_blocks, filters=self.filters, hidden=self.hidden,
                           task_mode=self.task_mode, pool=self.pool)


@dataclass
class RunLog:
    entries: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def format(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                                  for k, v in e.items()))
        return "".join(line + "\n" for line in lines)

    def save(self, path) -> None:
        Path(path).write_text(self.format())


@dataclass
class TrainResult:
    params: ModelParams
    log: RunLog
    stats: NormStats
    train_records: list[ClipRecord]
    val_records: list[ClipRecord]


def load_chunks(records: Sequence[ClipRecord]) -> list[FeatureChunk]:
    return [load_features(r.feature_path) for r in records]


def stack(chunks: Sequence[FeatureChunk]) -> np.ndarray:
    return np.stack([c.values for c in chunks])


def _batches(config: TrainConfig, labels: np.ndarray, epoch: int,
             sampler: BalancedSampler | None):
    n = len(labels)
    if sampler is not None:
        return [sampler.next_batch() for _ in range(math.ceil(n / config.batch_size))]
    return list(unbalanced_iter(n, config.seed, epoch=epoch, batch_size=config.batch_size))


def train_step(params: ModelParams, optim: ad.Adam, x: np.ndarray, y: np.ndarray) -> float:
    optim.zero_grad()
    loss = ad.bce_loss(forward(x, params).clip, y)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("non-finite loss")
    loss.backward()
    optim.step()
    return value


def train(records: Sequence[ClipRecord], config: TrainConfig, out_dir=None,
          chunks: Sequence[FeatureChunk] | None = None) -> TrainResult:
    """Fit a model on clip-level labels with Adam and the clip-level BCE loss.

    Normalisation statistics come from the training split only and are
    stored in every checkpoint next to the weights.
    """
    records = list(records)
    if chunks is None:
        chunks = load_chunks(records)
    by_id = {r.clip_id: c for r, c in zip(records, chunks)}
    train_recs, val_recs = split_by_hash(records, config.val_fraction)
    if not train_recs:
        raise TrainingError("training split is empty")
    train_chunks, stats = normalize([by_id[r.clip_id] for r in train_recs])
    x_train, y_train = stack(train_chunks), label_matrix(train_recs)
    if val_recs:
        val_chunks, _ = normalize([by_id[r.clip_id] for r in val_recs], stats, mode="eval")
        x_val, y_val = stack(val_chunks), label_matrix(val_recs)

    cfg = config.model_config(y_train.shape[1], x_train.shape[1], x_train.shape[2])
    params = init_params(cfg, config.seed)
    optim = ad.Adam(params.tensors, lr=config.lr)
    sampler = BalancedSampler(y_train, config.batch_size, seed=config.seed) \
        if config.balance else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = RunLog()
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b, batch in enumerate(_batches(config, y_train, epoch, sampler), start=1):
            try:
                losses.append(train_step(params, optim, x_train[batch], y_train[batch]))
            except (TrainingError, ModelRuntimeError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_recs:
            s = tagging_scores(params, x_val, y_val, config.theta)
            entry.update(f1=s.f1, precision=s.precision, recall=s.recall)
        else:
            entry.update(f1=float("nan"), precision=float("nan"), recall=float("nan"))
        log.entries.append(entry)
        logger.info("epoch %d loss %.5f", epoch, entry["loss"])
        if out is not None and epoch % config.checkpoint_every == 0:
            path = out / f"epoch_{epoch:03d}.ckpt"
            try:
                save_checkpoint(path, params, optim.state,
                                extra={"norm.mean": stats.mean, "norm.std": stats.std})
            except OSError as exc:
                raise TrainingError(f"cannot write checkpoint {path}: {exc}") from exc
            log.checkpoints.append(path)
    if out is not None:
        log.save(out / "run.log")
    return TrainResult(params, log, stats, train_recs, val_recs)


def tagging_scores(params: ModelParams, x: np.ndarray, y: np.ndarray,
                   theta: float = 0.5) -> TaggingScores:
    clip = predict(x, params).clip.data
    ids = [str(i) for i in range(len(y))]
    preds = {i: tag_clip(p, theta).tags for i, p in zip(ids, clip)}
    return score_tagging(preds, dict(zip(ids, y)))


# ------------------------------------------------------------------- fusion

def checkpoint_stats(ck: Checkpoint) -> NormStats:
    if "norm.mean" not in ck.extra:
        raise FusionError("checkpoint carries no normalisation statistics")
    return NormStats(ck.extra["norm.mean"], ck.extra["norm.std"])


def checkpoint_posteriors(ck: Checkpoint, chunks: Sequence[FeatureChunk], pool: str | None = None):
    """Normalise with the checkpoint's own stats and run inference."""
    normed, _ = normalize(chunks, checkpoint_stats(ck), mode="eval")
    params = ck.params if pool is None else ck.params.with_pool(pool)
    return predict(stack(normed), params)


def fuse_epochs(checkpoints: Sequence, chunks: Sequence[FeatureChunk], k: int = 5,
                pool: str | None = None) -> np.ndarray:
    """Mean clip posterior over the last ``k`` checkpoints of one run."""
    if not checkpoints:
        raise FusionError("no checkpoints to fuse")
    loaded = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in checkpoints][-k:]
    digest = loaded[0].params.config.digest()
    for c in loaded[1:]:
        if c.params.config.digest() != digest:
            raise FusionError("checkpoints have different architectures")
    posts = [checkpoint_posteriors(c, chunks, pool).clip.data for c in loaded]
    return _order_free_mean(posts)


def _order_free_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # Summing sorted values makes the result independent of input order, bit for
    # bit; offsetting from the minimum returns identical inputs unchanged.
    stacked = np.sort(np.stack(arrays), axis=0)
    low = stacked[0]
    return low + (stacked - low).sum(axis=0) / len(arrays)


def fuse_systems(posteriors: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Per-clip elementwise mean of several systems' clip posteriors."""
    if not posteriors:
        raise FusionError("no posterior sets to fuse")
    clips = list(posteriors[0])
    ref = set(clips)
    for other in posteriors[1:]:
        if set(other) != ref:
            diff = sorted(ref ^ set(other))
            raise FusionError(f"clip sets differ: {diff}")
    fused = {}
    for clip in clips:
        vecs = [np.asarray(p[clip], dtype=np.float64) for p in posteriors]
        if len({v.shape for v in vecs}) != 1:
            raise FusionError(f"class counts differ for clip {clip}")
        fused[clip] = _order_free_mean(vecs)
    return fused
