"""Weakly labelled corpora and mini-batch samplers."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass
class LabelMap:
    names: list[str]

    def __post_init__(self):
        if not self.names:
            raise CorpusError("label map is empty")
        dupes = sorted({n for n in self.names if self.names.count(n) > 1})
        if dupes:
            raise CorpusError(f"duplicate class names in label map: {dupes}")
        self._ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._ids

    def id(self, name: str) -> int:
        return self._ids[name]

    @classmethod
    def load(cls, path) -> "LabelMap":
        path = Path(path)
        if not path.exists():
            raise CorpusError(f"label map not found: {path}")
        return cls([ln.strip() for ln in path.read_text().splitlines() if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names))


@dataclass
class ClipRecord:
    clip_id: str
    feature_path: Path
    labels: np.ndarray


def load_corpus(manifest_path, label_map: LabelMap, check_files: bool = True) -> list[ClipRecord]:
    """Parse ``clip_id,feature_path,label1;label2`` rows.

    Relative feature paths resolve against the manifest's directory. A
    header row whose first field is ``clip_id`` is skipped.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"manifest not found: {manifest_path}")
    records = []
    with manifest_path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0] == "clip_id"):
                continue
            if len(row) != 3:
                raise CorpusError(f"{manifest_path}:{lineno}: expected 3 fields, got {len(row)}")
            clip_id, feat, label_field = (f.strip() for f in row)
            labels = np.zeros(len(label_map))
            for name in filter(None, (s.strip() for s in label_field.split(";"))):
                if name not in label_map:
                    raise CorpusError(
                        f"{manifest_path}:{lineno}: unknown label '{name}' (line: {','.join(row)})")
                labels[label_map.id(name)] = 1.0
            path = Path(feat)
            if not path.is_absolute():
                path = manifest_path.parent / path
            if check_files and not path.exists():
                raise CorpusError(f"{manifest_path}:{lineno}: feature file missing: {path}")
            records.append(ClipRecord(clip_id, path, labels))
    if not records:
        raise CorpusError(f"manifest is empty: {manifest_path}")
    return records


def write_manifest(path, records: Sequence[ClipRecord], label_map: LabelMap) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for rec in records:
            names = ";".join(label_map.names[i] for i in np.flatnonzero(rec.labels))
            w.writerow([rec.clip_id, str(rec.feature_path), names])


def label_matrix(records: Sequence[ClipRecord]) -> np.ndarray:
    return np.stack([r.labels for r in records])


def split_by_hash(records: Sequence[ClipRecord], val_fraction: float = 0.1):
    """Stable train/validation split decided by a hash of each clip id."""
    train, val = [], []
    for rec in records:
        bucket = int(hashlib.sha1(rec.clip_id.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
        (val if bucket < val_fraction else train).append(rec)
    return train, val


class BalancedSampler:
    """Class-uniform two-stage sampler.

    Each batch slot picks a class uniformly among the classes that own at
    least one clip, then a clip uniformly from that class's pool. Clips
    with several labels sit in several pools. Draws are with replacement.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, seed: int = 0,
                 max_ratio: float = 5.0):
        labels = np.asarray(labels)
        if labels.ndim != 2 or len(labels) == 0:
            raise CorpusError("sampler needs a non-empty (clips, classes) label matrix")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.pools = {k: np.flatnonzero(labels[:, k]) for k in range(labels.shape[1])
                      if labels[:, k].any()}
        if not self.pools:
            raise CorpusError("no class has any positive clip")
        self.classes = np.array(sorted(self.pools))
        self.batch_size = batch_size
        self.max_ratio = max_ratio
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        # per-class tally of the class each slot was drawn through
        self.drawn = np.zeros(labels.shape[1], dtype=np.int64)

    def next_batch(self) -> list[int]:
        cls = self.classes[self.rng.integers(len(self.classes), size=self.batch_size)]
        picks = [int(self.pools[c][self.rng.integers(len(self.pools[c]))]) for c in cls]
        np.add.at(self.drawn, cls, 1)
        return picks

    def ratio(self) -> float:
        """Most- over least-drawn class count so far, among non-empty classes."""
        counts = self.drawn[self.classes]
        return float(counts.max() / counts.min()) if counts.min() > 0 else float("inf")

    def within_bound(self) -> bool:
        return self.ratio() <= self.max_ratio

    def __iter__(self) -> Iterator[list[int]]:
        while True:
            yield self.next_batch()


def next_batch(sampler: BalancedSampler) -> list[int]:
    return sampler.next_batch()


def unbalanced_iter(n_clips: int, seed: int, epoch: int = 0, batch_size: int | None = None):
    """One shuffled pass over the corpus; the epoch index is folded into the seed.

    Yields clip indices, or lists of indices when ``batch_size`` is given.
    """
    perm = np.random.default_rng([seed, epoch]).permutation(n_clips)
    if batch_size is None:
        yield from (int(i) for i in perm)
        return
    for start in range(0, n_clips, batch_size):
        yield [int(i) for i in perm[start:start + batch_size]]


def class_counts(labels: np.ndarray, batches) -> np.ndarray:
    """Per-class occurrence counts over the clips of ``batches``."""
    labels = np.asarray(labels)
    counts = np.zeros(labels.shape[1])
    for batch in batches:
        counts += labels[list(batch)].sum(axis=0)
    return counts
