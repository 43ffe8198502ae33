"""Clip tagging, event extraction and the tagging / segment-based SED scores.

Scores are percentages except the error rate. Any ratio whose denominator
is zero is reported as 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .autodiff import Tensor
from .model import FramePosteriors


class ConfigError(ValueError):
    pass


class ClipSetMismatch(ValueError):
    pass


@dataclass
class TagPrediction:
    clip_id: str
    posterior: np.ndarray
    tags: np.ndarray


@dataclass(frozen=True)
class EventInterval:
    class_id: int
    onset_s: float
    offset_s: float
    clip_id: str = ""


@dataclass
class TaggingScores:
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass
class SedScores:
    f1: float
    er: float
    precision: float
    recall: float
    S: int
    D: int
    I: int  # noqa: E741
    N: int
    tp: int
    fp: int
    fn: int


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return 100 * _ratio(2 * p * r, p + r), 100 * p, 100 * r


# ------------------------------------------------------------------ tagging

def tag_clip(posterior, theta: float = 0.5, clip_id: str = "") -> TagPrediction:
    """Binarise a clip posterior: class ``k`` is tagged iff ``p_k >= theta``."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {theta}")
    if isinstance(posterior, FramePosteriors):
        posterior = posterior.clip
    if isinstance(posterior, Tensor):
        posterior = posterior.data
    p = np.asarray(posterior, dtype=np.float64).reshape(-1)
    return TagPrediction(clip_id, p, (p >= theta).astype(np.int8))


def score_tagging(preds: Mapping[str, np.ndarray], refs: Mapping[str, np.ndarray]) -> TaggingScores:
    """Micro-averaged F1 / precision / recall over all (clip, class) decisions."""
    if set(preds) != set(refs):
        diff = sorted(set(preds) ^ set(refs))
        raise ClipSetMismatch(f"prediction and reference clip sets differ: {diff[:10]}")
    tp = fp = fn = 0
    for clip in sorted(refs):
        p = np.asarray(preds[clip]).astype(bool)
        r = np.asarray(refs[clip]).astype(bool)
        tp += int(np.sum(p & r))
        fp += int(np.sum(p & ~r))
        fn += int(np.sum(~p & r))
    f1, precision, recall = _f1(tp, fp, fn)
    return TaggingScores(f1, precision, recall, tp, fp, fn)


# --------------------------------------------------------- event extraction

def binarize(track: np.ndarray, theta: float = 0.5) -> np.ndarray:
    return np.asarray(track) >= theta


def _runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Half-open ``[start, stop)`` frame runs of True values."""
    padded = np.concatenate([[False], active, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def extract_events(track, frame_hop_s: float, theta: float = 0.5, median_win: int = 11,
                   min_dur_s: float = 0.2, merge_gap_s: float = 0.2,
                   clip_duration: float | None = None, clip_id: str = "") -> list[EventInterval]:
    """Turn a ``(T, C)`` frame track into event intervals.

    Per class: threshold at ``theta``, median-filter the binary sequence,
    drop runs shorter than ``min_dur_s``, merge runs separated by less than
    ``merge_gap_s``, then convert frame boundaries to seconds. Offsets are
    clamped to ``clip_duration`` when given.
    """
    if median_win < 1 or median_win % 2 == 0:
        raise ConfigError(f"median window must be a positive odd number, got {median_win}")
    track = np.asarray(track.data if isinstance(track, Tensor) else track, dtype=np.float64)
    if track.ndim != 2:
        raise ConfigError(f"expected a (T, C) track, got shape {track.shape}")
    events = []
    for k in range(track.shape[1]):
        active = binarize(track[:, k], theta).astype(np.int8)
        if median_win > 1:
            active = median_filter(active, size=median_win, mode="nearest")
        runs = [r for r in _runs(active.astype(bool))
                if (r[1] - r[0]) * frame_hop_s >= min_dur_s]
        merged: list[list[int]] = []
        for start, stop in runs:
            if merged and (start - merged[-1][1]) * frame_hop_s < merge_gap_s:
                merged[-1][1] = stop
            else:
                merged.append([start, stop])
        for start, stop in merged:
            onset, offset = start * frame_hop_s, stop * frame_hop_s
            if clip_duration is not None:
                offset = min(offset, clip_duration)
            if offset > onset:
                events.append(EventInterval(k, onset, offset, clip_id))
    return sorted(events, key=lambda e: (e.onset_s, e.class_id))


# -------------------------------------------------------------- SED scoring

def _segment_activity(events: Sequence[EventInterval], n_segments: int, n_classes: int,
                      segment_s: float) -> np.ndarray:
    act = np.zeros((n_segments, n_classes), dtype=bool)
    for ev in events:
        first = int(math.floor(ev.onset_s / segment_s))
        last = int(math.ceil(ev.offset_s / segment_s))
        act[max(first, 0):min(last, n_segments), ev.class_id] = True
    return act


def score_sed(pred_events: Sequence[EventInterval], ref_events: Sequence[EventInterval],
              segment_s: float = 1.0, durations: Mapping[str, float] | None = None,
              default_duration: float = 10.0) -> SedScores:
    """Segment-based error rate and micro F1.

    Both event lists are rasterised per clip onto ``segment_s`` segments; a
    class is active in a segment when any of its events overlaps it. For
    each segment with ``fn`` missed and ``fp`` spurious classes:
    ``S = min(fn, fp)``, ``D = max(0, fn - fp)``, ``I = max(0, fp - fn)``.
    ``ER = (S + D + I) / N`` with ``N`` the count of reference-active
    (segment, class) pairs.
    """
    if segment_s <= 0:
        raise ConfigError(f"segment length must be positive, got {segment_s}")
    all_events = list(pred_events) + list(ref_events)
    n_classes = 1 + max((e.class_id for e in all_events), default=0)
    clips = sorted({e.clip_id for e in all_events} | set(durations or {}))
    S = D = I = N = tp = fp = fn = 0
    for clip in clips:
        dur = (durations or {}).get(clip, default_duration)
        dur = max([dur] + [e.offset_s for e in all_events if e.clip_id == clip])
        n_seg = int(math.ceil(dur / segment_s - 1e-9))
        ref = _segment_activity([e for e in ref_events if e.clip_id == clip], n_seg, n_classes,
                                segment_s)
        hyp = _segment_activity([e for e in pred_events if e.clip_id == clip], n_seg, n_classes,
                                segment_s)
        seg_fn = np.sum(ref & ~hyp, axis=1)
        seg_fp = np.sum(hyp & ~ref, axis=1)
        S += int(np.minimum(seg_fn, seg_fp).sum())
        D += int(np.maximum(0, seg_fn - seg_fp).sum())
        I += int(np.maximum(0, seg_fp - seg_fn).sum())
        N += int(ref.sum())
        tp += int(np.sum(ref & hyp))
        fp += int(seg_fp.sum())
        fn += int(seg_fn.sum())
    f1, precision, recall = _f1(tp, fp, fn)
    return SedScores(f1, _ratio(S + D + I, N), precision, recall, S, D, I, N, tp, fp, fn)


# -------------------------------------------------------------------- files

def write_events(path, events: Sequence[EventInterval], class_names: Sequence[str]) -> None:
    with Path(path).open("w") as fh:
        for ev in events:
            fh.write(f"{ev.clip_id}\t{ev.onset_s:.3f}\t{ev.offset_s:.3f}\t"
                     f"{class_names[ev.class_id]}\n")


def read_events(path, class_names: Sequence[str]) -> list[EventInterval]:
    ids = {n: i for i, n in enumerate(class_names)}
    events = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        clip, onset, offset, name = parts
        if name not in ids:
            raise ValueError(f"{path}:{lineno}: unknown class '{name}'")
        events.append(EventInterval(ids[name], float(onset), float(offset), clip))
    return events


def format_report(scores) -> str:
    """``key=value`` lines for either score type."""
    if isinstance(scores, SedScores):
        items = [("f1", scores.f1), ("er", scores.er), ("precision", scores.precision),
                 ("recall", scores.recall), ("S", scores.S), ("D", scores.D), ("I", scores.I),
                 ("N", scores.N)]
    else:
        items = [("f1", scores.f1), ("precision", scores.precision), ("recall", scores.recall),
                 ("tp", scores.tp), ("fp", scores.fp), ("fn", scores.fn)]
    return "".join(f"{k}={v:.4f}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in items)


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def write_posteriors(path, posteriors: Mapping[str, np.ndarray]) -> None:
    """CSV ``clip_id,p_0,...,p_{C-1}`` with six decimals, rows in insertion order."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for clip, p in posteriors.items():
            w.writerow([clip] + [f"{v:.6f}" for v in np.asarray(p).reshape(-1)])


def read_posteriors(path) -> dict[str, np.ndarray]:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if row:
                out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


def write_curves(path, o: np.ndarray, z_loc: np.ndarray, class_names: Sequence[str]) -> None:
    """Per-frame ``frame,class_name,O,Z_loc,O_prime`` rows for one clip."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "class_name", "O", "Z_loc", "O_prime"])
        for t in range(o.shape[0]):
            for k, name in enumerate(class_names):
                w.writerow([t, name, f"{o[t, k]:.6f}", f"{z_loc[t, k]:.6f}",
                            f"{o[t, k] * z_loc[t, k]:.6f}"])
