"""Synthetic weakly labelled tone corpus with hidden frame-level truth.

Each class owns a fixed fundamental (log-spaced between 300 Hz and 4 kHz)
rendered with one harmonic. A clip holds 1-3 events of distinct classes
at random, non-overlapping positions over white noise. The manifest only
carries clip-level labels; ``events.tsv`` keeps the true intervals for
scoring detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ClipRecord, LabelMap, write_manifest
from .evaluation import EventInterval, write_events
from .features import CLIP_SECONDS, SAMPLE_RATE, write_wav

F_LOW, F_HIGH = 300.0, 4000.0
NOISE_STD = 0.02
TONE_AMP = 0.3
FADE_S = 0.02


@dataclass
class SynthCorpus:
    root: Path
    manifest: Path
    labels: Path
    events: Path
    label_map: LabelMap
    reference: list[EventInterval]


def class_frequencies(n_classes: int) -> np.ndarray:
    if n_classes == 1:
        return np.array([1000.0])
    return F_LOW * (F_HIGH / F_LOW) ** (np.arange(n_classes) / (n_classes - 1))


def _place_events(rng: np.random.Generator, n_events: int, clip_s: float,
                  min_s: float = 1.0, max_s: float = 3.0) -> list[tuple[float, float]]:
    durations = rng.uniform(min_s, max_s, size=n_events)
    free = clip_s - durations.sum()
    gaps = rng.dirichlet(np.ones(n_events + 1)) * free
    spans, t = [], 0.0
    for d, g in zip(durations, gaps):
        t += g
        spans.append((t, t + d))
        t += d
    return spans


def render_clip(rng: np.random.Generator, events: list[tuple[int, float, float]],
                freqs: np.ndarray, clip_s: float = CLIP_SECONDS) -> np.ndarray:
    n = int(round(clip_s * SAMPLE_RATE))
    x = rng.normal(0.0, NOISE_STD, size=n)
    for k, onset, offset in events:
        a, b = int(round(onset * SAMPLE_RATE)), int(round(offset * SAMPLE_RATE))
        t = np.arange(b - a) / SAMPLE_RATE
        tone = np.sin(2 * np.pi * freqs[k] * t) + 0.5 * np.sin(4 * np.pi * freqs[k] * t)
        ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / FADE_S)
        x[a:b] += TONE_AMP / 1.5 * tone * ramp
    return x


def make_corpus(out_dir, n_clips: int = 40, n_classes: int = 4, seed: int = 0,
                clip_s: float = CLIP_SECONDS) -> SynthCorpus:
    """Write ``wav/``, ``manifest.csv``, ``labels.txt`` and ``events.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    label_map = LabelMap([f"tone{k:02d}" for k in range(n_classes)])
    freqs = class_frequencies(n_classes)
    records, reference = [], []
    for i in range(n_clips):
        clip_id = f"synth{i:04d}"
        n_events = int(rng.integers(1, min(3, n_classes) + 1))
        classes = rng.choice(n_classes, size=n_events, replace=False)
        spans = _place_events(rng, n_events, clip_s)
        events = [(int(k), on, off) for k, (on, off) in zip(classes, spans)]
        write_wav(out / "wav" / f"{clip_id}.wav", render_clip(rng, events, freqs, clip_s))
        labels = np.zeros(n_classes)
        labels[classes] = 1.0
        records.append(ClipRecord(clip_id, Path("features") / f"{clip_id}.feat", labels))
        reference += [EventInterval(k, round(on, 3), round(off, 3), clip_id)
                      for k, on, off in sorted(events, key=lambda e: e[1])]
    write_manifest(out / "manifest.csv", records, label_map)
    label_map.save(out / "labels.txt")
    write_events(out / "events.tsv", reference, label_map.names)
    return SynthCorpus(out, out / "manifest.csv", out / "labels.txt", out / "events.tsv",
                       label_map, reference)
