"""The hybrid diarization pipeline: segment, score all pairs, cluster, refine.

Frame-level work (speech gating, chunked encoder passes, smoothing) is
anchored to speech-region starts, so delaying the audio by a whole number of
frames shifts every output span by exactly that delay.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .clustering import ClusterResult, SimilarityGraph, cluster
from .features import HOP_SECONDS, LOG_FLOOR, FeatureMatrix
from .model import PairScorer, PrismEncoder, feature_key
from .timeline import Span, Timeline

log = logging.getLogger(__name__)


class DiarizationError(ValueError):
    pass


class EmptySegmentationError(DiarizationError):
    pass


@dataclass
class DiarConfig:
    segment_s: float = 1.5
    hop_s: float = 0.75
    min_region_s: float = 0.5
    energy_margin: float = 3.0
    method: str = "prism-hdbscan"
    k: int = 3
    min_cluster_size: int = 2
    ahc_threshold: float = 0.5
    smooth_frames: int = 11
    overlap_threshold: float = 0.5
    min_span_s: float = 0.2
    chunk_s: float = 16.0
    batch_size: int = 64
    seed: int = 0


@dataclass
class Segmentation:
    segments: list[tuple[float, float]]
    regions: list[tuple[float, float]]
    frames: list[tuple[int, int]] = field(default_factory=list)  # input-frame ranges

    def __len__(self):
        return len(self.segments)


def _frame(t: float) -> int:
    return int(round(t / HOP_SECONDS))


def speech_mask(feats: FeatureMatrix, margin: float = 3.0) -> np.ndarray:
    """Energy gate: frames whose mean log-mel exceeds the silence floor + ``margin``."""
    return feats.acoustic.mean(axis=1) > LOG_FLOOR + margin


def mask_regions(mask: np.ndarray) -> list[tuple[float, float]]:
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    d = np.diff(m.astype(np.int8))
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return [(round(a * HOP_SECONDS, 6), round(b * HOP_SECONDS, 6)) for a, b in zip(starts, ends)]


def region_windows(start: float, end: float, seg: float, hop: float) -> list[tuple[float, float]]:
    """Sliding windows over one region; the final window is right-aligned to the end."""
    L = end - start
    if L <= seg:
        return [(start, end)]
    n = int(np.floor((L - seg) / hop + 1e-9)) + 1
    wins = [(start + k * hop, start + k * hop + seg) for k in range(n)]
    if wins[-1][1] < end - 1e-9:
        wins[-1] = (end - seg, end)
    return [(round(a, 6), round(b, 6)) for a, b in wins]


def segment(feats: FeatureMatrix, cfg: DiarConfig | None = None,
            regions: Sequence[tuple[float, float]] | None = None) -> Segmentation:
    """Fixed-length windows over speech regions (energy gate unless ``regions`` given)."""
    cfg = cfg or DiarConfig()
    T = len(feats)
    audio_end = T * HOP_SECONDS
    if regions is None:
        regions = mask_regions(speech_mask(feats, cfg.energy_margin))
    kept = []
    for a, b in regions:
        a, b = max(0.0, a), min(b, audio_end)
        if b - a >= cfg.min_region_s - 1e-9:
            kept.append((round(a, 6), round(b, 6)))
    if not kept:
        raise EmptySegmentationError("no speech found: segmentation is empty")
    segs, frames = [], []
    for a, b in kept:
        for s, e in region_windows(a, b, cfg.segment_s, cfg.hop_s):
            fa, fb = _frame(s), min(_frame(e), T)
            if fb - fa < 8:
                continue
            segs.append((s, e))
            frames.append((fa, fb))
    if not segs:
        raise EmptySegmentationError("speech regions too short to segment")
    return Segmentation(segs, kept, frames)


# --- pair scoring -------------------------------------------------------------

class ScoreCache:
    """Pair scores keyed by (checkpoint hash, segment content keys), persisted as CSV."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.scores: dict[tuple[str, str, str], float] = {}
        if self.path and self.path.exists():
            with open(self.path) as fh:
                for row in csv.reader(fh):
                    if row and row[0] != "checkpoint":
                        self.scores[(row[0], row[1], row[2])] = float(row[3])
        self._dirty: list[tuple[tuple[str, str, str], float]] = []

    def get(self, key):
        return self.scores.get(key)

    def put(self, key, value: float):
        self.scores[key] = value
        self._dirty.append((key, value))

    def flush(self):
        if not self.path or not self._dirty:
            return
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["checkpoint", "key_a", "key_b", "score"])
            for (c, a, b), v in self._dirty:
                w.writerow([c, a, b, repr(v)])
        self._dirty.clear()

    def __len__(self):
        return len(self.scores)


@dataclass
class PairStats:
    evaluated: int = 0
    cached: int = 0


def score_all_pairs(segments: Sequence[FeatureMatrix], model: PrismEncoder, batch_size: int = 64,
                    cache: ScoreCache | None = None, checkpoint_id: str = "",
                    node_meta: list | None = None, stats: PairStats | None = None) -> SimilarityGraph:
    """sim[i, j] = score_pair(seg_i, seg_j); n(n - 1) / 2 pair evaluations."""
    n = len(segments)
    stats = stats if stats is not None else PairStats()
    sim = np.eye(n)
    if n < 2:
        return SimilarityGraph(sim, node_meta or [])
    keys = [feature_key(s) for s in segments]
    hexkeys = [k.hex() for k in keys]
    inputs = [model.features_tensor(s) for s in segments]
    scorer = PairScorer(model, inputs, keys)
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i in range(n):
        for j in range(i + 1, n):
            a, b = scorer.canonical(i, j)
            if cache is not None:
                v = cache.get((checkpoint_id, hexkeys[a], hexkeys[b]))
                if v is not None:
                    sim[i, j] = sim[j, i] = v
                    stats.cached += 1
                    continue
            groups.setdefault((scorer.lengths[a], scorer.lengths[b]), []).append((a, b))
    for _, pairs in sorted(groups.items()):
        pairs.sort()
        for k in range(0, len(pairs), batch_size):
            chunk = pairs[k:k + batch_size]
            vals = scorer.score(chunk).tolist()
            for (a, b), v in zip(chunk, vals):
                sim[a, b] = sim[b, a] = v
                if cache is not None:
                    cache.put((checkpoint_id, hexkeys[a], hexkeys[b]), v)
            stats.evaluated += len(chunk)
    if cache is not None:
        cache.flush()
    return SimilarityGraph(sim, node_meta or [])


# --- frame-level outputs --------------------------------------------------------

@dataclass
class FrameOutputs:
    """Downsampled-frame outputs over the speech regions of a meeting."""

    start: np.ndarray  # input frame where each downsampled frame starts
    stop: np.ndarray  # exclusive input frame end (clipped to its chunk)
    chunk: np.ndarray  # chunk index of each frame
    y: np.ndarray  # frames x embedding_dim, unit rows
    activity: np.ndarray | None  # frames x streams sigmoid outputs, or None


def chunk_ranges(regions: Sequence[tuple[float, float]], chunk_s: float, T: int, factor: int = 4):
    out = []
    for a, b in regions:
        fa, fb = _frame(a), min(_frame(b), T)
        L = fb - fa
        if L < 8:
            continue
        n = int(np.ceil(L / (chunk_s / HOP_SECONDS)))
        size = int(np.ceil(L / n / factor)) * factor
        s = fa
        while s < fb:
            e = min(s + size, fb)
            if e - s < 8:  # fold a tiny tail into the previous chunk
                out[-1] = (out[-1][0], e)
            else:
                out.append((s, e))
            s = e
    return out


def frame_outputs(model: PrismEncoder, feats: FeatureMatrix, regions, chunk_s: float = 16.0) -> FrameOutputs:
    f = model.cfg.downsample
    starts, stops, chunks, ys, acts = [], [], [], [], []
    has_diar = "diar" in model.heads
    with torch.no_grad():
        for c, (a, b) in enumerate(chunk_ranges(regions, chunk_s, len(feats), f)):
            x = model.features_tensor(feats.slice(a, b)).unsqueeze(0)
            h = model.hidden(x)[0]
            ys.append(model.embed(h).numpy())
            if has_diar:
                acts.append(torch.sigmoid(model.diar_logits(h)).numpy())
            s = a + f * np.arange(h.shape[0])
            starts.append(s)
            stops.append(np.minimum(s + f, b))
            chunks.append(np.full(h.shape[0], c))
    if not ys:
        raise DiarizationError("no speech region long enough for the encoder")
    return FrameOutputs(
        np.concatenate(starts), np.concatenate(stops), np.concatenate(chunks),
        np.concatenate(ys).astype(np.float64),
        np.concatenate(acts).astype(np.float64) if has_diar else None,
    )


# --- refinement -----------------------------------------------------------------

def segment_votes(seg_frames: Sequence[tuple[int, int]], labels: np.ndarray, fo: FrameOutputs) -> np.ndarray:
    """Majority cluster of the segments covering each frame's centre (-1 if none)."""
    centre = 0.5 * (fo.start + fo.stop)
    num = int(labels.max()) + 1 if len(labels) else 0
    counts = np.zeros((len(centre), max(num, 1)), dtype=np.int64)
    for (a, b), lab in zip(seg_frames, labels):
        counts[(centre >= a) & (centre < b), lab] += 1
    votes = counts.argmax(1)  # ties -> smallest cluster id
    votes[counts.sum(1) == 0] = -1
    return votes


def mode_filter(labels: np.ndarray, width: int, groups: np.ndarray | None = None) -> np.ndarray:
    """Categorical median: most frequent label in a centred window (ties keep the centre
    label, else the smallest). Windows never cross ``groups`` boundaries."""
    labels = np.asarray(labels)
    if width <= 1 or len(labels) == 0:
        return labels.copy()
    half = width // 2
    groups = np.zeros(len(labels), int) if groups is None else np.asarray(groups)
    out = labels.copy()
    for t in range(len(labels)):
        lo, hi = max(0, t - half), min(len(labels), t + half + 1)
        win = labels[lo:hi][groups[lo:hi] == groups[t]]
        vals, counts = np.unique(win, return_counts=True)
        best = counts.max()
        tied = vals[counts == best]
        out[t] = labels[t] if labels[t] in tied else tied.min()
    return out


def refine(labels: np.ndarray, seg: Segmentation, fo: FrameOutputs, cfg: DiarConfig | None = None,
           file_id: str = "meeting", label_names: Sequence[str] | None = None) -> Timeline:
    """Per-cluster centroids, frame argmax, smoothing, overlap gate, span merge."""
    cfg = cfg or DiarConfig()
    labels = np.asarray(labels)
    C = int(labels.max()) + 1 if len(labels) else 0
    if C <= 0:
        raise DiarizationError("refine needs at least one cluster")
    names = list(label_names) if label_names is not None else [f"spk{c}" for c in range(C)]
    votes = segment_votes(seg.frames, labels, fo)
    cents = np.zeros((C, fo.y.shape[1]))
    for c in range(C):
        sel = votes == c
        if not sel.any():  # out-voted everywhere: fall back to any frame of its segments
            centre = 0.5 * (fo.start + fo.stop)
            sel = np.zeros(len(centre), bool)
            for (a, b), lab in zip(seg.frames, labels):
                if lab == c:
                    sel |= (centre >= a) & (centre < b)
        if sel.any():
            v = fo.y[sel].mean(0)
            cents[c] = v / max(np.linalg.norm(v), 1e-12)
    cos = fo.y @ cents.T
    order = np.argsort(-cos, axis=1, kind="stable")
    primary = mode_filter(order[:, 0], cfg.smooth_frames, fo.chunk)
    second = np.full(len(primary), -1)
    if fo.activity is not None and C > 1:
        act = np.sort(fo.activity, axis=1)
        gate = act[:, -2] > cfg.overlap_threshold
        alt = np.where(order[:, 0] == primary, order[:, 1], order[:, 0])
        second[gate] = alt[gate]
    spans = []
    for c in range(C):
        active = (primary == c) | (second == c)
        spans.extend(_runs(active, fo, names[c], cfg.min_span_s))
    return Timeline(spans, file_id)


def _runs(active: np.ndarray, fo: FrameOutputs, label: str, min_span_s: float) -> list[Span]:
    out, cur = [], None
    for t in np.flatnonzero(active):
        a, b = int(fo.start[t]), int(fo.stop[t])
        if cur is not None and a == cur[1]:
            cur[1] = b
        else:
            if cur is not None:
                out.append(cur)
            cur = [a, b]
    if cur is not None:
        out.append(cur)
    spans = []
    for a, b in out:
        dur = (b - a) * HOP_SECONDS
        if dur >= min_span_s - 1e-9:
            spans.append(Span(round(a * HOP_SECONDS, 6), round(dur, 6), label))
    return spans


# --- end to end ----------------------------------------------------------------------

@dataclass
class DiarResult:
    timeline: Timeline
    num_speakers: int
    clusters: ClusterResult
    segmentation: Segmentation
    similarity: SimilarityGraph
    timings: dict[str, float]
    pairs: PairStats


def diarize(feats: FeatureMatrix, ver_model: PrismEncoder, diar_model: PrismEncoder,
            cfg: DiarConfig | None = None, regions=None, file_id: str = "meeting",
            cache: ScoreCache | None = None, checkpoint_id: str = "",
            similarity: SimilarityGraph | None = None) -> DiarResult:
    """segment -> score_all_pairs -> cluster -> refine. ``regions`` enables oracle VAD."""
    cfg = cfg or DiarConfig()
    timings = {}
    t0 = time.perf_counter()
    seg = segment(feats, cfg, regions)
    timings["segment"] = time.perf_counter() - t0
    stats = PairStats()
    t0 = time.perf_counter()
    if similarity is None:
        parts = [feats.slice(a, b) for a, b in seg.frames]
        similarity = score_all_pairs(parts, ver_model, cfg.batch_size, cache, checkpoint_id,
                                     node_meta=list(seg.segments), stats=stats)
    timings["score_pairs"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if len(seg) == 1:
        result = ClusterResult(np.zeros(1, np.int64), 1)
    else:
        result = cluster(similarity, cfg.method, k=cfg.k, min_cluster_size=cfg.min_cluster_size,
                         seed=cfg.seed, threshold=cfg.ahc_threshold)
    timings["cluster"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    fo = frame_outputs(diar_model, feats, seg.regions, cfg.chunk_s)
    timeline = refine(result.labels, seg, fo, cfg, file_id)
    timings["refine"] = time.perf_counter() - t0
    return DiarResult(timeline, result.num_clusters, result, seg, similarity, timings, stats)
