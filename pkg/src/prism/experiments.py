"""Toy-scale experiment drivers: verification, ablation, clustering comparison
and DER by speaker count. Each driver writes a CSV, an aligned text table,
and the ordering checks that are the reproducible part of each comparison.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import datasim
from .clustering import METHODS, cluster
from .diarization import DiarConfig, diarize
from .metrics import cluster_pr, counting_accuracy, der, eer
from .model import ModelConfig, PrismEncoder, load_checkpoint, score_pairs_batched
from .trainer import DataConfig, TrainConfig, make_bank, make_source, train, with_mode

log = logging.getLogger(__name__)

KINDS = ("verification", "clustering-comparison", "der-by-speaker-count", "ablation")


class ExperimentError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    kind: str
    seeds: list[int]
    out_dir: Path
    train: bool = False
    ver_ckpt: str | None = None
    diar_ckpt: str | None = None
    meetings: int = 100

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ExperimentError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ExperimentError("seeds must be non-empty")
        self.out_dir = Path(self.out_dir)


@dataclass
class ToyScale:
    """Sizes for the laptop-scale training runs."""

    num_speakers: int = 20
    utterances_per_speaker: int = 10
    model_dim: int = 32
    pretrain_steps: int = 150
    finetune_steps: int = 150
    diar_steps: int = 100
    eval_speakers: int = 20
    eval_utterances: int = 5
    eval_trials: int = 400
    eval_seed: int = 9000
    crop_s: float = 5.0


# --- tables --------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def table_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def table_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    cells = [list(columns)] + [[_cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(out_dir: Path, name: str, rows, columns, orderings: Sequence[tuple[str, bool]] = ()):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.csv").write_text(table_csv(rows, columns))
    text = table_text(rows, columns)
    if orderings:
        text += "\n" + "".join(f"ordering: {d}: {'holds' if ok else 'VIOLATED'}\n" for d, ok in orderings)
    (out_dir / f"{name}.txt").write_text(text)
    return text


# --- verification / ablation ------------------------------------------------------

def model_config(use_phonetic: bool, scale: ToyScale) -> ModelConfig:
    return ModelConfig(model_dim=scale.model_dim, embedding_dim=scale.model_dim,
                       input_dim=140 if use_phonetic else 40, use_phonetic=use_phonetic)


@dataclass
class Banks:
    """Utterance banks shared by both ablation arms of one seed (features hold both streams)."""

    pretrain: datasim.UtteranceBank
    verification: datasim.UtteranceBank


def make_banks(seed: int, scale: ToyScale) -> Banks:
    data = DataConfig(num_speakers=scale.num_speakers, utterances_per_speaker=scale.utterances_per_speaker,
                      pair_crop_s=scale.crop_s, seed=seed)
    return Banks(make_bank(data), make_bank(data, duration_range=(scale.crop_s, scale.crop_s)))


def eval_trials(scale: ToyScale):
    """Held-out speakers; the same trial list for every seed and arm."""
    speakers = datasim.make_speakers(scale.eval_speakers, seed=scale.eval_seed, prefix="eval")
    bank = datasim.UtteranceBank(speakers, (scale.crop_s, scale.crop_s), seed=scale.eval_seed)
    return datasim.make_verification_batch(bank, scale.eval_trials, scale.eval_seed,
                                           utterances_per_speaker=scale.eval_utterances, crop_s=scale.crop_s)


def score_trials(model: PrismEncoder, trials, batch_size: int = 50) -> tuple[list[float], list[bool]]:
    scores, flags = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(trials), batch_size):
            chunk = trials[i:i + batch_size]
            x1 = torch.stack([model.features_tensor(u.featurized()) for u, _, _ in chunk])
            x2 = torch.stack([model.features_tensor(v.featurized()) for _, v, _ in chunk])
            scores += score_pairs_batched(model, x1, x2).tolist()
            flags += [bool(t) for *_, t in chunk]
    return scores, flags


def train_verification(seed: int, use_phonetic: bool, out_dir: Path, scale: ToyScale | None = None,
                       banks: Banks | None = None) -> tuple[Path, PrismEncoder]:
    """Pre-train then fine-tune for verification; returns the fine-tuned checkpoint."""
    scale = scale or ToyScale()
    banks = banks or make_banks(seed, scale)
    out_dir = Path(out_dir)
    data = DataConfig(num_speakers=scale.num_speakers, utterances_per_speaker=scale.utterances_per_speaker,
                      pair_crop_s=scale.crop_s, seed=seed)
    cfg = TrainConfig(mode="pretrain", steps=scale.pretrain_steps, seed=seed,
                      model=model_config(use_phonetic, scale), data=data)
    pre = train(cfg, out_dir / "pretrain", source=make_source(cfg, banks.pretrain))
    vcfg = with_mode(cfg, "finetune_ver", steps=scale.finetune_steps)
    ver = train(vcfg, out_dir / "finetune_ver", source=make_source(vcfg, banks.verification),
                init=pre.checkpoint)
    return ver.checkpoint, ver.model


def train_diarization(ver_ckpt, seed: int, out_dir: Path, scale: ToyScale | None = None,
                      bank: datasim.UtteranceBank | None = None) -> tuple[Path, PrismEncoder]:
    scale = scale or ToyScale()
    m, _ = load_checkpoint(ver_ckpt)
    data = DataConfig(num_speakers=scale.num_speakers, utterances_per_speaker=scale.utterances_per_speaker,
                      seed=seed)
    cfg = TrainConfig(mode="finetune_diar", steps=scale.diar_steps, seed=seed, model=m.cfg, data=data)
    res = train(cfg, Path(out_dir) / "finetune_diar", source=make_source(cfg, bank), init=ver_ckpt)
    return res.checkpoint, res.model


def run_verification(seeds: Sequence[int], out_dir: Path, arms: Sequence[bool] = (True,),
                     scale: ToyScale | None = None) -> list[dict]:
    """EER per (seed, arm) on the fixed held-out trial list."""
    scale = scale or ToyScale()
    trials = eval_trials(scale)
    rows = []
    for seed in seeds:
        banks = make_banks(seed, scale)
        for phon in arms:
            arm = "phonetic" if phon else "no-phonetic"
            ckpt, model = train_verification(seed, phon, Path(out_dir) / f"seed{seed}" / arm, scale, banks)
            scores, flags = score_trials(model, trials)
            rows.append({"seed": seed, "arm": arm, "eer": eer(scores, flags), "checkpoint": str(ckpt)})
            log.info("seed %d %s EER %.4f", seed, arm, rows[-1]["eer"])
    return rows


def median_eer(rows, arm: str) -> float:
    return float(np.median([r["eer"] for r in rows if r["arm"] == arm]))


# --- clustering comparison ---------------------------------------------------------

def planted_similarity(rng: np.random.Generator, num_blocks: int, size_range=(5, 20),
                       within=(0.8, 0.05), cross=(0.1, 0.05)):
    """Symmetric block similarity: Gaussian within/cross entries, unit diagonal."""
    sizes = rng.integers(size_range[0], size_range[1] + 1, size=num_blocks)
    truth = np.repeat(np.arange(num_blocks), sizes)
    n = len(truth)
    same = truth[:, None] == truth[None, :]
    s = np.where(same, rng.normal(*within, (n, n)), rng.normal(*cross, (n, n)))
    s = np.triu(s, 1)
    s = s + s.T
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0), truth


def clustering_comparison(num_instances: int, seed: int, methods: Sequence[str] = METHODS,
                          max_blocks: int = 8, size_range=(5, 20)) -> tuple[list[dict], list[dict]]:
    """Returns (summary rows per method, per-instance rows)."""
    rng = np.random.default_rng([seed, 61])
    per = []
    for i in range(num_instances):
        c = int(rng.integers(1, max_blocks + 1))
        sim, truth = planted_similarity(rng, c, size_range)
        for m in methods:
            r = cluster(sim, m, seed=seed)
            p, rec = cluster_pr(r.labels, truth)
            per.append({"instance": i, "method": m, "true": c, "estimated": r.num_clusters,
                        "precision": p, "recall": rec})
    summary = []
    for m in methods:
        rows = [r for r in per if r["method"] == m]
        summary.append({
            "method": m,
            "count_accuracy": counting_accuracy([r["estimated"] for r in rows], [r["true"] for r in rows]),
            "precision": float(np.mean([r["precision"] for r in rows])),
            "recall": float(np.mean([r["recall"] for r in rows])),
        })
    return summary, per


# --- diarization ----------------------------------------------------------------------

def simulate_meetings(n: int, seed: int, speaker_counts=(2, 3, 4), duration_s: float = 180.0,
                      overlap_ratio: float = 0.0, pool_size: int = 20):
    """Meetings from a held-out speaker pool; counts cycle deterministically."""
    pool = datasim.make_speakers(pool_size, seed=seed + 7000, prefix="mtg")
    for i in range(n):
        c = speaker_counts[i % len(speaker_counts)]
        yield datasim.simulate_meeting(pool, c, duration_s, overlap_ratio, seed=seed * 1000 + i,
                                       file_id=f"meeting{seed}_{i:03d}")


def der_by_speaker_count(ver: PrismEncoder, diar: PrismEncoder, n_meetings: int, seed: int,
                         methods=("prism-hdbscan", "kmeans"), oracle_vad: bool = True,
                         duration_s: float = 180.0, cfg: DiarConfig | None = None,
                         speaker_counts=(2, 3, 4)) -> list[dict]:
    """Per-meeting DER components for each method; pair scores are shared across methods."""
    cfg = cfg or DiarConfig(seed=seed)
    rows = []
    for mt in simulate_meetings(n_meetings, seed, speaker_counts, duration_s):
        regions = mt.reference.speech_regions() if oracle_vad else None
        sim = None
        for m in methods:
            res = diarize(mt.features, ver, diar, replace(cfg, method=m), regions=regions,
                          file_id=mt.file_id, similarity=sim)
            sim = res.similarity
            sc = der(res.timeline, mt.reference)
            rows.append({"meeting": mt.file_id, "method": m, "speakers": mt.num_speakers,
                         "estimated": res.num_speakers, "miss_s": sc.miss_s, "falsealarm_s": sc.falsealarm_s,
                         "confusion_s": sc.confusion_s, "ref_speech_s": sc.total_ref_speech_s, "der": sc.der})
    return rows


def aggregate_der(rows, method: str, speakers: int | None = None) -> float:
    sel = [r for r in rows if r["method"] == method and (speakers is None or r["speakers"] == speakers)]
    num = sum(r["miss_s"] + r["falsealarm_s"] + r["confusion_s"] for r in sel)
    return num / sum(r["ref_speech_s"] for r in sel)


# --- driver -------------------------------------------------------------------------------

def _need(path, what: str):
    if path is None or not Path(path).exists():
        raise ExperimentError(f"missing {what} checkpoint (pass it or use --train)")
    return path


def run_experiment(spec: ExperimentSpec, scale: ToyScale | None = None) -> str:
    """Run one table analog; returns the text report (also written under ``out_dir``)."""
    scale = scale or ToyScale()
    out = spec.out_dir
    if spec.kind == "clustering-comparison":
        summaries = []
        for s in spec.seeds:
            summary, per = clustering_comparison(spec.meetings, s)
            write_report(out, f"clustering_seed{s}_instances", per,
                         ["instance", "method", "true", "estimated", "precision", "recall"])
            summaries += [dict(r, seed=s) for r in summary]
        acc = {m: np.mean([r["count_accuracy"] for r in summaries if r["method"] == m]) for m in METHODS}
        order = [(f"prism-hdbscan count_accuracy >= {m}", acc["prism-hdbscan"] >= acc[m])
                 for m in METHODS if m != "prism-hdbscan"]
        return write_report(out, "clustering", summaries,
                            ["seed", "method", "count_accuracy", "precision", "recall"], order)
    if spec.kind in ("verification", "ablation"):
        arms = (True, False) if spec.kind == "ablation" else (True,)
        rows = run_verification(spec.seeds, out / "runs", arms, scale)
        order = []
        if spec.kind == "ablation":
            order = [("median EER phonetic <= no-phonetic + 0.02",
                      median_eer(rows, "phonetic") <= median_eer(rows, "no-phonetic") + 0.02)]
        return write_report(out, spec.kind, rows, ["seed", "arm", "eer"], order)
    # der-by-speaker-count
    rows = []
    for s in spec.seeds:
        if spec.train:
            ver_ckpt, _ = train_verification(s, True, out / "runs" / f"seed{s}", scale)
            diar_ckpt, _ = train_diarization(ver_ckpt, s, out / "runs" / f"seed{s}", scale)
        else:
            ver_ckpt = _need(spec.ver_ckpt, "verification")
            diar_ckpt = _need(spec.diar_ckpt, "diarization")
        ver, _ = load_checkpoint(ver_ckpt)
        diar, _ = load_checkpoint(diar_ckpt)
        rows += [dict(r, seed=s) for r in der_by_speaker_count(ver, diar, spec.meetings, s)]
    write_report(out, "der_meetings", rows, ["seed", "meeting", "method", "speakers", "estimated", "der"])
    counts = sorted({r["speakers"] for r in rows})
    summary = [{"method": m, "speakers": c, "der": aggregate_der(rows, m, c)}
               for m in ("prism-hdbscan", "kmeans") for c in counts]
    summary += [{"method": m, "speakers": "all", "der": aggregate_der(rows, m)} for m in ("prism-hdbscan", "kmeans")]
    order = [("prism-hdbscan DER <= kmeans DER", aggregate_der(rows, "prism-hdbscan") <= aggregate_der(rows, "kmeans"))]
    return write_report(out, "der_by_speaker_count", summary, ["method", "speakers", "der"], order)
