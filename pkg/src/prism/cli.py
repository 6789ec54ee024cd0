"""Command-line entry point: ``prism <subcommand> ...``.

Every subcommand returns 0 on success. On failure it prints a single line
``error: <ExceptionType>: <reason>`` to stderr and exits with status 2.
``PRISM_SEED`` supplies the seed whenever ``--seed`` is not given.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasim
from .clustering import METHODS, cluster
from .diarization import DiarConfig, ScoreCache, diarize, score_all_pairs
from .experiments import KINDS, ExperimentSpec, run_experiment
from .features import (
    N_MELS,
    N_PHONETIC,
    SAMPLE_RATE,
    ExternalPhoneticProvider,
    FeatureMatrix,
    Waveform,
    featurize,
    read_feat,
    write_feat,
)
from .metrics import cluster_pr, der, eer, eer_curve
from .model import checkpoint_hash, load_checkpoint, score_pair
from .timeline import Timeline, read_rttm, write_rttm
from .trainer import ConfigError, load_config, train

log = logging.getLogger("prism")


class CliError(RuntimeError):
    pass


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("PRISM_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"PRISM_SEED must be an integer, got {env!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --- I/O helpers -------------------------------------------------------------------

def features_from_file(path) -> FeatureMatrix:
    m = read_feat(path).astype(np.float64)
    if m.shape[1] == N_MELS + N_PHONETIC:
        return FeatureMatrix(m[:, :N_MELS], m[:, N_MELS:])
    if m.shape[1] == N_MELS:
        return FeatureMatrix(m, np.zeros((m.shape[0], N_PHONETIC)))
    raise CliError(f"{path}: expected {N_MELS} or {N_MELS + N_PHONETIC} columns, got {m.shape[1]}")


def read_wav(path) -> Waveform:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    return Waveform(np.asarray(data, dtype=np.float64), int(rate))


def write_wav(path, w: Waveform) -> None:
    from scipy.io import wavfile

    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def _load_features(args) -> FeatureMatrix:
    if args.features:
        return features_from_file(args.features)
    w = read_wav(args.audio)
    if w.sample_rate != SAMPLE_RATE:
        raise CliError(f"{args.audio}: sample rate {w.sample_rate} Hz, expected {SAMPLE_RATE}")
    provider = ExternalPhoneticProvider(args.phonetic) if args.phonetic else None
    return featurize(w, provider)


def _write_report(out: Path, values: dict[str, float | int | str]) -> str:
    out.mkdir(parents=True, exist_ok=True)
    text = "".join(f"{k}={v:.6f}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in values.items())
    (out / "report.txt").write_text(text)
    return text


# --- subcommands --------------------------------------------------------------------

def cmd_simulate(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    pool = datasim.make_speakers(args.pool, seed=seed, prefix="sim")
    counts = args.speakers
    for i in range(args.meetings):
        c = counts[i % len(counts)]
        fid = f"meeting{i:03d}"
        mt = datasim.simulate_meeting(pool, c, args.duration, args.overlap, seed=seed * 1000 + i, file_id=fid)
        write_wav(out / f"{fid}.wav", mt.waveform)
        write_feat(out / f"{fid}.feat", mt.features.matrix(True))
        write_rttm(out / f"{fid}.rttm", mt.reference)
        print(f"{fid} speakers={c} spans={len(mt.reference)}")


def _cmd_train(mode: str):
    def run(args) -> None:
        cfg = load_config(args.config)
        if cfg.mode != mode:
            log.info("config mode %s overridden by subcommand (%s)", cfg.mode, mode)
            cfg = replace(cfg, mode=mode)
        if args.seed is not None or os.environ.get("PRISM_SEED"):
            cfg = replace(cfg, seed=_seed(args))
        init = args.resume or cfg.init_checkpoint or None
        if mode != "pretrain" and not init:
            raise ConfigError(f"{mode} needs --resume or init_checkpoint")
        res = train(cfg, args.out, init=init)
        print(f"checkpoint={res.checkpoint}")
        print(f"final_loss={res.losses[-1]:.6f}")
    return run


def cmd_score_pairs(args) -> None:
    model, _ = load_checkpoint(args.ckpt)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckid = checkpoint_hash(args.ckpt)
    cache = ScoreCache(args.cache) if args.cache else None
    if args.trials:
        fdir = Path(args.features_dir or ".")
        feats: dict[str, FeatureMatrix] = {}
        rows = []
        with open(args.trials) as fh:
            for row in csv.DictReader(fh):
                for key in ("enroll_id", "test_id"):
                    if row[key] not in feats:
                        feats[row[key]] = features_from_file(fdir / f"{row[key]}.feat")
                rows.append(row)
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["enroll_id", "test_id", "score", "is_target"])
            for row in rows:
                s = score_pair(model, feats[row["enroll_id"]], feats[row["test_id"]])
                w.writerow([row["enroll_id"], row["test_id"], f"{s:.6f}", row.get("is_target", "")])
        print(f"scores={out / 'scores.csv'} trials={len(rows)}")
        return
    if not args.features:
        raise CliError("give --features files (similarity matrix) or --trials (score list)")
    segs = [features_from_file(p) for p in args.features]
    g = score_all_pairs(segs, model, cache=cache, checkpoint_id=ckid)
    write_feat(out / "similarity.feat", g.sim)
    (out / "segments.txt").write_text("".join(f"{i},{p}\n" for i, p in enumerate(args.features)))
    print(f"similarity={out / 'similarity.feat'} segments={len(segs)}")


def cmd_cluster(args) -> None:
    sim = read_feat(args.sim).astype(np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise CliError(f"{args.sim}: similarity matrix must be square, got {sim.shape}")
    r = cluster(sim, args.method, k=args.k, min_cluster_size=args.min_cluster_size,
                seed=_seed(args), threshold=args.threshold)
    text = "".join(f"{i},{c}\n" for i, c in enumerate(r.labels))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_diarize(args) -> None:
    feats = _load_features(args)
    ver, _ = load_checkpoint(args.ver_ckpt)
    diar, _ = load_checkpoint(args.diar_ckpt)
    ver.eval()
    diar.eval()
    cfg = DiarConfig(method=args.method, k=args.k, min_cluster_size=args.min_cluster_size,
                     segment_s=args.segment_s, hop_s=args.hop_s, seed=_seed(args))
    src = Path(args.features or args.audio)
    fid = args.file_id or src.stem
    regions = None
    if args.oracle_vad:
        refs = read_rttm(args.oracle_vad)
        ref = refs.get(fid) or (next(iter(refs.values())) if len(refs) == 1 else None)
        if ref is None:
            raise CliError(f"{args.oracle_vad}: no reference for file id {fid!r}")
        regions = ref.speech_regions()
    cache = ScoreCache(args.cache) if args.cache else None
    res = diarize(feats, ver, diar, cfg, regions=regions, file_id=fid, cache=cache,
                  checkpoint_id=checkpoint_hash(args.ver_ckpt))
    Path(args.out_rttm).parent.mkdir(parents=True, exist_ok=True)
    write_rttm(args.out_rttm, res.timeline)
    print(f"speakers={res.num_speakers} segments={len(res.segmentation)} "
          + " ".join(f"{k}_s={v:.3f}" for k, v in res.timings.items()))


def cmd_eval(args) -> None:
    out = Path(args.out)
    if args.task == "eer":
        if not args.scores:
            raise CliError("--task eer needs --scores")
        scores, flags = [], []
        with open(args.scores) as fh:
            for row in csv.DictReader(fh):
                scores.append(float(row["score"]))
                flags.append(row["is_target"].strip().lower() in ("1", "true", "yes", "target"))
        values = {"eer": eer(scores, flags), "trials": len(scores), "targets": int(sum(flags))}
        thr, far, frr = eer_curve(scores, flags)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eer_curve.csv", "w") as fh:
            fh.write("threshold,far,frr\n")
            for t, a, r in zip(thr, far, frr):
                fh.write(f"{t:.6f},{a:.6f},{r:.6f}\n")
    elif args.task == "der":
        if not (args.hyp and args.ref):
            raise CliError("--task der needs --hyp and --ref")
        hyps, refs = read_rttm(args.hyp), read_rttm(args.ref)
        total = None
        for fid, ref in refs.items():
            hyp = hyps.get(fid)
            if hyp is None:
                hyp = Timeline([], fid)
            sc = der(hyp, ref, collar_s=args.collar, score_overlap=not args.no_score_overlap)
            total = sc if total is None else total + sc
        if total is None:
            raise CliError(f"{args.ref}: no reference timelines")
        values = {"der": total.der, "miss_s": total.miss_s, "falsealarm_s": total.falsealarm_s,
                  "confusion_s": total.confusion_s, "total_ref_speech_s": total.total_ref_speech_s,
                  "files": len(refs)}
    else:
        if not (args.labels and args.truth):
            raise CliError("--task clustering needs --labels and --truth")
        hyp = _read_pairs(args.labels)
        ref = _read_pairs(args.truth)
        if set(hyp) != set(ref):
            raise CliError("labels and truth list different segment ids")
        ids = sorted(hyp)
        p, r = cluster_pr([hyp[i] for i in ids], [ref[i] for i in ids])
        values = {"precision": p, "recall": r, "segments": len(ids),
                  "clusters": len(set(hyp.values())), "speakers": len(set(ref.values())),
                  "count_correct": int(len(set(hyp.values())) == len(set(ref.values())))}
    sys.stdout.write(_write_report(out, values))


def _read_pairs(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, b = line.split(",")[:2]
            out[a.strip()] = b.strip()
    return out


def cmd_ablate(args) -> None:
    spec = ExperimentSpec("ablation", args.seeds or [_seed(args)], Path(args.out), train=True)
    sys.stdout.write(run_experiment(spec))


def cmd_experiment(args) -> None:
    spec = ExperimentSpec(args.kind, args.seeds or [_seed(args)], Path(args.out), train=args.train,
                          ver_ckpt=args.ver_ckpt, diar_ckpt=args.diar_ckpt, meetings=args.meetings)
    sys.stdout.write(run_experiment(spec))


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prism", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write synthetic meetings (wav, FEAT, reference RTTM)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--meetings", type=int, default=1, help="number of meetings")
    s.add_argument("--speakers", type=_int_list, default=[2, 3, 4],
                   help="comma-separated speaker counts, cycled over meetings (2-8)")
    s.add_argument("--duration", type=float, default=180.0, help="meeting length in seconds (>= 60)")
    s.add_argument("--overlap", type=float, default=0.0, help="overlap ratio in [0, 0.2]")
    s.add_argument("--pool", type=int, default=20, help="speaker pool size")
    s.add_argument("--seed", type=int, help="seed (default: PRISM_SEED or 0)")
    s.set_defaults(fn=cmd_simulate)

    for name, mode in (("pretrain", "pretrain"), ("finetune-ver", "finetune_ver"),
                       ("finetune-diar", "finetune_diar")):
        t = sub.add_parser(name, help=f"train in {mode} mode")
        t.add_argument("--config", required=True, help="key=value config file")
        t.add_argument("--out", required=True, help="directory for checkpoint.prsm and loss_curve.txt")
        t.add_argument("--resume", help="checkpoint to continue from (pretrain) or initialize from")
        t.add_argument("--seed", type=int, help="override the config seed (default: PRISM_SEED if set)")
        t.set_defaults(fn=_cmd_train(mode))

    s = sub.add_parser("score-pairs", help="score all pairs of segments, or a trial list")
    s.add_argument("--ckpt", required=True, help="verification checkpoint")
    s.add_argument("--features", nargs="*", help="FEAT segment files; writes a square similarity matrix")
    s.add_argument("--trials", help="CSV with enroll_id,test_id[,is_target]; writes scores.csv")
    s.add_argument("--features-dir", help="directory holding <id>.feat for --trials")
    s.add_argument("--cache", help="persistent pair-score cache (CSV)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_score_pairs)

    c = sub.add_parser("cluster", help="cluster a square FEAT similarity matrix")
    c.add_argument("--sim", required=True, help="square similarity matrix (FEAT layout)")
    c.add_argument("--method", choices=METHODS, default="prism-hdbscan")
    c.add_argument("--k", type=int, default=3, help="core-distance neighbour (prism-hdbscan)")
    c.add_argument("--min-cluster-size", type=int, default=2, help="condensed-tree minimum (prism-hdbscan)")
    c.add_argument("--threshold", type=float, default=0.5, help="AHC distance threshold")
    c.add_argument("--seed", type=int, help="seed for k-means / spectral")
    c.add_argument("--out", help="write segment_id,cluster_id lines here (default stdout)")
    c.set_defaults(fn=cmd_cluster)

    d = sub.add_parser("diarize", help="run the full diarization pipeline on one recording")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", help="16 kHz WAV file")
    src.add_argument("--features", help="FEAT feature file (40 or 140 columns)")
    d.add_argument("--phonetic", help="FEAT phonetic matrix aligned to --audio (optional)")
    d.add_argument("--ver-ckpt", required=True, help="verification checkpoint (pair scoring)")
    d.add_argument("--diar-ckpt", required=True, help="diarization checkpoint (frame refinement)")
    d.add_argument("--out-rttm", required=True, help="output RTTM path")
    d.add_argument("--method", choices=METHODS, default="prism-hdbscan")
    d.add_argument("--oracle-vad", metavar="RTTM", help="use speech regions of this reference RTTM")
    d.add_argument("--file-id", help="RTTM file id (default: input file stem)")
    d.add_argument("--k", type=int, default=3)
    d.add_argument("--min-cluster-size", type=int, default=2)
    d.add_argument("--segment-s", type=float, default=1.5, help="segment length in seconds")
    d.add_argument("--hop-s", type=float, default=0.75, help="segment hop in seconds")
    d.add_argument("--cache", help="persistent pair-score cache (CSV)")
    d.add_argument("--seed", type=int)
    d.set_defaults(fn=cmd_diarize)

    e = sub.add_parser("eval", help="EER, DER or clustering precision/recall")
    e.add_argument("--task", choices=("eer", "der", "clustering"), required=True)
    e.add_argument("--scores", help="CSV enroll_id,test_id,score,is_target (eer)")
    e.add_argument("--hyp", help="hypothesis RTTM (der)")
    e.add_argument("--ref", help="reference RTTM (der)")
    e.add_argument("--collar", type=float, default=0.25, help="collar in seconds (der)")
    e.add_argument("--no-score-overlap", action="store_true", help="skip overlapped reference speech (der)")
    e.add_argument("--labels", help="segment_id,cluster_id lines (clustering)")
    e.add_argument("--truth", help="segment_id,speaker lines (clustering)")
    e.add_argument("--out", required=True, help="directory for report.txt (and eer_curve.csv)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train with and without phonetic features; compare EER")
    a.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: PRISM_SEED or 0)")
    a.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    x = sub.add_parser("experiment", help="regenerate a table analog on synthetic data")
    x.add_argument("--kind", choices=KINDS, required=True)
    x.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: PRISM_SEED or 0)")
    x.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    x.add_argument("--out", required=True)
    x.add_argument("--train", action="store_true", help="train missing checkpoints at toy scale")
    x.add_argument("--ver-ckpt", help="verification checkpoint (der-by-speaker-count)")
    x.add_argument("--diar-ckpt", help="diarization checkpoint (der-by-speaker-count)")
    x.add_argument("--meetings", type=int, default=100,
                   help="instances (clustering-comparison) or meetings per seed (der-by-speaker-count)")
    x.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:  # one-line, machine-parseable failure
        reason = " ".join(str(exc).split()) or "failed"
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
