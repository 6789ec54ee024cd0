"""Deterministic training loops for pre-training and both fine-tuning modes.

Batches are indexed by step: batch ``k`` is a pure function of
``(data seed, k)``, so a run is reproducible regardless of how the data is
produced and a resumed run sees the same batches it would have seen.

Config files are plain ``key=value`` lines (``#`` starts a comment). Top-level
keys are :class:`TrainConfig` fields; ``model.*`` keys go to
:class:`~prism.model.ModelConfig`, ``loss.*`` keys to
:class:`~prism.losses.LossHyperParams` and ``data.*`` keys to :class:`DataConfig`.
Unknown keys are an error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import datasim
from .losses import LossHyperParams, diarization_loss, pair_frame_labels, prism_loss, verification_loss
from .model import (
    DIAR_STREAMS,
    ModelConfig,
    PrismEncoder,
    build_model,
    downsample_activity,
    downsample_labels,
    forward_pair_tensors,
    init_head,
    load_tensors,
    pair_layout,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune_ver", "finetune_diar")
OPTIMIZERS = ("adam", "sgd-momentum")
CHECKPOINT_NAME = "checkpoint.prsm"
LOSS_CURVE_NAME = "loss_curve.txt"


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_speakers: int = 20
    utterances_per_speaker: int = 10
    min_utt_s: float = 1.0
    max_utt_s: float = 2.5
    pair_crop_s: float = 5.0
    seed: int = 0
    norm_samples: int = 32


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    batch_size: int = 8
    steps: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    warmup_steps: int = 0
    grad_clip: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    init_checkpoint: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossHyperParams = field(default_factory=LossHyperParams)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def _coerce(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind == "tuple":
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def _kind(value):
    if isinstance(value, bool):
        return bool
    if isinstance(value, tuple):
        return "tuple"
    return type(value)


def parse_config(text: str) -> TrainConfig:
    top, sub = {}, {"model": {}, "loss": {}, "data": {}}
    defaults = TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            group, name = key.split(".", 1)
            if group not in sub:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            target = getattr(defaults, group)
            if name not in {f.name for f in fields(target)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            sub[group][name] = _coerce(_kind(getattr(target, name)), value, key)
        else:
            if key not in {f.name for f in fields(TrainConfig)} or key in sub:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(_kind(getattr(defaults, key)), value, key)
    try:
        return TrainConfig(
            **top,
            model=ModelConfig(**sub["model"]),
            loss=LossHyperParams(**sub["loss"]),
            data=DataConfig(**sub["data"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in ("model", "loss", "data"):
            for g in fields(v):
                lines.append(f"{f.name}.{g.name}={_fmt(getattr(v, g.name))}")
        else:
            lines.append(f"{f.name}={_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# --- data sources ---------------------------------------------------------

def _step_seed(seed: int, step: int, i: int, stream: int = 41) -> int:
    return int(np.random.default_rng([seed, step, i, stream]).integers(2**31))


class PretrainSource:
    """Batches of multi-speaker concatenations drawn from a finite utterance bank."""

    def __init__(self, bank: datasim.UtteranceBank, utterances_per_speaker: int, seed: int):
        self.bank, self.upspk, self.seed = bank, utterances_per_speaker, seed

    def _make(self, seed: int) -> datasim.TrainingSample:
        return datasim.make_pretrain_sample(self.bank, seed, self.upspk)

    def sample(self, step: int, i: int) -> datasim.TrainingSample:
        return self._make(_step_seed(self.seed, step, i))

    def batch(self, step: int, n: int):
        return [self.sample(step, i) for i in range(n)]

    def feature_matrices(self, n: int):
        # a separate stream, so statistics never reuse training batches
        return [self._make(_step_seed(self.seed, 0, i, stream=43)).features for i in range(n)]


class DiarizationSource(PretrainSource):
    def _make(self, seed: int) -> datasim.TrainingSample:
        return datasim.make_diarization_sample(self.bank, seed, self.upspk)


class VerificationSource:
    """Balanced positive/negative pairs over the bank's speakers (class = bank index)."""

    def __init__(self, bank: datasim.UtteranceBank, utterances_per_speaker: int, seed: int,
                 crop_s: float = 5.0):
        self.bank, self.upspk, self.seed, self.crop_s = bank, utterances_per_speaker, seed, crop_s
        self.index = {s.speaker_id: i for i, s in enumerate(bank.speakers)}

    @property
    def num_classes(self) -> int:
        return len(self.bank)

    def batch(self, step: int, n: int):
        pairs = datasim.make_verification_batch(
            self.bank, n, _step_seed(self.seed, step, 0),
            crop_s=self.crop_s, utterances_per_speaker=self.upspk,
        )
        return [(u1, u2, same, self.index[u1.speaker_id], self.index[u2.speaker_id]) for u1, u2, same in pairs]

    def feature_matrices(self, n: int):
        return [self.bank.get(s, j).featurized() for s in range(len(self.bank))
                for j in range(self.upspk)][:n]


def make_bank(data: DataConfig, speaker_seed: int | None = None, prefix: str = "spk",
              duration_range: tuple[float, float] | None = None) -> datasim.UtteranceBank:
    seed = data.seed if speaker_seed is None else speaker_seed
    speakers = datasim.make_speakers(data.num_speakers, seed=seed, prefix=prefix)
    dr = duration_range or (data.min_utt_s, data.max_utt_s)
    return datasim.UtteranceBank(speakers, dr, seed=seed)


def make_source(cfg: TrainConfig, bank: datasim.UtteranceBank | None = None):
    if bank is None:
        crop = cfg.data.pair_crop_s
        bank = make_bank(cfg.data, duration_range=(crop, crop) if cfg.mode == "finetune_ver" else None)
    if cfg.mode == "pretrain":
        return PretrainSource(bank, cfg.data.utterances_per_speaker, cfg.data.seed)
    if cfg.mode == "finetune_diar":
        return DiarizationSource(bank, cfg.data.utterances_per_speaker, cfg.data.seed)
    return VerificationSource(bank, cfg.data.utterances_per_speaker, cfg.data.seed, cfg.data.pair_crop_s)


# --- losses per mode --------------------------------------------------------

def input_statistics(model: PrismEncoder, feats) -> tuple[torch.Tensor, torch.Tensor]:
    m = np.concatenate([f.matrix(model.cfg.use_phonetic) for f in feats])
    mean = m.mean(0)
    std = np.maximum(m.std(0), 1e-3)
    return torch.as_tensor(mean, dtype=model.input_mean.dtype), torch.as_tensor(std, dtype=model.input_std.dtype)


def pretrain_loss(model: PrismEncoder, batch, hp: LossHyperParams) -> torch.Tensor:
    f = model.cfg.downsample
    samples = []
    for s in batch:
        y = model(model.features_tensor(s.features).unsqueeze(0))[0]
        samples.append((y, downsample_labels(s.frame_labels, f)))
    return prism_loss(samples, hp)


def _ams_weights(model: PrismEncoder) -> torch.Tensor:
    return F.normalize(model.heads["ams"].weight, dim=-1, eps=1e-12)


def ver_loss(model: PrismEncoder, batch, hp: LossHyperParams) -> torch.Tensor:
    f = model.cfg.downsample
    groups: dict[tuple[int, int], list] = {}
    for item in batch:
        u1, u2 = item[0].featurized(), item[1].featurized()
        groups.setdefault((len(u1), len(u2)), []).append(item)
    W = _ams_weights(model)
    total, count = 0.0, 0
    for (t1, t2), items in sorted(groups.items()):
        x1 = torch.stack([model.features_tensor(it[0].featurized()) for it in items])
        x2 = torch.stack([model.features_tensor(it[1].featurized()) for it in items])
        p1, p2, y, _, _ = forward_pair_tensors(model, x1, x2)
        gap, _, _ = pair_layout(t1, t2, f)
        frames = [(y[b], downsample_labels(pair_frame_labels(t1, t2, gap, it[2]), f))
                  for b, it in enumerate(items)]
        ids1 = [it[3] for it in items]
        ids2 = [it[4] for it in items]
        total = total + len(items) * verification_loss(p1, p2, frames, ids1, ids2, W, hp)
        count += len(items)
    return total / count


def diar_loss(model: PrismEncoder, batch, hp: LossHyperParams) -> torch.Tensor:
    f = model.cfg.downsample
    losses = []
    for s in batch:
        h = model.hidden(model.features_tensor(s.features).unsqueeze(0))[0]
        logits = model.diar_logits(h)
        act = downsample_activity(s.activity, f)
        ref = np.zeros((len(act), logits.shape[1]))
        ref[:, :act.shape[1]] = act
        losses.append(diarization_loss(logits, ref, model.embed(h), downsample_labels(s.frame_labels, f), hp))
    return torch.stack(losses).mean()


LOSS_FNS: dict[str, Callable] = {"pretrain": pretrain_loss, "finetune_ver": ver_loss, "finetune_diar": diar_loss}


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: PrismEncoder
    checkpoint: Path | None
    losses: list[float]
    missing: list[str]


def _optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


def prepare_model(cfg: TrainConfig, source, init: str | Path | None = None) -> tuple[PrismEncoder, list[str], int]:
    """Build the trunk (from ``init`` if given), attach the mode's head.

    Returns (model, names of freshly initialized tensors, starting step).
    """
    start = 0
    if init:
        ckpt_cfg, meta, tensors = read_checkpoint(init)
        model = build_model(ckpt_cfg, seed=cfg.seed)
        if cfg.mode == "pretrain" and meta.get("mode") == "pretrain":
            start = int(meta.get("step", 0))
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        tensors = None
    if cfg.mode == "finetune_ver":
        n = source.num_classes
        if tensors is not None and "heads.ams.weight" in tensors and tensors["heads.ams.weight"].shape[0] != n:
            tensors = {k: v for k, v in tensors.items() if k != "heads.ams.weight"}
        init_head(model.add_ams_head(n), seed=cfg.seed + 1)
    elif cfg.mode == "finetune_diar":
        init_head(model.add_diar_head(DIAR_STREAMS), seed=cfg.seed + 2)
    missing: list[str] = []
    if tensors is not None:
        if "heads.ams.weight" in tensors and "ams" not in model.heads:
            model.add_ams_head(tensors["heads.ams.weight"].shape[0])
        if "heads.diar.weight" in tensors and "diar" not in model.heads:
            model.add_diar_head(tensors["heads.diar.weight"].shape[0])
        missing = load_tensors(model, tensors, strict=False)
        for name in missing:
            log.info("checkpoint %s has no %s; using fresh seeded init", init, name)
    else:
        mean, std = input_statistics(model, source.feature_matrices(cfg.data.norm_samples))
        model.input_mean.copy_(mean)
        model.input_std.copy_(std)
    return model, missing, start


def train(cfg: TrainConfig, out_dir: str | Path | None = None, source=None,
          init: str | Path | None = None, progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps; write the checkpoint and loss curve to ``out_dir``."""
    torch.manual_seed(cfg.seed)
    source = source or make_source(cfg)
    init = init or cfg.init_checkpoint or None
    model, missing, start = prepare_model(cfg, source, init)
    model.train()
    opt = _optimizer(cfg, [p for _, p in sorted(model.named_parameters())])
    loss_fn = LOSS_FNS[cfg.mode]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve = []
    for step in range(start, start + cfg.steps):
        if cfg.warmup_steps:
            scale = min(1.0, (step + 1) / cfg.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * scale
        batch = source.batch(step, cfg.batch_size)
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(model, batch, cfg.loss)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss ({value}) at step {step}; aborting")
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        curve.append(value)
        if progress is not None:
            progress(step, value)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step{step + 1}.prsm", model, _meta(cfg, step + 1))
    model.eval()
    ckpt = None
    if out is not None:
        ckpt = out / CHECKPOINT_NAME
        save_checkpoint(ckpt, model, _meta(cfg, start + cfg.steps))
        with open(out / LOSS_CURVE_NAME, "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(curve):
                fh.write(f"{start + i},{v:.8f}\n")
    return TrainResult(model, ckpt, curve, missing)


def _meta(cfg: TrainConfig, step: int) -> dict[str, str]:
    return {"mode": cfg.mode, "seed": str(cfg.seed), "step": str(step)}


def read_loss_curve(path: str | Path) -> list[tuple[int, float]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, v = line.split(",")
        rows.append((int(s), float(v)))
    return rows


def with_mode(cfg: TrainConfig, mode: str, **kw) -> TrainConfig:
    return replace(cfg, mode=mode, **kw)
