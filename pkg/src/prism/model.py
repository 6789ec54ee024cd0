"""The PRISM encoder and its checkpoint format.

Two strided TDNN layers (x4 downsampling) feed six transformer encoder
layers, each followed by a residual dilated convolution. Self-attention is
global over the whole input and there are no positional encodings; position
enters only through the convolutions.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import FeatureMatrix, HOP_SECONDS
from .numerics import ContractError, conv1d_dilated

log = logging.getLogger(__name__)

PAIR_GAP_SECONDS = 3.0
DIAR_STREAMS = 4


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dim: int = 140
    model_dim: int = 64
    embedding_dim: int = 32
    heads: int = 4
    encoder_layers: int = 6
    tdnn_kernel: int = 5
    tdnn_stride: int = 2
    tdnn_layers: int = 2
    conv_kernel: int = 3
    dilation_schedule: tuple[int, ...] = (1, 2, 4, 8, 9, 10)
    ffn_mult: int = 4
    use_phonetic: bool = True

    def __post_init__(self):
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        if len(self.dilation_schedule) != self.encoder_layers:
            raise ModelError("dilation_schedule needs one entry per encoder layer")
        if any(d < 1 for d in self.dilation_schedule):
            raise ModelError("dilations must be positive")
        if self.model_dim % self.heads:
            raise ModelError("model_dim must be divisible by heads")
        if self.conv_kernel % 2 == 0 or self.tdnn_kernel % 2 == 0:
            raise ModelError("kernel sizes must be odd")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.model_dim

    @property
    def downsample(self) -> int:
        return self.tdnn_stride ** self.tdnn_layers

    def receptive_field(self) -> int:
        """Input frames seen by one output frame through the convolutional path."""
        half, scale = 0, 1
        for _ in range(self.tdnn_layers):
            half += (self.tdnn_kernel - 1) // 2 * scale
            scale *= self.tdnn_stride
        half += sum((self.conv_kernel - 1) // 2 * d * scale for d in self.dilation_schedule)
        return 2 * half + 1

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            if k not in types:
                raise ModelError(f"unknown model config key {k!r}")
            kw[k] = _parse_value(getattr(cls, k, None) if k != "dilation_schedule" else (), v)
        return cls(**kw)


def _parse_value(default, v: str):
    if isinstance(default, bool):
        return v.strip().lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        return tuple(int(x) for x in v.split(",") if x.strip())
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    return v


def downsampled_length(T: int, factor: int = 4) -> int:
    return -(-T // factor)


def downsample_labels(labels: np.ndarray, factor: int = 4) -> np.ndarray:
    """Majority label of each block of ``factor`` input frames (ties: smallest)."""
    labels = np.asarray(labels)
    T = len(labels)
    Tp = downsampled_length(T, factor)
    out = np.empty(Tp, dtype=labels.dtype)
    for t in range(Tp):
        vals, counts = np.unique(labels[t * factor:(t + 1) * factor], return_counts=True)
        out[t] = vals[np.argmax(counts)]
    return out


def downsample_activity(activity: np.ndarray, factor: int = 4) -> np.ndarray:
    """Block-majority of a T x S binary activity matrix."""
    T, S = activity.shape
    Tp = downsampled_length(T, factor)
    pad = np.zeros((Tp * factor - T, S), dtype=float)
    blocks = np.concatenate([activity.astype(float), pad]).reshape(Tp, factor, S)
    counts = np.minimum(factor, T - np.arange(Tp) * factor)
    return (blocks.sum(1) * 2 > counts[:, None]).astype(np.float64)


class Conv(nn.Module):
    """Weight stored as (K, C_in, C_out), matching ``conv1d_dilated``."""

    def __init__(self, c_in, c_out, kernel, dilation=1, stride=1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(kernel, c_in, c_out))
        self.bias = nn.Parameter(torch.empty(c_out))
        self.dilation, self.stride = dilation, stride

    def forward(self, x):
        return conv1d_dilated(x, self.weight, self.dilation, self.stride, self.bias)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, dilation: int):
        super().__init__()
        d = cfg.model_dim
        self.heads = cfg.heads
        self.norm_attn = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)
        self.norm_conv = nn.LayerNorm(d)
        self.conv = Conv(d, d, cfg.conv_kernel, dilation=dilation)

    def attention(self, x, identity: bool):
        B, T, D = x.shape
        if identity:
            # each frame attends only to itself: softmax over one key is 1
            v = self.qkv(x)[..., 2 * D:]
            return self.out(v)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        h, dh = self.heads, D // self.heads
        q = q.reshape(B, T, h, dh).transpose(1, 2)
        k = k.reshape(B, T, h, dh).transpose(1, 2)
        v = v.reshape(B, T, h, dh).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)

    def forward(self, x, identity_attention: bool = False):
        x = x + self.attention(self.norm_attn(x), identity_attention)
        x = x + self.ffn_out(torch.relu(self.ffn_in(self.norm_ffn(x))))
        x = x + torch.relu(self.conv(self.norm_conv(x)))
        return x


class PrismEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.tdnn = nn.ModuleList(
            [
                Conv(cfg.input_dim if i == 0 else d, d, cfg.tdnn_kernel, stride=cfg.tdnn_stride)
                for i in range(cfg.tdnn_layers)
            ]
        )
        self.layers = nn.ModuleList([EncoderLayer(cfg, dl) for dl in cfg.dilation_schedule])
        self.final_norm = nn.LayerNorm(d)
        self.project = nn.Linear(d, cfg.embedding_dim)
        self.register_buffer("input_mean", torch.zeros(cfg.input_dim))
        self.register_buffer("input_std", torch.ones(cfg.input_dim))
        self.heads = nn.ModuleDict()

    # heads are mode-specific and appended on demand
    def add_ams_head(self, num_classes: int):
        dtype = self.project.weight.dtype
        self.heads["ams"] = nn.Linear(self.cfg.embedding_dim, num_classes, bias=False, dtype=dtype)
        return self.heads["ams"]

    def add_diar_head(self, streams: int = DIAR_STREAMS):
        dtype = self.project.weight.dtype
        self.heads["diar"] = nn.Linear(self.cfg.model_dim, streams, dtype=dtype)
        return self.heads["diar"]

    def hidden(self, x: torch.Tensor, identity_attention: bool = False) -> torch.Tensor:
        """Normalized input (B, T, C) -> final-norm hidden states (B, T', D)."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[1] < 8:
            raise ModelError(f"input has {x.shape[1]} frames; at least 8 are required")
        return self.encode(self.tdnn_forward(x), identity_attention)

    def tdnn_forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.tdnn:
            x = torch.relu(conv(x))
        return x

    def encode(self, h: torch.Tensor, identity_attention: bool = False) -> torch.Tensor:
        for layer in self.layers:
            h = layer(h, identity_attention)
        return self.final_norm(h)

    def embed(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.project(h), dim=-1, eps=1e-12)

    def diar_logits(self, h: torch.Tensor) -> torch.Tensor:
        if "diar" not in self.heads:
            raise ModelError("model has no diarization head")
        return self.heads["diar"](h)

    def normalize_input(self, m: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(m, dtype=self.input_mean.dtype)
        return (x - self.input_mean) / self.input_std

    def features_tensor(self, feats: FeatureMatrix) -> torch.Tensor:
        return self.normalize_input(feats.matrix(self.cfg.use_phonetic))

    def forward(self, x: torch.Tensor, identity_attention: bool = False) -> torch.Tensor:
        return self.embed(self.hidden(x, identity_attention))


def init_params(model: PrismEncoder, seed: int) -> PrismEncoder:
    """Fan-in scaled uniform init, seeded; layer norms start at identity."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in sorted(model.named_parameters()):
        with torch.no_grad():
            owner = name.rsplit(".", 2)[-2]
            if "norm" in owner:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            else:
                fan_in = _fan_in(name, p)
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
    return model


def _fan_in(name: str, p: torch.Tensor) -> int:
    if p.dim() == 3:  # (K, C_in, C_out)
        return p.shape[0] * p.shape[1]
    if p.dim() == 2:
        return p.shape[1]
    return max(1, p.shape[0])


def init_head(head: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(head.named_parameters()):
            bound = 1.0 / math.sqrt(_fan_in(name, p))
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> PrismEncoder:
    model = PrismEncoder(cfg)
    init_params(model, seed)
    return model.to(dtype)


@dataclass
class FrameEmbeddings:
    y: torch.Tensor  # T' x embedding_dim, unit rows
    hidden: torch.Tensor | None = None  # T' x model_dim
    frame_labels_downsampled: np.ndarray | None = None


def forward(model: PrismEncoder, feats: FeatureMatrix, labels=None) -> FrameEmbeddings:
    x = model.features_tensor(feats).unsqueeze(0)
    h = model.hidden(x)[0]
    ds = None if labels is None else downsample_labels(labels, model.cfg.downsample)
    return FrameEmbeddings(model.embed(h), h, ds)


def pair_layout(len1: int, len2: int, factor: int = 4) -> tuple[int, int, int]:
    """(gap frames, start of utt2, total frames) for a zero-padded pair.

    The gap is at least ``PAIR_GAP_SECONDS`` and is stretched so the second
    utterance starts on the downsampling grid.
    """
    gap = int(round(PAIR_GAP_SECONDS / HOP_SECONDS))
    gap += (-(len1 + gap)) % factor
    return gap, len1 + gap, len1 + gap + len2


@dataclass
class PairOutput:
    pooled1: torch.Tensor
    pooled2: torch.Tensor
    frames: FrameEmbeddings
    ranges: tuple[tuple[int, int], tuple[int, int]]  # downsampled frame ranges


def pair_input(model: PrismEncoder, x1: torch.Tensor, x2: torch.Tensor):
    """Concatenate two normalized inputs (B, T, C) with zero frames in between."""
    if x1.dim() == 2:
        x1, x2 = x1.unsqueeze(0), x2.unsqueeze(0)
    gap, start2, _ = pair_layout(x1.shape[1], x2.shape[1], model.cfg.downsample)
    zeros = x1.new_zeros(x1.shape[0], gap, x1.shape[2])
    f = model.cfg.downsample
    r1 = (0, downsampled_length(x1.shape[1], f))
    r2 = (start2 // f, start2 // f + downsampled_length(x2.shape[1], f))
    return torch.cat([x1, zeros, x2], dim=1), (r1, r2)


def forward_pair_tensors(model: PrismEncoder, x1, x2, identity_attention: bool = False):
    x, (r1, r2) = pair_input(model, x1, x2)
    h = model.hidden(x, identity_attention)
    y = model.embed(h)
    p1 = F.normalize(y[:, r1[0]:r1[1]].mean(1), dim=-1, eps=1e-12)
    p2 = F.normalize(y[:, r2[0]:r2[1]].mean(1), dim=-1, eps=1e-12)
    return p1, p2, y, h, (r1, r2)


def forward_pair(model: PrismEncoder, utt1: FeatureMatrix, utt2: FeatureMatrix) -> PairOutput:
    if utt1.hop_seconds != utt2.hop_seconds:
        raise ModelError("paired utterances must share a frame hop")
    p1, p2, y, h, ranges = forward_pair_tensors(
        model, model.features_tensor(utt1), model.features_tensor(utt2)
    )
    return PairOutput(p1[0], p2[0], FrameEmbeddings(y[0], h[0]), ranges)


def _canonical(a: FeatureMatrix, b: FeatureMatrix) -> bool:
    """True when (a, b) is already in canonical order."""
    return feature_key(a) <= feature_key(b)


def score_pair(model: PrismEncoder, utt1: FeatureMatrix, utt2: FeatureMatrix) -> float:
    """Cosine of the pooled, context-conditioned embeddings.

    Scores are defined on unordered pairs: the pair is evaluated in a
    content-keyed canonical order, so ``score(a, b) == score(b, a)``.
    """
    if not _canonical(utt1, utt2):
        utt1, utt2 = utt2, utt1
    with torch.no_grad():
        out = forward_pair(model, utt1, utt2)
        return float(torch.clamp(out.pooled1 @ out.pooled2, -1.0, 1.0))


def score_pairs_batched(model: PrismEncoder, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Cosines for a batch of equal-length pairs (B, T1, C) x (B, T2, C)."""
    with torch.no_grad():
        p1, p2, *_ = forward_pair_tensors(model, x1, x2)
        return torch.clamp((p1 * p2).sum(-1), -1.0, 1.0)


class PairScorer:
    """Batched pair scoring that computes each segment's TDNN output once.

    The TDNN stack sees +-6 input frames around each output frame, far less
    than the pair gap, so the TDNN output of a pair is: utt1's own output
    (plus two frames into the gap), a constant vector for all-zero input, and
    utt2's output (from two frames before it). Only the encoder runs per pair.
    Results equal :func:`score_pair` up to float rounding.
    """

    MARGIN = 2

    def __init__(self, model: PrismEncoder, inputs: Sequence[torch.Tensor], keys: Sequence[bytes]):
        self.model = model
        f = model.cfg.downsample
        if f != 4 or model.cfg.tdnn_kernel != 5 or model.cfg.tdnn_layers != 2:
            raise ModelError("PairScorer assumes the default TDNN front end")
        self.keys = list(keys)
        self._plans: dict = {}
        self.lengths = [x.shape[0] for x in inputs]
        base_gap = int(round(PAIR_GAP_SECONDS / HOP_SECONDS))
        self.base_gap = base_gap
        with torch.no_grad():
            zeros = inputs[0].new_zeros(64, inputs[0].shape[1])
            self.const = model.tdnn_forward(zeros.unsqueeze(0))[0, 8]
            self.first, self.second = [], []
            for x in inputs:
                T = x.shape[0]
                gap, _, _ = pair_layout(T, 0, f)
                pad = x.new_zeros(gap, x.shape[1])
                a = model.tdnn_forward(torch.cat([x, pad]).unsqueeze(0))[0]
                self.first.append(a[: downsampled_length(T, f) + self.MARGIN])
                b = model.tdnn_forward(torch.cat([x.new_zeros(base_gap, x.shape[1]), x]).unsqueeze(0))[0]
                self.second.append(b[base_gap // f - self.MARGIN:])

    def canonical(self, i: int, j: int) -> tuple[int, int]:
        return (i, j) if self.keys[i] <= self.keys[j] else (j, i)

    def _front(self, i: int, j: int) -> torch.Tensor:
        f = 4
        T1 = self.lengths[i]
        gap, start2, _ = pair_layout(T1, self.lengths[j], f)
        n_const = start2 // f - downsampled_length(T1, f) - 2 * self.MARGIN
        mid = self.const.expand(n_const, -1)
        return torch.cat([self.first[i], mid, self.second[j]])

    def _plan(self, T1: int, T2: int):
        """Row layout of the compressed pair sequence for every encoder layer.

        Gap frames farther from both utterances than the accumulated
        dilation are bit-identical at each layer, so the gap interior is one
        representative row carrying a multiplicity (a log-count bias on its
        attention key). Rows are [explicit left..., representative, explicit right...].
        """
        key = (T1, T2)
        if key in self._plans:
            return self._plans[key]
        f = 4
        n1, n2 = downsampled_length(T1, f), downsampled_length(T2, f)
        _, start2, _ = pair_layout(T1, T2, f)
        lo, hi = n1, start2 // f  # gap positions [lo, hi)
        N = hi + n2
        centre = (lo + hi) // 2
        half = (self.model.cfg.conv_kernel - 1) // 2

        def layout(m):
            return list(range(0, lo + m)) + [-1] + list(range(hi - m, N))

        m = self.MARGIN
        first = torch.tensor([p if p >= 0 else lo + m for p in layout(m)])
        layers = []
        for d in self.model.cfg.dilation_schedule:
            rows_in, m2 = layout(m), m + d
            rows_out = layout(m2)
            if (hi - lo) - 2 * m2 < 1:
                raise ModelError("pair gap too short for gap compression")
            bias = torch.zeros(len(rows_in), dtype=torch.float64)
            bias[lo + m] = math.log((hi - lo) - 2 * m)
            index_in = {p: r for r, p in enumerate(rows_in) if p >= 0}
            src = torch.tensor([index_in.get(p, lo + m) for p in rows_out])
            index_out = {p: r for r, p in enumerate(rows_out) if p >= 0}
            rep, zero = lo + m2, len(rows_out)
            taps = []
            for t in range(2 * half + 1):
                off = (t - half) * d
                idx = []
                for p in rows_out:
                    q = (centre if p < 0 else p) + off
                    idx.append(zero if q < 0 or q >= N else index_out.get(q, rep))
                taps.append(torch.tensor(idx))
            layers.append((bias, src, taps))
            m = m2
        plan = (first, layers, torch.arange(n1), torch.arange(lo + 2 * m + 1, lo + 2 * m + 1 + n2))
        self._plans[key] = plan
        return plan

    def _encode_compressed(self, h: torch.Tensor, plan) -> tuple[torch.Tensor, torch.Tensor]:
        _, layers, r1, r2 = plan
        B, _, D = h.shape
        for layer, (bias, src, taps) in zip(self.model.layers, layers):
            L = h.shape[1]
            nh = layer.heads
            q, k, v = layer.qkv(layer.norm_attn(h)).chunk(3, dim=-1)
            q, k, v = (t.reshape(B, L, nh, D // nh).transpose(1, 2) for t in (q, k, v))
            a = F.scaled_dot_product_attention(q, k, v, attn_mask=bias.to(q.dtype).expand(L, L))
            h = h + layer.out(a.transpose(1, 2).reshape(B, L, D))
            h = h + layer.ffn_out(torch.relu(layer.ffn_in(layer.norm_ffn(h))))
            h = h[:, src]  # widen the explicit margins by the dilation
            z = layer.norm_conv(h)
            w = layer.conv.weight  # (K, C, C')
            K, C, Co = w.shape
            t = (z.reshape(-1, C) @ w.permute(1, 0, 2).reshape(C, K * Co)).reshape(B, -1, K, Co)
            t = F.pad(t, (0, 0, 0, 0, 0, 1))  # trailing zero row for out-of-range taps
            y = layer.conv.bias
            for i, idx in enumerate(taps):
                y = y + t[:, idx, i]
            h = h + torch.relu(y)
        h = self.model.final_norm(h)
        return h[:, r1], h[:, r2]

    def score(self, pairs: Sequence[tuple[int, int]], dtype=None, compress: bool = True) -> torch.Tensor:
        """Cosines for pairs that must share (len(i), len(j)); pairs already canonical."""
        f = 4
        i0, j0 = pairs[0]
        T1, T2 = self.lengths[i0], self.lengths[j0]
        _, start2, _ = pair_layout(T1, T2, f)
        with torch.no_grad(), torch.autocast("cpu", dtype=dtype or torch.bfloat16, enabled=dtype is not None):
            if compress:
                plan = self._plan(T1, T2)
                h = torch.stack([self._front(i, j) for i, j in pairs])
                h1, h2 = self._encode_compressed(h[:, plan[0]], plan)
            else:
                h = self.model.encode(torch.stack([self._front(i, j) for i, j in pairs]))
                n1 = downsampled_length(T1, f)
                h1, h2 = h[:, :n1], h[:, start2 // f:]
            wdt = self.model.project.weight.dtype  # undo autocast before projecting
            p1 = F.normalize(self.model.embed(h1.to(wdt)).mean(1), dim=-1, eps=1e-12)
            p2 = F.normalize(self.model.embed(h2.to(wdt)).mean(1), dim=-1, eps=1e-12)
        return torch.clamp((p1 * p2).sum(-1), -1.0, 1.0)


def feature_key(feats: FeatureMatrix) -> bytes:
    return hashlib.sha1(np.ascontiguousarray(feats.acoustic).tobytes()).digest()


# --- checkpoints ----------------------------------------------------------
# b"PRSM", u32 version, u32 config length, config text (UTF-8 key=value),
# u32 tensor count, then per tensor: u16 name length, name, u8 rank,
# u32 dims, float32 LE data. Tensors are written in sorted name order.
CKPT_MAGIC = b"PRSM"
CKPT_VERSION = 1


def state_tensors(model: PrismEncoder) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items()}


def save_checkpoint(path: str | Path, model: PrismEncoder, extra: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    header = model.cfg.to_text()
    for k, v in sorted((extra or {}).items()):
        header += f"meta.{k}={v}\n"
    hb = header.encode("utf-8")
    tensors = state_tensors(model)
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float32).contiguous().numpy()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.astype("<f4").tobytes())
    data = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, str], dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a PRSM checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = raw[off:off + hlen].decode("utf-8")
    off += hlen
    cfg_lines, meta = [], {}
    for line in header.splitlines():
        if line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            meta[k] = v
        elif line.strip():
            cfg_lines.append(line)
    cfg = ModelConfig.from_text("\n".join(cfg_lines))
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.copy())
    return cfg, meta, tensors


def load_checkpoint(path: str | Path, seed: int = 0) -> tuple[PrismEncoder, dict[str, str]]:
    cfg, meta, tensors = read_checkpoint(path)
    model = PrismEncoder(cfg)
    if "heads.ams.weight" in tensors:
        model.add_ams_head(tensors["heads.ams.weight"].shape[0])
    if "heads.diar.weight" in tensors:
        model.add_diar_head(tensors["heads.diar.weight"].shape[0])
    init_params(model, seed)
    load_tensors(model, tensors)
    return model.to(torch.float32), meta


def load_tensors(model: PrismEncoder, tensors: dict[str, torch.Tensor], strict: bool = True) -> list[str]:
    """Copy tensors by name; returns the names of model tensors left untouched."""
    own = model.state_dict()
    missing = [k for k in own if k not in tensors]
    unexpected = [k for k in tensors if k not in own]
    if strict and (missing or unexpected):
        raise ModelError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    with torch.no_grad():
        for k, v in tensors.items():
            if k in own:
                if own[k].shape != v.shape:
                    raise ModelError(f"{k}: checkpoint shape {tuple(v.shape)} != model {tuple(own[k].shape)}")
                own[k].copy_(v.to(own[k].dtype))
    return missing


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
