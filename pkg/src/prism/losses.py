"""Training objectives.

``prism_loss`` is the per-sample frame-contrastive hinge: mean cosine over
different-speaker frame pairs minus ``beta`` times the mean over same-speaker
pairs, plus the margin ``alpha``, clipped at zero and averaged over samples.
Pairs are unordered (i < j) and self-pairs are excluded. Frames labelled -1
(padding, overlap, silence) take no part in any pair.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

BCE_CLAMP = 1e-7
MAX_PIT_SPEAKERS = 4


class LossError(ValueError):
    pass


@dataclass
class LossHyperParams:
    alpha: float = 0.5
    beta: float = 1.0
    lambda_ver: float = 0.1
    gamma_diar: float = 0.1
    ams_scale: float = 30.0
    ams_margin: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_ver", "gamma_diar", "ams_margin"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")
        if self.ams_scale <= 0:
            raise LossError("ams_scale must be positive")


def pair_counts(labels) -> tuple[int, int]:
    """(P, Q): unordered negative and positive frame pairs among labelled frames."""
    lab = np.asarray(labels)
    lab = lab[lab >= 0]
    n = len(lab)
    _, sizes = np.unique(lab, return_counts=True)
    q = int((sizes * (sizes - 1) // 2).sum())
    return n * (n - 1) // 2 - q, q


def _sample_hinge(y: torch.Tensor, labels, alpha: float, beta: float) -> torch.Tensor:
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if lab.shape[0] != y.shape[0]:
        raise LossError(f"{y.shape[0]} frames but {lab.shape[0]} labels")
    keep = lab >= 0
    if int(keep.sum()) < 2:
        raise LossError("a sample needs at least 2 labelled frames")
    y, lab = y[keep], lab[keep]
    _, lab = torch.unique(lab, return_inverse=True)
    onehot = F.one_hot(lab).to(y.dtype)
    self_sum = (y * y).sum()
    total = y.sum(0)
    all_pairs = 0.5 * ((total * total).sum() - self_sum)
    class_sums = onehot.T @ y
    same = 0.5 * ((class_sums * class_sums).sum() - self_sum)
    diff = all_pairs - same
    P, Q = pair_counts(lab.numpy())
    neg_mean = diff / P if P else y.new_zeros(())
    pos_mean = same / Q if Q else y.new_zeros(())
    return torch.relu(neg_mean - beta * pos_mean + alpha)


def prism_loss(samples: Sequence[tuple[torch.Tensor, np.ndarray]], hp: LossHyperParams | None = None,
               alpha: float | None = None, beta: float | None = None) -> torch.Tensor:
    """Frame-contrastive loss over a batch of ``(y, frame_labels)`` samples."""
    hp = hp or LossHyperParams()
    a = hp.alpha if alpha is None else alpha
    b = hp.beta if beta is None else beta
    if len(samples) == 0:
        raise LossError("empty batch")
    return torch.stack([_sample_hinge(y, lab, a, b) for y, lab in samples]).mean()


def am_softmax(embedding: torch.Tensor, speaker_id, weights: torch.Tensor,
               hp: LossHyperParams | None = None, scale: float | None = None,
               margin: float | None = None) -> torch.Tensor:
    """Additive-margin softmax; ``weights`` rows and ``embedding`` are unit vectors.

    Accepts a single embedding with an int id, or a (B, D) batch with B ids
    (mean over the batch).
    """
    hp = hp or LossHyperParams()
    s = hp.ams_scale if scale is None else scale
    m = hp.ams_margin if margin is None else margin
    single = embedding.dim() == 1
    e = embedding.unsqueeze(0) if single else embedding
    ids = torch.as_tensor(np.atleast_1d(np.asarray(speaker_id)), dtype=torch.long)
    n_classes = weights.shape[0]
    if ((ids < 0) | (ids >= n_classes)).any():
        raise LossError(f"speaker id out of range for {n_classes} classes: {ids.tolist()}")
    cos = e @ weights.T
    logits = s * (cos - m * F.one_hot(ids, n_classes).to(cos.dtype))
    return F.cross_entropy(logits, ids)


def pair_frame_labels(len1: int, len2: int, gap: int, same_speaker: bool) -> np.ndarray:
    """Input-rate labels for a zero-padded pair: utt1 -> 0, utt2 -> 0 or 1, gap -> -1."""
    return np.concatenate(
        [np.zeros(len1, np.int64), -np.ones(gap, np.int64), np.full(len2, 0 if same_speaker else 1)]
    )


def verification_loss(pooled1, pooled2, frame_samples, speaker_ids1, speaker_ids2, weights,
                      hp: LossHyperParams | None = None) -> torch.Tensor:
    """AMS(utt1) + AMS(utt2) + lambda * prism over the pair frames.

    ``frame_samples`` holds one ``(y, downsampled_labels)`` per pair, with gap
    frames labelled -1.
    """
    hp = hp or LossHyperParams()
    loss = am_softmax(pooled1, speaker_ids1, weights, hp) + am_softmax(pooled2, speaker_ids2, weights, hp)
    if hp.lambda_ver:
        loss = loss + hp.lambda_ver * prism_loss(frame_samples, hp)
    return loss


def _bce_matrix(logits: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """C[a, b] = mean_t BCE(sigmoid(logits[:, a]), ref[:, b])."""
    p = torch.sigmoid(logits).clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    lp, lq = torch.log(p), torch.log(1 - p)
    T = logits.shape[0]
    return -(lp.T @ ref + lq.T @ (1 - ref)) / T


def pit_loss(logits: torch.Tensor, reference) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant BCE. Returns (loss, sigma) where column ``k`` of
    ``logits[:, sigma]`` is scored against reference column ``k``."""
    ref = torch.as_tensor(np.asarray(reference), dtype=logits.dtype)
    if ref.shape != logits.shape:
        raise LossError(f"logits {tuple(logits.shape)} vs reference {tuple(ref.shape)}")
    S = logits.shape[1]
    if S > MAX_PIT_SPEAKERS:
        raise LossError(f"pit_loss supports at most {MAX_PIT_SPEAKERS} streams (got {S}); lower the speaker limit in the config")
    cost = _bce_matrix(logits, ref)
    perms = list(itertools.permutations(range(S)))
    idx = torch.arange(S)
    totals = torch.stack([cost[list(p), idx].sum() for p in perms]) / S
    best = int(torch.argmin(totals.detach()))
    return totals[best], perms[best]


def diarization_loss(logits: torch.Tensor, reference, y: torch.Tensor, frame_labels,
                     hp: LossHyperParams | None = None) -> torch.Tensor:
    """PIT + gamma * prism, prism restricted to single-speaker frames (-1 elsewhere)."""
    hp = hp or LossHyperParams()
    loss, _ = pit_loss(logits, reference)
    if hp.gamma_diar:
        loss = loss + hp.gamma_diar * prism_loss([(y, frame_labels)], hp)
    return loss
