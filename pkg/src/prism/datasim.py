"""Synthetic speakers, utterances, training samples and meetings.

Every generator is a pure function of its arguments and seed. Speakers are
formant/f0/tilt parameter sets; utterances are harmonic sources shaped by the
speaker's resonances and by a phone inventory shared across all speakers,
so the acoustic features carry both speaker and content structure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import (
    SAMPLE_RATE,
    FeatureMatrix,
    Waveform,
    featurize,
    frame_count,
    HOP_SECONDS,
    WINDOW_SECONDS,
)
from .timeline import Span, Timeline

N_PHONES = 40
PHONE_INVENTORY_SEED = 7301
MEAN_PHONE_SECONDS = 0.12
CONTROL_RATE = 200  # envelope control points per second


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0_base: float
    formants: tuple[float, float, float]
    spectral_tilt: float  # dB / octave


@dataclass
class Utterance:
    speaker_id: str
    script: tuple[int, ...]
    waveform: Waveform
    features: FeatureMatrix | None = None

    def featurized(self) -> FeatureMatrix:
        if self.features is None:
            self.features = featurize(self.waveform)
        return self.features


@dataclass
class TrainingSample:
    features: FeatureMatrix
    frame_labels: np.ndarray  # length T, speaker index, -1 where no single speaker
    utterance_boundaries: list[tuple[int, int]]
    speakers: list[str]
    activity: np.ndarray | None = None  # T x S binary, diarization mode


@dataclass
class Meeting:
    waveform: Waveform
    features: FeatureMatrix
    reference: Timeline
    num_speakers: int

    @property
    def file_id(self) -> str:
        return self.reference.file_id


def _phone_inventory():
    rng = np.random.default_rng(PHONE_INVENTORY_SEED)
    centres = rng.uniform(250.0, 4500.0, size=(N_PHONES, 2))
    widths = rng.uniform(80.0, 400.0, size=(N_PHONES, 2))
    gains = rng.uniform(1.0, 5.0, size=(N_PHONES, 2))
    return centres, widths, gains


_PHONES = _phone_inventory()


def make_speakers(n: int, seed: int = 0, prefix: str = "spk") -> list[SyntheticSpeaker]:
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 17])
        out.append(
            SyntheticSpeaker(
                speaker_id=f"{prefix}{seed}_{i:03d}",
                f0_base=float(rng.uniform(90.0, 260.0)),
                formants=(
                    float(rng.uniform(300.0, 850.0)),
                    float(rng.uniform(900.0, 2300.0)),
                    float(rng.uniform(2400.0, 3500.0)),
                ),
                spectral_tilt=float(rng.uniform(-12.0, -3.0)),
            )
        )
    return out


def random_script(rng: np.random.Generator, duration_s: float) -> tuple[int, ...]:
    n = max(1, int(round(duration_s / MEAN_PHONE_SECONDS)))
    return tuple(int(p) for p in rng.integers(0, N_PHONES, size=n))


def _speaker_envelope(freqs, formants, tilt):
    env = np.full_like(freqs, 0.02)
    for f, bw, g in zip(formants, (90.0, 130.0, 180.0), (1.0, 0.7, 0.45)):
        env += g / (1.0 + ((freqs - f) / bw) ** 2)
    octaves = np.log2(np.maximum(freqs, 50.0) / 100.0)
    return env * 10.0 ** (tilt * octaves / 20.0)


def _phone_envelope(freqs, phone):
    centres, widths, gains = _PHONES
    env = np.ones_like(freqs)
    for b in range(2):
        env = env + gains[phone, b] / (1.0 + ((freqs - centres[phone, b]) / widths[phone, b]) ** 2)
    return env


def gen_utterance(
    spk: SyntheticSpeaker,
    phone_script: Sequence[int],
    duration_s: float,
    seed: int,
    sample_rate: int = SAMPLE_RATE,
) -> tuple[Waveform, list[tuple[int, int, int]]]:
    """Synthesize one utterance; returns the waveform and its phone alignment."""
    if len(phone_script) == 0:
        raise SimulationError("phone script is empty")
    if duration_s < 0.5:
        raise SimulationError(f"utterance must last at least 0.5 s, got {duration_s}")
    rng = np.random.default_rng([seed, 91])
    n = int(round(duration_s * sample_rate))

    # phone durations
    weights = rng.uniform(0.6, 1.4, size=len(phone_script))
    bounds = np.round(np.concatenate([[0.0], np.cumsum(weights)]) / weights.sum() * n).astype(int)
    alignment = [(int(p), int(bounds[i]), int(bounds[i + 1])) for i, p in enumerate(phone_script)]

    # session variability
    formants = np.array(spk.formants) * rng.uniform(0.97, 1.03)
    tilt = spk.spectral_tilt + rng.uniform(-1.0, 1.0)
    level = rng.uniform(0.3, 0.9)

    # f0 contour, within +-10% of the base
    n_ctrl = int(math.ceil(duration_s * CONTROL_RATE)) + 2
    t_ctrl = np.arange(n_ctrl) / CONTROL_RATE
    rates = rng.uniform(0.2, 3.0, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.dirichlet(np.ones(3))
    jitter = (amps[:, None] * np.sin(2 * np.pi * rates[:, None] * t_ctrl + phases[:, None])).sum(0)
    f0_ctrl = spk.f0_base * (1.0 + 0.1 * jitter)

    nyq = 0.49 * sample_rate
    n_harm = int(nyq // (spk.f0_base * 0.9))
    k = np.arange(1, n_harm + 1)[:, None]

    # per-control-point phone id; envelopes change smoothly across boundaries
    ctrl_samples = np.minimum((t_ctrl * sample_rate).astype(int), n - 1)
    ctrl_phone = np.asarray(phone_script)[
        np.clip(np.searchsorted(bounds, ctrl_samples, side="right") - 1, 0, len(phone_script) - 1)
    ]
    harm_freqs = k * f0_ctrl[None, :]
    amp_ctrl = _speaker_envelope(harm_freqs, formants, tilt)
    phone_env = _phone_envelope(harm_freqs, ctrl_phone[None, :])
    smooth = np.ones(5) / 5.0
    phone_env = np.apply_along_axis(lambda r: np.convolve(r, smooth, mode="same"), 1, phone_env)
    phone_env[:, :2] = phone_env[:, [2]]
    phone_env[:, -2:] = phone_env[:, [-3]]
    amp_ctrl = amp_ctrl * phone_env * (harm_freqs < nyq)

    t = np.arange(n) / sample_rate
    pos = t * CONTROL_RATE
    i0 = np.minimum(pos.astype(int), n_ctrl - 2)
    frac = pos - i0
    f0 = f0_ctrl[i0] * (1 - frac) + f0_ctrl[i0 + 1] * frac
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)

    out = np.zeros(n)
    chunk = sample_rate // 2
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        a = amp_ctrl[:, i0[sl]] * (1 - frac[sl]) + amp_ctrl[:, i0[sl] + 1] * frac[sl]
        out[sl] = (a * np.sin(k * phase[None, sl])).sum(0)
    out += 0.01 * np.max(np.abs(out)) * rng.standard_normal(n)
    # 10 ms raised-cosine fades keep utterance edges click-free
    fade = min(n // 2, sample_rate // 100)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, fade))
    out[:fade] *= ramp
    out[n - fade:] *= ramp[::-1]
    out *= level / np.max(np.abs(out))
    return Waveform(out, sample_rate, alignment), alignment


def make_utterance(spk: SyntheticSpeaker, duration_s: float, seed: int, script=None) -> Utterance:
    rng = np.random.default_rng([seed, 5])
    if script is None:
        script = random_script(rng, duration_s)
    w, _ = gen_utterance(spk, script, duration_s, seed)
    return Utterance(spk.speaker_id, tuple(script), w)


@dataclass
class UtteranceBank:
    """Lazily generated, cached utterances per speaker.

    Utterance ``j`` of speaker ``s`` is fully determined by ``(seed, s, j)``.
    """

    speakers: list[SyntheticSpeaker]
    duration_range: tuple[float, float] = (1.0, 2.5)
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.speakers)

    def get(self, speaker_index: int, j: int) -> Utterance:
        key = (speaker_index, j)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, speaker_index, j, 3])
            lo, hi = self.duration_range
            dur = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            utt = make_utterance(self.speakers[speaker_index], dur, int(rng.integers(2**31)))
            utt.featurized()
            self._cache[key] = utt
        return self._cache[key]


def _as_bank(pool) -> UtteranceBank:
    if isinstance(pool, UtteranceBank):
        return pool
    return UtteranceBank(list(pool))


def sample_plan(pool_size: int, seed: int, utterances_per_speaker: int | None = None):
    """Speaker/utterance draw for one pre-training sample.

    Returns a shuffled list of ``(speaker_index, utterance_index)``. With
    ``utterances_per_speaker`` the utterance index addresses a finite bank,
    otherwise it is a fresh generation index.
    """
    if pool_size < 4:
        raise SimulationError(f"speaker pool must hold at least 4 speakers, got {pool_size}")
    rng = np.random.default_rng([seed, 11])
    n_spk = int(rng.integers(1, 5))
    chosen = rng.choice(pool_size, size=n_spk, replace=False)
    plan = []
    for s in chosen:
        n_utt = int(rng.integers(1, 4))
        if utterances_per_speaker is None:
            idx = rng.integers(0, 2**31, size=n_utt)
        else:
            idx = rng.choice(utterances_per_speaker, size=min(n_utt, utterances_per_speaker), replace=False)
        plan.extend((int(s), int(j)) for j in idx)
    order = rng.permutation(len(plan))
    return [plan[i] for i in order]


def _frame_labels_from_samples(sample_labels: np.ndarray, num_frames: int) -> np.ndarray:
    win = int(round(WINDOW_SECONDS * SAMPLE_RATE))
    hop = int(round(HOP_SECONDS * SAMPLE_RATE))
    centres = np.minimum(np.arange(num_frames) * hop + win // 2, len(sample_labels) - 1)
    return sample_labels[centres]


def _render(utterances: list[Utterance], onsets: list[int], speaker_of: list[int], n_speakers: int):
    total = max(o + len(u.waveform) for u, o in zip(utterances, onsets))
    out = np.zeros(total)
    active = np.zeros((total, n_speakers), dtype=bool)
    phones = []
    for u, o, s in zip(utterances, onsets, speaker_of):
        out[o:o + len(u.waveform)] += u.waveform.samples
        active[o:o + len(u.waveform), s] = True
        phones.extend((p, a + o, b + o) for p, a, b in u.waveform.phones)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out /= peak
    return Waveform(out, SAMPLE_RATE, phones), active


def make_pretrain_sample(pool, seed: int, utterances_per_speaker: int | None = None) -> TrainingSample:
    """Concatenate utterances of 1-4 speakers, 1-3 utterances each, shuffled."""
    bank = _as_bank(pool)
    plan = sample_plan(len(bank), seed, utterances_per_speaker)
    speakers = sorted({s for s, _ in plan})
    local = {s: i for i, s in enumerate(speakers)}
    utts = [bank.get(s, j) for s, j in plan]
    onsets = np.concatenate([[0], np.cumsum([len(u.waveform) for u in utts])[:-1]]).astype(int)
    wave, active = _render(utts, list(onsets), [local[s] for s, _ in plan], len(speakers))
    feats = featurize(wave)
    T = len(feats)
    sample_labels = active.argmax(axis=1)
    labels = _frame_labels_from_samples(sample_labels, T)
    boundaries = []
    centres = np.arange(T) * int(HOP_SECONDS * SAMPLE_RATE) + int(WINDOW_SECONDS * SAMPLE_RATE) // 2
    for k, o in enumerate(onsets):
        lo = int(np.searchsorted(centres, o, side="left"))
        hi = T if k == len(onsets) - 1 else int(np.searchsorted(centres, onsets[k + 1], side="left"))
        boundaries.append((lo, hi))
    return TrainingSample(
        features=feats,
        frame_labels=labels.astype(np.int64),
        utterance_boundaries=boundaries,
        speakers=[bank.speakers[s].speaker_id for s in speakers],
    )


def make_diarization_sample(
    pool, seed: int, utterances_per_speaker: int | None = None, overlap_prob: float = 0.3,
    max_overlap_s: float = 0.6,
) -> TrainingSample:
    """Like :func:`make_pretrain_sample` but with overlapped onsets and a
    T x S activity matrix; overlapped frames get label -1."""
    bank = _as_bank(pool)
    plan = sample_plan(len(bank), seed, utterances_per_speaker)
    rng = np.random.default_rng([seed, 23])
    speakers = sorted({s for s, _ in plan})
    local = {s: i for i, s in enumerate(speakers)}
    utts = [bank.get(s, j) for s, j in plan]
    onsets, cursor = [], 0
    for k, u in enumerate(utts):
        if k > 0 and plan[k][0] != plan[k - 1][0] and rng.random() < overlap_prob:
            prev = len(utts[k - 1].waveform)
            ov = int(min(max_overlap_s * SAMPLE_RATE, 0.4 * prev, 0.4 * len(u.waveform)) * rng.uniform(0.3, 1.0))
            cursor -= ov
        onsets.append(cursor)
        cursor += len(u.waveform)
    wave, active = _render(utts, onsets, [local[s] for s, _ in plan], len(speakers))
    feats = featurize(wave)
    T = len(feats)
    frame_active = _frame_labels_from_samples(active, T).astype(np.int8)
    labels = np.where(frame_active.sum(1) == 1, frame_active.argmax(1), -1)
    centres = np.arange(T) * int(HOP_SECONDS * SAMPLE_RATE) + int(WINDOW_SECONDS * SAMPLE_RATE) // 2
    boundaries = []
    for u, o in zip(utts, onsets):
        lo = int(np.searchsorted(centres, o, side="left"))
        hi = int(np.searchsorted(centres, o + len(u.waveform), side="left"))
        boundaries.append((lo, hi))
    return TrainingSample(
        features=feats,
        frame_labels=labels.astype(np.int64),
        utterance_boundaries=boundaries,
        speakers=[bank.speakers[s].speaker_id for s in speakers],
        activity=frame_active,
    )


def crop(u: Utterance, seconds: float) -> Utterance:
    n = int(round(seconds * u.waveform.sample_rate))
    if len(u.waveform) <= n:
        return u
    w = Waveform(
        u.waveform.samples[:n],
        u.waveform.sample_rate,
        [(p, a, min(b, n)) for p, a, b in u.waveform.phones if a < n],
    )
    return Utterance(u.speaker_id, u.script, w)


def make_verification_pair(
    pool,
    positive: bool,
    seed: int,
    same_script: bool = False,
    crop_s: float = 5.0,
    utterances_per_speaker: int | None = None,
):
    """Two ``crop_s``-second utterances and a same-speaker label.

    Positive pairs share a speaker but not a script; ``same_script`` builds
    hard negatives (different speakers reading the same script).
    """
    rng = np.random.default_rng([seed, 29])
    if isinstance(pool, UtteranceBank) and utterances_per_speaker and not same_script:
        bank = pool
        if positive:
            s = int(rng.integers(len(bank)))
            j1, j2 = rng.choice(utterances_per_speaker, size=2, replace=False)
            u1, u2 = bank.get(s, int(j1)), bank.get(s, int(j2))
        else:
            s1, s2 = rng.choice(len(bank), size=2, replace=False)
            u1 = bank.get(int(s1), int(rng.integers(utterances_per_speaker)))
            u2 = bank.get(int(s2), int(rng.integers(utterances_per_speaker)))
        return crop(u1, crop_s), crop(u2, crop_s), bool(positive)

    speakers = pool.speakers if isinstance(pool, UtteranceBank) else list(pool)
    if positive:
        i1 = i2 = int(rng.integers(len(speakers)))
    else:
        i1, i2 = (int(i) for i in rng.choice(len(speakers), size=2, replace=False))
    script1 = random_script(rng, crop_s)
    if same_script:
        script2 = script1
    else:
        script2 = random_script(rng, crop_s)
        while script2 == script1:
            script2 = random_script(rng, crop_s)
    seeds = rng.integers(0, 2**31, size=2)
    u1 = make_utterance(speakers[i1], crop_s, int(seeds[0]), script1)
    u2 = make_utterance(speakers[i2], crop_s, int(seeds[1]), script2)
    return u1, u2, bool(positive)


def make_verification_batch(pool, n: int, seed: int, **kwargs):
    """``n`` pairs, exactly half of them positive (rounded down), shuffled."""
    rng = np.random.default_rng([seed, 31])
    flags = np.array([True] * (n // 2) + [False] * (n - n // 2))
    rng.shuffle(flags)
    seeds = rng.integers(0, 2**31, size=n)
    return [make_verification_pair(pool, bool(f), int(s), **kwargs) for f, s in zip(flags, seeds)]


def _plan_meeting(num_speakers: int, duration_s: float, overlap_ratio: float, rng):
    turns = []  # (speaker, start, length)
    t, prev = 0.0, -1
    lengths = []
    speakers = []
    total = 0.0
    while total < duration_s + 10.0:
        choices = [s for s in range(num_speakers) if s != prev]
        # first pass through the room guarantees everyone speaks
        unseen = [s for s in range(num_speakers) if s not in speakers]
        s = unseen[0] if unseen and unseen[0] != prev else int(rng.choice(choices))
        lengths.append(float(rng.uniform(2.0, 10.0)))
        speakers.append(s)
        total += lengths[-1]
        prev = s
    lengths = np.array(lengths)
    # overlap time O out of speech union U = sum(L) - O: O = r/(1+r) sum(L)
    overlaps = np.zeros(len(lengths))
    if overlap_ratio > 0 and len(lengths) > 1:
        caps = 0.45 * np.minimum(lengths[:-1], lengths[1:])
        target = overlap_ratio / (1.0 + overlap_ratio) * lengths.sum()
        w = rng.uniform(0.5, 1.5, size=len(caps)) * caps
        ov = np.minimum(w * target / w.sum(), caps)
        overlaps[1:] = ov
    pauses = np.where(
        (overlaps == 0) & (rng.random(len(lengths)) < 0.3), rng.uniform(0.1, 0.5, len(lengths)), 0.0
    )
    pauses[0] = 0.0
    for k, (s, L) in enumerate(zip(speakers, lengths)):
        if k > 0:
            t = turns[-1][1] + turns[-1][2] - overlaps[k] + pauses[k]
        turns.append((s, t, float(L)))
    return turns


def simulate_meeting(
    pool,
    num_speakers: int,
    duration_s: float,
    overlap_ratio: float = 0.0,
    seed: int = 0,
    file_id: str | None = None,
    min_duration_s: float = 60.0,
) -> Meeting:
    """Alternating 2-10 s turns; overlaps only at turn onsets."""
    if not 2 <= num_speakers <= 8:
        raise SimulationError(f"num_speakers must be in [2, 8], got {num_speakers}")
    if not 0.0 <= overlap_ratio <= 0.2:
        raise SimulationError(f"overlap_ratio must be in [0, 0.2], got {overlap_ratio}")
    if duration_s < min_duration_s:
        raise SimulationError(f"meetings must last at least {min_duration_s} s")
    speakers = pool.speakers if isinstance(pool, UtteranceBank) else list(pool)
    if len(speakers) < num_speakers:
        raise SimulationError(f"pool has {len(speakers)} speakers, need {num_speakers}")
    rng = np.random.default_rng([seed, 37])
    chosen = [speakers[i] for i in rng.choice(len(speakers), size=num_speakers, replace=False)]
    turns = _plan_meeting(num_speakers, duration_s, overlap_ratio, rng)

    n_total = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(n_total)
    phones = []
    spans = []
    planned_end, sample_end = 0.0, 0
    for s, start, length in turns:
        if start >= duration_s - 0.5:
            break
        length = min(length, duration_s - start)
        length = max(length, 0.5)
        o = int(round(start * SAMPLE_RATE))
        if start >= planned_end:
            # sample rounding must not create overlap the plan did not ask for
            o = max(o, sample_end)
        planned_end = start + length
        utt = make_utterance(chosen[s], length, int(rng.integers(2**31)))
        seg = utt.waveform.samples[: n_total - o]
        out[o:o + len(seg)] += seg
        phones.extend((p, a + o, min(b + o, n_total)) for p, a, b in utt.waveform.phones if a + o < n_total)
        sample_end = o + len(seg)
        # 1/16000 s is exact at 7 decimals
        spans.append(Span(round(o / SAMPLE_RATE, 7), round(len(seg) / SAMPLE_RATE, 7), chosen[s].speaker_id))
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out /= peak
    wave = Waveform(out, SAMPLE_RATE, phones)
    fid = file_id or f"meeting{seed}"
    return Meeting(wave, featurize(wave), Timeline(spans, fid), num_speakers)
