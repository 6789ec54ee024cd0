"""Frame-level input features: 40-d log-mel filter bank + 100-d phonetic rows.

The phonetic half normally comes from an ASR bottleneck network. Here it is
pluggable: :class:`SyntheticPhoneticProvider` reads the phone alignment the
data simulator attaches to each waveform, and :class:`ExternalPhoneticProvider`
loads a precomputed matrix from a FEAT file.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import convolve1d

SAMPLE_RATE = 16000
HOP_SECONDS = 0.010
WINDOW_SECONDS = 0.025
N_MELS = 40
N_PHONETIC = 100
N_PHONES = 40
FMIN, FMAX = 20.0, 7600.0
N_FFT = 512
ENERGY_FLOOR = 1e-10
LOG_FLOOR = float(np.log(ENERGY_FLOOR))

PHONE_CODEBOOK_SEED = 20220
SILENCE = -1  # phone id used for non-speech stretches


class FeatureError(ValueError):
    pass


class TooShortError(FeatureError):
    pass


class AlignmentError(FeatureError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    # (phone_id, start_sample, end_sample) spans, attached by the simulator
    phones: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FeatureError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def normalized(self, peak: float = 1.0) -> "Waveform":
        m = np.max(np.abs(self.samples)) if len(self.samples) else 0.0
        s = self.samples if m == 0 else self.samples * (peak / m)
        return Waveform(s, self.sample_rate, list(self.phones))


@dataclass
class FeatureMatrix:
    acoustic: np.ndarray  # T x 40
    phonetic: np.ndarray  # T x 100
    hop_seconds: float = HOP_SECONDS
    window_seconds: float = WINDOW_SECONDS

    def __post_init__(self):
        self.acoustic = np.asarray(self.acoustic, dtype=np.float64)
        self.phonetic = np.asarray(self.phonetic, dtype=np.float64)
        if self.acoustic.shape[0] != self.phonetic.shape[0]:
            raise AlignmentError(
                f"acoustic has {self.acoustic.shape[0]} frames, phonetic {self.phonetic.shape[0]}"
            )
        if not (np.isfinite(self.acoustic).all() and np.isfinite(self.phonetic).all()):
            raise FeatureError("non-finite feature values")

    def __len__(self):
        return self.acoustic.shape[0]

    def matrix(self, use_phonetic: bool = True) -> np.ndarray:
        if use_phonetic:
            return np.concatenate([self.acoustic, self.phonetic], axis=1)
        return self.acoustic

    def slice(self, start: int, stop: int) -> "FeatureMatrix":
        return FeatureMatrix(
            self.acoustic[start:stop], self.phonetic[start:stop], self.hop_seconds, self.window_seconds
        )

    @staticmethod
    def concatenate(parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        return FeatureMatrix(
            np.concatenate([p.acoustic for p in parts]),
            np.concatenate([p.phonetic for p in parts]),
        )


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


_FILTERBANKS: dict[int, np.ndarray] = {}


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT) -> np.ndarray:
    """40 triangular filters, equally spaced on the HTK mel scale over 20-7600 Hz."""
    key = (sample_rate, n_fft)
    if key in _FILTERBANKS:
        return _FILTERBANKS[key]
    edges = _mel_to_hz(np.linspace(_hz_to_mel(FMIN), _hz_to_mel(FMAX), N_MELS + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((N_MELS, len(freqs)))
    for m in range(N_MELS):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    _FILTERBANKS[key] = fb
    return fb


def frame_count(num_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = int(round(WINDOW_SECONDS * sample_rate))
    hop = int(round(HOP_SECONDS * sample_rate))
    if num_samples < win:
        raise TooShortError(f"waveform has {num_samples} samples, one window needs {win}")
    return 1 + (num_samples - win) // hop


def logmel(w: Waveform) -> np.ndarray:
    """T x 40 log mel energies, 25 ms Hamming windows every 10 ms."""
    sr = w.sample_rate
    win = int(round(WINDOW_SECONDS * sr))
    hop = int(round(HOP_SECONDS * sr))
    n = frame_count(len(w.samples), sr)
    n_fft = max(N_FFT, 1 << (win - 1).bit_length())
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * np.hamming(win), n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank(sr, n_fft).T
    return np.log(np.maximum(energies, ENERGY_FLOOR))


class PhoneticProvider(Protocol):
    def __call__(self, w: Waveform, num_frames: int) -> np.ndarray: ...


def phone_codebook() -> np.ndarray:
    """Fixed (N_PHONES + 1) x 100 unit-norm prototypes; the last row is silence."""
    rng = np.random.default_rng(PHONE_CODEBOOK_SEED)
    book = rng.standard_normal((N_PHONES + 1, N_PHONETIC))
    return book / np.linalg.norm(book, axis=1, keepdims=True)


_CODEBOOK = phone_codebook()
_SMOOTHER = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0


def frame_phones(w: Waveform, num_frames: int) -> np.ndarray:
    """Active phone id at each frame centre (SILENCE where none)."""
    win = int(round(WINDOW_SECONDS * w.sample_rate))
    hop = int(round(HOP_SECONDS * w.sample_rate))
    centres = np.arange(num_frames) * hop + win // 2
    ids = np.full(num_frames, SILENCE, dtype=np.int64)
    for phone, start, stop in w.phones:
        lo = np.searchsorted(centres, start, side="left")
        hi = np.searchsorted(centres, stop, side="left")
        ids[lo:hi] = phone
    return ids


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


class SyntheticPhoneticProvider:
    """Prototype of the active phone, smoothed by a 5-frame triangle."""

    def __call__(self, w: Waveform, num_frames: int) -> np.ndarray:
        ids = frame_phones(w, num_frames)
        rows = _CODEBOOK[np.where(ids == SILENCE, N_PHONES, ids)]
        smoothed = convolve1d(rows, _SMOOTHER, axis=0, mode="constant")
        return _unit_rows(smoothed)


class ExternalPhoneticProvider:
    """Precomputed phonetic matrix from a FEAT file.

    ``frame_rate`` is the file's row rate in Hz; rows are nearest-neighbour
    resampled onto the 100 Hz acoustic grid before alignment is checked.
    """

    def __init__(self, path: str | Path, frame_rate: float = 1.0 / HOP_SECONDS):
        self.path = Path(path)
        self.frame_rate = frame_rate

    def __call__(self, w: Waveform, num_frames: int) -> np.ndarray:
        m = read_feat(self.path)
        if m.shape[1] != N_PHONETIC:
            raise AlignmentError(f"{self.path}: expected {N_PHONETIC} columns, got {m.shape[1]}")
        ratio = self.frame_rate * HOP_SECONDS
        if abs(ratio - 1.0) > 1e-9:
            n_out = int(round(m.shape[0] / ratio))
            idx = np.minimum(np.round(np.arange(n_out) * ratio).astype(int), m.shape[0] - 1)
            m = m[idx]
        if m.shape[0] != num_frames:
            raise AlignmentError(
                f"{self.path}: {m.shape[0]} phonetic frames vs {num_frames} acoustic frames"
            )
        return _unit_rows(m.astype(np.float64))


def phonetic_features(w: Waveform, provider: PhoneticProvider | None = None, num_frames=None) -> np.ndarray:
    if num_frames is None:
        num_frames = frame_count(len(w.samples), w.sample_rate)
    provider = provider or SyntheticPhoneticProvider()
    return provider(w, num_frames)


def featurize(w: Waveform, provider: PhoneticProvider | None = None) -> FeatureMatrix:
    acoustic = logmel(w)
    return FeatureMatrix(acoustic, phonetic_features(w, provider, acoustic.shape[0]))


# FEAT binary layout: b"FEAT", u32 version, u32 rows, u32 cols, float32 LE row-major
FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def write_feat(path: str | Path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise FeatureError("FEAT files hold 2-d matrices")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<III", FEAT_VERSION, *m.shape))
        fh.write(m.tobytes())


def read_feat(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEAT_MAGIC:
        raise FeatureError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != FEAT_VERSION:
        raise FeatureError(f"{path}: unsupported FEAT version {version}")
    body = raw[16:]
    if len(body) != rows * cols * 4:
        raise FeatureError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)
