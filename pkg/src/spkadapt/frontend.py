"""Acoustic front-end: framing, log mel filterbank, 3-dim pitch, global CMVN.

Conventions: periodic Hann analysis window, HTK mel scale, 512-point FFT,
energy floor exp(-23) before the log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FRAME_LENGTH_S = 0.025
FRAME_SHIFT_S = 0.010
N_FFT = 512
LOG_FLOOR = -23.0
PITCH_RANGE_HZ = (60.0, 400.0)
CMVN_EPS = 1e-8


class FrontendError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    data: np.ndarray
    frame_shift_s: float = FRAME_SHIFT_S
    frame_length_s: float = FRAME_LENGTH_S
    dim_layout: str = "fbank80+pitch3"

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FrontendError("feature matrix must be T x D with T >= 1")
        if not np.all(np.isfinite(self.data)):
            raise FrontendError("feature matrix contains NaN/Inf")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def frame_params(sample_rate: int) -> tuple[int, int]:
    return int(round(FRAME_LENGTH_S * sample_rate)), int(round(FRAME_SHIFT_S * sample_rate))


def num_frames(n_samples: int, sample_rate: int) -> int:
    window, shift = frame_params(sample_rate)
    if n_samples < window:
        raise FrontendError(f"audio of {n_samples} samples is shorter than one {window}-sample window")
    return 1 + (n_samples - window) // shift


def _raw_frames(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    window, shift = frame_params(sample_rate)
    n = num_frames(len(samples), sample_rate)
    idx = np.arange(window)[None, :] + shift * np.arange(n)[:, None]
    return np.asarray(samples, dtype=np.float64)[idx]


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """Slice into 25 ms frames every 10 ms and apply the analysis window."""
    frames = _raw_frames(samples, sample_rate)
    return frames * periodic_hann(frames.shape[1])


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_band_edges(n_mels: int, sample_rate: int, low_hz: float = 20.0) -> np.ndarray:
    """n_mels + 2 equally spaced mel points; band i peaks at point i + 1."""
    return np.linspace(hz_to_mel(low_hz), hz_to_mel(sample_rate / 2.0), n_mels + 2)


def mel_centers_hz(n_mels: int = 80, sample_rate: int = 16000) -> np.ndarray:
    return mel_to_hz(mel_band_edges(n_mels, sample_rate)[1:-1])


def mel_filterbank(n_mels: int, sample_rate: int, n_fft: int = N_FFT) -> np.ndarray:
    """Triangular weights (n_mels x n_fft//2+1), triangles drawn on the mel axis."""
    pts = mel_band_edges(n_mels, sample_rate)
    bin_mel = hz_to_mel(np.fft.rfftfreq(n_fft, 1.0 / sample_rate))
    left, centre, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bin_mel[None, :] - left) / (centre - left)
    down = (right - bin_mel[None, :]) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down))


def fbank(frames: np.ndarray, sample_rate: int = 16000, n_mels: int = 80) -> np.ndarray:
    """Log mel energies of already-windowed frames."""
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank(n_mels, sample_rate).T
    return np.log(np.maximum(energies, np.exp(LOG_FLOOR)))


def _nccf(frames: np.ndarray, min_lag: int, max_lag: int) -> np.ndarray:
    """Normalised cross-correlation for lags min_lag..max_lag (T x n_lags)."""
    t, w = frames.shape
    n = 1 << int(np.ceil(np.log2(2 * w)))
    spec = np.fft.rfft(frames, n=n, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, n=n, axis=1)
    lags = np.arange(min_lag, max_lag + 1)
    csum = np.concatenate([np.zeros((t, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    e_head = csum[:, w - lags]
    e_tail = csum[:, w:w + 1] - csum[:, lags]
    denom = np.sqrt(e_head * e_tail)
    return np.where(denom > 1e-10, acf[:, lags] / np.maximum(denom, 1e-300), 0.0)


def _pick_lag(row: np.ndarray, min_lag: int) -> tuple[float, float]:
    peak = float(row.max())
    if peak <= 0.0:
        return float("nan"), 0.0
    # earliest local maximum close to the global one; avoids period doubling
    for i in range(1, len(row) - 1):
        if row[i] >= 0.9 * peak and row[i] >= row[i - 1] and row[i] >= row[i + 1]:
            a, b, c = row[i - 1], row[i], row[i + 1]
            den = a - 2 * b + c
            off = 0.5 * (a - c) / den if den < 0 else 0.0
            return min_lag + i + off, float(b)
    i = int(row.argmax())
    return float(min_lag + i), peak


def track_f0(samples: np.ndarray, sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-frame f0 (Hz) and voicing probability.

    f0 is the normalised-autocorrelation peak in 60-400 Hz. Unvoiced frames
    carry the previous f0 forward.
    """
    frames = _raw_frames(samples, sample_rate)
    min_lag = int(np.floor(sample_rate / PITCH_RANGE_HZ[1]))
    max_lag = min(int(np.ceil(sample_rate / PITCH_RANGE_HZ[0])), frames.shape[1] - 2)
    corr = _nccf(frames, min_lag, max_lag)
    t = frames.shape[0]
    f0 = np.empty(t)
    voicing = np.empty(t)
    for i in range(t):
        lag, peak = _pick_lag(corr[i], min_lag)
        f0[i] = sample_rate / lag if np.isfinite(lag) and lag > 0 else np.nan
        voicing[i] = np.clip((peak - 0.3) / 0.6, 0.0, 1.0)
    voiced = (voicing > 0.5) & np.isfinite(f0)
    last = f0[voiced][0] if voiced.any() else 100.0
    for i in range(t):
        if voiced[i]:
            last = f0[i]
        else:
            f0[i] = last
    return f0, voicing


def pitch(samples: np.ndarray, sample_rate: int = 16000, norm_window: int = 151) -> np.ndarray:
    """Per-frame (normalised log-f0, voicing probability, delta log-f0).

    The log-f0 column has a voicing-weighted moving average over
    ``norm_window`` frames subtracted, so it tracks intonation rather than
    the speaker's register.
    """
    f0, voicing = track_f0(samples, sample_rate)
    log_f0 = np.log(f0)
    weights = voicing + 1e-3
    half = norm_window // 2
    kernel = np.ones(2 * half + 1)
    num = np.convolve(np.pad(log_f0 * weights, half, mode="edge"), kernel, mode="valid")
    den = np.convolve(np.pad(weights, half, mode="edge"), kernel, mode="valid")
    padded = np.pad(log_f0, 1, mode="edge")
    delta = 0.5 * (padded[2:] - padded[:-2])
    return np.stack([log_f0 - num / den, voicing, delta], axis=1)


def extract_features(samples: np.ndarray, sample_rate: int = 16000, pitch_mode: str = "nccf") -> FeatureMatrix:
    """83-dim features (80 log-mel + 3 pitch) for one utterance."""
    fb = fbank(frame_signal(samples, sample_rate), sample_rate)
    if pitch_mode == "nccf":
        p = pitch(samples, sample_rate)
    elif pitch_mode == "zeros":
        p = np.zeros((fb.shape[0], 3))
    else:
        raise FrontendError(f"unknown pitch mode {pitch_mode!r} (use nccf or zeros)")
    return FeatureMatrix(np.concatenate([fb, p], axis=1))


@dataclass
class CmvnStats:
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int

    def merge(self, other: "CmvnStats") -> "CmvnStats":
        # Chan et al. pairwise update; associative up to rounding
        n = self.frame_count + other.frame_count
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.frame_count / n)
        m2 = (self.variance * self.frame_count + other.variance * other.frame_count
              + delta**2 * (self.frame_count * other.frame_count / n))
        return CmvnStats(mean, m2 / n, n)

    def to_json(self) -> str:
        return json.dumps({"frame_count": self.frame_count, "mean": self.mean.tolist(),
                           "variance": self.variance.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CmvnStats":
        d = json.loads(text)
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["variance"], dtype=np.float64),
                   int(d["frame_count"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CmvnStats":
        return cls.from_json(Path(path).read_text())


def cmvn_accumulate(*features: np.ndarray | FeatureMatrix) -> CmvnStats:
    stats = None
    for f in features:
        x = np.asarray(f.data if isinstance(f, FeatureMatrix) else f, dtype=np.float64)
        s = CmvnStats(x.mean(axis=0), x.var(axis=0), x.shape[0])
        stats = s if stats is None else stats.merge(s)
    if stats is None:
        raise FrontendError("no features to accumulate")
    return stats


def cmvn_apply(features: np.ndarray, stats: CmvnStats) -> np.ndarray:
    if stats.frame_count < 2:
        raise FrontendError("CMVN stats need frame_count > 1")
    return (np.asarray(features) - stats.mean) / np.sqrt(stats.variance + CMVN_EPS)


def cmvn_invert(normalized: np.ndarray, stats: CmvnStats) -> np.ndarray:
    return np.asarray(normalized) * np.sqrt(stats.variance + CMVN_EPS) + stats.mean


def cmvn_utterance(features: np.ndarray) -> np.ndarray:
    """Per-utterance variant (offered as a flag; global stats are the default)."""
    return cmvn_apply(features, cmvn_accumulate(features))


def write_archive(out_dir: str | Path, feats: Mapping[str, np.ndarray]) -> None:
    """One ``.npy`` per utterance plus ``index.txt`` (utt_id, file, frames, dim)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt, x in feats.items():
        x = np.asarray(x, dtype=np.float32)
        np.save(out / f"{utt}.npy", x)
        lines.append(f"{utt}\t{utt}.npy\t{x.shape[0]}\t{x.shape[1]}")
    with open(out / "index.txt", "a", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_archive(in_dir: str | Path, utt_ids: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    src = Path(in_dir)
    index = {}
    for line in (src / "index.txt").read_text(encoding="utf-8").splitlines():
        utt, fname, *_ = line.split("\t")
        index[utt] = fname
    wanted = list(index) if utt_ids is None else list(utt_ids)
    missing = [u for u in wanted if u not in index]
    if missing:
        raise FrontendError(f"features missing for {missing[:5]}")
    return {u: np.load(src / index[u]).astype(np.float64) for u in wanted}
