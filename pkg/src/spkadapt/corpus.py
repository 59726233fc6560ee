"""Synthetic multi-speaker corpus generation, manifest i/o and duration buckets.

The synthetic "speech" is not intelligible: every character of a transcript is
rendered as a fixed spectral template (three formant-like peaks) excited by a
glottal pulse train at the speaker's fundamental, then coloured by the
speaker's resonance, spectral tilt and a vocal-tract-like frequency warp.
That is enough structure for an ASR model to learn token identities and for
an embedder to learn speaker identity.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .utils import read_wav, rng_stream, wav_info, write_wav

BUCKET_NAMES = ("less_5", "5_15", "15_above")
DEFAULT_EDGES = (5.0, 15.0)
DEFAULT_LEXICON = (
    "abe", "bad", "bed", "bid", "bud", "dab", "deb", "dik", "doe", "duke",
    "eko", "ida", "kab", "keb", "kid", "kode", "obi", "oak", "uda", "ubik",
    "adobe", "baked", "kiosk", "dude",
)

_FRAME = 512
_HOP = 128
_SPACE_S = (0.06, 0.10)
_TOKEN_S = (0.10, 0.16)


class CorpusError(Exception):
    """Invalid corpus spec or inconsistent manifest/audio."""


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    audio_path: Path
    transcript: str
    duration_s: float


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...] = ()
    sample_rate: int = 16000

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.utt_id: r for r in self.records}

    def subset(self, records: Iterable[UtteranceRecord]) -> "Manifest":
        return Manifest(tuple(records), self.sample_rate)


@dataclass(frozen=True)
class SpeakerColor:
    """Per-speaker spectral envelope parameters."""

    f0_hz: float = 130.0
    warp: float = 1.0
    resonance_hz: float = 2000.0
    resonance_bw_hz: float = 250.0
    resonance_gain_db: float = 10.0
    tilt_db_per_oct: float = -3.0
    gain: float = 1.0


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 8
    utterances_per_speaker: int = 50
    duration_distribution: tuple[tuple[str, float], ...] = (
        ("less_5", 0.25), ("5_15", 0.70), ("15_above", 0.05))
    lexicon: tuple[str, ...] = DEFAULT_LEXICON
    speaker_color: tuple[SpeakerColor, ...] = ()
    coloration: float = 1.0
    seed: int = 0
    sample_rate: int = 16000
    min_duration_s: float = 1.0
    max_duration_s: float = 20.0

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise CorpusError("n_speakers must be >= 2")
        if self.utterances_per_speaker < 1:
            raise CorpusError("utterances_per_speaker must be >= 1")
        total = sum(p for _, p in self.duration_distribution)
        if abs(total - 1.0) > 1e-9:
            raise CorpusError(f"duration probabilities sum to {total}, not 1")
        for name, p in self.duration_distribution:
            if name not in BUCKET_NAMES:
                raise CorpusError(f"unknown duration bucket {name!r}")
            if p < 0:
                raise CorpusError("negative bucket probability")
        if self.speaker_color and len(self.speaker_color) != self.n_speakers:
            raise CorpusError("speaker_color must list one entry per speaker")
        if not self.lexicon or any(not w or " " in w for w in self.lexicon):
            raise CorpusError("lexicon must be non-empty words without spaces")
        if not 0 < self.min_duration_s < 5.0 or self.max_duration_s <= 15.0:
            raise CorpusError("duration range must straddle the 5 s and 15 s edges")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "duration_distribution" in d:
            dist = d["duration_distribution"]
            if isinstance(dist, dict):
                dist = dist.items()
            d["duration_distribution"] = tuple((str(k), float(v)) for k, v in dist)
        if "lexicon" in d:
            d["lexicon"] = tuple(d["lexicon"])
        if "speaker_color" in d:
            d["speaker_color"] = tuple(SpeakerColor(**c) for c in d["speaker_color"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "CorpusSpec":
        return cls.from_dict(json.loads(text))


def speaker_ids(n: int) -> list[str]:
    return [f"spk{i:03d}" for i in range(n)]


def default_color(seed: int, speaker_id: str, coloration: float = 1.0) -> SpeakerColor:
    """Draw a speaker colour; ``coloration`` scales how far speakers stray from neutral."""
    rng = rng_stream(seed, "color", speaker_id)
    s = float(coloration)
    return SpeakerColor(
        f0_hz=float(rng.uniform(90.0, 240.0)),
        warp=float(math.exp(rng.uniform(-0.25, 0.25) * s)),
        resonance_hz=float(rng.uniform(1200.0, 3800.0)),
        resonance_bw_hz=float(rng.uniform(150.0, 400.0)),
        resonance_gain_db=float(rng.uniform(6.0, 15.0) * s),
        tilt_db_per_oct=float(rng.uniform(-6.0, 0.0) * s),
        gain=float(math.exp(rng.uniform(-0.3, 0.3) * s)),
    )


def token_formants(alphabet: Sequence[str]) -> dict[str, tuple[float, float, float]]:
    """Formant triples on a geometric ladder, one per character.

    A speaker warp of one ladder step maps a character onto its neighbour, so
    character identity is only recoverable together with speaker identity.
    """
    letters = sorted(set(alphabet))
    k = len(letters)
    ratio = (900.0 / 280.0) ** (1.0 / max(k - 1, 1))
    out = {}
    for i, ch in enumerate(letters):
        f1 = 280.0 * ratio**i
        f2 = 900.0 + 1700.0 * ((i * 3) % k) / max(k - 1, 1)
        out[ch] = (f1, f2, 3000.0 + 80.0 * i)
    return out


def _bucket_range(bucket: str, spec: CorpusSpec) -> tuple[float, float]:
    return {
        "less_5": (spec.min_duration_s, 5.0),
        "5_15": (5.0, 15.0),
        "15_above": (15.0, spec.max_duration_s),
    }[bucket]


def _plan_utterance(spec: CorpusSpec, rng: np.random.Generator):
    """Pick bucket, duration and a word sequence whose rendering fits it."""
    names = [b for b, _ in spec.duration_distribution]
    probs = np.array([p for _, p in spec.duration_distribution])
    bucket = names[int(rng.choice(len(names), p=probs / probs.sum()))]
    lo, hi = _bucket_range(bucket, spec)
    duration = float(rng.uniform(lo, hi))
    n_samples = int(round(duration * spec.sample_rate))
    # a draw that rounds onto an edge would change bucket; stay inside
    n_samples = min(max(n_samples, int(math.ceil(lo * spec.sample_rate))),
                    int(math.ceil(hi * spec.sample_rate)) - 1)
    lead = float(rng.uniform(0.05, 0.15))
    budget = n_samples / spec.sample_rate - lead - 0.05
    segments: list[tuple[str, float]] = []
    used = 0.0
    words: list[str] = []
    failures = 0
    while failures < 8:
        word = spec.lexicon[int(rng.integers(len(spec.lexicon)))]
        durs = [float(rng.uniform(*_TOKEN_S)) for _ in word]
        gap = float(rng.uniform(*_SPACE_S)) if words else 0.0
        need = gap + sum(durs)
        if used + need > budget:
            failures += 1
            continue
        if words:
            segments.append((" ", gap))
        segments.extend(zip(word, durs))
        words.append(word)
        used += need
    if not words:
        raise CorpusError("min_duration_s too small to fit a single word")
    return bucket, n_samples, lead, segments, " ".join(words)


def _envelope(freqs: np.ndarray, formants, color: SpeakerColor) -> np.ndarray:
    env = np.full_like(freqs, 0.01)
    for amp, f in zip((1.0, 0.6, 0.3), formants):
        fc = f * color.warp
        bw = 0.1 * fc + 40.0
        env += amp / (1.0 + ((freqs - fc) / bw) ** 2)
    g = 10.0 ** (color.resonance_gain_db / 20.0) - 1.0
    env *= 1.0 + g / (1.0 + ((freqs - color.resonance_hz) / color.resonance_bw_hz) ** 2)
    octaves = np.log2(np.maximum(freqs, 50.0) / 500.0)
    env *= 10.0 ** (color.tilt_db_per_oct * octaves / 20.0)
    return env


def synthesize(segments, lead: float, n_samples: int, color: SpeakerColor,
               formants: dict, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Render (char, seconds) segments to a waveform of exactly ``n_samples``."""
    t = np.arange(n_samples) / sample_rate
    total = n_samples / sample_rate
    phase0 = float(rng.uniform(0, 2 * np.pi))
    f0 = color.f0_hz * (1.0 + 0.04 * np.sin(2 * np.pi * 0.7 * t + phase0)) * (1.0 - 0.06 * t / total)
    phase = np.cumsum(f0 / sample_rate)
    pulses = np.zeros(n_samples)
    pulses[1:][np.diff(np.floor(phase)) > 0] = 1.0
    excitation = pulses + 0.03 * rng.standard_normal(n_samples)

    # frame-level envelope schedule: None marks silence
    labels: list[str | None] = []
    bounds = [0.0, lead]
    labels.append(None)
    for ch, d in segments:
        labels.append(None if ch == " " else ch)
        bounds.append(bounds[-1] + d)
    labels.append(None)
    bounds.append(max(total, bounds[-1]) + 1.0)

    pad = _FRAME
    x = np.concatenate([np.zeros(pad), excitation, np.zeros(pad)])
    n_frames = 1 + (len(x) - _FRAME) // _HOP
    idx = np.arange(_FRAME)[None, :] + _HOP * np.arange(n_frames)[:, None]
    window = np.hanning(_FRAME + 1)[:-1]
    spec = np.fft.rfft(x[idx] * window, axis=1)
    freqs = np.fft.rfftfreq(_FRAME, 1.0 / sample_rate)
    centres = (np.arange(n_frames) * _HOP + _FRAME / 2 - pad) / sample_rate
    seg = np.clip(np.searchsorted(np.array(bounds), centres, side="right") - 1, 0, len(labels) - 1)
    cache: dict[str, np.ndarray] = {}
    env = np.zeros((n_frames, len(freqs)))
    for i, s in enumerate(seg):
        ch = labels[s]
        if ch is None:
            continue
        if ch not in cache:
            cache[ch] = _envelope(freqs, formants[ch], color)
        env[i] = cache[ch]
    frames = np.fft.irfft(spec * env, n=_FRAME, axis=1) * window
    y = np.zeros(len(x))
    np.add.at(y, idx, frames)
    norm = np.zeros(len(x))
    np.add.at(norm, idx, np.broadcast_to(window**2, idx.shape))
    y = y / np.maximum(norm, 1e-3)
    y = y[pad:pad + n_samples]
    y = 0.25 * color.gain * y + 3e-4 * rng.standard_normal(n_samples)
    return np.clip(y, -0.99, 0.99)


def _render_one(args) -> tuple[str, str, str, int, str]:
    spec, spk, color, utt, out_dir = args
    rng = rng_stream(spec.seed, spk, utt)
    bucket, n_samples, lead, segments, text = _plan_utterance(spec, rng)
    formants = token_formants("".join(spec.lexicon))
    audio = synthesize(segments, lead, n_samples, color, formants, spec.sample_rate, rng)
    rel = f"wav/{utt}.wav"
    write_wav(Path(out_dir) / rel, audio, spec.sample_rate)
    return utt, spk, rel, n_samples, text


def generate_corpus(spec: CorpusSpec, out_dir: str | Path, workers: int = 1) -> Manifest:
    """Render ``spec`` to ``out_dir/wav/*.wav`` and write ``out_dir/manifest.tsv``."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise CorpusError(f"{out} is not writable")
    spks = speaker_ids(spec.n_speakers)
    colors = spec.speaker_color or tuple(default_color(spec.seed, s, spec.coloration) for s in spks)
    jobs = [(spec, spk, colors[i], f"{spk}-{j:04d}", str(out))
            for i, spk in enumerate(spks) for j in range(spec.utterances_per_speaker)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_render_one, jobs, chunksize=8))
    else:
        rows = [_render_one(j) for j in jobs]
    records = tuple(
        UtteranceRecord(utt, spk, out / rel, text, n / spec.sample_rate)
        for utt, spk, rel, n, text in rows)
    manifest = Manifest(records, spec.sample_rate)
    save_manifest(manifest, out / "manifest.tsv")
    (out / "corpus_spec.json").write_text(spec.to_json() + "\n")
    colors_json = {s: asdict(c) for s, c in zip(spks, colors)}
    (out / "speaker_colors.json").write_text(json.dumps(colors_json, indent=2, sort_keys=True) + "\n")
    return manifest


def save_manifest(m: Manifest, path: str | Path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = [f"# sample_rate={m.sample_rate}"]
    for r in m.records:
        ap = Path(r.audio_path)
        try:
            rel = ap.resolve().relative_to(root)
        except ValueError:
            rel = ap.resolve()
        lines.append("\t".join((r.utt_id, r.speaker_id, rel.as_posix(), repr(float(r.duration_s)), r.transcript)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, check_audio: bool = True) -> Manifest:
    """Parse a manifest, cross-checking durations against the audio headers."""
    path = Path(path)
    root = path.parent
    rate: int | None = None
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# sample_rate="):
                rate = int(line.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise CorpusError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        utt, spk, rel, dur, text = parts
        try:
            duration = float(dur)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: bad duration {dur!r}") from None
        if utt in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate utt_id {utt}")
        if not text.strip():
            raise CorpusError(f"{path}:{lineno}: empty transcript for {utt}")
        seen.add(utt)
        audio = Path(rel) if Path(rel).is_absolute() else root / rel
        if check_audio:
            if not audio.exists():
                raise CorpusError(f"missing audio for {utt}: {audio}")
            n, sr = wav_info(audio)
            if rate is None:
                rate = sr
            if sr != rate:
                raise CorpusError(f"{utt}: sample rate {sr} differs from manifest rate {rate}")
            if abs(n / sr - duration) > 1e-3:
                raise CorpusError(f"{utt}: duration {duration} s disagrees with audio ({n / sr} s)")
        records.append(UtteranceRecord(utt, spk, audio, text, duration))
    return Manifest(tuple(records), rate or 16000)


def bucket_names(edges: Sequence[float]) -> list[str]:
    """``[5, 15]`` -> ``['less_5', '5_15', '15_above']``."""
    fmt = [f"{e:g}" for e in edges]
    names = [f"less_{fmt[0]}"]
    names += [f"{a}_{b}" for a, b in zip(fmt, fmt[1:])]
    names.append(f"{fmt[-1]}_above")
    return names


def parse_edges(text: str | Sequence[float]) -> list[float]:
    edges = [float(e) for e in (text.split(",") if isinstance(text, str) else text)]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] <= 0:
        raise CorpusError(f"bucket edges must be positive and strictly increasing: {edges}")
    return edges


def bucket_index(duration_s: float, edges: Sequence[float]) -> int:
    # left-closed: 5.0 belongs to the 5_15 bucket
    return int(np.searchsorted(np.asarray(edges, dtype=float), duration_s, side="right"))


def split_by_duration(m: Manifest, edges: Sequence[float] = DEFAULT_EDGES) -> list[Manifest]:
    edges = parse_edges(edges)
    buckets: list[list[UtteranceRecord]] = [[] for _ in range(len(edges) + 1)]
    for r in m.records:
        buckets[bucket_index(r.duration_s, edges)].append(r)
    return [m.subset(b) for b in buckets]


def holdout_split(m: Manifest, per_speaker: int) -> tuple[Manifest, Manifest]:
    """Last ``per_speaker`` utterances of every speaker become the held-out set."""
    by_spk: dict[str, list[UtteranceRecord]] = {}
    for r in m.records:
        by_spk.setdefault(r.speaker_id, []).append(r)
    held = {r.utt_id for rs in by_spk.values() for r in rs[len(rs) - per_speaker:]} if per_speaker else set()
    return (m.subset(r for r in m.records if r.utt_id not in held),
            m.subset(r for r in m.records if r.utt_id in held))


def load_audio(record: UtteranceRecord) -> np.ndarray:
    samples, _ = read_wav(record.audio_path)
    return samples


__all__ = [
    "BUCKET_NAMES", "CorpusError", "CorpusSpec", "Manifest", "SpeakerColor", "UtteranceRecord",
    "bucket_index", "bucket_names", "default_color", "generate_corpus", "holdout_split",
    "load_audio", "load_manifest", "parse_edges", "save_manifest", "split_by_duration",
    "synthesize", "token_formants",
]
