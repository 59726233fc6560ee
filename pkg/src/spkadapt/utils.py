"""Small shared helpers: named rng streams, wav i/o, stable hashing."""

from __future__ import annotations

import hashlib
import json
import wave
import zlib
from pathlib import Path
from typing import Any

import numpy as np


def stable_hash(text: str) -> int:
    """32-bit hash that does not depend on PYTHONHASHSEED."""
    return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF


def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent numpy generator for a named purpose.

    ``rng_stream(7, "specaug", "utt-3", 2)`` always yields the same stream,
    regardless of how many other streams were drawn before it.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        keys.append(n if isinstance(n, int) else stable_hash(str(n)))
    return np.random.default_rng(np.random.SeedSequence(keys))


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1) as 16-bit mono PCM."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; returns float64 samples in [-1, 1) and the rate."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def wav_info(path: str | Path) -> tuple[int, int]:
    """(sample_count, sample_rate) from the header only."""
    with wave.open(str(path), "rb") as w:
        return w.getnframes(), w.getframerate()


def config_digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
