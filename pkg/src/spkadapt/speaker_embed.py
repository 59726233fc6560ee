"""Toy speaker embedder: frame encoder, statistics pooling, 512-dim projection.

Two frame-encoder flavours share everything else: ``ff`` (per-frame
feed-forward stack, x-vector-like) and ``attn`` (one self-attention block
without positions, s-vector-like). Neither looks at frame order, so the
pooled embedding is invariant to frame permutation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .layers import EncoderLayer
from .utils import rng_stream

EMB_DIM = 512
POOL_EPS = 1e-8

log = logging.getLogger(__name__)


class EmbeddingNotFound(KeyError):
    pass


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    scope: str
    id: str
    speaker_id: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.scope not in ("speaker", "utterance"):
            raise ValueError(f"scope must be speaker or utterance, got {self.scope!r}")
        if self.vector.shape != (EMB_DIM,) or not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding must be {EMB_DIM} finite values")
        if not self.speaker_id and self.scope == "speaker":
            self.speaker_id = self.id


@dataclass
class EmbedderConfig:
    flavor: str = "ff"
    input_dim: int = 83
    hidden_dim: int = 128
    heads: int = 2
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    crop_s: tuple[float, float] = (1.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        if self.flavor not in ("ff", "attn"):
            raise ValueError(f"embedder flavor must be ff or attn, got {self.flavor!r}")
        self.crop_s = tuple(self.crop_s)


class SpeakerEmbedder(nn.Module):
    def __init__(self, cfg: EmbedderConfig, n_speakers: int):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        if cfg.flavor == "ff":
            self.encoder = nn.Sequential(nn.Linear(cfg.input_dim, h), nn.ReLU(),
                                         nn.Linear(h, h), nn.ReLU(),
                                         nn.Linear(h, h), nn.ReLU())
        else:
            self.inp = nn.Linear(cfg.input_dim, h)
            self.encoder = EncoderLayer(h, cfg.heads, 2 * h)
        self.projection = nn.Linear(2 * h, EMB_DIM)
        self.classifier = nn.Linear(EMB_DIM, n_speakers)

    def frames(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.cfg.flavor == "ff":
            return self.encoder(x)
        return self.encoder(self.inp(x), mask[:, None, :])

    def embed(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """B x T x D padded features -> B x 512 embeddings."""
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool)
        h = self.frames(x, mask)
        m = mask.unsqueeze(-1).to(h.dtype)
        n = m.sum(dim=1)
        mean = (h * m).sum(dim=1) / n
        var = (((h - mean[:, None]) ** 2) * m).sum(dim=1) / n
        pooled = torch.cat([mean, torch.sqrt(var + POOL_EPS)], dim=-1)
        return self.projection(pooled)

    def forward(self, x, mask=None):
        return self.classifier(torch.relu(self.embed(x, mask)))


def _pad(batch: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    t = max(len(b) for b in batch)
    x = np.zeros((len(batch), t, batch[0].shape[1]), dtype=np.float32)
    mask = np.zeros((len(batch), t), dtype=bool)
    for i, b in enumerate(batch):
        x[i, :len(b)] = b
        mask[i, :len(b)] = True
    return torch.from_numpy(x), torch.from_numpy(mask)


@dataclass
class TrainedEmbedder:
    model: SpeakerEmbedder
    speakers: list[str]
    train_accuracy: float
    history: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save({"format": "spkadapt-embedder/1", "config": asdict(self.model.cfg),
                    "speakers": self.speakers, "train_accuracy": self.train_accuracy,
                    "state": self.model.state_dict()}, path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedEmbedder":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        cfg = EmbedderConfig(**blob["config"])
        model = SpeakerEmbedder(cfg, len(blob["speakers"]))
        model.load_state_dict(blob["state"])
        model.eval()
        return cls(model, blob["speakers"], blob["train_accuracy"])


def train_embedder(utterances: Mapping[str, np.ndarray], utt2spk: Mapping[str, str],
                   cfg: EmbedderConfig) -> TrainedEmbedder:
    """Speaker-classification training on random crops of (CMVN'd) features."""
    speakers = sorted(set(utt2spk[u] for u in utterances))
    if len(speakers) < 2:
        raise ValueError("embedder training needs at least 2 speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}
    utt_ids = sorted(utterances)
    torch.manual_seed(cfg.seed)
    model = SpeakerEmbedder(cfg, len(speakers))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    lo, hi = (int(round(s * 100)) for s in cfg.crop_s)
    history = []
    for epoch in range(cfg.epochs):
        rng = rng_stream(cfg.seed, "embedder", epoch)
        order = rng.permutation(len(utt_ids))
        model.train()
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            ids = [utt_ids[i] for i in order[start:start + cfg.batch_size]]
            crops = []
            for u in ids:
                x = utterances[u]
                n = min(len(x), int(rng.integers(lo, hi + 1)))
                off = int(rng.integers(0, len(x) - n + 1))
                crops.append(x[off:off + n])
            x, mask = _pad(crops)
            y = torch.tensor([spk_index[utt2spk[u]] for u in ids])
            loss = nn.functional.cross_entropy(model(x, mask), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(ids)
            count += len(ids)
        history.append(total / count)
        log.info("embedder epoch %d loss %.4f", epoch + 1, history[-1])
    model.eval()
    correct = 0
    with torch.no_grad():
        for u in utt_ids:
            pred = model(torch.as_tensor(utterances[u], dtype=torch.float32)[None]).argmax(-1)
            correct += int(pred.item() == spk_index[utt2spk[u]])
    return TrainedEmbedder(model, speakers, correct / len(utt_ids), history)


def extract_utterance_embedding(model: SpeakerEmbedder | TrainedEmbedder, features: np.ndarray,
                                utt_id: str = "", speaker_id: str = "") -> SpeakerEmbedding:
    """Pool over every frame of ``features`` and return the 512-dim vector."""
    if isinstance(model, TrainedEmbedder):
        model = model.model
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("cannot embed an empty feature matrix")
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        vec = model.embed(torch.as_tensor(features, dtype=dtype)[None])[0]
    return SpeakerEmbedding(vec.double().numpy(), "utterance", utt_id, speaker_id)


def speaker_embedding(utterance_embeddings: Sequence[SpeakerEmbedding]) -> SpeakerEmbedding:
    """Arithmetic mean of one speaker's utterance embeddings."""
    if not utterance_embeddings:
        raise ValueError("need at least one utterance embedding")
    spks = {e.speaker_id for e in utterance_embeddings}
    if len(spks) != 1:
        raise ValueError(f"utterance embeddings from several speakers: {sorted(spks)}")
    spk = spks.pop()
    vec = np.mean(np.stack([e.vector for e in utterance_embeddings]), axis=0)
    return SpeakerEmbedding(vec, "speaker", spk, spk)


class EmbeddingStore:
    """Append-only store: ``vectors.bin`` (float64 LE) plus ``index.tsv``.

    A later ``put`` of the same (id, scope) shadows the earlier one. One
    writer at a time; readers reload the index on demand.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._bin = self.root / "vectors.bin"
        self._index_path = self.root / "index.tsv"
        self._index: dict[tuple[str, str], tuple[int, str]] = {}
        self.reload()

    def reload(self) -> None:
        self._index = {}
        if self._index_path.exists():
            for line in self._index_path.read_text(encoding="utf-8").splitlines():
                ident, scope, spk, slot = line.split("\t")
                self._index[(ident, scope)] = (int(slot), spk)

    def put(self, emb: SpeakerEmbedding) -> None:
        self.put_many([emb])

    def put_many(self, embs: Iterable[SpeakerEmbedding]) -> None:
        embs = list(embs)
        slot = self._bin.stat().st_size // (8 * EMB_DIM) if self._bin.exists() else 0
        with open(self._bin, "ab") as fh:
            for e in embs:
                fh.write(np.asarray(e.vector, dtype="<f8").tobytes())
        lines = []
        for i, e in enumerate(embs):
            self._index[(e.id, e.scope)] = (slot + i, e.speaker_id)
            lines.append(f"{e.id}\t{e.scope}\t{e.speaker_id}\t{slot + i}\n")
        with open(self._index_path, "a", encoding="utf-8") as fh:
            fh.write("".join(lines))

    def get(self, ident: str, scope: str) -> SpeakerEmbedding:
        try:
            slot, spk = self._index[(ident, scope)]
        except KeyError:
            raise EmbeddingNotFound(f"no {scope} embedding for {ident!r}") from None
        with open(self._bin, "rb") as fh:
            fh.seek(slot * 8 * EMB_DIM)
            vec = np.frombuffer(fh.read(8 * EMB_DIM), dtype="<f8").copy()
        return SpeakerEmbedding(vec, scope, ident, spk)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._index

    def ids(self, scope: str) -> list[str]:
        return sorted(i for i, s in self._index if s == scope)
