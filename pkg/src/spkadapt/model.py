"""Conv2d-subsampled transformer encoder-decoder with a CTC head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn

from .adapt import FEAT_DIM, DownProjection, project_and_inject
from .ctc import ctc_feasible, ctc_loss
from .layers import DecoderLayer, EncoderLayer, PositionalEncoding, causal_mask, length_mask

IGNORE_ID = -1


@dataclass
class ModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 1
    d_model: int = 64
    heads: int = 2
    ffn_dim: int = 256
    adapt_mode: str = "none"
    conv_channels: int = 64
    dropout: float = 0.1
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.adapt_mode not in ("none", "add", "cat"):
            raise ValueError(f"invalid adapt mode {self.adapt_mode!r}")

    @property
    def input_dim(self) -> int:
        return 2 * FEAT_DIM if self.adapt_mode == "cat" else FEAT_DIM

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        presets = {
            "desk": dict(enc_layers=2, dec_layers=1, d_model=64, heads=2, ffn_dim=256),
            "paper-nptel": dict(enc_layers=12, dec_layers=6, d_model=256, heads=4, ffn_dim=2048),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(vocab_size=vocab_size, **{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def conv_out_len(n: int) -> int:
    """Output length of one kernel-3, stride-2, unpadded convolution."""
    return (n - 3) // 2 + 1


def subsampled_len(n: int) -> int:
    return conv_out_len(conv_out_len(n))


class Conv2dSubsampling(nn.Module):
    """Two 3x3 stride-2 convolutions over (time, feature), then a linear map to d_model."""

    def __init__(self, idim: int, d_model: int, channels: int = 64, dropout: float = 0.0):
        super().__init__()
        self.conv = nn.Sequential(nn.Conv2d(1, channels, 3, 2), nn.ReLU(),
                                  nn.Conv2d(channels, channels, 3, 2), nn.ReLU())
        self.out = nn.Linear(channels * subsampled_len(idim), d_model)
        self.pos = PositionalEncoding(d_model, dropout)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor):
        if x.size(1) < 7:
            raise ValueError(f"need at least 7 input frames, got {x.size(1)}")
        h = self.conv(x.unsqueeze(1))
        b, c, t, f = h.shape
        h = self.out(h.transpose(1, 2).reshape(b, t, c * f))
        return self.pos(h), conv_out_len(conv_out_len(lengths))


class ASRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = DownProjection() if cfg.adapt_mode != "none" else None
        self.subsample = Conv2dSubsampling(cfg.input_dim, cfg.d_model, cfg.conv_channels, cfg.dropout)
        self.encoders = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.dropout)
                                      for _ in range(cfg.enc_layers))
        self.ctc_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.dec_pos = PositionalEncoding(cfg.d_model, cfg.dropout)
        self.decoders = nn.ModuleList(DecoderLayer(cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.dropout)
                                      for _ in range(cfg.dec_layers))
        self.output = nn.Linear(cfg.d_model, cfg.vocab_size)

    @property
    def sos(self) -> int:
        return self.cfg.vocab_size - 1

    eos = sos

    def model_input(self, feats: torch.Tensor, emb_frames: torch.Tensor | None) -> torch.Tensor:
        return project_and_inject(feats, emb_frames, self.proj, self.cfg.adapt_mode)

    def encode(self, x: torch.Tensor, lengths: torch.Tensor):
        """B x T x input_dim -> (B x T'' x d_model, lengths'', key mask B x 1 x T'')."""
        h, hlens = self.subsample(x, lengths)
        mask = length_mask(hlens, h.size(1)).unsqueeze(1)
        for layer in self.encoders:
            h = layer(h, mask)
        return h, hlens, mask

    def ctc_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.ctc_head(h), dim=-1)

    def decode_forward(self, memory: torch.Tensor, memory_mask: torch.Tensor | None,
                       ys_in: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits (B x L x V) for sos-prefixed inputs."""
        if ys_in.size(-1) == 0:
            raise ValueError("empty target prefix")
        y = self.dec_pos(self.embed(ys_in))
        tgt_mask = causal_mask(ys_in.size(1), ys_in.device).unsqueeze(0)
        if memory_mask is None:
            memory_mask = torch.ones(memory.shape[:2], dtype=torch.bool).unsqueeze(1)
        for layer in self.decoders:
            y = layer(y, tgt_mask, memory, memory_mask)
        return self.output(y)

    def forward(self, feats: torch.Tensor, emb_frames: torch.Tensor | None, lengths: torch.Tensor,
                targets: Sequence[Sequence[int]]) -> dict:
        """Per-utterance hybrid losses for a padded batch."""
        x = self.model_input(feats, emb_frames)
        h, hlens, mask = self.encode(x, lengths)
        ys_in, ys_out = add_sos_eos(targets, self.sos, self.eos)
        logits = self.decode_forward(h, mask, ys_in)
        att = attention_ce_loss(logits, ys_out, self.cfg.label_smoothing, reduction="none").sum(dim=1)
        lp = self.ctc_log_probs(h)
        ctc = ctc_loss(lp, hlens.tolist(), targets)
        feasible = torch.tensor([ctc_feasible(int(n), t) for n, t in zip(hlens, targets)])
        ctc = torch.where(feasible, ctc, torch.zeros_like(ctc))
        loss = hybrid_loss(ctc, att, self.cfg.ctc_weight)
        return {"loss": loss, "ctc": ctc, "att": att, "feasible": feasible}


def add_sos_eos(targets: Sequence[Sequence[int]], sos: int, eos: int):
    n = max(len(t) for t in targets) + 1
    ys_in = torch.full((len(targets), n), eos, dtype=torch.long)
    ys_out = torch.full((len(targets), n), IGNORE_ID, dtype=torch.long)
    for i, t in enumerate(targets):
        ys_in[i, 0] = sos
        ys_in[i, 1:len(t) + 1] = torch.as_tensor(list(t), dtype=torch.long)
        ys_out[i, :len(t)] = torch.as_tensor(list(t), dtype=torch.long)
        ys_out[i, len(t)] = eos
    return ys_in, ys_out


def attention_ce_loss(logits: torch.Tensor, targets: torch.Tensor, smoothing: float = 0.1,
                      reduction: str = "mean") -> torch.Tensor:
    """Label-smoothed cross-entropy; ``targets`` uses -1 for padding.

    The smoothed target puts 1 - smoothing on the reference token and spreads
    ``smoothing`` uniformly over the other V - 1 tokens. ``reduction`` is
    ``mean`` (over non-pad positions), ``sum`` or ``none`` (per position,
    zero on padding).
    """
    v = logits.size(-1)
    logp = torch.log_softmax(logits, dim=-1)
    valid = targets != IGNORE_ID
    safe = targets.masked_fill(~valid, 0)
    nll = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    if smoothing > 0:
        others = -(logp.sum(dim=-1)) - nll
        per_pos = (1.0 - smoothing) * nll + smoothing / (v - 1) * others
    else:
        per_pos = nll
    per_pos = per_pos * valid
    if reduction == "none":
        return per_pos
    if reduction == "sum":
        return per_pos.sum()
    return per_pos.sum() / valid.sum().clamp(min=1)


def hybrid_loss(ctc, att, ctc_weight: float = 0.3):
    return ctc_weight * ctc + (1.0 - ctc_weight) * att
