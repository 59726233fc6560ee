"""Speaker-embedding injection at the encoder input.

The data side (normalise, join, joint SpecAugment, split) runs in numpy on
frozen embeddings; the learned side (down-projection, add/cat) is a torch
module so it trains together with the recogniser.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .specaug import SpecAugPolicy, spec_augment

FEAT_DIM = 83
EMB_DIM = 512
JOINT_DIM = FEAT_DIM + EMB_DIM
MODES = ("none", "add", "cat")
NORM_AXES = ("none", "B", "T", "F")


class ScopeError(ValueError):
    """Embedding scope does not match the train/decode protocol."""


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "none"
    norm_axis: str = "T"
    specaug_joint: bool = True
    epsilon: float = 1e-8
    norm_before_specaug: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"invalid adapt mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.norm_axis not in NORM_AXES:
            raise ValueError(f"invalid norm axis {self.norm_axis!r}; valid axes: {', '.join(NORM_AXES)}")

    @property
    def input_dim(self) -> int:
        return 2 * FEAT_DIM if self.mode == "cat" else FEAT_DIM

    def to_dict(self) -> dict:
        return asdict(self)


def join(features: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """T x 83 features and one 512 vector -> T x 595 with the vector on every row."""
    features = np.asarray(features, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != FEAT_DIM:
        raise ValueError(f"features must be T x {FEAT_DIM}, got {features.shape}")
    if emb.shape == (EMB_DIM,):
        emb = np.broadcast_to(emb, (features.shape[0], EMB_DIM))
    if emb.shape != (features.shape[0], EMB_DIM):
        raise ValueError(f"embedding must be {EMB_DIM} or T x {EMB_DIM}, got {emb.shape}")
    return np.concatenate([features, emb], axis=1)


def split(joint: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return joint[:, :FEAT_DIM], joint[:, FEAT_DIM:]


def l2_normalize(e: np.ndarray, axis: str, eps: float = 1e-8,
                 lengths: Sequence[int] | None = None) -> np.ndarray:
    """Length-normalise a B x T x D embedding block along batch, time or feature axis.

    Padded frames (t >= lengths[b]) are excluded from the norms and returned as 0.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 3:
        raise ValueError("expected a B x T x D array")
    if axis == "none":
        return e.copy()
    b, t, _ = e.shape
    valid = None
    if lengths is not None and np.any(np.asarray(lengths) < t):
        valid = (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[:, :, None]
        e = e * valid
    if axis == "F":
        sq = np.einsum("btd,btd->bt", e, e)[:, :, None]
    elif axis == "T":
        sq = np.einsum("btd,btd->bd", e, e)[:, None, :]
    elif axis == "B":
        if b == 1:
            warnings.warn("B-axis normalisation with a single utterance reduces to sign(e)",
                          RuntimeWarning, stacklevel=2)
        sq = np.einsum("btd,btd->td", e, e)[None, :, :]
    else:
        raise ValueError(f"invalid norm axis {axis!r}")
    # eps is a floor, not an offset, so normalised values are exact unless the norm is ~0;
    # padded frames are already zero and stay zero
    denom = np.maximum(np.sqrt(sq), eps)
    if valid is not None:  # e is already a private copy
        e /= denom
        return e
    return e / denom


class DownProjection(nn.Module):
    """Learned affine map from the 512-dim embedding to the 83-dim feature space."""

    def __init__(self, in_dim: int = EMB_DIM, out_dim: int = FEAT_DIM):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        return down_project(e, self)


def down_project(e: torch.Tensor, proj: DownProjection) -> torch.Tensor:
    return e @ proj.weight.t() + proj.bias


def inject(features: torch.Tensor, e83: torch.Tensor, mode: str) -> torch.Tensor:
    """Add (width 83) or concatenate (width 166) the projected embedding per frame.

    ``e83`` may be a single vector or one vector per frame.
    """
    if features.shape[-1] != FEAT_DIM or e83.shape[-1] != FEAT_DIM:
        raise ValueError("inject expects 83-dim features and 83-dim projected embeddings")
    e83 = e83.expand_as(features)
    if mode == "add":
        return features + e83
    if mode == "cat":
        return torch.cat([features, e83], dim=-1)
    raise ValueError(f"inject mode must be add or cat, got {mode!r}")


def check_scope(scope: str, training: bool) -> None:
    want = "speaker" if training else "utterance"
    if scope != want:
        phase = "training" if training else "decoding"
        raise ScopeError(f"{phase} requires {want}-scope embeddings, got {scope!r}")


def prepare_batch(features: Sequence[np.ndarray], embeddings: Sequence[np.ndarray] | None,
                  cfg: AdaptConfig, policy: SpecAugPolicy | None,
                  rngs: Sequence[np.random.Generator] | None, training: bool):
    """Data-side steps: normalise, join, SpecAugment, split.

    Returns a list of T x 83 feature arrays and, unless ``cfg.mode`` is none,
    a list of T x 512 per-frame embedding arrays.
    """
    augment = training and policy is not None and policy.enabled
    if augment and (rngs is None or len(rngs) != len(features)):
        raise ValueError("SpecAugment needs one rng per utterance")
    if cfg.mode == "none":
        feats = [spec_augment(f, policy, r) if augment else np.asarray(f, dtype=np.float64)
                 for f, r in zip(features, rngs or [None] * len(features))]
        return feats, None
    if embeddings is None or len(embeddings) != len(features):
        raise ValueError("adaptation needs one embedding per utterance")
    lengths = [f.shape[0] for f in features]
    t_max = max(lengths)
    block = np.zeros((len(features), t_max, EMB_DIM))
    for i, (e, n) in enumerate(zip(embeddings, lengths)):
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (EMB_DIM,):
            raise ValueError(f"embedding must have {EMB_DIM} dims, got {e.shape}")
        block[i, :n] = e
    if cfg.norm_before_specaug:
        block = l2_normalize(block, cfg.norm_axis, cfg.epsilon, lengths)
    feats, embs = [], []
    for i, (f, n) in enumerate(zip(features, lengths)):
        if augment and cfg.specaug_joint:
            f, e = split(spec_augment(join(f, block[i, :n]), policy, rngs[i]))
        else:
            f = spec_augment(f, policy, rngs[i]) if augment else np.asarray(f, dtype=np.float64)
            e = block[i, :n]
        feats.append(f)
        embs.append(e)
    if not cfg.norm_before_specaug:
        padded = np.zeros_like(block)
        for i, (e, n) in enumerate(zip(embs, lengths)):
            padded[i, :n] = e
        padded = l2_normalize(padded, cfg.norm_axis, cfg.epsilon, lengths)
        embs = [padded[i, :n] for i, n in enumerate(lengths)]
    return feats, embs


def project_and_inject(features: torch.Tensor, emb_frames: torch.Tensor | None,
                       proj: DownProjection | None, mode: str) -> torch.Tensor:
    """Model-side steps: per-frame down-projection, then add/cat."""
    if mode == "none":
        return features
    return inject(features, down_project(emb_frames, proj), mode)


def adapt_frontend(features: np.ndarray, emb, cfg: AdaptConfig, proj: DownProjection | None,
                   rng: np.random.Generator | None, training: bool,
                   policy: SpecAugPolicy | None = None) -> torch.Tensor:
    """Single-utterance model input (T x 83 or T x 166) from features and an embedding."""
    if cfg.mode != "none":
        check_scope(emb.scope, training)
    vec = None if cfg.mode == "none" else [emb.vector]
    feats, embs = prepare_batch([features], vec, cfg, policy, None if rng is None else [rng], training)
    dtype = proj.weight.dtype if proj is not None else torch.get_default_dtype()
    x = torch.as_tensor(feats[0], dtype=dtype)
    e = None if embs is None else torch.as_tensor(embs[0], dtype=dtype)
    return project_and_inject(x, e, proj, cfg.mode)
