"""CTC negative log-likelihood by log-space forward-backward.

The gradient is taken with respect to the per-frame log-probabilities, so it
composes with any upstream normalisation (log-softmax) through autograd.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

NEG_INF = -np.inf


def extend_with_blanks(target: Sequence[int], blank: int = 0) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per label plus one blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    return n_frames >= min_frames(target)


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def ctc_alpha(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> tuple[np.ndarray, float]:
    """Forward variables (T x S) and log P(target | input)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    ext = extend_with_blanks(target, blank)
    t_len, s_len = lp.shape[0], len(ext)
    skip = _skip_allowed(ext, blank)
    emit = lp[:, ext]
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    total = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, float(total)


def ctc_beta(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> np.ndarray:
    """Backward variables including the emission at t (T x S)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    ext = extend_with_blanks(target, blank)
    t_len, s_len = lp.shape[0], len(ext)
    skip = _skip_allowed(ext, blank)
    emit = lp[:, ext]
    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    return beta


def ctc_loss_and_grad(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> tuple[float, np.ndarray]:
    """NLL and d NLL / d log_probs for one utterance.

    An infeasible target gives ``inf`` and a zero gradient rather than NaN.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if not ctc_feasible(lp.shape[0], target):
        return math.inf, np.zeros_like(lp)
    ext = extend_with_blanks(target, blank)
    alpha, log_p = ctc_alpha(lp, target, blank)
    if not np.isfinite(log_p):
        return math.inf, np.zeros_like(lp)
    beta = ctc_beta(lp, target, blank)
    occupancy = np.exp(alpha + beta - lp[:, ext] - log_p)
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, occupancy.T)
    return -log_p, -grad


def ctc_nll(log_probs: np.ndarray, target: Sequence[int], blank: int = 0) -> float:
    if not ctc_feasible(len(log_probs), target):
        return math.inf
    return -ctc_alpha(log_probs, target, blank)[1]


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, lengths, targets, blank):
        lp = log_probs.detach().cpu().double().numpy()
        losses = np.zeros(lp.shape[0])
        grads = np.zeros_like(lp)
        for b, (n, tgt) in enumerate(zip(lengths, targets)):
            losses[b], grads[b, :n] = ctc_loss_and_grad(lp[b, :n], tgt, blank)
        ctx.save_for_backward(torch.from_numpy(grads).to(log_probs.dtype))
        return torch.from_numpy(losses).to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grads,) = ctx.saved_tensors
        return grads * grad_out[:, None, None], None, None, None


def ctc_loss(log_probs: torch.Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]],
             blank: int = 0) -> torch.Tensor:
    """Per-utterance CTC NLL for B x T x V log-probabilities (differentiable)."""
    if log_probs.dim() == 2:
        return _CTCFunction.apply(log_probs[None], [int(lengths[0])], [list(targets[0])], blank)
    return _CTCFunction.apply(log_probs, [int(n) for n in lengths], [list(t) for t in targets], blank)


def ctc_prefix_log_prob(log_probs: np.ndarray, prefix: Sequence[int], blank: int = 0) -> float:
    """log P(some labelling starting with ``prefix``), from a full forward pass.

    Sums, over frames t, the probability of entering the last label of the
    prefix at t. Slow but independent of the incremental prefix scorer used
    in beam search.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if len(prefix) == 0:
        return 0.0
    alpha, _ = ctc_alpha(lp, prefix, blank)
    ext = extend_with_blanks(prefix, blank)
    s = len(ext) - 2
    last = ext[s]
    terms = [lp[0, last]] if s == 1 else []
    skip_ok = s >= 3 and ext[s] != ext[s - 2]
    for t in range(1, lp.shape[0]):
        into = alpha[t - 1, s - 1]
        if skip_ok:
            into = np.logaddexp(into, alpha[t - 1, s - 2])
        terms.append(into + lp[t, last])
    if not terms:
        return -math.inf
    return float(np.logaddexp.reduce(np.array(terms)))
