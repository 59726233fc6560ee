import itertools
import math

import numpy as np
import pytest
import torch

from spkadapt.ctc import ctc_alpha, ctc_feasible, ctc_loss, ctc_loss_and_grad, ctc_nll, ctc_prefix_log_prob, \
    min_frames


def collapse(path, blank=0):
    out, prev = [], None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def brute_force_nll(lp, target, blank=0):
    """-log of the summed probability of every path that collapses to target."""
    t_len, v = lp.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank) == list(target):
            total += math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def brute_force_prefix(lp, prefix, blank=0):
    t_len, v = lp.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank)[:len(prefix)] == list(prefix):
            total += math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return math.log(total) if total > 0 else -math.inf


def _random_lp(rng, t, v):
    return np.log(rng.dirichlet(np.ones(v), size=t))


def test_single_frame_uniform():
    lp = np.log(np.full((1, 3), 1 / 3))
    assert ctc_nll(lp, [1]) == pytest.approx(-math.log(1 / 3), abs=1e-12)


def test_matches_brute_force_small_sample():
    rng = np.random.default_rng(0)
    for t in range(1, 5):
        for target in ([1], [1, 1], [1, 2], [2, 1, 2]):
            lp = _random_lp(rng, t, 3)
            bf = brute_force_nll(lp, target)
            got = ctc_nll(lp, target)
            if math.isinf(bf):
                assert math.isinf(got)
            else:
                assert abs(got - bf) < 1e-9


def test_feasibility():
    assert min_frames([1, 1, 2]) == 4
    assert ctc_feasible(4, [1, 1, 2]) and not ctc_feasible(3, [1, 1, 2])
    lp = _random_lp(np.random.default_rng(1), 3, 3)
    nll, grad = ctc_loss_and_grad(lp, [1, 1, 2])
    assert nll == math.inf and np.all(grad == 0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    lp = rng.normal(size=(7, 4))
    target = [1, 2, 2, 3]
    _, grad = ctc_loss_and_grad(lp, target)
    h = 1e-6
    for t in range(7):
        for v in range(4):
            e = np.zeros_like(lp)
            e[t, v] = h
            num = (ctc_nll(lp + e, target) - ctc_nll(lp - e, target)) / (2 * h)
            assert abs(num - grad[t, v]) < 1e-6


def test_extreme_log_probs_stay_finite():
    rng = np.random.default_rng(3)
    lp = rng.choice([-30.0, 30.0], size=(20, 5))
    lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
    nll, grad = ctc_loss_and_grad(lp, [1, 2, 3, 4])
    assert np.isfinite(nll) and np.all(np.isfinite(grad))


def test_torch_wrapper_matches_reference_and_backprops():
    torch.manual_seed(0)
    logits = torch.randn(2, 12, 6, dtype=torch.float64, requires_grad=True)
    lp = logits.log_softmax(-1)
    targets = [[1, 2, 3], [4, 4]]
    ours = ctc_loss(lp, [12, 9], targets)
    ref = torch.nn.functional.ctc_loss(lp.transpose(0, 1), torch.tensor([1, 2, 3, 4, 4]), torch.tensor([12, 9]),
                                       torch.tensor([3, 2]), blank=0, reduction="none")
    assert torch.allclose(ours, ref, atol=1e-10)
    g1, = torch.autograd.grad(ours.sum(), logits, retain_graph=True)
    g2, = torch.autograd.grad(ref.sum(), logits)
    assert torch.allclose(g1, g2, atol=1e-10)


def test_prefix_probability_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(20):
        lp = _random_lp(rng, int(rng.integers(1, 5)), 3)
        for prefix in ([], [1], [2], [1, 1], [1, 2], [2, 2, 1]):
            bf = brute_force_prefix(lp, prefix)
            got = ctc_prefix_log_prob(lp, prefix)
            if math.isinf(bf):
                assert got == -math.inf
            else:
                assert abs(got - bf) < 1e-9


def test_alpha_total_consistent_with_nll():
    lp = _random_lp(np.random.default_rng(5), 6, 4)
    _, total = ctc_alpha(lp, [1, 3])
    assert total == pytest.approx(-ctc_nll(lp, [1, 3]))
