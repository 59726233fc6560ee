import itertools

import numpy as np
import pytest
import torch

from spkadapt.ctc import ctc_nll
from spkadapt.decode import CTCPrefixScorer, DecodeError, Hypothesis, beam_search, greedy_decode, \
    read_hypotheses, write_hypotheses
from spkadapt.model import ASRModel, ModelConfig, subsampled_len


def tiny(vocab=4, seed=0):
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=vocab, enc_layers=1, dec_layers=1, d_model=8, heads=2, ffn_dim=16,
                      conv_channels=2, dropout=0.0)
    model = ASRModel(cfg).double().eval()
    with torch.no_grad():  # sharpen the outputs a little so decisions are not all near-ties
        model.output.weight.mul_(4)
        model.ctc_head.weight.mul_(4)
    return model


def exhaustive_best(model, x, ctc_weight, max_len):
    """Score every label sequence up to max_len by teacher forcing and full CTC passes."""
    with torch.no_grad():
        h, _, mask = model.encode(x[None], torch.tensor([len(x)]))
        lp = model.ctc_log_probs(h)[0].numpy()
        best, best_ys = -np.inf, None
        labels = [c for c in range(1, model.cfg.vocab_size - 1)]
        for n in range(max_len + 1):
            for ys in itertools.product(labels, repeat=n):
                ys_in = torch.tensor([[model.sos, *ys]])
                logp = model.decode_forward(h, mask, ys_in).log_softmax(-1)[0].numpy()
                att = sum(logp[i, t] for i, t in enumerate(list(ys) + [model.eos]))
                ctc = -ctc_nll(lp, list(ys)) if ctc_weight > 0 else 0.0
                score = (1 - ctc_weight) * att + ctc_weight * ctc
                if score > best:
                    best, best_ys = score, list(ys)
    return best_ys, best


@pytest.mark.parametrize("ctc_weight", [0.0, 0.3, 1.0])
def test_wide_beam_finds_exhaustive_optimum(ctc_weight):
    for seed in range(3):
        model = tiny(seed=seed)
        x = torch.randn(15, 83, dtype=torch.float64)
        assert subsampled_len(15) == 3
        ids, score, _, _ = beam_search(model, x, beam=64, ctc_weight=ctc_weight)[0]
        want_ids, want = exhaustive_best(model, x, ctc_weight, 3)
        assert score == pytest.approx(want, abs=1e-9)
        assert ids == want_ids


def test_beam_one_equals_greedy():
    for seed in range(5):
        model = tiny(vocab=6, seed=seed)
        x = torch.randn(40, 83, dtype=torch.float64)
        ids, score, _, _ = beam_search(model, x, beam=1, ctc_weight=0.3)[0]
        g_ids, g_score = greedy_decode(model, x, ctc_weight=0.3)
        assert ids == g_ids
        assert score == pytest.approx(g_score, abs=1e-9)


def test_wider_beam_never_scores_worse():
    for seed in range(5):
        model = tiny(vocab=6, seed=seed)
        x = torch.randn(40, 83, dtype=torch.float64)
        s1 = beam_search(model, x, beam=1)[0][1]
        s8 = beam_search(model, x, beam=8)[0][1]
        assert s8 >= s1 - 1e-12


def test_nbest_sorted_and_max_len_respected():
    model = tiny(vocab=6)
    x = torch.randn(40, 83, dtype=torch.float64)
    out = beam_search(model, x, beam=4, nbest=4)
    scores = [s for _, s, _, _ in out]
    assert scores == sorted(scores, reverse=True)
    assert all(len(ids) <= subsampled_len(40) for ids, *_ in out)
    capped = beam_search(model, x, beam=4, ctc_weight=0.0, max_len_ratio=0.1)
    assert all(len(ids) <= max(1, int(0.1 * subsampled_len(40))) for ids, *_ in capped)


def test_prefix_scorer_eos_is_full_probability():
    rng = np.random.default_rng(0)
    lp = np.log(rng.dirichlet(np.ones(4), size=6))
    scorer = CTCPrefixScorer(lp, blank=0, eos=3)
    state = scorer.initial_state()
    psi, r = scorer.score(state, np.array([1]))
    state = (r[:, :, 0], psi[0], 1)
    psi_eos, _ = scorer.score(state, np.array([3]))
    assert psi_eos[0] == pytest.approx(-ctc_nll(lp, [1]), abs=1e-10)


def test_argument_and_input_errors():
    model = tiny()
    with pytest.raises(ValueError):
        beam_search(model, torch.randn(20, 83, dtype=torch.float64), beam=0)
    with pytest.raises(ValueError):
        beam_search(model, torch.randn(20, 83, dtype=torch.float64), ctc_weight=1.5)
    with pytest.raises((ValueError, DecodeError)):
        beam_search(model, torch.zeros(0, 83, dtype=torch.float64))


def test_hypothesis_file_roundtrip(tmp_path):
    hyps = [Hypothesis("u1", [1, 2], "ab", -1.25, 1.0), Hypothesis("u2", [], "", -3.0, 2.0)]
    write_hypotheses(tmp_path / "h.txt", hyps)
    assert read_hypotheses(tmp_path / "h.txt") == {"u1": (-1.25, "ab"), "u2": (-3.0, "")}
    with pytest.raises(ValueError):
        Hypothesis("u", [], "", float("nan"), 1.0)
