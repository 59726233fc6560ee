import numpy as np
import pytest
import torch

from spkadapt.speaker_embed import (EMB_DIM, EmbedderConfig, EmbeddingNotFound, EmbeddingStore, SpeakerEmbedder,
                                    SpeakerEmbedding, TrainedEmbedder, extract_utterance_embedding,
                                    speaker_embedding, train_embedder)


def _toy_data(n_spk=3, per=6, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(0, 2, (n_spk, 83))
    utts, utt2spk = {}, {}
    for s in range(n_spk):
        for i in range(per):
            u = f"s{s}-{i}"
            utts[u] = centres[s] + rng.normal(0, 1, (int(rng.integers(80, 200)), 83))
            utt2spk[u] = f"s{s}"
    return utts, utt2spk


@pytest.mark.parametrize("flavor", ["ff", "attn"])
def test_embedding_shape_and_permutation_invariance(flavor):
    torch.manual_seed(0)
    model = SpeakerEmbedder(EmbedderConfig(flavor=flavor), 4).double().eval()
    x = np.random.default_rng(0).standard_normal((50, 83))
    a = extract_utterance_embedding(model, x, "u1", "s1")
    b = extract_utterance_embedding(model, x[np.random.default_rng(1).permutation(50)], "u1", "s1")
    assert a.vector.shape == (EMB_DIM,) and a.scope == "utterance"
    np.testing.assert_allclose(a.vector, b.vector, atol=1e-10)


def test_padding_does_not_change_embedding():
    torch.manual_seed(0)
    model = SpeakerEmbedder(EmbedderConfig(flavor="attn"), 2).double().eval()
    x = torch.randn(1, 30, 83, dtype=torch.float64)
    padded = torch.cat([x, torch.randn(1, 10, 83, dtype=torch.float64)], dim=1)
    mask = torch.zeros(1, 40, dtype=torch.bool)
    mask[0, :30] = True
    with torch.no_grad():
        assert torch.allclose(model.embed(x), model.embed(padded, mask), atol=1e-10)


def test_training_separates_toy_speakers():
    utts, utt2spk = _toy_data()
    trained = train_embedder(utts, utt2spk, EmbedderConfig(epochs=8, hidden_dim=32))
    assert trained.train_accuracy == 1.0
    assert trained.history[-1] < trained.history[0]


def test_training_is_deterministic():
    utts, utt2spk = _toy_data(n_spk=2, per=3)
    cfg = EmbedderConfig(epochs=2, hidden_dim=16)
    a, b = train_embedder(utts, utt2spk, cfg), train_embedder(utts, utt2spk, cfg)
    assert a.history == b.history


def test_needs_two_speakers():
    utts, utt2spk = _toy_data(n_spk=1)
    with pytest.raises(ValueError):
        train_embedder(utts, utt2spk, EmbedderConfig(epochs=1))


def test_save_load(tmp_path):
    utts, utt2spk = _toy_data(n_spk=2, per=2)
    trained = train_embedder(utts, utt2spk, EmbedderConfig(epochs=1, hidden_dim=16, flavor="attn"))
    trained.save(tmp_path / "e.pt")
    again = TrainedEmbedder.load(tmp_path / "e.pt")
    x = utts["s0-0"]
    np.testing.assert_array_equal(extract_utterance_embedding(trained, x).vector,
                                  extract_utterance_embedding(again, x).vector)


def test_empty_input_rejected():
    model = SpeakerEmbedder(EmbedderConfig(), 2)
    with pytest.raises(ValueError):
        extract_utterance_embedding(model, np.zeros((0, 83)))


def test_speaker_embedding_is_mean():
    vs = [SpeakerEmbedding(np.full(EMB_DIM, float(i)), "utterance", f"u{i}", "s") for i in range(4)]
    spk = speaker_embedding(vs)
    assert spk.scope == "speaker" and spk.id == "s"
    assert np.all(spk.vector == 1.5)
    with pytest.raises(ValueError):
        speaker_embedding(vs + [SpeakerEmbedding(np.zeros(EMB_DIM), "utterance", "x", "t")])


def test_embedding_validation():
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.zeros(10), "speaker", "s")
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.zeros(EMB_DIM), "global", "s")
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.full(EMB_DIM, np.inf), "speaker", "s")


def test_store_roundtrip_and_shadowing(tmp_path):
    store = EmbeddingStore(tmp_path)
    a = SpeakerEmbedding(np.arange(EMB_DIM, dtype=float), "speaker", "s1")
    b = SpeakerEmbedding(-np.arange(EMB_DIM, dtype=float), "utterance", "u1", "s1")
    store.put_many([a, b])
    assert ("s1", "speaker") in store and store.ids("utterance") == ["u1"]
    again = EmbeddingStore(tmp_path)
    np.testing.assert_array_equal(again.get("s1", "speaker").vector, a.vector)
    assert again.get("u1", "utterance").speaker_id == "s1"
    again.put(SpeakerEmbedding(np.ones(EMB_DIM), "speaker", "s1"))
    assert np.all(EmbeddingStore(tmp_path).get("s1", "speaker").vector == 1.0)
    with pytest.raises(EmbeddingNotFound):
        again.get("s1", "utterance")
    with pytest.raises(KeyError):
        again.get("nobody", "speaker")
