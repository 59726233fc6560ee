import pytest
from hypothesis import given
from hypothesis import strategies as st

from spkadapt.tokenizer import Tokenizer


def test_char_inventory_layout():
    tok = Tokenizer.from_texts(["bad kid", "abe"])
    assert tok.tokens[0] == "<blank>" and tok.tokens[1] == "<unk>" and tok.tokens[-1] == "<sos/eos>"
    assert tok.blank == 0 and tok.sos == tok.eos == len(tok) - 1


@given(st.lists(st.sampled_from(["abe", "bad", "kid", "duke"]), min_size=1, max_size=6))
def test_char_roundtrip(words):
    tok = Tokenizer.from_texts(["abe bad kid duke"])
    text = " ".join(words)
    ids = tok.encode(text)
    assert tok.blank not in ids and tok.sos not in ids
    assert tok.decode(ids) == text


def test_unknown_character_maps_to_unk():
    tok = Tokenizer.from_texts(["ab"])
    assert tok.encode("az") == [tok.index["a"], tok.unk]


def test_bpe_greedy_longest_match(tmp_path):
    (tmp_path / "vocab.txt").write_text("<blank>\n<unk>\n▁ba\n▁\nd\nk\nid\n<sos/eos>\n")
    tok = Tokenizer.from_file(tmp_path / "vocab.txt")
    assert tok.mode == "bpe"
    ids = tok.encode("bad kid")
    assert [tok.tokens[i] for i in ids] == ["▁ba", "d", "▁", "k", "id"]
    assert tok.decode(ids) == "bad kid"


def test_inventory_validation(tmp_path):
    with pytest.raises(ValueError):
        Tokenizer(["a", "<unk>", "<sos/eos>"])
    with pytest.raises(ValueError):
        Tokenizer(["<blank>", "<unk>", "a", "a", "<sos/eos>"])
    tok = Tokenizer.from_texts(["abc"])
    tok.save(tmp_path / "t.txt")
    assert Tokenizer.from_file(tmp_path / "t.txt").tokens == tok.tokens
