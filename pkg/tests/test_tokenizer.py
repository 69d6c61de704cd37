import numpy as np

from moefuse.tokenizer import BOS, EOS, VOCAB_SIZE, ByteTokenizer


def test_vocab_layout():
    assert VOCAB_SIZE == 258
    assert BOS == 256 and EOS == 257


def test_round_trip_strings():
    tok = ByteTokenizer()
    for s in ["", "hello", "héllo wörld", "tabs\tand\nnewlines", "日本語"]:
        assert tok.decode(tok.encode(s)) == s


def test_round_trip_arbitrary_bytes():
    tok = ByteTokenizer()
    rng = np.random.default_rng(0)
    for _ in range(50):
        raw = bytes(rng.integers(0, 256, size=rng.integers(0, 40)).tolist())
        assert tok.decode_bytes(tok.encode(raw)) == raw
        assert tok.decode_bytes(tok.encode(raw, add_bos=True, add_eos=True)) == raw


def test_encode_specials():
    tok = ByteTokenizer()
    ids = tok.encode("ab", add_bos=True, add_eos=True)
    assert ids == [BOS, ord("a"), ord("b"), EOS]
    assert tok.encode("ab", add_bos=False) == [ord("a"), ord("b")]


def test_token_labels():
    tok = ByteTokenizer()
    assert tok.token_label(ord("a")) == "a"
    assert tok.token_label(BOS) == "<bos>"
    assert tok.token_label(EOS) == "<eos>"
    assert tok.token_label(0x0A) == "<0x0A>"
    assert tok.labels([ord("h"), ord("i")]) == ["h", "i"]
