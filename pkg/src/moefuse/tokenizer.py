"""Byte-level tokenizer: 256 byte values plus BOS/EOS specials.

Vocab size 258 keeps toy embeddings small and removes any external
tokenizer dependency. Encoding is exact: every byte string round-trips.
"""

from __future__ import annotations

BYTE_VOCAB = 256
BOS = 256
EOS = 257
VOCAB_SIZE = 258


class ByteTokenizer:
    vocab_size = VOCAB_SIZE
    bos_id = BOS
    eos_id = EOS

    def encode(self, text: str | bytes, add_bos: bool = True, add_eos: bool = False) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(raw)
        if add_bos:
            ids.insert(0, BOS)
        if add_eos:
            ids.append(EOS)
        return ids

    def decode_bytes(self, ids) -> bytes:
        return bytes(i for i in ids if 0 <= i < BYTE_VOCAB)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_label(self, token_id: int) -> str:
        """Printable form for trace displays."""
        if token_id == BOS:
            return "<bos>"
        if token_id == EOS:
            return "<eos>"
        b = bytes([token_id])
        if 0x20 <= token_id < 0x7F:
            return b.decode("ascii")
        return f"<0x{token_id:02X}>"

    def labels(self, ids) -> list[str]:
        return [self.token_label(i) for i in ids]
