"""Byte-level vocabulary with special and sentinel tokens.

Ids 0..255 are raw bytes; BOS/EOS/PAD/IMG_START/IMG_END follow; then
n_sentinels span-mask tokens. decode(encode(s)) == s for any byte string,
since encode only ever emits byte ids.
"""

from __future__ import annotations

from .errors import ConfigError, VocabError

N_BYTES = 256
SPECIALS = ("<bos>", "<eos>", "<pad>", "<img>", "</img>")


class Vocabulary:
    def __init__(self, n_sentinels: int = 100):
        if n_sentinels < 0:
            raise ConfigError(f"n_sentinels must be >= 0, got {n_sentinels}")
        self.n_sentinels = n_sentinels
        self.bos = N_BYTES
        self.eos = N_BYTES + 1
        self.pad = N_BYTES + 2
        self.img_start = N_BYTES + 3
        self.img_end = N_BYTES + 4
        self._sentinel_base = N_BYTES + len(SPECIALS)
        self.size = self._sentinel_base + n_sentinels

    def sentinel(self, k: int) -> int:
        """Id of span-mask token k (surface form <extra_id_k>)."""
        if not 0 <= k < self.n_sentinels:
            raise VocabError(f"sentinel index {k} outside [0, {self.n_sentinels})")
        return self._sentinel_base + k

    def sentinel_index(self, token_id: int) -> int | None:
        if self._sentinel_base <= token_id < self.size:
            return token_id - self._sentinel_base
        return None

    def is_special(self, token_id: int) -> bool:
        return token_id >= N_BYTES

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode_bytes(self, ids) -> bytes:
        """Byte ids back to bytes; special ids render as their surface form."""
        out = bytearray()
        for i in ids:
            i = int(i)
            if 0 <= i < N_BYTES:
                out.append(i)
            elif N_BYTES <= i < self._sentinel_base:
                out += SPECIALS[i - N_BYTES].encode("ascii")
            elif i < self.size:
                out += f"<extra_id_{i - self._sentinel_base}>".encode("ascii")
            else:
                raise VocabError(f"unknown token id {i} (vocabulary size {self.size})")
        return bytes(out)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def strip_special(self, ids) -> list[int]:
        """Drop non-byte ids (for reading generated text)."""
        return [int(i) for i in ids if 0 <= int(i) < N_BYTES]
