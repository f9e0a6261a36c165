"""Curriculum data pipeline: mixture sampling, packing, span corruption,
SFT formatting, and reverse-instruction synthesis from long documents.

All randomness flows through numpy Generators seeded from explicit (seed,
stream) tuples, so every stream is replayable and shardable: shard i of S
seeds with (seed, i) and the union of shard outputs is a deterministic
function of (seed, S).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DeskLMError
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


# -- types -----------------------------------------------------------------------


@dataclass
class SourceSpec:
    name: str
    weight: float
    documents: Sequence[bytes]

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"source {self.name!r}: weight must be non-negative")
        self.documents = [d.encode("utf-8") if isinstance(d, str) else bytes(d)
                          for d in self.documents]


@dataclass
class CurriculumStage:
    stage_id: str
    mixture: list[SourceSpec]
    context_length: int
    token_budget: int
    objective_mix: dict[str, float] = field(
        default_factory=lambda: {"next_token": 1.0, "span_corruption": 0.0})

    def __post_init__(self):
        if self.context_length < 2:
            raise ConfigError(f"stage {self.stage_id!r}: context_length must be >= 2")
        if self.token_budget <= 0:
            raise ConfigError(f"stage {self.stage_id!r}: token_budget must be positive")
        unknown = set(self.objective_mix) - {"next_token", "span_corruption"}
        if unknown:
            raise ConfigError(f"stage {self.stage_id!r}: unknown objectives {sorted(unknown)}")
        total = sum(self.objective_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"stage {self.stage_id!r}: objective fractions sum to {total}, not 1")
        if not self.mixture or all(not s.documents for s in self.mixture):
            raise ConfigError(f"stage {self.stage_id!r}: needs at least one non-empty source")


@dataclass
class SftExample:
    prompt: list[int]
    response: list[int]

    def __post_init__(self):
        if not self.response:
            raise ConfigError("SFT example has an empty response")

    @property
    def loss_mask(self) -> list[bool]:
        """True exactly on response tokens."""
        return [False] * len(self.prompt) + [True] * len(self.response)


@dataclass
class SpanCorruptionExample:
    corrupted: list[int]
    target: list[int]


# -- mixture sampling ----------------------------------------------------------------


class MixtureSampler:
    """Categorical draws over sources; within a source, documents cycle in
    seeded-shuffled order without replacement, reshuffling each epoch."""

    def __init__(self, stage: CurriculumStage, seed: int, shard: int = 0, n_shards: int = 1):
        if not 0 <= shard < n_shards:
            raise ConfigError(f"shard {shard} outside [0, {n_shards})")
        sources = [s for s in stage.mixture if s.documents]
        weights = np.array([s.weight for s in sources], dtype=np.float64)
        if weights.sum() <= 0:
            raise ConfigError(f"stage {stage.stage_id!r}: mixture weights are all zero")
        self.sources = sources
        self.weights = weights / weights.sum()
        root = np.random.SeedSequence([int(seed), shard, 0x313C])
        self._rng = np.random.default_rng(root)
        self._doc_rngs = [np.random.default_rng(np.random.SeedSequence([int(seed), shard, 1, i]))
                          for i in range(len(sources))]
        self._orders = [rng.permutation(len(s.documents))
                        for rng, s in zip(self._doc_rngs, sources)]
        self._cursors = [0] * len(sources)

    def _take(self, s: int, count: int) -> list[bytes]:
        docs = self.sources[s].documents
        out = []
        while len(out) < count:
            if self._cursors[s] >= len(docs):
                self._orders[s] = self._doc_rngs[s].permutation(len(docs))
                self._cursors[s] = 0
            take = min(count - len(out), len(docs) - self._cursors[s])
            idx = self._orders[s][self._cursors[s]:self._cursors[s] + take]
            out.extend(docs[i] for i in idx)
            self._cursors[s] += take
        return out

    def draw(self, n: int) -> list[tuple[str, bytes]]:
        if n < 1:
            raise ConfigError(f"draw count must be >= 1, got {n}")
        picks = self._rng.choice(len(self.sources), size=n, p=self.weights)
        out: list[tuple[str, bytes] | None] = [None] * n
        for s in range(len(self.sources)):
            slots = np.nonzero(picks == s)[0]
            if slots.size == 0:
                continue
            name = self.sources[s].name
            for slot, doc in zip(slots, self._take(s, slots.size)):
                out[slot] = (name, doc)
        return out  # type: ignore[return-value]


def sample_mixture(stage: CurriculumStage, n: int, seed: int) -> list[tuple[str, bytes]]:
    return MixtureSampler(stage, seed).draw(n)


# -- span corruption --------------------------------------------------------------------


def _positive_composition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Split total into `parts` positive integers (lengths around total/parts)."""
    return np.ones(parts, dtype=np.int64) + rng.multinomial(total - parts, np.full(parts, 1.0 / parts))


def span_corrupt(tokens: Sequence[int], corruption_rate: float, mean_span: float,
                 seed: int, vocab: Vocabulary) -> SpanCorruptionExample:
    """Mask ~corruption_rate of tokens in spans averaging mean_span tokens.

    Sentinels are assigned left to right; the target interleaves each
    sentinel with the span it replaced and ends with EOS, so input plus
    target reconstruct the original sequence exactly.
    """
    if not 0 <= corruption_rate < 1:
        raise ConfigError(f"corruption_rate must be in [0, 1), got {corruption_rate}")
    if mean_span < 1:
        raise ConfigError(f"mean_span must be >= 1, got {mean_span}")
    tokens = [int(t) for t in tokens]
    if any(vocab.sentinel_index(t) is not None for t in tokens):
        raise ConfigError("span_corrupt: input already contains sentinel tokens")
    n = len(tokens)
    if corruption_rate == 0 or n == 0:
        return SpanCorruptionExample(corrupted=list(tokens), target=[])

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CA9]))
    num_noise = int(round(n * corruption_rate))
    num_noise = min(max(num_noise, 1), n - 1) if n > 1 else 1
    num_spans = int(round(num_noise / mean_span))
    num_spans = min(max(num_spans, 1), num_noise)
    if num_spans > vocab.n_sentinels:
        raise DeskLMError(
            f"span_corrupt: {num_spans} spans exceed {vocab.n_sentinels} sentinels; "
            f"raise n_sentinels or lower the corruption rate")

    span_lens = _positive_composition(num_noise, num_spans, rng)
    # gaps between/around spans; interior gaps >= 1 keeps spans distinct
    n_keep = n - num_noise
    interior = num_spans - 1
    if n_keep < interior:
        raise DeskLMError(
            f"span_corrupt: sequence of {n} tokens too short for {num_spans} spans")
    extra = rng.multinomial(n_keep - interior, np.full(num_spans + 1, 1.0 / (num_spans + 1)))
    gaps = extra.copy()
    gaps[1:-1] += 1

    corrupted: list[int] = []
    target: list[int] = []
    pos = 0
    for k in range(num_spans):
        pos += int(gaps[k])
        corrupted.extend(tokens[pos - int(gaps[k]):pos])
        span = tokens[pos:pos + int(span_lens[k])]
        pos += int(span_lens[k])
        corrupted.append(vocab.sentinel(k))
        target.append(vocab.sentinel(k))
        target.extend(span)
    corrupted.extend(tokens[pos:])
    target.append(vocab.eos)
    return SpanCorruptionExample(corrupted=corrupted, target=target)


def reconstruct_span_corruption(example: SpanCorruptionExample, vocab: Vocabulary) -> list[int]:
    """Inverse of span_corrupt: splice target spans back over their sentinels."""
    spans: dict[int, list[int]] = {}
    current: int | None = None
    for t in example.target:
        k = vocab.sentinel_index(t)
        if k is not None:
            spans[k] = []
            current = k
        elif t == vocab.eos:
            current = None
        elif current is not None:
            spans[current].append(t)
    out: list[int] = []
    for t in example.corrupted:
        k = vocab.sentinel_index(t)
        if k is None:
            out.append(t)
        else:
            out.extend(spans.get(k, []))
    return out


# -- sequence packing --------------------------------------------------------------------


def pack_sequences(doc_tokens: Iterable[Sequence[int]], context_length: int,
                   vocab: Vocabulary) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Concatenate documents with EOS separators and emit fixed windows.

    Yields (tokens, real_mask), both of length context_length; the final
    partial window is padded with PAD and masked out.
    """
    if context_length < 2:
        raise ConfigError(f"context_length must be >= 2, got {context_length}")
    buf: list[int] = []
    for doc in doc_tokens:
        buf.extend(int(t) for t in doc)
        buf.append(vocab.eos)
        while len(buf) >= context_length:
            window = np.array(buf[:context_length], dtype=np.int64)
            del buf[:context_length]
            yield window, np.ones(context_length, dtype=bool)
    if buf:
        pad = context_length - len(buf)
        window = np.array(buf + [vocab.pad] * pad, dtype=np.int64)
        mask = np.array([True] * len(buf) + [False] * pad)
        yield window, mask


# -- SFT -------------------------------------------------------------------------------------


def format_sft(example: SftExample, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """BOS + prompt + response + EOS; loss mask true on response and EOS only."""
    tokens = [vocab.bos] + list(example.prompt) + list(example.response) + [vocab.eos]
    mask = ([False] * (1 + len(example.prompt))
            + [True] * len(example.response) + [True])
    return np.array(tokens, dtype=np.int64), np.array(mask, dtype=bool)


def default_instruction_generator(chunk: str) -> tuple[str, str]:
    """Blank the final word of the first usable sentence in the chunk.

    Deterministic: instruction asks to complete the sentence, answer is
    exactly the blanked word.
    """
    for raw in chunk.replace("\n", " ").split("."):
        words = raw.strip().split()
        if len(words) >= 4 and all(w.isalnum() for w in words):
            blanked = " ".join(words[:-1] + ["____"])
            return f"Complete: {blanked}.", words[-1]
    raise DeskLMError("no usable sentence in chunk")


def reverse_instruction_synthesize(
        long_doc: str | bytes, k: int, seed: int, vocab: Vocabulary,
        generator: Callable[[str], tuple[str, str]] | None = None,
        chunk_chars: int = 200) -> list[SftExample]:
    """Ground k (instruction, answer) pairs in chunks of a long document.

    Each emitted prompt embeds the full document followed by the
    instruction; the response (and loss) is the answer only. Chunk offsets
    are seeded-uniform; a generator failure skips that chunk with a warning.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    text = long_doc.decode("utf-8", errors="replace") if isinstance(long_doc, bytes) else long_doc
    if not text:
        raise ConfigError("long_doc is empty")
    generator = generator or default_instruction_generator
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    out: list[SftExample] = []
    for i in range(k):
        lo = int(rng.integers(0, max(1, len(text) - chunk_chars + 1)))
        chunk = text[lo:lo + chunk_chars]
        try:
            instruction, answer = generator(chunk)
        except DeskLMError as e:
            log.warning("reverse instruction generator failed on chunk %d: %s", i, e)
            continue
        prompt = f"{text}\n{instruction}\n"
        out.append(SftExample(prompt=vocab.encode(prompt), response=vocab.encode(answer)))
    if not out:
        raise DeskLMError("reverse_instruction_synthesize: generator failed on every chunk")
    return out


# -- source files -----------------------------------------------------------------------------
#
# Line-delimited source files store one document per line; newlines inside a
# document are escaped as \n and backslashes as \\ .


def _escape(doc: bytes) -> bytes:
    return doc.replace(b"\\", b"\\\\").replace(b"\n", b"\\n")


def _unescape(line: bytes) -> bytes:
    out = bytearray()
    i = 0
    while i < len(line):
        c = line[i]
        if c == 0x5C and i + 1 < len(line):  # backslash
            nxt = line[i + 1]
            out.append(0x0A if nxt == 0x6E else nxt)  # \n or the literal char
            i += 2
        else:
            out.append(c)
            i += 1
    return bytes(out)


def save_source_documents(path, docs: Iterable[bytes | str]) -> None:
    with open(path, "wb") as f:
        for doc in docs:
            raw = doc.encode("utf-8") if isinstance(doc, str) else bytes(doc)
            f.write(_escape(raw) + b"\n")


def load_source_documents(path) -> list[bytes]:
    """Directory of plain-text files (one doc per file) or a line-delimited file."""
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.is_file())
        if not files:
            raise ConfigError(f"source directory {p} is empty")
        return [q.read_bytes() for q in files]
    if not p.exists():
        raise ConfigError(f"source path {p} does not exist")
    return [_unescape(line) for line in p.read_bytes().split(b"\n") if line]


def load_sft_records(path, vocab: Vocabulary) -> list[SftExample]:
    """JSON-lines records with string fields 'prompt' and 'response'."""
    import json

    out = []
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(SftExample(prompt=vocab.encode(rec["prompt"]),
                                      response=vocab.encode(rec["response"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"{path}:{lineno}: bad SFT record: {e}") from e
    if not out:
        raise ConfigError(f"{path}: no SFT records")
    return out
