"""Needle-in-a-haystack passkey retrieval: task generation, grid scoring,
and context-extrapolation sweeps.

Tasks are deterministic in (context length, depth, seed). The filler text is
digit-free by construction, so the only digit sequence in a prompt is the
needle's passkey; scoring is exact-substring match on the digits.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

NEEDLE_TEMPLATE = "The pass key is {key}. Remember it. "
QUESTION = " What is the pass key?"

_FILLER_WORDS = (
    "the quiet harbor keeps old stories under a grey sky while slow boats "
    "drift past mossy stones and gulls trace idle circles over the water "
    "meadow lanterns glow beside the crooked fence as travelers rest their "
    "tired horses near the mill and wind moves gently through tall pines"
).split()


def _filler_text(rng: np.random.Generator, n_chars: int) -> str:
    """Seeded digit-free filler of at least n_chars characters."""
    parts = []
    total = 0
    while total < n_chars:
        k = int(rng.integers(5, 9))
        words = rng.choice(len(_FILLER_WORDS), size=k)
        sentence = " ".join(_FILLER_WORDS[w] for w in words).capitalize() + ". "
        parts.append(sentence)
        total += len(sentence)
    return "".join(parts)


@dataclass
class PasskeyTask:
    context_len: int
    depth: float
    passkey: str
    prompt: str
    expected: str

    @property
    def prompt_tokens(self) -> list[int]:
        return list(self.prompt.encode("utf-8"))


def make_passkey_task(context_len: int, depth: float, seed: int,
                      digits: int = 5) -> PasskeyTask:
    """Hide a passkey sentence at the byte offset nearest depth * context_len.

    The prompt is cut to exactly context_len byte tokens: filler, the needle
    sentence, more filler, then the question.
    """
    if not 0 <= depth <= 1:
        raise ConfigError(f"depth must be in [0, 1], got {depth}")
    if digits < 1:
        raise ConfigError(f"digits must be >= 1, got {digits}")
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(seed), int(context_len), int(round(depth * 10_000)), 0xA55]))
    key = str(int(rng.integers(10 ** (digits - 1), 10 ** digits)))
    needle = NEEDLE_TEMPLATE.format(key=key)
    minimum = len(needle) + len(QUESTION)
    if context_len < minimum:
        raise ConfigError(
            f"context_len {context_len} too small for the needle and question; "
            f"minimum is {minimum}")

    fill_budget = context_len - len(needle) - len(QUESTION)
    start = int(round(depth * fill_budget))
    filler = _filler_text(rng, fill_budget)
    prompt = filler[:start] + needle + filler[start:fill_budget] + QUESTION
    assert len(prompt) == context_len
    assert key in prompt and key not in filler
    return PasskeyTask(context_len=context_len, depth=depth, passkey=key,
                       prompt=prompt, expected=key)


@dataclass
class PasskeyGrid:
    context_lens: list[int]
    depths: list[float]
    accuracy: np.ndarray  # (len(context_lens), len(depths))
    trials: np.ndarray

    def rows(self) -> list[tuple[int, float, int, float]]:
        out = []
        for i, ctx in enumerate(self.context_lens):
            for j, d in enumerate(self.depths):
                out.append((ctx, d, int(self.trials[i, j]), float(self.accuracy[i, j])))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["context_len", "depth", "trials", "accuracy"])
            for ctx, d, n, acc in self.rows():
                w.writerow([ctx, d, n, repr(acc)])

    def mean_accuracy(self) -> float:
        return float(self.accuracy.mean())


def score_answer(task: PasskeyTask, answer: str) -> int:
    """1 iff the exact passkey digit string appears in the answer."""
    return int(task.passkey in answer)


def evaluate_passkey(answer_fn: Callable[[str], str], context_lens: Sequence[int],
                     depths: Sequence[float], m: int, seed: int) -> PasskeyGrid:
    """Accuracy over an (context length x depth) grid, m trials per cell.

    Cell trials get seeds derived from (seed, cell index, trial), so cells are
    independent and the grid is reproducible. An answer_fn failure scores 0.
    """
    if m < 1:
        raise ConfigError(f"trials per cell must be >= 1, got {m}")
    context_lens = list(context_lens)
    depths = list(depths)
    acc = np.zeros((len(context_lens), len(depths)))
    trials = np.full((len(context_lens), len(depths)), m, dtype=int)
    for i, ctx in enumerate(context_lens):
        for j, d in enumerate(depths):
            cell = i * len(depths) + j
            hits = 0
            for t in range(m):
                task = make_passkey_task(ctx, d, seed=_cell_seed(seed, cell, t))
                try:
                    answer = answer_fn(task.prompt)
                except Exception as e:  # scored as a miss, per the harness contract
                    log.warning("answer_fn failed on ctx=%d depth=%.2f trial=%d: %s",
                                ctx, d, t, e)
                    answer = ""
                hits += score_answer(task, answer)
            acc[i, j] = hits / m
    return PasskeyGrid(context_lens=context_lens, depths=depths, accuracy=acc,
                       trials=trials)


def _cell_seed(seed: int, cell: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), cell, trial]).generate_state(1)[0])


def extrapolation_sweep(answer_fn: Callable[[str], str], trained_ctx: int,
                        factors: Sequence[float], m: int, seed: int,
                        depths: Sequence[float] = (0.1, 0.5, 0.9),
                        csv_path=None) -> list[dict]:
    """Mean passkey accuracy at context = factor * trained_ctx for each factor."""
    if any(f <= 0 for f in factors):
        raise ConfigError("factors must be positive")
    rows = []
    for idx, factor in enumerate(factors):
        ctx = max(1, int(round(factor * trained_ctx)))
        grid = evaluate_passkey(answer_fn, [ctx], depths, m,
                                seed=_cell_seed(seed, 1_000_000 + idx, 0))
        rows.append({"factor": float(factor), "context_len": ctx,
                     "trials": int(m * len(depths)),
                     "accuracy": grid.mean_accuracy()})
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=["factor", "context_len", "trials", "accuracy"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "accuracy": repr(r["accuracy"])})
    return rows


def model_answer_fn(model, max_new: int = 8) -> Callable[[str], str]:
    """Wrap a model as prompt-text -> answer-text (greedy, BOS-prefixed)."""
    def answer(prompt: str) -> str:
        ids = [model.vocab.bos] + model.vocab.encode(prompt)
        out = model.generate(ids, max_new=max_new)
        return model.vocab.decode(model.vocab.strip_special(out))

    return answer


def passkey_training_examples(n: int, context_len: int, seed: int, vocab,
                              min_context: int | None = None) -> list:
    """SFT examples drawn from the passkey task distribution (response = digits).

    Context lengths vary uniformly in [min_context, context_len] and depths
    uniformly in [0, 1], so retrieval is trained at every offset.
    """
    from .data import SftExample

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A55]))
    lo = min_context or context_len
    out = []
    for i in range(n):
        ctx = int(rng.integers(lo, context_len + 1))
        depth = float(rng.uniform(0, 1))
        task = make_passkey_task(ctx, depth, seed=int(rng.integers(0, 2 ** 31)))
        out.append(SftExample(prompt=vocab.encode(task.prompt),
                              response=vocab.encode(task.expected)))
    return out
