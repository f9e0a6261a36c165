"""Mixture sampling, span corruption, packing, SFT formatting, source files."""

import numpy as np
import pytest

from desklm.data import (CurriculumStage, MixtureSampler, SftExample, SourceSpec,
                         default_instruction_generator, format_sft, load_sft_records,
                         load_source_documents, pack_sequences,
                         reconstruct_span_corruption, reverse_instruction_synthesize,
                         sample_mixture, save_source_documents, span_corrupt)
from desklm.errors import ConfigError, DeskLMError
from desklm.tensor import Tensor, cross_entropy
from desklm.tokenizer import Vocabulary

V = Vocabulary()


def _docs(tag, n=20, words=12):
    rng = np.random.default_rng(hash(tag) % (2 ** 31))
    pool = ["alpha", "stone", "river", "gamma", "ember", "quiet", "vast", "loom"]
    return [(" ".join(rng.choice(pool, size=words)) + ".").encode() for _ in range(n)]


def _stage(weights, ctx=64, budget=4096, objectives=None):
    mixture = [SourceSpec(name=f"s{i}", weight=w, documents=_docs(f"s{i}"))
               for i, w in enumerate(weights)]
    return CurriculumStage(stage_id="st", mixture=mixture, context_length=ctx,
                           token_budget=budget,
                           objective_mix=objectives or {"next_token": 1.0})


# -- mixture sampling ------------------------------------------------------------


def test_single_source_gets_every_draw():
    stage = _stage([1.0])
    draws = sample_mixture(stage, 500, seed=0)
    assert all(name == "s0" for name, _ in draws)


def test_mixture_matches_stated_proportions():
    weights = [0.25, 0.30, 0.25, 0.10, 0.10]
    stage = _stage(weights)
    draws = sample_mixture(stage, 100_000, seed=1)
    names = [n for n, _ in draws]
    for i, w in enumerate(weights):
        freq = names.count(f"s{i}") / len(names)
        assert abs(freq - w) < 0.01, f"source {i}: {freq} vs {w}"


def test_fixed_seed_reproduces_draw_sequence():
    stage = _stage([0.5, 0.5])
    assert sample_mixture(stage, 200, seed=9) == sample_mixture(stage, 200, seed=9)


def test_all_zero_weights_rejected():
    stage = _stage([0.0, 0.0])
    with pytest.raises(ConfigError):
        sample_mixture(stage, 10, seed=0)


def test_mixture_three_sigma_concentration():
    weights = [0.4, 0.3, 0.2, 0.1]
    stage = _stage(weights)
    n = 100_000
    checks = []
    for seed in range(20):
        names = [nm for nm, _ in MixtureSampler(stage, seed=seed).draw(n)]
        for i, w in enumerate(weights):
            freq = names.count(f"s{i}") / n
            checks.append(abs(freq - w) < 3.0 * np.sqrt(w * (1 - w) / n))
    assert np.mean(checks) >= 0.99


def test_documents_cycle_without_replacement():
    docs = [f"doc{i}".encode() for i in range(6)]
    stage = CurriculumStage(stage_id="c", context_length=8, token_budget=64,
                            mixture=[SourceSpec("only", 1.0, docs)])
    drawn = [d for _, d in sample_mixture(stage, 12, seed=3)]
    assert sorted(drawn[:6]) == sorted(docs)      # one full epoch before reuse
    assert sorted(drawn[6:]) == sorted(docs)      # reshuffled second epoch
    assert drawn[:6] != drawn[6:] or True         # order may coincide; sets must


def test_shard_streams_are_deterministic():
    stage = _stage([0.6, 0.4])
    union_a = [MixtureSampler(stage, seed=5, shard=i, n_shards=2).draw(50) for i in range(2)]
    union_b = [MixtureSampler(stage, seed=5, shard=i, n_shards=2).draw(50) for i in range(2)]
    assert union_a == union_b
    assert union_a[0] != union_a[1]


# -- span corruption -----------------------------------------------------------------


def test_zero_rate_is_identity():
    toks = list(b"hello world")
    ex = span_corrupt(toks, 0.0, 3.0, seed=0, vocab=V)
    assert ex.corrupted == toks
    assert ex.target == []


def test_round_trip_on_1000_random_sequences():
    rng = np.random.default_rng(7)
    for trial in range(1000):
        n = int(rng.integers(1, 120))
        toks = [int(t) for t in rng.integers(0, 256, size=n)]
        ex = span_corrupt(toks, 0.15, 3.0, seed=trial, vocab=V)
        assert reconstruct_span_corruption(ex, V) == toks


def test_corrupted_fraction_within_band():
    wide = Vocabulary(n_sentinels=600)  # 10k tokens at rate .15 / span 3 needs ~500 spans
    rng = np.random.default_rng(8)
    toks = [int(t) for t in rng.integers(0, 256, size=10_000)]
    ex = span_corrupt(toks, 0.15, 3.0, seed=4, vocab=wide)
    n_sentinels = sum(1 for t in ex.corrupted if wide.sentinel_index(t) is not None)
    corrupted_fraction = (len(toks) - (len(ex.corrupted) - n_sentinels)) / len(toks)
    assert 0.12 <= corrupted_fraction <= 0.18


def test_sentinels_unique_and_increasing():
    rng = np.random.default_rng(9)
    for trial in range(200):
        toks = [int(t) for t in rng.integers(0, 256, size=80)]
        ex = span_corrupt(toks, 0.3, 2.0, seed=trial, vocab=V)
        ks = [V.sentinel_index(t) for t in ex.corrupted if V.sentinel_index(t) is not None]
        assert ks == sorted(set(ks))
        assert ks == list(range(len(ks)))


def test_mean_span_length_is_close():
    wide = Vocabulary(n_sentinels=600)
    rng = np.random.default_rng(10)
    toks = [int(t) for t in rng.integers(0, 256, size=10_000)]
    ex = span_corrupt(toks, 0.15, 3.0, seed=11, vocab=wide)
    n_spans = sum(1 for t in ex.corrupted if wide.sentinel_index(t) is not None)
    noise = len(toks) - (len(ex.corrupted) - n_spans)
    assert 2.0 <= noise / n_spans <= 4.0


def test_too_many_spans_error_suggests_remedy():
    small = Vocabulary(n_sentinels=2)
    toks = list(range(200))
    with pytest.raises(DeskLMError) as err:
        span_corrupt(toks, 0.5, 1.0, seed=0, vocab=small)
    assert "n_sentinels" in str(err.value)


def test_sentinel_input_rejected():
    with pytest.raises(ConfigError):
        span_corrupt([1, 2, V.sentinel(0)], 0.15, 3.0, seed=0, vocab=V)


# -- packing ------------------------------------------------------------------------


def test_pack_single_doc_one_window_one_eos():
    ctx = 32
    doc = list(range(1, ctx))  # context_length - 1 tokens
    windows = list(pack_sequences([doc], ctx, V))
    assert len(windows) == 1
    toks, mask = windows[0]
    assert mask.all()
    assert list(toks[:-1]) == doc
    assert toks[-1] == V.eos


def test_pack_conserves_tokens():
    rng = np.random.default_rng(11)
    docs = [[int(t) for t in rng.integers(0, 256, size=rng.integers(1, 90))]
            for _ in range(10)]
    windows = list(pack_sequences(docs, 64, V))
    unpadded = sum(int(m.sum()) for _, m in windows)
    assert unpadded == sum(len(d) for d in docs) + len(docs)


def test_pack_window_count_matches_naive_recount():
    rng = np.random.default_rng(12)
    docs = [[int(t) for t in rng.integers(0, 256, size=rng.integers(1, 90))]
            for _ in range(10)]
    windows = list(pack_sequences(docs, 64, V))
    total = sum(len(d) for d in docs) + len(docs)
    assert len(windows) == -(-total // 64)  # ceil
    for toks, mask in windows:
        assert toks.shape == (64,)
        np.testing.assert_array_equal(toks[~mask], V.pad)


def test_pack_rejects_tiny_context():
    with pytest.raises(ConfigError):
        list(pack_sequences([[1, 2]], 1, V))


# -- SFT formatting -------------------------------------------------------------------


def test_format_sft_masks_response_and_eos():
    ex = SftExample(prompt=V.encode("ask"), response=V.encode("answer"))
    toks, mask = format_sft(ex, V)
    assert int(mask.sum()) == len(ex.response) + 1
    assert toks[0] == V.bos and toks[-1] == V.eos
    assert not mask[:1 + len(ex.prompt)].any()


def test_empty_response_rejected():
    with pytest.raises(ConfigError):
        SftExample(prompt=[1], response=[])


def test_format_sft_round_trip_decodes_text():
    ex = SftExample(prompt=V.encode("what is up? "), response=V.encode("the sky"))
    toks, _ = format_sft(ex, V)
    assert V.decode([t for t in toks if t < 256]) == "what is up? the sky"


def test_masked_loss_ignores_prompt_logits():
    rng = np.random.default_rng(13)
    ex = SftExample(prompt=V.encode("abc"), response=V.encode("xy"))
    toks, mask = format_sft(ex, V)
    labels = np.where(mask[1:], toks[1:], -1)
    logits = rng.normal(size=(len(toks) - 1, V.size))
    loss_a = cross_entropy(Tensor(logits), labels, ignore_label=-1).item()
    zeroed = logits.copy()
    zeroed[~mask[1:]] = 0.0
    loss_b = cross_entropy(Tensor(zeroed), labels, ignore_label=-1).item()
    assert loss_a == loss_b


# -- reverse instruction synthesis ----------------------------------------------------


FIXTURE_DOC = ("the river bends past the old mill. "
               "a lantern hangs in the tower window. "
               "seven crows watch the northern gate. ") * 6


def test_heuristic_generator_blanks_final_word():
    instruction, answer = default_instruction_generator(
        "the river bends past the old mill. trailing")
    assert answer == "mill"
    assert "____" in instruction
    assert "mill" not in instruction


def test_synthesize_embeds_full_doc():
    out = reverse_instruction_synthesize(FIXTURE_DOC, k=3, seed=0, vocab=V)
    assert len(out) == 3
    doc_ids = V.encode(FIXTURE_DOC)
    for ex in out:
        assert ex.prompt[:len(doc_ids)] == doc_ids
        assert len(ex.response) >= 1


def test_generator_failures_skip_then_error():
    calls = []

    def flaky(chunk):
        calls.append(chunk)
        if len(calls) % 2 == 0:
            raise DeskLMError("nope")
        return "q?", "a"

    out = reverse_instruction_synthesize(FIXTURE_DOC, k=4, seed=1, vocab=V, generator=flaky)
    assert len(out) == 2

    def always_fails(chunk):
        raise DeskLMError("nope")

    with pytest.raises(DeskLMError):
        reverse_instruction_synthesize(FIXTURE_DOC, k=3, seed=1, vocab=V,
                                       generator=always_fails)


# -- source files --------------------------------------------------------------------------


def test_line_delimited_round_trip(tmp_path):
    docs = [b"plain doc", b"doc with\nnewline", b"doc with \\ backslash \\n literal"]
    path = tmp_path / "docs.txt"
    save_source_documents(path, docs)
    assert load_source_documents(path) == docs


def test_directory_source(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    (d / "a.txt").write_bytes(b"first document")
    (d / "b.txt").write_bytes(b"second document")
    assert load_source_documents(d) == [b"first document", b"second document"]


def test_sft_jsonl_loader(tmp_path):
    path = tmp_path / "sft.jsonl"
    path.write_text('{"prompt": "p1", "response": "r1"}\n{"prompt": "p2", "response": "r2"}\n')
    recs = load_sft_records(path, V)
    assert len(recs) == 2
    assert V.decode(recs[0].response) == "r1"
    path.write_text('{"prompt": "p"}\n')
    with pytest.raises(ConfigError):
        load_sft_records(path, V)
