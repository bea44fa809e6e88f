"""Loading, batching, and the synthetic generator."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styleforge import corpus as cp
from styleforge.corpus import (
    Batch,
    ParallelExample,
    UnlabeledPool,
    formalize,
    informalize,
    load_parallel,
    load_unlabeled,
    make_batches,
    make_pool_batches,
    synth_corpus,
)
from styleforge.errors import DataError
from styleforge.styles import StyleLabel
from styleforge.tokenizer import PAD_ID, train_bpe


@pytest.fixture(scope="module")
def table():
    pairs, pool_s, pool_t = synth_corpus(seed=7, n_parallel=50, n_unlabeled_per_style=20)
    text = [s for s, _ in pairs] + [t for _, t in pairs] + pool_s + pool_t
    return train_bpe(text, 300)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def levenshtein(a, b):
    """Textbook DP edit distance over token lists."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


class TestLoaders:
    def test_aligned_files(self, tmp_path, table):
        src = tmp_path / "a.src"
        tgt = tmp_path / "a.tgt"
        _write(src, ["im happy", "u r great", "thx for the gift"])
        _write(tgt, ["I am happy .", "You are great .", "Thank you for the gift ."])
        examples = load_parallel(str(src), str(tgt), table)
        assert len(examples) == 3
        assert [e.id for e in examples] == [0, 1, 2]
        assert all(e.src and e.tgt for e in examples)

    def test_line_count_mismatch(self, tmp_path, table):
        src = tmp_path / "a.src"
        tgt = tmp_path / "a.tgt"
        _write(src, ["a", "b", "c", "d", "e"])
        _write(tgt, ["a", "b", "c", "d"])
        with pytest.raises(DataError, match="line count mismatch 5 vs 4"):
            load_parallel(str(src), str(tgt), table)

    def test_empty_line_named(self, tmp_path, table):
        src = tmp_path / "a.src"
        tgt = tmp_path / "a.tgt"
        _write(src, ["a", "", "c"])
        _write(tgt, ["a", "b", "c"])
        with pytest.raises(DataError, match="line 2"):
            load_parallel(str(src), str(tgt), table)

    def test_overlong_pairs_dropped_with_warning(self, tmp_path, table, caplog):
        src = tmp_path / "a.src"
        tgt = tmp_path / "a.tgt"
        _write(src, ["im happy", " ".join(["gift"] * 80)])
        _write(tgt, ["I am happy .", "The gift ."])
        with caplog.at_level("WARNING"):
            examples = load_parallel(str(src), str(tgt), table, max_len=20)
        assert len(examples) == 1
        assert "rejected 1" in caplog.text

    def test_unlabeled(self, tmp_path, table):
        path = tmp_path / "pool.txt"
        _write(path, ["I am happy .", "You are great .", "The gift ."])
        pool = load_unlabeled(str(path), StyleLabel.TARGET, table)
        assert pool.style is StyleLabel.TARGET
        assert len(pool) == 3

    def test_unlabeled_empty_file(self, tmp_path, table):
        path = tmp_path / "pool.txt"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            load_unlabeled(str(path), StyleLabel.SOURCE, table)

    def test_missing_file(self, table):
        with pytest.raises(DataError):
            load_unlabeled("/nonexistent/pool.txt", StyleLabel.SOURCE, table)


class TestBatching:
    def _examples(self, rng, n, max_len=12):
        out = []
        for i in range(n):
            ls = rng.randint(1, max_len)
            lt = rng.randint(1, max_len)
            out.append(
                ParallelExample(
                    src=[rng.randint(6, 40) for _ in range(ls)],
                    tgt=[rng.randint(6, 40) for _ in range(lt)],
                    id=i,
                )
            )
        return out

    def test_single_example_single_batch(self):
        ex = ParallelExample(src=[7, 8, 9], tgt=[7, 8], id=0)
        batches = make_batches([ex], max_tokens=16)
        assert len(batches) == 1
        assert batches[0].example_ids == (0,)

    def test_oversized_example_rejected(self):
        ex = ParallelExample(src=list(range(6, 26)), tgt=[7], id=0)
        with pytest.raises(DataError):
            make_batches([ex], max_tokens=10)

    @given(st.integers(0, 10_000), st.integers(1, 120))
    @settings(max_examples=40, deadline=None)
    def test_brute_force_batch_audit(self, seed, n):
        # Conservation plus an exhaustive per-batch budget recount.
        rng = random.Random(seed)
        examples = self._examples(rng, n)
        budget = 48
        batches = make_batches(examples, max_tokens=budget, shuffle_seed=seed)
        seen = []
        for b in batches:
            assert b.kind == "parallel"
            seen.extend(b.example_ids)
            for mat, lengths in ((b.src, b.src_lengths), (b.tgt, b.tgt_lengths)):
                assert mat.numel() <= budget
                for row, ln in zip(mat, lengths):
                    assert (row[: int(ln)] != PAD_ID).all()
                    assert (row[int(ln) :] == PAD_ID).all()
        assert sorted(seen) == sorted(e.id for e in examples)

    def test_no_shuffle_preserves_order(self):
        rng = random.Random(3)
        examples = self._examples(rng, 20, max_len=4)
        batches = make_batches(examples, max_tokens=64)
        flat = [i for b in batches for i in b.example_ids]
        assert flat == list(range(20))

    def test_pool_batches_single_style(self):
        pool = UnlabeledPool(
            style=StyleLabel.TARGET,
            sentences=[[7, 8], [9], [10, 11, 12], [13]],
        )
        batches = make_pool_batches(pool, max_tokens=6)
        assert all(b.kind == "unlabeled" for b in batches)
        assert all(b.style is StyleLabel.TARGET for b in batches)
        assert all(b.tgt is None for b in batches)
        seen = [i for b in batches for i in b.example_ids]
        assert sorted(seen) == [0, 1, 2, 3]

    def test_pool_limit(self):
        pool = UnlabeledPool(style=StyleLabel.SOURCE, sentences=[[7]] * 10)
        batches = make_pool_batches(pool, max_tokens=4, limit=5)
        assert sum(len(b) for b in batches) == 5


class TestSyntheticCorpus:
    def test_same_seed_identical(self):
        a = synth_corpus(11, 200, 100)
        b = synth_corpus(11, 200, 100)
        assert a == b

    def test_different_seed_differs(self):
        assert synth_corpus(1, 200, 100) != synth_corpus(2, 200, 100)

    def test_informalize_formalize_inverse(self):
        pairs, _, _ = synth_corpus(5, 500, 50)
        for informal, formal in pairs:
            assert informalize(formal) == informal
            assert formalize(informal) == formal

    def test_pools_disjoint_from_parallel(self):
        pairs, pool_s, pool_t = synth_corpus(9, 300, 150)
        formal_parallel = {t for _, t in pairs}
        assert not formal_parallel & set(pool_t)
        informal_parallel = {s for s, _ in pairs}
        assert not informal_parallel & set(pool_s)
        # the two pools come from disjoint underlying sentences
        assert not {formalize(s) for s in pool_s} & set(pool_t)

    def test_mapping_is_a_function_of_source(self):
        pairs, _, _ = synth_corpus(13, 2000, 100)
        by_src = {}
        for informal, formal in pairs:
            assert by_src.setdefault(informal, formal) == formal

    def test_edit_distance_nonzero(self):
        pairs, _, _ = synth_corpus(17, 1000, 50)
        differing = sum(
            1 for s, t in pairs if levenshtein(s.split(), t.split()) > 0
        )
        assert differing / len(pairs) >= 0.95

    def test_space_large_enough_for_acceptance_scale(self):
        # 5000 parallel + 2*10000 pools + validation/test/eval pools
        assert len(cp._all_formal_sentences()) >= 35_000

    def test_bad_sizes(self):
        with pytest.raises(DataError):
            synth_corpus(1, 0, 10)
        with pytest.raises(DataError):
            synth_corpus(1, 10**9, 10)
