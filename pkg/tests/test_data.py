import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structmeta import data
from structmeta.data import (
    BOS,
    EOS,
    PAD,
    UNK,
    CorpusError,
    Example,
    FamilySpec,
    TaskSpec,
    Vocab,
)

T = TaskSpec("identity", "reverse", "reverse")


def ex(q, r, task=T):
    return Example(tuple(q.split()), tuple(r.split()), task)


def write(tmp_path, lines, name="corpus.tsv"):
    p = tmp_path / name
    p.write_text("".join(line + "\n" for line in lines))
    return p


# ---------------------------------------------------------------------------
# ingestion


def test_empty_file_yields_nothing(tmp_path):
    reader = data.load_corpus(write(tmp_path, []))
    assert list(reader) == []
    assert reader.report() == "0 malformed, 0 truncated"


def test_single_record(tmp_path):
    reader = data.load_corpus(write(tmp_path, ["identity\treverse\ta b c\tc b a"]))
    assert list(reader) == [ex("a b c", "c b a")]


def test_one_bad_line_among_ten(tmp_path):
    lines = [f"identity\treverse\ta{i} b\tb a{i}" for i in range(9)]
    lines.insert(4, "identity\treverse\tonly three fields")
    reader = data.load_corpus(write(tmp_path, lines))
    assert len(list(reader)) == 9
    assert reader.report().startswith("1 malformed")
    assert ":5:" in reader.problems[0]


def test_strict_mode_raises_on_first_bad_line(tmp_path):
    p = write(tmp_path, ["identity\treverse\ta\ta", "identity\treverse\t\tx"])
    with pytest.raises(CorpusError, match=":2:.*query"):
        list(data.load_corpus(p, strict=True))


def test_missing_file_is_a_corpus_error(tmp_path):
    with pytest.raises(CorpusError, match="cannot read"):
        list(data.load_corpus(tmp_path / "absent.tsv"))


def test_long_sequences_are_truncated_and_counted(tmp_path):
    long = " ".join(["x"] * 60)
    reader = data.load_corpus(write(tmp_path, [f"identity\treverse\t{long}\ty"]))
    (only,) = list(reader)
    assert len(only.query) == data.MAX_TOKENS
    assert reader.truncated == 1


def test_example_rejects_empty_sides():
    with pytest.raises(CorpusError):
        Example((), ("a",), T)


# ---------------------------------------------------------------------------
# vocabulary


def test_vocab_cap_keeps_most_frequent():
    corpus = [ex("a a a", "b"), ex("b", "c")]
    v = data.build_vocab(corpus, cap=6)
    assert v.encode(["a", "b", "c"]) == [4, 5, UNK]
    assert len(v) == 6


def test_vocab_ties_are_lexicographic_and_deterministic():
    corpus = [ex("z y x", "w")]
    a = data.build_vocab(corpus, cap=6)
    b = data.build_vocab(list(reversed(corpus)), cap=6)
    assert a.itos == b.itos == list(data.SPECIALS) + ["w", "x"]


def test_vocab_cap_too_small():
    with pytest.raises(ValueError):
        data.build_vocab([ex("a", "b")], cap=4)


def test_encode_decode_round_trip_with_oov():
    v = Vocab(["a", "b"])
    assert v.decode(v.encode(["a", "q", "b"])) == ["a", "<unk>", "b"]


def test_vocab_save_load(tmp_path):
    v = Vocab(["t1", "t0", "P"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").itos == v.itos


# ---------------------------------------------------------------------------
# partitioning


def three_tasks(n=50):
    tasks = [TaskSpec("identity", f) for f in ("reverse", "prepend_p", "append_e")]
    return tasks, [ex(f"a{i} b", "b a", t) for t in tasks for i in range(n)]


def test_partition_split_sizes():
    tasks, exs = three_tasks()
    roles = {tasks[0]: "val", tasks[1]: "test"}
    c = data.partition_tasks(exs, min_samples=10, val_n=5, test_n=10, role_assignment=roles, seed=0)
    for s in (c.val_tasks[tasks[0]], c.test_tasks[tasks[1]]):
        assert (len(s.train), len(s.val), len(s.test)) == (35, 5, 10)
    assert len(c.train_tasks[tasks[2]]) == 50


def test_partition_drops_small_tasks_and_is_seeded():
    tasks, exs = three_tasks()
    small = TaskSpec("identity", "duplicate")
    exs += [ex("a", "a a", small)] * 10
    a = data.partition_tasks(exs, 10, 5, 10, {tasks[0]: "test"}, seed=3)
    b = data.partition_tasks(exs, 10, 5, 10, {tasks[0]: "test"}, seed=3)
    assert small not in a.train_tasks
    assert a.test_tasks[tasks[0]] == b.test_tasks[tasks[0]]
    splits = a.test_tasks[tasks[0]]
    assert sorted(splits.train + splits.val + splits.test, key=str) == sorted(exs[:50], key=str)


def test_partition_role_errors():
    tasks, exs = three_tasks()
    with pytest.raises(ValueError, match="role"):
        data.partition_tasks(exs, 10, 5, 10, {tasks[0]: "dev"})
    with pytest.raises(CorpusError, match="absent"):
        data.partition_tasks(exs, 10, 5, 10, {TaskSpec("identity", "nope"): "val"})
    with pytest.raises(CorpusError, match="needs at least"):
        data.partition_tasks(exs, 10, 30, 30, {tasks[0]: "val"})


# ---------------------------------------------------------------------------
# batching


V = Vocab(["a", "b", "c"])


def test_batch_sizes_cover_the_data():
    exs = [ex("a " * (i + 1), "b") for i in range(5)]
    sizes = [len(b) for b in data.make_batches(exs, V, 2, np.random.default_rng(0), {T: 0})]
    assert sizes == [2, 2, 1]


def test_same_seed_same_order():
    exs = [ex("a " * (i + 1), "b") for i in range(7)]
    a = [b.src.tolist() for b in data.make_batches(exs, V, 3, np.random.default_rng(4), {T: 0})]
    b = [b.src.tolist() for b in data.make_batches(exs, V, 3, np.random.default_rng(4), {T: 0})]
    assert a == b


def test_collate_layout():
    b = data.collate([ex("a b", "c"), ex("c", "a b")], V, {T: 2})
    a_, b_, c_ = V.encode(["a", "b", "c"])
    assert b.src.tolist() == [[a_, b_], [c_, PAD]]
    assert b.tgt_in.tolist() == [[BOS, c_, PAD], [BOS, a_, b_]]
    assert b.tgt_out.tolist() == [[c_, EOS, PAD], [a_, b_, EOS]]
    assert b.task_ids.tolist() == [2, 2]


def test_collate_rejects_empty():
    with pytest.raises(ValueError):
        data.collate([], V, {T: 0})


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=12), st.integers(1, 5), st.integers(0, 99))
def test_masks_and_epoch_permutation(lengths, batch, seed):
    exs = [Example(tuple(["a"] * q + [str(i)]), tuple(["b"] * r), T) for i, (q, r) in enumerate(lengths)]
    vocab = Vocab(["a", "b"] + [str(i) for i in range(len(exs))])
    seen = []
    for b in data.make_batches(exs, vocab, batch, np.random.default_rng(seed), {T: 0}):
        src_len = b.src_mask.sum(axis=1).astype(int)
        tgt_len = b.tgt_mask.sum(axis=1).astype(int)
        for row, n, m in zip(b.src, src_len, tgt_len):
            i = int(vocab.decode([row[n - 1]])[0])
            seen.append(i)
            assert n == lengths[i][0] + 1 and m == lengths[i][1] + 1
        assert np.all((b.src != PAD) == (b.src_mask == 1))
    assert sorted(seen) == list(range(len(exs)))


def test_sample_batch_excludes():
    exs = [ex(f"a{i}", "b") for i in range(10)]
    vocab = Vocab([f"a{i}" for i in range(10)] + ["b"])
    rng = np.random.default_rng(0)
    _, used = data.sample_batch(exs, vocab, 6, rng, {T: 0})
    _, rest = data.sample_batch(exs, vocab, 6, rng, {T: 0}, exclude=used)
    assert len(rest) == 4 and not set(used) & set(rest)


# ---------------------------------------------------------------------------
# synthetic families


def test_transform_examples():
    assert data.TRANSFORMS["reverse"](["5", "6", "7"]) == ["7", "6", "5"]
    assert data.TRANSFORMS["dup_last"](["5", "6"]) == ["5", "6", "6"]
    assert data.TRANSFORMS["reverse_q"](["5", "6"]) == ["6", "5", "Q"]
    assert data.TRANSFORMS["prepend_p"](["5"]) == ["P", "5"]
    assert data.TRANSFORMS["append_e"](["5"]) == ["5", "E"]
    assert data.TRANSFORMS["duplicate"](["5", "6"]) == ["5", "6", "5", "6"]


def test_generated_responses_follow_their_transform():
    c = data.generate_synthetic_families(FamilySpec(examples_per_task=30), seed=1)
    for e in c.all_examples():
        assert list(e.response) == data.TRANSFORMS[e.task.response_fn](list(e.query))
        assert 3 <= len(e.query) <= 8


def test_default_layout_and_counts():
    spec = FamilySpec()
    c = data.generate_synthetic_families(spec, seed=0)
    assert len(c.train_tasks) == 3 and len(c.test_tasks) == 3 and not c.val_tasks
    assert {t.family for t in c.train_tasks} == {t.family for t in c.test_tasks}
    for s in c.test_tasks.values():
        assert (len(s.train), len(s.val), len(s.test)) == (32, 24, 40)
    assert all(len(v) == 400 for v in c.train_tasks.values())


def test_generation_is_seeded():
    spec = FamilySpec(examples_per_task=20)
    a = data.generate_synthetic_families(spec, 5)
    b = data.generate_synthetic_families(spec, 5)
    c = data.generate_synthetic_families(spec, 6)
    assert list(a.all_examples()) == list(b.all_examples())
    assert list(a.all_examples()) != list(c.all_examples())


def test_synthetic_vocab_covers_all_tokens():
    spec = FamilySpec(examples_per_task=20)
    v = data.synthetic_vocab(spec)
    for e in data.generate_synthetic_families(spec, 0).all_examples():
        assert UNK not in v.encode(e.query + e.response)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(families={"a": ["reverse", "reverse_q"]}), "families"),
        (dict(families={"a": ["reverse"], "b": ["duplicate", "dup_last"]}), "families"),
        (dict(families={"a": ["reverse", "spin"], "b": ["duplicate", "dup_last"]}), "families"),
        (dict(alphabet=7), "alphabet"),
        (dict(min_len=5, max_len=4), "min_len"),
        (dict(val_n=0), "val_n"),
        (dict(held_out=["reverse", "reverse_q", "dup_last", "append_e"]), "held_out"),
        (dict(held_out=["dup_last", "append_e"]), "held_out"),
    ],
)
def test_family_spec_validation(kwargs, field):
    with pytest.raises(ValueError, match=field):
        FamilySpec(**kwargs).validate()


def test_task_label_round_trip():
    assert TaskSpec.from_label(T.label) == T
    with pytest.raises(ValueError):
        TaskSpec.from_label("no-separator")


def test_corpus_dir_round_trip(tmp_path):
    c = data.generate_synthetic_families(FamilySpec(examples_per_task=15), seed=2)
    data.save_corpus(c, tmp_path / "c")
    back = data.read_corpus_dir(tmp_path / "c")
    assert back.train_tasks == c.train_tasks
    assert back.test_tasks == c.test_tasks
    assert [t.family for t in back.train_tasks] == [t.family for t in c.train_tasks]
    assert back.counts() == c.counts()


def test_read_corpus_dir_requires_task_table(tmp_path):
    with pytest.raises(CorpusError, match="tasks.tsv"):
        data.read_corpus_dir(tmp_path)
