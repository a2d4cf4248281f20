"""Corpus ingestion, vocabulary, task partitioning, batching and synthetic task families."""
from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
MAX_TOKENS = 50


class CorpusError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TaskSpec:
    query_fn: str
    response_fn: str
    family: str | None = field(default=None, compare=False)

    @property
    def label(self) -> str:
        return f"{self.query_fn}|{self.response_fn}"

    @classmethod
    def from_label(cls, label: str, family: str | None = None) -> "TaskSpec":
        q, sep, r = label.partition("|")
        if not sep:
            raise ValueError(f"task label must look like 'query_fn|response_fn', got {label!r}")
        return cls(q, r, family)


@dataclass(frozen=True)
class Example:
    query: tuple[str, ...]
    response: tuple[str, ...]
    task: TaskSpec

    def __post_init__(self):
        if not self.query or not self.response:
            raise CorpusError("query and response must be non-empty")


@dataclass
class TaskSplits:
    """Adaptation data for one held-out task."""

    train: list[Example]
    val: list[Example]
    test: list[Example]


@dataclass
class Corpus:
    train_tasks: dict[TaskSpec, list[Example]] = field(default_factory=dict)
    val_tasks: dict[TaskSpec, TaskSplits] = field(default_factory=dict)
    test_tasks: dict[TaskSpec, TaskSplits] = field(default_factory=dict)

    def all_examples(self) -> Iterator[Example]:
        for exs in self.train_tasks.values():
            yield from exs
        for group in (self.val_tasks, self.test_tasks):
            for s in group.values():
                yield from s.train
                yield from s.val
                yield from s.test

    def find_task(self, label: str) -> tuple[str, TaskSpec]:
        for role, group in (("train", self.train_tasks), ("val", self.val_tasks), ("test", self.test_tasks)):
            for t in group:
                if t.label == label:
                    return role, t
        raise KeyError(f"task {label!r} is not in the corpus")

    def counts(self) -> list[tuple[str, str, str, int, int, int]]:
        """(role, label, family, n_train, n_val, n_test) rows, Table-1 style."""
        rows = []
        for t, exs in self.train_tasks.items():
            rows.append(("meta-train", t.label, t.family or "", len(exs), 0, 0))
        for role, group in (("meta-val", self.val_tasks), ("meta-test", self.test_tasks)):
            for t, s in group.items():
                rows.append((role, t.label, t.family or "", len(s.train), len(s.val), len(s.test)))
        return rows


# ---------------------------------------------------------------------------
# ingestion


class CorpusReader:
    """Stream examples from a tab-separated corpus file.

    Each line holds ``query_fn, response_fn, query, response`` with tokens
    separated by spaces.  Malformed lines are skipped and counted unless
    ``strict`` is set, in which case the first one raises.  Sequences longer
    than ``max_tokens`` are truncated and counted.
    """

    def __init__(self, path, strict: bool = False, max_tokens: int = MAX_TOKENS):
        self.path = Path(path)
        self.strict = strict
        self.max_tokens = max_tokens
        self.malformed = 0
        self.truncated = 0
        self.problems: list[str] = []

    def __iter__(self) -> Iterator[Example]:
        try:
            fh = open(self.path, encoding="utf-8")
        except OSError as err:
            raise CorpusError(f"cannot read corpus {self.path}: {err}") from err
        with fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                fields = line.split("\t")
                problem = None
                if len(fields) != 4:
                    problem = f"expected 4 tab-separated fields, found {len(fields)}"
                elif not all(f.strip() for f in fields):
                    missing = ("query_fn", "response_fn", "query", "response")[
                        [bool(f.strip()) for f in fields].index(False)
                    ]
                    problem = f"field {missing!r} is empty"
                if problem:
                    msg = f"{self.path}:{lineno}: {problem}"
                    if self.strict:
                        raise CorpusError(msg)
                    self.malformed += 1
                    self.problems.append(msg)
                    continue
                qf, rf, q, r = fields
                qt, rt = q.split(), r.split()
                if len(qt) > self.max_tokens or len(rt) > self.max_tokens:
                    self.truncated += 1
                    qt, rt = qt[: self.max_tokens], rt[: self.max_tokens]
                yield Example(tuple(qt), tuple(rt), TaskSpec(qf.strip(), rf.strip()))

    def report(self) -> str:
        return f"{self.malformed} malformed, {self.truncated} truncated"


def load_corpus(path, strict: bool = False) -> CorpusReader:
    return CorpusReader(path, strict=strict)


def write_examples(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.task.query_fn}\t{ex.task.response_fn}\t{' '.join(ex.query)}\t{' '.join(ex.response)}\n")


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIALS):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls([ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln])


def build_vocab(examples: Iterable[Example], cap: int) -> Vocab:
    """Most frequent tokens (ties lexicographic) up to ``cap`` ids including specials."""
    if cap < 5:
        raise ValueError("vocabulary cap must be at least 5")
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(ex.query)
        counts.update(ex.response)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: cap - len(SPECIALS)]])


# ---------------------------------------------------------------------------
# partitioning


def partition_tasks(
    examples: Iterable[Example],
    min_samples: int,
    val_n: int,
    test_n: int,
    role_assignment: Mapping[TaskSpec, str],
    seed: int = 0,
) -> Corpus:
    """Group examples by task, drop small tasks and assign meta-train/val/test roles.

    ``role_assignment`` maps tasks to ``"train"``, ``"val"`` or ``"test"``;
    retained tasks it does not mention go to meta-train.  Val and test tasks
    are shuffled and split into (adapt-train, ``val_n``, ``test_n``).
    """
    by_task: dict[TaskSpec, list[Example]] = {}
    for ex in examples:
        by_task.setdefault(ex.task, []).append(ex)
    kept = {t: exs for t, exs in by_task.items() if len(exs) > min_samples}
    for t, role in role_assignment.items():
        if role not in ("train", "val", "test"):
            raise ValueError(f"unknown role {role!r} for task {t.label}")
        if t not in kept:
            raise CorpusError(f"role assignment names task {t.label} which is absent or too small")
    rng = np.random.default_rng(seed)
    corpus = Corpus()
    for t in sorted(kept):
        exs = kept[t]
        role = role_assignment.get(t, "train")
        if role == "train":
            corpus.train_tasks[t] = exs
            continue
        if len(exs) < val_n + test_n + 1:
            raise CorpusError(
                f"task {t.label} has {len(exs)} examples, needs at least {val_n + test_n + 1}"
            )
        order = rng.permutation(len(exs))
        shuffled = [exs[i] for i in order]
        rest = len(exs) - val_n - test_n
        splits = TaskSplits(shuffled[:rest], shuffled[rest : rest + val_n], shuffled[rest + val_n :])
        (corpus.val_tasks if role == "val" else corpus.test_tasks)[t] = splits
    return corpus


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded id arrays.  ``tgt_in`` starts with BOS, ``tgt_out`` ends with EOS."""

    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]


def collate(examples: Sequence[Example], vocab: Vocab, task_index: Mapping[TaskSpec, int]) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    srcs = [vocab.encode(ex.query) for ex in examples]
    tgts = [vocab.encode(ex.response) for ex in examples]
    n, s_len, t_len = len(examples), max(map(len, srcs)), max(map(len, tgts)) + 1
    src = np.full((n, s_len), PAD, dtype=np.int64)
    tin = np.full((n, t_len), PAD, dtype=np.int64)
    tout = np.full((n, t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src[i, : len(s)] = s
        tin[i, : len(t) + 1] = [BOS] + t
        tout[i, : len(t) + 1] = t + [EOS]
    src_mask = np.zeros((n, s_len))
    tgt_mask = np.zeros((n, t_len))
    for i, (s, t) in enumerate(zip(srcs, tgts)):
        src_mask[i, : len(s)] = 1.0
        tgt_mask[i, : len(t) + 1] = 1.0
    task_ids = np.array([task_index[ex.task] for ex in examples], dtype=np.int64)
    return Batch(src, src_mask, tin, tout, tgt_mask, task_ids)


def make_batches(
    examples: Sequence[Example],
    vocab: Vocab,
    batch: int,
    rng: np.random.Generator,
    task_index: Mapping[TaskSpec, int],
) -> Iterator[Batch]:
    """One shuffled epoch of padded batches."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    order = rng.permutation(len(examples))
    for lo in range(0, len(order), batch):
        yield collate([examples[i] for i in order[lo : lo + batch]], vocab, task_index)


def sample_batch(
    examples: Sequence[Example],
    vocab: Vocab,
    size: int,
    rng: np.random.Generator,
    task_index: Mapping[TaskSpec, int],
    exclude: np.ndarray | None = None,
) -> tuple[Batch, np.ndarray]:
    """Draw ``size`` examples without replacement (optionally avoiding ``exclude``)."""
    pool = np.arange(len(examples))
    if exclude is not None and len(exclude):
        pool = np.setdiff1d(pool, exclude)
    take = rng.choice(pool, size=min(size, len(pool)), replace=False)
    return collate([examples[i] for i in take], vocab, task_index), take


# ---------------------------------------------------------------------------
# synthetic task families


def _reverse(q):
    return list(reversed(q))


TRANSFORMS: dict[str, Callable[[Sequence[str]], list[str]]] = {
    "reverse": _reverse,
    "reverse_q": lambda q: _reverse(q) + ["Q"],
    "prepend_p": lambda q: ["P"] + list(q),
    "append_e": lambda q: list(q) + ["E"],
    "duplicate": lambda q: list(q) + list(q),
    "dup_last": lambda q: list(q) + [q[-1]],
}
MARKERS = ("P", "E", "Q")

DEFAULT_FAMILIES = {
    "reverse": ["reverse", "reverse_q"],
    "affix": ["prepend_p", "append_e"],
    "echo": ["duplicate", "dup_last"],
}


@dataclass
class FamilySpec:
    """Recipe for a synthetic clustered corpus.

    Every task pairs the identity query transform with one member response
    transform.  Members listed in ``held_out`` (default: the last member of
    each family) become meta-test tasks with (adapt_train, val_n, test_n)
    splits; the rest are meta-train tasks with ``examples_per_task`` each.
    """

    families: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_FAMILIES.items()})
    alphabet: int = 10
    examples_per_task: int = 400
    adapt_train: int = 32
    val_n: int = 24
    test_n: int = 40
    min_len: int = 3
    max_len: int = 8
    held_out: list[str] | None = None

    def validate(self) -> None:
        if len(self.families) < 2:
            raise ValueError("families: need at least 2 families")
        for name, members in self.families.items():
            if len(members) < 2:
                raise ValueError(f"families: family {name!r} needs at least 2 members")
            for m in members:
                if m not in TRANSFORMS:
                    raise ValueError(f"families: unknown transform {m!r}")
        if self.alphabet < 8:
            raise ValueError("alphabet: size must be at least 8")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("min_len/max_len: need 1 <= min_len <= max_len")
        for key in ("examples_per_task", "adapt_train", "val_n", "test_n"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key}: must be positive")
        held = self.held_out_members()
        for name, members in self.families.items():
            if not any(m in held for m in members):
                raise ValueError(f"held_out: family {name!r} has no held-out member")
            if all(m in held for m in members):
                raise ValueError(f"held_out: family {name!r} has no meta-train member")

    def held_out_members(self) -> set[str]:
        if self.held_out is not None:
            return set(self.held_out)
        return {members[-1] for members in self.families.values()}

    def content_tokens(self) -> list[str]:
        return [f"t{i}" for i in range(self.alphabet)]


def generate_synthetic_families(spec: FamilySpec, seed: int) -> Corpus:
    spec.validate()
    rng = np.random.default_rng(seed)
    alphabet = spec.content_tokens()
    held = spec.held_out_members()
    corpus = Corpus()

    def draw(task: TaskSpec, n: int) -> list[Example]:
        fn = TRANSFORMS[task.response_fn]
        out = []
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            q = [alphabet[i] for i in rng.integers(0, len(alphabet), size=length)]
            out.append(Example(tuple(q), tuple(fn(q)), task))
        return out

    for family, members in spec.families.items():
        for m in members:
            task = TaskSpec("identity", m, family)
            if m in held:
                corpus.test_tasks[task] = TaskSplits(
                    draw(task, spec.adapt_train), draw(task, spec.val_n), draw(task, spec.test_n)
                )
            else:
                corpus.train_tasks[task] = draw(task, spec.examples_per_task)
    return corpus


def synthetic_vocab(spec: FamilySpec) -> Vocab:
    return Vocab(spec.content_tokens() + list(MARKERS))


# ---------------------------------------------------------------------------
# on-disk corpus directories


def save_corpus(corpus: Corpus, out_dir) -> None:
    """Write ``tasks.tsv`` plus one example file per role/split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["role\tquery_fn\tresponse_fn\tfamily"]
    for t in corpus.train_tasks:
        rows.append(f"train\t{t.query_fn}\t{t.response_fn}\t{t.family or ''}")
    for role, group in (("val", corpus.val_tasks), ("test", corpus.test_tasks)):
        for t in group:
            rows.append(f"{role}\t{t.query_fn}\t{t.response_fn}\t{t.family or ''}")
    (out / "tasks.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_examples(out / "meta_train.tsv", (ex for exs in corpus.train_tasks.values() for ex in exs))
    for role, group in (("meta_val", corpus.val_tasks), ("meta_test", corpus.test_tasks)):
        for split in ("train", "val", "test"):
            write_examples(out / f"{role}_{split}.tsv", (ex for s in group.values() for ex in getattr(s, split)))


def read_corpus_dir(path) -> Corpus:
    """Inverse of :func:`save_corpus`."""
    root = Path(path)
    if not (root / "tasks.tsv").exists():
        raise CorpusError(f"{root} does not contain tasks.tsv")
    roles: dict[tuple[str, str], tuple[str, TaskSpec]] = {}
    for line in (root / "tasks.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        if not line:
            continue
        role, q, r, fam = (line.split("\t") + [""])[:4]
        roles[(q, r)] = (role, TaskSpec(q, r, fam or None))

    def grouped(fname) -> dict[TaskSpec, list[Example]]:
        out: dict[TaskSpec, list[Example]] = {}
        p = root / fname
        if not p.exists():
            return out
        reader = CorpusReader(p, strict=True)
        for ex in reader:
            key = (ex.task.query_fn, ex.task.response_fn)
            if key not in roles:
                raise CorpusError(f"{p}: task {ex.task.label} missing from tasks.tsv")
            spec = roles[key][1]
            out.setdefault(spec, []).append(Example(ex.query, ex.response, spec))
        return out

    corpus = Corpus()
    train = grouped("meta_train.tsv")
    for (q, r), (role, spec) in roles.items():
        if role == "train":
            corpus.train_tasks[spec] = train.get(spec, [])
    for role, prefix, target in (("val", "meta_val", corpus.val_tasks), ("test", "meta_test", corpus.test_tasks)):
        parts = {s: grouped(f"{prefix}_{s}.tsv") for s in ("train", "val", "test")}
        for (q, r), (rl, spec) in roles.items():
            if rl == role:
                target[spec] = TaskSplits(*(parts[s].get(spec, []) for s in ("train", "val", "test")))
    return corpus
