"""Training regimes: multi-task (MTL), first-order MAML, structured meta-learning (SML), and fine-tuning.

The MAML machinery (:func:`inner_adapt`, :func:`first_order_meta_grad`) is
model-agnostic: it works on any ``loss_fn(params, batch) -> scalar Tensor``
over a :class:`ParamStore`.  The seq2seq-specific drivers sit on top.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import ParamStore, Tensor
from .data import (
    Batch,
    Corpus,
    Example,
    FamilySpec,
    TaskSpec,
    TaskSplits,
    Vocab,
    collate,
    generate_synthetic_families,
    make_batches,
    build_vocab,
    sample_batch,
    synthetic_vocab,
)
from .model import HyperParams, ModelParams, beam_search, init_params, teacher_forced_loss, token_nll
from .structure import TaskEmbeddingTable, decoder_size, extend_for_adaptation, gated_model, init_gates

log = logging.getLogger(__name__)

LossFn = Callable[[ParamStore, Any], Tensor]
REGIMES = ("MTL", "MTL+FT", "MAML", "SML")


@dataclass
class MetaConfig:
    alpha: float = 1.0
    beta: float = 1.0
    sml_beta: float | None = None
    tasks_per_meta_batch: int = 3
    inner_steps: int = 1
    minibatch: int = 64
    epochs: int = 8
    lr_decay_start_epoch: int = 3
    clip_train: float | None = 3.0
    clip_finetune: float | None = 1.0
    finetune_lr: float = 0.1
    mtl_lr: float = 1.0
    eval_every: int = 10
    patience: int = 5
    min_improvement: float = 0.0
    max_finetune_steps: int = 1000
    seeds: int = 5
    iters_per_epoch: int | None = None
    select_n: int = 100
    max_decode_len: int = 30

    def __post_init__(self):
        for name in ("alpha", "beta", "sml_beta", "finetune_lr", "mtl_lr"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("tasks_per_meta_batch", "inner_steps", "minibatch", "epochs", "eval_every", "seeds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.min_improvement < 1.0:
            raise ValueError("min_improvement must be in [0, 1)")
        if self.patience < 0 or self.max_finetune_steps < 0:
            raise ValueError("patience and max_finetune_steps must be >= 0")
        if self.lr_decay_start_epoch < 0:
            raise ValueError("lr_decay_start_epoch must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "MetaConfig":
        base = dict(
            minibatch=16, select_n=24, max_finetune_steps=400, max_decode_len=20,
            epochs=80, lr_decay_start_epoch=60, mtl_lr=2.0, beta=2.0, sml_beta=4.0,
            finetune_lr=1.0, min_improvement=0.01,
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, initial: float, epoch: int) -> float:
        """Learning rate during 1-based ``epoch``: halved every epoch after ``lr_decay_start_epoch``."""
        return initial * 0.5 ** max(0, epoch - self.lr_decay_start_epoch)


@dataclass
class AdaptReport:
    ft_step: int
    best_val_ppl: float
    test_metrics: dict[str, float]
    curve: list[tuple[int, float]]
    generations: list[list[str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# model-agnostic pieces


def loss_and_grads(loss_fn: LossFn, values: ParamStore, batch) -> tuple[float, ParamStore]:
    """Loss value and gradient of ``loss_fn`` at ``values`` (which are left untouched)."""
    leaves = values.copy(requires_grad=True)
    with ad.Graph() as g:
        loss = loss_fn(leaves, batch)
    ad.backward(g, loss)
    return loss.item(), leaves.grads()


def inner_adapt(loss_fn: LossFn, start: ParamStore, batch, cfg: MetaConfig) -> ParamStore:
    """``cfg.inner_steps`` SGD steps of size ``cfg.alpha`` from ``start``; returns a new store."""
    if batch is None or (hasattr(batch, "__len__") and len(batch) == 0):
        raise ValueError("inner_adapt needs a non-empty batch")
    cur = start.copy(requires_grad=False)
    for _ in range(cfg.inner_steps):
        _, grads = loss_and_grads(loss_fn, cur, batch)
        if cfg.clip_train is not None:
            ad.clip_grad_norm(grads, cfg.clip_train)
        ad.sgd_step(cur, grads, cfg.alpha)
    return cur


def first_order_meta_grad(
    loss_fn: LossFn,
    start: Mapping[str, Tensor],
    support,
    query,
    cfg: MetaConfig,
    graph: ad.Graph,
) -> float:
    """Accumulate the first-order meta-gradient of one task into the leaves behind ``start``.

    ``start`` holds the task's pre-adaptation parameters as tensors on
    ``graph`` (plain leaves for MAML, gated values for SML).  The inner
    update is computed on detached copies and re-attached as a constant
    offset, so ``d loss(D') / d start`` equals the query-loss gradient at
    the adapted point.  Returns the query loss.
    """
    values = ParamStore((n, Tensor(t.data.copy())) for n, t in start.items())
    adapted = inner_adapt(loss_fn, values, support, cfg)
    with graph:
        shifted = ParamStore(
            (n, ad.add(t, Tensor(adapted[n].data - t.data))) for n, t in start.items()
        )
        loss = loss_fn(shifted, query)
    ad.backward(graph, loss)
    return loss.item()


# ---------------------------------------------------------------------------
# seq2seq learner


@dataclass
class Learner:
    """A trained conditional seq2seq model plus optional structure state."""

    regime: str
    params: ModelParams
    vocab: Vocab
    tasks: list[TaskSpec]
    gates: ParamStore | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def task_index(self) -> dict[TaskSpec, int]:
        return {t: i for i, t in enumerate(self.tasks)}

    def trainables(self) -> ParamStore:
        entries = list(self.params.store.items())
        if self.gates is not None:
            entries += list(self.gates.items())
        return ParamStore(entries)

    def copy(self) -> "Learner":
        return Learner(
            self.regime,
            self.params.copy(),
            self.vocab,
            list(self.tasks),
            None if self.gates is None else self.gates.copy(),
            [],
        )

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.trainables().save(out / "checkpoint.bin")
        self.vocab.save(out / "vocab.txt")
        meta = {
            "regime": self.regime,
            "hyperparams": asdict(self.params.hp),
            "tasks": [[t.query_fn, t.response_fn, t.family] for t in self.tasks],
            "structure": self.gates is not None,
        }
        (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Learner":
        root = Path(path)
        meta = json.loads((root / "model.json").read_text())
        store = ParamStore.load(root / "checkpoint.bin")
        hp = HyperParams(**meta["hyperparams"])
        model_store = ParamStore((n, t) for n, t in store.items() if not n.startswith("struct."))
        gates = ParamStore((n, t) for n, t in store.items() if n.startswith("struct."))
        tasks = [TaskSpec(q, r, f) for q, r, f in meta["tasks"]]
        return cls(
            meta["regime"],
            ModelParams(hp, model_store),
            Vocab.load(root / "vocab.txt"),
            tasks,
            gates if meta["structure"] else None,
        )


def _streams(seed: int) -> dict[str, np.random.Generator]:
    # independent streams keep data order identical across regimes
    names = ("init", "data", "gates", "dropout", "select")
    return {n: np.random.default_rng([seed, i]) for i, n in enumerate(names)}


def _loss_fn(hp: HyperParams, rng: np.random.Generator | None, training: bool) -> LossFn:
    def fn(store: ParamStore, batch: Batch) -> Tensor:
        return teacher_forced_loss(ModelParams(hp, store), batch, training=training, rng=rng)

    return fn


def _selection_split(
    corpus: Corpus, select_n: int
) -> tuple[dict[TaskSpec, list[Example]], dict[TaskSpec, list[Example]]]:
    """Split each meta-train task into (training pool, held-out selection examples)."""
    train, held = {}, {}
    for t, exs in corpus.train_tasks.items():
        n = min(select_n, len(exs) // 5)
        train[t] = exs[: len(exs) - n] if n else list(exs)
        held[t] = exs[len(exs) - n :] if n else []
    return train, held


def _perplexity(params: ModelParams, examples: Sequence[Example], vocab, task_index, batch: int = 64) -> float:
    pairs = []
    for lo in range(0, len(examples), batch):
        pairs.append(token_nll(params, collate(examples[lo : lo + batch], vocab, task_index)))
    return metrics.perplexity(pairs)


def model_perplexity(learner: Learner, examples: Sequence[Example], task: TaskSpec, batch: int = 64) -> float:
    """Teacher-forced perplexity of ``learner`` on ``examples`` of a known task."""
    k = learner.task_index[task]
    params = learner.params
    if learner.gates is not None:
        with ad.no_grad():
            params = gated_model(params, learner.gates, params["embed.sf"], k)
    return _perplexity(params, examples, learner.vocab, {task: k}, batch)


def _iters_per_epoch(cfg: MetaConfig, n_examples: int) -> int:
    if cfg.iters_per_epoch is not None:
        return cfg.iters_per_epoch
    return max(1, math.ceil(n_examples / (2 * cfg.tasks_per_meta_batch * cfg.minibatch)))


def _meta_selection_ppl(learner: Learner, held: Mapping[TaskSpec, list[Example]], cfg, rng, pools) -> float:
    """Held-out perplexity after one standardized inner adaptation per task."""
    hp = learner.params.hp
    index = learner.task_index
    pairs = []
    for t, exs in held.items():
        if not exs:
            continue
        k = index[t]
        with ad.no_grad():
            start = _task_start(learner, k)
        support, _ = sample_batch(pools[t], learner.vocab, cfg.minibatch, rng, index)
        values = ParamStore((n, Tensor(v.data.copy())) for n, v in start.store.items())
        adapted = inner_adapt(_loss_fn(hp, None, False), values, support, cfg)
        p = ModelParams(hp, adapted)
        for lo in range(0, len(exs), 64):
            pairs.append(token_nll(p, collate(exs[lo : lo + 64], learner.vocab, index)))
    return metrics.perplexity(pairs)


def _val_task_selection_ppl(learner: Learner, val_tasks: Mapping[TaskSpec, TaskSplits], cfg, rng) -> float:
    """Adapt-val perplexity of unseen meta-val tasks after a standardized short adaptation.

    Each task gets a fresh embedding row and ``inner_steps`` SGD steps at
    ``alpha`` on one adapt-train minibatch, the same adaptation the meta
    objective trains for.
    """
    mode = "plain" if learner.gates is None else "sml"
    pairs = []
    for t in sorted(val_tasks):
        splits = val_tasks[t]
        if not splits.train or not splits.val:
            continue
        state = _Adapter(learner, mode, rng)
        index = {t: state.k}
        support, _ = sample_batch(splits.train, learner.vocab, cfg.minibatch, rng, index)
        for _ in range(cfg.inner_steps):
            state.leaves.zero_grad()
            with ad.Graph() as g:
                loss = teacher_forced_loss(state.params(), support)
            ad.backward(g, loss)
            grads = state.leaves.grads()
            if cfg.clip_train is not None:
                ad.clip_grad_norm(grads, cfg.clip_train)
            ad.sgd_step(state.leaves, grads, cfg.alpha)
        state.leaves.zero_grad()
        params = state.eval_params()
        for lo in range(0, len(splits.val), 64):
            pairs.append(token_nll(params, collate(splits.val[lo : lo + 64], learner.vocab, index)))
    return metrics.perplexity(pairs)


def _task_start(learner: Learner, k: int) -> ModelParams:
    if learner.gates is None:
        return learner.params
    return gated_model(learner.params, learner.gates, learner.params["embed.sf"], k)


def meta_train(
    corpus: Corpus,
    vocab: Vocab,
    hp: HyperParams,
    cfg: MetaConfig,
    mode: str,
    seed: int,
    init: Learner | None = None,
    iterations: int | None = None,
    callback: Callable[[int, Learner], None] | None = None,
) -> Learner:
    """First-order MAML (``mode="maml"``) or SML (``mode="sml"``) meta-training.

    ``init`` supplies starting parameters (used by ablations); ``iterations``
    caps the total number of meta-updates; ``callback(it, learner)`` runs
    after every meta-update.  The returned learner carries
    the best parameters by selection perplexity (meta-val tasks after a
    short adaptation when the corpus has them, held-out meta-train
    examples otherwise) and a per-iteration
    ``history`` of query loss and learning rate.
    """
    if mode not in ("maml", "sml"):
        raise ValueError(f"unknown meta-training mode {mode!r}")
    if not corpus.train_tasks:
        raise ValueError("meta-training needs at least one training task")
    rngs = _streams(seed)
    tasks = sorted(corpus.train_tasks)
    pools, held = _selection_split(corpus, 0 if corpus.val_tasks else cfg.select_n)
    if init is None:
        params = init_params(hp, len(tasks), rngs["init"])
        gates = init_gates(hp.sf_dim, decoder_size(params), rngs["gates"]) if mode == "sml" else None
        learner = Learner(mode.upper(), params, vocab, tasks, gates)
    else:
        learner = init.copy()
        learner.regime = mode.upper()
        if mode == "sml" and learner.gates is None:
            raise ValueError("sml mode requires structure state")
        if mode == "maml":
            learner.gates = None
    index = learner.task_index
    hp = learner.params.hp
    loss_fn = _loss_fn(hp, rngs["dropout"], training=True)
    leaves = learner.trainables()
    per_epoch = _iters_per_epoch(cfg, sum(len(v) for v in pools.values()))
    total = per_epoch * cfg.epochs if iterations is None else iterations
    outer_lr = cfg.beta if mode == "maml" or cfg.sml_beta is None else cfg.sml_beta
    best = (math.inf, leaves.snapshot())
    history = learner.history
    for it in range(total):
        epoch = it // per_epoch + 1
        lr = cfg.lr_at(outer_lr, epoch)
        picks = rngs["data"].choice(len(tasks), size=cfg.tasks_per_meta_batch, replace=len(tasks) < cfg.tasks_per_meta_batch)
        leaves.zero_grad()
        losses = []
        for k in picks:
            t = tasks[int(k)]
            support, used = sample_batch(pools[t], vocab, cfg.minibatch, rngs["data"], index)
            query, _ = sample_batch(pools[t], vocab, cfg.minibatch, rngs["data"], index, exclude=used)
            g = ad.Graph()
            with g:
                start = _task_start(learner, int(k))
            losses.append(first_order_meta_grad(loss_fn, start.store, support, query, cfg, g))
        grads = leaves.grads()
        norm = ad.global_norm(grads)
        if cfg.clip_train is not None:
            ad.clip_grad_norm(grads, cfg.clip_train)
        if not np.isfinite(norm):
            raise FloatingPointError(f"non-finite meta-gradient at iteration {it}")
        ad.sgd_step(leaves, grads, lr)
        leaves.zero_grad()
        if callback is not None:
            callback(it, learner)
        history.append(
            {"step": it + 1, "epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
             "tasks": [tasks[int(k)].label for k in picks]}
        )
        if (it + 1) % per_epoch == 0 or it + 1 == total:
            if corpus.val_tasks:
                score = _val_task_selection_ppl(learner, corpus.val_tasks, cfg, rngs["select"])
            elif any(held.values()):
                score = _meta_selection_ppl(learner, held, cfg, rngs["select"], pools)
            else:
                score = -it
            history[-1]["select_ppl"] = score
            if score < best[0]:
                best = (score, leaves.snapshot())
    if total and not np.isfinite(best[0]):
        raise FloatingPointError("meta-training diverged: no checkpoint has a finite selection perplexity")
    leaves.restore(best[1])
    return learner


def mtl_train(
    corpus: Corpus,
    vocab: Vocab,
    hp: HyperParams,
    cfg: MetaConfig,
    seed: int,
    steps: int | None = None,
) -> Learner:
    """Minibatch SGD on the pooled meta-train (and meta-val) tasks."""
    rngs = _streams(seed)
    pools, held = _selection_split(corpus, cfg.select_n)
    for t, s in corpus.val_tasks.items():
        pools[t] = list(s.train)
        held[t] = list(s.val)
    tasks = sorted(pools)
    if not tasks or not any(pools.values()):
        raise ValueError("MTL training needs a non-empty corpus")
    params = init_params(hp, len(tasks), rngs["init"])
    learner = Learner("MTL", params, vocab, tasks)
    index = learner.task_index
    examples = [ex for t in tasks for ex in pools[t]]
    held_all = [ex for t in tasks for ex in held[t]]
    loss_fn = _loss_fn(hp, rngs["dropout"], training=True)
    leaves = params.store
    per_epoch = math.ceil(len(examples) / cfg.minibatch)
    total = per_epoch * cfg.epochs if steps is None else steps
    best = (math.inf, leaves.snapshot())
    step = 0
    while step < total:
        for batch in make_batches(examples, vocab, cfg.minibatch, rngs["data"], index):
            epoch = step // per_epoch + 1
            lr = cfg.lr_at(cfg.mtl_lr, epoch)
            leaves.zero_grad()
            with ad.Graph() as g:
                loss = loss_fn(leaves, batch)
            ad.backward(g, loss)
            grads = leaves.grads()
            if cfg.clip_train is not None:
                ad.clip_grad_norm(grads, cfg.clip_train)
            if not np.isfinite(loss.item()) or not np.isfinite(ad.global_norm(grads)):
                raise FloatingPointError(f"non-finite loss or gradient at step {step}")
            ad.sgd_step(leaves, grads, lr)
            step += 1
            learner.history.append({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
            if step % per_epoch == 0 or step == total:
                score = _perplexity(params, held_all, vocab, index) if held_all else -step
                learner.history[-1]["select_ppl"] = score
                if score < best[0]:
                    best = (score, leaves.snapshot())
            if step >= total:
                break
    if total and not np.isfinite(best[0]):
        raise FloatingPointError("MTL training diverged: no checkpoint has a finite selection perplexity")
    leaves.zero_grad()
    leaves.restore(best[1])
    return learner


# ---------------------------------------------------------------------------
# adaptation


class _Adapter:
    """Parameters being fine-tuned on one new task."""

    def __init__(self, learner: Learner, mode: str, rng: np.random.Generator):
        self.hp = learner.params.hp
        self.mode = mode
        self.vocab = learner.vocab
        self.base = learner.params.copy()
        self.table, self.k = extend_for_adaptation(self.base["embed.sf"], rng)
        self.gates = learner.gates.copy() if mode == "sml" else None
        entries = [(n, t) for n, t in self.base.store.items() if n != "embed.sf"]
        entries.append(("embed.sf_new", self.table.trainable))
        if self.gates is not None:
            entries += list(self.gates.items())
        self.leaves = ParamStore(entries)

    def params(self) -> ModelParams:
        view = self.base.view({"embed.sf": self.table.matrix()})
        if self.gates is None:
            return view
        return gated_model(view, self.gates, self.table, self.k)

    def eval_params(self) -> ModelParams:
        with ad.no_grad():
            return self.params()

    def learner(self, regime: str, task: TaskSpec, tasks: list[TaskSpec]) -> Learner:
        store = self.base.store.copy()
        store["embed.sf"] = Tensor(self.table.values(), requires_grad=True)
        gates = None if self.gates is None else self.gates.copy()
        return Learner(regime, ModelParams(self.hp, store), self.vocab, tasks + [task], gates)


def finetune(
    learner: Learner,
    task: TaskSpec,
    splits: TaskSplits,
    cfg: MetaConfig,
    mode: str = "plain",
    seed: int = 0,
    max_steps: int | None = None,
    decode: bool = True,
) -> tuple[AdaptReport, Learner]:
    """Adapt to a new task with SGD and early stopping on validation perplexity.

    ``mode="sml"`` extends the embedding table and trains through the
    parameter gate at every step; ``"plain"`` adapts the raw parameters.
    ``ft_step`` is the step with the best validation perplexity, where an
    evaluation only counts as better if it beats the incumbent by the
    relative margin ``cfg.min_improvement``; test metrics use that
    checkpoint.
    """
    if mode not in ("plain", "sml"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode == "sml" and learner.gates is None:
        raise ValueError("sml fine-tuning needs a learner with structure state")
    for name in ("train", "val", "test"):
        if not getattr(splits, name):
            raise ValueError(f"empty adaptation split: {name}")
    rngs = _streams(seed)
    ad_state = _Adapter(learner, mode, rngs["init"])
    index = {task: ad_state.k}
    limit = cfg.max_finetune_steps if max_steps is None else max_steps

    def val_ppl() -> float:
        return _perplexity(ad_state.eval_params(), splits.val, learner.vocab, index)

    curve = [(0, val_ppl())]
    best = (curve[0][1], 0, ad_state.leaves.snapshot())
    bad, step = 0, 0
    leaves = ad_state.leaves
    while bad < cfg.patience and step < limit:
        for batch in make_batches(splits.train, learner.vocab, cfg.minibatch, rngs["data"], index):
            leaves.zero_grad()
            with ad.Graph() as g:
                loss = teacher_forced_loss(ad_state.params(), batch, training=True, rng=rngs["dropout"])
            ad.backward(g, loss)
            grads = leaves.grads()
            if cfg.clip_finetune is not None:
                ad.clip_grad_norm(grads, cfg.clip_finetune)
            ad.sgd_step(leaves, grads, cfg.finetune_lr)
            step += 1
            if step % cfg.eval_every == 0:
                ppl = val_ppl()
                if not np.isfinite(ppl):
                    raise FloatingPointError(f"non-finite validation perplexity at step {step}")
                curve.append((step, ppl))
                if ppl < best[0] * (1.0 - cfg.min_improvement):
                    best, bad = (ppl, step, leaves.snapshot()), 0
                else:
                    bad += 1
            if bad >= cfg.patience or step >= limit:
                break
    leaves.zero_grad()
    leaves.restore(best[2])
    final = ad_state.eval_params()
    test_metrics = {"ppl": _perplexity(final, splits.test, learner.vocab, index)}
    generations: list[list[str]] = []
    if decode:
        sf = final["embed.sf"].data[ad_state.k]
        hyps = []
        for ex in splits.test:
            ids = beam_search(final, learner.vocab.encode(ex.query), Tensor(sf), learner.params.hp.beam, cfg.max_decode_len)
            hyps.append(ids)
            generations.append(learner.vocab.decode(ids))
        refs = [learner.vocab.encode(ex.response) for ex in splits.test]
        test_metrics.update(
            bleu1=metrics.bleu(hyps, refs, 1),
            bleu2=metrics.bleu(hyps, refs, 2),
            dist1=_safe_distinct(hyps, 1),
            dist2=_safe_distinct(hyps, 2),
        )
    report = AdaptReport(best[1], best[0], test_metrics, curve, generations)
    adapted = ad_state.learner(learner.regime, task, learner.tasks)
    return report, adapted


def _safe_distinct(hyps, n) -> float:
    try:
        return metrics.distinct_n(hyps, n)
    except ValueError:
        return 0.0


# ---------------------------------------------------------------------------
# experiments

RESULT_FIELDS = ("regime", "task_id", "seed", "ft_step", "ppl", "bleu1", "bleu2", "dist1", "dist2")


@dataclass
class ExperimentResult:
    rows: list[dict]
    attention: dict[int, tuple[list[str], list[str], np.ndarray]] = field(default_factory=dict)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def aggregate(self) -> list[dict]:
        return aggregate_rows(self.rows)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def rows_to_csv(rows: Iterable[Mapping], fieldnames: Sequence[str] = RESULT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fieldnames)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fieldnames])
    return buf.getvalue()


def read_result_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match {RESULT_FIELDS}")
        out = []
        for r in reader:
            row = {"regime": r["regime"], "task_id": r["task_id"], "seed": int(r["seed"])}
            for k in RESULT_FIELDS[3:]:
                row[k] = float(r[k])
            out.append(row)
        return out


def aggregate_rows(rows: Sequence[Mapping]) -> list[dict]:
    """Mean and population std over seeds for each (regime, task) pair, in first-seen order."""
    groups: dict[tuple[str, str], list[Mapping]] = {}
    for r in rows:
        groups.setdefault((r["regime"], r["task_id"]), []).append(r)
    out = []
    for (regime, task), rs in groups.items():
        agg: dict[str, Any] = {"regime": regime, "task_id": task, "n_seeds": len(rs)}
        for k in RESULT_FIELDS[3:]:
            vals = np.array([float(r[k]) for r in rs])
            agg[f"{k}_mean"] = float(vals.mean())
            agg[f"{k}_std"] = float(vals.std())
        out.append(agg)
    return out


def result_row(regime, task, seed, report: AdaptReport, fine_tuned: bool) -> dict:
    m = report.test_metrics
    return {
        "regime": regime,
        "task_id": task.label,
        "seed": seed,
        "ft_step": float(report.ft_step) if fine_tuned else float("nan"),
        "ppl": m["ppl"],
        "bleu1": m["bleu1"],
        "bleu2": m["bleu2"],
        "dist1": m["dist1"],
        "dist2": m["dist2"],
    }


def run_experiment(
    corpus: Corpus | FamilySpec,
    regimes: Sequence[str],
    hp: HyperParams | None,
    cfg: MetaConfig,
    seeds: Sequence[int],
    vocab: Vocab | None = None,
    progress: Callable[[str], None] | None = None,
) -> ExperimentResult:
    """Train every requested regime per seed and adapt to each meta-test task.

    A :class:`FamilySpec` generates a fresh synthetic corpus per seed.
    """
    unknown = [r for r in regimes if r not in REGIMES]
    if unknown:
        raise ValueError(f"unknown regime(s) {unknown}; choose from {REGIMES}")
    if not regimes or not seeds:
        raise ValueError("need at least one regime and one seed")
    rows: list[dict] = []
    attention = {}
    for seed in seeds:
        if isinstance(corpus, FamilySpec):
            data, voc = generate_synthetic_families(corpus, seed), synthetic_vocab(corpus)
        else:
            data = corpus
            voc = vocab if vocab is not None else corpus_vocab(corpus)
        h = hp if hp is not None else HyperParams.desk(len(voc))
        trained: dict[str, Learner] = {}
        if {"MTL", "MTL+FT"} & set(regimes):
            trained["MTL"] = mtl_train(data, voc, h, cfg, seed)
        if "MAML" in regimes:
            trained["MAML"] = meta_train(data, voc, h, cfg, "maml", seed)
        if "SML" in regimes:
            trained["SML"] = meta_train(data, voc, h, cfg, "sml", seed)
            lr = trained["SML"]
            attention[seed] = (
                [t.label for t in lr.tasks],
                [t.family or t.label for t in lr.tasks],
                metrics.attention_matrix(lr.params["embed.sf"]),
            )
        for regime in regimes:
            src = trained["MTL" if regime.startswith("MTL") else regime]
            mode = "sml" if regime == "SML" else "plain"
            for task, splits in data.test_tasks.items():
                limit = 0 if regime == "MTL" else None
                report, _ = finetune(src, task, splits, cfg, mode, seed, max_steps=limit)
                rows.append(result_row(regime, task, seed, report, regime != "MTL"))
                if progress:
                    progress(f"seed={seed} regime={regime} task={task.label} ft_step={report.ft_step} ppl={report.test_metrics['ppl']:.3f}")
    return ExperimentResult(rows, attention)


def corpus_vocab(corpus: Corpus) -> Vocab:
    """Vocabulary over every example in ``corpus``."""
    src = [ex for exs in corpus.train_tasks.values() for ex in exs]
    for s in corpus.val_tasks.values():
        src += s.train + s.val + s.test
    return build_vocab(src, 30000)
