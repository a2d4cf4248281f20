"""Conditional seq2seq: BiLSTM encoder, condition-augmented LSTM decoder with bilinear attention.

Weights are stored input-major (``x @ W``) except the attention matrix
``attn.W_a`` of shape ``[hidden, 2*hidden]`` which scores ``u^T W_a h``.
Every function takes a :class:`ModelParams`; swapping tensors in with
:meth:`ModelParams.view` is how adapted or gated parameters are evaluated.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import BOS, EOS, PAD, Batch

INIT_RANGE = 0.1
MASK_FILL = -1e9


@dataclass
class HyperParams:
    vocab_size: int
    word_dim: int = 200
    sf_dim: int = 20
    hidden: int = 400
    layers: int = 2
    dropout_p: float = 0.3
    beam: int = 5

    def __post_init__(self):
        for name in ("vocab_size", "word_dim", "sf_dim", "hidden", "layers", "beam"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "HyperParams":
        base = dict(word_dim=16, sf_dim=8, hidden=32, layers=1, dropout_p=0.0, beam=5)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


def param_shapes(hp: HyperParams, n_tasks: int) -> list[tuple[str, tuple[int, ...]]]:
    H, E, D = hp.hidden, hp.word_dim, hp.sf_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.words", (hp.vocab_size, E)),
        ("embed.sf", (n_tasks, D)),
    ]
    for layer in range(hp.layers):
        width = E if layer == 0 else 2 * H
        for direction in ("fwd", "bwd"):
            shapes += [(f"enc.{layer}.{direction}.W", (width + H, 4 * H)), (f"enc.{layer}.{direction}.b", (4 * H,))]
    for layer in range(hp.layers):
        shapes += [(f"bridge.{layer}.W", (2 * H, H)), (f"bridge.{layer}.b", (H,))]
    for layer in range(hp.layers):
        width = E + D if layer == 0 else H
        shapes += [(f"dec.{layer}.W", (width + H, 4 * H)), (f"dec.{layer}.b", (4 * H,))]
    shapes += [
        ("attn.W_a", (H, 2 * H)),
        ("comb.W_h", (3 * H, H)),
        ("out.W_V", (H, hp.vocab_size)),
        ("out.b_V", (hp.vocab_size,)),
    ]
    return shapes


def is_decoder_param(name: str) -> bool:
    """Entries tailored by the parameter gate: decoder LSTM, attention, combine and output."""
    return name.split(".", 1)[0] in ("dec", "attn", "comb", "out")


@dataclass
class ModelParams:
    hp: HyperParams
    store: ParamStore

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    @property
    def n_tasks(self) -> int:
        return self.store["embed.sf"].shape[0]

    def decoder_names(self) -> list[str]:
        return [n for n in self.store if is_decoder_param(n)]

    def view(self, overrides: Mapping[str, Tensor]) -> "ModelParams":
        return ModelParams(self.hp, self.store.merged(overrides))

    def copy(self) -> "ModelParams":
        return ModelParams(self.hp, self.store.copy())

    def save(self, path) -> None:
        self.store.save(path)


def load_pretrained(path, words: Sequence[str], dim: int) -> dict[int, np.ndarray]:
    """Read ``token v1 v2 ...`` lines; return vectors for tokens present in ``words``."""
    index = {w: i for i, w in enumerate(words)}
    found: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) - 1 != dim:
            raise ValueError(f"{path}:{lineno}: embedding has {len(parts) - 1} values, word_dim is {dim}")
        if parts[0] in index:
            found[index[parts[0]]] = np.asarray(parts[1:], dtype=float)
    return found


def init_params(
    hp: HyperParams,
    n_tasks: int,
    rng: np.random.Generator,
    pretrained_words: str | Path | None = None,
    vocab_tokens: Sequence[str] | None = None,
) -> ModelParams:
    """Uniform(-0.1, 0.1) initialization; word vectors optionally read from a file."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    store = ParamStore()
    for name, shape in param_shapes(hp, n_tasks):
        store[name] = Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape), requires_grad=True)
    if pretrained_words is not None:
        if vocab_tokens is None:
            raise ValueError("vocab_tokens are needed to align pretrained embeddings")
        table = store["embed.words"].data
        for i, vec in load_pretrained(pretrained_words, vocab_tokens, hp.word_dim).items():
            table[i] = vec
    return ModelParams(hp, store)


# ---------------------------------------------------------------------------
# building blocks


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Unfused LSTM step built from elementary ops (reference for the fused primitive).

    Gate layout in ``W``'s columns: input, forget, output, candidate.
    """
    H = h.shape[-1]
    z = ad.add(ad.matmul(ad.concat([x, h]), W), b)
    ifo = ad.sigmoid(ad.slice_(z, 0, 3 * H))
    g = ad.tanh(ad.slice_(z, 3 * H, 4 * H))
    i, f, o = (ad.slice_(ifo, k * H, (k + 1) * H) for k in range(3))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def hidden_of(hc: Tensor) -> Tensor:
    return ad.slice_(hc, 0, hc.shape[-1] // 2)


@dataclass
class EncodedQuery:
    states: Tensor  # [B, S, 2H]
    mask: np.ndarray  # [B, S]
    final: list[Tensor]  # decoder initial packed state [h | c] per layer
    score_bias: Tensor = field(init=False)

    def __post_init__(self):
        self.score_bias = Tensor(np.where(self.mask > 0, 0.0, MASK_FILL))


def _as_batch(query) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.int64)
    if q.ndim == 1:
        q = q[None, :]
    return q, (q != PAD).astype(float)


def encode(
    params: ModelParams,
    query,
    mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> EncodedQuery:
    """Run the bidirectional encoder over a ``[B, S]`` (or ``[S]``) id array."""
    hp = params.hp
    if mask is None:
        src, mask = _as_batch(query)
    else:
        src = np.asarray(query, dtype=np.int64)
        if src.ndim == 1:
            src, mask = src[None, :], np.asarray(mask)[None, :]
    if src.shape[1] == 0 or np.any(mask.sum(axis=1) == 0):
        raise ValueError("empty query")
    if src.min() < 0 or src.max() >= hp.vocab_size:
        raise ValueError("query id out of vocabulary range")
    B, S = src.shape
    H = hp.hidden
    zeros = Tensor(np.zeros((B, 2 * H)))
    embedded = ad.embedding(params["embed.words"], src)
    layer_in = [ad.take(embedded, t, axis=1) for t in range(S)]
    for layer in range(hp.layers):
        if layer > 0:
            layer_in = [ad.dropout(x, hp.dropout_p, training, rng) for x in layer_in]
        fwd: list[Tensor] = []
        hc = zeros
        W, b = params[f"enc.{layer}.fwd.W"], params[f"enc.{layer}.fwd.b"]
        for t in range(S):
            m = mask[:, t]
            hc = ad.lstm(layer_in[t], hc, W, b, None if m.all() else m)
            fwd.append(hidden_of(hc))
        fwd_final = fwd[-1]
        bwd: list[Tensor] = [None] * S  # type: ignore[list-item]
        hc = zeros
        W, b = params[f"enc.{layer}.bwd.W"], params[f"enc.{layer}.bwd.b"]
        for t in reversed(range(S)):
            m = mask[:, t]
            hc = ad.lstm(layer_in[t], hc, W, b, None if m.all() else m)
            bwd[t] = hidden_of(hc)
        bwd_first = bwd[0]
        layer_in = [ad.concat([f, r]) for f, r in zip(fwd, bwd)]
    states = ad.stack(layer_in, axis=1)
    summary = ad.concat([fwd_final, bwd_first])
    c0 = Tensor(np.zeros((B, H)))
    final = []
    for layer in range(hp.layers):
        h0 = ad.tanh(ad.add(ad.matmul(summary, params[f"bridge.{layer}.W"]), params[f"bridge.{layer}.b"]))
        final.append(ad.concat([h0, c0]))
    return EncodedQuery(states, mask, final)


def _attend(params: ModelParams, u: Tensor, enc: EncodedQuery) -> tuple[Tensor, Tensor]:
    B = u.shape[0]
    S, W2 = enc.states.shape[1], enc.states.shape[2]
    uw = ad.matmul(u, params["attn.W_a"])  # [B, 2H]
    scores = ad.reshape(ad.matmul(enc.states, ad.reshape(uw, (B, W2, 1))), (B, S))
    weights = ad.softmax(ad.add(scores, enc.score_bias))
    ctx = ad.reshape(ad.matmul(ad.reshape(weights, (B, 1, S)), enc.states), (B, W2))
    return weights, ctx


def _decoder_body(params, state, prev_tokens, sf, enc, training, rng):
    hp = params.hp
    x = ad.concat([ad.embedding(params["embed.words"], prev_tokens), sf])
    new_state = []
    for layer in range(hp.layers):
        if layer > 0:
            x = ad.dropout(x, hp.dropout_p, training, rng)
        hc = ad.lstm(x, state[layer], params[f"dec.{layer}.W"], params[f"dec.{layer}.b"])
        new_state.append(hc)
        x = hidden_of(hc)
    weights, ctx = _attend(params, x, enc)
    h_tilde = ad.tanh(ad.matmul(ad.concat([x, ctx]), params["comb.W_h"]))
    return h_tilde, new_state, weights


def project(params: ModelParams, h_tilde: Tensor) -> Tensor:
    return ad.log_softmax(ad.add(ad.matmul(h_tilde, params["out.W_V"]), params["out.b_V"]))


def decode_step(
    params: ModelParams,
    prev_state: list[Tensor],
    prev_token,
    sf_embedding: Tensor,
    enc: EncodedQuery,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """One decoder step for a batch.

    Returns ``(log_probs [B, V], next_state, attention [B, S])``.
    ``sf_embedding`` is ``[sf_dim]`` (shared) or ``[B, sf_dim]``.
    """
    hp = params.hp
    tokens = np.atleast_1d(np.asarray(prev_token, dtype=np.int64))
    if tokens.min() < 0 or tokens.max() >= hp.vocab_size:
        raise ValueError("previous token out of vocabulary range")
    for hc in prev_state:
        if hc.shape != (len(tokens), 2 * hp.hidden):
            raise ValueError(f"decoder state has shape {hc.shape}, expected {(len(tokens), 2 * hp.hidden)}")
    sf = ad.as_tensor(sf_embedding)
    if sf.data.ndim == 1:
        sf = ad.reshape(sf, (1, hp.sf_dim)) if len(tokens) == 1 else _tile_rows(sf, len(tokens))
    h_tilde, state, weights = _decoder_body(params, prev_state, tokens, sf, enc, training, rng)
    h_tilde = ad.dropout(h_tilde, hp.dropout_p, training, rng)
    return project(params, h_tilde), state, weights


def _tile_rows(v: Tensor, n: int) -> Tensor:
    return ad.embedding(ad.reshape(v, (1, v.shape[0])), np.zeros(n, dtype=np.int64))


def teacher_forced_loss(
    params: ModelParams,
    batch: Batch,
    sf_embeddings: Tensor | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean token cross-entropy of the gold responses given gold prefixes.

    ``sf_embeddings`` ([B, sf_dim]) defaults to the rows of ``embed.sf``
    selected by ``batch.task_ids``.  Attention and the output layer do not
    feed back into the recurrence, so they are applied to all steps at once
    after the decoder LSTM has run.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.tgt_mask.shape != batch.tgt_out.shape or batch.src_mask.shape != batch.src.shape:
        raise ValueError("batch masks do not match padded arrays")
    hp = params.hp
    B, T = batch.tgt_in.shape
    if sf_embeddings is None:
        cond = ad.embedding(params["embed.sf"], np.repeat(batch.task_ids[:, None], T, axis=1))
    else:
        cond = ad.add(ad.reshape(sf_embeddings, (B, 1, hp.sf_dim)), Tensor(np.zeros((B, T, hp.sf_dim))))
    enc = encode(params, batch.src, batch.src_mask, training, rng)
    x_all = ad.concat([ad.embedding(params["embed.words"], batch.tgt_in), cond])
    state = list(enc.final)
    tops = []
    for t in range(T):
        x = ad.take(x_all, t, axis=1)
        for layer in range(hp.layers):
            if layer > 0:
                x = ad.dropout(x, hp.dropout_p, training, rng)
            state[layer] = ad.lstm(x, state[layer], params[f"dec.{layer}.W"], params[f"dec.{layer}.b"])
            x = hidden_of(state[layer])
        tops.append(x)
    U = ad.stack(tops, axis=1)  # [B, T, H]
    scores = ad.matmul(ad.matmul(U, params["attn.W_a"]), ad.transpose(enc.states))  # [B, T, S]
    bias = Tensor(enc.score_bias.data[:, None, :])
    weights = ad.softmax(ad.add(scores, bias))
    ctx = ad.matmul(weights, enc.states)
    h_tilde = ad.tanh(ad.matmul(ad.concat([U, ctx]), params["comb.W_h"]))
    h_tilde = ad.dropout(h_tilde, hp.dropout_p, training, rng)
    return ad.cross_entropy(project(params, h_tilde), batch.tgt_out, batch.tgt_mask)


def stepwise_loss(params: ModelParams, batch: Batch, sf_embeddings: Tensor | None = None) -> Tensor:
    """Teacher-forced loss computed one :func:`decode_step` at a time (eval mode)."""
    if sf_embeddings is None:
        sf_embeddings = ad.embedding(params["embed.sf"], batch.task_ids)
    enc = encode(params, batch.src, batch.src_mask)
    state = enc.final
    steps = []
    for t in range(batch.tgt_in.shape[1]):
        logp, state, _ = decode_step(params, state, batch.tgt_in[:, t], sf_embeddings, enc)
        steps.append(logp)
    return ad.cross_entropy(ad.stack(steps, axis=1), batch.tgt_out, batch.tgt_mask)


def token_nll(params: ModelParams, batch: Batch, sf_embeddings: Tensor | None = None) -> tuple[float, float]:
    """(summed NLL, token count) in eval mode, without recording a graph."""
    with ad.no_grad():
        loss = teacher_forced_loss(params, batch, sf_embeddings)
    n = float(batch.tgt_mask.sum())
    return loss.item() * n, n


# ---------------------------------------------------------------------------
# decoding


def beam_decode(
    step: Callable,
    state,
    select: Callable,
    beam: int,
    max_len: int,
    bos: int = BOS,
    eos: int = EOS,
    banned: Sequence[int] = (),
) -> tuple[list[int], float]:
    """Length-normalized beam search over an abstract step function.

    ``step(state, tokens) -> (log_probs [n, V], new_state)`` advances ``n``
    hypotheses; ``select(state, idx)`` reorders/filters them.  Returns the
    best finished hypothesis (EOS included) by ``sum(log p) / length``, or the
    best unfinished one if nothing finished.  Ties go to the smaller token
    sequence.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    last = np.array([bos])
    for _ in range(max_len):
        logp, state = step(state, last)
        logp = np.array(logp, dtype=float)
        if banned:
            logp[:, list(banned)] = -np.inf
        cands = []
        for i, (seq, score) in enumerate(alive):
            for v in range(logp.shape[1]):
                if np.isfinite(logp[i, v]):
                    cands.append((seq + (v,), score + logp[i, v], i))
        cands.sort(key=lambda c: (-c[1], c[0]))
        keep, parents = [], []
        for seq, score, parent in cands[:beam]:
            if seq[-1] == eos:
                finished.append((seq, score))
            else:
                keep.append((seq, score))
                parents.append(parent)
        alive = keep
        if not alive:
            break
        state = select(state, np.array(parents))
        last = np.array([seq[-1] for seq, _ in alive])
    pool = finished or alive
    best = min(pool, key=lambda c: (-c[1] / len(c[0]), c[0]))
    return list(best[0]), best[1] / len(best[0])


def beam_search(
    params: ModelParams,
    query,
    sf_embedding: Tensor,
    beam: int,
    max_len: int,
    return_score: bool = False,
):
    """Decode one query; the result excludes BOS and a trailing EOS."""
    q = np.asarray(query, dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty query")
    with ad.no_grad():
        enc = encode(params, q)
        sf = ad.reshape(ad.as_tensor(sf_embedding), (1, params.hp.sf_dim))

        def step(state, tokens):
            n = len(tokens)
            sfn = sf if n == 1 else ad.embedding(sf, np.zeros(n, dtype=np.int64))
            h_tilde, new_state, _ = _decoder_body(params, state, tokens, sfn, enc, False, None)
            return project(params, h_tilde).data, new_state

        def select(state, idx):
            return [Tensor(hc.data[idx]) for hc in state]

        seq, score = beam_decode(step, enc.final, select, beam, max_len, banned=(PAD, BOS))
    if seq and seq[-1] == EOS:
        seq = seq[:-1]
    return (seq, score) if return_score else seq


def greedy_decode(params: ModelParams, query, sf_embedding: Tensor, max_len: int) -> list[int]:
    q = np.asarray(query, dtype=np.int64)
    with ad.no_grad():
        enc = encode(params, q)
        sf = ad.reshape(ad.as_tensor(sf_embedding), (1, params.hp.sf_dim))
        state, tok, out = enc.final, BOS, []
        for _ in range(max_len):
            h_tilde, state, _ = _decoder_body(params, state, np.array([tok]), sf, enc, False, None)
            logp = project(params, h_tilde).data[0].copy()
            logp[[PAD, BOS]] = -np.inf
            tok = int(np.argmax(logp))
            if tok == EOS:
                break
            out.append(tok)
    return out


def hp_dict(hp: HyperParams) -> dict:
    return asdict(hp)
