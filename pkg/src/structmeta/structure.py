"""Task representation by gated self-attention over condition embeddings, and parameter gating.

For task ``k`` with embedding table ``S`` (one row per task)::

    a_k   = softmax(S s_k)
    m_k   = a_k S
    f_k   = tanh(W_f [s_k; m_k])
    g_k   = sigmoid(W_g [s_k; m_k])
    s~_k  = g_k * f_k + (1 - g_k) * s_k
    o_k   = sigmoid(W_p s~_k)          # one gate per decoder parameter value
    theta_0k = theta_0 * o_k            # decoder entries only
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .model import INIT_RANGE, ModelParams


@dataclass
class TaskEmbeddingTable:
    """Condition embeddings; ``frozen`` rows receive no gradient."""

    trainable: Tensor
    frozen: np.ndarray | None = None

    @property
    def n_tasks(self) -> int:
        k = self.trainable.shape[0]
        return k if self.frozen is None else k + self.frozen.shape[0]

    def matrix(self) -> Tensor:
        if self.frozen is None:
            return self.trainable
        return ad.concat([Tensor(self.frozen), self.trainable], axis=0)

    def values(self) -> np.ndarray:
        return self.matrix().data.copy()


def init_gates(sf_dim: int, decoder_size: int, rng: np.random.Generator) -> ParamStore:
    """GateParams: ``W_f``, ``W_g`` of shape [d, 2d] and ``W_p`` of shape [D_dec, d]."""
    return ParamStore(
        [
            ("struct.W_f", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (sf_dim, 2 * sf_dim)), True)),
            ("struct.W_g", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (sf_dim, 2 * sf_dim)), True)),
            ("struct.W_p", Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (decoder_size, sf_dim)), True)),
        ]
    )


def decoder_size(params: ModelParams) -> int:
    return int(sum(params[n].data.size for n in params.decoder_names()))


def _check_index(S: Tensor, k: int) -> None:
    if not 0 <= k < S.shape[0]:
        raise IndexError(f"task index {k} outside table of {S.shape[0]} rows")


def self_attention(S: Tensor, k: int) -> Tensor:
    """Attention distribution ``a_k`` of row ``k`` over all rows of ``S``."""
    _check_index(S, k)
    s_k = ad.embedding(S, np.int64(k))
    return ad.softmax(ad.matmul(S, s_k))


def task_representation(S, gates: Mapping[str, Tensor], k: int) -> Tensor:
    """Refined task vector ``s~_k`` (shape [sf_dim])."""
    S = S.matrix() if isinstance(S, TaskEmbeddingTable) else ad.as_tensor(S)
    _check_index(S, k)
    s_k = ad.embedding(S, np.int64(k))
    a_k = ad.softmax(ad.matmul(S, s_k))
    m_k = ad.matmul(a_k, S)
    sm = ad.concat([s_k, m_k])
    f_k = ad.tanh(ad.matmul(gates["struct.W_f"], sm))
    g_k = ad.sigmoid(ad.matmul(gates["struct.W_g"], sm))
    return ad.add(ad.mul(g_k, f_k), ad.sub(s_k, ad.mul(g_k, s_k)))


def output_gate(W_p: Tensor, s_tilde: Tensor) -> Tensor:
    return ad.sigmoid(ad.matmul(W_p, s_tilde))


def parameter_gate(
    theta0: Mapping[str, Tensor],
    gates: Mapping[str, Tensor],
    s_tilde: Tensor,
    names: Sequence[str] | None = None,
) -> dict[str, Tensor]:
    """Multiply the decoder entries of ``theta0`` by ``o_k = sigmoid(W_p s~)``.

    ``names`` selects the gated entries in flattening order (default: all of
    ``theta0``).  Returns only the gated entries; callers merge them back so
    every other tensor passes through untouched.
    """
    names = list(theta0) if names is None else list(names)
    W_p = gates["struct.W_p"]
    if s_tilde.shape != (W_p.shape[1],):
        raise ValueError(f"s_tilde has shape {s_tilde.shape}, W_p expects ({W_p.shape[1]},)")
    total = sum(theta0[n].data.size for n in names)
    if W_p.shape[0] != total:
        raise ValueError(f"W_p produces {W_p.shape[0]} gates but the decoder set has {total} values")
    o = output_gate(W_p, s_tilde)
    out, pos = {}, 0
    for n in names:
        t = theta0[n]
        size = t.data.size
        piece = ad.reshape(ad.slice_(o, pos, pos + size), t.shape)
        out[n] = ad.mul(t, piece)
        pos += size
    return out


def gated_model(params: ModelParams, gates: Mapping[str, Tensor], S, k: int) -> ModelParams:
    """``params`` with the decoder set replaced by its task-``k`` modulated version."""
    s_tilde = task_representation(S, gates, k)
    names = params.decoder_names()
    return params.view(parameter_gate(params.store, gates, s_tilde, names))


def extend_for_adaptation(S, rng: np.random.Generator) -> tuple[TaskEmbeddingTable, int]:
    """Freeze the learned rows and append one fresh trainable row for a new task."""
    values = S.values() if isinstance(S, TaskEmbeddingTable) else ad.as_tensor(S).data.copy()
    new_row = Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, (1, values.shape[1])), requires_grad=True)
    return TaskEmbeddingTable(trainable=new_row, frozen=values), values.shape[0]


def attention_matrix(S) -> np.ndarray:
    """K x K matrix whose row k is ``a_k``."""
    S = S.matrix() if isinstance(S, TaskEmbeddingTable) else ad.as_tensor(S)
    with ad.no_grad():
        return np.stack([self_attention(S, k).data for k in range(S.shape[0])])
