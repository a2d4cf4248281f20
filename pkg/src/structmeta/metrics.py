"""Automatic metrics and the self-attention heatmap export."""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .structure import attention_matrix

BLEU_EPS = 1e-9


@dataclass
class MetricReport:
    ppl: float
    bleu1: float
    bleu2: float
    dist1: float
    dist2: float
    n_examples: int


def perplexity(nll_and_counts) -> float:
    """``exp`` of the token-mean NLL from an iterable of (summed NLL, token count) pairs."""
    total, count = 0.0, 0.0
    for nll, n in nll_and_counts:
        total += nll
        count += n
    if count == 0:
        raise ValueError("perplexity of an empty dataset")
    mean = total / count
    return math.inf if mean > 709.0 else math.exp(mean)


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], n: int) -> float:
    """Corpus BLEU-n (cumulative, uniform weights) against one reference per candidate.

    Zero bigram matches are floored at ``1e-9`` for BLEU-2; unigram
    precision is never smoothed.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if n not in (1, 2):
        raise ValueError("only BLEU-1 and BLEU-2 are supported")
    matches = [0] * n
    totals = [0] * n
    for cand, ref in zip(candidates, references):
        for k in range(1, n + 1):
            c, r = _ngrams(cand, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(cnt, r[g]) for g, cnt in c.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    bp = _brevity_penalty(sum(map(len, candidates)), sum(map(len, references)))
    if totals[0] == 0 or matches[0] == 0:
        return 0.0
    p1 = matches[0] / totals[0]
    if n == 1:
        return bp * p1
    p2 = max(matches[1], BLEU_EPS) / max(totals[1], 1)
    return bp * math.exp(0.5 * (math.log(p1) + math.log(p2)))


def distinct_n(candidates: Sequence[Sequence], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all candidates."""
    seen: set = set()
    total = 0
    for cand in candidates:
        grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
        seen.update(grams)
        total += len(grams)
    if total == 0:
        raise ValueError(f"no candidate has length >= {n}")
    return len(seen) / total


def export_heatmap(S, labels: Sequence[str], path) -> np.ndarray:
    """Write the K x K self-attention matrix as TSV; returns the matrix."""
    return write_heatmap(attention_matrix(S), labels, path)


def write_heatmap(A: np.ndarray, labels: Sequence[str], path) -> np.ndarray:
    if len(labels) != A.shape[0]:
        raise ValueError(f"{len(labels)} labels for {A.shape[0]} tasks")
    lines = ["\t" + "\t".join(labels)]
    for label, row in zip(labels, A):
        lines.append(label + "\t" + "\t".join(f"{x:.6f}" for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return A


def read_heatmap(path) -> tuple[list[str], np.ndarray]:
    rows = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
    labels = rows[0].split("\t")[1:]
    values = np.array([[float(x) for x in r.split("\t")[1:]] for r in rows[1:]])
    return labels, values


def family_contrast(A: np.ndarray, families: Sequence[str]) -> tuple[float, float]:
    """Mean attention weight within the same family (diagonal included) and across families."""
    fam = np.asarray(families)
    same = fam[:, None] == fam[None, :]
    cross = A[~same]
    return float(A[same].mean()), float(cross.mean()) if cross.size else float("nan")
