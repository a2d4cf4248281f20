"""One test per acceptance criterion; each records a PASS/FAIL line for the terminal summary."""
import itertools
import time

import numpy as np
import pytest

from structmeta import autodiff as ad
from structmeta import cli, data, meta, metrics, model, structure
from structmeta.autodiff import ParamStore, Tensor
from structmeta.data import EOS, FamilySpec
from structmeta.meta import MetaConfig
from structmeta.model import HyperParams, ModelParams

from conftest import ACCEPTANCE_LINES
from gradcheck import analytic, numeric, rel_error
from test_autodiff import CASES
from test_model import batch_of, np_decode_step, np_encode, tiny
from test_structure import np_representation

SEEDS = [0, 1, 2, 3, 4]
BUDGET_S = 30 * 60


def record(n, title, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def test_criterion_1_gradient_fidelity():
    start = time.time()
    worst = {}
    for name, case in CASES.items():
        for seed in range(3):
            build, arrays = case(np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), rel_error(analytic(build, arrays), numeric(build, arrays)))

    p = tiny(vocab=6, hidden=4, seed=10, scale=3.0)
    b = batch_of([([4, 5, 4], [5, 4]), ([5, 5], [4]), ([4], [4, 4, 5])], [0, 1, 0])
    names = list(p.store)

    def loss(*arrays):
        return model.teacher_forced_loss(ModelParams(p.hp, ParamStore(zip(names, arrays))), b)

    arrays = [p[n].data.copy() for n in names]
    worst["teacher_forced_loss"] = rel_error(analytic(loss, arrays), numeric(loss, arrays, eps=1e-5))

    rng = np.random.default_rng(0)
    S, Wf, Wg, R = rng.normal(size=(3, 4)), rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), rng.normal(size=4)

    def rep(S, Wf, Wg):
        return ad.sum_all(ad.mul(structure.task_representation(S, {"struct.W_f": Wf, "struct.W_g": Wg}, 1), R))

    worst["task_representation"] = rel_error(analytic(rep, [S, Wf, Wg]), numeric(rep, [S, Wf, Wg]))

    theta, Wp, s, R2 = rng.normal(size=12), rng.normal(size=(12, 4)), rng.normal(size=4), rng.normal(size=12)

    def gate(theta, Wp, s):
        th = ParamStore([("dec.0.b", ad.slice_(theta, 0, 5)), ("out.b_V", ad.slice_(theta, 5, 12))])
        out = structure.parameter_gate(th, ParamStore([("struct.W_p", Wp)]), s)
        return ad.sum_all(ad.mul(ad.concat([out["dec.0.b"], out["out.b_V"]]), R2))

    worst["parameter_gate"] = rel_error(analytic(gate, [theta, Wp, s]), numeric(gate, [theta, Wp, s]))
    elapsed = time.time() - start
    uncovered = set(ad.PRIMITIVES) - {n.split("_")[0] if n.startswith(("matmul", "lstm")) else n for n in CASES}
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-3 and elapsed < 60 and not uncovered
    record(1, "gradient fidelity", ok, f"{len(worst)} graphs, worst {top} rel err {worst[top]:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. oracle equivalence


def _enumerate(score, max_len, allowed):
    finished, partial = [], []
    for L in range(1, max_len + 1):
        for seq in itertools.product(allowed, repeat=L):
            if EOS in seq[:-1]:
                continue
            s = score(seq)
            (finished if seq[-1] == EOS else partial if L == max_len else []).append((seq, s / L))
    return min(finished or partial, key=lambda c: (-c[1], c[0]))


def test_criterion_2_oracle_equivalence():
    errs = {}
    p = tiny(vocab=5, hidden=2, seed=5, scale=4.0)
    q = [1, 4, 3, 4]
    enc = model.encode(p, q)
    s = p["embed.sf"].data[1]
    states, h, c = np_encode(p, q)
    state, e = enc.final, 0.0
    for prev in [2, 4, 3, 1]:
        logp, state, _ = model.decode_step(p, state, prev, Tensor(s), enc)
        ref, h, c, _ = np_decode_step(p, h, c, prev, s, states)
        e = max(e, np.abs(logp.data[0] - ref).max())
    errs["decode_step"] = e

    S = np.array([[0.5, -1.0], [1.5, 0.2], [-0.7, 0.9]])
    Wf = np.array([[0.3, -0.4, 0.8, 0.1], [-0.6, 0.2, 0.5, -0.9]])
    Wg = np.array([[0.7, 0.1, -0.3, 0.4], [0.2, -0.8, 0.6, 0.05]])
    gates = {"struct.W_f": Tensor(Wf), "struct.W_g": Tensor(Wg)}
    errs["task_representation"] = max(
        np.abs(structure.task_representation(S, gates, k).data - np_representation(S, Wf, Wg, k)[0]).max() for k in range(3)
    )

    theta = ParamStore([("dec.0.W", Tensor([1.0, -2.0])), ("out.b_V", Tensor([0.5, 4.0]))])
    Wp = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 2.0]])
    sv = np.array([0.2, -0.4])
    gated = structure.parameter_gate(theta, ParamStore([("struct.W_p", Tensor(Wp))]), Tensor(sv))
    o = [1 / (1 + np.exp(-sum(Wp[i, j] * sv[j] for j in range(2)))) for i in range(4)]
    want = [1.0 * o[0], -2.0 * o[1], 0.5 * o[2], 4.0 * o[3]]
    errs["parameter_gate"] = np.abs(np.concatenate([gated["dec.0.W"].data, gated["out.b_V"].data]) - want).max()

    beam_ok = True
    for seed in range(5):
        pm = tiny(vocab=5, seed=seed, scale=20.0)
        sf = Tensor(pm["embed.sf"].data[0])
        encm = model.encode(pm, [4, 1, 4])

        def score(seq):
            st, prev, total = encm.final, 2, 0.0
            for tok in seq:
                logp, st, _ = model.decode_step(pm, st, prev, sf, encm)
                total += logp.data[0, tok]
                prev = tok
            return total

        best, best_score = _enumerate(score, 2, [1, 3, 4])
        got, got_score = model.beam_search(pm, [4, 1, 4], sf, beam=9, max_len=2, return_score=True)
        beam_ok &= got == [t for t in best if t != EOS] and abs(got_score - best_score) < 1e-12
    worst = max(errs.values())
    ok = worst < 1e-6 and beam_ok
    record(2, "oracle equivalence", ok, f"max abs err {worst:.1e} over {sorted(errs)}, beam exact on 5 models: {beam_ok}")


# ---------------------------------------------------------------------------
# 3. first-order meta-gradient identity


def test_criterion_3_fomaml_identity():
    X_s, y_s = np.array([[1.0, 0.5, -1.0], [0.3, -0.2, 0.8]]), np.array([0.4, -0.1])
    X_q, y_q = np.array([[-0.6, 1.2, 0.1], [0.9, 0.4, -0.5], [0.2, 0.2, 0.2]]), np.array([0.3, 0.0, -0.2])

    def loss_fn(store, batch):
        X, y = batch
        d = ad.sub(ad.tanh(ad.matmul(Tensor(X), store["w"])), Tensor(y))
        return ad.scale(ad.sum_all(ad.mul(d, d)), 1.0 / len(y))

    def np_loss(w, X, y):
        return float(np.mean((np.tanh(X @ w) - y) ** 2))

    def np_grad(w, X, y, eps=1e-6):
        g = np.zeros_like(w)
        for i in range(len(w)):
            e = np.zeros_like(w)
            e[i] = eps
            g[i] = (np_loss(w + e, X, y) - np_loss(w - e, X, y)) / (2 * eps)
        return g

    worst = 0.0
    for seed in range(5):
        w0 = np.random.default_rng(seed).normal(size=3)
        cfg = MetaConfig(alpha=0.7, inner_steps=1, clip_train=None)
        leaf = ParamStore([("w", Tensor(w0.copy(), requires_grad=True))])
        meta.first_order_meta_grad(loss_fn, leaf, (X_s, y_s), (X_q, y_q), cfg, ad.Graph())
        adapted = w0 - cfg.alpha * np_grad(w0, X_s, y_s)
        worst = max(worst, np.abs(leaf["w"].grad - np_grad(adapted, X_q, y_q)).max())
    record(3, "first-order meta-gradient identity", worst < 1e-8, f"max abs diff {worst:.1e} over 5 draws")


# ---------------------------------------------------------------------------
# 4. saturated gates reduce SML to MAML


def test_criterion_4_saturated_gates_match_maml():
    spec = FamilySpec(examples_per_task=120)
    corpus, vocab = data.generate_synthetic_families(spec, 3), data.synthetic_vocab(spec)
    hp = HyperParams.desk(len(vocab))
    cfg = MetaConfig.desk(beta=2.0, sml_beta=None)
    base = meta.meta_train(corpus, vocab, hp, cfg, "sml", 3, iterations=0)
    base.params["embed.sf"].data[:, 0] = 5.0
    Wp = base.gates["struct.W_p"].data
    Wp[:] = 0.0
    Wp[:, 0] = 1e3
    traces = {}
    for mode in ("maml", "sml"):
        snaps = traces[mode] = []
        meta.meta_train(corpus, vocab, hp, cfg, mode, 3, init=base, iterations=50,
                        callback=lambda it, lr: snaps.append({n: t.data.copy() for n, t in lr.params.store.items()}))
    gate_min = 1.0
    for k in range(len(corpus.train_tasks)):
        s_t = structure.task_representation(base.params["embed.sf"], base.gates, k)
        gate_min = min(gate_min, structure.output_gate(base.gates["struct.W_p"], s_t).data.min())
    diff = max(np.abs(a[n] - b[n]).max() for a, b in zip(traces["maml"], traces["sml"]) for n in a)
    ok = len(traces["maml"]) == len(traces["sml"]) == 50 and diff < 1e-6
    record(4, "saturated gates reduce SML to MAML", ok, f"50 iterations, max param diff {diff:.1e}, min gate {gate_min:.6f}")


# ---------------------------------------------------------------------------
# 5 and 6. regime ordering and structure diagnostic on the desk profile


@pytest.fixture(scope="session")
def desk_experiment():
    start = time.time()
    result = meta.run_experiment(FamilySpec(), list(meta.REGIMES), None, MetaConfig.desk(), SEEDS)
    return result, time.time() - start


def _by(rows, regime, seed=None):
    return [r for r in rows if r["regime"] == regime and (seed is None or r["seed"] == seed)]


def test_criterion_5_regime_ordering(desk_experiment):
    result, elapsed = desk_experiment
    rows = result.rows
    step_ok, per_seed = 0, []
    for seed in SEEDS:
        m = {reg: np.mean([r["ft_step"] for r in _by(rows, reg, seed)]) for reg in ("SML", "MAML", "MTL+FT")}
        per_seed.append(f"s{seed}:{m['SML']:.0f}/{m['MAML']:.0f}/{m['MTL+FT']:.0f}")
        step_ok += m["SML"] <= m["MAML"] < m["MTL+FT"]
    ppl = {reg: np.mean([r["ppl"] for r in _by(rows, reg)]) for reg in ("SML", "MAML", "MTL+FT", "MTL")}
    ppl_ok = ppl["SML"] <= ppl["MAML"] <= ppl["MTL+FT"]
    ok = step_ok >= 4 and ppl_ok and elapsed < BUDGET_S
    detail = (f"FT step SML/MAML/MTL+FT {' '.join(per_seed)}, ordered in {step_ok}/5 seeds; "
              f"mean ppl SML {ppl['SML']:.3f} MAML {ppl['MAML']:.3f} MTL+FT {ppl['MTL+FT']:.3f} MTL {ppl['MTL']:.3f}; "
              f"{elapsed / 60:.1f} min")
    record(5, "regime ordering", ok, detail)


def test_criterion_6_structure_diagnostic(desk_experiment):
    result, _ = desk_experiment
    wins, parts = 0, []
    for seed in SEEDS:
        _, families, A = result.attention[seed]
        within, across = metrics.family_contrast(A, families)
        parts.append(f"s{seed}:{within:.3f}>{across:.3f}")
        wins += within > across
    record(6, "within-family attention exceeds cross-family", wins >= 4, f"{' '.join(parts)}, {wins}/5 seeds")


# ---------------------------------------------------------------------------
# 7. metric sanity


def test_criterion_7_metric_sanity():
    refs = [["a", "b", "c"], ["d", "e", "f", "g"]]
    bleu1 = metrics.bleu(refs, refs, 1)
    V = 23
    hp = HyperParams(vocab_size=V, word_dim=3, sf_dim=2, hidden=3, layers=1, dropout_p=0.0)
    p = model.init_params(hp, 1, np.random.default_rng(0))
    for t in p.store.values():
        t.data[...] = 0.0
    b = batch_of([([4, 5, 6], [7, 8]), ([9], [10, 11, 12])])
    ppl = metrics.perplexity([model.token_nll(p, b)])
    distinct = [
        metrics.distinct_n([["a", "b", "c"]], 1) == 1.0,
        metrics.distinct_n([["a", "b"], ["a", "b"]], 1) == 0.5,
        metrics.distinct_n([["a", "a", "a"]], 2) == 0.5,
        metrics.distinct_n([["a", "b", "a", "b"]], 2) == 2 / 3,
    ]
    ok = bleu1 == 1.0 and abs(ppl - V) / V < 0.05 and all(distinct)
    record(7, "metric sanity", ok, f"BLEU-1 {bleu1}, uniform ppl {ppl:.4f} vs V={V}, distinct cases {sum(distinct)}/4")


# ---------------------------------------------------------------------------
# 8. determinism under manifest replay

RUN = ["epochs=2", "lr_decay_start_epoch=1", "iters_per_epoch=3", "max_finetune_steps=20"]
CORPUS = ["examples_per_task=60"]


def _sets(items):
    return [a for s in items for a in ("--set", s)]


def test_criterion_8_manifest_replay_is_byte_identical(tmp_path):
    first = tmp_path / "first"
    steps = [
        ["synth", "--seed", "2", "--out", str(first / "corpus")] + _sets(CORPUS),
        ["train", "--regime", "mtl", "--seed", "2", "--data", str(first / "corpus"), "--out", str(first / "mtl")] + _sets(RUN),
        ["train", "--regime", "sml", "--seed", "2", "--data", str(first / "corpus"), "--out", str(first / "sml")] + _sets(RUN),
        ["adapt", "--checkpoint", str(first / "sml"), "--task", "identity|append_e", "--seed", "2",
         "--data", str(first / "corpus"), "--out", str(first / "adapt_sml")] + _sets(RUN),
        ["adapt", "--checkpoint", str(first / "mtl"), "--task", "identity|dup_last", "--seed", "2",
         "--data", str(first / "corpus"), "--out", str(first / "adapt_mtl")] + _sets(RUN),
        ["report", str(first / "adapt_sml"), str(first / "adapt_mtl"), str(first / "sml"), "--out", str(first / "report")],
        ["experiment", "--regimes", "MAML,SML", "--seeds", "0", "--out", str(first / "exp")] + _sets(RUN),
    ]
    codes = [cli.main(argv) for argv in steps]
    compared, same = 0, True
    for sub in ("corpus", "mtl", "sml", "adapt_sml", "adapt_mtl", "report", "exp"):
        again = tmp_path / "again" / sub
        codes.append(cli.main(["rerun", str(first / sub / "manifest.json"), "--out", str(again)]))
        for f in sorted((first / sub).rglob("*")):
            if f.is_file() and f.suffix in (".csv", ".tsv", ".bin", ".txt", ".jsonl"):
                compared += 1
                same &= f.read_bytes() == (again / f.relative_to(first / sub)).read_bytes()
    csvs = [f for f in first.rglob("*.csv")]
    ok = all(c == 0 for c in codes) and same and len(csvs) >= 4
    record(8, "manifest replay is byte-identical", ok, f"{len(steps)} commands replayed, {compared} files compared, {len(csvs)} result CSVs")
