"""Command-line pipeline: ``synth``, ``train``, ``adapt``, ``report``, ``experiment`` and ``rerun``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or perplexity).
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from . import metrics
from .config import ConfigError, RunConfig, load_family_spec, load_run_config, spec_pairs
from .data import Corpus, CorpusError, Vocab, generate_synthetic_families, read_corpus_dir, save_corpus, synthetic_vocab
from .meta import (
    Learner,
    RESULT_FIELDS,
    aggregate_rows,
    corpus_vocab,
    finetune,
    meta_train,
    mtl_train,
    read_result_csv,
    result_row,
    rows_to_csv,
    run_experiment,
)

log = logging.getLogger("structmeta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, args: argparse.Namespace, config: dict, started: float, outputs: Sequence[str]) -> None:
    inputs = {k: str(v) for k, v in vars(args).items() if k in ("config", "data", "checkpoint", "runs") and v is not None}
    manifest = {
        "command": command,
        "argv": args.argv,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "out": str(out),
        "outputs": sorted(outputs),
        "version": version_string(),
        "duration_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path: str) -> tuple[Corpus, Vocab]:
    corpus = read_corpus_dir(path)
    vocab_file = Path(path) / "vocab.txt"
    vocab = Vocab.load(vocab_file) if vocab_file.exists() else corpus_vocab(corpus)
    return corpus, vocab


def _counts_table(corpus: Corpus) -> str:
    lines = [f"{'role':<10} {'task':<24} {'family':<10} {'train':>6} {'val':>5} {'test':>5}"]
    for role, label, family, n_train, n_val, n_test in corpus.counts():
        lines.append(f"{role:<10} {label:<24} {family:<10} {n_train:>6} {n_val:>5} {n_test:>5}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.time()
    spec = load_family_spec(args.config, args.set)
    corpus = generate_synthetic_families(spec, args.seed)
    out = _out_dir(args.out)
    save_corpus(corpus, out)
    synthetic_vocab(spec).save(out / "vocab.txt")
    print(_counts_table(corpus))
    outputs = [p.name for p in out.iterdir() if p.name != "manifest.json"]
    write_manifest(out, "synth", args, spec_pairs(spec), started, outputs)
    return EXIT_OK


def _train(cfg: RunConfig, regime: str, corpus: Corpus, vocab: Vocab, seed: int) -> Learner:
    hp = cfg.hyperparams(len(vocab))
    if regime == "mtl":
        return mtl_train(corpus, vocab, hp, cfg.meta, seed)
    return meta_train(corpus, vocab, hp, cfg.meta, regime, seed)


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_run_config(args.config, args.set)
    corpus, vocab = _load_data(args.data)
    learner = _train(cfg, args.regime, corpus, vocab, args.seed)
    out = _out_dir(args.out)
    learner.save(out)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in learner.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(out, "train", args, cfg.resolved(), started, ["checkpoint.bin", "model.json", "vocab.txt", "train_log.jsonl"])
    return EXIT_OK


def cmd_adapt(args) -> int:
    started = time.time()
    cfg = load_run_config(args.config, args.set)
    learner = Learner.load(args.checkpoint)
    corpus, _ = _load_data(args.data)
    try:
        role, task = corpus.find_task(args.task)
    except KeyError as e:
        raise CorpusError(f"task {args.task!r} not found in {args.data}") from e
    if role != "test" and role != "val":
        raise CorpusError(f"task {args.task!r} is a meta-train task; adaptation needs a val or test task")
    splits = (corpus.test_tasks if role == "test" else corpus.val_tasks)[task]
    mode = args.mode or ("sml" if learner.gates is not None else "plain")
    if mode == "sml" and learner.gates is None:
        raise UsageError(f"checkpoint regime {learner.regime} has no structure state; cannot adapt in sml mode")
    regime = "MTL+FT" if learner.regime == "MTL" else learner.regime
    report, adapted = finetune(learner, task, splits, cfg.meta, mode, args.seed)
    out = _out_dir(args.out)
    (out / "results.csv").write_text(rows_to_csv([result_row(regime, task, args.seed, report, True)]), encoding="utf-8")
    summary = {
        "regime": regime,
        "task_id": task.label,
        "ft_step": report.ft_step,
        "best_val_ppl": report.best_val_ppl,
        "test": report.test_metrics,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "curve.tsv").write_text(
        "step\tval_ppl\n" + "".join(f"{s}\t{p:.6f}\n" for s, p in report.curve), encoding="utf-8"
    )
    (out / "generations.txt").write_text("".join(" ".join(g) + "\n" for g in report.generations), encoding="utf-8")
    adapted.save(out / "adapted")
    write_manifest(
        out, "adapt", args, cfg.resolved(), started,
        ["results.csv", "report.json", "curve.tsv", "generations.txt", "adapted"],
    )
    return EXIT_OK


def _result_files(run: Path) -> list[Path]:
    if not run.exists():
        raise CorpusError(f"{run}: no such run")
    return [run] if run.is_file() else sorted(run.rglob("results.csv"))


def cmd_report(args) -> int:
    started = time.time()
    rows = []
    for run in args.runs:
        for path in _result_files(Path(run)):
            try:
                rows += read_result_csv(path)
            except ValueError as e:
                raise CorpusError(f"incompatible result schema: {e}") from e
    if not rows:
        raise CorpusError("no results.csv found under the given runs")
    out = _out_dir(args.out)
    agg = aggregate_rows(rows)
    fields = ["regime", "task_id", "n_seeds"] + [f"{k}_{s}" for k in RESULT_FIELDS[3:] for s in ("mean", "std")]
    (out / "aggregate.csv").write_text(rows_to_csv(agg, fields), encoding="utf-8")
    outputs = ["aggregate.csv"]
    for run in args.runs:
        for model_json in sorted(Path(run).rglob("model.json")) if Path(run).is_dir() else []:
            meta = json.loads(model_json.read_text())
            if not meta.get("structure") or model_json.parent.name == "adapted":
                continue
            learner = Learner.load(model_json.parent)
            name = "heatmap_" + "_".join(model_json.parent.relative_to(Path(run).parent).parts) + ".tsv"
            metrics.export_heatmap(learner.params["embed.sf"], [t.label for t in learner.tasks], out / name)
            outputs.append(name)
    for r in agg:
        print(
            f"{r['regime']:<7} {r['task_id']:<24} n={r['n_seeds']} "
            f"ft_step={r['ft_step_mean']:.1f}±{r['ft_step_std']:.1f} ppl={r['ppl_mean']:.3f}±{r['ppl_std']:.3f} "
            f"bleu2={r['bleu2_mean']:.3f} dist2={r['dist2_mean']:.3f}"
        )
    write_manifest(out, "report", args, {}, started, outputs)
    return EXIT_OK


def cmd_experiment(args) -> int:
    started = time.time()
    cfg = load_run_config(args.config, args.set)
    regimes = [r.strip() for r in args.regimes.split(",") if r.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.data:
        corpus, vocab = _load_data(args.data)
        source, hp = corpus, cfg.hyperparams(len(vocab))
    else:
        source = load_family_spec(args.spec)
        vocab = synthetic_vocab(source)
        hp = cfg.hyperparams(len(vocab))
    result = run_experiment(source, regimes, hp, cfg.meta, seeds, vocab=vocab, progress=log.info)
    out = _out_dir(args.out)
    (out / "results.csv").write_text(result.to_csv(), encoding="utf-8")
    outputs = ["results.csv"]
    for seed, (labels, _, A) in result.attention.items():
        name = f"heatmap_seed{seed}.tsv"
        metrics.write_heatmap(A, labels, out / name)
        outputs.append(name)
    write_manifest(out, "experiment", args, {**cfg.resolved(), "regimes": regimes, "seeds": seeds}, started, outputs)
    return EXIT_OK


def cmd_rerun(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UsageError(f"{args.manifest}: not a readable run manifest ({e})") from e
    if manifest.get("command") == "rerun":
        raise UsageError("a rerun manifest cannot be replayed")
    if args.out is not None:
        argv = _replace_out(argv, args.out)
    return main(argv)


def _replace_out(argv: list[str], out: str) -> list[str]:
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            res += ["--out", out]
            skip = True
        elif a.startswith("--out="):
            res.append(f"--out={out}")
        else:
            res.append(a)
    return res


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="structmeta", description="Structured meta-learning for conditional seq2seq.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def shared(sp, data=False):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a setting")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="corpus directory written by 'synth'")

    sp = sub.add_parser("synth", help="generate a synthetic clustered corpus")
    shared(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train under one regime")
    shared(sp, data=True)
    sp.add_argument("--regime", required=True, choices=("mtl", "maml", "sml"))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="fine-tune a checkpoint on a held-out task")
    shared(sp, data=True)
    sp.add_argument("--checkpoint", required=True, help="directory written by 'train'")
    sp.add_argument("--task", required=True, help="task label, e.g. 'identity|append_e'")
    sp.add_argument("--mode", choices=("plain", "sml"), help="default: sml for structured checkpoints")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("report", help="aggregate result CSVs and export heatmaps")
    sp.add_argument("runs", nargs="+", help="run directories or results.csv files")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("experiment", help="train and adapt every regime over several seeds")
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--spec", help="corpus spec file (default: built-in families)")
    sp.add_argument("--data", help="corpus directory instead of a generated one")
    sp.add_argument("--regimes", default="MTL,MTL+FT,MAML,SML")
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("rerun", help="replay the command recorded in a manifest.json")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="write to this directory instead of the recorded one")
    sp.set_defaults(func=cmd_rerun)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, OSError, KeyError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
