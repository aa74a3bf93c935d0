"""Command-line entry point.

Every subcommand reads its configuration from JSON files and lets flags
override individual values. Exit status: 0 success, 1 configuration
error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from factored_tts.corpus import (
    CorpusConfig,
    SplitSpec,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_dataset,
    write_generated,
)
from factored_tts.errors import (
    DegenerateDimension,
    DegenerateVariance,
    FactoredTTSError,
    InsufficientVoicedFrames,
    InvalidConfig,
    NumericalError,
)
from factored_tts.factor_encoding import Architecture
from factored_tts.harness import (
    DEFAULT_HIDDEN,
    POSTFILTERS,
    TrainedModel,
    compare_reports,
    evaluate_cells,
    fit_model,
    load_manifest,
    resolve_experiment,
    resolve_train_config,
    run_experiment,
    speaker_gv,
    synthesize,
    write_comparison,
)
from factored_tts.metrics import MetricReport

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (NumericalError, DegenerateDimension, DegenerateVariance, InsufficientVoicedFrames)

log = logging.getLogger("factored_tts")


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path} must hold a JSON object")
    return data


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def parse_experiment(text: str, corpus):
    """``open:S``, ``closed:S1,S2``, ``sed:S:EMOTION`` or a path to an experiment JSON file."""
    kind, _, rest = text.partition(":")
    if kind == "open" and rest:
        return resolve_experiment({"preset": "open", "speaker": rest}, corpus)
    if kind == "closed" and rest:
        return resolve_experiment({"preset": "closed", "speakers": rest.split(",")}, corpus)
    if kind == "sed" and rest.count(":") == 1:
        spk, emo = rest.split(":")
        return resolve_experiment({"preset": "sed", "speaker": spk, "emotion": emo}, corpus)
    if os.path.isfile(text):
        return resolve_experiment(os.path.abspath(text), corpus)
    raise InvalidConfig(f"cannot interpret experiment {text!r}")


def _hidden(text: Optional[str], task: str):
    if text is None:
        return DEFAULT_HIDDEN[task]
    try:
        dims = tuple(int(d) for d in text.split(",") if d)
    except ValueError:
        raise InvalidConfig(f"bad hidden sizes {text!r}") from None
    return dims


def _partitions(corpus, args):
    return split_dataset(corpus, SplitSpec(seed=args.split_seed))


# --- subcommands -------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    cfg = _override(_read_json(args.config), seed=args.seed, regime=args.regime, interaction=args.interaction,
                    utterances_per_cell=args.utterances_per_cell, n_speakers=args.speakers)
    corpus = generate_synthetic_corpus(CorpusConfig.from_dict(cfg))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.utterances)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    spec = _read_json(args.config)
    arch = Architecture.parse(args.arch or spec.pop("architecture", "PM"))
    task = args.task or spec.pop("task", "acoustic")
    if task not in DEFAULT_HIDDEN:
        raise InvalidConfig(f"unknown task {task!r}")
    train_spec = spec.get("train", {})
    if args.published_preset:
        train_spec = {**train_spec, "preset": "published"}
    train_spec = _override(train_spec, learning_rate=args.lr, momentum=args.momentum,
                           minibatch_size=args.batch, epochs=args.epochs, shuffle_seed=args.shuffle_seed)
    train_cfg = resolve_train_config(arch, task, train_spec)
    hidden = _hidden(args.hidden, task) if args.hidden or "hidden_dims" not in spec else tuple(spec["hidden_dims"])
    init_seed = args.init_seed if args.init_seed is not None else int(spec.get("init_seed", 0))
    expcfg = parse_experiment(args.experiment, corpus)
    model = fit_model(corpus, _partitions(corpus, args), expcfg, arch, task, hidden, train_cfg, init_seed)
    model.save(args.out)
    if args.curves:
        model.report.write_curves(args.curves)
    print(f"{arch.value} {task} model -> {args.out} (best epoch {model.report.best_epoch}, "
          f"snapshot {model.report.snapshot_id})")
    return EXIT_OK


def cmd_synth(args) -> int:
    corpus = load_corpus(args.corpus)
    acoustic = TrainedModel.load(args.model)
    duration = TrainedModel.load(args.duration_model) if args.duration_model else None
    parts = _partitions(corpus, args)
    expcfg = parse_experiment(args.experiment, corpus)
    generated, durations = {}, {}
    for cell in expcfg.eval_cells:
        gv = speaker_gv(corpus, parts.train, cell[0]) if args.postfilter == "mlpg+gv" else None
        for u in (u for u in parts.test if u.cell == cell):
            generated[u.utt_id], durations[u.utt_id] = synthesize(acoustic, corpus, u, postfilter=args.postfilter,
                                                                  gv=gv, duration=duration)
    if not generated:
        raise InvalidConfig("no test utterances in the evaluation cells")
    write_generated(args.out, corpus, generated, durations)
    mode = "predicted (end-to-end, not the evaluation protocol)" if duration else "natural"
    with open(os.path.join(args.out, "synthesis.json"), "w") as fh:
        json.dump({"durations": mode, "postfilter": args.postfilter, "model": os.path.basename(args.model)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"synthesized {len(generated)} utterances ({mode} durations) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    model = TrainedModel.load(args.model)
    expcfg = parse_experiment(args.experiment, corpus)
    name = args.name or model.net.kind.value
    rows = evaluate_cells(model, name, corpus, _partitions(corpus, args), expcfg, args.postfilter)
    report = MetricReport(rows)
    if args.out:
        report.write_csv(args.out)
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    text = MetricReport.read_csv(args.report).summary()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    table = compare_reports(args.reports)
    if args.out:
        write_comparison(table, args.out)
    else:
        for row in table:
            print(json.dumps(row, sort_keys=False))
    return EXIT_OK


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.output_dir:
        manifest.output_dir = args.output_dir
    result = run_experiment(manifest)
    print(f"{len(result.report)} metric rows, {len(result.failures)} failed entries -> {manifest.output_dir}")
    for name, why in result.failures.items():
        print(f"  {name}: {why}", file=sys.stderr)
    if not result.failures:
        return EXIT_OK
    numerical = [n.__name__ for n in NUMERICAL_ERRORS]
    if any(why.split(":", 1)[0] in numerical for why in result.failures.values()):
        return EXIT_NUMERICAL
    return EXIT_CONFIG


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factored-tts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic corpus directory")
    g.add_argument("--config", help="corpus generator JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--regime", choices=["additive", "entangled"])
    g.add_argument("--interaction", type=float)
    g.add_argument("--utterances-per-cell", type=int)
    g.add_argument("--speakers", type=int)
    g.set_defaults(func=cmd_gen_corpus)

    def corpus_args(q):
        q.add_argument("--corpus", required=True, help="corpus directory")
        q.add_argument("--experiment", required=True, help="open:S | closed:S1,S2 | sed:S:EMO | file.json")
        q.add_argument("--split-seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model")
    corpus_args(t)
    t.add_argument("--config", help="JSON with architecture, task, hidden_dims, init_seed and train")
    t.add_argument("--arch")
    t.add_argument("--task", choices=list(DEFAULT_HIDDEN))
    t.add_argument("--hidden", help="comma-separated hidden sizes")
    t.add_argument("--init-seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--shuffle-seed", type=int)
    t.add_argument("--published-preset", action="store_true", help="start from the published learning rates")
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--curves", help="per-epoch loss CSV")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="generate test-utterance trajectories")
    corpus_args(s)
    s.add_argument("--model", required=True, help="acoustic model file")
    s.add_argument("--duration-model", help="chain a duration model (end-to-end mode)")
    s.add_argument("--postfilter", choices=POSTFILTERS, default="mlpg+gv")
    s.add_argument("--out", required=True, help="output corpus directory")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score a model on the evaluation cells")
    corpus_args(e)
    e.add_argument("--model", required=True)
    e.add_argument("--name", help="model label in the report")
    e.add_argument("--postfilter", choices=POSTFILTERS, default="mlpg+gv")
    e.add_argument("--out", help="report CSV (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize a report CSV as JSON")
    r.add_argument("report")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("compare", help="side-by-side table of several reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("run", help="train and evaluate every entry of a manifest")
    m.add_argument("manifest")
    m.add_argument("--output-dir")
    m.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FactoredTTSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
