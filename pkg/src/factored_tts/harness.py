"""End-to-end experiments: train models on Table-1-style views and score them.

A run manifest (JSON) names a corpus, a split, and a list of entries. Each
entry trains one architecture for one task on one experiment configuration
and evaluates its evaluation cells on the test partition. Outputs go to the
manifest's output directory::

    report.csv            every metric row of every successful entry
    summary.json          structured summary plus recorded failures
    models/<entry>.net    trained network (+ normalisation statistics)
    curves/<entry>.csv    per-epoch training/validation loss
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from factored_tts.corpus import (
    LOGF0,
    MCEP,
    N_CONTINUOUS,
    NEUTRAL,
    VUV,
    Corpus,
    CorpusConfig,
    ExperimentConfig,
    Partitions,
    SplitSpec,
    Utterance,
    assemble_training_view,
    audit_training_view,
    expand_to_frames,
    closed_emotion_config,
    generate_synthetic_corpus,
    load_corpus,
    open_emotion_config,
    sed_config,
    split_dataset,
)
from factored_tts.errors import (
    DegenerateVariance,
    FactoredTTSError,
    InsufficientVoicedFrames,
    InvalidConfig,
    ReportError,
)
from factored_tts.factor_encoding import Architecture
from factored_tts.metrics import (
    REPORT_COLUMNS,
    MetricReport,
    MetricRow,
    duration_rmse,
    logf0_metrics,
    mcd,
    static_rmse,
    voiced,
    vuv_error_rate,
    weighted_average,
)
from factored_tts.network import Network, build_architecture, load_network, save_network
from factored_tts.postproc import TrajectoryDistribution, global_variance, mlpg, variance_scaling
from factored_tts.training import (
    NormStats,
    TrainConfig,
    TrainReport,
    compute_norm_stats,
    published_train_config,
    train,
)

log = logging.getLogger(__name__)

POSTFILTERS = ("none", "mlpg", "mlpg+gv")


@dataclass
class TrainedModel:
    net: Network
    stats: NormStats
    task: str
    report: Optional[TrainReport] = None

    def save(self, path) -> None:
        extras = dict(self.stats.as_extras())
        extras["task_is_duration"] = np.array([1.0 if self.task == "duration" else 0.0])
        save_network(self.net, path, extras)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        net, extras = load_network(path)
        stats = NormStats.from_extras(extras)
        if stats is None:
            raise InvalidConfig(f"{path} carries no normalisation statistics")
        task = "duration" if extras.get("task_is_duration", np.zeros(1))[0] else "acoustic"
        return cls(net, stats, task)


def fit_model(corpus: Corpus, parts: Partitions, expcfg: ExperimentConfig, arch, task: str,
              hidden_dims: Sequence[int], train_cfg: TrainConfig, init_seed: int = 0) -> TrainedModel:
    view = assemble_training_view(corpus, parts, expcfg, task)
    audit_training_view(corpus, view, expcfg)
    stats = compute_norm_stats(view.train.y)
    train_set = view.train.with_targets(stats.normalize(view.train.y))
    valid_set = view.valid.with_targets(stats.normalize(view.valid.y)) if len(view.valid) else None
    input_dim = view.train.x.shape[1]
    net = build_architecture(arch, input_dim, hidden_dims, view.train.y.shape[1], corpus.M, corpus.N, init_seed)
    report = train(net, train_set, valid_set, train_cfg, stats)
    return TrainedModel(net, stats, task, report)


# --- synthesis ----------------------------------------------------------------

def speaker_gv(corpus: Corpus, utts: Sequence[Utterance], speaker: int) -> np.ndarray:
    """GV of a speaker's neutral speech in the given (training) utterances."""
    tracks = [u.static[:, :N_CONTINUOUS] for u in utts if u.speaker == speaker and u.emotion is NEUTRAL]
    if not tracks:
        raise InvalidConfig(f"speaker {speaker} has no neutral training speech to take a GV from")
    return global_variance(tracks)


def predict_durations(model: TrainedModel, corpus: Corpus, utt: Utterance, speaker=None,
                      emotion=None) -> np.ndarray:
    e, s = corpus.factor_ids(utt.emotion if emotion is None else emotion, utt.speaker if speaker is None else speaker)
    z = model.net.forward(utt.phone_features, e, s)
    frames = model.stats.denormalize(z)[:, 0]
    return np.maximum(np.rint(frames), 1).astype(np.int64)


def predict_acoustic(model: TrainedModel, corpus: Corpus, frame_features: np.ndarray, speaker: int, emotion,
                     postfilter: str = "mlpg+gv", gv: Optional[np.ndarray] = None) -> np.ndarray:
    """Static ``T x 5`` track (continuous channels then V/UV) for the given frames."""
    if postfilter not in POSTFILTERS:
        raise InvalidConfig(f"unknown postfilter {postfilter!r}")
    e, s = corpus.factor_ids(emotion, speaker)
    means = model.stats.denormalize(model.net.forward(frame_features, e, s))
    K = N_CONTINUOUS
    dyn = means[:, :3 * K]
    if postfilter == "none":
        cont = dyn[:, :K]
    else:
        var = np.broadcast_to(model.stats.std[:3 * K] ** 2, dyn.shape)
        cont = mlpg(TrajectoryDistribution(dyn, var))
        if postfilter == "mlpg+gv":
            if gv is None:
                raise InvalidConfig("mlpg+gv postfilter needs a global variance")
            cont = variance_scaling(cont, gv)
    vuv = (means[:, 3 * K] >= 0.5).astype(np.float64)
    return np.hstack([cont, vuv[:, None]])


def synthesize(acoustic: TrainedModel, corpus: Corpus, utt: Utterance, speaker: Optional[int] = None,
               emotion=None, postfilter: str = "mlpg+gv", gv: Optional[np.ndarray] = None,
               duration: Optional[TrainedModel] = None):
    """Static track and phoneme durations for ``utt`` voiced as (speaker, emotion).

    Without a duration model the natural durations are used (the evaluation
    protocol). With one, durations are predicted first and the frame features
    rebuilt from them (end-to-end mode, not comparable frame by frame).
    """
    speaker = utt.speaker if speaker is None else speaker
    emotion = utt.emotion if emotion is None else emotion
    if duration is None:
        durations, frames = utt.durations, utt.frame_features
    else:
        if duration.task != "duration":
            raise InvalidConfig("the duration model was trained for another task")
        durations = predict_durations(duration, corpus, utt, speaker, emotion)
        frames = expand_to_frames(utt.phone_features, durations)
    return predict_acoustic(acoustic, corpus, frames, speaker, emotion, postfilter, gv), durations


# --- evaluation -------------------------------------------------------------------

def acoustic_metric_rows(model_name: str, corpus: Corpus, cell, test_kind: str,
                         pairs: Sequence) -> List[MetricRow]:
    """Frame-weighted corpus-level metrics from ``(generated, reference)`` static tracks."""
    vals: Dict[str, list] = {m: [] for m in ("logf0_rmse", "logf0_corr", "mcd_db", "vuv_error_rate", "acoustic_rmse")}
    wts: Dict[str, list] = {m: [] for m in vals}
    for gen, ref in pairs:
        T = ref.shape[0]
        per_utt = [("mcd_db", mcd(gen[:, MCEP], ref[:, MCEP]), T),
                   ("vuv_error_rate", vuv_error_rate(gen[:, VUV], ref[:, VUV]), T),
                   ("acoustic_rmse", static_rmse(gen[:, :N_CONTINUOUS], ref[:, :N_CONTINUOUS]), T)]
        n_voiced = int(np.sum(voiced(gen[:, VUV]) & voiced(ref[:, VUV])))
        try:
            rmse, corr = logf0_metrics(gen[:, LOGF0], ref[:, LOGF0], gen[:, VUV], ref[:, VUV])
            per_utt += [("logf0_rmse", rmse, n_voiced), ("logf0_corr", corr, n_voiced)]
        except (InsufficientVoicedFrames, DegenerateVariance):
            # an utterance without a usable voiced stretch carries no log-F0 evidence
            pass
        for name, v, w in per_utt:
            vals[name].append(v)
            wts[name].append(w)
    if not vals["logf0_corr"]:
        raise InsufficientVoicedFrames("no test utterance of the cell has a usable voiced stretch")
    speaker, emotion = str(cell[0]), corpus.emotion_label(cell[1])
    return [MetricRow(model_name, speaker, emotion, test_kind, name, weighted_average(vals[name], wts[name]),
                      int(sum(wts[name]))) for name in vals]


def evaluate_cells(model: TrainedModel, model_name: str, corpus: Corpus, parts: Partitions,
                   expcfg: ExperimentConfig, postfilter: str = "mlpg+gv",
                   arch=None, generated: Optional[dict] = None) -> List[MetricRow]:
    rows = []
    for cell in expcfg.eval_cells:
        kind = expcfg.test_kind(cell, arch if arch is not None else model.net.kind)
        utts = [u for u in parts.test if u.cell == cell]
        if model.task == "duration":
            vals, wts = [], []
            for u in utts:
                pred = predict_durations(model, corpus, u)
                vals.append(duration_rmse(pred, u.durations))
                wts.append(u.n_phones)
            rows.append(MetricRow(model_name, str(cell[0]), corpus.emotion_label(cell[1]), kind,
                                  "duration_rmse_ms", weighted_average(vals, wts), int(sum(wts))))
            continue
        gv = speaker_gv(corpus, parts.train, cell[0]) if postfilter == "mlpg+gv" else None
        pairs = []
        for u in utts:
            gen = predict_acoustic(model, corpus, u.frame_features, cell[0], cell[1], postfilter, gv)
            if generated is not None:
                generated[u.utt_id] = gen
            pairs.append((gen, u.static))
        rows.extend(acoustic_metric_rows(model_name, corpus, cell, kind, pairs))
    return rows


# --- manifests ----------------------------------------------------------------------

@dataclass
class Entry:
    name: str
    architecture: Architecture
    task: str
    experiment: ExperimentConfig
    train: TrainConfig
    hidden_dims: tuple
    init_seed: int = 0
    postfilter: str = "mlpg+gv"
    model_name: str = ""

    def __post_init__(self):
        if not self.model_name:
            self.model_name = self.architecture.value


@dataclass
class RunManifest:
    corpus: Corpus
    corpus_seed: int
    split: SplitSpec
    entries: List[Entry]
    output_dir: str
    raw: dict = field(default_factory=dict, repr=False)


DEFAULT_HIDDEN = {"duration": (32, 32), "acoustic": (64, 64)}


def resolve_train_config(arch, task: str, spec: dict) -> TrainConfig:
    """Train options from a dict; ``"preset": "published"`` seeds them with the published values."""
    if spec.get("preset") == "published":
        rest = {k: v for k, v in spec.items() if k != "preset"}
        base = published_train_config(arch, task, int(rest.pop("epochs", 20)), int(rest.pop("shuffle_seed", 0)))
        return TrainConfig.from_dict({**base.__dict__, **rest})
    if "preset" in spec:
        raise InvalidConfig(f"unknown train preset {spec['preset']!r}")
    return TrainConfig.from_dict(spec)


def resolve_experiment(spec, corpus: Corpus, base_dir: str = ".") -> ExperimentConfig:
    """An experiment from a JSON file path, a preset dict or an explicit cell dict."""
    names = corpus.config.emotion_names
    if isinstance(spec, str):
        return ExperimentConfig.load(os.path.join(base_dir, spec), names)
    if not isinstance(spec, dict):
        raise InvalidConfig(f"bad experiment specification {spec!r}")
    if "preset" in spec:
        preset = spec["preset"]
        if preset == "open":
            return open_emotion_config(corpus, int(spec["speaker"]))
        if preset == "closed":
            return closed_emotion_config(corpus, [int(s) for s in spec["speakers"]])
        if preset == "sed":
            return sed_config(corpus, int(spec["speaker"]), corpus.parse_emotion(spec["emotion"]))
        raise InvalidConfig(f"unknown experiment preset {preset!r}")
    return ExperimentConfig.from_dict(spec, names)


def load_manifest(path_or_dict, base_dir: Optional[str] = None) -> RunManifest:
    """Resolve a manifest (path or already-parsed dict) into corpus, split and entries."""
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
        base_dir = base_dir or os.getcwd()
    else:
        base_dir = base_dir or os.path.dirname(os.path.abspath(path_or_dict))
        try:
            with open(path_or_dict) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read manifest {path_or_dict}: {exc}") from None
    try:
        corpus_spec = raw["corpus"]
        entries_spec = raw["entries"]
        output_dir = raw["output_dir"]
    except KeyError as exc:
        raise InvalidConfig(f"manifest is missing {exc}") from None

    if "path" in corpus_spec:
        corpus = load_corpus(os.path.join(base_dir, corpus_spec["path"]))
    elif "generate" in corpus_spec:
        corpus = generate_synthetic_corpus(CorpusConfig.from_dict(corpus_spec["generate"]))
    else:
        raise InvalidConfig("corpus needs either 'path' or 'generate'")
    split_spec = raw.get("split", {})
    split = SplitSpec(tuple(split_spec.get("ratios", (90, 5, 5))), int(split_spec.get("seed", 0)),
                      int(split_spec.get("block", 5)))

    entries = []
    for i, spec in enumerate(entries_spec):
        try:
            arch = Architecture.parse(spec["architecture"])
            task = spec.get("task", "acoustic")
            if task not in ("duration", "acoustic"):
                raise InvalidConfig(f"unknown task {task!r}")
            train_cfg = resolve_train_config(arch, task, spec.get("train", {}))
            entries.append(Entry(
                name=str(spec.get("name", f"entry{i}")),
                architecture=arch,
                task=task,
                experiment=resolve_experiment(spec["experiment"], corpus, base_dir),
                train=train_cfg,
                hidden_dims=tuple(spec.get("hidden_dims", DEFAULT_HIDDEN[task])),
                init_seed=int(spec.get("init_seed", 0)),
                postfilter=spec.get("postfilter", "mlpg+gv"),
                model_name=str(spec.get("model_name", "")),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidConfig(f"manifest entry {i}: {exc!r}") from None
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise InvalidConfig("entry names must be unique")
    out = output_dir if os.path.isabs(output_dir) else os.path.join(base_dir, output_dir)
    return RunManifest(corpus, corpus.config.seed, split, entries, out, raw)


@dataclass
class RunResult:
    report: MetricReport
    failures: Dict[str, str]
    models: Dict[str, TrainedModel]


def run_experiment(manifest: RunManifest, write: bool = True) -> RunResult:
    """Train and evaluate every entry; a failing entry is recorded, not fatal."""
    corpus = manifest.corpus
    parts = split_dataset(corpus, manifest.split)
    report = MetricReport()
    failures: Dict[str, str] = {}
    models: Dict[str, TrainedModel] = {}
    if write:
        for sub in ("models", "curves"):
            os.makedirs(os.path.join(manifest.output_dir, sub), exist_ok=True)
    for entry in manifest.entries:
        try:
            model = fit_model(corpus, parts, entry.experiment, entry.architecture, entry.task,
                              entry.hidden_dims, entry.train, entry.init_seed)
            rows = evaluate_cells(model, entry.model_name, corpus, parts, entry.experiment, entry.postfilter,
                                  entry.architecture)
        except FactoredTTSError as exc:
            log.warning("entry %s failed: %s", entry.name, exc)
            failures[entry.name] = f"{type(exc).__name__}: {exc}"
            continue
        report.extend(rows)
        models[entry.name] = model
        if write:
            model.save(os.path.join(manifest.output_dir, "models", f"{entry.name}.net"))
            model.report.write_curves(os.path.join(manifest.output_dir, "curves", f"{entry.name}.csv"))
    if write:
        report.write_csv(os.path.join(manifest.output_dir, "report.csv"))
        summary = {
            "corpus_seed": manifest.corpus_seed,
            "entries": {e.name: {"architecture": e.architecture.value, "task": e.task,
                                 "experiment": e.experiment.name,
                                 "init_seed": e.init_seed, "shuffle_seed": e.train.shuffle_seed,
                                 "status": "failed" if e.name in failures else "ok"}
                        for e in manifest.entries},
            "failures": failures,
            "metrics": json.loads(report.summary()),
        }
        with open(os.path.join(manifest.output_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return RunResult(report, failures, models)




# --- comparison ---------------------------------------------------------------------

ABSENT = "absent"


def compare_reports(paths: Sequence) -> List[dict]:
    """Side-by-side table over several report CSVs.

    One row per (model, speaker, emotion, test_kind, metric) seen in any
    report. ``value_<i>`` holds report i's value or ``"absent"``;
    ``delta_<i>`` (i >= 1) is report i minus report 0; ``open_minus_closed_<i>``
    is filled on open rows whose closed counterpart exists in report i.
    """
    if not paths:
        raise ReportError("no reports to compare")
    reports = [MetricReport.read_csv(p) for p in paths]
    keys = []
    lookup = []
    for rep in reports:
        d = {}
        for r in rep:
            if r.key() not in d:
                d[r.key()] = r.value
            if r.key() not in keys:
                keys.append(r.key())
        lookup.append(d)
    table = []
    for key in keys:
        model, speaker, emotion, kind, metric = key
        row = {"model": model, "speaker": speaker, "emotion": emotion, "test_kind": kind, "metric": metric}
        for i, d in enumerate(lookup):
            row[f"value_{i}"] = d.get(key, ABSENT)
        for i in range(1, len(lookup)):
            a, b = row["value_0"], row[f"value_{i}"]
            row[f"delta_{i}"] = ABSENT if ABSENT in (a, b) else b - a
        for i, d in enumerate(lookup):
            closed = (model, speaker, emotion, "closed", metric)
            if kind == "open" and key in d and closed in d:
                row[f"open_minus_closed_{i}"] = d[key] - d[closed]
            else:
                row[f"open_minus_closed_{i}"] = ""
        table.append(row)
    return table


def write_comparison(table: List[dict], path) -> None:
    if not table:
        raise ReportError("empty comparison")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0].keys()), lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
