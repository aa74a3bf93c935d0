"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary).
The learning experiments (7-9) train real models and take a few minutes.
"""

import math
import time

import numpy as np
import pytest

from conftest import finite_difference_grads, random_factors, record_criterion, relative_error
from factored_tts.corpus import (
    NEUTRAL,
    CorpusConfig,
    ExperimentConfig,
    SplitSpec,
    append_dynamic_features,
    assemble_training_view,
    audit_training_view,
    closed_emotion_config,
    emotional_cells,
    generate_synthetic_corpus,
    open_emotion_config,
    sed_config,
    split_dataset,
)
from factored_tts.factor_encoding import Architecture, emotion_id, speaker_id
from factored_tts.harness import evaluate_cells, fit_model, load_manifest, run_experiment
from factored_tts.metrics import MCD_CONST, duration_rmse, logf0_metrics, mcd
from factored_tts.network import FactoredLayer, build_architecture, forward_dense, forward_factored
from factored_tts.postproc import TrajectoryDistribution, mlpg, variance_scaling
from factored_tts.training import Samples, TrainConfig, minibatch_gradients, momentum_sgd_step
from test_postproc import dense_mlpg

# settings shared by the learning experiments
HIDDEN = (64, 64)
POSTFILTER = "mlpg"


def train_cfg(epochs, seed):
    return TrainConfig(learning_rate=0.5, momentum=0.9, minibatch_size=64, epochs=epochs, shuffle_seed=seed)


def metric(rows, name, cell=None):
    vals = [r.value for r in rows if r.metric == name and (cell is None or (r.speaker, r.emotion) == cell)]
    assert len(vals) == 1
    return vals[0]


def test_criterion_1_gradients():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(0)
    for arch in Architecture:
        net = build_architecture(arch, 7, [5, 4], 3, 2, 3, init_seed=int(rng.integers(1 << 30)))
        for _, arr in net.parameters():
            arr += rng.normal(0, 0.2, arr.shape)
        net.mark_modified()
        x = rng.normal(size=(4, 7))
        e, s = random_factors(rng, 4, 2, 3)
        w = rng.normal(size=(4, 3))
        net.forward(x, e, s, keep_cache=True)
        grads = net.backward(x, e, s, w)
        fd = finite_difference_grads(net, x, e, s, w, step=1e-5)
        worst[arch.value] = max(relative_error(grads[k], fd[k]) for k in grads)
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-5 and elapsed < 30
    record_criterion(1, ok, f"max relative error {top:.2e} over 8 architectures in {elapsed:.1f}s")
    assert ok, worst


def test_criterion_2_branch_selection():
    rng = np.random.default_rng(1)
    M, N = 3, 4
    net = build_architecture("PM", 6, [8, 5], 4, M, N, init_seed=3)
    layer = net.layers[-1]
    mismatches = 0
    for _ in range(100):
        i = int(rng.integers(0, M + 1))  # 0 stands for neutral
        j = int(rng.integers(1, N + 1))
        e = emotion_id(NEUTRAL if i == 0 else i, M)
        s = speaker_id(j, N)
        h = rng.normal(size=5)
        got = forward_factored(layer, h, np.concatenate([e, s, [1.0]]))
        terms = ([forward_dense(layer.branches[i - 1], h)] if i else []) + [
            forward_dense(layer.branches[M + j - 1], h), forward_dense(layer.branches[-1], h)]
        expected = terms[0]
        for t in terms[1:]:
            expected = expected + t
        mismatches += not np.array_equal(got, expected)
    ok = mismatches == 0
    record_criterion(2, ok, f"{100 - mismatches}/100 random (emotion, speaker) pairs bitwise equal")
    assert ok


def test_criterion_3_factor_isolation():
    corpus = generate_synthetic_corpus(CorpusConfig(seed=0))
    parts = split_dataset(corpus, SplitSpec())
    j_star, i_star = 1, 1
    cfg = ExperimentConfig("without_cell", [c for c in corpus.cells() if c != (j_star, i_star)],
                           [(j_star, i_star)])
    view = assemble_training_view(corpus, parts, cfg)
    audit_training_view(corpus, view, cfg)
    net = build_architecture("PM", view.train.x.shape[1], [16], view.train.y.shape[1], corpus.M, corpus.N, 0)
    out = len(net.layers) - 1
    M = corpus.M
    rng = np.random.default_rng(0)
    batch = view.train.subset(rng.choice(len(view.train), 256, replace=False))
    # the batch must contain neutral speech of j* and emotional speech of other speakers
    assert np.any((batch.s[:, j_star - 1] == 1) & (batch.e.sum(axis=1) == 0))
    leaks = 0
    for r in range(len(batch)):
        _, grads = minibatch_gradients(net, batch.subset([r]))
        for i in range(M):
            if batch.e[r, i] != 1:
                leaks += int(np.any(grads[f"L{out}.branch{i}.W"] != 0) or np.any(grads[f"L{out}.branch{i}.b"] != 0))
    # one update on the whole minibatch moves the speaker-j* branch
    params = net.param_dict()
    before = params[f"L{out}.branch{M + j_star - 1}.W"].copy()
    _, grads = minibatch_gradients(net, batch)
    momentum_sgd_step(params, grads, {}, 0.1, 0.9)
    moved = not np.array_equal(before, params[f"L{out}.branch{M + j_star - 1}.W"])
    ok = leaks == 0 and moved
    record_criterion(3, ok, f"{leaks} emotion-branch gradient leaks over {len(batch)} samples; "
                            f"speaker-{j_star} branch updated: {moved}")
    assert ok


def test_criterion_4_mlpg_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_oracle = worst_recover = 0.0
    for _ in range(20):
        T, K = int(rng.integers(1, 51)), int(rng.integers(1, 5))
        means = rng.normal(size=(T, 3 * K))
        variances = rng.uniform(0.05, 3.0, size=(T, 3 * K))
        got = mlpg(TrajectoryDistribution(means, variances))
        worst_oracle = max(worst_oracle, float(np.max(np.abs(got - dense_mlpg(means, variances)))))
        c = rng.normal(size=(T, K))
        rec = mlpg(TrajectoryDistribution(append_dynamic_features(c), variances))
        worst_recover = max(worst_recover, float(np.max(np.abs(rec - c))))
    elapsed = time.perf_counter() - start
    ok = worst_oracle < 1e-8 and worst_recover < 1e-10 and elapsed < 10
    record_criterion(4, ok, f"oracle max-abs {worst_oracle:.1e}, recovery {worst_recover:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_5_variance_scaling():
    rng = np.random.default_rng(3)
    worst_var = worst_mean = 0.0
    for _ in range(50):
        T, K = int(rng.integers(2, 200)), int(rng.integers(1, 6))
        x = rng.normal(size=(T, K)) * rng.uniform(0.01, 10, K) + rng.normal(0, 5, K)
        gv = rng.uniform(1e-3, 10, K)
        y = variance_scaling(x, gv)
        worst_var = max(worst_var, float(np.max(np.abs(y.var(axis=0) - gv) / gv)))
        worst_mean = max(worst_mean, float(np.max(np.abs(y.mean(axis=0) - x.mean(axis=0)))))
    ok = worst_var < 1e-10 and worst_mean < 1e-10
    record_criterion(5, ok, f"variance rel. error {worst_var:.1e}, mean drift {worst_mean:.1e}")
    assert ok


def test_criterion_6_metric_oracles():
    x = np.random.default_rng(4).normal(size=(20, 3))
    d = 0.8
    checks = {
        "mcd(x,x)=0": mcd(x, x) == 0.0,
        "single coefficient": abs(mcd([[0.0]], [[d]]) - (10 / math.log(10)) * math.sqrt(2) * d) < 1e-12,
        "constant": abs(MCD_CONST - (10 / math.log(10)) * math.sqrt(2)) < 1e-15,
        "corr(x,x)=1": abs(logf0_metrics(x[:, 0], x[:, 0], np.ones(20), np.ones(20))[1] - 1.0) < 1e-12,
        "duration example": abs(duration_rmse([10, 20], [14, 22]) - 15.811388300841896) < 1e-9,
    }
    ok = all(checks.values())
    record_criterion(6, ok, ", ".join(f"{k}: {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# --- learning experiments ---------------------------------------------------

def desk_corpus(seed, utterances, **extra):
    """Six speakers, two of them emotional; neutral-only speakers read their own texts."""
    return generate_synthetic_corpus(CorpusConfig(seed=seed, utterances_per_cell=utterances,
                                                  separate_neutral_texts=True, **extra))


def test_criterion_7_extrapolation():
    # one test sentence per cell makes a single run noisy, so RMSE is averaged over seeds
    start = time.perf_counter()
    open_rmse, closed_rmse = {}, {}
    for seed in range(5):
        corpus = generate_synthetic_corpus(CorpusConfig(seed=seed))
        parts = split_dataset(corpus, SplitSpec())
        open_cfg = open_emotion_config(corpus, 1)
        closed_cfg = closed_emotion_config(corpus, [1])
        open_pm = fit_model(corpus, parts, open_cfg, "PM", "acoustic", HIDDEN, train_cfg(60, seed), seed)
        closed_pm = fit_model(corpus, parts, closed_cfg, "PM", "acoustic", HIDDEN, train_cfg(60, seed), seed)
        open_rows = evaluate_cells(open_pm, "PM", corpus, parts, open_cfg, POSTFILTER)
        closed_rows = evaluate_cells(closed_pm, "PM", corpus, parts, closed_cfg, POSTFILTER)
        for spk, emo in emotional_cells(corpus, 1):
            key = (str(spk), corpus.emotion_label(emo))
            open_rmse.setdefault(key[1], []).append(metric(open_rows, "acoustic_rmse", key))
            closed_rmse.setdefault(key[1], []).append(metric(closed_rows, "acoustic_rmse", key))
    ratios = {k: np.mean(open_rmse[k]) / np.mean(closed_rmse[k]) for k in open_rmse}
    elapsed = time.perf_counter() - start
    ok = max(ratios.values()) <= 1.25 and elapsed < 300
    record_criterion(7, ok, "open/closed acoustic RMSE " + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
                     + f" (limit 1.25) in {elapsed:.0f}s")
    assert ok


def test_criterion_8_pooled_beats_single_cell():
    wins, lines = 0, []
    cell = (1, 1)
    for seed in range(10):
        corpus = desk_corpus(seed, 100)
        parts = split_dataset(corpus, SplitSpec())
        sed_cfg = sed_config(corpus, *cell)
        pm = fit_model(corpus, parts, closed_emotion_config(corpus, [1]), "PM", "acoustic", HIDDEN,
                       train_cfg(40, seed), seed)
        sed = fit_model(corpus, parts, sed_cfg, "SED", "acoustic", HIDDEN, train_cfg(40, seed), seed)
        pm_corr = metric(evaluate_cells(pm, "PM", corpus, parts, sed_cfg, POSTFILTER), "logf0_corr")
        sed_corr = metric(evaluate_cells(sed, "SED", corpus, parts, sed_cfg, POSTFILTER), "logf0_corr")
        wins += pm_corr > sed_corr
        lines.append(f"{pm_corr:.4f}/{sed_corr:.4f}")
    ok = wins >= 8
    record_criterion(8, ok, f"PM beats SED on log-F0 correlation in {wins}/10 seeds (PM/SED: {' '.join(lines)})")
    assert ok


def test_criterion_9_entangled_degradation():
    levels = (0.0, 0.25, 0.5)
    open_rmse, closed_rmse = [], []
    for level in levels:
        o, c = [], []
        for seed in range(5):
            corpus = generate_synthetic_corpus(CorpusConfig(seed=seed, utterances_per_cell=40,
                                                            regime="entangled", interaction=level))
            parts = split_dataset(corpus, SplitSpec())
            # speaker 1's emotions held out; speaker 2's emotional speech stays in training
            cfg = ExperimentConfig("open_spk1", open_emotion_config(corpus, 1).train_cells,
                                   emotional_cells(corpus, 1) + emotional_cells(corpus, 2))
            model = fit_model(corpus, parts, cfg, "PM", "acoustic", HIDDEN, train_cfg(60, seed), seed)
            rows = evaluate_cells(model, "PM", corpus, parts, cfg, POSTFILTER)
            o.append(np.mean([r.value for r in rows if r.metric == "acoustic_rmse" and r.test_kind == "open"]))
            c.append(np.mean([r.value for r in rows if r.metric == "acoustic_rmse" and r.test_kind == "closed"]))
        open_rmse.append(float(np.mean(o)))
        closed_rmse.append(float(np.mean(c)))
    increasing = all(b > a for a, b in zip(open_rmse, open_rmse[1:]))
    drift = max(abs(c / closed_rmse[0] - 1) for c in closed_rmse)
    ok = increasing and drift <= 0.10
    record_criterion(9, ok, "open RMSE " + " < ".join(f"{v:.3f}" for v in open_rmse)
                     + f"; closed RMSE {', '.join(f'{v:.3f}' for v in closed_rmse)} (max drift {drift:.1%})")
    assert ok


def test_criterion_10_determinism(tmp_path):
    def manifest(out):
        quick = {"learning_rate": 0.5, "momentum": 0.9, "minibatch_size": 64, "epochs": 8, "shuffle_seed": 3}
        return {
            "corpus": {"generate": {"seed": 11, "separate_neutral_texts": True}},
            "split": {"seed": 5},
            "output_dir": str(out),
            "entries": [
                {"name": f"{arch}_open", "architecture": arch, "experiment": {"preset": "open", "speaker": 2},
                 "train": quick, "hidden_dims": [16, 16], "init_seed": 7}
                for arch in ("PM", "SM_se", "AIM", "PM&AIM")
            ] + [
                {"name": "sed", "architecture": "SED", "experiment": {"preset": "sed", "speaker": 2, "emotion": "sad"},
                 "train": quick, "hidden_dims": [16]},
                {"name": "dur", "architecture": "SM_es&AIM", "task": "duration",
                 "experiment": {"preset": "closed", "speakers": [1, 2]}, "train": quick, "hidden_dims": [8, 8]},
            ],
        }

    for name in ("a", "b"):
        run_experiment(load_manifest(manifest(tmp_path / name)))
    a = (tmp_path / "a" / "report.csv").read_bytes()
    b = (tmp_path / "b" / "report.csv").read_bytes()
    ok = a == b and len(a.splitlines()) > 20
    record_criterion(10, ok, f"two runs of one manifest: report CSVs {'identical' if a == b else 'DIFFER'} "
                             f"({len(a)} bytes, {len(a.splitlines()) - 1} rows)")
    assert ok
