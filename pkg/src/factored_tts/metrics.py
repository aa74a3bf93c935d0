"""Objective measures: duration RMSE, log-F0 RMSE/correlation, MCD, V/UV error.

Corpus-level values are frame-count-weighted averages of per-utterance
values (:func:`weighted_average`).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, List, Sequence

import numpy as np

from factored_tts.errors import (
    DegenerateVariance,
    EmptyInput,
    InsufficientVoicedFrames,
    ReportError,
    ShapeError,
)

MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)
VOICING_THRESHOLD = 0.5


def voiced(flags) -> np.ndarray:
    return np.asarray(flags, dtype=np.float64) >= VOICING_THRESHOLD


def duration_rmse(pred, target, frame_shift_ms: float = 5.0) -> float:
    """RMSE of per-phoneme frame counts, in milliseconds."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.size == 0 or t.size == 0:
        raise EmptyInput("no phonemes to compare")
    if p.shape != t.shape:
        raise ShapeError(f"{p.size} predicted durations vs {t.size} targets")
    return float(np.sqrt(np.mean((p - t) ** 2)) * frame_shift_ms)


def logf0_metrics(pred, target, pred_vuv, target_vuv):
    """(RMSE, Pearson correlation) of log F0 over jointly voiced frames."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    pv, tv = voiced(pred_vuv).ravel(), voiced(target_vuv).ravel()
    if not (p.shape == t.shape == pv.shape == tv.shape):
        raise ShapeError("log-F0 tracks and voicing flags must have equal lengths")
    mask = pv & tv
    if mask.sum() < 2:
        raise InsufficientVoicedFrames(f"only {int(mask.sum())} jointly voiced frames")
    p, t = p[mask], t[mask]
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.mean(dp ** 2)), np.sqrt(np.mean(dt ** 2))
    if sp == 0 or st == 0:
        raise DegenerateVariance("log-F0 track is constant over the voiced frames")
    corr = float(np.clip(np.mean(dp * dt) / (sp * st), -1.0, 1.0))
    return rmse, corr


def mcd(pred, target) -> float:
    """Mean Mel-cepstral distortion in dB; the 0th coefficient must already be excluded."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if t.ndim == 1:
        t = t[:, None]
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] < 1:
        raise ShapeError(f"cepstra shapes differ or are empty: {p.shape} vs {t.shape}")
    if p.shape[0] == 0:
        raise EmptyInput("no frames")
    per_frame = MCD_CONST * np.sqrt(np.sum((p - t) ** 2, axis=1))
    return float(per_frame.mean())


def vuv_error_rate(pred_vuv, target_vuv) -> float:
    p, t = voiced(pred_vuv).ravel(), voiced(target_vuv).ravel()
    if p.size == 0:
        raise EmptyInput("no frames")
    if p.shape != t.shape:
        raise ShapeError("voicing sequences have different lengths")
    return float(np.mean(p != t))


def static_rmse(pred, target) -> float:
    """Root mean squared error over all frames and channels."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape} vs {t.shape}")
    if p.size == 0:
        raise EmptyInput("no frames")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def weighted_average(values: Sequence[float], weights: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.size == 0 or w.sum() <= 0:
        raise EmptyInput("nothing to average")
    return float(np.sum(v * w) / np.sum(w))


# --- reports ---------------------------------------------------------------

REPORT_COLUMNS = ["model", "speaker", "emotion", "test_kind", "metric", "value", "n_frames"]
TEST_KINDS = ("open", "closed", "sed")
METRIC_NAMES = ("duration_rmse_ms", "logf0_rmse", "logf0_corr", "mcd_db", "vuv_error_rate", "acoustic_rmse")


@dataclass(frozen=True)
class MetricRow:
    model: str
    speaker: str
    emotion: str
    test_kind: str
    metric: str
    value: float
    n_frames: int

    def key(self):
        return (self.model, self.speaker, self.emotion, self.test_kind, self.metric)


def _check_row(row: MetricRow) -> None:
    if row.test_kind not in TEST_KINDS:
        raise ReportError(f"unknown test kind {row.test_kind!r}")
    v = row.value
    if row.metric == "logf0_corr" and not -1.0 <= v <= 1.0:
        raise ReportError(f"correlation {v} outside [-1, 1]")
    if row.metric == "vuv_error_rate" and not 0.0 <= v <= 1.0:
        raise ReportError(f"rate {v} outside [0, 1]")
    if row.metric in ("duration_rmse_ms", "logf0_rmse", "mcd_db", "acoustic_rmse") and v < 0:
        raise ReportError(f"{row.metric} is negative")


class MetricReport:
    def __init__(self, rows: Iterable[MetricRow] = ()):
        self.rows: List[MetricRow] = []
        for r in rows:
            self.add(r)

    def add(self, row: MetricRow) -> None:
        _check_row(row)
        self.rows.append(row)

    def extend(self, rows: Iterable[MetricRow]) -> None:
        for r in rows:
            self.add(r)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def get(self, model, speaker, emotion, metric, test_kind=None) -> float:
        for r in self.rows:
            if (r.model, r.speaker, r.emotion, r.metric) == (model, speaker, emotion, metric) and (
                    test_kind is None or r.test_kind == test_kind):
                return r.value
        raise KeyError((model, speaker, emotion, metric, test_kind))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.model, r.speaker, r.emotion, r.test_kind, r.metric, repr(float(r.value)), r.n_frames])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != REPORT_COLUMNS:
                raise ReportError(f"{path}: unexpected columns {header}")
            rows = []
            for line in reader:
                if len(line) != len(REPORT_COLUMNS):
                    raise ReportError(f"{path}: malformed row {line}")
                m, spk, emo, kind, metric, value, n = line
                rows.append(MetricRow(m, spk, emo, kind, metric, float(value), int(n)))
        return cls(rows)

    def summary(self) -> str:
        """Structured-text (JSON) summary grouped by model and cell."""
        out = {}
        for r in self.rows:
            cell = out.setdefault(r.model, {}).setdefault(f"{r.speaker}/{r.emotion}/{r.test_kind}", {})
            cell[r.metric] = {"value": r.value, "n_frames": r.n_frames}
        return json.dumps(out, indent=2, sort_keys=True) + "\n"

    def as_dicts(self):
        return [asdict(r) for r in self.rows]
