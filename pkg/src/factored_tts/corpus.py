"""Synthetic multi-speaker, multi-emotion corpora with known factor structure.

Every speaker utters the same pool of synthetic sentences. A sentence is a
sequence of phonemes; each phoneme gets a binary context vector (one-hot
current/previous/next phoneme class) plus numeric context (relative position
in the sentence, sentence length / 10). Frames add two timing features
(relative position inside the phoneme, phoneme duration / 20). The acoustic
ground truth is continuous across phoneme boundaries, so dynamic features
are predictable from the frame context. Acoustic targets
have five static channels:

    0  pseudo log F0
    1-3  pseudo Mel-cepstrum
    4  voiced/unvoiced flag (a property of the phoneme class)

For continuous channels the clean target is ``B(x) + g_e(x) + h_s(x)``;
neutral speech has no ``g`` term. The entangled regime adds a
speaker-specific emotion term ``lambda * k_{e,s}(x)`` to emotional speech.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from factored_tts.errors import InvalidConfig
from factored_tts.factor_encoding import NEUTRAL, Neutral, emotion_id, speaker_id
from factored_tts.training import Samples

# (static, delta, delta-delta); centred windows, edges replicated
DELTA_WINDOWS = ((0.0, 1.0, 0.0), (-0.5, 0.0, 0.5), (1.0, -2.0, 1.0))

STATIC_CHANNELS = ("logf0", "mcep1", "mcep2", "mcep3", "vuv")
LOGF0, VUV = 0, 4
MCEP = slice(1, 4)
N_CONTINUOUS = 4
VOICED_CLASSES = 5  # phoneme classes [0, 5) are voiced

Cell = Tuple[int, Union[int, Neutral]]


def append_dynamic_features(static) -> np.ndarray:
    """``[x | delta | delta-delta]`` for a ``T x K`` track."""
    x = np.asarray(static, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 1:
        raise InvalidConfig("need at least one frame")
    prev = np.vstack([x[:1], x[:-1]])
    nxt = np.vstack([x[1:], x[-1:]])
    delta = 0.5 * (nxt - prev)
    delta2 = prev - 2.0 * x + nxt
    return np.hstack([x, delta, delta2])


@dataclass
class CorpusConfig:
    n_speakers: int = 6
    emotion_names: Tuple[str, ...] = ("joyful", "sad")
    emotional_speakers: Tuple[int, ...] = (1, 2)
    utterances_per_cell: int = 20
    # neutral-only speakers read their own sentences (a second text pool)
    separate_neutral_texts: bool = False
    n_phone_classes: int = 8
    phones_per_utterance: Tuple[int, int] = (6, 10)
    regime: str = "additive"
    interaction: float = 0.0
    noise: float = 0.02
    duration_noise: float = 0.5
    truth_width: int = 8
    seed: int = 0

    def __post_init__(self):
        self.emotion_names = tuple(self.emotion_names)
        self.emotional_speakers = tuple(int(s) for s in self.emotional_speakers)
        self.phones_per_utterance = tuple(int(p) for p in self.phones_per_utterance)

    @property
    def M(self) -> int:
        return len(self.emotion_names)

    @property
    def N(self) -> int:
        return self.n_speakers

    @property
    def phone_dim(self) -> int:
        return 3 * self.n_phone_classes + 2

    @property
    def frame_dim(self) -> int:
        return self.phone_dim + 2

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise InvalidConfig("need at least two speakers")
        if self.M < 1:
            raise InvalidConfig("need at least one emotion besides neutral")
        if "neutral" in self.emotion_names or len(set(self.emotion_names)) != self.M:
            raise InvalidConfig("emotion names must be unique and exclude 'neutral'")
        if self.utterances_per_cell < 10:
            raise InvalidConfig("need at least 10 utterances per cell")
        bad = [s for s in self.emotional_speakers if not 1 <= s <= self.n_speakers]
        if bad or len(set(self.emotional_speakers)) != len(self.emotional_speakers):
            raise InvalidConfig(f"emotional speakers {self.emotional_speakers} not a subset of 1..{self.n_speakers}")
        if self.regime not in ("additive", "entangled"):
            raise InvalidConfig(f"unknown regime {self.regime!r}")
        if self.regime == "additive" and self.interaction != 0:
            raise InvalidConfig("the additive regime has no interaction term")
        if self.interaction < 0 or self.noise < 0 or self.duration_noise < 0:
            raise InvalidConfig("noise levels and interaction strength must be non-negative")
        lo, hi = self.phones_per_utterance
        if not 1 <= lo <= hi:
            raise InvalidConfig("bad phones_per_utterance range")
        if self.n_phone_classes <= VOICED_CLASSES:
            raise InvalidConfig(f"need more than {VOICED_CLASSES} phoneme classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "CorpusConfig":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown corpus options: {sorted(unknown)}")
        return cls(**d)


# --- cells -------------------------------------------------------------------

def emotion_label(emotion, names: Sequence[str]) -> str:
    return "neutral" if emotion is NEUTRAL else names[emotion - 1]


def parse_emotion(label, names: Sequence[str]):
    if label is NEUTRAL or label == "neutral":
        return NEUTRAL
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if 1 <= label <= len(names):
            return int(label)
    elif label in names:
        return list(names).index(label) + 1
    raise InvalidConfig(f"unknown emotion {label!r}")


def _emotion_key(emotion) -> int:
    return 0 if emotion is NEUTRAL else int(emotion)


# --- ground truth ------------------------------------------------------------

class GroundTruth:
    """The analytic factor functions a corpus was drawn from."""

    def __init__(self, cfg: CorpusConfig):
        rng = np.random.default_rng([cfg.seed, 0])
        H, M, N = cfg.truth_width, cfg.M, cfg.N
        K = N_CONTINUOUS
        self.cfg = cfg
        C = cfg.n_phone_classes
        # frame-level hidden features: blended phoneme class, utterance position,
        # and a class-dependent arch that vanishes at phoneme boundaries
        self.class_proj = rng.normal(0.0, 1.0, (H, C))
        self.position_proj = rng.normal(0.0, 1.5, H)
        self.arch_proj = rng.normal(0.0, 1.0, (H, C))
        self.frame_bias = rng.normal(0.0, 0.5, H)
        self.proj_phone = rng.normal(0.0, 1.0, (H, cfg.phone_dim)) / np.sqrt(3.0)
        self.proj_phone_bias = rng.normal(0.0, 0.5, H)

        scale = np.array([0.15, 0.5, 0.5, 0.5])
        self.base_offset = np.array([5.0, 0.0, 0.0, 0.0])
        self.base = rng.normal(0.0, 1.0, (K, H)) * scale[:, None]
        self.emo = rng.normal(0.0, 0.5, (M, K, H)) * scale[None, :, None]
        self.emo_offset = rng.normal(0.0, 1.0, (M, K)) * scale
        self.spk = rng.normal(0.0, 0.5, (N, K, H)) * scale[None, :, None]
        self.spk_offset = rng.normal(0.0, 1.0, (N, K)) * scale
        self.inter = rng.normal(0.0, 0.5, (M, N, K, H)) * scale[None, None, :, None]
        self.inter_offset = rng.normal(0.0, 1.0, (M, N, K)) * scale

        self.dur_base = 7.0
        self.dur_w = rng.normal(0.0, 1.5, H)
        self.dur_emo = rng.normal(0.0, 1.5, M)
        self.dur_emo_w = rng.normal(0.0, 0.5, (M, H))
        self.dur_spk = rng.normal(0.0, 1.0, N)
        self.dur_inter = rng.normal(0.0, 1.5, (M, N))

    def _frame_features(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        C = self.cfg.n_phone_classes
        cur, prev, nxt = x[:, :C], x[:, C:2 * C], x[:, 2 * C:3 * C]
        rel, length, pos = x[:, 3 * C], x[:, 3 * C + 1], x[:, 3 * C + 2]
        # halfway through the edge frames the class blend is 50/50, so the
        # trajectory is continuous across phoneme boundaries
        w_prev = np.maximum(0.0, 0.5 - pos)[:, None]
        w_next = np.maximum(0.0, pos - 0.5)[:, None]
        blend = (1.0 - w_prev - w_next) * cur + w_prev * prev + w_next * nxt
        n_phones = np.maximum(np.rint(length * 10.0), 1.0)
        utt_pos = (rel * (n_phones - 1.0) + pos) / n_phones
        z = (blend @ self.class_proj.T + utt_pos[:, None] * self.position_proj
             + np.sin(np.pi * pos)[:, None] * (cur @ self.arch_proj.T) + self.frame_bias)
        return np.tanh(z)

    def _phone_features(self, x) -> np.ndarray:
        return np.tanh(np.atleast_2d(x) @ self.proj_phone.T + self.proj_phone_bias)

    @property
    def strength(self) -> float:
        return self.cfg.interaction if self.cfg.regime == "entangled" else 0.0

    def base_fn(self, x) -> np.ndarray:
        return self.base_offset + self._frame_features(x) @ self.base.T

    def emotion_fn(self, x, emotion) -> np.ndarray:
        phi = self._frame_features(x)
        if emotion is NEUTRAL:
            return np.zeros((phi.shape[0], N_CONTINUOUS))
        i = emotion - 1
        return self.emo_offset[i] + phi @ self.emo[i].T

    def speaker_fn(self, x, speaker: int) -> np.ndarray:
        j = speaker - 1
        return self.spk_offset[j] + self._frame_features(x) @ self.spk[j].T

    def interaction_fn(self, x, emotion, speaker: int) -> np.ndarray:
        phi = self._frame_features(x)
        if emotion is NEUTRAL or self.strength == 0:
            return np.zeros((phi.shape[0], N_CONTINUOUS))
        i, j = emotion - 1, speaker - 1
        return self.strength * (self.inter_offset[i, j] + phi @ self.inter[i, j].T)

    def acoustic_mean(self, x, emotion, speaker: int) -> np.ndarray:
        """Noise-free continuous static channels (rows follow ``x``)."""
        out = self.base_fn(x) + self.emotion_fn(x, emotion) + self.speaker_fn(x, speaker)
        if self.strength:
            out = out + self.interaction_fn(x, emotion, speaker)
        return out

    def duration_mean(self, x_phone, emotion, speaker: int) -> np.ndarray:
        phi = self._phone_features(x_phone)
        d = self.dur_base + phi @ self.dur_w + self.dur_spk[speaker - 1]
        if emotion is not NEUTRAL:
            i = emotion - 1
            d = d + self.dur_emo[i] + phi @ self.dur_emo_w[i]
            if self.strength:
                d = d + self.strength * self.dur_inter[i, speaker - 1]
        return d


# --- utterances ----------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    speaker: int
    emotion: Union[int, Neutral]
    sentence: int
    phone_features: np.ndarray  # (P, phone_dim)
    durations: np.ndarray  # (P,) frames
    frame_features: np.ndarray  # (T, frame_dim)
    static: np.ndarray  # (T, 5)
    pool: int = 0  # text pool the sentence index refers to

    @property
    def text(self) -> Tuple[int, int]:
        return (self.pool, self.sentence)

    @property
    def cell(self) -> Cell:
        return (self.speaker, self.emotion)

    @property
    def n_frames(self) -> int:
        return self.static.shape[0]

    @property
    def n_phones(self) -> int:
        return self.durations.shape[0]

    def acoustic_targets(self) -> np.ndarray:
        """``[static | delta | delta-delta]`` of the continuous channels, then V/UV."""
        dyn = append_dynamic_features(self.static[:, :N_CONTINUOUS])
        return np.hstack([dyn, self.static[:, VUV:VUV + 1]])


ACOUSTIC_DIM = 3 * N_CONTINUOUS + 1


def _sentence(cfg: CorpusConfig, pool: int, index: int):
    rng = np.random.default_rng([cfg.seed, 1, pool, index])
    lo, hi = cfg.phones_per_utterance
    P = int(rng.integers(lo, hi + 1))
    classes = rng.integers(0, cfg.n_phone_classes, P)
    C = cfg.n_phone_classes
    feats = np.zeros((P, cfg.phone_dim))
    for p in range(P):
        feats[p, classes[p]] = 1.0
        if p > 0:
            feats[p, C + classes[p - 1]] = 1.0
        if p < P - 1:
            feats[p, 2 * C + classes[p + 1]] = 1.0
        feats[p, 3 * C] = p / max(P - 1, 1)
        feats[p, 3 * C + 1] = P / 10.0
    return classes, feats


def expand_to_frames(phone_feats: np.ndarray, durations: np.ndarray) -> np.ndarray:
    rows = []
    for feats, d in zip(phone_feats, durations):
        pos = (np.arange(d) + 0.5) / d
        timing = np.column_stack([pos, np.full(d, d / 20.0)])
        rows.append(np.hstack([np.repeat(feats[None, :], d, axis=0), timing]))
    return np.vstack(rows)


@dataclass
class Corpus:
    config: CorpusConfig
    utterances: List[Utterance]
    truth: GroundTruth = field(repr=False)

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def N(self) -> int:
        return self.config.N

    def cells(self) -> List[Cell]:
        seen = []
        for u in self.utterances:
            if u.cell not in seen:
                seen.append(u.cell)
        return seen

    def has_cell(self, cell: Cell) -> bool:
        return any(u.cell == cell for u in self.utterances)

    def utterances_in(self, cell: Cell) -> List[Utterance]:
        return [u for u in self.utterances if u.cell == cell]

    def emotion_label(self, emotion) -> str:
        return emotion_label(emotion, self.config.emotion_names)

    def parse_emotion(self, label):
        return parse_emotion(label, self.config.emotion_names)

    def pool_of(self, speaker: int) -> int:
        if self.config.separate_neutral_texts and speaker not in self.config.emotional_speakers:
            return 1
        return 0

    def factor_ids(self, emotion, speaker):
        return emotion_id(emotion, self.M), speaker_id(speaker, self.N)

    def save(self, directory) -> None:
        save_corpus(self, directory)


def corpus_cells(cfg: CorpusConfig) -> List[Cell]:
    cells: List[Cell] = []
    for spk in range(1, cfg.n_speakers + 1):
        cells.append((spk, NEUTRAL))
        if spk in cfg.emotional_speakers:
            cells.extend((spk, i) for i in range(1, cfg.M + 1))
    return cells


def _make_utterance(cfg: CorpusConfig, truth: GroundTruth, speaker: int, emotion, pool: int,
                    sentence: int) -> Utterance:
    classes, phone_feats = _sentence(cfg, pool, sentence)
    rng = np.random.default_rng([cfg.seed, 2, speaker, _emotion_key(emotion), pool, sentence])
    dur_real = truth.duration_mean(phone_feats, emotion, speaker)
    dur_real = dur_real + rng.normal(0.0, cfg.duration_noise, dur_real.shape) if cfg.duration_noise else dur_real
    durations = np.clip(np.rint(dur_real), 2, 30).astype(np.int64)
    frames = expand_to_frames(phone_feats, durations)
    cont = truth.acoustic_mean(frames, emotion, speaker)
    if cfg.noise:
        cont = cont + rng.normal(0.0, cfg.noise, cont.shape)
    vuv = np.repeat((classes < VOICED_CLASSES).astype(np.float64), durations)
    static = np.hstack([cont, vuv[:, None]])
    label = emotion_label(emotion, cfg.emotion_names)
    utt_id = f"spk{speaker:02d}_{label}_p{pool}_{sentence:04d}"
    return Utterance(utt_id, speaker, emotion, sentence, phone_feats, durations, frames, static, pool)


def generate_synthetic_corpus(cfg: CorpusConfig) -> Corpus:
    """Draw a corpus; fully determined by ``cfg`` (including its seed)."""
    cfg.validate()
    truth = GroundTruth(cfg)
    utts = []
    for speaker, emotion in corpus_cells(cfg):
        pool = 1 if cfg.separate_neutral_texts and speaker not in cfg.emotional_speakers else 0
        for sentence in range(cfg.utterances_per_cell):
            utts.append(_make_utterance(cfg, truth, speaker, emotion, pool, sentence))
    return Corpus(cfg, utts, truth)


# --- splitting -----------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: Tuple[float, float, float] = (90, 5, 5)
    seed: int = 0
    # held-out partitions are sized in whole blocks of sentences when large enough
    block: int = 5

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 100) > 1e-9:
            raise InvalidConfig(f"split ratios {self.ratios} must be three non-negative numbers summing to 100")
        if self.block < 1:
            raise InvalidConfig("block must be >= 1")

    def sizes(self, n: int) -> Tuple[int, int, int]:
        held = []
        for r in self.ratios[1:]:
            k = int(np.floor(n * r / 100 + 1e-9))
            if k >= self.block:
                k -= k % self.block
            held.append(k)
        n_train = n - sum(held)
        sizes = (n_train, held[0], held[1])
        for size, r, name in zip(sizes, self.ratios, ("train", "valid", "test")):
            if r > 0 and size <= 0:
                raise InvalidConfig(f"{name} partition of {n} sentences would be empty")
        return sizes


@dataclass
class Partitions:
    train: List[Utterance]
    valid: List[Utterance]
    test: List[Utterance]

    def of(self, name: str) -> List[Utterance]:
        return getattr(self, name)

    def membership(self) -> Dict[str, str]:
        out = {}
        for name in ("train", "valid", "test"):
            for u in self.of(name):
                out[u.utt_id] = name
        return out


def split_dataset(corpus: Corpus, spec: SplitSpec) -> Partitions:
    """Split by sentence so a sentence never spans partitions.

    All cells reading from one text pool share its sentences, so every cell
    is split in the same proportion.
    """
    by_pool: Dict[int, set] = {}
    for u in corpus.utterances:
        by_pool.setdefault(u.pool, set()).add(u.sentence)
    assignment = {}
    for pool, sentences in sorted(by_pool.items()):
        sentences = sorted(sentences)
        n_train, n_valid, _ = spec.sizes(len(sentences))
        order = np.random.default_rng([spec.seed, pool]).permutation(len(sentences))
        for rank, idx in enumerate(order):
            name = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
            assignment[(pool, sentences[idx])] = name
    parts = Partitions([], [], [])
    for u in corpus.utterances:
        parts.of(assignment[u.text]).append(u)
    return parts


# --- experiment configurations ------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    train_cells: List[Cell]
    eval_cells: List[Cell]

    def test_kind(self, cell: Cell, arch=None) -> str:
        from factored_tts.factor_encoding import Architecture

        if arch is not None and Architecture.parse(arch) is Architecture.SED:
            return "sed"
        return "closed" if cell in self.train_cells else "open"

    def validate(self, corpus: Corpus) -> None:
        if not self.train_cells:
            raise InvalidConfig(f"experiment {self.name!r} trains on no cells")
        for cell in list(self.train_cells) + list(self.eval_cells):
            if not corpus.has_cell(cell):
                raise InvalidConfig(f"experiment {self.name!r}: cell {cell_label(cell, corpus)} not in corpus")

    def to_dict(self, names: Sequence[str]) -> dict:
        def enc(cells):
            return [{"speaker": s, "emotion": emotion_label(e, names)} for s, e in cells]
        return {"name": self.name, "train": enc(self.train_cells), "evaluate": enc(self.eval_cells)}

    @classmethod
    def from_dict(cls, d, names: Sequence[str]) -> "ExperimentConfig":
        def dec(items):
            cells = []
            for item in items:
                try:
                    cells.append((int(item["speaker"]), parse_emotion(item["emotion"], names)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise InvalidConfig(f"bad cell entry {item!r}: {exc}") from None
            return cells
        if "train" not in d or "evaluate" not in d:
            raise InvalidConfig("experiment config needs 'train' and 'evaluate' lists")
        return cls(str(d.get("name", "experiment")), dec(d["train"]), dec(d["evaluate"]))

    def save(self, path, names: Sequence[str]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(names), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path, names: Sequence[str]) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh), names)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}: {exc}") from None


def cell_label(cell: Cell, corpus: Corpus) -> str:
    return f"speaker {cell[0]} / {corpus.emotion_label(cell[1])}"


def emotional_cells(corpus: Corpus, speaker: int) -> List[Cell]:
    return [c for c in corpus.cells() if c[0] == speaker and c[1] is not NEUTRAL]


def open_emotion_config(corpus: Corpus, speaker: int) -> ExperimentConfig:
    """Everything except the target speaker's emotional speech; evaluate those cells."""
    held = emotional_cells(corpus, speaker)
    if not held:
        raise InvalidConfig(f"speaker {speaker} has no emotional cells to hold out")
    train = [c for c in corpus.cells() if c not in held]
    return ExperimentConfig(f"open_spk{speaker}", train, held)


def closed_emotion_config(corpus: Corpus, speakers: Sequence[int]) -> ExperimentConfig:
    evals = [c for s in speakers for c in emotional_cells(corpus, s)]
    if not evals:
        raise InvalidConfig("no emotional cells to evaluate")
    return ExperimentConfig("closed_" + "_".join(f"spk{s}" for s in speakers), corpus.cells(), evals)


def sed_config(corpus: Corpus, speaker: int, emotion) -> ExperimentConfig:
    cell = (speaker, emotion)
    return ExperimentConfig(f"sed_spk{speaker}_{corpus.emotion_label(emotion)}", [cell], [cell])


# --- training views -------------------------------------------------------------

TASKS = ("duration", "acoustic")


def utterance_samples(corpus: Corpus, utts: Sequence[Utterance], task: str) -> Samples:
    if task not in TASKS:
        raise InvalidConfig(f"unknown task {task!r}")
    xs, es, ss, ys = [], [], [], []
    for u in utts:
        if task == "duration":
            x, y = u.phone_features, u.durations[:, None].astype(np.float64)
        else:
            x, y = u.frame_features, u.acoustic_targets()
        e, s = corpus.factor_ids(u.emotion, u.speaker)
        xs.append(x)
        ys.append(y)
        es.append(np.repeat(e[None, :], len(x), axis=0))
        ss.append(np.repeat(s[None, :], len(x), axis=0))
    if not xs:
        dim_x = corpus.config.phone_dim if task == "duration" else corpus.config.frame_dim
        dim_y = 1 if task == "duration" else ACOUSTIC_DIM
        return Samples(np.zeros((0, dim_x)), np.zeros((0, corpus.M)), np.zeros((0, corpus.N)),
                       np.zeros((0, dim_y)))
    return Samples(np.vstack(xs), np.vstack(es), np.vstack(ss), np.vstack(ys))


@dataclass
class TrainingView:
    train: Samples
    valid: Samples
    train_utterances: List[str]
    valid_utterances: List[str]


def assemble_training_view(corpus: Corpus, parts: Partitions, expcfg: ExperimentConfig,
                           task: str = "acoustic") -> TrainingView:
    """Training/validation samples drawn only from the included cells."""
    expcfg.validate(corpus)
    for cell in expcfg.eval_cells:
        if not any(u.cell == cell for u in parts.test):
            raise InvalidConfig(f"evaluation cell {cell_label(cell, corpus)} has an empty test partition")
    include = set(expcfg.train_cells)
    tr = [u for u in parts.train if u.cell in include]
    va = [u for u in parts.valid if u.cell in include]
    return TrainingView(utterance_samples(corpus, tr, task), utterance_samples(corpus, va, task),
                        [u.utt_id for u in tr], [u.utt_id for u in va])


def audit_training_view(corpus: Corpus, view: TrainingView, expcfg: ExperimentConfig) -> None:
    """Raise if any training utterance comes from a cell held out for open testing."""
    held = {c for c in expcfg.eval_cells if c not in expcfg.train_cells}
    by_id = {u.utt_id: u for u in corpus.utterances}
    for uid in view.train_utterances + view.valid_utterances:
        if by_id[uid].cell in held:
            raise InvalidConfig(f"utterance {uid} from held-out cell leaked into training")
    n_rows = sum(len(by_id[uid].phone_features if view.train.y.shape[1] == 1 else by_id[uid].frame_features)
                 for uid in view.train_utterances)
    if n_rows != len(view.train):
        raise InvalidConfig("training view rows do not match its utterance list")


# --- on-disk format ---------------------------------------------------------
#
# <dir>/manifest.json  generator config, dims, cells and the utterance list
# <dir>/utts/<id>.f64  little-endian float64, frame-major:
#     P rows of [phone features | duration] then T rows of [frame features | static]

MANIFEST_FORMAT = "factored-tts corpus v1"


def _write_record(path, u: Utterance) -> None:
    ph = np.hstack([u.phone_features, u.durations[:, None].astype(np.float64)])
    fr = np.hstack([u.frame_features, u.static])
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(ph, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(fr, dtype="<f8").tobytes())


def _read_record(path, n_phones, n_frames, phone_dim, frame_dim):
    raw = np.fromfile(path, dtype="<f8").astype(np.float64)
    expected = n_phones * (phone_dim + 1) + n_frames * (frame_dim + len(STATIC_CHANNELS))
    if raw.size != expected:
        raise InvalidConfig(f"{path}: expected {expected} values, found {raw.size}")
    ph = raw[:n_phones * (phone_dim + 1)].reshape(n_phones, phone_dim + 1)
    fr = raw[n_phones * (phone_dim + 1):].reshape(n_frames, frame_dim + len(STATIC_CHANNELS))
    return ph[:, :-1], ph[:, -1].astype(np.int64), fr[:, :frame_dim], fr[:, frame_dim:]


def save_corpus(corpus: Corpus, directory) -> None:
    directory = os.fspath(directory)
    os.makedirs(os.path.join(directory, "utts"), exist_ok=True)
    cfg = corpus.config
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": cfg.seed,
        "regime": cfg.regime,
        "dims": {"phone": cfg.phone_dim, "frame": cfg.frame_dim, "static": list(STATIC_CHANNELS)},
        "cells": [{"speaker": s, "emotion": corpus.emotion_label(e)} for s, e in corpus.cells()],
        "generator": cfg.to_dict(),
        "utterances": [],
    }
    for u in corpus.utterances:
        fname = f"utts/{u.utt_id}.f64"
        _write_record(os.path.join(directory, fname), u)
        manifest["utterances"].append({
            "id": u.utt_id, "speaker": u.speaker, "emotion": corpus.emotion_label(u.emotion),
            "pool": u.pool, "sentence": u.sentence, "n_phones": u.n_phones, "n_frames": u.n_frames, "file": fname,
        })
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_corpus(directory) -> Corpus:
    directory = os.fspath(directory)
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read corpus manifest {path}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise InvalidConfig(f"{path} is not a {MANIFEST_FORMAT} manifest")
    cfg = CorpusConfig.from_dict(manifest["generator"])
    utts = []
    for entry in manifest["utterances"]:
        ph, dur, fr, st = _read_record(os.path.join(directory, entry["file"]), entry["n_phones"],
                                       entry["n_frames"], cfg.phone_dim, cfg.frame_dim)
        utts.append(Utterance(entry["id"], int(entry["speaker"]), parse_emotion(entry["emotion"], cfg.emotion_names),
                              int(entry["sentence"]), ph, dur, fr, st, int(entry.get("pool", 0))))
    return Corpus(cfg, utts, GroundTruth(cfg))


def write_generated(directory, corpus: Corpus, generated: Dict[str, np.ndarray],
                    durations: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Store synthesized static tracks as a corpus directory of the same format."""
    out = []
    by_id = {u.utt_id: u for u in corpus.utterances}
    for uid, static in generated.items():
        u = by_id[uid]
        dur = u.durations if durations is None or uid not in durations else durations[uid]
        out.append(Utterance(uid, u.speaker, u.emotion, u.sentence, u.phone_features, np.asarray(dur),
                             u.frame_features if dur is u.durations else expand_to_frames(u.phone_features, dur),
                             np.asarray(static, dtype=np.float64), u.pool))
    save_corpus(Corpus(corpus.config, out, corpus.truth), directory)
