"""Trajectory generation from static/dynamic means (MLPG) and GV variance scaling.

Feature layout follows :func:`factored_tts.corpus.append_dynamic_features`:
a ``T x 3K`` matrix holds ``[static | delta | delta-delta]`` column blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, solveh_banded

from factored_tts.corpus import DELTA_WINDOWS
from factored_tts.errors import DegenerateVariance, NumericalError, ShapeError


@dataclass
class TrajectoryDistribution:
    means: np.ndarray  # (T, 3K)
    variances: np.ndarray  # (T, 3K), diagonal

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.variances.ndim == 1:
            self.variances = np.broadcast_to(self.variances, self.means.shape).copy()
        if self.means.shape != self.variances.shape:
            raise ShapeError(f"means {self.means.shape} and variances {self.variances.shape} differ")
        if self.means.shape[1] % 3:
            raise ShapeError("feature dimension must be 3K (static, delta, delta-delta)")
        if not np.all(self.variances > 0):
            raise ShapeError("variances must be strictly positive")

    @property
    def n_static(self) -> int:
        return self.means.shape[1] // 3


def build_window_matrix(T: int, windows=DELTA_WINDOWS) -> sp.csr_matrix:
    """Sparse ``3T x T`` operator mapping a static track to interleaved features.

    Row ``3t + w`` applies window ``w`` at frame ``t``; out-of-range
    neighbours are replaced by the nearest edge frame.
    """
    if T < 1:
        raise ShapeError("need at least one frame")
    rows, cols, vals = [], [], []
    for t in range(T):
        for w, coeffs in enumerate(windows):
            half = len(coeffs) // 2
            for k, c in enumerate(coeffs):
                if c == 0:
                    continue
                rows.append(len(windows) * t + w)
                cols.append(min(max(t + k - half, 0), T - 1))
                vals.append(c)
    # duplicate (row, col) entries from edge replication are summed
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(windows) * T, T))


def _interleave(block: np.ndarray, k: int, K: int) -> np.ndarray:
    """Column k of each of the three blocks, interleaved frame by frame."""
    return block[:, [k, K + k, 2 * K + k]].reshape(-1)


def _to_lower_banded(P: sp.spmatrix, bandwidth: int) -> np.ndarray:
    T = P.shape[0]
    ab = np.zeros((bandwidth + 1, T))
    for d in range(bandwidth + 1):
        diag = P.diagonal(-d)
        ab[d, :T - d] = diag
    return ab


def mlpg(dist: TrajectoryDistribution, windows=DELTA_WINDOWS) -> np.ndarray:
    """Static trajectory maximising the likelihood of the dynamic-feature means.

    Per static dimension solves ``(W' U^-1 W) c = W' U^-1 m`` with a banded
    Cholesky factorisation.
    """
    T, K = dist.means.shape[0], dist.n_static
    W = build_window_matrix(T, windows)
    bandwidth = 2 * (max(len(c) for c in windows) // 2)
    out = np.empty((T, K))
    for k in range(K):
        m = _interleave(dist.means, k, K)
        prec = 1.0 / _interleave(dist.variances, k, K)
        WtU = W.T.multiply(prec[None, :]).tocsr()
        P = (WtU @ W).tocsr()
        r = WtU @ m
        try:
            out[:, k] = solveh_banded(_to_lower_banded(P, bandwidth), r, lower=True)
        except LinAlgError as exc:
            raise NumericalError(f"MLPG system for dimension {k} is not positive definite: {exc}") from None
    return out


def variance_scaling(traj, gv) -> np.ndarray:
    """Affinely rescale each dimension about its temporal mean to variance ``gv``."""
    x = np.asarray(traj, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    gv = np.atleast_1d(np.asarray(gv, dtype=np.float64))
    if gv.shape != (x.shape[1],):
        raise ShapeError(f"global variance has shape {gv.shape}, expected ({x.shape[1]},)")
    if not np.all(gv > 0):
        raise ShapeError("global variance entries must be strictly positive")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    if not np.all(var > 0):
        raise DegenerateVariance("cannot scale a dimension with zero temporal variance")
    y = np.sqrt(gv / var) * (x - mean) + mean
    return y[:, 0] if squeeze else y


def global_variance(trajectories) -> np.ndarray:
    """Average over utterances of the per-utterance temporal variance."""
    tracks = [np.asarray(t, dtype=np.float64).reshape(len(t), -1) for t in trajectories]
    if not tracks:
        raise DegenerateVariance("no trajectories to estimate a global variance from")
    gv = np.mean([t.var(axis=0) for t in tracks], axis=0)
    if not np.all(gv > 0):
        raise DegenerateVariance("global variance is zero in some dimension")
    return gv
