"""Phase-space reconstruction of per-cycle signals.

Each of the three signals is delay-embedded independently with lag ``tau``
and per-signal dimension ``r``; the embedded cycle stacks the voltage,
current and temperature blocks vertically into a ``3r x K'`` matrix with
``K' = K - (r - 1) * tau``. Lag selection uses the first minimum of
histogram mutual information, dimension selection the false-nearest-neighbor
fraction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .dataio import SIGNALS, CycleRecord
from .errors import ValidationError


@dataclass(frozen=True)
class EmbeddingConfig:
    tau: int
    r: int

    def validate(self, K: int | None = None) -> None:
        if self.tau < 1:
            raise ValidationError(f"tau must be >= 1, got {self.tau}")
        if self.r < 1:
            raise ValidationError(f"r must be >= 1, got {self.r}")
        if K is not None and (self.r - 1) * self.tau >= K:
            raise ValidationError(
                f"embedding exceeds series length: (r-1)*tau = {(self.r - 1) * self.tau} >= K = {K}"
            )

    def embedded_length(self, K: int) -> int:
        return K - (self.r - 1) * self.tau


@dataclass
class EmbeddedCycle:
    """Delay-embedded cycle; rows are the [V, I, T] blocks of r lags each."""

    cycle_index: int
    stage_id: int
    matrix: np.ndarray  # (J, K'), J = 3r
    capacity_ah: float | None = None

    @property
    def J(self) -> int:
        return self.matrix.shape[0]

    @property
    def K_prime(self) -> int:
        return self.matrix.shape[1]


def embed_signal(series: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Stack lagged copies of one series into an (r, K') matrix.

    Row d (0-based) is series[d*tau : d*tau + K'], so every column is an
    exact sub-vector of the input; no arithmetic is performed.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 1:
        raise ValidationError(f"embed_signal expects a 1-D series, got shape {series.shape}")
    K = series.size
    cfg.validate(K)
    Kp = cfg.embedded_length(K)
    return np.stack([series[d * cfg.tau : d * cfg.tau + Kp] for d in range(cfg.r)])


def embed_cycle(cycle: CycleRecord, cfg: EmbeddingConfig, stage_id: int = 0) -> EmbeddedCycle:
    """Embed all three signals and stack the blocks in [V, I, T] order."""
    blocks = [embed_signal(cycle.signal(name), cfg) for name in SIGNALS]
    return EmbeddedCycle(
        cycle_index=cycle.cycle_index,
        stage_id=stage_id,
        matrix=np.vstack(blocks),
        capacity_ah=cycle.capacity_ah,
    )


def _histogram_mi(x: np.ndarray, y: np.ndarray, bins: int) -> float:
    """Mutual information of two samples from an equal-width 2-D histogram."""
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    joint /= joint.sum()
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    denom = np.outer(px, py)[nz]
    return float(np.sum(joint[nz] * np.log(joint[nz] / denom)))


def mutual_information_curve(series: np.ndarray, max_lag: int) -> np.ndarray:
    """MI(lag) for lag = 1..max_lag with ceil(sqrt(K)) equal-width bins."""
    series = np.asarray(series, dtype=float)
    bins = math.ceil(math.sqrt(series.size))
    return np.array(
        [_histogram_mi(series[:-lag], series[lag:], bins) for lag in range(1, max_lag + 1)]
    )


def select_tau(series: np.ndarray, max_lag: int) -> int:
    """Lag at the first local minimum of mutual information.

    Falls back to the global minimizer when the curve has no interior local
    minimum; ties resolve toward the smaller lag.
    """
    series = np.asarray(series, dtype=float)
    if max_lag < 2:
        raise ValidationError(f"max_lag must be >= 2, got {max_lag}")
    if series.size < 4 * max_lag:
        raise ValidationError(
            f"series too short for lag selection: {series.size} < 4*max_lag = {4 * max_lag}"
        )
    mi = mutual_information_curve(series, max_lag)
    for idx in range(1, max_lag - 1):
        if mi[idx - 1] > mi[idx] <= mi[idx + 1]:
            return idx + 1
    return int(np.argmin(mi)) + 1


def fnn_fraction(series: np.ndarray, tau: int, r: int, ratio_threshold: float = 15.0) -> float:
    """False-nearest-neighbor fraction when growing the embedding from r to r+1.

    A neighbor pair is false when the extra (r+1)-th coordinate separates it
    by more than ``ratio_threshold`` times its r-dimensional distance.
    """
    cfg_next = EmbeddingConfig(tau=tau, r=r + 1)
    series = np.asarray(series, dtype=float)
    cfg_next.validate(series.size)
    # restrict to points that also exist in the (r+1)-dim embedding
    n = cfg_next.embedded_length(series.size)
    emb = embed_signal(series, EmbeddingConfig(tau=tau, r=r))[:, :n].T  # (n, r)
    extra = series[r * tau : r * tau + n]

    d2 = np.sum((emb[:, None, :] - emb[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(n), nn])
    gap = np.abs(extra - extra[nn])

    false = np.empty(n, dtype=bool)
    zero = dist == 0.0
    false[zero] = gap[zero] > 0.0
    false[~zero] = gap[~zero] / dist[~zero] > ratio_threshold
    return float(false.mean())


def select_r(
    series: np.ndarray,
    tau: int,
    max_r: int,
    ratio_threshold: float = 15.0,
    fraction_cutoff: float = 0.01,
) -> int:
    """Smallest r whose FNN fraction drops below the cutoff (max_r if none)."""
    if max_r < 2:
        raise ValidationError(f"max_r must be >= 2, got {max_r}")
    series = np.asarray(series, dtype=float)
    if EmbeddingConfig(tau=tau, r=max_r + 1).embedded_length(series.size) < 2:
        raise ValidationError(
            f"series too short for FNN up to r={max_r} with tau={tau}: length {series.size}"
        )
    for r in range(1, max_r):
        if fnn_fraction(series, tau, r, ratio_threshold) < fraction_cutoff:
            return r
    return max_r


# ---------------------------------------------------------------------------
# disk cache for embedded datasets
# ---------------------------------------------------------------------------

def save_embedded(cycles: list[EmbeddedCycle], cfg: EmbeddingConfig, path) -> None:
    doc = {
        "config": {"tau": cfg.tau, "r": cfg.r},
        "cycles": [
            {
                "cycle_index": c.cycle_index,
                "stage_id": c.stage_id,
                "capacity_ah": c.capacity_ah,
                "rows": c.matrix.tolist(),
            }
            for c in cycles
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_embedded(path) -> tuple[list[EmbeddedCycle], EmbeddingConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = EmbeddingConfig(tau=int(doc["config"]["tau"]), r=int(doc["config"]["r"]))
    cycles = [
        EmbeddedCycle(
            cycle_index=int(c["cycle_index"]),
            stage_id=int(c["stage_id"]),
            matrix=np.array(c["rows"], dtype=float),
            capacity_ah=c["capacity_ah"],
        )
        for c in doc["cycles"]
    ]
    return cycles, cfg
