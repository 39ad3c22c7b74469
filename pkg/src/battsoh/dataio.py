"""Cycling-data ingestion, resampling, staging and normalization.

Raw telemetry arrives as long-format CSV rows (one sample per row) plus an
optional capacity-label CSV. Cycles are resampled onto a fixed-length uniform
time grid so that every downstream matrix has a common number of columns.
A seeded synthetic generator with a known source/mixing structure provides
ground truth for the subspace-learning tests.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

TELEMETRY_HEADER = ["battery_id", "cycle_index", "time_s", "voltage_v", "current_a", "temperature_c"]
LABELS_HEADER = ["battery_id", "cycle_index", "capacity_ah"]
STAGE_HEADER = ["battery_id", "stage_id", "first_cycle", "last_cycle"]

SIGNALS = ("voltage_v", "current_a", "temperature_c")


@dataclass
class CycleRecord:
    """One discharge cycle: three sampled signals plus an optional capacity label."""

    battery_id: str
    cycle_index: int
    time_s: np.ndarray
    voltage_v: np.ndarray
    current_a: np.ndarray
    temperature_c: np.ndarray
    capacity_ah: float | None = None

    def __post_init__(self):
        self.time_s = np.asarray(self.time_s, dtype=float)
        self.voltage_v = np.asarray(self.voltage_v, dtype=float)
        self.current_a = np.asarray(self.current_a, dtype=float)
        self.temperature_c = np.asarray(self.temperature_c, dtype=float)

    @property
    def n_samples(self) -> int:
        return self.time_s.size

    def signal(self, name: str) -> np.ndarray:
        if name not in SIGNALS:
            raise ValidationError(f"unknown signal {name!r}; expected one of {SIGNALS}")
        return getattr(self, name)

    def validate(self) -> None:
        n = self.time_s.size
        for name in SIGNALS:
            if self.signal(name).size != n:
                raise ValidationError(
                    f"battery {self.battery_id} cycle {self.cycle_index}: "
                    f"signal {name} has {self.signal(name).size} samples, expected {n}"
                )
        if n >= 2 and not np.all(np.diff(self.time_s) > 0):
            raise ValidationError(
                f"battery {self.battery_id} cycle {self.cycle_index}: time_s is not strictly increasing"
            )
        if self.capacity_ah is not None and not self.capacity_ah > 0:
            raise ValidationError(
                f"battery {self.battery_id} cycle {self.cycle_index}: capacity_ah must be > 0"
            )


@dataclass
class StageTable:
    """Contiguous cycle ranges per battery, one row per (battery, stage)."""

    entries: list[tuple[str, int, int, int]]  # (battery_id, stage_id, first_cycle, last_cycle)

    @property
    def n_stages(self) -> int:
        return max(e[1] for e in self.entries) if self.entries else 0

    def validate(self) -> None:
        per_battery: dict[str, list[tuple[str, int, int, int]]] = {}
        for entry in self.entries:
            battery_id, stage_id, first, last = entry
            if stage_id < 1:
                raise ValidationError(f"stage_id must be >= 1, got {stage_id}")
            if not 1 <= first <= last:
                raise ValidationError(
                    f"battery {battery_id} stage {stage_id}: bad range {first}-{last}"
                )
            per_battery.setdefault(battery_id, []).append(entry)
        for battery_id, rows in per_battery.items():
            rows = sorted(rows, key=lambda e: e[2])
            if rows[0][2] != 1:
                raise ValidationError(f"battery {battery_id}: stages must start at cycle 1")
            for prev, cur in zip(rows, rows[1:]):
                if cur[2] != prev[3] + 1:
                    raise ValidationError(
                        f"battery {battery_id}: stage ranges {prev[2]}-{prev[3]} and "
                        f"{cur[2]}-{cur[3]} are not contiguous"
                    )

    def stage_of(self, battery_id: str, cycle_index: int) -> int | None:
        for bid, stage_id, first, last in self.entries:
            if bid == battery_id and first <= cycle_index <= last:
                return stage_id
        return None

    def stage_ids(self) -> list[int]:
        return sorted({e[1] for e in self.entries})


@dataclass
class StageDataset:
    """All cycles assigned to one stage, resampled to a common length K."""

    stage_id: int
    cycles: list[CycleRecord]
    capacities: np.ndarray  # NaN where a cycle is unlabeled

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)

    def labeled(self) -> bool:
        return self.capacities.size > 0 and not np.any(np.isnan(self.capacities))


@dataclass
class NormalizationStats:
    """Per-signal z-score statistics fit on the training cycles of one stage."""

    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=dict(d["mean"]), std=dict(d["std"]))


def _read_csv_rows(path, expected_header):
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, expected header {','.join(expected_header)}")
        if header != expected_header:
            raise ValidationError(
                f"{path}: bad header {','.join(header)!r}, expected {','.join(expected_header)!r}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(expected_header)} fields, got {len(row)}"
                )
            rows.append((lineno, row))
    return rows


def _parse_float(path, lineno, name, text):
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: cannot parse {name}={text!r} as a number")
    if not math.isfinite(value):
        raise ValidationError(f"{path}:{lineno}: {name}={text!r} is not finite")
    return value


def _parse_int(path, lineno, name, text):
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: cannot parse {name}={text!r} as an integer")


def load_cycles(telemetry_path, labels_path=None) -> list[CycleRecord]:
    """Read long-format telemetry (and optional labels) into CycleRecords.

    Records come back grouped by (battery_id, cycle_index) with samples sorted
    by time; a non-monotone or duplicated timestamp raises a ValidationError
    naming the offending cycle.
    """
    rows = _read_csv_rows(telemetry_path, TELEMETRY_HEADER)
    grouped: dict[tuple[str, int], list[tuple[float, float, float, float]]] = {}
    order: list[tuple[str, int]] = []
    for lineno, row in rows:
        battery_id = row[0]
        cycle_index = _parse_int(telemetry_path, lineno, "cycle_index", row[1])
        if cycle_index < 1:
            raise ValidationError(f"{telemetry_path}:{lineno}: cycle_index must be >= 1")
        sample = tuple(
            _parse_float(telemetry_path, lineno, name, text)
            for name, text in zip(TELEMETRY_HEADER[2:], row[2:])
        )
        key = (battery_id, cycle_index)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(sample)

    labels: dict[tuple[str, int], float] = {}
    if labels_path is not None:
        for lineno, row in _read_csv_rows(labels_path, LABELS_HEADER):
            battery_id = row[0]
            cycle_index = _parse_int(labels_path, lineno, "cycle_index", row[1])
            capacity = _parse_float(labels_path, lineno, "capacity_ah", row[2])
            if capacity <= 0:
                raise ValidationError(f"{labels_path}:{lineno}: capacity_ah must be > 0")
            labels[(battery_id, cycle_index)] = capacity

    records = []
    for key in sorted(order):
        battery_id, cycle_index = key
        samples = sorted(grouped[key], key=lambda s: s[0])
        times = np.array([s[0] for s in samples])
        if np.any(np.diff(times) == 0):
            raise ValidationError(
                f"battery {battery_id} cycle {cycle_index}: duplicate time_s values"
            )
        if not np.all(np.diff(times) > 0):
            raise ValidationError(
                f"battery {battery_id} cycle {cycle_index}: time_s is not strictly increasing"
            )
        record = CycleRecord(
            battery_id=battery_id,
            cycle_index=cycle_index,
            time_s=times,
            voltage_v=np.array([s[1] for s in samples]),
            current_a=np.array([s[2] for s in samples]),
            temperature_c=np.array([s[3] for s in samples]),
            capacity_ah=labels.get(key),
        )
        record.validate()
        records.append(record)
    return records


def write_cycles(records, telemetry_path, labels_path=None) -> None:
    """Write CycleRecords back out in the canonical CSV schemas."""
    with open(telemetry_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TELEMETRY_HEADER)
        for rec in records:
            for k in range(rec.n_samples):
                writer.writerow(
                    [
                        rec.battery_id,
                        rec.cycle_index,
                        repr(float(rec.time_s[k])),
                        repr(float(rec.voltage_v[k])),
                        repr(float(rec.current_a[k])),
                        repr(float(rec.temperature_c[k])),
                    ]
                )
    if labels_path is not None:
        with open(labels_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(LABELS_HEADER)
            for rec in records:
                if rec.capacity_ah is not None:
                    writer.writerow([rec.battery_id, rec.cycle_index, repr(float(rec.capacity_ah))])


def load_stage_table(path) -> StageTable:
    entries = []
    for lineno, row in _read_csv_rows(path, STAGE_HEADER):
        entries.append(
            (
                row[0],
                _parse_int(path, lineno, "stage_id", row[1]),
                _parse_int(path, lineno, "first_cycle", row[2]),
                _parse_int(path, lineno, "last_cycle", row[3]),
            )
        )
    table = StageTable(entries=entries)
    table.validate()
    return table


def write_stage_table(table: StageTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(STAGE_HEADER)
        for entry in table.entries:
            writer.writerow(list(entry))


def resample_cycle(record: CycleRecord, K: int) -> CycleRecord:
    """Linearly interpolate each signal at K uniform times over the cycle span.

    Endpoints are preserved exactly, and a cycle already on the uniform
    K-point grid passes through unchanged (idempotence).
    """
    if K < 2:
        raise ValidationError(f"resample length K must be >= 2, got {K}")
    if record.n_samples < 2:
        raise ValidationError(
            f"battery {record.battery_id} cycle {record.cycle_index}: "
            f"needs >= 2 samples to resample, has {record.n_samples}"
        )
    grid = np.linspace(record.time_s[0], record.time_s[-1], K)
    if record.n_samples == K and np.array_equal(record.time_s, grid):
        return record
    return CycleRecord(
        battery_id=record.battery_id,
        cycle_index=record.cycle_index,
        time_s=grid,
        voltage_v=np.interp(grid, record.time_s, record.voltage_v),
        current_a=np.interp(grid, record.time_s, record.current_a),
        temperature_c=np.interp(grid, record.time_s, record.temperature_c),
        capacity_ah=record.capacity_ah,
    )


def partition_stages(records, table: StageTable, K: int) -> dict[int, StageDataset]:
    """Resample cycles to length K and group them by stage, in cycle order."""
    table.validate()
    orphans = [
        (rec.battery_id, rec.cycle_index)
        for rec in records
        if table.stage_of(rec.battery_id, rec.cycle_index) is None
    ]
    if orphans:
        listing = ", ".join(f"{b}#{c}" for b, c in orphans[:20])
        raise ValidationError(f"{len(orphans)} cycle(s) not covered by the stage table: {listing}")

    buckets: dict[int, list[CycleRecord]] = {sid: [] for sid in table.stage_ids()}
    for rec in sorted(records, key=lambda r: (r.battery_id, r.cycle_index)):
        stage_id = table.stage_of(rec.battery_id, rec.cycle_index)
        buckets[stage_id].append(resample_cycle(rec, K))

    datasets = {}
    for stage_id, cycles in buckets.items():
        capacities = np.array(
            [c.capacity_ah if c.capacity_ah is not None else np.nan for c in cycles]
        )
        datasets[stage_id] = StageDataset(stage_id=stage_id, cycles=cycles, capacities=capacities)
    return datasets


def zscore_fit(train: StageDataset) -> NormalizationStats:
    """Pool the training cycles of one stage and fit per-signal mean/std."""
    if train.n_cycles < 2:
        raise ValidationError(
            f"stage {train.stage_id}: z-score fit needs >= 2 cycles, got {train.n_cycles}"
        )
    mean, std = {}, {}
    for name in SIGNALS:
        pooled = np.concatenate([c.signal(name) for c in train.cycles])
        mu = float(pooled.mean())
        sigma = float(pooled.std())
        if sigma <= 0.0:
            raise ValidationError(
                f"stage {train.stage_id}: signal {name} is constant over the training "
                f"cycles; z-score std would be zero"
            )
        mean[name], std[name] = mu, sigma
    return NormalizationStats(mean=mean, std=std)


def zscore_apply(stats: NormalizationStats, record: CycleRecord) -> CycleRecord:
    """Return a normalized copy of one cycle; deterministic and stateless."""
    return CycleRecord(
        battery_id=record.battery_id,
        cycle_index=record.cycle_index,
        time_s=record.time_s.copy(),
        voltage_v=(record.voltage_v - stats.mean["voltage_v"]) / stats.std["voltage_v"],
        current_a=(record.current_a - stats.mean["current_a"]) / stats.std["current_a"],
        temperature_c=(record.temperature_c - stats.mean["temperature_c"]) / stats.std["temperature_c"],
        capacity_ah=record.capacity_ah,
    )


# ---------------------------------------------------------------------------
# synthetic data with a known stationary/drifting source split
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs for the seeded synthetic degradation generator.

    ``mixing_seed`` pins the mixing matrix independently of the noise seed so
    that a "target battery" can share the source's structure;
    ``consistency_shift`` (a constant added to the stationary sources) and
    ``capacity_offset`` model a manufacturing difference that moves the
    consistent features and the capacity level without touching the drift.
    """

    n_cycles: int = 100
    K: int = 128
    J: int = 3
    s_true: int = 1
    drift_amplitude: float = 1.0
    capacity_start: float = 2.0
    capacity_drop: float = 0.6
    capacity_noise: float = 0.002
    battery_id: str = "SYN"
    mixing_seed: int | None = None
    consistency_shift: float = 0.0
    capacity_offset: float = 0.0

    def validate(self) -> None:
        if self.n_cycles < 2:
            raise ValidationError("synthetic n_cycles must be >= 2")
        if self.K < 2:
            raise ValidationError("synthetic K must be >= 2")
        if self.J < 1:
            raise ValidationError("synthetic J must be >= 1")
        if not 0 < self.s_true < self.J:
            raise ValidationError(
                f"s_true must satisfy 0 < s_true < J, got s_true={self.s_true}, J={self.J}"
            )


def drift_schedule(cfg: SyntheticConfig) -> np.ndarray:
    """Per-cycle drift magnitude: a monotone ramp scaled by the amplitude."""
    ramp = np.arange(cfg.n_cycles) / (cfg.n_cycles - 1)
    return cfg.drift_amplitude * ramp


def random_orthogonal(J: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded random orthogonal matrix (QR with positive diagonal sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((J, J)))
    return q * np.sign(np.diag(r))


def _standardize_rows(z: np.ndarray) -> np.ndarray:
    # exact per-row sample mean 0 / std 1 so schedules are recovered exactly
    mu = z.mean(axis=1, keepdims=True)
    sd = z.std(axis=1, keepdims=True)
    return (z - mu) / sd


def synthetic_latent_cycles(cfg: SyntheticConfig, seed: int):
    """Generate mixed J-dimensional cycle matrices with known ground truth.

    The first ``s_true`` latent sources are stationary across cycles; the rest
    drift in mean and standard deviation along the schedule. Returns
    (list of J x K matrices, capacities, mixing matrix, schedule).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    if cfg.mixing_seed is None:
        mixing = random_orthogonal(cfg.J, rng)
    else:
        mixing = random_orthogonal(cfg.J, np.random.default_rng(cfg.mixing_seed))
    schedule = drift_schedule(cfg)
    n_drift = cfg.J - cfg.s_true
    # alternate-sign unit coefficients keep the drifting rows distinguishable
    mean_coef = np.array([(-1.0) ** j for j in range(n_drift)])
    std_coef = np.array([0.5 + 0.5 * (j % 2) for j in range(n_drift)])

    matrices = []
    for i in range(cfg.n_cycles):
        z = _standardize_rows(rng.standard_normal((cfg.J, cfg.K)))
        z[: cfg.s_true] += cfg.consistency_shift
        drift = z[cfg.s_true:]
        drift *= (1.0 + std_coef * schedule[i])[:, None]
        drift += (mean_coef * schedule[i])[:, None]
        matrices.append(mixing @ z)

    noise = rng.standard_normal(cfg.n_cycles)
    ramp = np.arange(cfg.n_cycles) / (cfg.n_cycles - 1)
    capacities = (
        cfg.capacity_start + cfg.capacity_offset
        - cfg.capacity_drop * ramp + cfg.capacity_noise * noise
    )
    return matrices, capacities, mixing, schedule


def generate_synthetic(cfg: SyntheticConfig, seed: int):
    """Emit synthetic CycleRecords (J must be 3: one latent per signal).

    Returns (records, truth) where truth carries the mixing matrix and the
    drift schedule for downstream oracle checks.
    """
    if cfg.J != 3:
        raise ValidationError(
            "generate_synthetic maps latent channels onto (voltage, current, temperature) "
            f"and therefore requires J=3; got J={cfg.J}. Use synthetic_latent_cycles for other J."
        )
    matrices, capacities, mixing, schedule = synthetic_latent_cycles(cfg, seed)
    times = np.arange(cfg.K, dtype=float)
    records = []
    for i, x in enumerate(matrices):
        records.append(
            CycleRecord(
                battery_id=cfg.battery_id,
                cycle_index=i + 1,
                time_s=times.copy(),
                voltage_v=x[0],
                current_a=x[1],
                temperature_c=x[2],
                capacity_ah=float(capacities[i]),
            )
        )
    truth = {
        "mixing_matrix": mixing.tolist(),
        "drift_schedule": schedule.tolist(),
        "s_true": cfg.s_true,
        "seed": seed,
    }
    return records, truth


def write_synthetic_truth(truth: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
