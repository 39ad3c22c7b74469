"""End-to-end orchestration: config, source fitting, transfer, reports.

A run is fully determined by (config document, seed, data): sub-seeds are
derived per stage and role, artifacts are canonical JSON, and the run
directory name is a hash of config + seed. Wall-clock timings go to a
separate timings.json so the deterministic artifacts stay byte-identical
across repeated runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np

from . import cdl, dataio, estimators, psr, transfer
from .errors import ValidationError

SCHEMA_VERSION = 1


def derive_seed(base: int, *key: int) -> int:
    """Stable per-(stage, role) sub-seed from the run seed."""
    parts = [int(base)] + [int(k) for k in key]
    return int(np.random.SeedSequence(entropy=parts).generate_state(1)[0])


def canonical_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(doc))


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class _Section:
    """Strict dict reader: every key must be consumed, typos are fatal."""

    def __init__(self, doc: dict, where: str):
        if not isinstance(doc, dict):
            raise ValidationError(f"config section {where} must be an object")
        self._doc = dict(doc)
        self._where = where

    def take(self, key, default=..., kind=None):
        if key in self._doc:
            value = self._doc.pop(key)
        elif default is not ...:
            value = default
        else:
            raise ValidationError(f"config: missing required key {self._where}.{key}")
        if kind is not None and value is not None and not isinstance(value, kind):
            raise ValidationError(
                f"config: {self._where}.{key} has type {type(value).__name__}, expected {kind}"
            )
        return value

    def section(self, key, required=True):
        raw = self.take(key, default=None if not required else ...)
        if raw is None:
            return None
        return _Section(raw, f"{self._where}.{key}")

    def finish(self) -> None:
        if self._doc:
            raise ValidationError(
                f"config: unknown key(s) in {self._where}: {sorted(self._doc)}"
            )


@dataclass
class DataPaths:
    telemetry: str
    labels: str | None
    stage_table: str
    battery_id: str | None
    rated_capacity_ah: float


@dataclass
class EmbeddingSettings:
    tau: int | str
    r: int | str
    max_lag: int = 20
    max_r: int = 8


@dataclass
class TransferSettings:
    alpha: float = 0.05
    first_cycles: int = 10
    compensation_hidden: int = 50
    compensation_epochs: int = 1500
    compensation_lr: float = 1e-2
    compensation_weight_decay: float = 1e-2
    target: DataPaths | None = None


@dataclass
class PipelineConfig:
    data: DataPaths
    resample_length: int
    embedding: EmbeddingSettings
    consistency_dim: int | None
    sweep: list[int] | None
    train_fraction: float
    backbone_threshold: int
    train_default: dict
    train_per_stage: dict[int, dict]
    transfer: TransferSettings
    seed: int
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()


def _parse_data_section(sec: _Section) -> DataPaths:
    paths = DataPaths(
        telemetry=sec.take("telemetry", kind=str),
        labels=sec.take("labels", default=None),
        stage_table=sec.take("stage_table", kind=str),
        battery_id=sec.take("battery_id", default=None),
        rated_capacity_ah=float(sec.take("rated_capacity_ah", default=2.0, kind=(int, float))),
    )
    sec.finish()
    if paths.rated_capacity_ah <= 0:
        raise ValidationError("config: rated_capacity_ah must be > 0")
    return paths


_TRAIN_KEYS = {
    "epochs", "learning_rate", "lstm_hidden", "lstm_fc",
    "temcap_filters", "temcap_kernel", "temcap_strides", "temcap_capsule_dim",
    "temcap_advanced_count", "temcap_advanced_dim", "temcap_trl_hidden",
    "temcap_window", "temcap_routing_iters",
}


def _check_train_keys(doc: dict, where: str) -> dict:
    unknown = set(doc) - _TRAIN_KEYS
    if unknown:
        raise ValidationError(f"config: unknown key(s) in {where}: {sorted(unknown)}")
    return dict(doc)


def load_config(path) -> PipelineConfig:
    raw = read_json(path)
    root = _Section(raw, "<root>")
    if root.take("schema_version", kind=int) != SCHEMA_VERSION:
        raise ValidationError(f"config schema_version must be {SCHEMA_VERSION}")

    data = _parse_data_section(root.section("data"))

    emb_sec = root.section("embedding", required=False)
    if emb_sec is None:
        embedding = EmbeddingSettings(tau=3, r=3)
    else:
        embedding = EmbeddingSettings(
            tau=emb_sec.take("tau", default=3),
            r=emb_sec.take("r", default=3),
            max_lag=emb_sec.take("max_lag", default=20, kind=int),
            max_r=emb_sec.take("max_r", default=8, kind=int),
        )
        emb_sec.finish()
    for name, value in (("tau", embedding.tau), ("r", embedding.r)):
        if not (value == "auto" or (isinstance(value, int) and value >= 1)):
            raise ValidationError(f"config: embedding.{name} must be a positive integer or 'auto'")

    consistency_dim = root.take("consistency_dim", default=None)
    sweep = root.take("sweep_consistency_dims", default=None)
    if consistency_dim is None and sweep is None:
        raise ValidationError("config: need consistency_dim or sweep_consistency_dims")

    train_sec = root.section("train", required=False)
    train_default: dict = {}
    train_per_stage: dict[int, dict] = {}
    if train_sec is not None:
        train_default = _check_train_keys(train_sec.take("default", default={}, kind=dict), "train.default")
        for key, value in train_sec.take("per_stage", default={}, kind=dict).items():
            train_per_stage[int(key)] = _check_train_keys(value, f"train.per_stage.{key}")
        train_sec.finish()

    tr_sec = root.section("transfer", required=False)
    if tr_sec is None:
        tsettings = TransferSettings()
    else:
        comp_sec = tr_sec.section("compensation", required=False)
        if comp_sec is None:
            hidden, ep, lr, wd = 50, 1500, 1e-2, 1e-2
        else:
            hidden = comp_sec.take("hidden", default=50, kind=int)
            ep = comp_sec.take("epochs", default=1500, kind=int)
            lr = float(comp_sec.take("learning_rate", default=1e-2, kind=(int, float)))
            wd = float(comp_sec.take("weight_decay", default=1e-2, kind=(int, float)))
            comp_sec.finish()
        target_sec = tr_sec.section("target", required=False)
        target = _parse_data_section(target_sec) if target_sec is not None else None
        tsettings = TransferSettings(
            alpha=float(tr_sec.take("alpha", default=0.05, kind=(int, float))),
            first_cycles=tr_sec.take("first_cycles", default=10, kind=int),
            compensation_hidden=hidden,
            compensation_epochs=ep,
            compensation_lr=lr,
            compensation_weight_decay=wd,
            target=target,
        )
        tr_sec.finish()
    if not 0.0 < tsettings.alpha < 1.0:
        raise ValidationError("config: transfer.alpha must lie in (0, 1)")
    if tsettings.first_cycles < 1:
        raise ValidationError("config: transfer.first_cycles must be >= 1")

    cfg = PipelineConfig(
        data=data,
        resample_length=root.take("resample_length", default=128, kind=int),
        embedding=embedding,
        consistency_dim=consistency_dim,
        sweep=sweep,
        train_fraction=float(root.take("train_fraction", default=0.70, kind=(int, float))),
        backbone_threshold=root.take("backbone_threshold", default=50, kind=int),
        train_default=train_default,
        train_per_stage=train_per_stage,
        transfer=tsettings,
        seed=root.take("seed", default=0, kind=int),
        output_dir=root.take("output_dir", default="out", kind=str),
        raw=raw,
    )
    root.finish()
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ValidationError("config: train_fraction must lie in (0, 1)")
    if cfg.resample_length < 2:
        raise ValidationError("config: resample_length must be >= 2")
    return cfg


def check_paths(cfg: PipelineConfig, include_target: bool = False) -> None:
    paths = [cfg.data.telemetry, cfg.data.stage_table]
    if cfg.data.labels:
        paths.append(cfg.data.labels)
    if include_target:
        if cfg.transfer.target is None:
            raise ValidationError("config: transfer.target section is required for transfer runs")
        paths += [cfg.transfer.target.telemetry, cfg.transfer.target.stage_table]
        if cfg.transfer.target.labels:
            paths.append(cfg.transfer.target.labels)
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise ValidationError(f"config: missing input file(s): {missing}")


def make_train_config(cfg: PipelineConfig, stage_id: int, seed: int) -> estimators.TrainConfig:
    doc = dict(cfg.train_default)
    doc.update(cfg.train_per_stage.get(stage_id, {}))
    temcap = estimators.TemCapSpec(
        filters=doc.get("temcap_filters", 32),
        kernel_size=tuple(doc.get("temcap_kernel", (1, 2))),
        strides=tuple(doc.get("temcap_strides", (1, 2))),
        capsule_dim=doc.get("temcap_capsule_dim", 4),
        advanced_count=doc.get("temcap_advanced_count", 4),
        advanced_dim=doc.get("temcap_advanced_dim", 8),
        trl_hidden=doc.get("temcap_trl_hidden", 16),
        window=doc.get("temcap_window", 5),
        routing_iters=doc.get("temcap_routing_iters", 3),
    )
    return estimators.TrainConfig(
        epochs=doc.get("epochs", 300),
        learning_rate=doc.get("learning_rate", 1e-3),
        seed=seed,
        lstm_hidden=tuple(doc.get("lstm_hidden", (30,))),
        lstm_fc=tuple(doc.get("lstm_fc", ())),
        temcap=temcap,
    )


# ---------------------------------------------------------------------------
# shared per-stage preparation
# ---------------------------------------------------------------------------

def _select_battery(records, wanted: str | None, what: str) -> tuple[list, str]:
    batteries = sorted({r.battery_id for r in records})
    if wanted is None:
        if len(batteries) != 1:
            raise ValidationError(
                f"{what}: telemetry holds batteries {batteries}; set data.battery_id"
            )
        wanted = batteries[0]
    elif wanted not in batteries:
        raise ValidationError(f"{what}: battery {wanted!r} not found (have {batteries})")
    return [r for r in records if r.battery_id == wanted], wanted


def resolve_embedding(cfg: PipelineConfig, sample_cycle) -> psr.EmbeddingConfig:
    """Fix tau/r, running the selection heuristics when set to 'auto'."""
    series = sample_cycle.voltage_v
    tau = cfg.embedding.tau
    if tau == "auto":
        tau = psr.select_tau(series, cfg.embedding.max_lag)
    r = cfg.embedding.r
    if r == "auto":
        r = psr.select_r(series, tau, cfg.embedding.max_r)
    emb = psr.EmbeddingConfig(tau=int(tau), r=int(r))
    emb.validate(cfg.resample_length)
    return emb


def _split_count(n: int, fraction: float) -> int:
    n_train = int(math.floor(n * fraction))
    return min(max(n_train, 2), n - 1)


@dataclass
class StagePrepared:
    stage_id: int
    n_train: int
    stats: dataio.NormalizationStats
    embedded: list[psr.EmbeddedCycle]
    capacities: np.ndarray
    cycle_indices: list[int]


def prepare_stage(dataset: dataio.StageDataset, emb: psr.EmbeddingConfig, fraction: float) -> StagePrepared:
    n = dataset.n_cycles
    if n < 3:
        raise ValidationError(f"stage {dataset.stage_id}: needs >= 3 cycles, got {n}")
    n_train = _split_count(n, fraction)
    train_ds = dataio.StageDataset(
        stage_id=dataset.stage_id,
        cycles=dataset.cycles[:n_train],
        capacities=dataset.capacities[:n_train],
    )
    stats = dataio.zscore_fit(train_ds)
    normalized = [dataio.zscore_apply(stats, c) for c in dataset.cycles]
    embedded = [psr.embed_cycle(c, emb, stage_id=dataset.stage_id) for c in normalized]
    return StagePrepared(
        stage_id=dataset.stage_id,
        n_train=n_train,
        stats=stats,
        embedded=embedded,
        capacities=dataset.capacities,
        cycle_indices=[c.cycle_index for c in dataset.cycles],
    )


def _stage_predictions(est: estimators.TrainedEstimator, splits) -> dict[int, float]:
    """Prediction per position index; temcap starts once a full window exists."""
    preds: dict[int, float] = {}
    if est.backbone == "lstm":
        if splits:
            x = estimators.lstm.stack_cycles([s.S_d for s in splits])
            values, _ = est.model.forward(x)
            preds = {i: float(v) for i, v in enumerate(values)}
    else:
        L = est.config.temcap.window
        mats = [s.S_d for s in splits]
        ends = [i for i in range(len(splits)) if i >= L - 1]
        if ends:
            values, _ = est.model.forward_windows(mats, ends)
            preds = {i: float(v) for i, v in zip(ends, values)}
    return preds


def _pairs(preds: dict[int, float], prepared: StagePrepared, positions) -> list[list]:
    rows = []
    for i in positions:
        if i in preds and np.isfinite(prepared.capacities[i]):
            rows.append(
                [prepared.cycle_indices[i], float(prepared.capacities[i]), preds[i]]
            )
    return rows


def _rmse_from_pairs(pairs, rated: float) -> float | None:
    if not pairs:
        return None
    truths = [p[1] for p in pairs]
    preds = [p[2] for p in pairs]
    return transfer.rmse_soh(preds, truths, rated)


# ---------------------------------------------------------------------------
# fit-source
# ---------------------------------------------------------------------------

def run_fit_source(cfg: PipelineConfig, seed: int, run_dir: str) -> dict:
    """Fit the per-stage source bundle and write models + report under run_dir."""
    check_paths(cfg)
    records = dataio.load_cycles(cfg.data.telemetry, cfg.data.labels)
    records, battery_id = _select_battery(records, cfg.data.battery_id, "fit-source")
    table = dataio.load_stage_table(cfg.data.stage_table)
    datasets = dataio.partition_stages(records, table, cfg.resample_length)

    sample = datasets[min(datasets)].cycles[0]
    emb = resolve_embedding(cfg, sample)

    models_dir = os.path.join(run_dir, "models")
    reports_dir = os.path.join(run_dir, "reports")
    os.makedirs(models_dir)
    os.makedirs(reports_dir)

    stage_reports = []
    components = {}
    timings = {}
    bundle_stages = []
    for stage_id in sorted(datasets):
        t0 = time.perf_counter()
        dataset = datasets[stage_id]
        if np.any(np.isnan(dataset.capacities)):
            raise ValidationError(f"stage {stage_id}: fit-source needs capacity labels for every cycle")
        prepared = prepare_stage(dataset, emb, cfg.train_fraction)
        n_train = prepared.n_train

        S = cfg.consistency_dim
        sweep_rows = None
        if S is None:
            opts = cdl.CdlOptions(seed=derive_seed(seed, stage_id, 0))
            sweep_rows = cdl.sweep_S(prepared.embedded[:n_train], cfg.sweep, opts)
            S = min(sweep_rows, key=lambda row: (row["objective"], row["S"]))["S"]
        subspace = cdl.fit_cdl(
            prepared.embedded[:n_train],
            int(S),
            cdl.CdlOptions(seed=derive_seed(seed, stage_id, 0)),
        )
        splits = [cdl.transform(subspace, e) for e in prepared.embedded]
        limit = transfer.fit_control_limit(
            splits[:n_train], alpha=cfg.transfer.alpha, stage_id=stage_id
        )

        backbone = estimators.select_backbone(n_train, cfg.backbone_threshold)
        train_cfg = make_train_config(cfg, stage_id, derive_seed(seed, stage_id, 1))
        pairs = [(splits[i], float(prepared.capacities[i])) for i in range(n_train)]
        est = estimators.train(backbone, pairs, train_cfg, stage_id=stage_id)

        preds = _stage_predictions(est, splits)
        train_pairs = _pairs(preds, prepared, range(n_train))
        test_pairs = _pairs(preds, prepared, range(n_train, len(splits)))
        rated = cfg.data.rated_capacity_ah

        stage_report = {
            "stage_id": stage_id,
            "backbone": backbone,
            "n_cycles": dataset.n_cycles,
            "n_train": n_train,
            "consistency_dim": int(S),
            "subspace_objective": subspace.objective,
            "subspace_converged": subspace.converged,
            "control_limit": limit.cl,
            "rmse_train_pct": _rmse_from_pairs(train_pairs, rated),
            "rmse_test_pct": _rmse_from_pairs(test_pairs, rated),
            "final_training_loss": est.loss_trace[-1],
            "train_pairs": train_pairs,
            "test_pairs": test_pairs,
        }
        if sweep_rows is not None:
            stage_report["sweep"] = sweep_rows
        stage_reports.append(stage_report)

        components[str(stage_id)] = {
            "n_train": n_train,
            "cycle_indices": prepared.cycle_indices,
            "consistency": [transfer.consistency_vector(s).tolist() for s in splits],
            "discrepancy": [s.S_d.mean(axis=1).tolist() for s in splits],
        }

        cdl.save_subspace(subspace, os.path.join(models_dir, f"stage{stage_id}.subspace.json"))
        estimators.save_estimator(est, os.path.join(models_dir, f"stage{stage_id}.estimator.json"))
        transfer.save_json(
            transfer.control_limit_to_dict(limit),
            os.path.join(models_dir, f"stage{stage_id}.control_limit.json"),
        )
        write_json(
            {"schema_version": SCHEMA_VERSION, "stage_id": stage_id, **prepared.stats.to_dict()},
            os.path.join(models_dir, f"stage{stage_id}.normalization.json"),
        )
        bundle_stages.append(stage_id)
        timings[str(stage_id)] = time.perf_counter() - t0

    bundle = {
        "schema_version": SCHEMA_VERSION,
        "battery_id": battery_id,
        "stage_ids": bundle_stages,
        "resample_length": cfg.resample_length,
        "embedding": {"tau": emb.tau, "r": emb.r},
        "rated_capacity_ah": cfg.data.rated_capacity_ah,
        "train_fraction": cfg.train_fraction,
        "seed": seed,
        "config_hash": cfg.config_hash(),
    }
    write_json(bundle, os.path.join(models_dir, "bundle.json"))

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "source",
        "battery_id": battery_id,
        "rated_capacity_ah": cfg.data.rated_capacity_ah,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "embedding": {"tau": emb.tau, "r": emb.r},
        "stages": stage_reports,
    }
    write_json(report, os.path.join(reports_dir, "report.json"))
    write_json(components, os.path.join(reports_dir, "components.json"))
    write_json({"seconds_per_stage": timings}, os.path.join(reports_dir, "timings.json"))
    return report


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------

def load_bundle(bundle_dir: str) -> dict:
    models_dir = os.path.join(bundle_dir, "models")
    if not os.path.isdir(models_dir):
        models_dir = bundle_dir  # allow pointing straight at the models directory
    manifest_path = os.path.join(models_dir, "bundle.json")
    if not os.path.exists(manifest_path):
        raise ValidationError(f"no bundle.json under {bundle_dir!r}")
    manifest = read_json(manifest_path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError("bundle schema_version mismatch")
    stages = {}
    for stage_id in manifest["stage_ids"]:
        stats_doc = read_json(os.path.join(models_dir, f"stage{stage_id}.normalization.json"))
        stages[stage_id] = {
            "subspace": cdl.load_subspace(os.path.join(models_dir, f"stage{stage_id}.subspace.json")),
            "estimator": estimators.load_estimator(
                os.path.join(models_dir, f"stage{stage_id}.estimator.json")
            ),
            "control_limit": transfer.control_limit_from_dict(
                transfer.load_json(os.path.join(models_dir, f"stage{stage_id}.control_limit.json"))
            ),
            "normalization": dataio.NormalizationStats.from_dict(stats_doc),
        }
    return {"manifest": manifest, "stages": stages}


def run_transfer(cfg: PipelineConfig, bundle_dir: str, seed: int, run_dir: str) -> dict:
    """Apply a source bundle to a target battery, gating per-stage compensation."""
    check_paths(cfg, include_target=True)
    bundle = load_bundle(bundle_dir)
    manifest = bundle["manifest"]
    target_cfg = cfg.transfer.target
    records = dataio.load_cycles(target_cfg.telemetry, target_cfg.labels)
    records, battery_id = _select_battery(records, target_cfg.battery_id, "transfer")
    table = dataio.load_stage_table(target_cfg.stage_table)
    K = manifest["resample_length"]
    emb = psr.EmbeddingConfig(tau=manifest["embedding"]["tau"], r=manifest["embedding"]["r"])
    datasets = dataio.partition_stages(records, table, K)

    models_dir = os.path.join(run_dir, "models")
    reports_dir = os.path.join(run_dir, "reports")
    os.makedirs(models_dir)
    os.makedirs(reports_dir)

    rated = manifest["rated_capacity_ah"]
    T = cfg.transfer.first_cycles
    stage_reports = []
    timings = {}
    for stage_id in sorted(datasets):
        t0 = time.perf_counter()
        if stage_id not in bundle["stages"]:
            raise ValidationError(f"target stage {stage_id} has no model in the source bundle")
        pieces = bundle["stages"][stage_id]
        dataset = datasets[stage_id]
        normalized = [dataio.zscore_apply(pieces["normalization"], c) for c in dataset.cycles]
        embedded = [psr.embed_cycle(c, emb, stage_id=stage_id) for c in normalized]
        splits = [cdl.transform(pieces["subspace"], e) for e in embedded]
        capacities = dataset.capacities

        n_check = min(T, len(splits))
        decision = transfer.similarity_check(pieces["control_limit"], splits[:n_check])

        compensation = None
        if decision["decision"] == "compensate":
            head = capacities[:n_check]
            if np.any(np.isnan(head)) or len(head) < 2:
                raise ValidationError(
                    f"stage {stage_id}: drift declared, so the first {T} target cycles "
                    f"must carry capacity labels for compensation fitting"
                )
            comp_cfg = transfer.CompensationConfig(
                hidden=cfg.transfer.compensation_hidden,
                epochs=cfg.transfer.compensation_epochs,
                learning_rate=cfg.transfer.compensation_lr,
                weight_decay=cfg.transfer.compensation_weight_decay,
                seed=derive_seed(seed, stage_id, 2),
            )
            compensation = transfer.fit_compensation(
                pieces["estimator"], splits[:n_check], list(head), comp_cfg
            )
            transfer.save_json(
                transfer.compensation_to_dict(compensation),
                os.path.join(models_dir, f"stage{stage_id}.compensation.json"),
            )

        stage_tr = transfer.StageTransfer(
            stage_id=stage_id,
            subspace=pieces["subspace"],
            estimator=pieces["estimator"],
            control_limit=pieces["control_limit"],
            decision=decision,
            compensation=compensation,
        )

        est = pieces["estimator"]
        raw_preds = _stage_predictions(est, splits)
        eval_positions = [i for i in sorted(raw_preds) if i >= n_check]
        rows = []
        for i in eval_positions:
            q_src = raw_preds[i]
            q_hat = q_src
            if compensation is not None:
                q_hat = q_src - compensation.predict_error(splits[i].S_d)
            truth = float(capacities[i]) if np.isfinite(capacities[i]) else None
            rows.append([dataset.cycles[i].cycle_index, truth, q_hat, q_src])

        labeled = [r for r in rows if r[1] is not None]
        rmse = transfer.rmse_soh([r[2] for r in labeled], [r[1] for r in labeled], rated) if labeled else None
        rmse_raw = transfer.rmse_soh([r[3] for r in labeled], [r[1] for r in labeled], rated) if labeled else None
        stage_reports.append(
            {
                "stage_id": stage_id,
                "backbone": est.backbone,
                "decision": decision,
                "n_cycles": dataset.n_cycles,
                "n_checked": n_check,
                "n_evaluated": len(rows),
                "rmse_pct": rmse,
                "rmse_uncompensated_pct": rmse_raw,
                "pairs": rows,
            }
        )
        timings[str(stage_id)] = time.perf_counter() - t0

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "transfer",
        "source_battery_id": manifest["battery_id"],
        "battery_id": battery_id,
        "rated_capacity_ah": rated,
        "seed": seed,
        "first_cycles": T,
        "config_hash": cfg.config_hash(),
        "stages": stage_reports,
    }
    write_json(report, os.path.join(reports_dir, "report.json"))
    write_json({"seconds_per_stage": timings}, os.path.join(reports_dir, "timings.json"))
    return report


# ---------------------------------------------------------------------------
# evaluate + verify
# ---------------------------------------------------------------------------

def evaluate_reports(report_paths) -> dict:
    """Aggregate per-stage RMSE over multiple (seeded) reports."""
    if not report_paths:
        raise ValidationError("evaluate needs at least one report")
    reports = [read_json(p) for p in report_paths]
    versions = {r.get("schema_version") for r in reports}
    if versions != {SCHEMA_VERSION}:
        raise ValidationError(f"mixed or unknown report schema versions: {sorted(versions)}")
    kinds = {r.get("kind") for r in reports}
    if len(kinds) != 1:
        raise ValidationError(f"cannot aggregate mixed report kinds {sorted(kinds)}")
    kind = kinds.pop()
    key = "rmse_test_pct" if kind == "source" else "rmse_pct"

    cells: dict[tuple, list[float]] = {}
    for rep in reports:
        for stage in rep["stages"]:
            value = stage.get(key)
            if value is None:
                continue
            cells.setdefault((rep["battery_id"], stage["stage_id"]), []).append(value)

    rows = []
    for (battery, stage_id), values in sorted(cells.items()):
        rows.append(
            {
                "battery_id": battery,
                "stage_id": stage_id,
                "metric": key,
                "n_runs": len(values),
                "mean": float(np.mean(values)),
                "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
                "values": values,
            }
        )
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "rows": rows}


def _recompute_rmse(pairs, truth_col, pred_col, rated) -> float | None:
    labeled = [p for p in pairs if p[truth_col] is not None]
    if not labeled:
        return None
    total = math.fsum((p[pred_col] - p[truth_col]) ** 2 for p in labeled)
    return math.sqrt(total / len(labeled)) / rated * 100.0


def verify_report(path) -> list[str]:
    """Recompute every reported RMSE from its stored per-cycle pairs."""
    report = read_json(path)
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError("report schema_version mismatch")
    rated = report["rated_capacity_ah"]
    problems = []
    for stage in report["stages"]:
        sid = stage["stage_id"]
        if report["kind"] == "source":
            checks = [
                ("rmse_train_pct", stage["train_pairs"], 1, 2),
                ("rmse_test_pct", stage["test_pairs"], 1, 2),
            ]
        else:
            checks = [
                ("rmse_pct", stage["pairs"], 1, 2),
                ("rmse_uncompensated_pct", stage["pairs"], 1, 3),
            ]
        for name, pairs, truth_col, pred_col in checks:
            expected = _recompute_rmse(pairs, truth_col, pred_col, rated)
            actual = stage.get(name)
            if expected is None and actual is None:
                continue
            if expected is None or actual is None or abs(expected - actual) > 1e-9:
                problems.append(
                    f"stage {sid}: {name} reported {actual}, recomputed {expected}"
                )
    return problems


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def run_id_for(cfg: PipelineConfig, seed: int, kind: str) -> str:
    digest = hashlib.sha256((cfg.config_hash() + f":{seed}:{kind}").encode()).hexdigest()
    return f"{kind}-{digest[:12]}-s{seed}"


def make_run_dir(out_root: str, run_id: str) -> str:
    run_dir = os.path.join(out_root, run_id)
    if os.path.exists(run_dir):
        raise ValidationError(f"run directory already exists: {run_dir}")
    os.makedirs(run_dir)
    return run_dir


def run_with_cleanup(fn, run_dir: str):
    try:
        return fn()
    except BaseException:
        shutil.rmtree(run_dir, ignore_errors=True)
        raise
