"""Per-stage capacity regressors and the backbone switching rule.

Cycle-poor stages get a lightweight within-cycle LSTM; cycle-rich stages get
the temporal capsule network. Training is full-batch seeded Adam on mean
squared capacity error, with the loss trace kept for the artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..cdl import ComponentSplit
from ..errors import ValidationError
from . import nn
from .lstm import LstmRegressor, stack_cycles
from .temcap import TemCapModel, TemCapSpec, routing_backward, routing_forward

SCHEMA_VERSION = 1

DEFAULT_BACKBONE_THRESHOLD = 50


def select_backbone(n_train_cycles: int, threshold: int = DEFAULT_BACKBONE_THRESHOLD) -> str:
    """LSTM below the threshold ("less than 50 training cycles"), TemCap at or above."""
    if n_train_cycles < 1:
        raise ValidationError(f"need at least one training cycle, got {n_train_cycles}")
    return "lstm" if n_train_cycles < threshold else "temcap"


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    seed: int = 0
    lstm_hidden: tuple = (30,)
    lstm_fc: tuple = ()
    temcap: TemCapSpec = field(default_factory=TemCapSpec)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be > 0, got {self.learning_rate}")
        self.temcap.validate()


@dataclass
class TrainedEstimator:
    backbone: str
    stage_id: int
    model: object
    config: TrainConfig
    loss_trace: list[float]


def _dataset_arrays(dataset):
    splits, caps = [], []
    for split, cap in dataset:
        if cap is None or not np.isfinite(cap):
            raise ValidationError(f"cycle {split.cycle_index}: missing capacity label")
        splits.append(split)
        caps.append(float(cap))
    return splits, np.array(caps)


def train(backbone: str, dataset, cfg: TrainConfig, stage_id: int = 0) -> TrainedEstimator:
    """Fit one stage's regressor on (ComponentSplit, capacity) pairs."""
    cfg.validate()
    splits, y = _dataset_arrays(dataset)
    n = len(splits)
    if backbone == "lstm":
        if n < 2:
            raise ValidationError(f"lstm training needs >= 2 labeled cycles, got {n}")
        x = stack_cycles([s.S_d for s in splits])
        model = LstmRegressor(
            input_dim=x.shape[2], hidden_sizes=cfg.lstm_hidden, fc_sizes=cfg.lstm_fc, seed=cfg.seed
        )
        forward = lambda: model.forward(x)
        backward = model.backward
    elif backbone == "temcap":
        L = cfg.temcap.window
        if n < L + 1:
            raise ValidationError(f"temcap training needs >= {L + 1} labeled cycles, got {n}")
        mats = [s.S_d for s in splits]
        model = TemCapModel(input_shape=mats[0].shape, spec=cfg.temcap, seed=cfg.seed)
        ends = list(range(L - 1, n))
        y = y[ends]
        forward = lambda: model.forward_windows(mats, ends)
        backward = model.backward_windows
    else:
        raise ValidationError(f"unknown backbone {backbone!r}; expected lstm or temcap")

    optimizer = nn.Adam(model.params, lr=cfg.learning_rate)
    trace = []
    for epoch in range(cfg.epochs):
        pred, caches = forward()
        err = pred - y
        loss = float(np.mean(err * err))
        nn.check_finite_loss(loss, epoch)
        trace.append(loss)
        grads = backward(2.0 * err / err.size, caches)
        optimizer.step(model.params, grads)
    return TrainedEstimator(
        backbone=backbone, stage_id=stage_id, model=model, config=cfg, loss_trace=trace
    )


def _as_matrix(item):
    return item.S_d if isinstance(item, ComponentSplit) else np.asarray(item, dtype=float)


def predict(est: TrainedEstimator, item) -> float:
    """Capacity estimate: one split for lstm, a window of L splits for temcap."""
    if est.backbone == "lstm":
        return est.model.predict_cycle(_as_matrix(item))
    return est.model.predict_window([_as_matrix(m) for m in item])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def estimator_to_dict(est: TrainedEstimator) -> dict:
    cfg = est.config
    hyper = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "lstm_hidden": list(cfg.lstm_hidden),
        "lstm_fc": list(cfg.lstm_fc),
        "temcap": {
            "filters": cfg.temcap.filters,
            "kernel_size": list(cfg.temcap.kernel_size),
            "strides": list(cfg.temcap.strides),
            "capsule_dim": cfg.temcap.capsule_dim,
            "advanced_count": cfg.temcap.advanced_count,
            "advanced_dim": cfg.temcap.advanced_dim,
            "trl_hidden": cfg.temcap.trl_hidden,
            "window": cfg.temcap.window,
            "routing_iters": cfg.temcap.routing_iters,
        },
    }
    if est.backbone == "lstm":
        hyper["input_dim"] = est.model.input_dim
    else:
        hyper["input_shape"] = list(est.model.input_shape)
    return {
        "schema_version": SCHEMA_VERSION,
        "backbone": est.backbone,
        "stage_id": est.stage_id,
        "hyperparameters": hyper,
        "weights": {k: v.tolist() for k, v in sorted(est.model.params.items())},
        "seed": cfg.seed,
        "loss_trace": est.loss_trace,
    }


def estimator_from_dict(doc: dict) -> TrainedEstimator:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"estimator schema_version {doc.get('schema_version')} != {SCHEMA_VERSION}"
        )
    hyper = doc["hyperparameters"]
    tc = hyper["temcap"]
    cfg = TrainConfig(
        epochs=int(hyper["epochs"]),
        learning_rate=float(hyper["learning_rate"]),
        seed=int(doc["seed"]),
        lstm_hidden=tuple(hyper["lstm_hidden"]),
        lstm_fc=tuple(hyper["lstm_fc"]),
        temcap=TemCapSpec(
            filters=int(tc["filters"]),
            kernel_size=tuple(tc["kernel_size"]),
            strides=tuple(tc["strides"]),
            capsule_dim=int(tc["capsule_dim"]),
            advanced_count=int(tc["advanced_count"]),
            advanced_dim=int(tc["advanced_dim"]),
            trl_hidden=int(tc["trl_hidden"]),
            window=int(tc["window"]),
            routing_iters=int(tc["routing_iters"]),
        ),
    )
    backbone = doc["backbone"]
    if backbone == "lstm":
        model = LstmRegressor(
            input_dim=int(hyper["input_dim"]),
            hidden_sizes=cfg.lstm_hidden,
            fc_sizes=cfg.lstm_fc,
            seed=cfg.seed,
        )
    elif backbone == "temcap":
        model = TemCapModel(input_shape=tuple(hyper["input_shape"]), spec=cfg.temcap, seed=cfg.seed)
    else:
        raise ValidationError(f"unknown backbone {backbone!r} in estimator file")
    for key, value in doc["weights"].items():
        if key not in model.params:
            raise ValidationError(f"unexpected weight tensor {key!r} in estimator file")
        arr = np.array(value, dtype=float)
        if arr.shape != model.params[key].shape:
            raise ValidationError(
                f"weight {key!r} shape {arr.shape} != expected {model.params[key].shape}"
            )
        model.params[key] = arr
    return TrainedEstimator(
        backbone=backbone,
        stage_id=int(doc["stage_id"]),
        model=model,
        config=cfg,
        loss_trace=[float(v) for v in doc["loss_trace"]],
    )


def save_estimator(est: TrainedEstimator, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(estimator_to_dict(est), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_estimator(path) -> TrainedEstimator:
    with open(path, "r", encoding="utf-8") as fh:
        return estimator_from_dict(json.load(fh))
