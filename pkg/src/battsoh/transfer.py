"""Transfer of per-stage source models to a new battery.

A Hotelling-style statistic on time-averaged consistency components decides
whether the source estimator applies directly; when the first cycles of the
target exceed the control limit, a shallow compensation network is fit on the
source model's early errors and subtracted from later predictions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .cdl import ComponentSplit, SubspaceModel
from .errors import NumericalError, ValidationError
from .estimators import TrainedEstimator, nn, predict

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# control limit on cycling consistency
# ---------------------------------------------------------------------------

@dataclass
class ControlLimit:
    stage_id: int
    mean: np.ndarray        # time-then-cycle averaged consistency vector (S,)
    covariance: np.ndarray  # (S, S) covariance of per-cycle averaged vectors
    cl: float
    alpha: float
    n_cycles: int
    ridged: bool = False

    @property
    def S(self) -> int:
        return self.mean.size


def consistency_vector(split: ComponentSplit) -> np.ndarray:
    """Time-average one cycle's consistency components to an S-vector."""
    return split.S_s.mean(axis=1)


def hotelling_statistic(cl: ControlLimit, split: ComponentSplit) -> float:
    delta = consistency_vector(split) - cl.mean
    return float(delta @ np.linalg.solve(cl.covariance, delta))


def control_limit_coefficient(S: int, n_cycles: int) -> float:
    # keeps the (N_c - 1) denominator of the source formulation; the standard
    # Hotelling variant would use (N_c - S)
    return S * (n_cycles**2 - 1) / (n_cycles * (n_cycles - 1))


def fit_control_limit(train_splits, alpha: float = 0.05, stage_id: int = 0) -> ControlLimit:
    """Control limit for the per-cycle consistency statistic at level alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    vectors = np.stack([consistency_vector(s) for s in train_splits])
    n, S = vectors.shape
    if n <= S:
        raise ValidationError(f"need more training cycles ({n}) than components ({S})")

    mean = vectors.mean(axis=0)
    cov = np.cov(vectors.T, ddof=1)
    cov = np.atleast_2d(cov)
    ridged = False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + (1e-8 * max(np.trace(cov), 1e-30) / S) * np.eye(S)
        ridged = True
        logger.warning("stage %s: singular consistency covariance, ridge applied", stage_id)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise NumericalError(f"stage {stage_id}: consistency covariance is not SPD")

    quantile = float(sstats.f.ppf(1.0 - alpha, S, n - S))
    cl = control_limit_coefficient(S, n) * quantile
    return ControlLimit(
        stage_id=stage_id, mean=mean, covariance=cov, cl=cl, alpha=alpha, n_cycles=n, ridged=ridged
    )


def similarity_check(cl: ControlLimit, target_splits) -> dict:
    """Vote the first target cycles against the control limit.

    Drift (decision "compensate") is declared iff strictly more than half of
    the statistics exceed the limit; the full record is returned.
    """
    if len(target_splits) < 1:
        raise ValidationError("similarity check needs at least one target cycle")
    statistics = [hotelling_statistic(cl, s) for s in target_splits]
    exceed = [t > cl.cl for t in statistics]
    decision = "compensate" if sum(exceed) * 2 > len(exceed) else "direct"
    return {
        "decision": decision,
        "control_limit": cl.cl,
        "alpha": cl.alpha,
        "statistics": statistics,
        "exceedances": exceed,
        "n_checked": len(statistics),
        "rule": "compensate iff exceedances > half of checked cycles",
    }


# ---------------------------------------------------------------------------
# error compensation network
# ---------------------------------------------------------------------------

def discrepancy_summary(s_d: np.ndarray) -> np.ndarray:
    """Fixed-size per-cycle summary: each discrepancy row's mean and std."""
    return np.concatenate([s_d.mean(axis=1), s_d.std(axis=1)])


@dataclass
class CompensationConfig:
    hidden: int = 50
    epochs: int = 1500
    learning_rate: float = 1e-2
    weight_decay: float = 1e-2
    seed: int = 0


class CompensationModel:
    """One-hidden-layer ReLU network regressing the source model's error.

    The fit set is tiny (around ten cycles), so inputs are standardized to
    the fit-set statistics and the weights (not the output bias) carry L2
    decay; the network then defaults to the mean error and only keeps
    input-dependent structure the data genuinely supports, which keeps
    extrapolation onto later, drifted cycles bounded.
    """

    def __init__(self, input_dim: int, cfg: CompensationConfig):
        self.input_dim = int(input_dim)
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.params = {
            "w1": nn.uniform_init(rng, (input_dim, cfg.hidden), input_dim),
            "b1": nn.uniform_init(rng, (cfg.hidden,), input_dim),
            "w2": nn.uniform_init(rng, (cfg.hidden, 1), cfg.hidden),
            "b2": nn.uniform_init(rng, (1,), cfg.hidden),
        }
        self.x_mean = np.zeros(input_dim)
        self.x_std = np.ones(input_dim)
        self.loss_trace: list[float] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.x_mean) / self.x_std
        z = nn.linear_forward(xs, self.params["w1"], self.params["b1"])
        return nn.linear_forward(nn.relu(z), self.params["w2"], self.params["b2"])[:, 0]

    def fit(self, x: np.ndarray, e: np.ndarray) -> None:
        self.x_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.x_std = np.where(std > 0.0, std, 1.0)
        xs = (x - self.x_mean) / self.x_std
        decay = self.cfg.weight_decay
        optimizer = nn.Adam(self.params, lr=self.cfg.learning_rate)
        for epoch in range(self.cfg.epochs):
            z = nn.linear_forward(xs, self.params["w1"], self.params["b1"])
            a = nn.relu(z)
            pred = nn.linear_forward(a, self.params["w2"], self.params["b2"])[:, 0]
            err = pred - e
            loss = float(np.mean(err * err))
            nn.check_finite_loss(loss, epoch)
            self.loss_trace.append(loss)
            dpred = (2.0 * err / err.size)[:, None]
            da, dw2, db2 = nn.linear_backward(dpred, a, self.params["w2"])
            dz = da * (z > 0.0)
            _, dw1, db1 = nn.linear_backward(dz, xs, self.params["w1"])
            grads = {
                "w1": dw1 + decay * self.params["w1"],
                "b1": db1,
                "w2": dw2 + decay * self.params["w2"],
                "b2": db2,
            }
            optimizer.step(self.params, grads)

    def predict_error(self, s_d: np.ndarray) -> float:
        return float(self.forward(discrepancy_summary(s_d)[None, :])[0])


def fit_compensation(
    estimator: TrainedEstimator,
    target_splits,
    target_capacities,
    cfg: CompensationConfig | None = None,
) -> CompensationModel:
    """Regress early-cycle estimation error E = Q_hat - Q on the discrepancy summary.

    For a temcap source, only target cycles with a full window of history get
    a source prediction; the compensation pairs are restricted accordingly.
    """
    cfg = cfg or CompensationConfig()
    pairs = []
    if estimator.backbone == "temcap":
        L = estimator.config.temcap.window
        for i in range(L - 1, len(target_splits)):
            q_hat = predict(estimator, target_splits[i - L + 1 : i + 1])
            pairs.append((target_splits[i], q_hat, target_capacities[i]))
    else:
        for split, q in zip(target_splits, target_capacities):
            pairs.append((split, predict(estimator, split), q))
    if len(pairs) < 2:
        raise ValidationError(
            f"compensation fit needs >= 2 cycles with source predictions, got {len(pairs)}"
        )
    x = np.stack([discrepancy_summary(s.S_d) for s, _, _ in pairs])
    e = np.array([q_hat - q for _, q_hat, q in pairs])
    model = CompensationModel(input_dim=x.shape[1], cfg=cfg)
    model.fit(x, e)
    return model


# ---------------------------------------------------------------------------
# transfer predictor
# ---------------------------------------------------------------------------

@dataclass
class StageTransfer:
    """Everything needed to score one stage of a target battery."""

    stage_id: int
    subspace: SubspaceModel
    estimator: TrainedEstimator
    control_limit: ControlLimit
    decision: dict
    compensation: CompensationModel | None = None

    def __post_init__(self):
        drift = self.decision.get("decision") == "compensate"
        if drift != (self.compensation is not None):
            raise ValidationError(
                f"stage {self.stage_id}: compensation must be present iff drift was declared"
            )


def predict_transfer(stage: StageTransfer, item) -> float:
    """Source prediction minus the learned error estimate (when present)."""
    q_hat = predict(stage.estimator, item)
    if stage.compensation is not None:
        last = item[-1] if isinstance(item, (list, tuple)) else item
        s_d = last.S_d if isinstance(last, ComponentSplit) else np.asarray(last, dtype=float)
        q_hat -= stage.compensation.predict_error(s_d)
    return q_hat


# ---------------------------------------------------------------------------
# SOH metrics
# ---------------------------------------------------------------------------

def soh(capacity_ah: float, rated_ah: float) -> float:
    """State of health: current over rated capacity; > 1.05 is flagged."""
    if rated_ah <= 0:
        raise ValidationError(f"rated capacity must be > 0, got {rated_ah}")
    ratio = capacity_ah / rated_ah
    if ratio > 1.05:
        logger.warning("SOH %.4f exceeds 1.05; capacity label looks suspicious", ratio)
    return ratio


def rmse_soh(predictions, truths, rated_ah: float) -> float:
    """RMSE of capacity scaled by rated capacity, in percent."""
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.size == 0 or predictions.shape != truths.shape:
        raise ValidationError(
            f"predictions and truths must be equal-length non-empty vectors, "
            f"got {predictions.shape} and {truths.shape}"
        )
    if rated_ah <= 0:
        raise ValidationError(f"rated capacity must be > 0, got {rated_ah}")
    return float(np.sqrt(np.mean((predictions - truths) ** 2)) / rated_ah * 100.0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def control_limit_to_dict(cl: ControlLimit) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "stage_id": cl.stage_id,
        "mean": cl.mean.tolist(),
        "covariance": cl.covariance.tolist(),
        "cl": cl.cl,
        "alpha": cl.alpha,
        "n_cycles": cl.n_cycles,
        "ridged": cl.ridged,
        "coefficient": "S*(N^2-1)/(N*(N-1))",
    }


def control_limit_from_dict(doc: dict) -> ControlLimit:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"control limit schema_version {doc.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return ControlLimit(
        stage_id=int(doc["stage_id"]),
        mean=np.array(doc["mean"], dtype=float),
        covariance=np.array(doc["covariance"], dtype=float),
        cl=float(doc["cl"]),
        alpha=float(doc["alpha"]),
        n_cycles=int(doc["n_cycles"]),
        ridged=bool(doc["ridged"]),
    )


def compensation_to_dict(model: CompensationModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "input_dim": model.input_dim,
        "hidden": model.cfg.hidden,
        "epochs": model.cfg.epochs,
        "learning_rate": model.cfg.learning_rate,
        "weight_decay": model.cfg.weight_decay,
        "seed": model.cfg.seed,
        "input_mean": model.x_mean.tolist(),
        "input_std": model.x_std.tolist(),
        "weights": {k: v.tolist() for k, v in sorted(model.params.items())},
        "loss_trace": model.loss_trace,
    }


def compensation_from_dict(doc: dict) -> CompensationModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"compensation schema_version {doc.get('schema_version')} != {SCHEMA_VERSION}"
        )
    cfg = CompensationConfig(
        hidden=int(doc["hidden"]),
        epochs=int(doc["epochs"]),
        learning_rate=float(doc["learning_rate"]),
        weight_decay=float(doc["weight_decay"]),
        seed=int(doc["seed"]),
    )
    model = CompensationModel(input_dim=int(doc["input_dim"]), cfg=cfg)
    model.x_mean = np.array(doc["input_mean"], dtype=float)
    model.x_std = np.array(doc["input_std"], dtype=float)
    for key, value in doc["weights"].items():
        model.params[key] = np.array(value, dtype=float)
    model.loss_trace = [float(v) for v in doc["loss_trace"]]
    return model


def save_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
