"""Cycling-discrepancy learning: split embedded cycles into a consistency
subspace (stationary across cycles) and its orthogonal discrepancy complement.

Per stage, the embedded cycles are whitened by the inverse principal square
root of their averaged column covariance; an orthogonal matrix is then fit by
Riemannian conjugate gradient so that the first S projected components of
every cycle look as close as possible to N(0, I) in summed Gaussian
KL divergence. The remaining J - S rows carry the degradation-driving
discrepancy components fed to the regressors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .psr import EmbeddedCycle

SCHEMA_VERSION = 1


@dataclass
class CycleStats:
    """Column mean and covariance of one embedded cycle."""

    u: np.ndarray      # (J,)
    sigma: np.ndarray  # (J, J)


@dataclass
class SubspaceModel:
    """Whitening + orthogonal projection + consistency split index for one stage."""

    stage_id: int
    S: int
    W: np.ndarray   # (J, J) whitening matrix
    Pi: np.ndarray  # (J, J) orthogonal
    objective: float
    converged: bool
    seed: int
    whitening_kind: str = "inverse_sqrt_avg_cov"

    @property
    def J(self) -> int:
        return self.Pi.shape[0]

    @property
    def Pi_s(self) -> np.ndarray:
        return self.Pi[: self.S]

    @property
    def Pi_d(self) -> np.ndarray:
        return self.Pi[self.S :]


@dataclass
class ComponentSplit:
    """Consistency (S x K') and discrepancy ((J-S) x K') components of a cycle."""

    cycle_index: int
    S_s: np.ndarray
    S_d: np.ndarray
    capacity_ah: float | None = None


def cycle_stats(cycle: EmbeddedCycle) -> CycleStats:
    x = cycle.matrix
    if x.shape[1] < 2:
        raise ValidationError(f"cycle {cycle.cycle_index}: need >= 2 columns for covariance")
    return CycleStats(u=x.mean(axis=1), sigma=np.cov(x, ddof=1))


def fit_whitening(stage: list[EmbeddedCycle], ridge: float | None = 1e-8) -> np.ndarray:
    """Inverse principal square root of the cycle-averaged column covariance.

    ``ridge`` scales tr(sigma)/J and is added to the diagonal before the
    inverse square root; pass None to disable, in which case rank deficiency
    raises naming the null directions.
    """
    if len(stage) < 2:
        raise ValidationError(f"whitening needs >= 2 cycles, got {len(stage)}")
    J = stage[0].J
    sigma_bar = np.zeros((J, J))
    for cycle in stage:
        if cycle.J != J:
            raise ValidationError("cycles disagree on embedded dimension J")
        sigma_bar += cycle_stats(cycle).sigma
    sigma_bar /= len(stage)

    if ridge is not None:
        sigma_bar = sigma_bar + (ridge * np.trace(sigma_bar) / J) * np.eye(J)

    vals, vecs = np.linalg.eigh(sigma_bar)
    tol = J * np.finfo(float).eps * max(vals.max(), 0.0)
    if np.any(vals <= tol):
        null = np.where(vals <= tol)[0]
        raise NumericalError(
            f"averaged covariance is rank deficient; null eigendirections {null.tolist()} "
            f"(eigenvalues {vals[null].tolist()}); enable ridge regularization"
        )
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def kld_gaussian(u: np.ndarray, sigma: np.ndarray) -> float:
    """Closed-form KL( N(u, sigma) || N(0, I) ) = (tr S - ln det S + u'u - S)/2."""
    u = np.asarray(u, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    S = u.size
    if sigma.shape != (S, S):
        raise ValidationError(f"sigma shape {sigma.shape} does not match u length {S}")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise NumericalError("sigma is not symmetric")
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise NumericalError("sigma is not positive definite")
    return 0.5 * (np.trace(sigma) - logdet + u @ u - S)


def _whitened_stats(stats: list[CycleStats], W: np.ndarray):
    """Stack W u_i and W Sigma_i W' across cycles: (I, J) and (I, J, J)."""
    A = np.stack([W @ st.u for st in stats])
    B = np.stack([W @ st.sigma @ W.T for st in stats])
    B = 0.5 * (B + np.transpose(B, (0, 2, 1)))
    return A, B


def _objective_from_whitened(Pi: np.ndarray, A: np.ndarray, B: np.ndarray, S: int) -> float:
    Ps = Pi[:S]
    m = A @ Ps.T                                  # (I, S)
    C = np.einsum("sj,ijk,tk->ist", Ps, B, Ps)    # (I, S, S)
    sign, logdet = np.linalg.slogdet(C)
    if np.any(sign <= 0):
        return np.inf
    tr = np.einsum("iss->i", C)
    return float(0.5 * np.sum(tr - logdet + np.einsum("is,is->i", m, m) - S))


def _euclid_gradient_from_whitened(Pi: np.ndarray, A: np.ndarray, B: np.ndarray, S: int) -> np.ndarray:
    Ps = Pi[:S]
    m = A @ Ps.T
    PB = np.einsum("sj,ijk->isk", Ps, B)          # (I, S, J) = Ps B_i
    C = np.einsum("isk,tk->ist", PB, Ps)          # (I, S, S)
    Cinv_PB = np.linalg.solve(C, PB)              # (I, S, J)
    G_s = PB.sum(axis=0) - Cinv_PB.sum(axis=0) + m.T @ A
    G = np.zeros_like(Pi)
    G[:S] = G_s
    return G


def _check_orthogonal(Pi: np.ndarray) -> None:
    J = Pi.shape[0]
    if Pi.shape != (J, J) or np.max(np.abs(Pi @ Pi.T - np.eye(J))) > 1e-8:
        raise ValidationError("Pi must be orthogonal (|Pi Pi' - I| <= 1e-8)")


def cdl_objective(Pi: np.ndarray, stats: list[CycleStats], W: np.ndarray, S: int) -> float:
    """Summed KL of the first S whitened-projected components against N(0, I)."""
    _check_orthogonal(Pi)
    if not 1 <= S <= Pi.shape[0]:
        raise ValidationError(f"S must lie in 1..J, got {S}")
    A, B = _whitened_stats(stats, W)
    value = _objective_from_whitened(Pi, A, B, S)
    if not np.isfinite(value):
        raise NumericalError("projected covariance not positive definite")
    return value


def cdl_gradient(Pi: np.ndarray, stats: list[CycleStats], W: np.ndarray, S: int) -> np.ndarray:
    """Riemannian gradient: Euclidean gradient projected onto the tangent
    space of the orthogonal manifold via the skew-symmetric projection."""
    _check_orthogonal(Pi)
    A, B = _whitened_stats(stats, W)
    G = _euclid_gradient_from_whitened(Pi, A, B, S)
    return _tangent_project(Pi, G)


def _tangent_project(Pi: np.ndarray, G: np.ndarray) -> np.ndarray:
    M = Pi.T @ G
    return Pi @ (0.5 * (M - M.T))


def _qr_retract(Pi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(Pi + xi)
    return q * np.sign(np.diag(r))


@dataclass
class CdlOptions:
    max_iters: int = 500
    grad_tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    armijo_c: float = 1e-4
    ridge: float | None = 1e-8


@dataclass
class CdlTrace:
    objectives: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    converged: bool = False


def _cg_minimize(A, B, S, J, rng, opts: CdlOptions) -> tuple[np.ndarray, float, CdlTrace]:
    """One Riemannian CG run from a random orthogonal start.

    QR retraction, Polak-Ribiere beta with restart on non-descent, Armijo
    backtracking; every accepted iterate lowers the objective.
    """
    from .dataio import random_orthogonal

    Pi = random_orthogonal(J, rng)
    f = _objective_from_whitened(Pi, A, B, S)
    if not np.isfinite(f):
        raise NumericalError("objective not finite at the initial point")
    g = _tangent_project(Pi, _euclid_gradient_from_whitened(Pi, A, B, S))
    d = -g
    trace = CdlTrace(objectives=[f], grad_norms=[float(np.linalg.norm(g))])
    step = 1.0

    for _ in range(opts.max_iters):
        gnorm = np.linalg.norm(g)
        if gnorm < opts.grad_tol:
            trace.converged = True
            break
        slope = float(np.sum(g * d))
        if slope >= 0:
            d = -g
            slope = -float(gnorm**2)

        t = step
        accepted = False
        for _ in range(50):
            Pi_new = _qr_retract(Pi, t * d)
            f_new = _objective_from_whitened(Pi_new, A, B, S)
            if np.isfinite(f_new) and f_new <= f + opts.armijo_c * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break  # stalled: keep the best iterate found so far

        g_new = _tangent_project(Pi_new, _euclid_gradient_from_whitened(Pi_new, A, B, S))
        g_old_t = _tangent_project(Pi_new, g)
        d_old_t = _tangent_project(Pi_new, d)
        beta = max(0.0, float(np.sum(g_new * (g_new - g_old_t)) / max(np.sum(g * g), 1e-300)))
        Pi, f, g = Pi_new, f_new, g_new
        d = -g + beta * d_old_t
        trace.objectives.append(f)
        trace.grad_norms.append(float(np.linalg.norm(g)))
        step = min(max(t * 2.0, 1e-8), 1.0)

    if not trace.converged:
        trace.converged = trace.grad_norms[-1] < opts.grad_tol
    return Pi, f, trace


def fit_cdl(stage: list[EmbeddedCycle], S: int, opts: CdlOptions | None = None) -> SubspaceModel:
    """Fit the per-stage subspace model by restarted Riemannian CG.

    Deterministic given the seed: restart k uses seed opts.seed + k and the
    lowest-objective restart wins (earliest restart on ties). A run that hits
    max_iters without meeting the gradient tolerance is kept but flagged via
    ``converged=False``.
    """
    opts = opts or CdlOptions()
    if len(stage) < 2:
        raise ValidationError(f"fit_cdl needs >= 2 cycles, got {len(stage)}")
    J = stage[0].J
    if not 1 <= S < J:
        raise ValidationError(f"S must satisfy 1 <= S < J={J}, got {S}")

    W = fit_whitening(stage, ridge=opts.ridge)
    stats = [cycle_stats(c) for c in stage]
    A, B = _whitened_stats(stats, W)

    best = None
    for k in range(opts.n_restarts):
        rng = np.random.default_rng(opts.seed + k)
        Pi, f, trace = _cg_minimize(A, B, S, J, rng, opts)
        if best is None or f < best[1]:
            best = (Pi, f, trace)

    Pi, f, trace = best
    return SubspaceModel(
        stage_id=stage[0].stage_id,
        S=S,
        W=W,
        Pi=Pi,
        objective=f,
        converged=trace.converged,
        seed=opts.seed,
    )


def transform(model: SubspaceModel, cycle: EmbeddedCycle) -> ComponentSplit:
    """Project one embedded cycle into consistency and discrepancy components."""
    if cycle.J != model.J:
        raise ValidationError(
            f"cycle J={cycle.J} does not match model J={model.J} (stage {model.stage_id})"
        )
    Y = model.Pi @ (model.W @ cycle.matrix)
    return ComponentSplit(
        cycle_index=cycle.cycle_index,
        S_s=Y[: model.S],
        S_d=Y[model.S :],
        capacity_ah=cycle.capacity_ah,
    )


def sweep_S(stage: list[EmbeddedCycle], S_candidates, opts: CdlOptions | None = None):
    """Fit every candidate consistency dimension and report the objectives.

    Returns a list of dicts (S, objective, mean per-cycle KL, converged);
    the choice of S stays with the caller.
    """
    J = stage[0].J
    rows = []
    for S in S_candidates:
        if not 1 <= S < J:
            raise ValidationError(f"candidate S={S} outside 1..J-1 (J={J})")
        model = fit_cdl(stage, S, opts)
        rows.append(
            {
                "S": int(S),
                "objective": model.objective,
                "mean_cycle_kl": model.objective / len(stage),
                "converged": model.converged,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def subspace_to_dict(model: SubspaceModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "stage_id": model.stage_id,
        "S": model.S,
        "W_c": model.W.tolist(),
        "Pi": model.Pi.tolist(),
        "objective": model.objective,
        "converged": model.converged,
        "seed": model.seed,
        "whitening": model.whitening_kind,
    }


def subspace_from_dict(doc: dict) -> SubspaceModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"subspace model schema_version {doc.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return SubspaceModel(
        stage_id=int(doc["stage_id"]),
        S=int(doc["S"]),
        W=np.array(doc["W_c"], dtype=float),
        Pi=np.array(doc["Pi"], dtype=float),
        objective=float(doc["objective"]),
        converged=bool(doc["converged"]),
        seed=int(doc["seed"]),
        whitening_kind=doc.get("whitening", "inverse_sqrt_avg_cov"),
    )


def save_subspace(model: SubspaceModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(subspace_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_subspace(path) -> SubspaceModel:
    with open(path, "r", encoding="utf-8") as fh:
        return subspace_from_dict(json.load(fh))
