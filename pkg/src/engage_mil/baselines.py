"""Classical per-instance regressors and segment-to-video aggregation.

The instance labels these models consume come from a relabeling strategy
(bag-label broadcast or cluster statistics); a video's prediction is the
mean of its per-segment predictions.  The kernel machine is trained by a
pairwise coordinate (SMO-style) ascent on the standard 2l-variable dual of
epsilon-insensitive regression.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audit import note_read
from .bags import Dataset, InstanceLabeling
from .errors import ConvergenceError, ParseError, TrainingDivergedError

SVR_MAGIC = b"EMSV"
SVR_VERSION = 1

# grid optima reported for the two cluster relabelings, kept as presets only
SVR_PRESETS = {"kmeans-mode": (1.0, 1.0), "kmeans-mean": (1.0, 4.0)}


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class SvrConfig:
    c: float = 1.0
    epsilon: float = 0.1
    kernel: KernelSpec = field(default_factory=KernelSpec)
    tol: float = 1e-3

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("C must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class SvrModel:
    support_vectors: np.ndarray  # (n_sv, dim)
    coef: np.ndarray  # (n_sv,) alpha - alpha*
    bias: float
    config: SvrConfig
    objective_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def dim(self):
        return self.support_vectors.shape[1]


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")


@dataclass
class RidgePosterior:
    mean: np.ndarray  # posterior mean weights
    alpha: float  # weight precision
    beta: float  # noise precision
    intercept: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not np.isfinite(self.mean).all():
            raise ValueError("posterior mean must be finite")


@dataclass
class GridSearchResult:
    c: float
    sigma: float
    table: np.ndarray  # (len(c_grid), len(sigma_grid)) validation video MSE
    c_grid: list[float]
    sigma_grid: list[float]


# ---------------------------------------------------------------------------
# kernel machinery


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d2 = (
        (a**2).sum(axis=1)[:, None]
        + (b**2).sum(axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma**2))


class _KernelRows:
    """Row-on-demand Gaussian kernel with a small LRU cache.

    SMO touches two rows per step, so caching beats materializing the full
    matrix once the training set grows.
    """

    def __init__(self, points: np.ndarray, sigma: float, max_rows: int = 512):
        self._points = points
        self._sq = (points**2).sum(axis=1)
        self._den = 2.0 * sigma**2
        self._max_rows = max_rows
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        cached = self._rows.get(i)
        if cached is not None:
            self._rows.move_to_end(i)
            return cached
        d2 = np.maximum(
            self._sq[i] + self._sq - 2.0 * self._points @ self._points[i], 0.0
        )
        row = np.exp(-d2 / self._den)
        self._rows[i] = row
        if len(self._rows) > self._max_rows:
            self._rows.popitem(last=False)
        return row


# ---------------------------------------------------------------------------
# epsilon-SVR via pairwise coordinate updates


def _check_training_inputs(instances, labels):
    x = np.asarray(instances, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("instances must be a 2-D matrix")
    if y.shape != (x.shape[0],):
        raise ValueError(f"{x.shape[0]} instances but {y.shape} labels")
    if not np.isfinite(x).all():
        raise ValueError("non-finite feature values")
    if not np.isfinite(y).all():
        raise ValueError("non-finite labels")
    return x, y


def svr_train(instances, labels, config: SvrConfig, max_iter: int = 200_000) -> SvrModel:
    """Solve the dual with maximal-violating-pair coordinate steps.

    Variables a = [alpha; alpha*] live in [0, C]^(2l) under s.a = 0 with
    s = [1; -1].  Each step picks the most violating (up, low) pair, solves
    the two-variable subproblem exactly and clips to the box, so the dual
    objective never worsens; iteration stops once the worst KKT violation
    drops below config.tol.
    """
    x, y = _check_training_inputs(instances, labels)
    l = x.shape[0]
    if l < 2:
        raise ValueError("need at least 2 training instances")
    c, eps = config.c, config.epsilon
    kernel = _KernelRows(x, config.kernel.sigma)

    a = np.zeros(2 * l)
    s = np.concatenate([np.ones(l), -np.ones(l)])
    p = np.concatenate([eps - y, eps + y])
    g = p.copy()  # gradient of 1/2 a'Qa + p'a at a = 0
    trace = []

    converged = False
    m_val = big = float("inf")
    for _ in range(max_iter):
        viol = -s * g
        up = ((s > 0) & (a < c)) | ((s < 0) & (a > 0))
        low = ((s > 0) & (a > 0)) | ((s < 0) & (a < c))
        i = int(np.where(up, viol, -big).argmax())
        j = int(np.where(low, viol, big).argmin())
        m_val, big_m = viol[i], viol[j]
        if m_val - big_m < config.tol:
            converged = True
            break

        bi, bj = i % l, j % l
        ki, kj = kernel.row(bi), kernel.row(bj)
        quad = max(ki[bi] + kj[bj] - 2.0 * ki[bj], 1e-12)
        ss = s[i] * s[j]
        d = -(g[i] - ss * g[j]) / quad
        d_lo = max(-a[i], (a[j] - c) if ss > 0 else -a[j])
        d_hi = min(c - a[i], a[j] if ss > 0 else c - a[j])
        d = min(max(d, d_lo), d_hi)

        a[i] += d
        a[j] -= ss * d
        k_delta = np.concatenate([ki - kj, ki - kj])
        g += s * (s[i] * d) * k_delta
        # dual (maximization) objective: -(1/2 a'Qa + p'a) = -(a.g + a.p)/2
        trace.append(float(-0.5 * (a @ g + a @ p)))
    if not converged:
        raise ConvergenceError(
            f"KKT violation {m_val - big_m:.3e} after {max_iter} steps"
        )

    theta = a[:l] - a[l:]
    bias = float((m_val + big_m) / 2.0)
    keep = theta != 0.0
    if not keep.any():  # degenerate but legal: the bias carries everything
        keep[:1] = True
    return SvrModel(
        support_vectors=x[keep].copy(),
        coef=theta[keep],
        bias=bias,
        config=config,
        objective_trace=trace,
    )


def svr_predict(model: SvrModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"expected a {model.dim}-dim input, got {x.shape}")
    k = gaussian_kernel(x[None, :], model.support_vectors, model.config.kernel.sigma)
    return float(k[0] @ model.coef + model.bias)


def svr_predict_many(model: SvrModel, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != model.dim:
        raise ValueError(f"expected (n, {model.dim}) inputs, got {xs.shape}")
    k = gaussian_kernel(xs, model.support_vectors, model.config.kernel.sigma)
    return k @ model.coef + model.bias


# ---------------------------------------------------------------------------
# linear baselines


def sgd_linear_train(
    instances,
    labels,
    penalty: float = 1e-4,
    epochs: int = 200,
    eta0: float = 0.01,
    seed: int = 0,
) -> tuple[LinearModel, list[float]]:
    """Stochastic gradient descent on mean squared error + penalty*||w||^2.

    One sample per step, per-epoch reshuffling from the seed, inverse
    scaling steps eta_t = eta0 / (1 + eta0 * penalty * t).  Returns the
    final model and the end-of-epoch loss trace.
    """
    x, y = _check_training_inputs(instances, labels)
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    n, dim = x.shape
    w = np.zeros(dim)
    b = 0.0
    rng = np.random.default_rng(seed)
    trace = []
    t = 0
    for _ in range(epochs):
        for idx in rng.permutation(n):
            eta = eta0 / (1.0 + eta0 * penalty * t)
            err = x[idx] @ w + b - y[idx]
            w -= eta * (2.0 * err * x[idx] + 2.0 * penalty * w)
            b -= eta * 2.0 * err
            t += 1
        residuals = x @ w + b - y
        loss = float(residuals @ residuals / n + penalty * (w @ w))
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"sgd loss became non-finite after {len(trace) + 1} epochs "
                "(step size too large for this feature scale?)",
                trace=trace,
            )
        trace.append(loss)
    return LinearModel(weights=w, bias=b), trace


def linear_predict(model: LinearModel, xs) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return xs @ model.weights + model.bias


def bayesian_ridge_train(
    instances,
    labels,
    max_iter: int = 300,
    tol: float = 1e-6,
    fit_intercept: bool = True,
) -> RidgePosterior:
    """Evidence maximization for a Gaussian linear model.

    Alternates the posterior mean m = beta (beta X'X + alpha I)^-1 X'y with
    the effective-degrees-of-freedom updates of alpha (weight precision)
    and beta (noise precision), from alpha = beta = 1, until both stop
    moving.  Tiny additive/floor terms keep zero-signal systems finite.
    """
    x, y = _check_training_inputs(instances, labels)
    n, dim = x.shape
    if fit_intercept:
        x_mean, y_mean = x.mean(axis=0), float(y.mean())
        xc, yc = x - x_mean, y - y_mean
    else:
        x_mean, y_mean = np.zeros(dim), 0.0
        xc, yc = x, y
    gram = xc.T @ xc
    xty = xc.T @ yc
    eigvals = np.clip(np.linalg.eigvalsh(gram), 0.0, None)

    alpha = beta = 1.0
    identity = np.eye(dim)
    floor = 1e-10
    for _ in range(max_iter):
        m = np.linalg.solve(beta * gram + alpha * identity, beta * xty)
        gamma = float((beta * eigvals / (alpha + beta * eigvals)).sum())
        residuals = yc - xc @ m
        alpha_new = max((gamma + floor) / (float(m @ m) + floor), floor)
        beta_new = max((n - gamma + floor) / (float(residuals @ residuals) + floor), floor)
        settled = abs(alpha_new - alpha) <= tol * max(1.0, alpha) and abs(
            beta_new - beta
        ) <= tol * max(1.0, beta)
        alpha, beta = alpha_new, beta_new
        if settled:
            break
    m = np.linalg.solve(beta * gram + alpha * identity, beta * xty)
    intercept = y_mean - float(x_mean @ m)
    return RidgePosterior(mean=m, alpha=alpha, beta=beta, intercept=intercept)


def ridge_predict(posterior: RidgePosterior, xs) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    return xs @ posterior.mean + posterior.intercept


# ---------------------------------------------------------------------------
# aggregation and model selection


def aggregate_video(instance_predictions) -> float:
    """Video score = arithmetic mean of its per-segment predictions."""
    values = np.asarray(instance_predictions, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("need a nonempty prediction vector")
    return float(values.mean())


def grid_search_svr(
    train: Dataset,
    labeling: InstanceLabeling,
    c_grid,
    sigma_grid,
    folds: int = 3,
    seed: int = 0,
    epsilon: float = 0.1,
    tol: float = 1e-3,
) -> GridSearchResult:
    """Subject-independent cross-validation over a (C, sigma) grid.

    Folds partition subjects, never videos, so no person straddles a fold
    boundary.  Each cell's score is the pooled video-level MSE over all
    validation videos; ties prefer smaller C, then smaller sigma.
    """
    c_grid = list(c_grid)
    sigma_grid = list(sigma_grid)
    if not c_grid or not sigma_grid:
        raise ValueError("parameter grids must be nonempty")
    if labeling.labels.shape != (len(train), train.m):
        raise ValueError("labeling does not match the dataset")
    subjects = sorted(train.subjects())
    if not 2 <= folds <= len(subjects):
        raise ValueError(
            f"folds must be in [2, {len(subjects)}] for {len(subjects)} subjects"
        )
    rng = np.random.default_rng(seed)
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    fold_of = {subject: idx % folds for idx, subject in enumerate(shuffled)}

    sq_errors = np.zeros((len(c_grid), len(sigma_grid)))
    n_videos = 0
    for fold in range(folds):
        fit_rows = [
            idx for idx, bag in enumerate(train.bags) if fold_of[bag.subject_id] != fold
        ]
        val_rows = [
            idx for idx, bag in enumerate(train.bags) if fold_of[bag.subject_id] == fold
        ]
        if not fit_rows or not val_rows:
            continue
        fit_x = np.concatenate([train.bags[idx].instances for idx in fit_rows])
        fit_y = np.concatenate([labeling.labels[idx] for idx in fit_rows])
        n_videos += len(val_rows)
        for ci, c in enumerate(c_grid):
            for si, sigma in enumerate(sigma_grid):
                config = SvrConfig(
                    c=c, epsilon=epsilon, kernel=KernelSpec("gaussian", sigma), tol=tol
                )
                model = svr_train(fit_x, fit_y, config)
                for idx in val_rows:
                    bag = train.bags[idx]
                    video = aggregate_video(svr_predict_many(model, bag.instances))
                    sq_errors[ci, si] += (video - bag.label) ** 2
    table = sq_errors / n_videos
    best_ci, best_si = min(
        ((ci, si) for ci in range(len(c_grid)) for si in range(len(sigma_grid))),
        key=lambda cell: (table[cell], c_grid[cell[0]], sigma_grid[cell[1]]),
    )
    return GridSearchResult(
        c=c_grid[best_ci],
        sigma=sigma_grid[best_si],
        table=table,
        c_grid=c_grid,
        sigma_grid=sigma_grid,
    )


# ---------------------------------------------------------------------------
# persistence


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_svr(model: SvrModel, path, meta: dict | None = None) -> None:
    sv = np.ascontiguousarray(model.support_vectors, dtype="<f4")
    coef = np.ascontiguousarray(model.coef, dtype="<f8")
    descriptor = {
        "bias": model.bias,
        "c": model.config.c,
        "epsilon": model.config.epsilon,
        "sigma": model.config.kernel.sigma,
        "tol": model.config.tol,
        "n_sv": sv.shape[0],
        "dim": sv.shape[1],
    }
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", SVR_MAGIC, SVR_VERSION, len(blob)))
        fh.write(blob)
        fh.write(sv.tobytes())
        fh.write(coef.tobytes())
    _sidecar(path).write_text(json.dumps(meta or {}, indent=2, sort_keys=True) + "\n")


def load_svr(path) -> tuple[SvrModel, dict]:
    note_read(path)
    data = Path(path).read_bytes()
    head = struct.Struct("<4sII")
    if len(data) < head.size:
        raise ParseError(path, 1, "truncated model file")
    magic, version, blob_len = head.unpack_from(data)
    if magic != SVR_MAGIC or version != SVR_VERSION:
        raise ParseError(path, 1, f"not a supported model file: {magic!r} v{version}")
    try:
        descriptor = json.loads(data[head.size : head.size + blob_len])
    except json.JSONDecodeError as exc:
        raise ParseError(path, 1, exc.msg) from None
    n_sv, dim = descriptor["n_sv"], descriptor["dim"]
    offset = head.size + blob_len
    sv_bytes = n_sv * dim * 4
    if len(data) != offset + sv_bytes + n_sv * 8:
        raise ParseError(path, 1, "payload size mismatch")
    sv = (
        np.frombuffer(data[offset : offset + sv_bytes], dtype="<f4")
        .reshape(n_sv, dim)
        .astype(np.float64)
    )
    coef = np.frombuffer(data[offset + sv_bytes :], dtype="<f8").copy()
    config = SvrConfig(
        c=descriptor["c"],
        epsilon=descriptor["epsilon"],
        kernel=KernelSpec("gaussian", descriptor["sigma"]),
        tol=descriptor["tol"],
    )
    model = SvrModel(
        support_vectors=sv, coef=coef, bias=descriptor["bias"], config=config
    )
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    return model, meta


def save_linear(model: LinearModel, path, meta: dict | None = None) -> None:
    payload = {
        "kind": "linear",
        "weights": model.weights.tolist(),
        "bias": model.bias,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_linear(path) -> tuple[LinearModel, dict]:
    note_read(path)
    raw = json.loads(Path(path).read_text())
    if raw.get("kind") != "linear":
        raise ParseError(path, 1, "not a linear model file")
    return LinearModel(np.asarray(raw["weights"]), float(raw["bias"])), raw.get("meta", {})


def save_ridge(posterior: RidgePosterior, path, meta: dict | None = None) -> None:
    payload = {
        "kind": "ridge",
        "mean": posterior.mean.tolist(),
        "alpha": posterior.alpha,
        "beta": posterior.beta,
        "intercept": posterior.intercept,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_ridge(path) -> tuple[RidgePosterior, dict]:
    note_read(path)
    raw = json.loads(Path(path).read_text())
    if raw.get("kind") != "ridge":
        raise ParseError(path, 1, "not a ridge model file")
    posterior = RidgePosterior(
        mean=np.asarray(raw["mean"]),
        alpha=float(raw["alpha"]),
        beta=float(raw["beta"]),
        intercept=float(raw["intercept"]),
    )
    return posterior, raw.get("meta", {})
