"""Single-hidden-layer ReLU network trained from scratch with numpy.

Training is vectorized over a *stack* of independent networks that share one design
matrix but carry their own per-sample weights and seeds. Bootstrap replicates become
integer sample weights and cross-validation folds become 0/1 masks, so a whole
committee (or all folds of one CV run) trains in a single batched loop. A stack of
one network is the ordinary single-model case; slices of a stack are bitwise
identical to training that member alone.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from qbag.domain import DEFAULT_N_CLASSES, DomainError

MIN_HIDDEN_UNITS = 2
INITIAL_HIDDEN_UNITS = 4


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss even after the reduced-step retry."""

    def __init__(self, message: str, member: int | None = None):
        super().__init__(message)
        self.member = member


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1500
    step_size: float = 0.5
    momentum: float = 0.9
    minibatch_size: int = 0  # 0 = full batch
    l2_penalty: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.minibatch_size < 0:
            raise ValueError("minibatch_size must be >= 0")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Parameters of ``x -> softmax(W2^T relu(W1^T (2x - 1) + b1) + b2)``.

    Inputs are recentred from ``[0, 1]`` to ``[-1, 1]`` so that the zero-bias
    initial hidden hyperplanes pass through the middle of the feature space
    instead of one corner.
    """

    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (h, K)
    b2: np.ndarray  # (K,)
    rng_seed: int = 0

    def __post_init__(self):
        d, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != (self.W2.shape[1],):
            raise DomainError("inconsistent parameter shapes")
        if h < MIN_HIDDEN_UNITS:
            raise DomainError(f"hidden_units must be >= {MIN_HIDDEN_UNITS}")
        for a in (self.W1, self.b1, self.W2, self.b2):
            a.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_units(self) -> int:
        return self.W1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[1]

    def params(self) -> tuple[np.ndarray, ...]:
        return self.W1, self.b1, self.W2, self.b2


@dataclass(frozen=True)
class CvReport:
    candidate_hidden_units: tuple[int, ...]
    mean_error: tuple[float, ...]
    chosen: int


# ---------------------------------------------------------------------------
# stacked primitives; parameter tuples hold arrays with a leading model axis B


def init_params(d: int, hidden: int, n_classes: int, seed: int):
    """He-scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((d, hidden)) * np.sqrt(2.0 / d)
    W2 = rng.standard_normal((hidden, n_classes)) * np.sqrt(2.0 / hidden)
    return W1, np.zeros(hidden), W2, np.zeros(n_classes)


def _stack_init(d, hidden, n_classes, seeds):
    parts = [init_params(d, hidden, n_classes, int(s)) for s in seeds]
    return tuple(np.stack([p[i] for p in parts]) for i in range(4))


def _center(X):
    return 2.0 * X - 1.0


def forward_logits(params, X):
    """Logits of a stack of networks on shared inputs ``X`` (n, d) -> (B, n, K)."""
    W1, b1, W2, b2 = params
    A = np.maximum(_center(X) @ W1 + b1[:, None, :], 0.0)
    return A @ W2 + b2[:, None, :]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grads(params, X, Y, weights, l2):
    """Weighted mean cross-entropy plus ``l2/2 * (|W1|^2 + |W2|^2)`` and its gradient.

    Parameters
    ----------
    params : stacked (W1, b1, W2, b2) with leading axis B
    X : (n, d) shared inputs, or (B, n, d) per-model inputs
    Y : (n, K) or (B, n, K) one-hot targets
    weights : (B, n) non-negative sample weights, each row with positive sum

    Returns
    -------
    loss : (B,)
    grads : tuple shaped like ``params``
    """
    W1, b1, W2, b2 = params
    Xc = _center(X)
    Z1 = Xc @ W1 + b1[:, None, :]
    A = np.maximum(Z1, 0.0)
    logits = A @ W2 + b2[:, None, :]
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    wn = weights / weights.sum(axis=1, keepdims=True)
    ce = -(logp * Y).sum(axis=-1)
    loss = (wn * ce).sum(axis=1) + 0.5 * l2 * ((W1**2).sum(axis=(1, 2)) + (W2**2).sum(axis=(1, 2)))

    dlogits = (np.exp(logp) - Y) * wn[:, :, None]
    gW2 = A.transpose(0, 2, 1) @ dlogits + l2 * W2
    gb2 = dlogits.sum(axis=1)
    dA = dlogits @ W2.transpose(0, 2, 1)
    dZ1 = dA * (Z1 > 0)
    if Xc.ndim == 2:
        gW1 = Xc.T @ dZ1 + l2 * W1
    else:
        gW1 = Xc.transpose(0, 2, 1) @ dZ1 + l2 * W1
    gb1 = dZ1.sum(axis=1)
    return loss, (gW1, gb1, gW2, gb2)


def _gd(params, X, Y, weights, cfg: TrainConfig, step: float, seeds):
    params = [p.copy() for p in params]
    vel = [np.zeros_like(p) for p in params]
    n = X.shape[0]
    mb = cfg.minibatch_size
    if mb and mb < n:
        rngs = [np.random.default_rng([int(s), 1]) for s in seeds]
        B = len(seeds)
        rows = np.arange(B)[:, None]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(cfg.epochs):
            if mb and mb < n:
                perms = np.stack([r.permutation(n) for r in rngs])
                for start in range(0, n, mb):
                    idx = perms[:, start : start + mb]
                    w = weights[rows, idx]
                    live = w.sum(axis=1) > 0
                    w = np.where(live[:, None], w, 1.0)
                    _, grads = loss_and_grads(params, X[idx], Y[idx], w, cfg.l2_penalty)
                    for p, v, g in zip(params, vel, grads):
                        g = np.where(live.reshape((-1,) + (1,) * (g.ndim - 1)), g, 0.0)
                        v *= cfg.momentum
                        v -= step * g
                        p += v
            else:
                _, grads = loss_and_grads(params, X, Y, weights, cfg.l2_penalty)
                for p, v, g in zip(params, vel, grads):
                    v *= cfg.momentum
                    v -= step * g
                    p += v
        loss, _ = loss_and_grads(params, X, Y, weights, cfg.l2_penalty)
    return tuple(params), loss


def fit_stack(X, y, n_classes: int, hidden_units: int, weights, seeds: Sequence[int], cfg: TrainConfig):
    """Train one network per row of ``weights``.

    Member ``b`` is initialized from ``seeds[b]`` and minimizes its weighted loss.
    A member whose loss is non-finite is retrained once at one tenth of the step
    size; if it diverges again :class:`TrainingDivergenceError` names it.

    Returns stacked parameters ``(W1, b1, W2, b2)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise DomainError("training data must be a non-empty (n, d) array")
    if len(y) != len(X):
        raise DomainError("X and y differ in length")
    if y.min() < 0 or y.max() >= n_classes:
        raise DomainError(f"labels must lie in [0, {n_classes - 1}]")
    if hidden_units < MIN_HIDDEN_UNITS:
        raise DomainError(f"hidden_units must be >= {MIN_HIDDEN_UNITS}")
    if weights.shape != (len(seeds), len(X)) or np.any(weights.sum(axis=1) <= 0):
        raise DomainError("weights must be (B, n) with positive row sums")
    Y = np.eye(n_classes)[y]
    init = _stack_init(X.shape[1], hidden_units, n_classes, seeds)
    params, loss = _gd(init, X, Y, weights, cfg, cfg.step_size, seeds)
    bad = np.flatnonzero(~np.isfinite(loss) | ~_finite_members(params))
    if len(bad):
        sub = tuple(p[bad] for p in init)
        retry, loss2 = _gd(sub, X, Y, weights[bad], cfg, cfg.step_size / 10, [seeds[i] for i in bad])
        still = ~np.isfinite(loss2) | ~_finite_members(retry)
        if still.any():
            m = int(bad[np.argmax(still)])
            raise TrainingDivergenceError(f"training of member {m} diverged", member=m)
        params = tuple(p.copy() for p in params)
        for p, r in zip(params, retry):
            p[bad] = r
    return params


def _finite_members(params):
    ok = np.ones(params[0].shape[0], dtype=bool)
    for p in params:
        ok &= np.isfinite(p.reshape(p.shape[0], -1)).all(axis=1)
    return ok


def unstack(params, seeds) -> list[MlpModel]:
    return [
        MlpModel(*(np.array(p[b]) for p in params), rng_seed=int(seeds[b]))
        for b in range(params[0].shape[0])
    ]


# ---------------------------------------------------------------------------
# single-model API


def train(X, y, hidden_units: int, cfg: TrainConfig, n_classes: int = DEFAULT_N_CLASSES) -> MlpModel:
    """Train one network on all of ``(X, y)`` with equal sample weights."""
    X = np.asarray(X, dtype=float)
    params = fit_stack(X, y, n_classes, hidden_units, np.ones((1, len(X))), [cfg.rng_seed], cfg)
    return unstack(params, [cfg.rng_seed])[0]


def _as_batch(model: MlpModel, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.input_dim:
        raise DomainError(f"input has dimension {X.shape[1]}, model expects {model.input_dim}")
    return X, single


def predict_proba(model: MlpModel, x) -> np.ndarray:
    """Class probabilities for one point ``(d,)`` or a batch ``(n, d)``."""
    X, single = _as_batch(model, x)
    stacked = tuple(p[None] for p in model.params())
    proba = softmax(forward_logits(stacked, X))[0]
    return proba[0] if single else proba


def argmax_first(proba) -> np.ndarray:
    """Argmax over the last axis; ties go to the smallest class index."""
    return np.argmax(proba, axis=-1)


def predict(model: MlpModel, x):
    p = predict_proba(model, x)
    out = argmax_first(p)
    return int(out) if np.ndim(out) == 0 else out


def accuracy(model: MlpModel, X, y) -> float:
    return float(np.mean(predict(model, np.atleast_2d(X)) == np.asarray(y)))


# ---------------------------------------------------------------------------
# cross-validation


def fold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and split into ``k`` folds of near-equal size."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, k)


def kfold_cv_error(X, y, hidden_units: int, k: int, cfg: TrainConfig, n_classes: int = DEFAULT_N_CLASSES) -> float:
    """Mean held-out misclassification rate over ``k`` folds.

    Each fold's network is trained from scratch on the other folds; all ``k``
    networks share ``cfg.rng_seed`` for initialization so candidates are compared
    on equal footing.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n = len(X)
    if n < k:
        raise ValueError(f"{n} instances is fewer than k={k} folds; reduce k")
    folds = fold_indices(n, k, cfg.rng_seed)
    weights = np.ones((k, n))
    for f, idx in enumerate(folds):
        weights[f, idx] = 0.0
    params = fit_stack(X, y, n_classes, hidden_units, weights, [cfg.rng_seed] * k, cfg)
    pred = argmax_first(forward_logits(params, X))
    errors = [np.mean(pred[f, idx] != y[idx]) for f, idx in enumerate(folds)]
    return float(np.mean(errors))


def hidden_unit_candidates(current: int) -> tuple[int, ...]:
    if current < MIN_HIDDEN_UNITS:
        raise ValueError(f"current hidden units must be >= {MIN_HIDDEN_UNITS}")
    return tuple(sorted({max(MIN_HIDDEN_UNITS, current // 2), current, 2 * current}))


def choose_candidate(candidates: Sequence[int], errors: Sequence[float]) -> int:
    """Lowest error wins; ties go to the smallest network."""
    best = min(errors)
    return min(c for c, e in zip(candidates, errors) if e == best)


def adapt_hidden_units(X, y, current: int, k: int, cfg: TrainConfig, n_classes: int = DEFAULT_N_CLASSES) -> CvReport:
    """Halve, keep or double the hidden layer, whichever has the lowest CV error."""
    cands = hidden_unit_candidates(current)
    errs = tuple(kfold_cv_error(X, y, h, k, cfg, n_classes) for h in cands)
    return CvReport(cands, errs, choose_candidate(cands, errs))


def cv_folds_for(n: int, k_max: int = 10) -> int:
    """Fold count used by the learning loop: ``min(k_max, n)``."""
    return min(k_max, n)


# ---------------------------------------------------------------------------
# serialization


def _write_matrix(fh, a):
    a = np.atleast_2d(a)
    for row in a:
        fh.write(",".join(repr(float(v)) for v in row) + "\n")


def dump_model(model: MlpModel, fh) -> None:
    """Write ``d,hidden,K`` then W1 rows, b1, W2 rows, b2 (one row per line)."""
    fh.write(f"{model.input_dim},{model.hidden_units},{model.output_dim}\n")
    _write_matrix(fh, model.W1)
    _write_matrix(fh, model.b1)
    _write_matrix(fh, model.W2)
    _write_matrix(fh, model.b2)


def _read_rows(lines, n, width, what):
    rows = []
    for _ in range(n):
        try:
            line = next(lines)
        except StopIteration:
            raise DomainError(f"truncated model file while reading {what}") from None
        vals = [float(v) for v in line.split(",")]
        if len(vals) != width:
            raise DomainError(f"{what}: expected {width} values, got {len(vals)}")
        rows.append(vals)
    return np.array(rows)


def load_model_lines(lines, rng_seed: int = 0) -> MlpModel:
    try:
        d, h, K = (int(v) for v in next(lines).split(","))
    except (StopIteration, ValueError):
        raise DomainError("model header must be 'd,hidden,K'") from None
    W1 = _read_rows(lines, d, h, "W1")
    b1 = _read_rows(lines, 1, h, "b1")[0]
    W2 = _read_rows(lines, h, K, "W2")
    b2 = _read_rows(lines, 1, K, "b2")[0]
    return MlpModel(W1, b1, W2, b2, rng_seed=rng_seed)


def dumps_model(model: MlpModel) -> str:
    buf = io.StringIO()
    dump_model(model, buf)
    return buf.getvalue()


def loads_model(text: str) -> MlpModel:
    return load_model_lines(iter(text.splitlines()))


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, rng_seed=int(seed))
