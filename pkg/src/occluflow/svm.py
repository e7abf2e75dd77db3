"""RBF-kernel soft-margin SVM with sigmoid probability calibration.

The dual is solved by sequential minimal optimization with second-order
working-set selection (Fan, Chen & Lin, JMLR 2005).  Probabilities come
from a sigmoid fitted to out-of-fold decision values with the Newton
method of Lin, Lin & Weng (2007).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

KKT_TOL = 1e-3
CALIBRATION_FOLDS = 3


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class Hyper:
    C: float = 1.0
    gamma: float | None = None  # None: 1 / (n_features * variance of scaled data)

    def __post_init__(self):
        if not self.C > 0:
            raise ClassifierError("C must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ClassifierError("gamma must be positive")

    def describe(self) -> str:
        return f"C={self.C!r};gamma={'auto' if self.gamma is None else repr(self.gamma)}"


@numba.njit(cache=True)
def _smo(K, y, C, tol, max_iter):
    n = K.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    converged = False
    while it < max_iter:
        gmax = -np.inf
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * G[t]
                if v > gmax:
                    gmax = v
                    i = t
        gmin = np.inf
        j = -1
        best = np.inf
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                v = -y[t] * G[t]
                if v < gmin:
                    gmin = v
                if i >= 0:
                    b = gmax - v
                    if b > 0:
                        a = K[i, i] + K[t, t] - 2.0 * K[i, t]
                        if a <= 0:
                            a = 1e-12
                        obj = -(b * b) / a
                        if obj < best:
                            best = obj
                            j = t
        if i < 0 or j < 0 or gmax - gmin < tol:
            converged = True
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = 1e-12
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            alpha[i] = ai + delta
            alpha[j] = aj + delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            s = ai + aj
            alpha[i] = ai - delta
            alpha[j] = aj + delta
            if s > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = s - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = s
            if s > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = s - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = s
        dai = alpha[i] - ai
        daj = alpha[j] - aj
        for t in range(n):
            G[t] += y[t] * (y[i] * K[t, i] * dai + y[j] * K[t, j] * daj)

    # offset from free vectors, or the midpoint of the feasible interval
    n_free = 0
    total = 0.0
    ub = np.inf
    lb = -np.inf
    for t in range(n):
        yg = y[t] * G[t]
        if alpha[t] >= C:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            n_free += 1
            total += yg
    if n_free > 0:
        rho = total / n_free
    else:
        rho = (ub + lb) / 2.0
    return alpha, rho, it, converged


def solve_dual(K: np.ndarray, y: np.ndarray, C: float, tol: float = KKT_TOL, max_iter: int | None = None):
    """Return ``(alpha, rho, iterations, converged)`` for labels ``y`` in {-1, +1}."""
    y = np.asarray(y, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * len(y)
    return _smo(np.ascontiguousarray(K, dtype=np.float64), y, float(C), float(tol), int(max_iter))


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(d, 0.0, out=d)
    return d


def scaling_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def auto_gamma(X: np.ndarray, std_raw: np.ndarray | None = None) -> float:
    """``1 / (n_features * var)`` of the standardized data.

    After standardization each varying dimension has unit variance and each
    constant one has zero, so the pooled variance is the varying fraction.
    """
    d = X.shape[1]
    if std_raw is None:
        std_raw = X.std(axis=0)
    varying = int((std_raw >= 1e-12).sum())
    return 1.0 / max(varying, 1) if d else 1.0


@dataclass
class TrainedModel:
    support_vectors: np.ndarray      # standardized
    dual_coef: np.ndarray            # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    selected: np.ndarray             # indices into the input vector
    n_input: int
    calib_a: float = -1.0
    calib_b: float = 0.0
    iterations: int = 0
    converged: bool = True

    @property
    def n_features(self) -> int:
        return len(self.selected)

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_input:
            raise ClassifierError(f"feature length {X.shape[1]} does not match model input {self.n_input}")
        return (X[:, self.selected] - self.mean) / self.std

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        Z = self._prepare(X)
        if len(self.dual_coef) == 0:
            return np.full(len(Z), self.bias)
        K = np.exp(-self.gamma * sq_dists(Z, self.support_vectors))
        return K @ self.dual_coef + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.decision_function(X) > 0

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Rows of ``(p_class, p_rest)``; the second column is the complement."""
        p = sigmoid_proba(self.decision_function(X), self.calib_a, self.calib_b)
        return np.column_stack([p, 1.0 - p])


def sigmoid_proba(f: np.ndarray, a: float, b: float) -> np.ndarray:
    z = a * np.asarray(f, dtype=np.float64) + b
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.exp(-z[pos]) / (1.0 + np.exp(-z[pos]))
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out


def fit_sigmoid(f: np.ndarray, y: np.ndarray, max_iter: int = 100) -> tuple[float, float]:
    """Fit ``P(y=1|f) = 1 / (1 + exp(a f + b))`` by regularized Newton steps."""
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    prior1 = float(y.sum())
    prior0 = float(len(y) - prior1)
    hi = (prior1 + 1.0) / (prior1 + 2.0)
    lo = 1.0 / (prior0 + 2.0)
    t = np.where(y, hi, lo)
    a, b = 0.0, np.log((prior0 + 1.0) / (prior1 + 1.0))
    sigma = 1e-12
    min_step = 1e-10

    def objective(a, b):
        z = f * a + b
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-z)), (t - 1) * z + np.log1p(np.exp(z)))))

    fval = objective(a, b)
    for _ in range(max_iter):
        z = f * a + b
        p = np.where(z >= 0, np.exp(-z) / (1 + np.exp(-z)), 1 / (1 + np.exp(z)))
        q = 1 - p
        d2 = p * q
        h11 = sigma + float(np.sum(f * f * d2))
        h22 = sigma + float(np.sum(d2))
        h21 = float(np.sum(f * d2))
        d1 = t - p
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2.0
        else:
            break
    return float(a), float(b)


def _as_pm1(y) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype == bool:
        return np.where(y, 1.0, -1.0)
    vals = np.unique(y)
    if not set(vals.tolist()) <= {-1, 1, 0}:
        raise ClassifierError("binary labels must be bool or +-1")
    return np.where(y > 0, 1.0, -1.0)


def stratified_folds(labels: Sequence, k: int, seed: int, ids: Sequence[str] | None = None) -> np.ndarray:
    """Fold index per row.

    Rows of each class are put in sequence-id order, permuted by the seed,
    and the classes are dealt round-robin into ``k`` folds, so the
    assignment does not depend on input row order.
    """
    labels = np.asarray([str(v) for v in labels])
    n = len(labels)
    if ids is None:
        ids = [f"{i:09d}" for i in range(n)]
    ids = list(map(str, ids))
    rng = np.random.default_rng(seed)
    order = []
    for c in sorted(set(labels.tolist())):
        rows = sorted(np.flatnonzero(labels == c), key=lambda i: ids[i])
        order.extend(np.asarray(rows)[rng.permutation(len(rows))].tolist())
    folds = np.empty(n, dtype=np.int64)
    for pos, row in enumerate(order):
        folds[row] = pos % k
    return folds


def _fit_plain(Xs: np.ndarray, y: np.ndarray, hyper: Hyper, std_raw: np.ndarray, tol: float):
    gamma = hyper.gamma if hyper.gamma is not None else auto_gamma(Xs, std_raw)
    K = np.exp(-gamma * sq_dists(Xs, Xs))
    alpha, rho, it, conv = solve_dual(K, y, hyper.C, tol)
    sv = alpha > 0
    return gamma, alpha, rho, it, conv, sv


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ClassifierError("feature matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ClassifierError("non-finite features")
    y = _as_pm1(y)
    if len(y) != len(X):
        raise ClassifierError("label count does not match row count")
    if len(np.unique(y)) < 2:
        raise ClassifierError("training data must contain both classes")
    return X, y


def train(X: np.ndarray, y, hyper: Hyper = Hyper(), seed: int = 0, ids: Sequence[str] | None = None,
          calibrate: bool = True, selected: Sequence[int] | None = None, tol: float = KKT_TOL) -> TrainedModel:
    """Train a binary model; ``y`` is bool (True = positive class) or +-1.

    ``selected`` restricts the model to a subset of input dimensions; the
    model still accepts full-length input vectors.
    """
    X, y = _check_xy(X, y)
    n_input = X.shape[1]
    sel = np.arange(n_input) if selected is None else np.asarray(selected, dtype=np.int64)
    if ids is not None:
        order = np.array(sorted(range(len(ids)), key=lambda i: str(ids[i])))
        X, y, ids = X[order], y[order], [str(ids[i]) for i in order]
    Xsel = X[:, sel]
    mean, std = scaling_stats(Xsel)
    std_raw = Xsel.std(axis=0)
    Xs = (Xsel - mean) / std
    gamma, alpha, rho, it, conv, sv = _fit_plain(Xs, y, hyper, std_raw, tol)
    model = TrainedModel(
        support_vectors=Xs[sv].copy(), dual_coef=(alpha * y)[sv].copy(), bias=-rho, gamma=gamma, C=hyper.C,
        mean=mean, std=std, selected=sel, n_input=n_input, iterations=int(it), converged=bool(conv),
    )
    if calibrate:
        model.calib_a, model.calib_b = _calibrate(X[:, sel], y, hyper, seed, ids, tol)
    return model


def _calibrate(X: np.ndarray, y: np.ndarray, hyper: Hyper, seed: int, ids, tol: float) -> tuple[float, float]:
    counts = [int((y > 0).sum()), int((y < 0).sum())]
    if min(counts) < CALIBRATION_FOLDS:
        # too few rows for held-out folds: fall back to in-sample decisions
        m = train(X, y > 0, hyper, seed, calibrate=False, tol=tol)
        return fit_sigmoid(m.decision_function(X), y > 0)
    folds = stratified_folds(y > 0, CALIBRATION_FOLDS, seed + 1, ids)
    dec = np.empty(len(y))
    for k in range(CALIBRATION_FOLDS):
        tr, te = folds != k, folds == k
        m = train(X[tr], y[tr] > 0, hyper, seed, calibrate=False, tol=tol)
        dec[te] = m.decision_function(X[te])
    return fit_sigmoid(dec, y > 0)


def predict_proba(model: TrainedModel, x: np.ndarray) -> tuple[float, float]:
    p = model.predict_proba(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
    return float(p[0]), float(p[1])


@dataclass
class CVResult:
    mean: float
    folds: list[float]
    predictions: np.ndarray = field(repr=False)


def _check_cv(labels, k: int):
    labels = np.asarray([str(v) for v in labels])
    n = len(labels)
    if k < 2:
        raise ClassifierError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ClassifierError("cross-validation needs at least two classes")
    if k > n:
        raise ClassifierError(f"k={k} exceeds the number of rows ({n})")
    if k < n and counts.min() < k:
        small = classes[counts.argmin()]
        raise ClassifierError(f"class {small!r} has {counts.min()} rows, fewer than k={k}")
    return labels


def cross_validate(X: np.ndarray, y, k: int = 10, hyper: Hyper = Hyper(), seed: int = 0,
                   ids: Sequence[str] | None = None, selected: Sequence[int] | None = None,
                   X_eval: np.ndarray | None = None) -> CVResult:
    """Stratified k-fold accuracy of the binary classifier.

    ``k`` equal to the row count gives leave-one-out; otherwise every class
    needs at least ``k`` rows.  When ``X_eval`` is given (same rows, e.g.
    occluded), folds are trained on ``X`` and tested on ``X_eval``.
    """
    X = np.asarray(X, dtype=np.float64)
    X_eval = X if X_eval is None else np.asarray(X_eval, dtype=np.float64)
    if X_eval.shape != X.shape:
        raise ClassifierError("evaluation features must match the training shape")
    yb = _as_pm1(y) > 0
    _check_cv(yb, k)
    if ids is None:
        ids = [f"{i:09d}" for i in range(len(X))]
    ids = [str(i) for i in ids]
    folds = stratified_folds(yb, k, seed, ids)
    pred = np.zeros(len(X), dtype=bool)
    accs = []
    for f in range(k):
        tr, te = folds != f, folds == f
        m = train(X[tr], yb[tr], hyper, seed, [ids[i] for i in np.flatnonzero(tr)],
                  calibrate=False, selected=selected)
        pred[te] = m.predict(X_eval[te])
        accs.append(float(np.mean(pred[te] == yb[te])))
    return CVResult(float(np.mean(accs)), accs, pred)


def project(x: np.ndarray, configuration: Sequence[int], bins: int = 12,
            region_ids: Sequence[int] | None = None) -> np.ndarray:
    """Concatenate the configuration's region blocks, ascending region order."""
    return np.asarray(x)[..., block_indices(configuration, bins, region_ids)]


def block_indices(configuration: Sequence[int], bins: int = 12, region_ids: Sequence[int] | None = None) -> np.ndarray:
    ids = list(range(1, 26)) if region_ids is None else list(region_ids)
    pos = {r: i for i, r in enumerate(ids)}
    out = []
    for r in sorted(set(configuration)):
        if r not in pos:
            raise ClassifierError(f"unknown region {r}")
        out.extend(range(pos[r] * bins, (pos[r] + 1) * bins))
    return np.asarray(out, dtype=np.int64)


class RegionCVScorer:
    """k-fold accuracy of many region subsets over one dataset.

    Standardization, per-region squared distances and the fold split are
    computed once; each configuration then only sums its regions' distance
    blocks, exponentiates, and runs the dual solver.  Numerically this is
    ``cross_validate(X, y, k, hyper, seed, ids, selected=block_indices(conf))``.
    """

    def __init__(self, X: np.ndarray, y, k: int = 10, hyper: Hyper = Hyper(), seed: int = 0,
                 ids: Sequence[str] | None = None, bins: int = 12, region_ids: Sequence[int] | None = None,
                 tol: float = KKT_TOL):
        X = np.asarray(X, dtype=np.float64)
        yb = _as_pm1(y) > 0
        _check_cv(yb, k)
        if ids is None:
            ids = [f"{i:09d}" for i in range(len(X))]
        ids = [str(i) for i in ids]
        order = np.array(sorted(range(len(ids)), key=lambda i: ids[i]))
        self.X, self.y, self.ids = X[order], np.where(yb[order], 1.0, -1.0), [ids[i] for i in order]
        self.hyper, self.tol, self.bins = hyper, tol, bins
        self.region_ids = list(range(1, 26)) if region_ids is None else list(region_ids)
        folds = stratified_folds(self.y > 0, k, seed, self.ids)
        self.k = k
        self._folds = []
        for f in range(k):
            tr, te = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
            Xtr = self.X[tr]
            mean, std = scaling_stats(Xtr)
            varying = Xtr.std(axis=0) >= 1e-12
            Z = (self.X - mean) / std
            dists, nvary = {}, {}
            for i, r in enumerate(self.region_ids):
                blk = slice(i * bins, (i + 1) * bins)
                dists[r] = sq_dists(Z[:, blk], Z[tr][:, blk])
                nvary[r] = int(varying[blk].sum())
            self._folds.append((tr, te, dists, nvary))

    def score(self, configuration: Sequence[int]) -> float:
        accs = []
        for tr, te, dists, nvary in self._folds:
            regs = sorted(set(configuration))
            D = dists[regs[0]].copy()
            for r in regs[1:]:
                D += dists[r]
            gamma = self.hyper.gamma
            if gamma is None:
                gamma = 1.0 / max(sum(nvary[r] for r in regs), 1)
            K = np.exp(-gamma * D)
            ytr = self.y[tr]
            alpha, rho, _, _ = solve_dual(K[tr], ytr, self.hyper.C, self.tol)
            f = K[te] @ (alpha * ytr) - rho
            accs.append(float(np.mean((f > 0) == (self.y[te] > 0))))
        return float(np.mean(accs))


# -- model files --------------------------------------------------------------

MODEL_MAGIC = b"OFSVM\x00\x00\x01"
_MODEL_HEADER = struct.Struct("<8sIIIII")
_MODEL_SCALARS = struct.Struct("<6d")


def model_to_bytes(m: TrainedModel) -> bytes:
    n_sv, d = m.support_vectors.shape if m.support_vectors.size else (0, m.n_features)
    head = _MODEL_HEADER.pack(MODEL_MAGIC, m.n_input, d, n_sv, m.iterations, int(m.converged))
    scal = _MODEL_SCALARS.pack(m.C, m.gamma, m.bias, m.calib_a, m.calib_b, 0.0)
    parts = [head, scal, np.asarray(m.selected, dtype="<u4").tobytes()]
    for arr in (m.mean, m.std, m.dual_coef, m.support_vectors):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> TrainedModel:
    if len(data) < _MODEL_HEADER.size + _MODEL_SCALARS.size:
        raise ClassifierError("truncated model file")
    magic, n_input, d, n_sv, iters, conv = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ClassifierError("not a model file")
    C, gamma, bias, a, b, _ = _MODEL_SCALARS.unpack_from(data, _MODEL_HEADER.size)
    off = _MODEL_HEADER.size + _MODEL_SCALARS.size
    expected = off + 4 * d + 8 * (2 * d + n_sv + n_sv * d)
    if len(data) != expected:
        raise ClassifierError(f"model file size {len(data)} does not match header ({expected})")

    def take(count, dtype, width):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += count * width
        return arr

    selected = take(d, "<u4", 4).astype(np.int64)
    mean = take(d, "<f8", 8).copy()
    std = take(d, "<f8", 8).copy()
    coef = take(n_sv, "<f8", 8).copy()
    sv = take(n_sv * d, "<f8", 8).reshape(n_sv, d).copy()
    return TrainedModel(sv, coef, bias, gamma, C, mean, std, selected, n_input, a, b, iters, bool(conv))


def save_model(path: str | Path, m: TrainedModel) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def load_model(path: str | Path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
