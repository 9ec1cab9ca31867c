"""Linear learners: hinge-loss SVM, logistic regression, sparse multinomial GLM."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from cqa.errors import DataError, NumericalError
from cqa.learners import _kernels
from cqa.learners.config import SolverConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearModel:
    """Decision function ``X @ weights.T + bias``.

    One row of weights per class, except binary SVM/logistic models which
    carry a single row scoring class 1.
    """

    weights: np.ndarray
    bias: np.ndarray
    n_classes: int
    regularization: dict = field(default_factory=dict)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if b.shape != (W.shape[0],):
            raise DataError(f"bias shape {b.shape} does not match {W.shape[0]} weight rows")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NumericalError("linear model has non-finite parameters")
        W = W.copy()
        b = b.copy()
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def is_binary_row(self) -> bool:
        return self.weights.shape[0] == 1

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got shape {X.shape}")
        return X @ self.weights.T + self.bias

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        scores = self.decision_function(X)
        if self.is_binary_row:
            labels = (scores[:, 0] > 0).astype(np.int64)
        else:
            labels = np.argmax(scores, axis=1).astype(np.int64)
        return labels, scores


def _check_xy(X, y, min_classes=2):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise DataError(f"X must be 2-D, got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise DataError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if not np.all(np.isfinite(X)):
        raise DataError("X contains non-finite values")
    y = y.astype(np.int64)
    if np.any(y < 0):
        raise DataError("labels must be non-negative class ids")
    present = np.unique(y)
    if len(present) < min_classes:
        raise DataError(
            f"only one class ({present.tolist()}) present; handle this degenerate case upstream"
        )
    return X, y


# ------------------------------------------------------------------ SVM


def svm_objective(w, b, X, y01, C) -> float:
    """0.5*(||w||^2 + b^2) + C * sum(hinge); labels in {0, 1}."""
    s = 2.0 * np.asarray(y01, dtype=np.float64) - 1.0
    margins = 1.0 - s * (np.asarray(X) @ np.asarray(w) + b)
    return 0.5 * (float(np.dot(w, w)) + b * b) + C * float(np.maximum(margins, 0).sum())


def _huber_terms(t, h):
    return np.where(t <= 0, 0.0, np.where(t < h, t * t / (2 * h), t - h / 2))


def svm_hinge_primal(Z, C, tol=1e-8, newton_max=100):
    """Minimise ``0.5*||w||^2 + C*sum(max(0, 1 - Z w))``.

    ``Z`` holds the label-signed rows (bias column included). The hinge is
    replaced by a Huber-smoothed version of width h, minimised by Newton's
    method, and h shrinks by 10x per stage. Each stage yields a feasible dual
    point ``a = C*clip((1 - Z w)/h, 0, 1)``, so the returned duality gap is a
    certificate of optimality. Returns (w, primal, dual).
    """
    n, p = Z.shape
    w = np.zeros(p)
    best = (np.inf, w, np.inf, -np.inf)
    h = 1.0
    while h >= 1e-12:
        t = 1.0 - Z @ w
        f = 0.5 * w @ w + C * _huber_terms(t, h).sum()
        for _ in range(newton_max):
            g = w - C * (Z.T @ np.clip(t / h, 0.0, 1.0))
            q = (t > 0) & (t < h)
            H = np.eye(p) + (C / h) * (Z[q].T @ Z[q])
            step = np.linalg.solve(H, g)
            dec = float(g @ step)
            if dec <= 1e-30 * max(1.0, f):
                break
            s = 1.0
            while True:
                wn = w - s * step
                tn = 1.0 - Z @ wn
                fn = 0.5 * wn @ wn + C * _huber_terms(tn, h).sum()
                if fn <= f - 1e-4 * s * dec or s < 1e-12:
                    break
                s *= 0.5
            if not np.isfinite(fn):
                raise NumericalError("SVM objective became non-finite")
            if fn > f:
                break
            done = f - fn <= 1e-15 * abs(f)
            w, f, t = wn, fn, tn
            if done:
                break
        a = C * np.clip(t / h, 0.0, 1.0)
        wa = Z.T @ a
        primal = 0.5 * float(w @ w) + C * float(np.maximum(t, 0.0).sum())
        dual = float(a.sum()) - 0.5 * float(wa @ wa)
        gap = (primal - dual) / max(abs(primal), 1e-12)
        if gap < best[0]:
            best = (gap, w.copy(), primal, dual)
        if gap <= tol:
            break
        h *= 0.1
    if best[0] > tol:
        log.debug("SVM finished with relative duality gap %.2e", best[0])
    return best[1], best[2], best[3]


def _svm_binary(Xb, s, C, tol):
    w, _, _ = svm_hinge_primal(s[:, None] * Xb, float(C), tol)
    return w[:-1], w[-1]


def train_linear_svm(X, y, cfg: SolverConfig = SolverConfig(), *, n_classes: int | None = None,
                     tol: float = 1e-8) -> LinearModel:
    """L2-regularised hinge-loss linear SVM, one-vs-rest for more than two classes.

    The bias is handled as an extra constant feature, so it is regularised
    together with the weights: the objective is
    ``0.5*(||w||^2 + b^2) + C*sum(max(0, 1 - s_i(w.x_i + b)))``. ``tol`` bounds
    the relative duality gap. The solver is deterministic and uses no
    randomness, so ``cfg.seed`` does not affect the result.
    """
    X, y = _check_xy(X, y)
    m = max(int(y.max()) + 1, n_classes or 2)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = {"penalty": "l2", "loss": "hinge", "C": cfg.svm_c}
    if m == 2:
        s = np.where(y == 1, 1.0, -1.0)
        w, b = _svm_binary(Xb, s, cfg.svm_c, tol)
        return LinearModel(w[None, :], np.array([b]), 2, reg)
    W = np.empty((m, X.shape[1]))
    B = np.empty(m)
    for c in range(m):
        s = np.where(y == c, 1.0, -1.0)
        W[c], B[c] = _svm_binary(Xb, s, cfg.svm_c, tol)
    return LinearModel(W, B, m, {**reg, "multiclass": "ovr"})


# ------------------------------------------------------------------ logistic


def _class_weights(y, balanced):
    if not balanced:
        return np.ones(len(y))
    n = len(y)
    counts = np.bincount(y, minlength=2).astype(np.float64)
    return n / (2.0 * counts[y])


def logistic_objective(w, b, X, y, l2=0.0, sample_weight=None):
    """Mean (weighted) cross-entropy + 0.5*l2*||w||^2, with its gradient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight)
    n = len(y)
    z = X @ w + b
    loss = float(np.sum(s * (-y * log_expit(z) - (1 - y) * log_expit(-z))) / n)
    loss += 0.5 * l2 * float(np.dot(w, w))
    r = s * (expit(z) - y) / n
    return loss, X.T @ r + l2 * w, float(r.sum())


def train_logistic(X, y, l2: float = 0.0, balanced: bool = False, seed: int = 0, *,
                   tol: float = 1e-6, max_iter: int = 200) -> LinearModel:
    """Binary logistic regression by damped Newton's method.

    Minimises the mean cross-entropy (class-balanced weights ``n / (2 n_c)``
    when ``balanced``) plus ``0.5*l2*||w||^2``; the bias is not penalised.
    Iterates until ``||grad|| <= 1e-2 * tol * (1 + ||w||)``. ``seed`` is
    accepted for interface uniformity; the solver itself is deterministic.
    """
    X, y = _check_xy(X, y)
    if y.max() > 1:
        raise DataError("train_logistic expects binary labels in {0, 1}")
    if l2 < 0:
        raise DataError("l2 must be non-negative")
    n, p = X.shape
    s = _class_weights(y, balanced)
    Xb = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(p + 1)
    reg = np.full(p + 1, float(l2))
    reg[-1] = 0.0
    yf = y.astype(np.float64)

    def fun(th):
        z = Xb @ th
        loss = np.sum(s * (-yf * log_expit(z) - (1 - yf) * log_expit(-z))) / n
        return loss + 0.5 * np.dot(reg * th, th), z

    f, z = fun(theta)
    for it in range(max_iter):
        pr = expit(z)
        g = Xb.T @ (s * (pr - yf)) / n + reg * theta
        gnorm = np.linalg.norm(g)
        if gnorm <= 1e-2 * tol * (1.0 + np.linalg.norm(theta[:-1])):
            break
        h = s * pr * (1 - pr) / n
        H = (Xb * h[:, None]).T @ Xb + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12 * (1.0 + np.trace(H) / (p + 1))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        slope = float(g @ step)
        while True:
            cand = theta - t * step
            f_new, z_new = fun(cand)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            break
        theta, f, z = cand, f_new, z_new
    else:
        log.warning("logistic regression hit max_iter=%d (||grad||=%.3g)", max_iter, gnorm)
    if not np.all(np.isfinite(theta)):
        raise NumericalError("logistic regression diverged")
    return LinearModel(theta[None, :-1], theta[-1:], 2,
                       {"penalty": "l2", "l2": float(l2), "balanced": bool(balanced)})


# ------------------------------------------------------------------ elastic net


def _onehot(y, m):
    Y = np.zeros((len(y), m))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def multinomial_loss_grad(W, b, X, y, m):
    """Mean multinomial cross-entropy and its gradient w.r.t. (W, b)."""
    Z = X @ W.T + b
    loss = float(np.mean(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]))
    R = (softmax(Z, axis=1) - _onehot(y, m)) / len(y)
    return loss, R.T @ X, R.sum(axis=0)


def _enet_penalty(W, lam, alpha):
    return lam * (alpha * np.abs(W).sum() + 0.5 * (1 - alpha) * np.sum(W * W))


def enet_kkt_residuals(model: LinearModel, X, y, lam: float, alpha: float) -> dict:
    """Optimality residuals of an elastic-net multinomial fit.

    zero weights: ``max(|g| - lam*alpha, 0)``; nonzero weights:
    ``|g + lam*alpha*sign(w) + lam*(1-alpha)*w|``; biases: ``|g_b|``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    W, b = np.asarray(model.weights), np.asarray(model.bias)
    _, gW, gb = multinomial_loss_grad(W, b, X, y, W.shape[0])
    zero = W == 0
    r_zero = np.maximum(np.abs(gW[zero]) - lam * alpha, 0.0)
    r_nz = np.abs(gW[~zero] + lam * alpha * np.sign(W[~zero]) + lam * (1 - alpha) * W[~zero])
    return {
        "zero": float(r_zero.max(initial=0.0)),
        "nonzero": float(r_nz.max(initial=0.0)),
        "bias": float(np.abs(gb).max(initial=0.0)),
    }


def train_elastic_net_linear(X, y, cfg: SolverConfig = SolverConfig(), *,
                             n_classes: int | None = None, kkt_tol: float = 1e-9,
                             obj_tol: float = 1e-8) -> LinearModel:
    """Sparse multinomial logistic layer.

    Minimises ``mean CE + lam*(alpha*||W||_1 + (1-alpha)/2*||W||_2^2)`` with
    the bias unpenalised, using proximal Newton steps whose subproblem is
    solved by soft-thresholding coordinate descent. Pruned weights are exact
    zeros. Stops once the KKT residual falls below ``kkt_tol``, or when the
    objective decrease drops below ``obj_tol`` while the residual already
    meets ``1e-7``, or after ``cfg.elastic_max_iters`` outer steps.
    """
    X, y = _check_xy(X, y, min_classes=1)
    n, p = X.shape
    m = max(int(y.max()) + 1, n_classes or 2)
    if n < m:
        raise DataError(f"need at least as many rows as classes (n={n}, m={m})")
    lam, alpha = float(cfg.elastic_lambda), float(cfg.elastic_alpha)
    l1, l2 = lam * alpha, lam * (1 - alpha)
    Xb = np.hstack([X, np.ones((n, 1))])
    q0 = p + 1
    Y = _onehot(y, m)
    theta = np.zeros((m, q0))
    penalized = np.zeros((m, q0), dtype=np.bool_)
    penalized[:, :p] = True
    pen_flat = penalized.ravel()

    def objective(th):
        Z = Xb @ th.T
        ce = float(np.mean(logsumexp(Z, axis=1) - Z[np.arange(n), y]))
        return ce + _enet_penalty(th[:, :p], lam, alpha), Z

    F, Z = objective(theta)
    converged = False
    for it in range(1, cfg.elastic_max_iters + 1):
        P = softmax(Z, axis=1)
        G = ((P - Y).T @ Xb) / n
        H = np.empty((m * q0, m * q0))
        for a in range(m):
            for c in range(a, m):
                wts = P[:, a] * ((a == c) - P[:, c]) / n
                blk = (Xb * wts[:, None]).T @ Xb
                H[a * q0:(a + 1) * q0, c * q0:(c + 1) * q0] = blk
                H[c * q0:(c + 1) * q0, a * q0:(a + 1) * q0] = blk.T
        th_flat = theta.ravel()
        z = th_flat.copy()
        _kernels.enet_cd_subproblem(H, G.ravel(), th_flat, pen_flat, l1, l2, z, 2000, 1e-13)
        d = z - th_flat
        pen_old = _enet_penalty(theta[:, :p], lam, alpha)
        pen_new = _enet_penalty(z.reshape(m, q0)[:, :p], lam, alpha)
        delta = float(G.ravel() @ d) + pen_new - pen_old
        t = 1.0
        while True:
            cand = (th_flat + t * d).reshape(m, q0)
            if t == 1.0:
                cand = z.reshape(m, q0).copy()
            F_new, Z_new = objective(cand)
            if not np.isfinite(F_new):
                raise NumericalError(f"elastic-net loss became non-finite at iteration {it}")
            if F_new <= F + 1e-4 * t * min(delta, 0.0) or t < 1e-10:
                break
            t *= 0.5
        decrease = F - F_new
        if decrease < 0:
            break
        theta, F, Z = cand, F_new, Z_new
        W_now = theta[:, :p]
        model = LinearModel(W_now, theta[:, p], m)
        res = enet_kkt_residuals(model, X, y, lam, alpha)
        worst = max(res.values())
        if worst <= kkt_tol or (decrease < obj_tol and worst <= 1e-7) or t < 1e-10:
            converged = True
            break
    if not converged:
        log.warning("elastic net stopped after %d iterations without meeting tolerance", it)
    b = theta[:, p] - theta[:, p].mean()
    return LinearModel(theta[:, :p], b, m, {
        "penalty": "elastic_net", "lambda": lam, "alpha": alpha, "iterations": it,
    })


def count_nonzero(model: LinearModel) -> int:
    return int(np.count_nonzero(model.weights))
