"""Gaussian-process surrogate with a Matern-5/2 kernel and expected improvement."""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.special import ndtr
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

SQRT5 = np.sqrt(5.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _npdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def matern52(A, B, length_scale=1.0, signal_variance=1.0):
    """Matern nu=5/2 covariance between the rows of ``A`` and ``B``."""
    ls = np.asarray(length_scale, dtype=float)
    A = np.atleast_2d(A) / ls
    B = np.atleast_2d(B) / ls
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    d = np.sqrt(np.maximum(sq, 0.0))
    return signal_variance * (1.0 + SQRT5 * d + 5.0 / 3.0 * d * d) * np.exp(-SQRT5 * d)


def _matern52_grad(A, B, dim, length_scale, signal_variance):
    """d k(a, b) / d a[dim] for every pair of rows."""
    ls = np.broadcast_to(np.asarray(length_scale, dtype=float), (np.atleast_2d(A).shape[1],))
    As = np.atleast_2d(A) / ls
    Bs = np.atleast_2d(B) / ls
    sq = (As * As).sum(1)[:, None] + (Bs * Bs).sum(1)[None, :] - 2.0 * As @ Bs.T
    d = np.sqrt(np.maximum(sq, 0.0))
    diff = (np.atleast_2d(A)[:, dim][:, None] - np.atleast_2d(B)[:, dim][None, :]) / ls[dim] ** 2
    return -5.0 / 3.0 * signal_variance * (1.0 + SQRT5 * d) * np.exp(-SQRT5 * d) * diff


class SurrogateDataset:
    """FIFO store of ``(input, observed value)`` pairs."""

    def __init__(self, dim: int, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.dim = dim
        self.capacity = capacity
        self._X = np.zeros((capacity, dim))
        self._y = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, x, y):
        self._X[self._next] = x
        self._y[self._next] = y
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, X, y):
        for xi, yi in zip(np.atleast_2d(X), np.atleast_1d(y)):
            self.add(xi, yi)

    @property
    def X(self) -> np.ndarray:
        """Stored inputs, oldest first."""
        if self._size < self.capacity:
            return self._X[: self._size].copy()
        return np.roll(self._X, -self._next, axis=0)

    @property
    def y(self) -> np.ndarray:
        if self._size < self.capacity:
            return self._y[: self._size].copy()
        return np.roll(self._y, -self._next)


class GaussianProcessSurrogate(RegressorMixin, BaseEstimator):
    """Exact GP regression with fixed hyper-parameters.

    Inputs are optionally standardised per column before the kernel is
    applied and targets optionally centred and scaled; with both switched
    off the model is the plain zero-mean GP. No marginal-likelihood fitting
    is performed.

    Parameters
    ----------
    length_scale : float or array-like
        Length-scale(s) in standardised input units.
    signal_variance : float
        Prior variance ``k(x, x)``.
    noise_variance : float
        Observation noise added to the diagonal, must be positive.
    normalize_x, normalize_y : bool
    """

    def __init__(self, length_scale=1.0, signal_variance=1.0, noise_variance=1e-2,
                 normalize_x=True, normalize_y=True):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.normalize_x = normalize_x
        self.normalize_y = normalize_y

    def fit(self, X, y):
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        X, y = check_X_y(X, y, y_numeric=True, dtype=float)
        self.n_features_in_ = X.shape[1]
        if self.normalize_x:
            self.x_mean_ = X.mean(axis=0)
            std = X.std(axis=0)
            self.x_std_ = np.where(std > 1e-12, std, 1.0)
        else:
            self.x_mean_ = np.zeros(X.shape[1])
            self.x_std_ = np.ones(X.shape[1])
        if self.normalize_y:
            self.y_mean_ = float(y.mean())
            sd = float(y.std())
            self.y_std_ = sd if sd > 1e-12 else 1.0
        else:
            self.y_mean_, self.y_std_ = 0.0, 1.0
        self.X_train_ = (X - self.x_mean_) / self.x_std_
        yn = (y - self.y_mean_) / self.y_std_
        K = matern52(self.X_train_, self.X_train_, self.length_scale, self.signal_variance)
        K[np.diag_indices_from(K)] += self.noise_variance
        try:
            self.chol_ = cho_factor(K, lower=True)
        except LinAlgError as exc:
            raise LinAlgError(f"covariance matrix is not positive definite: {exc}") from exc
        self.alpha_ = cho_solve(self.chol_, yn, check_finite=False)
        self.k_inv_ = cho_solve(self.chol_, np.eye(len(yn)), check_finite=False)
        return self

    def _scale(self, X):
        return (X - self.x_mean_) / self.x_std_

    def predict(self, X, return_std=False):
        check_is_fitted(self, "alpha_")
        X = check_array(X, dtype=float)
        return self._predict(X, return_std)

    def _predict(self, X, return_std=False):
        # unvalidated fast path used inside the acquisition loop
        mean, var = self._posterior(self._scale(X))
        mean = self.y_mean_ + self.y_std_ * mean
        if return_std:
            return mean, self.y_std_ * np.sqrt(var)
        return mean

    def best_mean(self) -> float:
        """Largest posterior mean over the training inputs (noisy-EI incumbent)."""
        check_is_fitted(self, "alpha_")
        mean, _ = self._posterior(self.X_train_)
        return float(self.y_mean_ + self.y_std_ * mean.max())

    def _posterior(self, Xs):
        Ks = matern52(Xs, self.X_train_, self.length_scale, self.signal_variance)
        mean = Ks @ self.alpha_
        v = solve_triangular(self.chol_[0], Ks.T, lower=True)
        var = self.signal_variance - (v * v).sum(axis=0)
        return mean, np.maximum(var, 0.0)

    def rate_slice(self, states):
        """Posterior along column 0 for fixed values of the remaining columns.

        Returns ``f(rates) -> (mean, dmean, std, dstd)`` for ``rates`` of shape
        ``(B, S)``, row ``b`` paired with ``states[b]``. The state part of every
        kernel distance is computed once, which makes repeated rate queries
        cheap.
        """
        check_is_fitted(self, "alpha_")
        states = np.atleast_2d(np.asarray(states, dtype=float))
        d = self.n_features_in_
        ls = np.broadcast_to(np.asarray(self.length_scale, dtype=float), (d,))
        train = self.X_train_ / ls
        if d > 1:
            q = ((states - self.x_mean_[1:]) / self.x_std_[1:]) / ls[1:]
            t = train[:, 1:]
            d2_state = np.maximum((q * q).sum(1)[:, None] + (t * t).sum(1)[None, :]
                                  - 2.0 * q @ t.T, 0.0)
        else:
            d2_state = np.zeros((states.shape[0], len(train)))
        t0 = train[:, 0]
        scale0 = self.x_std_[0] * ls[0]
        sv, ys = self.signal_variance, self.y_std_

        def evaluate(rates):
            u = (np.asarray(rates, dtype=float) - self.x_mean_[0]) / scale0  # (B, S)
            diff = u[:, :, None] - t0[None, None, :]
            dist = np.sqrt(d2_state[:, None, :] + diff * diff)
            e = np.exp(-SQRT5 * dist)
            k = sv * (1.0 + SQRT5 * dist + 5.0 / 3.0 * dist * dist) * e
            dk = -5.0 / 3.0 * sv * (1.0 + SQRT5 * dist) * e * diff / scale0
            mean = k @ self.alpha_
            dmean = dk @ self.alpha_
            w = k @ self.k_inv_
            var = np.maximum(sv - (k * w).sum(-1), 0.0)
            dvar = -2.0 * (dk * w).sum(-1)
            std = np.sqrt(var)
            dstd = np.where(std > 1e-12, dvar / (2.0 * np.maximum(std, 1e-12)), 0.0)
            return self.y_mean_ + ys * mean, ys * dmean, ys * std, ys * dstd

        return evaluate

    def predict_with_grad(self, X, dim=0):
        """Posterior mean/std and their derivatives along input column ``dim``."""
        check_is_fitted(self, "alpha_")
        Xs = self._scale(np.asarray(X, dtype=float))
        Ks = matern52(Xs, self.X_train_, self.length_scale, self.signal_variance)
        dKs = _matern52_grad(Xs, self.X_train_, dim, self.length_scale,
                             self.signal_variance) / self.x_std_[dim]
        mean = Ks @ self.alpha_
        dmean = dKs @ self.alpha_
        w = cho_solve(self.chol_, Ks.T)
        var = np.maximum(self.signal_variance - (Ks.T * w).sum(axis=0), 0.0)
        dvar = -2.0 * (dKs.T * w).sum(axis=0)
        std = np.sqrt(var)
        dstd = np.where(std > 1e-12, dvar / (2.0 * np.maximum(std, 1e-12)), 0.0)
        s = self.y_std_
        return self.y_mean_ + s * mean, s * dmean, s * std, s * dstd


def gp_posterior(model: GaussianProcessSurrogate, data: SurrogateDataset, query):
    """Posterior ``(mean, variance)`` at one query point given ``data``.

    An empty dataset yields the prior.
    """
    query = np.atleast_2d(np.asarray(query, dtype=float))
    if len(data) == 0:
        return 0.0, float(model.signal_variance)
    fitted = model.fit(data.X, data.y)
    mean, std = fitted.predict(query, return_std=True)
    return float(mean[0]), float(std[0] ** 2)


def expected_improvement(mean, std, incumbent):
    """EI for maximisation; reduces to ``max(mean - incumbent, 0)`` at zero std."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    gap = mean - incumbent
    safe = std > 1e-12
    z = np.where(safe, gap / np.where(safe, std, 1.0), 0.0)
    ei = np.where(safe, gap * ndtr(z) + std * _npdf(z), np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def _ei_and_grad(mean, dmean, std, dstd, incumbent):
    ei = expected_improvement(mean, std, incumbent)
    safe = std > 1e-12
    z = np.where(safe, (mean - incumbent) / np.where(safe, std, 1.0), 0.0)
    grad = np.where(safe, dmean * ndtr(z) + dstd * _npdf(z),
                    np.where(mean > incumbent, dmean, 0.0))
    return ei, grad


def maximize_ei_over_rate(model: GaussianProcessSurrogate, states, incumbent, r_max,
                          grid_size=64, n_starts=8, n_iter=12):
    """Rate maximising EI for every row of ``states``.

    The model input is ``[rate, *state]``. Each row is scored on a uniform
    grid over ``(0, r_max]``; the best ``n_starts`` grid points seed a
    projected gradient ascent with step adaptation. When the whole grid ties
    (for instance under the prior) the grid midpoint, lower side, wins.

    Returns ``(rates, ei)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    B = states.shape[0]
    grid = r_max * np.arange(1, grid_size + 1) / grid_size
    posterior = model.rate_slice(states)
    mean, _, std, _ = posterior(np.broadcast_to(grid, (B, grid_size)))
    ei = expected_improvement(mean, std, incumbent)

    best = ei.max(axis=1, keepdims=True)
    ties = ei >= best - 1e-12 * np.maximum(1.0, np.abs(best))
    flat = ties.all(axis=1)
    mid = (grid_size - 1) // 2
    top = mean.max(axis=1, keepdims=True)
    mean_flat = (mean >= top - 1e-12 * np.maximum(1.0, np.abs(top))).all(axis=1)
    fallback = np.where(mean_flat, mid, np.argmax(mean, axis=1))

    n_starts = min(n_starts, grid_size)
    order = np.argsort(-ei, axis=1, kind="stable")[:, :n_starts]
    r = grid[order]  # (B, S)
    cur = np.take_along_axis(ei, order, axis=1)
    step = np.full_like(r, r_max / grid_size)
    lo = r_max * 1e-6

    def ei_grad(rates):
        return _ei_and_grad(*posterior(rates), incumbent)

    _, g = ei_grad(r)
    for _ in range(n_iter):
        cand = np.clip(r + step * np.sign(g), lo, r_max)
        eic, gc = ei_grad(cand)
        better = eic > cur
        r = np.where(better, cand, r)
        cur = np.where(better, eic, cur)
        g = np.where(better, gc, g)
        step = np.where(better, step * 1.5, step * 0.5)
    pick = np.argmax(cur, axis=1)
    rows = np.arange(B)
    rates = np.where(flat, grid[fallback], r[rows, pick])
    return rates, np.where(flat, ei[rows, fallback], cur[rows, pick])


def select_rate_ei(model: GaussianProcessSurrogate, data: SurrogateDataset, state,
                   incumbent: float | None, r_max: float, **kwargs) -> float:
    """EI-maximising rate for one state; the prior argmax if ``data`` is empty.

    ``incumbent=None`` uses the best posterior mean over the stored inputs.
    """
    state = np.atleast_1d(np.asarray(state, dtype=float))
    if len(data) == 0:
        grid_size = kwargs.get("grid_size", 64)
        return float(r_max * ((grid_size - 1) // 2 + 1) / grid_size)
    model.fit(data.X, data.y)
    if incumbent is None:
        incumbent = model.best_mean()
    rates, _ = maximize_ei_over_rate(model, state[None, :], incumbent, r_max, **kwargs)
    return float(rates[0])
