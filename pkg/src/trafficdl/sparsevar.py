"""Sparse linear vector autoregression fitted by l1-penalised least squares.

Each target row of the coefficient matrix is an independent lasso problem

    minimise (1 / 2T) ||y - X w - b||^2 + lam ||w||_1

solved by cyclic coordinate descent on the Gram matrix.  The intercept is
unpenalised and profiled out by centering.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ._parallel import parallel_map
from .errors import ConvergenceError, DataError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "trafficdl.sparse_var"
MODEL_VERSION = 1


def lambda_max(X, y):
    """Smallest penalty for which the lasso solution is identically zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.size == 0 or X.shape[0] == 0:
        raise DataError("empty design")
    T = X.shape[0]
    Xc = X - X.mean(axis=0)
    return float(np.max(np.abs(Xc.T @ (y - y.mean())))) / T


def lasso_objective(X, y, w, b, lam):
    r = y - X @ w - b
    return 0.5 * float(r @ r) / X.shape[0] + lam * float(np.sum(np.abs(w)))


@dataclass
class LassoResult:
    coef: np.ndarray
    intercept: float
    iterations: int
    gap: float
    objective_trace: list = field(default_factory=list)


def _duality_gap(G, c, yy, w, lam):
    """Gap of the centered problem from Gram quantities (all scaled by 1/T)."""
    grad = c - G @ w  # (1/T) X^T r
    primal = 0.5 * (yy - 2 * c @ w + w @ G @ w) + lam * np.sum(np.abs(w))
    gmax = np.max(np.abs(grad)) if grad.size else 0.0
    s = 1.0 if gmax <= lam or gmax == 0 else lam / gmax
    # dual point theta = s r / T ; D(theta) = 0.5 ||y||^2/T - 0.5 T ||theta - y/T||^2
    rr = yy - 2 * c @ w + w @ G @ w
    ry = yy - c @ w
    dual = 0.5 * yy - 0.5 * (s * s * rr - 2 * s * ry + yy)
    return max(0.0, float(primal - dual))


def lasso_fit(X, y, lam, tol=1e-7, max_cycles=10_000, trace=False, gram=None, w0=None,
              polish_every=20):
    """Coordinate-descent lasso with an unpenalised intercept.

    Parameters
    ----------
    X : ndarray, shape (T, p)
    y : ndarray, shape (T,)
    lam : float
        Penalty weight on the ``1/(2T)``-scaled squared loss.
    tol : float
        Stop when no coefficient moves by more than ``tol`` in a full cycle.
    max_cycles : int
        Cap on full cycles.
    trace : bool
        Record the objective after each full cycle.
    gram : tuple, optional
        Precomputed ``(mean_X, G)`` with ``G = Xc^T Xc / T``, shared across
        targets of one design.
    w0 : ndarray, optional
        Warm start (e.g. the solution at a neighbouring penalty).
    polish_every : int
        While cycling on a fixed support, every ``polish_every`` cycles try
        jumping to the exact minimiser for the current support and signs.
        The jump is taken only if it keeps the signs, so the objective never
        increases; the following full sweep still decides convergence.

    Returns
    -------
    LassoResult
    """
    if lam < 0:
        raise ParameterError("lam must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    T, p = X.shape
    if T < 1 or p < 1:
        raise DataError("lasso needs at least one row and one column")
    if y.shape[0] != T:
        raise DimensionError("X and y disagree on the number of rows")
    if gram is None:
        xm = X.mean(axis=0)
        Xc = X - xm
        G = Xc.T @ Xc / T
    else:
        xm, G = gram
        Xc = X - xm
    ym = y.mean()
    yc = y - ym
    c = Xc.T @ yc / T
    yy = float(yc @ yc) / T
    diag = np.diag(G).copy()
    usable = diag > 1e-14 * max(1.0, float(diag.max()) if p else 1.0)
    if w0 is None:
        w = np.zeros(p)
        grad = c.copy()  # c - G w, maintained incrementally
    else:
        w = np.where(usable, np.asarray(w0, dtype=float), 0.0)
        grad = c - G @ w

    def obj():
        return 0.5 * (yy - 2 * c @ w + w @ G @ w) + lam * np.sum(np.abs(w))

    def sweep(idx):
        biggest = 0.0
        for j in idx:
            wj = w[j]
            rho = grad[j] + diag[j] * wj
            if rho > lam:
                new = (rho - lam) / diag[j]
            elif rho < -lam:
                new = (rho + lam) / diag[j]
            else:
                new = 0.0
            delta = new - wj
            if delta != 0.0:
                w[j] = new
                grad[:] -= G[:, j] * delta
                biggest = max(biggest, abs(delta))
        return biggest

    def polish():
        act = np.flatnonzero(w != 0)
        if act.size == 0:
            return False
        sg = np.sign(w[act])
        try:
            sol = np.linalg.solve(G[np.ix_(act, act)], c[act] - lam * sg)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(sol)) or np.any(np.sign(sol) != sg):
            return False
        w[act] = sol
        grad[:] = c - G @ w
        return True

    hist = [float(obj())] if trace else []
    all_idx = np.flatnonzero(usable)
    cycles = 0
    while cycles < max_cycles:
        cycles += 1
        moved = sweep(all_idx)
        if trace:
            hist.append(float(obj()))
        if moved < tol:
            break
        # iterate on the current support until it settles, then re-check all
        inner = 0
        while cycles < max_cycles:
            act = np.flatnonzero(w != 0)
            cycles += 1
            inner += 1
            moved = sweep(act)
            if trace:
                hist.append(float(obj()))
            if moved < tol:
                break
            if polish_every and inner % polish_every == 0 and polish():
                if trace:
                    hist.append(float(obj()))
                break
    else:
        gap = _duality_gap(G, c, yy, w, lam)
        raise ConvergenceError(f"lasso did not converge in {max_cycles} cycles", gap=gap)
    gap = _duality_gap(G, c, yy, w, lam)
    b = ym - xm @ w
    return LassoResult(coef=w, intercept=float(b), iterations=cycles, gap=gap,
                       objective_trace=hist)


@dataclass(eq=False)
class SparseVarModel:
    """Row-wise lasso VAR ``yhat = A x + intercept`` in original speed units.

    ``A_std``/``intercept_std`` hold the same model on the standardized
    design scale, with ``center``/``scale`` the column statistics used.
    """

    A: np.ndarray
    intercept: np.ndarray
    lam: float
    column_map: tuple
    target_sensors: tuple
    residual_variance: np.ndarray
    A_std: np.ndarray
    intercept_std: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    k: int = 0
    h: int = 0
    fit_meta: dict = field(default_factory=dict)

    @property
    def support(self):
        return np.abs(self.A) > 0

    def predict(self, X_raw):
        """Forecasts for rows of raw (unstandardized) lag vectors."""
        X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
        if X_raw.shape[1] != self.A.shape[1]:
            raise DimensionError(f"expected {self.A.shape[1]} columns, got {X_raw.shape[1]}")
        return X_raw @ self.A.T + self.intercept

    def predict_standardized(self, X_std):
        X_std = np.atleast_2d(np.asarray(X_std, dtype=float))
        return X_std @ self.A_std.T + self.intercept_std

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "lambda": self.lam,
            "k": self.k,
            "h": self.h,
            "target_sensors": list(self.target_sensors),
            "column_map": [[s, int(l)] for s, l in self.column_map],
            "A": self.A.tolist(),
            "intercept": self.intercept.tolist(),
            "residual_variance": self.residual_variance.tolist(),
            "A_std": self.A_std.tolist(),
            "intercept_std": self.intercept_std.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "fit_meta": self.fit_meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise DataError("not a sparse VAR model file")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {d.get('version')}")
        return cls(
            A=np.array(d["A"], dtype=float),
            intercept=np.array(d["intercept"], dtype=float),
            lam=float(d["lambda"]),
            column_map=tuple((s, int(l)) for s, l in d["column_map"]),
            target_sensors=tuple(d["target_sensors"]),
            residual_variance=np.array(d["residual_variance"], dtype=float),
            A_std=np.array(d["A_std"], dtype=float),
            intercept_std=np.array(d["intercept_std"], dtype=float),
            center=np.array(d["center"], dtype=float),
            scale=np.array(d["scale"], dtype=float),
            k=int(d.get("k", 0)),
            h=int(d.get("h", 0)),
            fit_meta=d.get("fit_meta", {}),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _fit_target(j, X, Y, lam, gram, tol, warm):
    res = lasso_fit(X, Y[:, j], lam, tol=tol, gram=gram,
                    w0=None if warm is None else warm[j])
    return res.coef, res.intercept, res.iterations, res.gap


def fit_sparse_var(design, lam, tol=1e-7, workers=1, warm_start=None):
    """Fit one lasso per target column of ``design.y``.

    The design should be standardized so the penalty treats columns alike;
    coefficients are mapped back to original units afterwards.
    ``warm_start`` is a model (or standardized coefficient matrix) whose
    coefficients seed the solver.
    """
    if isinstance(warm_start, SparseVarModel):
        warm_start = warm_start.A_std
    if design.n_rows < 2:
        raise DataError("need at least two rows")
    X = design.X
    if design.standardized:
        center, scale = design.center, design.scale
    else:
        center, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Y = design.y
    xm = X.mean(axis=0)
    gram = (xm, (X - xm).T @ (X - xm) / X.shape[0])
    fits = parallel_map(
        partial(_fit_target, X=X, Y=Y, lam=lam, gram=gram, tol=tol, warm=warm_start),
        range(Y.shape[1]), workers,
    )
    A_std = np.vstack([f[0] for f in fits])
    b_std = np.array([f[1] for f in fits])
    A = A_std / scale
    intercept = b_std - A @ center
    resid = Y - (X @ A_std.T + b_std)
    return SparseVarModel(
        A=A,
        intercept=intercept,
        lam=float(lam),
        column_map=design.column_map,
        target_sensors=design.target_sensors,
        residual_variance=np.mean(resid ** 2, axis=0),
        A_std=A_std,
        intercept_std=b_std,
        center=np.asarray(center, dtype=float),
        scale=np.asarray(scale, dtype=float),
        k=design.k,
        h=design.h,
        fit_meta={
            "iterations": [int(f[2]) for f in fits],
            "duality_gap": [float(f[3]) for f in fits],
        },
    )


def var_lambda_max(design):
    return max(lambda_max(design.X, design.y[:, j]) for j in range(design.y.shape[1]))


def support(model, target, threshold=0.0):
    """Predictors ``(sensor, lag)`` with ``|A| > threshold``, largest first."""
    try:
        i = model.target_sensors.index(str(target))
    except ValueError:
        raise DataError(f"unknown target {target!r}") from None
    row = np.abs(model.A[i])
    idx = np.flatnonzero(row > threshold)
    idx = idx[np.argsort(-row[idx], kind="stable")]
    return [model.column_map[j] for j in idx]


def var_forecast(model, x_t):
    """``A x_t + intercept`` for one raw lag vector ordered as ``model.column_map``."""
    x = np.asarray(x_t, dtype=float)
    if x.ndim != 1 or x.size != model.A.shape[1]:
        raise DimensionError(f"lag vector must have length {model.A.shape[1]}")
    return model.A @ x + model.intercept


def lambda_grid(lmax, n=10, ratio=1e-3):
    """Log-spaced grid from ``lmax`` down to ``ratio * lmax``."""
    return lmax * np.logspace(0, np.log10(ratio), n)


def select_lambda(train, valid, grid=None, n=10, workers=1):
    """Pick the grid penalty with the smallest validation MSE (ties -> larger penalty).

    Returns ``(best_lambda, table)`` where ``table`` lists ``(lambda, mse, nnz)``
    from the largest penalty down; each fit is warm-started from the previous.
    """
    if grid is None:
        grid = lambda_grid(var_lambda_max(train), n)
    table = []
    model = None
    for lam in sorted(grid, reverse=True):
        model = fit_sparse_var(train, lam, workers=workers, warm_start=model)
        pred = model.predict(valid.raw_X())
        mse = float(np.mean((valid.y - pred) ** 2))
        table.append((float(lam), mse, int(model.support.sum())))
        logger.debug("lambda %.4g: valid mse %.4f, nnz %d", lam, mse, table[-1][2])
    best = min(table, key=lambda r: (r[1], -r[0]))
    return best[0], table
