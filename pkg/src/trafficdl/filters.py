"""Per-sensor denoising: exponential smoothing, median filtering and l1 trend filtering."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field as dc_field
from functools import partial

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_solve_banded, cholesky_banded, solveh_banded
from scipy.signal import lfilter

from ._parallel import parallel_map
from .errors import ConvergenceError, DataError, ParameterError

logger = logging.getLogger(__name__)


def ewma(series, alpha):
    """Exponentially weighted moving average started at the first value."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ParameterError("series must be a non-empty vector")
    out, _ = lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
    return out


def median_filter(series, window, align=None):
    """Running median that only ever returns input values.

    Odd windows are centered, even windows trailing (causal); both are
    truncated at the series ends rather than padded.  When a window holds an
    even number of values the lower median is taken.

    Parameters
    ----------
    series : array_like
        1-D input.
    window : int
        Window length, >= 1.
    align : {"centered", "trailing"}, optional
        Override the parity-based default alignment.
    """
    window = int(window)
    if window <= 0:
        raise ParameterError("median window must be positive")
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ParameterError("series must be a non-empty vector")
    if align is None:
        align = "centered" if window % 2 else "trailing"
    if align == "centered":
        left = (window - 1) // 2
        right = window - 1 - left
    elif align == "trailing":
        left, right = window - 1, 0
    else:
        raise ParameterError(f"unknown alignment {align!r}")
    padded = np.concatenate([np.full(left, np.nan), x, np.full(right, np.nan)])
    win = np.sort(sliding_window_view(padded, window), axis=1)
    count = window - np.isnan(win).sum(axis=1)
    return win[np.arange(x.size), (count - 1) // 2]


# ---------------------------------------------------------------------------
# l1 trend filtering
# ---------------------------------------------------------------------------

_STENCIL = {1: np.array([1.0, -1.0]), 2: np.array([1.0, -2.0, 1.0])}


def diff_op(f, order):
    """Apply the difference matrix D^(order) (rows ``[1,-1]`` or ``[1,-2,1]``)."""
    return np.correlate(f, _STENCIL[order], "valid")


def diff_op_t(v, order):
    """Apply the transpose of D^(order)."""
    return np.convolve(v, _STENCIL[order])


def _gram_bands(order):
    """Autocorrelation of the stencil: entries of D D^T at offsets 0..order."""
    c = _STENCIL[order]
    return np.array([np.dot(c[: c.size - k], c[k:]) for k in range(order + 1)])


def _ddt_upper(m, order):
    g = _gram_bands(order)
    ab = np.zeros((order + 1, m))
    for k in range(order + 1):
        ab[order - k, k:] = g[k]
    return ab


def _system_upper(T, order, rho):
    """Upper banded storage of ``I + rho D^T D``."""
    c = _STENCIL[order]
    m = T - order
    ab = np.zeros((order + 1, T))
    # D^T D = sum over rows j of outer(c, c) placed at [j:j+order+1]
    for k in range(order + 1):
        diag = np.zeros(T - k)
        for a in range(order + 1 - k):
            diag[a:a + m] += c[a] * c[a + k]
        ab[order - k, k:] = rho * diag
    ab[order] += 1.0
    return ab


def trend_lambda_max(series, order=2):
    """Smallest penalty at which the fit collapses to a degree ``order-1`` polynomial."""
    y = np.asarray(series, dtype=float)
    m = y.size - order
    if m < 1:
        raise ParameterError(f"series needs at least {order + 1} points")
    u = solveh_banded(_ddt_upper(m, order), diff_op(y, order))
    return float(np.max(np.abs(u)))


@dataclass
class TrendFilterFit:
    """Result of :func:`trend_filter`.

    ``dual`` is the vector ``u`` with ``input - fitted = D^T u`` and
    ``|u| <= lam``; ``aux`` is the exactly sparse split variable ``z ~ D f``
    from which ``kinks`` are read.
    """

    input: np.ndarray
    fitted: np.ndarray
    order: int
    lam: float
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    kinks: list
    status: str
    dual: np.ndarray
    aux: np.ndarray
    objective_trace: list = dc_field(default_factory=list)

    @property
    def segments(self):
        """``(start, stop, intercept, slope)`` per piece between kinks (order 2) or
        ``(start, stop, level, 0.0)`` per constant piece (order 1)."""
        bounds = [0] + list(self.kinks) + [self.fitted.size]
        out = []
        t = np.arange(self.fitted.size, dtype=float)
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b - a >= 2 and self.order == 2:
                slope, icpt = np.polyfit(t[a:b], self.fitted[a:b], 1)
            else:
                slope, icpt = 0.0, float(np.mean(self.fitted[a:b]))
            out.append((a, b, float(icpt), float(slope)))
        return out


def trend_objective(y, f, lam, order):
    return 0.5 * float(np.sum((y - f) ** 2)) + lam * float(np.sum(np.abs(diff_op(f, order))))


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _kkt_point(y, lam, order, active, signs):
    """Solve the equality-constrained KKT system for a fixed active set."""
    m = y.size - order
    w = np.zeros(m)
    w[active] = lam * signs
    free = np.flatnonzero(~active)
    u = w.copy()
    if free.size:
        rhs = diff_op(y - diff_op_t(w, order), order)[free]
        g = _gram_bands(order)
        ab = np.zeros((order + 1, free.size))
        ab[order] = g[0]
        for k in range(1, order + 1):
            gap = free[k:] - free[:-k]
            ab[order - k, k:] = np.where(gap <= order, g[np.minimum(gap, order)], 0.0)
        u[free] = solveh_banded(ab, rhs)
    return y - diff_op_t(u, order), u


def _polish(y, lam, order, active, signs, refine=8):
    """Certify an optimum from a guessed active set, or return None.

    On success returns ``(fitted, dual, active)`` with the refined active set.

    A few primal-dual active-set corrections are applied: free constraints
    whose multiplier exceeds ``lam`` become active, active ones whose
    difference has the wrong sign are released.
    """
    active = active.copy()
    sgn = np.zeros(active.size)
    sgn[active] = signs
    slack = 1e-9 * max(lam, 1.0)
    tol = 1e-10 * (1.0 + np.max(np.abs(y)))
    for _ in range(refine + 1):
        f, u = _kkt_point(y, lam, order, active, sgn[active])
        df = diff_op(f, order)
        over = ~active & (np.abs(u) > lam + slack)
        wrong = active & (df * sgn < -tol)
        if not over.any() and not wrong.any():
            return f, u, active
        active[wrong] = False
        sgn[wrong] = 0.0
        active[over] = True
        sgn[over] = np.sign(u[over])
    return None


def trend_filter(series, lam, order=2, rho=None, abs_tol=1e-8, rel_tol=1e-6,
                 max_iter=50_000, polish=True, polish_every=25, trace=False):
    """Minimise ``0.5 ||y - f||^2 + lam ||D f||_1`` for D of the given order.

    ADMM on the split ``z = D f``: the ``f`` step solves the banded system
    ``(I + rho D^T D) f = y + rho D^T (z - u)`` by a cached banded Cholesky
    factor, the ``z`` step soft-thresholds at ``lam / rho``, and ``rho`` is
    rebalanced by a factor 2 whenever one residual dominates the other by 10x.
    Every ``polish_every`` iterations the sign pattern of ``z`` is tried as an
    active set; if the resulting KKT point certifies, it is returned exactly.

    Returns
    -------
    TrendFilterFit
        ``status`` is ``"optimal"`` for certified KKT points and
        ``"converged"`` when the ADMM residual tolerances were met.

    Raises
    ------
    ConvergenceError
        No certificate and residual tolerances unmet after ``max_iter``.
    """
    if order not in (1, 2):
        raise ParameterError("order must be 1 or 2")
    if lam < 0:
        raise ParameterError("lam must be non-negative")
    y = np.asarray(series, dtype=float)
    if y.ndim != 1 or y.size < order + 1:
        raise ParameterError(f"series needs at least {order + 1} points")
    if not np.all(np.isfinite(y)):
        raise ParameterError("series must be finite")
    T, m = y.size, y.size - order

    def done(f, u, z, it, r, s, status, hist):
        return TrendFilterFit(
            input=y, fitted=f, order=order, lam=float(lam),
            objective=trend_objective(y, f, lam, order), iterations=it,
            primal_residual=float(r), dual_residual=float(s),
            kinks=_kink_index(z, 1e-8 * np.max(np.abs(z)) if z.size and np.any(z) else 0.0),
            status=status, dual=u, aux=z, objective_trace=hist,
        )

    if lam == 0:
        return done(y.copy(), np.zeros(m), diff_op(y, order), 0, 0.0, 0.0, "optimal",
                    [0.0] if trace else [])
    if lam >= trend_lambda_max(y, order):
        sol = _polish(y, lam, order, np.zeros(m, dtype=bool), np.zeros(0))
        if sol is not None:
            f, u, _ = sol
            return done(f, u, np.zeros(m), 0, 0.0, 0.0, "optimal",
                        [trend_objective(y, f, lam, order)] if trace else [])

    rho = float(lam if rho is None else rho)
    factor = cholesky_banded(_system_upper(T, order, rho))
    f = y.copy()
    z = diff_op(f, order)
    u = np.zeros(m)
    hist = []
    r = s = np.inf
    for it in range(1, max_iter + 1):
        f = cho_solve_banded((factor, False), y + rho * diff_op_t(z - u, order))
        df = diff_op(f, order)
        v = df + u
        z_old = z
        z = _soft(v, lam / rho)
        u = v - z
        r = float(np.linalg.norm(df - z))
        s = rho * float(np.linalg.norm(diff_op_t(z - z_old, order)))
        if trace:
            hist.append(trend_objective(y, f, lam, order))
        if polish and it % polish_every == 0:
            active = z != 0
            sol = _polish(y, lam, order, active, np.sign(z[active]))
            if sol is not None:
                fp, up, final = sol
                if trace:
                    hist.append(trend_objective(y, fp, lam, order))
                zp = np.where(final, diff_op(fp, order), 0.0)
                return done(fp, up, zp, it, r, s, "optimal", hist)
        eps_pri = np.sqrt(m) * abs_tol + rel_tol * max(np.linalg.norm(df), np.linalg.norm(z))
        eps_dual = np.sqrt(T) * abs_tol + rel_tol * rho * np.linalg.norm(diff_op_t(u, order))
        if r <= eps_pri and s <= eps_dual:
            return done(f, rho * u, z, it, r, s, "converged", hist)
        if r > 10 * s:
            rho *= 2.0
            u /= 2.0
            factor = cholesky_banded(_system_upper(T, order, rho))
        elif s > 10 * r:
            rho /= 2.0
            u *= 2.0
            factor = cholesky_banded(_system_upper(T, order, rho))
    raise ConvergenceError(
        f"trend filter did not converge in {max_iter} iterations",
        primal_residual=r, dual_residual=s, fitted=f,
    )


def _kink_index(d, tol):
    return [int(j) + 1 for j in np.flatnonzero(np.abs(d) > tol)]


def kinks(fit, tol=None):
    """Indices where the fitted trend changes slope (order 2) or level (order 1).

    Row ``j`` of the difference matrix touches ``f[j..j+order]``; its kink is
    reported at ``j + 1``.  ``tol`` defaults to ``1e-8 * max |D f|``.
    """
    d = diff_op(fit.fitted, fit.order)
    if tol is None:
        tol = 1e-8 * float(np.max(np.abs(d))) if d.size else 0.0
    if tol <= 0 and not np.any(d):
        return []
    return _kink_index(d, tol)


# ---------------------------------------------------------------------------
# Field-level filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    """Which filter to apply: ``none``, ``median``, ``tf`` or ``ewma``."""

    kind: str = "none"
    window: int = 8
    lam: float = 15.0
    order: int = 2
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("none", "median", "tf", "ewma"):
            raise ParameterError(f"unknown filter kind {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """Parse ``none``, ``M8``, ``M(8)``, ``TF15``, ``TF(15,1)`` or ``EWMA(0.3)``."""
        if isinstance(text, FilterSpec):
            return text
        if isinstance(text, dict):
            return cls(**text)
        t = (text or "none").strip().replace(" ", "")
        if t.lower() in ("", "none"):
            return cls()
        mt = re.fullmatch(r"[Mm]\(?(\d+)\)?", t)
        if mt:
            return cls(kind="median", window=int(mt.group(1)))
        mt = re.fullmatch(r"TF\(?([0-9.eE+-]+?)(?:,([12]))?\)?", t, re.IGNORECASE)
        if mt:
            return cls(kind="tf", lam=float(mt.group(1)), order=int(mt.group(2) or 2))
        mt = re.fullmatch(r"EWMA\(?([0-9.eE+-]+)\)?", t, re.IGNORECASE)
        if mt:
            return cls(kind="ewma", alpha=float(mt.group(1)))
        raise ParameterError(f"cannot parse filter spec {text!r}")

    @property
    def label(self):
        if self.kind == "median":
            return f"M{self.window}"
        if self.kind == "tf":
            lam = f"{self.lam:g}"
            return f"TF{lam}" if self.order == 2 else f"TF({lam},{self.order})"
        if self.kind == "ewma":
            return f"EWMA{self.alpha:g}"
        return ""

    def to_dict(self):
        return {"kind": self.kind, "window": self.window, "lam": self.lam,
                "order": self.order, "alpha": self.alpha}

    def apply(self, series):
        if self.kind == "median":
            return median_filter(series, self.window)
        if self.kind == "tf":
            return trend_filter(series, self.lam, self.order).fitted
        if self.kind == "ewma":
            return ewma(series, self.alpha)
        return np.array(series, dtype=float)


def _filter_block(block, spec):
    return np.vstack([spec.apply(row) for row in block])


def filter_field(field, spec, workers=1):
    """Filter every sensor's series independently within each day."""
    spec = FilterSpec.parse(spec)
    if spec.kind == "none":
        return field
    if field.missing.any():
        raise DataError("filter_field needs a field without missing cells")
    slices = field.day_slices()
    blocks = parallel_map(partial(_filter_block, spec=spec),
                          [field.speeds[:, sl] for _, sl in slices], workers)
    out = np.empty_like(field.speeds)
    for (_, sl), b in zip(slices, blocks):
        out[:, sl] = b
    # filters may overshoot slightly below zero on steep drops
    return field.replace(speeds=np.maximum(out, 0.0), missing=np.zeros_like(field.missing))
