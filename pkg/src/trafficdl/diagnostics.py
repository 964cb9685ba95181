"""Residual diagnostics: autocorrelation, heteroskedasticity, neglected
nonlinearity, unit roots and normality.

Every test returns a :class:`TestResult`.  Tail probabilities come from the
in-house routines in ``_special``; the unit-root p-values use MacKinnon's
response surfaces.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import _special
from .errors import DegenerateError, DimensionError, ParameterError
from .seeding import derive_seed

DEFAULT_PORTMANTEAU_LAGS = 24
DEFAULT_BG_ORDER = 4
DEFAULT_LWG_Q = 10


@dataclass(frozen=True)
class TestResult:
    name: str
    statistic: float
    p_value: float
    df: dict
    null_hypothesis: str
    extras: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        if not math.isfinite(self.statistic):
            raise DegenerateError(f"{self.name}: non-finite statistic")
        object.__setattr__(self, "p_value", min(1.0, max(0.0, float(self.p_value))))
        object.__setattr__(self, "statistic", float(self.statistic))

    def to_dict(self):
        return asdict(self)


def _vector(x, name="series"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if not np.all(np.isfinite(x)):
        raise DegenerateError(f"{name} contains non-finite values")
    return x


def acf(series, max_lag):
    """Sample autocorrelations at lags ``0..max_lag`` (full-sample variance denominator)."""
    x = _vector(series)
    n = x.size
    if max_lag < 0 or n <= max_lag:
        raise ParameterError(f"need more than {max_lag} observations, got {n}")
    x = x - x.mean()
    c0 = float(x @ x)
    if c0 <= 1e-300 * max(1, n) or c0 <= 1e-24 * n * max(1.0, float(np.max(np.abs(x))) ** 2):
        raise DegenerateError("autocorrelation undefined for a constant series")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        out[k] = float(x[k:] @ x[:-k]) / c0
    return out


def box_pierce(resid, lags=DEFAULT_PORTMANTEAU_LAGS, variant="box_pierce"):
    """Portmanteau test for residual autocorrelation, ``chi2(lags)`` under the null."""
    if lags < 1:
        raise ParameterError("lags must be at least 1")
    x = _vector(resid, "residuals")
    n = x.size
    rho = acf(x, lags)[1:]
    if variant == "box_pierce":
        q = n * float(rho @ rho)
        name = "Box-Pierce"
    elif variant == "ljung_box":
        k = np.arange(1, lags + 1)
        q = n * (n + 2) * float(np.sum(rho * rho / (n - k)))
        name = "Ljung-Box"
    else:
        raise ParameterError(f"unknown variant {variant!r}")
    return TestResult(name, q, _special.chi2_sf(q, lags), {"df": lags},
                      "no autocorrelation")


def ljung_box(resid, lags=DEFAULT_PORTMANTEAU_LAGS):
    return box_pierce(resid, lags, variant="ljung_box")


def _with_intercept(Z, n):
    if Z is None:
        return np.ones((n, 1))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != n:
        raise DimensionError(f"regressors have {Z.shape[0]} rows, residuals {n}")
    if not np.all(np.isfinite(Z)):
        raise DegenerateError("regressors contain non-finite values")
    # constant columns are replaced by a single leading intercept
    const = np.all(Z == Z[:1], axis=0)
    return np.hstack([np.ones((n, 1)), Z[:, ~const]])


def _ssr(y, Z):
    """Residual sum of squares of ``y`` on ``Z``; rank-deficient ``Z`` is an error."""
    if Z.shape[1] >= Z.shape[0]:
        raise DegenerateError("auxiliary regression has no residual degrees of freedom")
    q, r = np.linalg.qr(Z)
    d = np.abs(np.diag(r))
    if d.size and d.min() <= 1e-10 * max(1.0, d.max()):
        raise DegenerateError("auxiliary regression is rank deficient")
    e = y - q @ (q.T @ y)
    return float(e @ e)


def breusch_godfrey(resid, regressors=None, order=DEFAULT_BG_ORDER, form="F"):
    """Serial-correlation test from the auxiliary regression on ``order`` lagged residuals.

    Both forms use ``R2 = 1 - SSR_u / SSR_r``, the share of the residual
    variation left after the regressors that the lags explain.  The F form is
    ``(R2 / order) / ((1 - R2) / (T - p - order))``, the LM form is ``T R2``.
    """
    if order < 1:
        raise ParameterError("order must be at least 1")
    e = _vector(resid, "residuals")
    n = e.size
    Z = _with_intercept(regressors, n)
    lagged = np.zeros((n, order))
    for j in range(1, order + 1):
        lagged[j:, j - 1] = e[:-j]
    ssr_r = _ssr(e, Z)
    if ssr_r <= 0:
        raise DegenerateError("residuals are exactly explained by the regressors")
    ssr_u = _ssr(e, np.hstack([Z, lagged]))
    r2 = max(0.0, 1.0 - ssr_u / ssr_r)
    dof = n - Z.shape[1] - order
    f_stat = (r2 / order) / ((1 - r2) / dof) if r2 < 1 else math.inf
    lm = n * r2
    f_p = _special.f_sf(f_stat, order, dof)
    lm_p = _special.chi2_sf(lm, order)
    extras = {"F": f_stat, "F_p": f_p, "LM": lm, "LM_p": lm_p, "r2": r2}
    if form == "F":
        return TestResult("Breusch-Godfrey", f_stat, f_p, {"df1": order, "df2": dof},
                          "no autocorrelation", extras)
    if form == "LM":
        return TestResult("Breusch-Godfrey", lm, lm_p, {"df": order},
                          "no autocorrelation", extras)
    raise ParameterError(f"unknown form {form!r}")


def breusch_pagan(resid, regressors=None):
    """Heteroskedasticity test regressing squared residuals on the regressors.

    The reported statistic is ``T R2`` (studentized form); the original
    ``ESS / (2 sigma^4)`` version is in ``extras``.
    """
    e = _vector(resid, "residuals")
    n = e.size
    Z = _with_intercept(regressors, n)
    u = e * e
    df = Z.shape[1] - 1
    if df == 0:
        return TestResult("Breusch-Pagan", 0.0, 1.0, {"df": 0}, "homoskedasticity",
                          {"original": 0.0, "original_p": 1.0})
    uc = u - u.mean()
    sst = float(uc @ uc)
    if sst <= 1e-24 * max(1.0, float(u.max()) ** 2) * n:
        raise DegenerateError("squared residuals are constant")
    ssr = _ssr(u, Z)
    r2 = max(0.0, 1.0 - ssr / sst)
    lm = n * r2
    sigma2 = float(u.mean())
    ess = sst - ssr
    orig = ess / (2 * sigma2 * sigma2)
    return TestResult("Breusch-Pagan", lm, _special.chi2_sf(lm, df), {"df": df},
                      "homoskedasticity",
                      {"original": orig, "original_p": _special.chi2_sf(orig, df)})


def lee_white_granger(resid, regressors, q=DEFAULT_LWG_Q, seed=0, variance_kept=0.99):
    """Neural-network test for neglected nonlinearity in the conditional mean.

    ``q`` hidden units ``tanh(gamma' [1, x])`` with ``gamma ~ U[-2, 2]`` are
    evaluated on the standardized regressors; their leading principal
    components (enough for ``variance_kept`` of the variance) are added to the
    regression of the residuals on the regressors, and ``T R2 ~ chi2(kept)``.
    """
    if q < 1:
        raise ParameterError("q must be at least 1")
    e = _vector(resid, "residuals")
    n = e.size
    if regressors is None:
        raise ParameterError("Lee-White-Granger needs regressors")
    Z = _with_intercept(regressors, n)
    X = Z[:, 1:]
    if X.shape[1] == 0:
        raise DegenerateError("no non-constant regressors")
    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    Xt = np.hstack([np.ones((n, 1)), Xs])
    rng = np.random.default_rng(derive_seed(seed, "lwg"))
    for attempt in range(10):
        gamma = rng.uniform(-2.0, 2.0, size=(Xt.shape[1], q))
        psi = np.tanh(Xt @ gamma)
        psi = psi - psi.mean(axis=0)
        if np.all(psi.std(axis=0) > 1e-8):
            break
    else:
        raise DegenerateError("phantom activations degenerate after 10 draws")
    u, s, _ = np.linalg.svd(psi, full_matrices=False)
    var = s * s
    cum = np.cumsum(var) / var.sum()
    kept = int(min(q, np.searchsorted(cum, variance_kept) + 1))
    pcs = u[:, :kept] * s[:kept]
    ssr_r = _ssr(e, Z)
    if ssr_r <= 0:
        raise DegenerateError("residuals are exactly explained by the regressors")
    ssr_u = _ssr(e, np.hstack([Z, pcs]))
    r2 = max(0.0, 1.0 - ssr_u / ssr_r)
    stat = n * r2
    return TestResult("Lee-White-Granger", stat, _special.chi2_sf(stat, kept),
                      {"df": kept}, "linearity in mean",
                      {"q": q, "seed": int(seed), "attempts": attempt + 1})


# MacKinnon (1994), "Approximate asymptotic distribution functions for
# unit-root and cointegration tests", JBES 12(2), Table 3 (one variable).
_MACKINNON_P = {
    "c": {
        "tau_star": -1.61, "tau_min": -18.83, "tau_max": 2.74,
        "small": (2.1659, 1.4412, 3.8269e-2),
        "large": (1.7339, 0.93202, -0.12745, -0.010368),
    },
    "ct": {
        "tau_star": -2.89, "tau_min": -16.18, "tau_max": 0.7,
        "small": (3.2512, 1.6047, 4.9588e-2),
        "large": (2.5261, 0.61654, -0.37956, -0.060285),
    },
}

# MacKinnon (2010), "Critical values for cointegration tests", Queen's
# Economics Department WP 1227, Table 2 (N = 1): b0 + b1/T + b2/T^2 + b3/T^3.
_MACKINNON_CRIT = {
    "c": {0.01: (-3.43035, -6.5393, -16.786, -79.433),
          0.05: (-2.86154, -2.8903, -4.234, -40.04),
          0.10: (-2.56677, -1.5384, -2.809, 0.0)},
    "ct": {0.01: (-3.95877, -9.0531, -28.428, -134.155),
           0.05: (-3.41049, -4.3904, -9.036, -45.374),
           0.10: (-3.12705, -2.5856, -3.925, -22.38)},
}

_ADF_SPECS = {"c": "c", "constant": "c", "ct": "ct", "constant+trend": "ct"}


def mackinnon_p(tau, spec="c"):
    """Asymptotic p-value of a Dickey-Fuller t-ratio."""
    t = _MACKINNON_P[_ADF_SPECS[spec]]
    if tau > t["tau_max"]:
        return 1.0
    if tau < t["tau_min"]:
        return 0.0
    coef = t["small"] if tau <= t["tau_star"] else t["large"]
    z = sum(c * tau ** i for i, c in enumerate(coef))
    return _special.norm_cdf(z)


def mackinnon_crit(nobs, spec="c"):
    """Finite-sample 1%, 5%, 10% critical values."""
    table = _MACKINNON_CRIT[_ADF_SPECS[spec]]
    return {a: b[0] + b[1] / nobs + b[2] / nobs ** 2 + b[3] / nobs ** 3
            for a, b in table.items()}


def default_adf_lags(n):
    return int(12 * (n / 100.0) ** 0.25)


def adf(series, lags=None, spec="c"):
    """Augmented Dickey-Fuller unit-root test (t-ratio on the lagged level)."""
    if spec not in _ADF_SPECS:
        raise ParameterError(f"unknown ADF spec {spec!r}")
    spec = _ADF_SPECS[spec]
    y = _vector(series)
    n = y.size
    if lags is None:
        lags = default_adf_lags(n)
    if lags < 0:
        raise ParameterError("lags must be non-negative")
    if n <= lags + 2 + (2 if spec == "ct" else 1) + 1:
        raise ParameterError(f"series of length {n} too short for {lags} lags")
    dy = np.diff(y)
    rows = np.arange(lags, dy.size)
    target = dy[rows]
    cols = [np.ones(rows.size)]
    if spec == "ct":
        cols.append(rows + 1.0)
    cols.append(y[rows])
    level = len(cols) - 1
    for i in range(1, lags + 1):
        cols.append(dy[rows - i])
    Z = np.column_stack(cols)
    nobs, k = Z.shape
    q, r = np.linalg.qr(Z)
    d = np.abs(np.diag(r))
    if d.min() <= 1e-10 * max(1.0, d.max()):
        raise DegenerateError("ADF regression is rank deficient")
    beta = np.linalg.solve(r, q.T @ target)
    resid = target - Z @ beta
    s2 = float(resid @ resid) / (nobs - k)
    if s2 <= 0:
        raise DegenerateError("ADF regression fits exactly")
    rinv = np.linalg.solve(r, np.eye(k))
    se = math.sqrt(s2 * float(rinv[level] @ rinv[level]))
    tau = beta[level] / se
    return TestResult(
        "Dickey-Fuller", tau, mackinnon_p(tau, spec), {"lags": int(lags), "nobs": int(nobs)},
        "unit root (non-stationary)",
        {"spec": spec, "gamma": float(beta[level]),
         "critical_values": {str(a): v for a, v in mackinnon_crit(nobs, spec).items()}},
    )


LILLIEFORS_REPS = 20_000
LILLIEFORS_MAX_N = 1000


def _ks_stat(z):
    """Two-sided KS distance between sorted rows of ``z`` and the standard normal."""
    n = z.shape[-1]
    cdf = 0.5 * _erfc(-z / math.sqrt(2.0))
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - cdf, axis=-1)
    d_minus = np.max(cdf - (i - 1) / n, axis=-1)
    return np.maximum(d_plus, d_minus)


_erfc = np.vectorize(math.erfc, otypes=[float])


def _modified(d, n):
    return d * (math.sqrt(n) - 0.01 + 0.85 / math.sqrt(n))


@lru_cache(maxsize=32)
def _lilliefors_null(n):
    """Sorted Monte Carlo null of the modified statistic for sample size ``n``."""
    rng = np.random.default_rng(derive_seed(20240, "lilliefors", n))
    out = np.empty(LILLIEFORS_REPS)
    chunk = max(1, 2_000_000 // n)
    for start in range(0, LILLIEFORS_REPS, chunk):
        m = min(chunk, LILLIEFORS_REPS - start)
        z = rng.standard_normal((m, n))
        z = (z - z.mean(axis=1, keepdims=True)) / z.std(axis=1, ddof=1, keepdims=True)
        z.sort(axis=1)
        out[start:start + m] = _modified(_ks_stat(z), n)
    out.sort()
    return out


def ks_normality(resid, method="lilliefors"):
    """Kolmogorov-Smirnov distance of standardized residuals from N(0, 1).

    ``method="kolmogorov"`` reads the p-value off the limiting Kolmogorov
    distribution of ``sqrt(n) D``, which ignores that mean and variance were
    estimated and is therefore conservative.  The default ``"lilliefors"``
    uses a seeded Monte Carlo null of the same statistic with estimated
    parameters (simulated at ``min(n, 1000)`` on the scale-stabilised
    statistic ``D (sqrt(n) - 0.01 + 0.85 / sqrt(n))``).
    """
    x = _vector(resid, "residuals")
    n = x.size
    if n < 8:
        raise ParameterError("need at least 8 observations")
    sd = x.std(ddof=1)
    if not sd > 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        raise DegenerateError("zero variance")
    z = np.sort((x - x.mean()) / sd)
    d = float(_ks_stat(z[None, :])[0])
    if method == "kolmogorov":
        p = _special.kolmogorov_sf(math.sqrt(n) * d)
    elif method == "lilliefors":
        null = _lilliefors_null(min(n, LILLIEFORS_MAX_N))
        exceed = null.size - np.searchsorted(null, _modified(d, n), side="left")
        p = (1 + exceed) / (1 + null.size)
    else:
        raise ParameterError(f"unknown method {method!r}")
    return TestResult("Kolmogorov-Smirnov", d, p, {"n": n}, "normality", {"method": method})


TABLE_ROWS = ("Box-Pierce", "Breusch-Godfrey", "Breusch-Pagan", "Lee-White-Granger",
              "Dickey-Fuller")


@dataclass
class DiagnosticsReport:
    residual_mean: float
    residual_variance: float
    acf: np.ndarray
    tests: list
    degenerate: dict = field(default_factory=dict)

    def test(self, name):
        for t in self.tests:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self):
        return {
            "residual_mean": self.residual_mean,
            "residual_variance": self.residual_variance,
            "acf": [float(v) for v in self.acf],
            "tests": [t.to_dict() for t in self.tests],
            "degenerate": dict(self.degenerate),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def format_table(self, label="model"):
        """Plain-text table: one row per classic test, ``statistic (p-value)``."""
        width = max(len(r) for r in TABLE_ROWS) + 2
        lines = [f"{'Test':<{width}}{'H0':<28}{label}"]
        for name in TABLE_ROWS:
            try:
                t = self.test(name)
                cell = f"{t.statistic:.4g} ({t.p_value:.3g})"
                h0 = t.null_hypothesis
            except KeyError:
                cell = "degenerate"
                h0 = ""
            lines.append(f"{name:<{width}}{h0:<28}{cell}")
        return "\n".join(lines)


def diagnostics_report(y, yhat, regressors=None, portmanteau_lags=DEFAULT_PORTMANTEAU_LAGS,
                       bg_order=DEFAULT_BG_ORDER, bg_form="F", lwg_q=DEFAULT_LWG_Q,
                       adf_lags=None, adf_spec="c", ks_method="lilliefors", seed=0):
    """Residual summary and the full test battery for ``r = y - yhat``.

    Without explicit ``regressors`` the fitted values serve as the single
    regressor for the heteroskedasticity and nonlinearity tests.  Tests that
    are undefined for the residuals are listed in ``degenerate`` instead of
    raising.
    """
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise DimensionError("y and yhat differ in length")
    r = y - yhat
    if regressors is None:
        regressors = yhat[:, None]
    tests, degenerate = [], {}
    try:
        rho = acf(r, min(portmanteau_lags, r.size - 1))
    except DegenerateError as exc:
        rho = np.array([1.0])
        degenerate["acf"] = str(exc)
    runs = [
        ("Box-Pierce", lambda: box_pierce(r, portmanteau_lags)),
        ("Ljung-Box", lambda: ljung_box(r, portmanteau_lags)),
        ("Breusch-Godfrey", lambda: breusch_godfrey(r, regressors, bg_order, bg_form)),
        ("Breusch-Pagan", lambda: breusch_pagan(r, regressors)),
        ("Lee-White-Granger", lambda: lee_white_granger(r, regressors, lwg_q, seed)),
        ("Dickey-Fuller", lambda: adf(r, adf_lags, adf_spec)),
        ("Kolmogorov-Smirnov", lambda: ks_normality(r, ks_method)),
    ]
    for name, run in runs:
        try:
            tests.append(run())
        except DegenerateError as exc:
            degenerate[name] = str(exc)
    return DiagnosticsReport(float(r.mean()), float(r.var()), rho, tests, degenerate)
