"""Distribution tails needed by the residual tests.

Regularized incomplete gamma and beta functions by series / Lentz continued
fractions, which give the chi-square and F tails; the Kolmogorov limiting
distribution; and the normal CDF via ``erfc``.
"""

import math

EPS = 1e-12
TINY = 1e-300
MAX_ITER = 10_000


def _gamma_series(a, x):
    # P(a, x) by the power series, good for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a, x):
    # Q(a, x) by the modified Lentz continued fraction, good for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / TINY
    d = 1.0 / b
    h = d
    for i in range(1, MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < TINY:
            d = TINY
        c = b + an / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc(a, x):
    """Regularized lower incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gammaincc(a, x):
    """Regularized upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _beta_cf(a, b, x):
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < TINY:
        d = TINY
    d = 1.0 / d
    h = d
    for m in range(1, MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = TINY if abs(d) < TINY else d
        c = 1.0 + aa / c
        c = TINY if abs(c) < TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = TINY if abs(d) < TINY else d
        c = 1.0 + aa / c
        c = TINY if abs(c) < TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return h


def betainc(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _beta_cf(a, b, x) / a
    return 1.0 - bt * _beta_cf(b, a, 1.0 - x) / b


def chi2_sf(x, df):
    return gammaincc(df / 2.0, x / 2.0)


def chi2_cdf(x, df):
    return gammainc(df / 2.0, x / 2.0)


def f_sf(x, d1, d2):
    if x <= 0:
        return 1.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


def norm_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def kolmogorov_sf(x, terms=20):
    """``P(K > x)`` for the Kolmogorov limit distribution.

    Uses ``2 sum (-1)^(j-1) exp(-2 j^2 x^2)`` for ``x >= 1`` and the
    theta-function form of the CDF below that, where the alternating series
    converges slowly.
    """
    if x <= 0:
        return 1.0
    if x < 1.0:
        s = 0.0
        for j in range(1, terms + 1):
            s += math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8.0 * x * x))
        cdf = math.sqrt(2.0 * math.pi) / x * s
        return min(1.0, max(0.0, 1.0 - cdf))
    s = 0.0
    for j in range(1, terms + 1):
        s += (-1) ** (j - 1) * math.exp(-2.0 * j * j * x * x)
    return min(1.0, max(0.0, 2.0 * s))
