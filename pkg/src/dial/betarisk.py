"""Beta-distribution risk measures.

Feasibility of a state-action step is modelled as a Beta-distributed random
variable on (0, 1).  This module provides the pieces the rest of the package
builds on: the regularized incomplete beta function (continued fraction),
digamma, the lower-tail quantile (value at risk), the closed-form conditional
value at risk of a Beta variable, and the closed-form KL divergence between
two Beta distributions.

Scalar entry points take `BetaParams` / `RiskLevel` and are the documented
contract.  The `*_arr` functions are the same numerics vectorized over numpy
arrays; the scalar functions call them, so both paths agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BetaParams",
    "RiskLevel",
    "log_beta_fn",
    "digamma",
    "beta_cdf",
    "beta_pdf",
    "var_lambda",
    "cvar_lambda",
    "beta_kl",
    "digamma_arr",
    "betainc_arr",
    "beta_pdf_arr",
    "var_arr",
    "cvar_arr",
    "beta_kl_arr",
    "beta_mean_arr",
]


@dataclass(frozen=True)
class BetaParams:
    """Shape parameters of a Beta distribution, both strictly positive."""

    alpha1: float
    alpha2: float

    def __post_init__(self):
        a1, a2 = self.alpha1, self.alpha2
        if not (math.isfinite(a1) and math.isfinite(a2)) or a1 <= 0.0 or a2 <= 0.0:
            raise ValueError(f"Beta shape parameters must be finite and > 0, got ({a1}, {a2})")

    @property
    def mean(self) -> float:
        return self.alpha1 / (self.alpha1 + self.alpha2)


@dataclass(frozen=True)
class RiskLevel:
    """Tail probability lam in (0, 1].  lam = 1 recovers the plain mean."""

    lam: float

    def __post_init__(self):
        lam = self.lam
        if not math.isfinite(lam) or lam <= 0.0 or lam > 1.0:
            raise ValueError(f"risk level must lie in (0, 1], got {lam}")


# ---------------------------------------------------------------------------
# log-gamma (Lanczos, g = 7, 9 coefficients) and digamma

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


def _lgamma_core(z: np.ndarray) -> np.ndarray:
    # valid for z >= 0.5
    z = z - 1.0
    x = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, 9):
        x = x + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (z + 0.5) * np.log(t) - t + np.log(x)


def lgamma_arr(z) -> np.ndarray:
    """Elementwise ln Gamma(z) for z > 0."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.5
    if small.any():
        zs = z[small]
        # reflection keeps the Lanczos core in its accurate region
        out[small] = np.log(np.pi / np.sin(np.pi * zs)) - _lgamma_core(1.0 - zs)
    rest = ~small
    if rest.any():
        out[rest] = _lgamma_core(z[rest])
    return out


def log_beta_fn(a: float, b: float) -> float:
    """ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b)."""
    if not (math.isfinite(a) and math.isfinite(b)) or a <= 0.0 or b <= 0.0:
        raise ValueError(f"log_beta_fn requires positive finite arguments, got ({a}, {b})")
    return float(_log_beta_arr(np.float64(a), np.float64(b)))


def _log_beta_arr(a, b) -> np.ndarray:
    return lgamma_arr(a) + lgamma_arr(b) - lgamma_arr(a + b)


def digamma_arr(x) -> np.ndarray:
    """Elementwise digamma for x > 0.

    Recurrence psi(x) = psi(x + 1) - 1/x lifts the argument above 12, where
    the asymptotic series in 1/x^2 is accurate to full double precision.
    """
    x = np.asarray(x, dtype=float)
    if x.size and (not np.isfinite(x).all() or (x <= 0.0).any()):
        raise ValueError("digamma requires x > 0")
    acc = np.zeros_like(x)
    xx = x.astype(float).copy()
    while True:
        low = xx < 12.0
        if not low.any():
            break
        acc[low] -= 1.0 / xx[low]
        xx[low] += 1.0
    inv = 1.0 / xx
    u = inv * inv
    tail = u * (1.0 / 12.0 - u * (1.0 / 120.0 - u * (1.0 / 252.0 - u * (
        1.0 / 240.0 - u * (1.0 / 132.0 - u * (691.0 / 32760.0))))))
    return acc + np.log(xx) - 0.5 * inv - tail


def digamma(x: float) -> float:
    """Digamma function psi(x) for scalar x > 0."""
    return float(digamma_arr(np.float64(x)))


# ---------------------------------------------------------------------------
# regularized incomplete beta via continued fraction (modified Lentz scheme)

_TINY = 1e-300
_CF_EPS = 1e-15
_CF_MAX_ITER = 300


def _betacf(a, b, x):
    """Continued fraction for I_x(a, b); caller guarantees the convergent region."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _TINY, _TINY, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        h = h * d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = h * delta
        done |= np.abs(delta - 1.0) < _CF_EPS
        if done.all():
            break
    if not done.all():
        worst = int(np.argmin(done))
        raise RuntimeError(
            "incomplete beta continued fraction failed to converge "
            f"(a={a.ravel()[worst]}, b={b.ravel()[worst]}, x={x.ravel()[worst]})")
    return h


def betainc_arr(a, b, x) -> np.ndarray:
    """Elementwise regularized incomplete beta I_x(a, b)."""
    a, b, x = np.broadcast_arrays(
        np.asarray(a, float), np.asarray(b, float), np.asarray(x, float))
    shape = x.shape
    af, bf, xf = a.ravel(), b.ravel(), x.ravel()
    out = np.empty_like(xf)
    out[xf <= 0.0] = 0.0
    out[xf >= 1.0] = 1.0
    mid = (xf > 0.0) & (xf < 1.0)
    if mid.any():
        am, bm, xm = af[mid], bf[mid], xf[mid]
        res = np.empty_like(xm)
        direct = xm < (am + 1.0) / (am + bm + 2.0)
        if direct.any():
            aa, bb, xx = am[direct], bm[direct], xm[direct]
            front = np.exp(aa * np.log(xx) + bb * np.log1p(-xx) - _log_beta_arr(aa, bb))
            res[direct] = front * _betacf(aa, bb, xx) / aa
        flip = ~direct
        if flip.any():
            # symmetry I_x(a, b) = 1 - I_{1-x}(b, a)
            aa, bb, xx = bm[flip], am[flip], 1.0 - xm[flip]
            front = np.exp(aa * np.log(xx) + bb * np.log1p(-xx) - _log_beta_arr(aa, bb))
            res[flip] = 1.0 - front * _betacf(aa, bb, xx) / aa
        out[mid] = res
    return np.clip(out.reshape(shape), 0.0, 1.0)


def beta_pdf_arr(a, b, x) -> np.ndarray:
    """Beta density, elementwise, for x strictly inside (0, 1)."""
    a, b, x = np.broadcast_arrays(
        np.asarray(a, float), np.asarray(b, float), np.asarray(x, float))
    return np.exp((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - _log_beta_arr(a, b))


def beta_cdf(x: float, p: BetaParams) -> float:
    """P(Z <= x) for Z ~ Beta(p)."""
    if not math.isfinite(x):
        raise ValueError(f"beta_cdf requires finite x, got {x}")
    return float(betainc_arr(np.float64(p.alpha1), np.float64(p.alpha2), np.float64(x)))


def beta_pdf(x: float, p: BetaParams) -> float:
    if x <= 0.0 or x >= 1.0:
        raise ValueError(f"beta_pdf expects x in the open interval (0, 1), got {x}")
    return float(beta_pdf_arr(np.float64(p.alpha1), np.float64(p.alpha2), np.float64(x)))


# ---------------------------------------------------------------------------
# quantile (value at risk) and conditional value at risk

_BISECT_STEPS = 50          # halves a 1400-wide logit bracket to ~1e-12
_NEWTON_MAX = 30
_QUANTILE_ATOL = 1e-10
_LOGIT_SPAN = 700.0         # sigmoid(-700) ~ 1e-304, the edge of normal doubles
_BRACKET_FLOOR = 1e-12      # logit width at which doubles stop resolving


def _sigmoid(t):
    e = np.exp(-np.abs(t))
    return np.where(t < 0.0, e / (1.0 + e), 1.0 / (1.0 + e))


def var_arr(a, b, lam) -> np.ndarray:
    """Elementwise lower quantile x with I_x(a, b) = lam.

    Solved in logit space, t = log(x / (1 - x)): tiny shape parameters put
    the quantile at scales like 1e-40 where linear bisection stalls, while
    log(cdf) stays polynomial in t.  Bisection narrows a [-700, 700] bracket,
    then safeguarded Newton on t (slope pdf(x) x (1 - x)) polishes to 1e-10.
    A bracket already at double resolution is accepted as converged: there
    the exact quantile sits between adjacent floats or underflows outright.
    lam = 1 short-circuits to the distribution's upper endpoint.
    """
    a, b, lam = np.broadcast_arrays(
        np.asarray(a, float), np.asarray(b, float), np.asarray(lam, float))
    if lam.size and ((lam <= 0.0) | (lam > 1.0)).any():
        raise ValueError("risk level must lie in (0, 1]")
    shape = lam.shape
    af, bf, lf = a.ravel(), b.ravel(), lam.ravel()
    out = np.empty_like(lf)
    top = lf >= 1.0
    out[top] = 1.0
    solve = ~top
    if solve.any():
        aa, bb, ll = af[solve], bf[solve], lf[solve]
        lo = np.full_like(ll, -_LOGIT_SPAN)
        hi = np.full_like(ll, _LOGIT_SPAN)
        for _ in range(_BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            above = betainc_arr(aa, bb, _sigmoid(mid)) >= ll
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        t = 0.5 * (lo + hi)
        x = _sigmoid(t)
        err = betainc_arr(aa, bb, x) - ll
        for _ in range(_NEWTON_MAX):
            if np.all((np.abs(err) <= _QUANTILE_ATOL)
                      | (hi - lo <= _BRACKET_FLOOR)):
                break
            hi = np.where(err > 0.0, np.minimum(hi, t), hi)
            lo = np.where(err < 0.0, np.maximum(lo, t), lo)
            xc = np.clip(x, _TINY, 1.0 - 1e-16)
            slope = beta_pdf_arr(aa, bb, xc) * xc * (1.0 - xc)
            tn = t - err / np.maximum(slope, _TINY)
            inside = (tn > lo) & (tn < hi)
            t = np.where(inside, tn, 0.5 * (lo + hi))
            x = _sigmoid(t)
            err = betainc_arr(aa, bb, x) - ll
        else:
            bad = (np.abs(err) > _QUANTILE_ATOL) & (hi - lo > _BRACKET_FLOOR)
            if bad.any():
                worst = int(np.argmax(np.where(bad, np.abs(err), 0.0)))
                raise RuntimeError(
                    "quantile inversion did not reach tolerance "
                    f"{_QUANTILE_ATOL:g}: residual {err[worst]:.3e} with logit "
                    f"bracket [{lo[worst]!r}, {hi[worst]!r}] at "
                    f"(alpha1={aa[worst]}, alpha2={bb[worst]}, lam={ll[worst]})")
        out[solve] = x
    return out.reshape(shape)


def beta_mean_arr(a, b) -> np.ndarray:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return a / (a + b)


def cvar_arr(a, b, lam) -> np.ndarray:
    """Elementwise lower-tail conditional value at risk of Beta(a, b).

    E[Z | Z <= VaR_lam] = mean * I_v(a + 1, b) / lam with v the lam-quantile.
    lam = 1 is exactly the mean, no inversion involved.
    """
    a, b, lam = np.broadcast_arrays(
        np.asarray(a, float), np.asarray(b, float), np.asarray(lam, float))
    if lam.size and ((lam <= 0.0) | (lam > 1.0)).any():
        raise ValueError("risk level must lie in (0, 1]")
    shape = lam.shape
    af, bf, lf = a.ravel(), b.ravel(), lam.ravel()
    out = np.empty_like(lf)
    top = lf >= 1.0
    if top.any():
        out[top] = beta_mean_arr(af[top], bf[top])
    tail = ~top
    if tail.any():
        aa, bb, ll = af[tail], bf[tail], lf[tail]
        v = var_arr(aa, bb, ll)
        mean = beta_mean_arr(aa, bb)
        # the lower-tail mean can never exceed the full mean; rounding of a
        # quantile pinned at the upper endpoint could otherwise break that
        out[tail] = np.minimum(mean * betainc_arr(aa + 1.0, bb, v) / ll, mean)
    return out.reshape(shape)


def var_lambda(p: BetaParams, r: RiskLevel) -> float:
    """Value at risk: the lam-quantile of Beta(p)."""
    return float(var_arr(np.float64(p.alpha1), np.float64(p.alpha2), np.float64(r.lam)))


def cvar_lambda(p: BetaParams, r: RiskLevel) -> float:
    """Conditional value at risk: the mean of the lam lower tail of Beta(p)."""
    return float(cvar_arr(np.float64(p.alpha1), np.float64(p.alpha2), np.float64(r.lam)))


# ---------------------------------------------------------------------------
# KL divergence between Beta distributions

def beta_kl_arr(qa, qb, pa, pb) -> np.ndarray:
    """Elementwise KL(Beta(qa, qb) || Beta(pa, pb)), closed form."""
    qa, qb, pa, pb = np.broadcast_arrays(
        np.asarray(qa, float), np.asarray(qb, float),
        np.asarray(pa, float), np.asarray(pb, float))
    out = (_log_beta_arr(pa, pb) - _log_beta_arr(qa, qb)
           + (qa - pa) * digamma_arr(qa)
           + (qb - pb) * digamma_arr(qb)
           + (pa - qa + pb - qb) * digamma_arr(qa + qb))
    return out


def beta_kl(q: BetaParams, p: BetaParams) -> float:
    """KL divergence KL(q || p) between two Beta distributions."""
    return float(beta_kl_arr(
        np.float64(q.alpha1), np.float64(q.alpha2),
        np.float64(p.alpha1), np.float64(p.alpha2)))
