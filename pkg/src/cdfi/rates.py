"""Birth-death rate models, the preset catalog, and assumption diagnostics.

A model is the pair of rate sequences (lambda_n, mu_n) with state 0 absorbing
(lambda_0 = mu_0 = 0).  Rates are evaluated lazily per level; families whose
rates overflow double precision (factorial, exponential) are handled through
the log-rate accessors, which are always finite for positive rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln


class ModelError(ValueError):
    """Unknown family, inadmissible parameters, or broken rate sequence."""


def _as_array(n):
    a = np.asarray(n, dtype=float)
    if np.any(a < 0):
        raise ValueError("levels must be nonnegative")
    return a


def _scalarize(out, n):
    if np.isscalar(n) or np.ndim(n) == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class RateModel:
    """Immutable birth-death rate model.

    ``birth``/``death`` return the rates (possibly ``inf`` when not
    representable); ``log_birth``/``log_death`` return natural logs
    (``-inf`` where the rate is zero) and never overflow.  ``death_x`` is an
    optional smooth positive extension of the death rate used for certified
    tail integrals; it is only consulted for x >= 2.
    """

    name: str
    birth: Callable
    death: Callable
    log_birth: Callable
    log_death: Callable
    params: dict = field(default_factory=dict)
    claimed_rv_index: float | None = None
    death_x: Callable | None = None
    pure_death: bool = False
    pure_birth: bool = False
    family: str | None = None

    def __post_init__(self):
        lam0 = self.birth(0)
        mu0 = self.death(0)
        if lam0 != 0.0 or mu0 != 0.0:
            raise ModelError(f"state 0 must be absorbing, got lambda_0={lam0}, mu_0={mu0}")
        probe = np.arange(1, 8)
        if np.any(self.birth(probe) < 0):
            raise ModelError("birth rates must be nonnegative")
        if not self.pure_birth and np.any(self.death(probe[1:]) <= 0):
            # mu_1 = 0 is tolerated (Kingman block counting: level 1 absorbing);
            # zero death above level 1 breaks the descent and is rejected.
            raise ModelError("death rates must be positive for n >= 2")

    @property
    def absorbing_floor(self) -> int:
        """Lowest reachable level: 0 normally, 1 when mu_1 = 0."""
        if self.pure_birth:
            return 0
        return 0 if self.death(1) > 0 else 1

    def ratio(self, n):
        """lambda_n / mu_n computed through logs (safe for huge rates)."""
        a = _as_array(n)
        with np.errstate(invalid="ignore"):
            r = np.exp(self.log_birth(a) - self.log_death(a))
        r = np.where(np.isnan(r), 0.0, r)  # 0/0 at absorbing states
        return _scalarize(r, n)

    def __reduce__(self):
        if self.family is not None:
            return (preset, (self.family, self.params))
        return super().__reduce__()


def _poly_log(c0, c1, c2):
    # log(c0 + c1*n + c2*n^2) without forming huge intermediates (n <= 1e9 is fine)
    def f(n):
        a = _as_array(n)
        with np.errstate(divide="ignore"):
            out = np.where(a > 0, np.log(c0 + c1 * a + c2 * a * a, where=a > 0), -np.inf)
        return _scalarize(out, n)

    return f


def _make_poly(c0, c1, c2):
    def f(n):
        a = _as_array(n)
        out = np.where(a > 0, c0 + c1 * a + c2 * a * a, 0.0)
        return _scalarize(out, n)

    return f


def _loglog(a):
    # log log n with the n in {0,1} -> log 2 convention
    return np.log(np.log(np.maximum(a, 2.0)))


def _build_kingman(params):
    def death(n):
        a = _as_array(n)
        return _scalarize(a * (a - 1.0) / 2.0, n)

    def log_death(n):
        a = _as_array(n)
        with np.errstate(divide="ignore"):
            out = np.where(a > 1, np.log(a) + np.log(np.maximum(a - 1.0, 1e-300)) - math.log(2.0), -np.inf)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    logzero = _poly_log(0.0, 0.0, 0.0)
    return RateModel(
        name="kingman", birth=zero, death=death, log_birth=logzero, log_death=log_death,
        params={}, claimed_rv_index=2.0, death_x=lambda x: x * (x - 1.0) / 2.0,
        pure_death=True, family="kingman",
    )


def _build_power(params, name="power", force_pure_death=False):
    rho = float(params["rho"])
    gamma = float(params.get("gamma", 0.0))
    c = 0.0 if force_pure_death else float(params.get("c", 0.0))
    if rho <= 1.0 and gamma <= 1.0:
        raise ModelError(f"power family needs rho > 1 (or rho = 1 with gamma > 1), got rho={rho}, gamma={gamma}")
    if rho < 1.0:
        raise ModelError(f"power family needs rho >= 1, got rho={rho}")
    if c < 0:
        raise ModelError("birth slope c must be nonnegative")

    def death(n):
        a = _as_array(n)
        out = np.where(a > 0, a ** rho * np.log(np.maximum(a, 2.0)) ** gamma, 0.0)
        return _scalarize(out, n)

    def log_death(n):
        a = _as_array(n)
        with np.errstate(divide="ignore"):
            out = np.where(a > 0, rho * np.log(np.maximum(a, 1.0)) + gamma * _loglog(a), -np.inf)
        return _scalarize(out, n)

    birth = _make_poly(0.0, c, 0.0)
    log_birth = _poly_log(0.0, c, 0.0)
    pd = c == 0.0
    return RateModel(
        name=name, birth=birth, death=death, log_birth=log_birth, log_death=log_death,
        params=dict(params), claimed_rv_index=rho,
        death_x=lambda x: x ** rho * math.log(max(x, 2.0)) ** gamma,
        pure_death=pd, family=name,
    )


def _build_logistic(params):
    b = float(params.get("b", 0.0))
    d = float(params.get("d", 0.0))
    c = float(params["c"])
    if c <= 0:
        raise ModelError("logistic needs competition c > 0")
    if b < 0 or d < 0:
        raise ModelError("logistic rates must be nonnegative")
    birth = _make_poly(0.0, b, 0.0)
    death = _make_poly(0.0, d - c, c)  # d*n + c*n*(n-1)
    return RateModel(
        name="logistic", birth=birth, death=death,
        log_birth=_poly_log(0.0, b, 0.0), log_death=_poly_log(0.0, d - c, c),
        params=dict(params), claimed_rv_index=2.0,
        death_x=lambda x: d * x + c * x * (x - 1.0),
        pure_death=(b == 0.0), family="logistic",
    )


def _build_factorial(params):
    gamma = float(params["gamma"])
    if gamma <= 0:
        raise ModelError("factorial needs gamma > 0")

    def log_death(n):
        a = _as_array(n)
        with np.errstate(divide="ignore"):
            out = np.where(a > 0, gamma * gammaln(a + 1.0), -np.inf)
        return _scalarize(out, n)

    def death(n):
        a = _as_array(n)
        with np.errstate(over="ignore"):
            out = np.where(a > 0, np.exp(gamma * gammaln(a + 1.0)), 0.0)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    return RateModel(
        name="factorial", birth=zero, death=death,
        log_birth=_poly_log(0.0, 0.0, 0.0), log_death=log_death,
        params=dict(params), pure_death=True, family="factorial",
    )


def _build_exponential(params):
    beta = float(params["beta"])
    if beta <= 0:
        raise ModelError("exponential needs beta > 0")

    def log_death(n):
        a = _as_array(n)
        out = np.where(a > 0, beta * a, -np.inf)
        return _scalarize(out, n)

    def death(n):
        a = _as_array(n)
        with np.errstate(over="ignore"):
            out = np.where(a > 0, np.exp(beta * a), 0.0)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    return RateModel(
        name="exponential", birth=zero, death=death,
        log_birth=_poly_log(0.0, 0.0, 0.0), log_death=log_death,
        params=dict(params), pure_death=True, family="exponential",
    )


def _build_alternating(params):
    # mu_{2n} = mu_{2n+1} = 3^(2n) = 9^n (printed sign in the source example
    # would not come down from infinity; see the decisions log)
    log9 = math.log(9.0)

    def log_death(n):
        a = _as_array(n)
        out = np.where(a > 0, np.floor(a / 2.0) * log9, -np.inf)
        return _scalarize(out, n)

    def death(n):
        a = _as_array(n)
        with np.errstate(over="ignore"):
            out = np.where(a > 0, np.exp(np.floor(a / 2.0) * log9), 0.0)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    return RateModel(
        name="alternating", birth=zero, death=death,
        log_birth=_poly_log(0.0, 0.0, 0.0), log_death=log_death,
        params={}, pure_death=True, family="alternating",
    )


def _build_marginal(params):
    # mu_n = exp(n / log n) * log n, with log n -> log 2 below n = 2
    def log_death(n):
        a = _as_array(n)
        la = np.log(np.maximum(a, 2.0))
        out = np.where(a > 0, a / la + np.log(la), -np.inf)
        return _scalarize(out, n)

    def death(n):
        a = _as_array(n)
        la = np.log(np.maximum(a, 2.0))
        with np.errstate(over="ignore"):
            out = np.where(a > 0, np.exp(a / la) * la, 0.0)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    return RateModel(
        name="marginal", birth=zero, death=death,
        log_birth=_poly_log(0.0, 0.0, 0.0), log_death=log_death,
        params={}, pure_death=True,
        death_x=lambda x: math.exp(x / math.log(max(x, 2.0))) * math.log(max(x, 2.0)),
        family="marginal",
    )


def _build_custom(params):
    b0 = float(params.get("b0", 0.0))
    b1 = float(params.get("b1", 0.0))
    b2 = float(params.get("b2", 0.0))
    d0 = float(params.get("d0", 0.0))
    d1 = float(params.get("d1", 0.0))
    d2 = float(params.get("d2", 0.0))
    dp = float(params.get("d_pow", 0.0))
    drho = float(params.get("d_rho", 0.0))
    dgamma = float(params.get("d_gamma", 0.0))
    for key, v in (("b0", b0), ("b1", b1), ("b2", b2), ("d0", d0), ("d1", d1), ("d2", d2), ("d_pow", dp)):
        if v < 0:
            raise ModelError(f"custom coefficient {key} must be nonnegative")
    has_birth = (b0 + b1 + b2) > 0
    has_death = (d0 + d1 + d2 + dp) > 0
    if not has_death and not has_birth:
        raise ModelError("custom model has no rates at all")

    def death(n):
        a = _as_array(n)
        out = d0 + d1 * a + d2 * a * a
        if dp:
            out = out + dp * a ** drho * np.log(np.maximum(a, 2.0)) ** dgamma
        out = np.where(a > 0, out, 0.0)
        return _scalarize(out, n)

    def log_death(n):
        a = _as_array(n)
        v = np.asarray(death(a), dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(v > 0, np.log(np.maximum(v, 1e-300)), -np.inf)
        return _scalarize(out, n)

    death_x = None
    if has_death:
        def death_x(x):
            return d0 + d1 * x + d2 * x * x + (dp * x ** drho * math.log(max(x, 2.0)) ** dgamma if dp else 0.0)

    return RateModel(
        name="custom", birth=_make_poly(b0, b1, b2), death=death,
        log_birth=_poly_log(b0, b1, b2), log_death=log_death,
        params=dict(params), death_x=death_x,
        pure_death=not has_birth, pure_birth=not has_death, family="custom",
    )


def _build_yule(params):
    """Pure birth lambda_n = rate * n, optionally saturating at ``cap``.

    Used as the mild phase of varying-environment schedules; not part of the
    coming-down-from-infinity catalog.
    """
    rate = float(params["rate"])
    cap = params.get("cap")
    cap = math.inf if cap is None else float(cap)
    if rate <= 0:
        raise ModelError("yule needs rate > 0")
    if cap <= 1:
        raise ModelError("yule cap must exceed 1")

    def birth(n):
        a = _as_array(n)
        out = np.where((a > 0) & (a < cap), rate * a, 0.0)
        return _scalarize(out, n)

    def log_birth(n):
        a = _as_array(n)
        with np.errstate(divide="ignore"):
            out = np.where((a > 0) & (a < cap), np.log(np.maximum(rate * a, 1e-300)), -np.inf)
        return _scalarize(out, n)

    zero = _make_poly(0.0, 0.0, 0.0)
    p = {"rate": rate} if math.isinf(cap) else {"rate": rate, "cap": cap}
    return RateModel(
        name="yule", birth=birth, death=zero, log_birth=log_birth,
        log_death=_poly_log(0.0, 0.0, 0.0), params=p, pure_birth=True, family="yule",
    )


_FAMILIES = {
    "kingman": _build_kingman,
    "power": _build_power,
    "logistic": _build_logistic,
    "factorial": _build_factorial,
    "exponential": _build_exponential,
    "alternating": _build_alternating,
    "marginal": _build_marginal,
    "pure-death-power": lambda p: _build_power(p, name="pure-death-power", force_pure_death=True),
    "custom": _build_custom,
    "yule": _build_yule,
}


def preset(name: str, params: dict | None = None, **kw) -> RateModel:
    """Build a catalog model.

    ``name`` is one of kingman, power, logistic, factorial, exponential,
    alternating, marginal, pure-death-power, custom (plus yule, the pure-birth
    helper for varying environments).  Unknown names and inadmissible
    parameters raise :class:`ModelError`.
    """
    key = name.replace("_", "-").lower()
    if key not in _FAMILIES:
        raise ModelError(f"unknown preset {name!r}; valid: {sorted(_FAMILIES)}")
    merged = dict(params or {})
    merged.update(kw)
    try:
        return _FAMILIES[key](merged)
    except KeyError as exc:
        raise ModelError(f"preset {name!r} missing required parameter {exc}") from None


CATALOG = ("kingman", "power", "logistic", "factorial", "exponential",
           "alternating", "marginal", "pure-death-power")


def load_model(path) -> RateModel:
    """Read a ``key = value`` model file; ``family`` selects the preset."""
    params: dict = {}
    family = None
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ModelError(f"bad model file line: {raw.rstrip()}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key == "family":
                family = value
            else:
                try:
                    params[key] = float(value)
                except ValueError:
                    raise ModelError(f"parameter {key} is not a number: {value!r}") from None
    if family is None:
        raise ModelError("model file missing 'family' entry")
    return preset(family, params)


def save_model(model: RateModel, path) -> None:
    if model.family is None:
        raise ModelError("only preset-built models can be written to a file")
    with open(path, "w") as fh:
        fh.write(f"family = {model.family}\n")
        for key, value in sorted(model.params.items()):
            fh.write(f"{key} = {value!r}\n")


@dataclass(frozen=True)
class AssumptionReport:
    """Numeric diagnostics for the standing assumptions on a rate model."""

    l_estimate: float
    l_window: tuple[int, int]
    growth_sup: float
    sum_inv_mu_converges: bool
    sum_inv_mu_tail_bound: float | None
    extinction_condition_holds: bool
    warnings: tuple[str, ...]

    def require_descent(self) -> None:
        """Raise unless the model plausibly comes down from infinity."""
        if self.l_estimate >= 1.0:
            raise ModelError(f"lambda_n/mu_n does not settle below 1 (l ~ {self.l_estimate:.3g})")
        if not self.sum_inv_mu_converges:
            raise ModelError("sum 1/mu_n does not converge: no coming down from infinity")


def _ls_line(x, y):
    # least-squares slope/intercept/residual-rms for small fits
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef[0], coef[1], float(np.sqrt(np.mean(resid**2)))


def check_assumptions(model: RateModel, horizon: int = 10_000, tol: float = 1e-3) -> AssumptionReport:
    """Estimate l = lim lambda_n/mu_n, the death-rate growth bound, and decide
    whether sum 1/mu_n converges, over levels up to ``horizon``.

    Deterministic: identical inputs give identical reports.
    """
    if horizon < 100:
        raise ValueError("horizon must be at least 100")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if model.pure_birth:
        raise ModelError("pure-birth model: death rates vanish for n >= 1")

    warnings: list[str] = []
    n = np.arange(1, horizon + 1)
    log_mu = np.asarray(model.log_death(n), dtype=float)
    if not np.isfinite(log_mu[1:]).all():
        raise ModelError("mu_n = 0 somewhere above level 1")
    mu1_zero = not np.isfinite(log_mu[0])
    if mu1_zero:
        warnings.append("mu_1 = 0: level 1 is absorbing; sums taken over n >= 2")

    lo = horizon // 2
    window = slice(lo - 1, horizon)  # indices of levels [lo, horizon]
    log_lam = np.asarray(model.log_birth(n), dtype=float)
    with np.errstate(invalid="ignore"):
        ratio = np.exp(log_lam - log_mu)
    ratio = np.where(np.isfinite(log_mu), ratio, 0.0)
    win_ratio = ratio[window]
    l_est = float(np.median(win_ratio))
    if np.any(win_ratio >= 1.0 - tol):
        warnings.append("l >= 1 somewhere in the window: theory inapplicable")
    half = len(win_ratio) // 2
    if half >= 4:
        m1 = float(np.median(win_ratio[:half]))
        m2 = float(np.median(win_ratio[half:]))
        if abs(m1 - m2) > 0.1 * max(l_est, 0.01):
            warnings.append("l estimate not stabilized over the window; increase horizon")

    # sup_{n<m} mu_n / mu_m via suffix minima of log mu (n >= 2 if mu_1 = 0)
    finite = log_mu[1:] if mu1_zero else log_mu
    suffix_min = np.minimum.accumulate(finite[::-1])[::-1]
    growth_sup = float(np.exp(np.max(finite[:-1] - suffix_min[1:]))) if len(finite) > 1 else 1.0
    growth_sup = max(growth_sup, 1.0)

    # convergence of sum 1/mu_n: partial sums plus a fitted envelope tail
    inv = np.exp(-finite)
    partial = float(np.sum(inv))
    top = n[window] if not mu1_zero else n[window]
    log_mu_top = log_mu[window]
    s_pow, _, r_pow = _ls_line(np.log(top), log_mu_top)
    s_geo, _, r_geo = _ls_line(top.astype(float), log_mu_top)
    tail_bound: float | None = None
    converges = False
    last_inv = float(np.exp(-log_mu_top[-1]))
    increments_decay = float(np.mean(inv[-len(inv) // 10 or 1:])) <= float(np.mean(inv[len(inv) // 2: len(inv) // 2 + (len(inv) // 10 or 1)])) * (1 + tol)
    if r_geo <= r_pow and s_geo > 0 and math.exp(-s_geo) < 1 - 1e-12:
        q = math.exp(-s_geo)
        tail_bound = last_inv * q / (1.0 - q)
        converges = increments_decay
    elif s_pow > 1.05:
        tail_bound = horizon * last_inv / (s_pow - 1.0)
        converges = increments_decay
    elif s_pow < 0.95:
        converges = False
        warnings.append("sum 1/mu_n diverges (fitted death index below 1)")
    else:
        converges = False
        warnings.append("sum 1/mu_n undecided: fitted death index too close to 1")
    if converges and not increments_decay:
        warnings.append("partial-sum increments of 1/mu_n do not decay; convergence undecided")
    if not converges:
        tail_bound = None

    # almost-sure absorption, condition sum 1/(lambda_n pi_n) = inf
    if model.pure_death or l_est < 1.0 - tol:
        extinct = True
    elif l_est > 1.0 + tol:
        extinct = False
        warnings.append("lambda/mu settles above 1: absorption not guaranteed")
    else:
        extinct = False
        warnings.append("lambda/mu sits at the critical value 1: absorption undecided")

    return AssumptionReport(
        l_estimate=l_est,
        l_window=(lo, horizon),
        growth_sup=growth_sup,
        sum_inv_mu_converges=bool(converges),
        sum_inv_mu_tail_bound=tail_bound,
        extinction_condition_holds=bool(extinct),
        warnings=tuple(warnings),
    )
