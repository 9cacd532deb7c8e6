"""Domains of attraction, norming sequences and stable laws.

A :class:`TailSpec` describes the law of an observable either exactly by
atoms or analytically through its tails ``P(Z > x) ~ c1 l(x) x**-p`` and
``P(Z < -x) ~ c2 l(x) x**-p``.  :func:`classify` sorts it into

* ``D1``: nonconstant and square integrable, Gaussian limit with ``B_n = sqrt(n)``;
* ``D2``: ``L(x) = E(Z**2 1{|Z| <= x})`` unbounded and slowly varying, with
  ``n L(B_n) ~ B_n**2``;
* ``D3``: regularly varying tails of index ``p`` in ``(0, 2)``, with
  ``n L(B_n) ~ B_n**p`` and a stable limit.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import Degenerate, NotInD, P1NonIntegrable, QuadratureFail

R2_MIN = 0.99
P_BOUNDARY_TOL = 0.1
SLOW_TOL = 0.05
# Truncated second moments grow like log(x): the slowest unbounded case
# needs a looser deviation threshold at desk-scale x.
SLOW_TOL_SECOND_MOMENT = 0.2
SECOND_MOMENT_LAMBDAS = (2.0**-0.5, 2.0**0.5)
CDF_TOL = 1e-7
# x_top / median|Z| below this means the atoms show no resolvable tail
TAIL_REACH = 10.0
# t^2 / Phi(t) must fall by this factor over the grid to count as -> 0
PHI_DROP = 0.5


# ------------------------------------------------------------ slow functions


@dataclass(frozen=True)
class SlowFunction:
    """``scale * log(x)**power`` or a positive grid interpolated in log-log."""

    kind: str = "constant"
    scale: float = 1.0
    power: float = 0.0
    grid_x: tuple = ()
    grid_y: tuple = ()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full_like(x, self.scale)
        if self.kind == "log":
            return self.scale * np.log(x) ** self.power
        if self.kind == "grid":
            lx, ly = np.log(self.grid_x), np.log(self.grid_y)
            slope = (ly[-1] - ly[-2]) / (lx[-1] - lx[-2])
            out = np.interp(np.log(x), lx, ly)
            beyond = np.log(x) > lx[-1]
            out = np.where(beyond, ly[-1] + slope * (np.log(x) - lx[-1]), out)
            return np.exp(out)
        raise ValueError(f"unknown slow function kind {self.kind!r}")

    @classmethod
    def from_config(cls, cfg):
        if cfg is None:
            return cls()
        if callable(cfg):
            return cfg
        kind = cfg.get("kind", "constant")
        if kind == "grid":
            return cls(kind="grid", grid_x=tuple(cfg["x"]), grid_y=tuple(cfg["y"]))
        if kind == "log":
            return cls(kind="log", scale=float(cfg.get("scale", 1.0)),
                       power=float(cfg.get("power", 1.0)))
        return cls(kind="constant", scale=float(cfg.get("scale", 1.0)))

    def to_dict(self):
        if self.kind == "grid":
            return {"kind": "grid", "x": list(self.grid_x), "y": list(self.grid_y)}
        return {"kind": self.kind, "scale": self.scale, "power": self.power}


def integrated_slow(ell):
    """``x -> 2 int_1^x ell(u) / u du`` as a slow function."""
    if isinstance(ell, SlowFunction) and ell.kind == "constant":
        return SlowFunction("log", scale=2.0 * ell.scale, power=1.0)
    if isinstance(ell, SlowFunction) and ell.kind == "log":
        k = ell.power
        return SlowFunction("log", scale=2.0 * ell.scale / (k + 1.0), power=k + 1.0)

    def big_l(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = [2.0 * integrate.quad(lambda s: float(ell(math.exp(s))), 0.0, math.log(v), limit=200)[0]
               for v in x]
        return np.asarray(out)

    return big_l


# ---------------------------------------------------------------- tail spec


@dataclass(frozen=True)
class TailSpec:
    """Law of an observable.

    With ``atoms`` set, ``values``/``masses`` are exact and ``truncated_mass``
    records the alphabet mass lost to truncation (tails are classified as if
    that mass lay beyond the largest atom).  Otherwise the analytic tail
    ``P(|Z| > u) = min(1, ell(u) u**-p)`` holds for every ``u > 0``, split
    between the two signs in proportions ``c1, c2``.
    """

    atoms: object = None
    p: float | None = None
    c1: float = 1.0
    c2: float = 0.0
    ell: object = field(default_factory=SlowFunction)
    mean: float | None = None
    variance: float | None = None

    @classmethod
    def from_atoms(cls, atoms):
        return cls(atoms=atoms)

    @classmethod
    def from_sample(cls, values):
        from .maps import Atoms

        v = np.sort(np.asarray(values, dtype=float))
        uniq, counts = np.unique(v, return_counts=True)
        # the empirical tail beyond the sample maximum is unknown: one sample's worth
        return cls(atoms=Atoms(uniq, counts / len(v), truncated_mass=1.0 / len(v)))

    @classmethod
    def analytic(cls, p, c1=1.0, c2=0.0, ell=None, mean=None, variance=None):
        if p <= 0:
            raise ValueError("tail index p must be positive")
        if c1 < 0 or c2 < 0:
            raise ValueError("c1, c2 must be nonnegative")
        if p < 2 and abs(c1 + c2 - 1.0) > 1e-12:
            raise ValueError("c1 + c2 must equal 1 when p < 2")
        return cls(p=float(p), c1=float(c1), c2=float(c2),
                   ell=SlowFunction.from_config(ell), mean=mean, variance=variance)

    @property
    def is_atomic(self):
        return self.atoms is not None

    def survival(self, x):
        """``(P(Z > x), P(Z < -x))`` for ``x > 0``."""
        x = np.asarray(x, dtype=float)
        if self.is_atomic:
            v, m = self.atoms.values, self.atoms.masses
            cm = np.concatenate([[0.0], np.cumsum(m)])
            above = cm[-1] - cm[np.searchsorted(v, x, side="right")]
            below = cm[np.searchsorted(v, -x, side="left")]
            return above, below
        s = np.minimum(1.0, self.ell(x) * x ** (-self.p))
        return self.c1 * s, self.c2 * s


def truncated_second_moment(tail, x):
    """``L(x) = E(Z**2 1{|Z| <= x})``."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if tail.is_atomic:
        v, m = tail.atoms.values, tail.atoms.masses
        order = np.argsort(np.abs(v), kind="stable")
        av = np.abs(v)[order]
        cum = np.concatenate([[0.0], np.cumsum((v**2 * m)[order])])
        out = cum[np.searchsorted(av, xs, side="right")]
    else:
        out = np.array([_analytic_second_moment(tail, float(xx)) for xx in xs])
    return out if np.ndim(x) else float(out[0])


def _canonical_survival(tail, u):
    # P(|Z| > u) of the canonical law attached to an analytic spec; the slow
    # function is frozen below e so that log-type functions stay positive
    return min(1.0, float(tail.ell(max(u, math.e))) * u ** (-tail.p))


def _analytic_second_moment(tail, x):
    # E(Z^2 1{|Z|<=x}) = int_0^x 2u P(|Z|>u) du - x^2 P(|Z|>x)
    g = lambda u: 2.0 * u * _canonical_survival(tail, u)
    total = integrate.quad(g, 0.0, min(x, 1.0), limit=200)[0]
    if x > 1.0:
        total += integrate.quad(g, 1.0, x, limit=400)[0]
    if math.isinf(x):
        return total
    return total - x * x * _canonical_survival(tail, x)


def _analytic_mean(tail):
    if tail.mean is not None:
        return tail.mean
    if tail.p <= 1:
        return None
    g = lambda u: _canonical_survival(tail, u)
    val = integrate.quad(g, 0.0, 1.0)[0] + integrate.quad(g, 1.0, np.inf, limit=400)[0]
    return (tail.c1 - tail.c2) * val


# ------------------------------------------------------- slow variation test


@dataclass(frozen=True)
class SlowVariationResult:
    passed: bool
    max_deviation: float
    top_deviation: float
    bottom_deviation: float
    deviations: np.ndarray
    tol: float

    def to_dict(self):
        return {"passed": self.passed, "max_deviation": self.max_deviation,
                "top_deviation": self.top_deviation,
                "bottom_deviation": self.bottom_deviation, "tol": self.tol}


DEFAULT_LAMBDAS = (0.5, 2.0**-0.5, 2.0**0.5, 2.0)


def slow_variation_diagnostic(ell, lambdas=DEFAULT_LAMBDAS, xs=None, tol=SLOW_TOL):
    """Check ``L(lambda x) / L(x) -> 1`` on a geometric grid.

    ``ell`` is a callable or a pair ``(grid_x, grid_y)``.  The deviation
    ``max_lambda |L(lambda x)/L(x) - 1|`` must be below ``tol`` over the top
    third of the grid and must not grow: the top-third maximum may not
    exceed ``max(0.8 * bottom-third maximum, tol / 4)``.
    """
    if isinstance(ell, tuple):
        ell = SlowFunction(kind="grid", grid_x=tuple(ell[0]), grid_y=tuple(ell[1]))
        x_hi = max(ell.grid_x) / max(lambdas)
        x_lo = min(ell.grid_x) / min(lambdas)
        xs = np.geomspace(x_lo, x_hi, 60) if xs is None else xs
    if xs is None:
        xs = np.geomspace(10.0, 1e12, 60)
    xs = np.asarray(xs, dtype=float)
    base = np.asarray(ell(xs), dtype=float)
    dev = np.zeros_like(xs)
    for lam in lambdas:
        dev = np.maximum(dev, np.abs(np.asarray(ell(lam * xs), dtype=float) / base - 1.0))
    third = max(1, len(xs) // 3)
    top = float(dev[-third:].max())
    bottom = float(dev[:third].max())
    passed = bool(top < tol and top <= max(0.8 * bottom, tol / 4))
    return SlowVariationResult(passed, float(dev.max()), top, bottom, dev, tol)


# ------------------------------------------------------------ classification


@dataclass(frozen=True)
class DomainClass:
    variant: str
    mean: float | None = None
    variance: float | None = None
    p: float | None = None
    c1: float = 1.0
    c2: float = 0.0
    L: object = None
    degenerate: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta(self):
        return self.c1 - self.c2

    def report(self):
        """JSON-ready classification report."""
        out = {"variant": self.variant, "p": self.p, "c1": self.c1, "c2": self.c2,
               "beta": None, "c": None, "diagnostics": _jsonable(self.diagnostics)}
        if self.variant == "D3":
            sp = stable_params(self)
            out["beta"], out["c"] = sp.beta, sp.c
        elif self.variant == "D1":
            out.update(p=2.0, c1=None, c2=None)
        else:
            out.update(p=2.0)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def classify(tail):
    if tail.is_atomic:
        return _classify_atoms(tail)
    return _classify_analytic(tail)


def _classify_analytic(tail):
    p = tail.p
    if p > 2:
        mean = _analytic_mean(tail)
        var = tail.variance
        if var is None:
            second = _analytic_second_moment(tail, math.inf)
            var = second - mean**2
        if var <= 0:
            raise Degenerate("analytic tail spec has zero variance")
        return DomainClass("D1", mean=mean, variance=var, diagnostics={"source": "analytic"})
    if p == 2:
        big_l = integrated_slow(tail.ell)
        sv = slow_variation_diagnostic(big_l)
        if not sv.passed:
            raise NotInD("truncated second moment is not slowly varying", sv.to_dict())
        return DomainClass("D2", mean=_analytic_mean(tail), p=2.0, c1=tail.c1, c2=tail.c2,
                           L=big_l, diagnostics={"source": "analytic",
                                                 "slow_variation": sv.to_dict()})
    sv = slow_variation_diagnostic(tail.ell)
    if not sv.passed:
        raise NotInD("tail function is not slowly varying", sv.to_dict())
    return DomainClass("D3", mean=_analytic_mean(tail), p=p, c1=tail.c1, c2=tail.c2,
                       L=tail.ell, diagnostics={"source": "analytic",
                                                "slow_variation": sv.to_dict()})


def tail_window(tail):
    """Top-decade window of the tail where truncation bias is below 1%.

    Returns ``(x_lo, x_hi, S)`` with ``S`` the truncation-corrected two-sided
    survival function, or ``None`` when the atoms have no resolvable tail.
    """
    atoms = tail.atoms
    tau = atoms.truncated_mass
    absv = np.unique(np.abs(atoms.values))
    absv = absv[absv > 0]
    if len(absv) < 2:
        return None

    def surv(x):
        a, b = tail.survival(x)
        return (a + b) * (1.0 - tau) + tau

    s_at = surv(absv)
    ok = absv[s_at >= 100.0 * tau] if tau > 0 else absv[:-1]
    if len(ok) == 0:
        return None
    x_hi = float(ok[-1])
    # a tail exists only if it reaches well beyond the bulk of the law
    if x_hi < TAIL_REACH * _abs_median(atoms):
        return None
    x_lo = x_hi / 10.0
    # sparse (e.g. geometric) atoms: widen by decades until 5 atoms are in view
    while np.count_nonzero((absv >= x_lo) & (absv <= x_hi)) < 5 and x_lo > absv[0]:
        x_lo /= 10.0
    return x_lo, x_hi, surv


def _abs_median(atoms):
    order = np.argsort(np.abs(atoms.values))
    cm = np.cumsum(atoms.masses[order])
    return float(np.abs(atoms.values)[order][np.searchsorted(cm, 0.5 * cm[-1])])


def _classify_atoms(tail):
    atoms = tail.atoms
    var = atoms.variance()
    if len(atoms.values) == 1 or var <= 0:
        raise Degenerate("observable is almost surely constant")
    mean = atoms.mean()
    if atoms.truncated_mass == 0:
        return DomainClass("D1", mean=mean, variance=var,
                           diagnostics={"source": "atoms", "reason": "finite distribution"})
    win = tail_window(tail)
    absv = np.abs(atoms.values)
    n_tail = 0 if win is None else int(np.count_nonzero((absv >= win[0]) & (absv <= win[1])))
    if win is None or n_tail < 5:
        return DomainClass("D1", mean=mean, variance=var,
                           diagnostics={"source": "atoms", "reason": "bounded tail"})
    x_lo, x_hi, surv = win
    xs = np.geomspace(x_lo, x_hi, 50)
    ls = np.log(surv(xs))
    lx = np.log(xs)
    slope, intercept, r, _, stderr = stats.linregress(lx, ls)
    p_hat = -slope
    r2 = r * r
    diag = {"source": "atoms", "window": [x_lo, x_hi], "p_hat": p_hat, "p_stderr": stderr,
            "r2": r2, "tail_points": n_tail, "truncated_mass": atoms.truncated_mass}
    # light tails bend downward in log-log: look at the slope over the top third
    top_slope = -stats.linregress(lx[-17:], ls[-17:]).slope
    diag["top_slope"] = float(top_slope)
    if r2 < R2_MIN and top_slope > p_hat and top_slope > 2.0 + P_BOUNDARY_TOL:
        diag["reason"] = "tail lighter than index 2 throughout the window"
        return DomainClass("D1", mean=mean, variance=var, diagnostics=diag)
    if r2 < R2_MIN or p_hat <= 0:
        raise NotInD(f"tail regression R^2={r2:.4f} below {R2_MIN}", diag)
    a_min = float(np.abs(atoms.values)[atoms.values != 0].min()) if np.any(atoms.values) else x_lo
    grid_x = np.geomspace(max(x_lo / 10.0, 2.0 * a_min), x_hi, 120)
    grid_y = surv(grid_x) * grid_x**p_hat
    sv = slow_variation_diagnostic((grid_x, grid_y), lambdas=DEFAULT_LAMBDAS)
    diag["slow_variation"] = sv.to_dict()
    if not sv.passed:
        raise NotInD("tail is not regularly varying (slow-variation check failed)", diag)
    plus, minus = tail.survival(xs)
    frac = plus / np.maximum(plus + minus, 1e-300)
    c1 = float(np.clip(frac[-len(frac) // 3:].mean(), 0.0, 1.0))
    if np.all(minus == 0):
        c1 = 1.0
    elif np.all(plus == 0):
        c1 = 0.0
    c2 = 1.0 - c1

    if p_hat > 1.0:
        # the truncated mass sits beyond the largest atom with the fitted tail,
        # whose conditional mean there is x_max p / (p - 1)
        tau = atoms.truncated_mass
        x_max = float(np.max(np.abs(atoms.values)))
        correction = tau * (c1 - c2) * x_max * p_hat / (p_hat - 1.0)
        diag["atoms_mean"] = mean
        diag["tail_mean_correction"] = correction
        mean = (1.0 - tau) * mean + correction
    if p_hat > 2.0 + P_BOUNDARY_TOL:
        diag["reason"] = "tail index above 2"
        return DomainClass("D1", mean=mean, variance=var, diagnostics=diag)
    if p_hat >= 2.0 - P_BOUNDARY_TOL:
        xs2 = np.geomspace(max(x_hi / 100.0, 2.0 * a_min), x_hi, 60)
        big_l = truncated_second_moment(tail, xs2)
        inc_last = big_l[-1] - big_l[30]
        inc_prev = big_l[30] - big_l[0]
        growth = inc_last / inc_prev if inc_prev > 0 else 0.0
        sv2 = slow_variation_diagnostic((xs2, big_l), lambdas=SECOND_MOMENT_LAMBDAS,
                                        tol=SLOW_TOL_SECOND_MOMENT)
        diag["second_moment_growth"] = growth
        diag["second_moment_slow_variation"] = sv2.to_dict()
        if growth < 0.5:
            diag["reason"] = "truncated second moment converges"
            return DomainClass("D1", mean=mean, variance=var, diagnostics=diag)
        if not sv2.passed:
            raise NotInD("truncated second moment is not slowly varying", diag)
        # a smooth interpolant keeps x^2 / L(x) monotone for the norming solver
        ell = SlowFunction("grid", grid_x=tuple(xs2), grid_y=tuple(big_l))
        return DomainClass("D2", mean=mean, p=2.0, c1=c1, c2=c2, L=ell, diagnostics=diag)
    ell = SlowFunction("constant", scale=float(math.exp(intercept)))
    diag["ell_constant"] = ell.scale
    return DomainClass("D3", mean=mean if p_hat > 1 else None, p=float(p_hat), c1=c1, c2=c2,
                       L=ell, diagnostics=diag)


# ------------------------------------------------------------------ norming


class NormingSequence:
    """``n -> (A_n, B_n)`` for a domain class.

    ``B_n`` solves ``n L(B) = B**p`` (``p = 2`` for D2) by bracketed root
    finding in ``log B``; ``A_n = n E(Z)`` when ``Z`` is integrable and
    ``0`` for ``p < 1``.
    """

    def __init__(self, domain, x0=None):
        if domain.degenerate:
            raise Degenerate("no norming sequence for a constant observable")
        self.domain = domain
        if domain.variant == "D3" and domain.p == 1.0 and domain.c1 != domain.c2:
            raise P1NonIntegrable("asymmetric p = 1 centering is not supported")
        self._x0 = x0
        self._cache = {}

    @property
    def exponent(self):
        return 2.0 if self.domain.variant in ("D1", "D2") else self.domain.p

    def centering(self, n):
        d = self.domain
        if d.variant == "D3" and d.p <= 1:
            return 0.0
        if d.mean is None:
            raise P1NonIntegrable("centering needs E(Z), which is not available")
        return n * d.mean

    def scaling(self, n):
        d = self.domain
        if d.variant == "D1":
            return math.sqrt(n)
        if n in self._cache:
            return self._cache[n]
        p = self.exponent
        ell = d.L
        if isinstance(ell, SlowFunction) and ell.kind == "constant":
            b = (n * ell.scale) ** (1.0 / p)
        else:
            b = self._solve(n, p, ell)
        self._cache[n] = b
        return b

    def _solve(self, n, p, ell):
        def h(u):
            return p * u - math.log(float(np.asarray(ell(math.exp(u))).reshape(-1)[0])) - math.log(n)

        u0 = math.log(self._x0) if self._x0 else self._monotone_start(p, ell)
        hi = max(u0 + 1.0, (math.log(n) + 10.0) / p)
        while h(hi) <= 0:
            hi *= 2.0
        if h(u0) > 0:
            raise ArithmeticError(f"B_n for n={n} lies below the monotone range start")
        u = optimize.brentq(h, u0, hi, xtol=1e-13, rtol=1e-14, maxiter=500)
        return math.exp(u)

    def _monotone_start(self, p, ell):
        us = np.linspace(0.05, 60.0, 600)
        with np.errstate(all="ignore"):
            vals = p * us - np.log(np.asarray(ell(np.exp(us)), dtype=float))
        inc = np.diff(vals) > 0
        bad = np.flatnonzero(~inc | ~np.isfinite(vals[1:]))
        start = us[bad[-1] + 1] if len(bad) else us[0]
        return float(start)

    def __call__(self, n):
        return self.centering(n), self.scaling(n)


def norming_sequence(domain):
    return NormingSequence(domain)


# ------------------------------------------------------------- stable laws


@dataclass(frozen=True)
class StableParams:
    p: float
    c: float
    beta: float
    gaussian: bool = False

    def omega(self, t):
        t = np.asarray(t, dtype=float)
        if self.p != 1:
            return np.full_like(t, math.tan(self.p * math.pi / 2))
        with np.errstate(divide="ignore"):
            return np.where(t == 0, 0.0, -(2.0 / math.pi) * np.log(np.abs(t)))


def stable_params(domain):
    p = domain.p
    if p is None or not 0 < p < 2:
        raise ValueError(f"stable parameters need p in (0, 2), got {p}")
    c = math.pi / 2 if p == 1 else special.gamma(1 - p) * math.cos(p * math.pi / 2)
    return StableParams(p=float(p), c=float(c), beta=float(domain.c1 - domain.c2))


def stable_cf(params, t):
    t = np.asarray(t, dtype=float)
    at = np.abs(t)
    expo = -params.c * at**params.p * (1 - 1j * params.beta * np.sign(t) * params.omega(t))
    out = np.exp(np.where(t == 0, 0.0, expo))
    return out if out.ndim else complex(out)


def _tail_cut(params):
    # smallest T with exp(-c T^p) / T below 1e-12
    f = lambda s: -params.c * math.exp(params.p * s) - s + 12 * math.log(10)
    return math.exp(optimize.brentq(f, -5.0, 200.0))


def _psi(params, t):
    if params.p == 1:
        return -(2.0 / math.pi) * params.c * params.beta * t * np.log(t) if t > 0 else 0.0
    return params.c * params.beta * math.tan(params.p * math.pi / 2) * t**params.p


def stable_cdf(params, x, tol=CDF_TOL):
    """Distribution function by Gil-Pelaez inversion of :func:`stable_cf`.

    ``F(x) = 1/2 - (1/pi) int_0^inf Im(exp(-itx) phi(t)) / t dt`` with the
    oscillatory factor handled by sine/cosine-weighted quadrature; the range
    is split at ``t = 1`` and cut where ``exp(-c t**p) / t < 1e-12``.
    """
    if params.gaussian or params.p == 2:
        return float(stats.norm.cdf(x, scale=math.sqrt(2 * params.c)))
    x = float(x)
    c, p = params.c, params.p
    top = max(_tail_cut(params), 1.0 + 1e-9)

    def amp_sin(t):
        return math.exp(-c * t**p) * math.sin(_psi(params, t)) / t

    def amp_cos(t):
        return math.exp(-c * t**p) * math.cos(_psi(params, t)) / t

    def full(t):
        return math.exp(-c * t**p) * math.sin(_psi(params, t) - x * t) / t

    # near 0 the Dirichlet part sin(-xt)/t is integrated exactly (sine
    # integral); the remainder is O(t^(p-1)), smoothed by t = s^2
    delta = min(1.0, 20.0 / abs(x)) if x != 0 else 1.0

    def rest(s):
        t = s * s
        return 2.0 * (math.exp(-c * t**p) * math.sin(_psi(params, t) - x * t) - math.sin(-x * t)) / s

    total, err = integrate.quad(rest, 0.0, math.sqrt(delta), limit=400, epsabs=1e-13)
    total += special.sici(-x * delta)[0]
    for lo, hi in ((delta, 1.0), (1.0, top)):
        if hi <= lo:
            continue
        # Im(e^{-itx} phi) / t = amp_sin cos(xt) - amp_cos sin(xt)
        if x == 0:
            v, e = integrate.quad(full, lo, hi, limit=400, epsabs=1e-13)
            total += v
            err += e
            continue
        if params.beta != 0:
            v, e = integrate.quad(amp_sin, lo, hi, weight="cos", wvar=x, limit=400, epsabs=1e-13)
            total += v
            err += e
        v, e = integrate.quad(amp_cos, lo, hi, weight="sin", wvar=x, limit=400, epsabs=1e-13)
        total -= v
        err += e
    if err > tol:
        raise QuadratureFail(f"Gil-Pelaez quadrature error {err:.2e} exceeds {tol:.0e} at x={x}")
    return min(1.0, max(0.0, 0.5 - total / math.pi))


def normal_params(variance):
    """Stable-parametrized Gaussian ``N(0, variance)``: ``phi(t) = exp(-variance t^2 / 2)``."""
    return StableParams(p=2.0, c=variance / 2.0, beta=0.0, gaussian=True)


def limit_params(domain):
    """Parameters of the limit law ``W`` for a domain class."""
    if domain.variant == "D1":
        return normal_params(domain.variance)
    if domain.variant == "D2":
        return normal_params(1.0)
    return stable_params(domain)


# ---------------------------------------------------------- phi diagnostic


@dataclass(frozen=True)
class PhiDiagnostic:
    t: np.ndarray
    phi: np.ndarray
    ratio: np.ndarray
    ratio_to_zero: bool


def phi_values(tail, t):
    """``Phi(t) = E(1 - cos(t f))`` from atoms, computed as ``2 E sin^2(t f / 2)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    v, m = tail.atoms.values, tail.atoms.masses
    return np.array([2.0 * np.dot(np.sin(tt * v / 2.0) ** 2, m) for tt in t])


def phi_diagnostic(tail, t_grid):
    t = np.sort(np.abs(np.asarray(t_grid, dtype=float)))[::-1]
    phi = phi_values(tail, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(phi > 0, t**2 / phi, np.inf)
    # f not in L^2 iff t^2 / Phi(t) -> 0: decreasing as t decreases, with a real drop
    to_zero = bool(len(t) > 1 and np.all(np.diff(ratio) < 0) and ratio[-1] < PHI_DROP * ratio[0])
    return PhiDiagnostic(t=t, phi=phi, ratio=ratio, ratio_to_zero=to_zero)
