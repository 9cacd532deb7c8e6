"""Monte-Carlo ensembles of Birkhoff sums and their statistics.

Sample ``s`` of horizon ``n_list[i]`` always uses the random stream
``(seed, stream_id_for(domain, i, s))``, so results do not depend on the
number of workers or on scheduling.  Trajectories are generated and summed
in one pass inside numba kernels; nothing of length ``n`` is stored except
for induced models, whose orbit positions are recovered backwards from the
end of the orbit.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import csv
import hashlib
import math
import os

import numba as nb
import numpy as np
from scipy import interpolate, stats

from . import domains, maps, rng
from .errors import ConfigError, SigmaZero
from .maps import _guided, _next_symbol, induced_value

# prefer OpenMP: older system TBB builds only produce a warning and get skipped
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

NOISE_KS = 1.63  # 99% quantile of the Kolmogorov law, per sqrt(N)
NOISE_CF = 2.0
CDF_GRID = 4096


# ---------------------------------------------------------------- workers


def resolve_workers(workers=None):
    """Requested parallelism clamped to numba's thread pool.

    ``None`` falls back to ``GML_THREADS`` and then to every available thread.
    """
    limit = nb.config.NUMBA_NUM_THREADS
    if workers is None:
        env = os.environ.get("GML_THREADS")
        workers = int(env) if env else limit
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return min(int(workers), limit)


def _set_workers(workers):
    nb.set_num_threads(resolve_workers(workers))


# ------------------------------------------------------------------ plans


@dataclass(frozen=True, eq=False)
class SimulationPlan:
    model: object
    observable: object
    n_list: tuple
    samples: int
    seed: int
    workers: int | None = None
    # NormingSequence, callable n -> (A, B), dict n -> (A, B) or a fixed (A, B)
    norming: object = (0.0, 1.0)

    def __post_init__(self):
        if self.samples < 100:
            raise ConfigError("samples must be >= 100")
        n_list = tuple(int(n) for n in self.n_list)
        if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])) or n_list[0] < 1:
            raise ConfigError("n_list must be strictly increasing positive integers")
        object.__setattr__(self, "n_list", n_list)
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def norming_for(self, n):
        nm = self.norming
        if isinstance(nm, dict):
            return tuple(float(v) for v in nm[n])
        if callable(nm):
            a, b = nm(n)
            return float(a), float(b)
        a, b = nm
        return float(a), float(b)

    def digest(self):
        h = hashlib.sha256()
        h.update(repr((self.model.kind, self.model.n_cells, self.n_list, self.samples,
                       int(self.seed))).encode())
        h.update(np.ascontiguousarray(self.model.stationary).tobytes())
        obs = self.observable
        if obs.values is not None:
            h.update(np.nan_to_num(obs.values, nan=-1.2345e300).tobytes())
        h.update(repr((obs.kind, obs.depth, obs.exponent)).encode())
        h.update(repr([self.norming_for(n) for n in self.n_list]).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    values: np.ndarray
    n: int
    seed: int
    plan_hash: str
    ensemble: str = "dynamical"

    @property
    def size(self):
        return len(self.values)

    def cdf(self, x):
        return np.searchsorted(self.values, x, side="right") / self.size


# ----------------------------------------------------------------- kernels


@nb.njit(parallel=True, cache=True)
def _table_sums(seed, base_sid, n, count, values, depth, k_cells, markov, cdf, guide, row_cdf):
    out = np.empty(count)
    modulus = np.int64(1)
    for _ in range(depth - 1):
        modulus *= k_cells
    length = n + depth - 1
    for s in nb.prange(count):
        key = rng.nb_stream_key(seed, base_sid + np.uint64(s))
        prev = np.int64(0)
        code = np.int64(0)
        total = 0.0
        for j in range(length):
            prev = _next_symbol(key, np.uint64(j), prev, markov, cdf, guide, row_cdf)
            code = (code % modulus) * k_cells + prev
            if j >= depth - 1:
                total += values[code]
        out[s] = total
    return out


@nb.njit(parallel=True, cache=True)
def _induced_sums(seed, base_sid, n, count, cdf, guide, a):
    out = np.empty(count)
    for s in nb.prange(count):
        key = rng.nb_stream_key(seed, base_sid + np.uint64(s))
        cells = np.empty(n, dtype=np.int64)
        for j in range(n):
            cells[j] = _guided(cdf, guide, rng.nb_uniform(key, np.uint64(j)))
        v = rng.nb_uniform(key, np.uint64(n))
        total = 0.0
        for j in range(n - 1, -1, -1):
            k = cells[j] + 1
            total += induced_value(k, v, a)
            v = 2.0 ** (-k) * (1.0 + v)
        out[s] = total
    return out


@nb.njit(parallel=True, cache=True)
def _iid_atom_sums(seed, base_sid, n, count, values, cdf, guide):
    out = np.empty(count)
    for s in nb.prange(count):
        key = rng.nb_stream_key(seed, base_sid + np.uint64(s))
        total = 0.0
        for j in range(n):
            total += values[_guided(cdf, guide, rng.nb_uniform(key, np.uint64(j)))]
        out[s] = total
    return out


@nb.njit(parallel=True, cache=True)
def _iid_induced_sums(seed, base_sid, n, count, cdf, guide, a):
    out = np.empty(count)
    for s in nb.prange(count):
        key = rng.nb_stream_key(seed, base_sid + np.uint64(s))
        total = 0.0
        for j in range(n):
            c = _guided(cdf, guide, rng.nb_uniform(key, np.uint64(2 * j)))
            total += induced_value(c + 1, rng.nb_uniform(key, np.uint64(2 * j + 1)), a)
        out[s] = total
    return out


def _guide_for(cdf):
    g = np.arange(len(cdf), dtype=np.float64) / len(cdf)
    return np.searchsorted(cdf, g, side="right").astype(np.int64)


@lru_cache(maxsize=16)
def _atom_tables(model, observable):
    atoms = maps.observable_distribution(model, observable)
    cdf = np.cumsum(atoms.masses)
    cdf[-1] = 1.0
    return atoms.values, cdf, _guide_for(cdf)


def raw_sums(model, observable, n, count, seed, n_index=0, ensemble="dynamical", workers=None):
    """Unnormalized ``S_n`` for ``count`` independent samples."""
    _set_workers(workers)
    seed = np.uint64(seed)
    if ensemble == "dynamical":
        base = np.uint64(rng.stream_id_for(rng.DOMAIN_TRAJECTORY, n_index, 0))
        if observable.kind == "induced_power":
            return _induced_sums(seed, base, n, count, model.cdf, model.guide, observable.exponent)
        return _table_sums(seed, base, n, count, observable.values, observable.depth,
                           model.n_cells, model.is_markov, model.cdf, model.guide, model.row_cdf)
    base = np.uint64(rng.stream_id_for(rng.DOMAIN_IID, n_index, 0))
    if observable.kind == "induced_power":
        return _iid_induced_sums(seed, base, n, count, model.cdf, model.guide, observable.exponent)
    values, cdf, guide = _atom_tables(model, observable)
    return _iid_atom_sums(seed, base, n, count, values, cdf, guide)


def _run(plan, ensemble):
    digest = plan.digest()
    out = {}
    for i, n in enumerate(plan.n_list):
        s = raw_sums(plan.model, plan.observable, n, plan.samples, plan.seed, i, ensemble,
                     plan.workers)
        a, b = plan.norming_for(n)
        out[n] = EmpiricalDistribution(np.sort((s - a) / b), n, int(plan.seed), digest, ensemble)
    return out


def run_plan(plan):
    """``n -> EmpiricalDistribution`` of ``(S_n f - A_n) / B_n`` along trajectories."""
    return _run(plan, "dynamical")


def run_iid_plan(plan):
    """Same as :func:`run_plan` for sums of i.i.d. copies of ``f``."""
    return _run(plan, "iid")


# ---------------------------------------------------------------- targets


def normal_cdf(variance=1.0):
    sd = math.sqrt(variance)
    return lambda x: stats.norm.cdf(x, scale=sd)


class StableCDF:
    """Stable distribution function, tabulated once and interpolated.

    The table has 4096 points on an ``asinh`` grid over ``[lo, hi]`` and is
    interpolated monotonically (PCHIP); points outside the table are
    evaluated exactly.
    """

    def __init__(self, params, lo=-200.0, hi=200.0, size=CDF_GRID):
        self.params = params
        self.lo, self.hi = float(lo), float(hi)
        u = np.linspace(math.asinh(self.lo), math.asinh(self.hi), size)
        self.grid = np.sinh(u)
        vals = np.array([domains.stable_cdf(params, x) for x in self.grid])
        self.table = np.maximum.accumulate(vals)
        self._interp = interpolate.PchipInterpolator(self.grid, self.table, extrapolate=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        out = self._interp(np.clip(flat, self.lo, self.hi))
        outside = (flat < self.lo) | (flat > self.hi)
        for i in np.flatnonzero(outside):
            out[i] = domains.stable_cdf(self.params, float(flat[i]))
        out = out.reshape(np.shape(x)) if np.ndim(x) else float(out[0])
        return out


@lru_cache(maxsize=32)
def stable_cdf_table(params, lo=-200.0, hi=200.0):
    return StableCDF(params, lo, hi)


def target_cdf(domain, sigma2=None):
    """CDF of the limit law: ``N(0, sigma2)`` (D1), ``N(0, 1)`` (D2) or stable (D3)."""
    if domain.variant == "D1":
        return normal_cdf(sigma2 if sigma2 is not None else domain.variance)
    if domain.variant == "D2":
        return normal_cdf(1.0)
    return stable_cdf_table(domains.stable_params(domain))


# ------------------------------------------------------------- statistics


def ks_distance(sample, target):
    """Exact ``sup |F_N - F|`` for continuous ``F``, attained at the sample points."""
    x = sample.values if isinstance(sample, EmpiricalDistribution) else np.sort(np.asarray(sample, float))
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    f = np.asarray(target(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_two_sample(a, b):
    xa = a.values if isinstance(a, EmpiricalDistribution) else np.asarray(a, float)
    xb = b.values if isinstance(b, EmpiricalDistribution) else np.asarray(b, float)
    return float(stats.ks_2samp(xa, xb).statistic)


def ks_noise_floor(n_samples):
    return NOISE_KS / math.sqrt(n_samples)


def empirical_cf(sample, t_grid):
    x = sample.values if isinstance(sample, EmpiricalDistribution) else np.asarray(sample, float)
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    return np.array([np.mean(np.exp(1j * tt * x)) for tt in t])


@dataclass(frozen=True)
class EpsilonTable:
    n: np.ndarray
    t: np.ndarray
    ecf: np.ndarray
    pred: np.ndarray
    eps: np.ndarray
    noise_floor: float


def epsilon_n_estimate(model, observable, n_list, t_grid, samples, seed, workers=None):
    """``|E e^{itS_n} - lambda(t)^n mu(t)|`` with the empirical CF on the left."""
    from . import spectral

    plan = SimulationPlan(model, observable, tuple(n_list), samples, seed, workers)
    ens = run_plan(plan)
    sp = spectral.Spectrum(model, observable)
    pts = {float(t): sp.point(float(t)) for t in t_grid}
    rows_n, rows_t, ecf, pred = [], [], [], []
    for n in plan.n_list:
        emp = empirical_cf(ens[n], t_grid)
        for t, e in zip(t_grid, emp):
            pt = pts[float(t)]
            rows_n.append(n)
            rows_t.append(float(t))
            ecf.append(e)
            pred.append(pt.mu * pt.lam**n)
    ecf, pred = np.array(ecf), np.array(pred)
    return EpsilonTable(np.array(rows_n), np.array(rows_t), ecf, pred, np.abs(ecf - pred),
                        NOISE_CF / math.sqrt(samples))


# ----------------------------------------------------------- Berry-Esseen


@dataclass(frozen=True)
class BerryEsseenCurve:
    n: np.ndarray
    delta: np.ndarray
    sigma2: float
    exponent: float
    band: float
    noise_floor: float
    used: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


# standard deviation of the Kolmogorov law (sqrt(N) times the KS statistic)
KOLMOGOROV_SD = math.sqrt(math.pi**2 / 12.0 - (math.pi / 2.0) * math.log(2.0) ** 2)
FIT_FLOOR_FACTOR = 1.0


def fit_rate(n, delta, floor, samples):
    """Weighted log-log fit of ``delta ~ C n**-e`` over points above the noise floor.

    ``log delta_i`` has standard deviation about ``KOLMOGOROV_SD / (sqrt(N) delta_i)``;
    the fit uses the inverse variances as weights.  The band is two standard
    errors, taken from these known variances and, with three or more points,
    from the residual scatter if that is larger.
    """
    n = np.asarray(n, float)
    delta = np.asarray(delta, float)
    used = delta > FIT_FLOOR_FACTOR * floor
    if used.sum() < 2:
        return math.nan, math.inf, used
    x, y = np.log(n[used]), np.log(delta[used])
    w = (delta[used] * math.sqrt(samples) / KOLMOGOROV_SD) ** 2
    xm, ym = np.average(x, weights=w), np.average(y, weights=w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    var = 1.0 / sxx
    if used.sum() > 2:
        resid = y - ym - slope * (x - xm)
        var = max(var, np.sum(w * resid**2) / (used.sum() - 2) / sxx)
    return float(-slope), float(2.0 * math.sqrt(var)), used


def berry_esseen_curve(model, observable, sigma2, n_list, samples, seed, workers=None):
    """``Delta_n = KS((S_n f - n E f) / sqrt(n), N(0, sigma2))`` and its fitted decay exponent."""
    if not sigma2 > 1e-10:
        raise SigmaZero("sigma^2 vanishes: the observable is a coboundary")
    mean = maps.observable_mean(model, observable)
    plan = SimulationPlan(model, observable, tuple(n_list), samples, seed, workers,
                          norming=lambda n: (n * mean, math.sqrt(n)))
    ens = run_plan(plan)
    target = normal_cdf(sigma2)
    delta = np.array([ks_distance(ens[n], target) for n in plan.n_list])
    floor = ks_noise_floor(samples)
    expo, band, used = fit_rate(plan.n_list, delta, floor, samples)
    return BerryEsseenCurve(np.array(plan.n_list), delta, float(sigma2), expo, band, floor, used)


@dataclass(frozen=True)
class TailCondition:
    verdict: str
    delta: float
    x: np.ndarray
    scaled_tail: np.ndarray
    slope: float
    third_moment: np.ndarray | None = None
    third_slope: float | None = None


TREND_SLOPE_MAX = 0.05


def _trend_slope(x, y):
    pos = y > 0
    if pos.sum() < 3:
        return 0.0
    return float(stats.linregress(np.log(x[pos]), np.log(y[pos])).slope)


def tail_condition_check(tail, delta, x_grid=None):
    """Is ``x**delta E(f^2 1{|f| > x})`` bounded? (and ``E(f^3 1{|f| < x})`` when ``delta = 1``).

    Verdict ``Bounded`` iff the log-log trend of the scaled tail moment over
    the grid is at most 0.05; the atoms make the curve a sawtooth, so a
    trend rather than pointwise monotonicity is tested.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    atoms = tail.atoms
    v, m = atoms.values, atoms.masses
    if x_grid is None:
        win = domains.tail_window(tail)
        absv = np.abs(v[v != 0])
        hi = win[1] if win is not None else float(absv.max())
        lo = max(hi / 100.0, float(absv.min()))
        x_grid = np.geomspace(lo, hi, 40)
    x = np.asarray(x_grid, dtype=float)
    order = np.argsort(np.abs(v))
    av = np.abs(v)[order]
    sq = np.concatenate([[0.0], np.cumsum((v**2 * m)[order])])
    cube = np.concatenate([[0.0], np.cumsum((v**3 * m)[order])])
    above = sq[-1] - sq[np.searchsorted(av, x, side="right")]
    scaled = x**delta * above
    slope = _trend_slope(x, scaled)
    ok = slope <= TREND_SLOPE_MAX
    third = third_slope = None
    if delta == 1:
        third = cube[np.searchsorted(av, x, side="left")]
        third_slope = _trend_slope(x, np.abs(third))
        ok = ok and third_slope <= TREND_SLOPE_MAX
    return TailCondition("Bounded" if ok else "Unbounded", delta, x, scaled, slope, third, third_slope)


# -------------------------------------------------------------------- csv


def write_ecdf_csv(path, sample, target=None, points=None):
    x = sample.values
    if points is not None and len(x) > points:
        idx = np.unique(np.linspace(0, len(x) - 1, points).round().astype(int))
        x = x[idx]
    f_emp = sample.cdf(x)
    f_t = np.asarray(target(x)) if target is not None else np.full(len(x), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "f_emp", "f_target"])
        for a, b, c in zip(x, f_emp, f_t):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def write_berry_esseen_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "delta_n", "noise_floor"])
        for n, d in zip(curve.n, curve.delta):
            w.writerow([int(n), repr(float(d)), repr(curve.noise_floor)])


def write_cf_csv(path, table):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "re_ecf", "im_ecf", "re_pred", "im_pred", "eps_n"])
        for t, e, p, eps in zip(table.t, table.ecf, table.pred, table.eps):
            w.writerow([repr(float(t)), repr(e.real), repr(e.imag), repr(p.real), repr(p.imag),
                        repr(float(eps))])
