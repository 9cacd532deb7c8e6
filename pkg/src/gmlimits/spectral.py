"""Perturbed transfer operators on cylinder functions.

For a depth-``k`` observable ``f`` the operator ``T_t u = T(e^{itf} u)``
maps functions of the first ``k`` symbols to functions of the first ``k``
symbols, so it is a finite matrix on admissible depth-``k`` words.
Convention: vectors are indexed by words (the rows of
``model.cylinders(k)``) and the matrix acts on column vectors,

    M_t[w', w] = g(w) exp(i t f(w))    for w = (a, w'_0, ..., w'_{k-2}),

with ``g(w) = m(a) P(a, w'_0) / m(w'_0)``.  The invariant measure ``m``
(cylinder masses) is a left fixed vector of ``M_0`` and constants are a
right fixed vector.

Countable alphabets are truncated to at most ``max_dim`` words; quantities
are then computed at two truncation levels and their difference is
reported as truncation bias.
"""

from concurrent.futures import ThreadPoolExecutor
import csv
import dataclasses
from dataclasses import dataclass
import math
import os

import numpy as np
import scipy.linalg
from scipy import sparse, stats
from scipy.sparse import linalg as splinalg

from . import maps, rng
from .errors import FitUnstable, GapCollapse, ObservableNotRepresentable, SlowMixing, StepTooLarge

GAP_COLLAPSE_TOL = 1e-6
DENSE_MAX = 2000
DEFAULT_MAX_DIM = 2000
FD_STEPS = (1e-2, 5e-3)
FD_TOL = 1e-5
GK_TOL = 1e-12
MAX_HORIZON = 200_000
BAND_MAX = 0.5


# ------------------------------------------------------------- truncation


def coarsen(model, observable, n_cells):
    """Restrict a countable Bernoulli model and its table to the first ``n_cells`` cells."""
    if model.kind != "countable_bernoulli" or n_cells >= model.n_cells:
        return model, observable
    w = model.stationary[:n_cells]
    kept = float(w.sum())
    small = dataclasses.replace(
        model, n_cells=n_cells, stationary=w / kept, truncation_index=n_cells,
        tail_mass=1.0 - (1.0 - model.tail_mass) * kept)
    d = observable.depth
    vals = observable.values.reshape((model.n_cells,) * d)[(slice(0, n_cells),) * d]
    obs = dataclasses.replace(observable, values=vals.reshape(-1).copy(), n_cells=n_cells)
    return small, obs


def _fit_dimension(model, observable, max_dim):
    d = observable.depth
    k = model.n_cells
    if k**d <= max_dim:
        return k
    if model.kind != "countable_bernoulli":
        raise MemoryError(f"{k}**{d} cylinders exceed max_dim={max_dim}")
    return max(2, int(math.floor(max_dim ** (1.0 / d))))


# ---------------------------------------------------------- transfer matrix


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """``M_t`` on depth-``k`` words.

    ``matrix`` is dense or sparse; for i.i.d. depth-1 inputs it is ``None``
    and the operator is the rank-one ``1 v^T`` with ``v = m e^{itf}``.
    """

    t: float
    depth: int
    words: np.ndarray
    weights: np.ndarray
    phase: np.ndarray
    matrix: object = None
    rank_one: np.ndarray | None = None

    @property
    def dim(self):
        return len(self.weights)

    def matvec(self, u):
        if self.rank_one is not None:
            return np.full(self.dim, self.rank_one @ u, dtype=complex)
        return self.matrix @ u

    def rmatvec(self, v):
        """Row action ``v M``."""
        if self.rank_one is not None:
            return v.sum() * self.rank_one
        return self.matrix.T @ v

    def dense(self):
        if self.rank_one is not None:
            return np.tile(self.rank_one, (self.dim, 1))
        if sparse.issparse(self.matrix):
            return self.matrix.toarray()
        return self.matrix


def _structure(model, observable):
    """Words, masses, f-values and the (row, col, g) sparsity pattern of ``M_0``."""
    if observable.kind != "depth_table":
        raise ObservableNotRepresentable("induced observables have unbounded depth")
    depth = observable.depth
    words = model.cylinders(depth)
    weights = model.cylinder_measure(words)
    fvals = observable(words)
    if depth == 1 and not model.is_markov:
        return words, weights, fvals, None
    k_cells = model.n_cells
    pi = model.stationary
    p = model.transition_matrix()
    codes = model.codes(words)
    index = np.full(k_cells**depth, -1, dtype=np.int64)
    index[codes] = np.arange(len(words))
    rows, cols, vals = [], [], []
    suffix = codes % (k_cells ** (depth - 1)) if depth > 1 else np.zeros(len(words), dtype=np.int64)
    last = words[:, -1]
    first = words[:, 0]
    for b in range(k_cells):
        ok = p[last, b] > 0
        j = np.flatnonzero(ok)
        target = index[suffix[j] * k_cells + b]
        second = words[j, 1] if depth > 1 else np.full(len(j), b)
        g = pi[first[j]] * p[first[j], second] / pi[second]
        rows.append(target)
        cols.append(j)
        vals.append(g)
    pattern = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    return words, weights, fvals, pattern


def transfer_matrix(model, observable, t, max_dim=DEFAULT_MAX_DIM, _structure_cache=None):
    """Matrix of ``u -> T(e^{itf} u)`` on depth-``k`` cylinder functions."""
    if _structure_cache is None:
        kk = _fit_dimension(model, observable, max_dim)
        model, observable = coarsen(model, observable, kk)
        _structure_cache = _structure(model, observable)
    words, weights, fvals, pattern = _structure_cache
    phase = np.exp(1j * t * fvals)
    if pattern is None:
        return TransferMatrix(t, 1, words, weights, phase, rank_one=weights * phase)
    r, c, g = pattern
    n = len(weights)
    mat = sparse.csr_matrix((g * phase[c], (r, c)), shape=(n, n))
    if n <= DENSE_MAX:
        mat = mat.toarray()
    return TransferMatrix(t, observable.depth, words, weights, phase, matrix=mat)


# ------------------------------------------------------------ eigenproblem


@dataclass(frozen=True)
class SpectralPoint:
    t: float
    lam: complex
    xi: np.ndarray
    mu: complex
    gap: float
    truncation_bias: float | None = None


def leading_eigen(tm):
    """Top eigenvalue ``lambda``, ``xi`` with ``int xi dm = 1``, ``mu`` and the gap ratio.

    ``mu = (l . 1)(m . r) / (l . r)`` for left/right top eigenvectors ``l, r``.
    Dense problems use a full eigendecomposition; larger ones use ARPACK for
    the two largest eigenvalues (right and left).
    """
    m = tm.weights
    n = tm.dim
    if tm.rank_one is not None:
        lam = complex(tm.rank_one.sum())
        return SpectralPoint(tm.t, lam, np.ones(n, dtype=complex), 1.0 + 0j, 0.0)
    if n == 1:
        lam = complex(tm.dense()[0, 0])
        return SpectralPoint(tm.t, lam, np.ones(1, dtype=complex), 1.0 + 0j, 0.0)
    if not sparse.issparse(tm.matrix):
        vals, vl, vr = scipy.linalg.eig(tm.matrix, left=True, right=True)
        order = np.argsort(-np.abs(vals))
        lam = vals[order[0]]
        second = abs(vals[order[1]])
        r = vr[:, order[0]]
        left = vl[:, order[0]].conj()
    else:
        a = tm.matrix.tocsr()
        k = min(2, n - 2)
        vals, vecs = splinalg.eigs(a, k=k, which="LM", tol=1e-14)
        order = np.argsort(-np.abs(vals))
        lam = vals[order[0]]
        second = abs(vals[order[1]]) if k > 1 else 0.0
        r = vecs[:, order[0]]
        lv, lvecs = splinalg.eigs(a.T.tocsr(), k=k, which="LM", tol=1e-14)
        left = lvecs[:, np.argmin(np.abs(lv - lam))]
    if abs(lam) - second < GAP_COLLAPSE_TOL:
        raise GapCollapse(f"top eigenvalues {abs(lam):.8f} and {second:.8f} are not separated at t={tm.t}")
    mr = m @ r
    xi = r / mr
    mu = left.sum() * mr / (left @ r)
    return SpectralPoint(tm.t, complex(lam), xi, complex(mu), float(second / abs(lam)))


class Spectrum:
    """Cached spectral computations for one model/observable pair."""

    def __init__(self, model, observable, max_dim=DEFAULT_MAX_DIM):
        self.model = model
        self.observable = observable
        self.max_dim = max_dim
        kk = _fit_dimension(model, observable, max_dim)
        self.truncated = kk < model.n_cells
        self.levels = [kk] if not self.truncated else [kk, max(2, kk // 2)]
        self._pairs = [coarsen(model, observable, k) for k in self.levels]
        self._structs = [_structure(m, o) for m, o in self._pairs]

    @property
    def working_model(self):
        return self._pairs[0][0]

    @property
    def working_observable(self):
        return self._pairs[0][1]

    @property
    def weights(self):
        return self._structs[0][1]

    @property
    def fvalues(self):
        return self._structs[0][2]

    def matrix(self, t, level=0):
        m, o = self._pairs[level]
        return transfer_matrix(m, o, t, _structure_cache=self._structs[level])

    def point(self, t):
        pt = leading_eigen(self.matrix(t))
        if self.truncated:
            coarse = leading_eigen(self.matrix(t, level=1))
            pt = dataclasses.replace(pt, truncation_bias=abs(pt.lam - coarse.lam))
        return pt

    def lam(self, t):
        return leading_eigen(self.matrix(t)).lam

    def cf(self, t):
        """``E e^{itf}`` on the working (possibly truncated) model."""
        return complex(self.weights @ np.exp(1j * t * self.fvalues))

    def mean(self):
        return float(self.weights @ self.fvalues)

    def grid(self, t_grid, workers=None):
        t_grid = [float(t) for t in t_grid]
        workers = workers or min(len(t_grid), os.cpu_count() or 1)
        if workers <= 1:
            return [self.point(t) for t in t_grid]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(self.point, t_grid))


def spectrum(model, observable, t_grid, max_dim=DEFAULT_MAX_DIM, workers=None):
    return Spectrum(model, observable, max_dim).grid(t_grid, workers)


def gap_ceiling(model, observable, t_max=None, n_scan=200, max_dim=DEFAULT_MAX_DIM):
    """Half of the first ``t`` where the top two eigenvalue moduli meet (``inf`` if never)."""
    sp = Spectrum(model, observable, max_dim)
    if t_max is None:
        fmax = np.max(np.abs(sp.fvalues))
        t_max = math.pi / fmax if fmax > 0 else 1.0
    for t in np.linspace(t_max / n_scan, t_max, n_scan):
        try:
            leading_eigen(sp.matrix(t))
        except GapCollapse:
            return 0.5 * float(t)
    return math.inf


def check_grid(t_grid, ceiling):
    bad = [t for t in t_grid if abs(t) > ceiling]
    if bad:
        raise GapCollapse(f"|t| = {max(abs(b) for b in bad):g} beyond the perturbative ceiling {ceiling:g}")


def write_spectrum_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "re_lambda", "im_lambda", "abs_lambda", "re_mu", "im_mu", "gap"])
        for p in points:
            w.writerow([repr(p.t), repr(p.lam.real), repr(p.lam.imag), repr(abs(p.lam)),
                        repr(p.mu.real), repr(p.mu.imag), repr(p.gap)])


# ------------------------------------------------------------ identities


def lambda_identity_check(model, observable, t, max_dim=DEFAULT_MAX_DIM):
    """``|lambda(t) - E e^{itf} - int (e^{itf} - 1)(xi_t - 1) dm|``."""
    sp = Spectrum(model, observable, max_dim)
    tm = sp.matrix(t)
    pt = leading_eigen(tm)
    rhs = sp.cf(t) + tm.weights @ ((tm.phase - 1.0) * (pt.xi - 1.0))
    return float(abs(pt.lam - rhs))


def characteristic_check(model, observable, t, n, max_dim=DEFAULT_MAX_DIM):
    """``(int T_t^n 1 dm, mu lambda^n, gap)`` for the spectral decomposition check."""
    sp = Spectrum(model, observable, max_dim)
    tm = sp.matrix(t)
    pt = leading_eigen(tm)
    u = np.ones(tm.dim, dtype=complex)
    for _ in range(n):
        u = tm.matvec(u)
    return complex(tm.weights @ u), pt.mu * pt.lam**n, pt.gap


# ------------------------------------------------------- variance and bias


@dataclass(frozen=True)
class GreenKubo:
    sigma2: float
    horizon: int
    error_bound: float
    correlations: np.ndarray


def _centered(sp):
    m = sp.weights
    f = sp.fvalues
    return f - m @ f


def green_kubo_sigma2(model, observable, horizon="auto", tol=GK_TOL, max_dim=DEFAULT_MAX_DIM,
                      max_horizon=MAX_HORIZON):
    """``int f~^2 + 2 sum_{k=1}^K int f~ . f~ o T^k`` via ``int (T^k f~) f~ dm``."""
    sp = Spectrum(model, observable, max_dim)
    tm = sp.matrix(0.0)
    gap = leading_eigen(tm).gap
    if horizon == "auto":
        horizon = 1 if gap <= 0 else int(math.ceil(math.log(tol) / math.log(gap))) + observable.depth
    if horizon > max_horizon:
        raise SlowMixing(f"gap ratio {gap:.6f} needs {horizon} lags (limit {max_horizon})")
    m = tm.weights
    ft = _centered(sp)
    corr = np.empty(horizon + 1)
    v = ft.astype(complex)
    corr[0] = m @ (ft * ft)
    for k in range(1, horizon + 1):
        v = tm.matvec(v)
        corr[k] = (m @ (v * ft)).real
    sigma2 = corr[0] + 2.0 * corr[1:].sum()
    sup = np.max(np.abs(ft)) if len(ft) else 0.0
    bound = 2.0 * sup**2 * gap ** (horizon + 1 - observable.depth) / (1.0 - gap) if gap < 1 else math.inf
    return GreenKubo(float(sigma2), int(horizon), float(bound), corr)


def sigma2_from_lambda(model, observable, steps=FD_STEPS, tol=FD_TOL, max_dim=DEFAULT_MAX_DIM):
    """``-Re lambda''(0) - E(f)^2`` by 5-point differences and Richardson extrapolation."""
    sp = Spectrum(model, observable, max_dim)
    lam0 = sp.lam(0.0)

    def second(h):
        return (-sp.lam(2 * h) + 16 * sp.lam(h) - 30 * lam0 + 16 * sp.lam(-h) - sp.lam(-2 * h)) / (12 * h * h)

    h1, h2 = steps
    d1, d2 = second(h1), second(h2)
    if abs(d1 - d2) > tol:
        raise StepTooLarge(f"lambda'' estimates {d1.real:.8g} and {d2.real:.8g} disagree")
    ratio = (h1 / h2) ** 4
    d = (ratio * d2 - d1) / (ratio - 1.0)
    return float(-d.real - sp.mean() ** 2)


@dataclass(frozen=True)
class BiasFunction:
    u1: np.ndarray
    u1_solve: np.ndarray
    discrepancy: float
    words: np.ndarray


def bias_function_u1(model, observable, horizon="auto", tol=GK_TOL, max_dim=DEFAULT_MAX_DIM,
                     max_horizon=MAX_HORIZON):
    """``u1 = i sum_{k=0}^K T^{k+1} f~``, cross-checked by a linear solve.

    On mean-zero functions ``v = sum_{k>=1} T^k f~`` solves
    ``(I - T + 1 m^T) v = T f~``.
    """
    sp = Spectrum(model, observable, max_dim)
    tm = sp.matrix(0.0)
    gap = leading_eigen(tm).gap
    if horizon == "auto":
        horizon = 1 if gap <= 0 else int(math.ceil(math.log(tol) / math.log(gap))) + observable.depth
    if horizon > max_horizon:
        raise SlowMixing(f"gap ratio {gap:.6f} needs {horizon} lags (limit {max_horizon})")
    ft = _centered(sp).astype(complex)
    acc = np.zeros(tm.dim, dtype=complex)
    v = ft
    for _ in range(horizon + 1):
        v = tm.matvec(v)
        acc += v
    u1 = 1j * acc
    m = tm.weights
    a = np.eye(tm.dim) - tm.dense() + np.outer(np.ones(tm.dim), m)
    solved = 1j * np.linalg.solve(a, tm.matvec(ft))
    return BiasFunction(u1, solved, float(np.max(np.abs(u1 - solved))), tm.words)


# ------------------------------------------------------------ expansion


@dataclass(frozen=True)
class ExpansionFit:
    coefficients: dict
    q_hat: float
    band: float
    window: tuple
    residual: np.ndarray
    t: np.ndarray
    degenerate: bool = False


def expansion_fit(model, observable, p_hint, t_grid=None, max_dim=DEFAULT_MAX_DIM, rel_zero=1e-12,
                  min_decades=3.0):
    """Fit ``r(t) = lambda(t) - E e^{itf}`` and estimate the residual exponent.

    Integer powers ``2 <= i <= p_hint`` are removed first: ``c_2`` exactly as
    ``-sum_{k>=1} int f~ . f~ o T^k`` (from the bias function), higher ones
    by least squares.  ``q_hat`` is the log-log slope of the remaining
    ``|r|`` with a band of two standard errors; the grid must span at
    least ``min_decades`` decades.
    """
    if t_grid is None:
        t_grid = np.geomspace(5e-4, 0.5, 31)
    t = np.sort(np.asarray(t_grid, dtype=float))
    if t[0] <= 0 or np.log10(t[-1] / t[0]) < min_decades - 1e-9:
        raise ValueError(f"t grid must be positive and span at least {min_decades:g} decades")
    sp = Spectrum(model, observable, max_dim)
    r = np.array([sp.lam(tt) - sp.cf(tt) for tt in t])
    scale = max(1.0, float(np.max(np.abs(r))))
    powers = list(range(2, int(math.floor(p_hint)) + 1))
    coeffs = {}
    resid = r.copy()
    if 2 in powers:
        bf = bias_function_u1(model, observable, max_dim=max_dim)
        c2 = complex(1j * (sp.weights @ (sp.fvalues * bf.u1)))
        coeffs[2] = c2
        resid = resid - c2 * t**2
    higher = [i for i in powers if i > 2]
    if higher:
        design = np.column_stack([t**i for i in higher])
        sol, *_ = np.linalg.lstsq(design, resid, rcond=None)
        for i, c in zip(higher, sol):
            coeffs[i] = complex(c)
        resid = resid - design @ sol
    mag = np.abs(resid)
    if np.all(mag <= rel_zero * scale):
        return ExpansionFit(coeffs, math.inf, 0.0, (t[0], t[-1]), resid, t, degenerate=True)
    keep = mag > rel_zero * scale
    fit = stats.linregress(np.log(t[keep]), np.log(mag[keep]))
    band = 2.0 * fit.stderr
    if band > BAND_MAX:
        raise FitUnstable(f"residual exponent band {band:.3f} wider than {BAND_MAX}")
    return ExpansionFit(coeffs, float(fit.slope), float(band), (t[0], t[-1]), resid, t)


# ------------------------------------------------------------ coboundary


@dataclass(frozen=True)
class CoboundaryVerdict:
    verdict: str
    sigma2: float
    c_estimate: float
    range_growth: float | None
    # S_n f - n c_estimate and the range of the centred path, per trajectory
    centered_sums: np.ndarray | None = None
    path_ranges: np.ndarray | None = None


def coboundary_detect(model, observable, tol=1e-8, n=10_000, n_traj=100, seed=0,
                      max_dim=DEFAULT_MAX_DIM):
    """Coboundary iff ``sigma^2 < tol`` and centred partial sums stay bounded.

    Boundedness: along ``n_traj`` trajectories of length ``n``, the mean
    range of ``S_j f~`` over ``j <= n`` must grow by less than a factor 2
    from ``j <= n/10`` to ``j <= n`` (diffusive growth gives ``sqrt(10)``).
    """
    sigma2 = green_kubo_sigma2(model, observable, max_dim=max_dim).sigma2
    mean = maps.observable_mean(model, observable)
    if sigma2 > 10 * tol:
        return CoboundaryVerdict("NotCoboundary", sigma2, mean, None)
    short, full, last = [], [], []
    for j in range(n_traj):
        sid = rng.stream_id_for(rng.DOMAIN_AUX, 0, j)
        traj = maps.sample_trajectory(model, n + observable.depth - 1, seed, sid)
        s = np.cumsum(maps.observable_along(model, observable, traj, n) - mean)
        short.append(np.ptp(s[: n // 10]))
        full.append(np.ptp(s))
        last.append(s[-1])
    growth = float(np.mean(full) / max(np.mean(short), 1e-300))
    verdict = "Coboundary" if sigma2 < tol and growth < 2.0 else "Inconclusive"
    return CoboundaryVerdict(verdict, sigma2, mean, growth, np.array(last), np.array(full))
