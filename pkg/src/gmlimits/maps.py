"""Gibbs-Markov models, observables, trajectories and Birkhoff sums.

Three model kinds are supported:

* ``finite_markov``: a mixing Markov shift on a finite alphabet, given by a
  row-stochastic transition matrix;
* ``countable_bernoulli``: a full shift with an analytic weight sequence,
  truncated once the remaining tail mass is below a tolerance;
* ``induced_doubling``: the first-return map of ``x -> 2x mod 1`` to
  ``[1/2, 1)``, whose cells are indexed by the return time ``k >= 1`` and
  carry mass ``2**-k``.

Symbolic points are sequences of cell indices; the metric is
``d(x, y) = gamma ** s(x, y)`` with ``s`` the first index where the
sequences differ.  Observables on symbolic models are depth-``k`` tables
(functions of the first ``k`` symbols), stored densely over ``K**k`` codes
with ``code = sum(w[j] * K**(k-1-j))`` and NaN on inadmissible words.
"""

from dataclasses import dataclass, field
from functools import cached_property
import math
import warnings

import numba as nb
import numpy as np
from scipy import special
from scipy.sparse import csgraph

from . import rng
from .errors import (
    NotMixing,
    NotStochastic,
    NotSummable,
    ObservableNotRepresentable,
    TolTooTight,
    TrajectoryTooShort,
)

STOCHASTIC_TOL = 1e-12
MAX_CELLS = 10**8
MAX_TABLE = 10**7


@dataclass(frozen=True, eq=False)
class GibbsMarkovModel:
    kind: str
    n_cells: int
    stationary: np.ndarray
    gamma: float = 0.5
    transition: np.ndarray | None = None
    truncation_index: int | None = None
    tail_mass: float = 0.0
    weights_spec: dict | None = None
    induced_a: float | None = None
    distortion: float = 1.0

    @property
    def is_markov(self):
        return self.kind == "finite_markov"

    def transition_matrix(self):
        """Dense transition matrix; Bernoulli rows all equal the weights."""
        if self.transition is not None:
            return self.transition
        if self.n_cells > 5000:
            raise MemoryError("dense transition matrix too large")
        return np.tile(self.stationary, (self.n_cells, 1))

    @cached_property
    def cdf(self):
        c = np.cumsum(self.stationary)
        c[-1] = 1.0
        return c

    @cached_property
    def guide(self):
        # guide[j] = first cell whose cdf exceeds j / n_guide
        g = np.arange(self.n_cells, dtype=np.float64) / self.n_cells
        return np.searchsorted(self.cdf, g, side="right").astype(np.int64)

    @cached_property
    def row_cdf(self):
        if not self.is_markov:
            return np.ones((1, 1))
        c = np.cumsum(self.transition, axis=1)
        c[:, -1] = 1.0
        return c

    def cylinders(self, depth):
        """Admissible words of length ``depth`` as an ``(M, depth)`` array."""
        k_cells = self.n_cells
        if k_cells**depth > MAX_TABLE:
            raise MemoryError(f"{k_cells}**{depth} cylinders exceed the table limit")
        words = np.arange(k_cells).reshape(-1, 1)
        if self.is_markov:
            adj = self.transition > 0
        for _ in range(depth - 1):
            last = words[:, -1]
            nxt = np.tile(np.arange(k_cells), len(words))
            rep = np.repeat(words, k_cells, axis=0)
            if self.is_markov:
                keep = adj[np.repeat(last, k_cells), nxt]
                rep, nxt = rep[keep], nxt[keep]
            words = np.column_stack([rep, nxt])
        return words

    def cylinder_measure(self, words):
        words = np.atleast_2d(words)
        m = self.stationary[words[:, 0]].copy()
        if self.is_markov:
            for j in range(words.shape[1] - 1):
                m *= self.transition[words[:, j], words[:, j + 1]]
        else:
            for j in range(1, words.shape[1]):
                m *= self.stationary[words[:, j]]
        return m

    def codes(self, words):
        words = np.atleast_2d(words)
        code = np.zeros(len(words), dtype=np.int64)
        for j in range(words.shape[1]):
            code = code * self.n_cells + words[:, j]
        return code


@dataclass(frozen=True, eq=False)
class Observable:
    kind: str
    depth: int
    values: np.ndarray | None = None
    eta: float = 1.0
    exponent: float | None = None
    label: str = ""
    n_cells: int = 0

    def __call__(self, words):
        """Evaluate a depth table on an ``(M, depth)`` array of words."""
        if self.kind != "depth_table":
            raise ObservableNotRepresentable("induced observables are not cylinder functions")
        words = np.atleast_2d(words)
        code = np.zeros(len(words), dtype=np.int64)
        for j in range(self.depth):
            code = code * self.n_cells + words[:, j]
        return self.values[code]


@dataclass(frozen=True)
class Trajectory:
    symbols: np.ndarray
    seed: int
    stream_id: int
    # Induced models only: position inside the last cell, uniform on [0, 1).
    tail: float | None = None


@dataclass(frozen=True)
class Atoms:
    """Distribution of an observable as sorted (value, mass) atoms.

    ``truncated_mass`` is the mass of the alphabet dropped by truncation,
    i.e. the part of the distribution the atoms do not describe.
    """

    values: np.ndarray
    masses: np.ndarray
    truncated_mass: float = 0.0

    def mean(self):
        return float(np.dot(self.values, self.masses))

    def variance(self):
        mu = self.mean()
        return float(np.dot((self.values - mu) ** 2, self.masses))

    def cf(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.exp(1j * np.outer(t, self.values)) @ self.masses


# ---------------------------------------------------------------- builders


def build_finite_markov(transition, gamma=0.5):
    p = np.array(transition, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise NotStochastic("transition matrix must be square")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise NotStochastic("transition matrix has negative or non-finite entries")
    rows = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(rows - 1.0) > STOCHASTIC_TOL)
    if len(bad):
        raise NotStochastic(f"row {bad[0]} sums to {rows[bad[0]]!r}")
    _check_mixing(p)
    pi = _stationary(p)
    adm = p > 0
    ratio = (p / pi[None, :])[adm]
    distortion = float(max(ratio.max(), 1.0 / ratio.min()))
    return GibbsMarkovModel(
        kind="finite_markov",
        n_cells=len(p),
        stationary=pi,
        gamma=gamma,
        transition=p,
        distortion=distortion,
    )


def _check_mixing(p):
    # Primitive <=> irreducible and aperiodic; equivalent to P**k > 0 for
    # some k <= (K-1)**2 + 1 without forming matrix powers.
    adj = (p > 0).astype(np.int8)
    n_comp, _ = csgraph.connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        raise NotMixing("transition graph is not irreducible")
    order = csgraph.breadth_first_order(adj, 0, directed=True, return_predecessors=False)
    level = np.full(len(p), -1)
    level[0] = 0
    for v in order:
        for w in np.flatnonzero(adj[v]):
            if level[w] < 0:
                level[w] = level[v] + 1
    src, dst = np.nonzero(adj)
    period = int(np.gcd.reduce(np.abs(level[src] + 1 - level[dst])))
    if period != 1:
        raise NotMixing(f"transition graph has period {period}")


def _stationary(p):
    k = len(p)
    a = p.T - np.eye(k)
    a[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    for _ in range(2):
        pi = pi @ p
        pi /= pi.sum()
    if np.any(pi <= 0):
        raise NotMixing("stationary vector has non-positive entries")
    return pi


def _tail_mass(spec, index):
    """Mass of cells ``index, index+1, ...`` under the normalized weights."""
    kind = spec["type"]
    if kind == "geometric":
        return spec["ratio"] ** index
    if kind == "polynomial":
        s = 1.0 + spec["q"]
        return float(special.zeta(s, index + 1) / special.zeta(s, 1))
    raise NotSummable(f"unknown weight type {kind!r}")


def _weights(spec, count):
    i = np.arange(count, dtype=float)
    if spec["type"] == "geometric":
        r = spec["ratio"]
        return (1.0 - r) * r**i
    s = 1.0 + spec["q"]
    return (i + 1.0) ** (-s) / special.zeta(s, 1)


def build_countable_bernoulli(weights, truncation_tol=1e-6, gamma=0.5, max_cells=MAX_CELLS):
    """Full shift with analytic weights, truncated by tail mass.

    ``weights`` is ``{"type": "geometric", "ratio": r}`` for
    ``m(a_i) = (1 - r) r**i`` or ``{"type": "polynomial", "q": q}`` for
    ``m(a_i) = C (i + 1)**-(1 + q)``.  Cells are retained until the
    remaining tail mass drops below ``truncation_tol``, then renormalized.
    """
    spec = dict(weights)
    kind = spec.get("type")
    if kind == "constant":
        raise NotSummable("equal weights on an infinite alphabet are not summable")
    if kind == "geometric":
        r = float(spec.get("ratio", 0.5))
        if not 0.0 < r < 1.0:
            raise NotSummable(f"geometric ratio {r} is not in (0, 1)")
        spec["ratio"] = r
    elif kind == "polynomial":
        q = float(spec.get("q", 1.0))
        if q <= 0:
            raise NotSummable(f"polynomial weights with q={q} are not summable")
        spec["q"] = q
    else:
        raise NotSummable(f"unknown weight type {kind!r}")
    if not 0.0 < truncation_tol < 1.0:
        raise ValueError("truncation_tol must lie in (0, 1)")

    if kind == "geometric":
        count = max(1, math.floor(math.log(truncation_tol) / math.log(spec["ratio"])) + 1)
        while count > 1 and _tail_mass(spec, count - 1) < truncation_tol:
            count -= 1
        while _tail_mass(spec, count) >= truncation_tol:
            count += 1
        if count > max_cells:
            raise TolTooTight(f"tolerance {truncation_tol} needs {count} cells")
    else:
        lo, hi = 1, 2
        while _tail_mass(spec, hi) >= truncation_tol:
            lo, hi = hi, hi * 2
            if lo > max_cells:
                raise TolTooTight(f"tolerance {truncation_tol} needs more than {max_cells} cells")
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _tail_mass(spec, mid) < truncation_tol:
                hi = mid
            else:
                lo = mid
        count = hi
        if count > max_cells:
            raise TolTooTight(f"tolerance {truncation_tol} needs {count} cells")
    tail = _tail_mass(spec, count)
    m = _weights(spec, count)
    m /= m.sum()
    return GibbsMarkovModel(
        kind="countable_bernoulli",
        n_cells=count,
        stationary=m,
        gamma=gamma,
        truncation_index=count,
        tail_mass=float(tail),
        weights_spec=spec,
    )


def build_induced_doubling(a, truncation_tol=1e-12):
    """First-return map of the doubling map to ``[1/2, 1)`` and ``f0(x) = x**-a``.

    Cell ``c`` (0-based) holds the points with return time ``k = c + 1`` and
    has normalized mass ``2**-k``.  Returns ``(model, observable)`` where
    the observable is the induced sum of ``f0`` along the return orbit.
    """
    a = float(a)
    if not 0.0 < a < 1.0:
        raise ValueError(f"induced exponent a={a} must lie in (0, 1)")
    base = build_countable_bernoulli({"type": "geometric", "ratio": 0.5}, truncation_tol)
    model = GibbsMarkovModel(
        kind="induced_doubling",
        n_cells=base.n_cells,
        stationary=base.stationary,
        gamma=0.5,
        truncation_index=base.truncation_index,
        tail_mass=base.tail_mass,
        weights_spec=base.weights_spec,
        induced_a=a,
    )
    obs = Observable(kind="induced_power", depth=1, exponent=a, eta=min(1.0, 0.99 / (1.0 + a)),
                     label=f"induced x^-{a}", n_cells=model.n_cells)
    return model, obs


def build_reset_chain(cells, q, reset, gamma=0.5):
    """Finite Markov chain with polynomial weights and a reset to cell 0.

    Every row starts from ``w_i ~ (i+1)**-(1+q)``; odd rows move a fraction
    ``reset`` of their mass onto cell 0.  The chain is mixing and not
    i.i.d., so its perturbed spectrum has a non-trivial eigenfunction.
    """
    if not 0.0 <= reset < 1.0:
        raise ValueError("reset must lie in [0, 1)")
    i = np.arange(cells, dtype=float)
    w = (i + 1.0) ** (-(1.0 + q))
    w /= w.sum()
    p = np.tile(w, (cells, 1))
    p[1::2] *= 1.0 - reset
    p[1::2, 0] += reset
    return build_finite_markov(p, gamma=gamma)


# ------------------------------------------------------------- observables


def depth_table(model, values, eta=1.0, label=""):
    """Depth-k observable from a nested ``(K,)*k`` array of values.

    Entries on inadmissible words are ignored (they may be NaN/None);
    every admissible word must carry a finite value.
    """
    if model.kind == "induced_doubling":
        raise ObservableNotRepresentable("induced models carry their own observable")
    arr = np.array(values, dtype=float)
    k_cells = model.n_cells
    depth = arr.ndim
    if arr.shape != (k_cells,) * depth:
        raise ValueError(f"values shape {arr.shape} does not match {(k_cells,) * depth}")
    flat = np.full(k_cells**depth, np.nan)
    words = model.cylinders(depth)
    codes = model.codes(words)
    table = arr.reshape(-1)[codes]
    if not np.all(np.isfinite(table)):
        raise ValueError("values table does not cover every admissible cylinder")
    flat[codes] = table
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    return Observable(kind="depth_table", depth=depth, values=flat, eta=eta, label=label,
                      n_cells=k_cells)


def power_observable(model, power, scale=1.0, offset=0.0, eta=1.0):
    """Depth-1 observable ``f(a_i) = scale * (i + 1)**power + offset``."""
    i = np.arange(model.n_cells, dtype=float)
    return depth_table(model, scale * (i + 1.0) ** power + offset, eta=eta,
                       label=f"{scale}*(i+1)^{power}+{offset}")


def coboundary_observable(model, u, c=0.0, eta=1.0):
    """Depth-2 observable ``f = u - u o T + c`` for a depth-1 function ``u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (model.n_cells,):
        raise ValueError("u must be a depth-1 table")
    return depth_table(model, u[:, None] - u[None, :] + c, eta=eta, label="coboundary")


# ---------------------------------------------------------------- sampling


@nb.njit(cache=True, inline="always")
def _search(cdf, u):
    lo, hi = 0, len(cdf) - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@nb.njit(cache=True, inline="always")
def _guided(cdf, guide, u):
    i = guide[np.int64(u * len(guide))]
    while cdf[i] <= u:
        i += 1
    return i


@nb.njit(cache=True, inline="always")
def _next_symbol(key, j, prev, markov, cdf, guide, row_cdf):
    u = rng.nb_uniform(key, j)
    if markov and j > 0:
        return _search(row_cdf[prev], u)
    return _guided(cdf, guide, u)


@nb.njit(cache=True)
def _fill_symbols(key, length, markov, cdf, guide, row_cdf):
    out = np.empty(length, dtype=np.int64)
    prev = 0
    for j in range(length):
        prev = _next_symbol(key, j, prev, markov, cdf, guide, row_cdf)
        out[j] = prev
    return out


@nb.njit(cache=True)
def induced_value(k, v, a):
    """Induced sum of ``x**-a`` at ``y = 1/2 + 2**-(k+1) * (1 + v)``.

    Along the return orbit ``T**j y = 2**(j-1-k) * (1 + v)`` for
    ``1 <= j < k``, so the sum is ``y**-a + (1+v)**-a * sum_{i=2..k} 2**(i a)``.
    """
    y = 0.5 + 2.0 ** (-k - 1) * (1.0 + v)
    total = y ** (-a)
    if k > 1:
        g = 2.0 ** (2 * a) * (2.0 ** ((k - 1) * a) - 1.0) / (2.0**a - 1.0)
        total += (1.0 + v) ** (-a) * g
    return total


@nb.njit(cache=True)
def _induced_values(cells, tail, a):
    n = len(cells)
    out = np.empty(n)
    v = tail
    for j in range(n - 1, -1, -1):
        k = cells[j] + 1
        out[j] = induced_value(k, v, a)
        # the next base point (1 + v_j) / 2 lies in cell k_j+1 at offset v_{j+1}
        v = 2.0 ** (-k) * (1.0 + v)
    return out


def sample_trajectory(model, n, seed, stream_id):
    """Symbols ``a_0 .. a_{n-1}``; symbol ``j`` uses counter ``j`` of the stream.

    ``a_0`` is drawn from the stationary law, later symbols from the rows of
    the transition matrix (Bernoulli models: i.i.d. by the weights).  For
    induced models the position inside the last cell uses counter ``n``.
    """
    if n < 1:
        raise ValueError("trajectory length must be >= 1")
    key = np.uint64(rng.nb_stream_key(np.uint64(seed), np.uint64(stream_id)))
    symbols = _fill_symbols(key, n, model.is_markov, model.cdf, model.guide, model.row_cdf)
    tail = None
    if model.kind == "induced_doubling":
        tail = float(rng.nb_uniform(key, np.uint64(n)))
    return Trajectory(symbols=symbols, seed=seed, stream_id=stream_id, tail=tail)


def observable_along(model, observable, trajectory, n=None):
    """Values ``f(sigma^k x)`` for ``k < n`` along a stored trajectory."""
    sym = trajectory.symbols
    if observable.kind == "induced_power":
        if n is not None and n != len(sym):
            raise TrajectoryTooShort("induced sums use the whole stored orbit")
        return _induced_values(sym, trajectory.tail, observable.exponent)
    depth = observable.depth
    if n is None:
        n = len(sym) - depth + 1
    if n < 1 or len(sym) < depth + n - 1:
        raise TrajectoryTooShort(f"need {depth + n - 1} symbols, have {len(sym)}")
    words = np.lib.stride_tricks.sliding_window_view(sym[: n + depth - 1], depth)
    return observable(words)


def birkhoff_sum(model, observable, trajectory, n=None):
    """``S_n f = sum_{k<n} f(sigma^k x)`` along a stored trajectory."""
    return float(np.sum(observable_along(model, observable, trajectory, n)))


# -------------------------------------------------------------- regularity


def local_lipschitz(model, observable):
    """``Df(a)`` for every cell ``a``.

    For depth-k tables this is the exact Lipschitz constant on ``[a]`` for
    ``d = gamma**s``: the largest range of ``f`` over words sharing a prefix
    of length ``s``, scaled by ``gamma**-s``.  For the induced observable it
    is the exact Euclidean Lipschitz constant of the induced sum on the
    return-time cell (the supremum of ``|f'|``, attained at the left end).
    """
    if observable.kind == "induced_power":
        a = observable.exponent
        k = np.arange(1, model.n_cells + 1, dtype=float)
        y = 0.5 + 2.0 ** (-k - 1)
        out = a * y ** (-a - 1.0)
        for idx, kk in enumerate(k.astype(int)):
            j = np.arange(1, kk, dtype=float)
            out[idx] += a * np.sum(2.0 ** (j + (kk + 1 - j) * (a + 1.0)))
        return out
    depth = observable.depth
    k_cells = model.n_cells
    df = np.zeros(k_cells)
    if depth == 1:
        return df
    vals = observable.values
    for s in range(1, depth):
        grouped = vals.reshape(k_cells**s, k_cells ** (depth - s))
        with warnings.catch_warnings():
            # all-NaN rows are inadmissible prefixes
            warnings.simplefilter("ignore", RuntimeWarning)
            rng_ = np.nanmax(grouped, axis=1) - np.nanmin(grouped, axis=1)
        rng_ = np.nan_to_num(rng_, nan=0.0)
        per_cell = rng_.reshape(k_cells, -1).max(axis=1) * model.gamma ** (-s)
        df = np.maximum(df, per_cell)
    return df


def regularity_terms(model, observable, eta):
    return model.stationary * local_lipschitz(model, observable) ** eta


def regularity_sum(model, observable, eta):
    """``sum_a m(a) Df(a)**eta``; ``inf`` when the series diverges."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    if observable.kind == "induced_power":
        # m(a_k) Df(a_k)**eta ~ 2**(k ((1 + a) eta - 1)) on the infinite alphabet
        if (1.0 + observable.exponent) * eta >= 1.0:
            return math.inf
    terms = regularity_terms(model, observable, eta)
    if not np.all(np.isfinite(terms)):
        return math.inf
    return float(terms.sum())


# ------------------------------------------------------------ distribution


def observable_distribution(model, observable):
    """Atoms of the law of ``f`` under ``m``, or a sampler for induced sums."""
    if observable.kind == "induced_power":
        return InducedSampler(model, observable.exponent)
    words = model.cylinders(observable.depth)
    masses = model.cylinder_measure(words)
    values = observable(words)
    uniq, inv = np.unique(values, return_inverse=True)
    merged = np.bincount(inv, weights=masses, minlength=len(uniq))
    merged /= merged.sum()
    return Atoms(values=uniq, masses=merged, truncated_mass=model.tail_mass)


@dataclass(frozen=True)
class InducedSampler:
    """Draws ``f(y)`` for ``y`` uniform in ``[1/2, 1)`` (cell by ``m``, offset uniform)."""

    model: GibbsMarkovModel
    a: float
    truncated_mass: float = field(default=0.0)

    def sample(self, size, seed, stream_id=0):
        key = np.uint64(rng.nb_stream_key(np.uint64(seed), np.uint64(stream_id)))
        return _induced_iid(key, size, self.model.cdf, self.model.guide, self.a)

    def cell_means(self):
        return induced_cell_means(self.model.n_cells, self.a)

    def mean(self):
        return float(np.dot(self.model.stationary, self.cell_means()))


@nb.njit(cache=True)
def _induced_iid(key, size, cdf, guide, a):
    out = np.empty(size)
    for j in range(size):
        c = _guided(cdf, guide, rng.nb_uniform(key, np.uint64(2 * j)))
        v = rng.nb_uniform(key, np.uint64(2 * j + 1))
        out[j] = induced_value(c + 1, v, a)
    return out


def induced_atoms(model, a, per_cell=512):
    """Quantile discretization of the induced observable's law.

    Within a cell the induced sum is monotone in the offset ``v``, so the
    values at the ``per_cell`` midpoints ``v = (j + 1/2) / per_cell`` with
    equal shares of the cell mass reproduce the law up to ``1/per_cell``
    of each cell's mass, with no sampling noise.
    """
    v = (np.arange(per_cell) + 0.5) / per_cell
    vals = np.concatenate([_induced_grid(c + 1, v, a) for c in range(model.n_cells)])
    mass = np.repeat(model.stationary / per_cell, per_cell)
    order = np.argsort(vals, kind="stable")
    return Atoms(values=vals[order], masses=mass[order], truncated_mass=model.tail_mass)


@nb.njit(cache=True)
def _induced_grid(k, v, a):
    out = np.empty(len(v))
    for j in range(len(v)):
        out[j] = induced_value(k, v[j], a)
    return out


def induced_cell_means(n_cells, a):
    """Exact mean of the induced observable on each return-time cell."""
    out = np.empty(n_cells)
    for c in range(n_cells):
        k = c + 1
        width = 2.0 ** (-k - 1)
        lo, hi = 0.5 + width, 0.5 + 2 * width
        total = (hi ** (1 - a) - lo ** (1 - a)) / (1 - a)
        for j in range(1, k):
            # T**j maps the cell affinely onto [2**(j-1-k), 2**(j-k)) with slope 2**j
            zl, zh = 2.0 ** (j - 1 - k), 2.0 ** (j - k)
            total += 2.0 ** (-j) * (zh ** (1 - a) - zl ** (1 - a)) / (1 - a)
        out[c] = total / width
    return out


def observable_mean(model, observable):
    if observable.kind == "induced_power":
        return InducedSampler(model, observable.exponent).mean()
    return observable_distribution(model, observable).mean()
