"""Config-driven experiment runner.

Usage::

    gml <command> --config PATH [--out DIR] [--seed S] [--threads N]
        [--samples N] [--n 100,1000] [--t-min A --t-max B --t-steps K]

Commands map one-to-one onto library pipelines: ``classify``, ``norming``,
``simulate``, ``spectrum``, ``expansion``, ``berry-esseen``, ``equivalence``
and ``coboundary``.  ``--preset NAME`` loads a shipped config instead of
``--config``.  Exit status: 0 success, 1 negative or inconclusive verdict,
2 usage or configuration error.
"""

import argparse
import csv
import difflib
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import domains, maps, simulate, spectral
from .errors import ConfigError, GMLError, NotInD

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_USAGE = 2

COMMANDS = ("classify", "norming", "simulate", "spectrum", "expansion", "berry-esseen",
            "equivalence", "coboundary")

SECTION_KEYS = {
    "description": None,
    "model": {"kind", "transition", "weights", "a", "gamma", "truncation_tol", "cells", "q",
              "reset"},
    "observable": {"kind", "depth", "values", "power", "scale", "offset", "center", "u", "c",
                   "eta"},
    "run": {"n_list", "samples", "seed", "workers", "ks_tol", "cf_t", "cf_n_list", "ecdf_points"},
    "target": {"classify", "variant", "p", "c1", "c2", "L", "mean", "variance", "sigma2"},
    "spectrum": {"t_min", "t_max", "t_steps", "max_dim"},
    "expansion": {"p_hint", "t_min", "t_max", "t_steps", "min_decades"},
    "berry_esseen": {"delta", "n_list", "rate_tol"},
    "equivalence": {"ks_tol"},
    "coboundary": {"tol", "n", "n_traj"},
}
REQUIRED = ("model", "observable")
MODEL_KINDS = ("finite_markov", "countable_bernoulli", "induced_doubling", "reset_chain")
OBS_KINDS = ("table", "power", "coboundary", "induced")

RUN_DEFAULTS = {"n_list": [100, 1000, 10000], "samples": 100000, "seed": 0, "workers": None,
                "ks_tol": 0.05, "ecdf_points": 2001}
NOISE_BAND = 3.0


# ----------------------------------------------------------------- config


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    model: object
    observable: object
    run: dict
    target: dict
    sections: dict
    digest: str
    source: str = ""

    def section(self, name):
        return self.sections.get(name, {})


def _suggest(key, allowed):
    hit = difflib.get_close_matches(key, sorted(allowed), n=1)
    return f"; did you mean {hit[0]!r}?" if hit else ""


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key in obj:
        if key not in allowed:
            loc = f"in {where}" if where != "config" else "at top level"
            raise ConfigError(f"unknown key {key!r} {loc}{_suggest(key, allowed)}")


def _get(sec, key, where, kind=float, default=None, required=False):
    if key not in sec:
        if required:
            raise ConfigError(f"{where}.{key} is required")
        return default
    val = sec[key]
    try:
        if kind is int:
            if isinstance(val, bool) or float(val) != int(val):
                raise ValueError
            return int(val)
        if kind is float:
            if isinstance(val, bool):
                raise ValueError
            return float(val)
        return kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, got {val!r}") from None


def _wrap(where, fn, *args, **kwargs):
    """Re-raise constructor errors with the config location in front."""
    try:
        return fn(*args, **kwargs)
    except GMLError as exc:
        raise ConfigError(f"{where} {exc}") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_model(sec):
    kind = sec.get("kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {', '.join(MODEL_KINDS)}, got {kind!r}"
                          f"{_suggest(str(kind), MODEL_KINDS)}")
    gamma = _get(sec, "gamma", "model", default=0.5)
    if not 0 < gamma < 1:
        raise ConfigError("model.gamma must lie in (0, 1)")
    if kind == "finite_markov":
        p = sec.get("transition")
        if not isinstance(p, list) or not p or not all(isinstance(r, list) for r in p):
            raise ConfigError("model.transition must be a list of rows")
        return _wrap("model.transition", maps.build_finite_markov, p, gamma=gamma), None
    if kind == "countable_bernoulli":
        w = sec.get("weights")
        if not isinstance(w, dict):
            raise ConfigError("model.weights must be an object with a 'type'")
        tol = _get(sec, "truncation_tol", "model", default=1e-6)
        return _wrap("model.weights", maps.build_countable_bernoulli, w, tol, gamma), None
    if kind == "induced_doubling":
        a = _get(sec, "a", "model", required=True)
        tol = _get(sec, "truncation_tol", "model", default=1e-12)
        return _wrap("model.a", maps.build_induced_doubling, a, tol)
    cells = _get(sec, "cells", "model", int, required=True)
    q = _get(sec, "q", "model", required=True)
    reset = _get(sec, "reset", "model", default=0.5)
    return _wrap("model", maps.build_reset_chain, cells, q, reset, gamma), None


def _build_observable(sec, model, induced):
    kind = sec.get("kind")
    if kind not in OBS_KINDS:
        raise ConfigError(f"observable.kind must be one of {', '.join(OBS_KINDS)}, got {kind!r}"
                          f"{_suggest(str(kind), OBS_KINDS)}")
    eta = _get(sec, "eta", "observable", default=1.0)
    if kind == "induced":
        if induced is None:
            raise ConfigError("observable.kind 'induced' needs model.kind 'induced_doubling'")
        return induced
    if induced is not None:
        raise ConfigError("model.kind 'induced_doubling' fixes observable.kind 'induced'")
    if kind == "table":
        vals = sec.get("values")
        if vals is None:
            raise ConfigError("observable.values is required")
        arr = np.asarray(vals, dtype=float)
        depth = _get(sec, "depth", "observable", int, default=arr.ndim)
        if depth != arr.ndim:
            raise ConfigError(f"observable.depth {depth} does not match values nesting {arr.ndim}")
        obs = _wrap("observable.values", maps.depth_table, model, arr, eta)
    elif kind == "power":
        power = _get(sec, "power", "observable", required=True)
        scale = _get(sec, "scale", "observable", default=1.0)
        offset = _get(sec, "offset", "observable", default=0.0)
        obs = _wrap("observable", maps.power_observable, model, power, scale, offset, eta)
        if sec.get("center", False):
            mean = maps.observable_mean(model, obs)
            obs = maps.power_observable(model, power, scale, offset - mean, eta)
    else:
        u = sec.get("u")
        if u is None:
            raise ConfigError("observable.u is required")
        c = _get(sec, "c", "observable", default=0.0)
        obs = _wrap("observable.u", maps.coboundary_observable, model, u, c, eta)
    return obs


def _validate_run(sec):
    run = dict(RUN_DEFAULTS)
    run.update(sec)
    n_list = run["n_list"]
    if (not isinstance(n_list, list) or not n_list
            or not all(isinstance(n, int) and not isinstance(n, bool) and n > 0 for n in n_list)):
        raise ConfigError("run.n_list must be a non-empty list of positive integers")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("run.n_list must be strictly increasing")
    run["samples"] = _get(run, "samples", "run", int)
    run["seed"] = _get(run, "seed", "run", int)
    if not 0 <= run["seed"] < 2**64:
        raise ConfigError("run.seed must be an unsigned 64-bit integer")
    if run["workers"] is not None:
        run["workers"] = _get(run, "workers", "run", int)
    run["ks_tol"] = _get(run, "ks_tol", "run")
    return run


def config_from_dict(raw, source=""):
    """Validate a config object and build its model and observable."""
    _check_keys(raw, SECTION_KEYS, "config")
    for name in REQUIRED:
        if name not in raw:
            raise ConfigError(f"missing required section {name!r}")
    sections = {}
    for name, allowed in SECTION_KEYS.items():
        if allowed is not None and name in raw:
            _check_keys(raw[name], allowed, name)
            sections[name] = raw[name]
    model, induced = _build_model(raw["model"])
    obs = _build_observable(raw["observable"], model, induced)
    run = _validate_run(raw.get("run", {}))
    target = dict(raw.get("target", {"classify": True}))
    if "variant" in target and target.get("classify"):
        raise ConfigError("target: give either classify or an explicit variant, not both")
    if "variant" in target and target["variant"] not in ("D1", "D2", "D3"):
        raise ConfigError(f"target.variant must be D1, D2 or D3, got {target['variant']!r}")
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(canon.encode()).hexdigest()[:16]
    return ExperimentConfig(raw, model, obs, run, target, sections, digest, source)


def preset_names():
    root = resources.files("gmlimits") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name):
    path = resources.files("gmlimits") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}{_suggest(name, preset_names())}")
    return config_from_dict(json.loads(path.read_text()), source=f"preset:{name}")


def parse_config(path):
    """Read and validate a JSON config file; raises ``ConfigError`` with the offending key."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw, source=str(path))


# ---------------------------------------------------------------- reports


@dataclass
class RunReport:
    command: str
    config_hash: str
    seed: int
    wall_time: float = 0.0
    outputs: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def to_dict(self):
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "wall_time": self.wall_time, "outputs": self.outputs, "verdicts": self.verdicts,
                "details": domains._jsonable(self.details), "exit_code": self.exit_code}


def _threshold_verdict(stat, tol, floor, ok="Pass", bad="Fail"):
    """``ok`` at or below ``tol``; ``bad`` beyond ``tol + 3 floor``; Inconclusive in between."""
    if stat <= tol:
        return ok
    if stat <= tol + NOISE_BAND * floor:
        return "Inconclusive"
    return bad


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return int(v)
    return repr(float(v))


def _write_script(path, lines):
    with open(path, "w") as fh:
        fh.write("# gnuplot script\nset datafile separator ','\nset key autotitle columnhead\n")
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- helpers


def _is_iid_depth1(cfg):
    return not cfg.model.is_markov and cfg.observable.depth == 1 \
        and cfg.observable.kind != "induced_power"


def tail_spec(cfg):
    """Law of the observable as exact atoms (a quantile grid for induced sums)."""
    if cfg.observable.kind == "induced_power":
        return domains.TailSpec.from_atoms(maps.induced_atoms(cfg.model, cfg.observable.exponent))
    return domains.TailSpec.from_atoms(maps.observable_distribution(cfg.model, cfg.observable))


def resolve_domain(cfg):
    """Explicit target from the config, or the classifier verdict on the observable's law."""
    t = cfg.target
    if "variant" in t:
        return domains.DomainClass(
            variant=t["variant"], mean=t.get("mean"), variance=t.get("variance"),
            p=t.get("p"), c1=float(t.get("c1", 1.0)), c2=float(t.get("c2", 0.0)),
            L=domains.SlowFunction.from_config(t.get("L")),
            diagnostics={"source": "config"})
    dom = domains.classify(tail_spec(cfg))
    if cfg.observable.kind == "induced_power" and dom.mean is not None:
        # the cell means are exact; the quantile grid is not
        dom = replace(dom, mean=maps.observable_mean(cfg.model, cfg.observable))
    return dom


def asymptotic_variance(cfg):
    """Variance of the normal limit: config value, exact i.i.d. variance or Green-Kubo."""
    if "sigma2" in cfg.target:
        return float(cfg.target["sigma2"])
    if _is_iid_depth1(cfg):
        return maps.observable_distribution(cfg.model, cfg.observable).variance()
    if cfg.observable.kind == "induced_power":
        # induced sums are serially correlated and have no transfer matrix
        raise ConfigError("target.sigma2 is required for induced observables in D1")
    return spectral.green_kubo_sigma2(cfg.model, cfg.observable).sigma2


def _limit(cfg, domain):
    """``(norming, target_cdf, description)`` for the limit theorem of ``domain``."""
    mean = maps.observable_mean(cfg.model, cfg.observable)
    if domain.variant == "D1":
        s2 = asymptotic_variance(cfg)
        return ((lambda n: (n * mean, math.sqrt(n))), simulate.normal_cdf(s2),
                {"law": "normal", "variance": s2})
    if domain.mean is None and not (domain.variant == "D3" and domain.p <= 1):
        domain = replace(domain, mean=mean)
    ns = domains.NormingSequence(domain)
    params = domains.limit_params(domain)
    desc = {"law": "normal" if params.gaussian else "stable", "p": params.p, "c": params.c,
            "beta": params.beta}
    return ns, simulate.target_cdf(domain), desc


def _n_list(cfg, flags, section=None):
    if flags.n:
        return flags.n
    if section and "n_list" in cfg.section(section):
        return list(cfg.section(section)["n_list"])
    return list(cfg.run["n_list"])


def _samples(cfg, flags):
    return flags.samples if flags.samples is not None else cfg.run["samples"]


def _seed(cfg, flags):
    return flags.seed if flags.seed is not None else cfg.run["seed"]


def _workers(cfg, flags):
    return flags.threads if flags.threads is not None else cfg.run["workers"]


def _t_range(cfg, flags, section, defaults):
    sec = cfg.section(section)
    lo = flags.t_min if flags.t_min is not None else sec.get("t_min", defaults[0])
    hi = flags.t_max if flags.t_max is not None else sec.get("t_max", defaults[1])
    k = flags.t_steps if flags.t_steps is not None else sec.get("t_steps", defaults[2])
    if k < 1 or hi < lo:
        raise ConfigError("need t-max >= t-min and t-steps >= 1")
    return float(lo), float(hi), int(k)


# --------------------------------------------------------------- commands


def cmd_classify(cfg, flags, out, report):
    tail = tail_spec(cfg)
    try:
        dom = resolve_domain(cfg)
    except NotInD as exc:
        rep = {"variant": "NotInD", "p": None, "c1": None, "c2": None, "beta": None, "c": None,
               "diagnostics": domains._jsonable(exc.report or {})}
        _dump_json(os.path.join(out, "classification.json"), rep, report)
        report.verdicts["classification"] = "NotInD"
        print(f"classification: NotInD ({exc})")
        return EXIT_NEGATIVE
    rep = dom.report()
    _dump_json(os.path.join(out, "classification.json"), rep, report)
    if tail.is_atomic:
        a = tail.atoms
        absv = np.abs(a.values[a.values != 0])
        if len(absv):
            xs = np.geomspace(max(absv.min(), 1e-300), absv.max(), 200)
            pos, neg = tail.survival(xs)
            path = os.path.join(out, "tail.csv")
            _write_rows(path, ["x", "surv_pos", "surv_neg"], zip(xs, pos, neg))
            report.outputs.append(path)
            gp = os.path.join(out, "tail.gp")
            _write_script(gp, ["set logscale xy", "set xlabel 'x'",
                               "plot 'tail.csv' using 1:2 with lines, '' using 1:3 with lines"])
            report.outputs.append(gp)
    report.verdicts["classification"] = dom.variant
    report.details["classification"] = rep
    print(f"classification: {dom.variant}" + (f"  p={dom.p:.4f} beta={dom.beta:+.4f}"
                                             if dom.variant == "D3" else ""))
    if dom.degenerate:
        report.verdicts["classification"] = "Degenerate"
        return EXIT_NEGATIVE
    return EXIT_OK


def _dump_json(path, obj, report):
    with open(path, "w") as fh:
        json.dump(domains._jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    report.outputs.append(path)


def cmd_norming(cfg, flags, out, report):
    dom = resolve_domain(cfg)
    norming, _, desc = _limit(cfg, dom)
    rows = []
    for n in _n_list(cfg, flags):
        a, b = norming(n)
        rows.append((n, a, b))
        print(f"A_{n} = {float(a)!r}  B_{n} = {float(b)!r}")
    path = os.path.join(out, "norming.csv")
    _write_rows(path, ["n", "a_n", "b_n"], rows)
    gp = os.path.join(out, "norming.gp")
    _write_script(gp, ["set logscale xy", "set xlabel 'n'", "plot 'norming.csv' using 1:3 with lp"])
    report.outputs += [path, gp]
    report.verdicts["variant"] = dom.variant
    report.details["limit"] = desc
    return EXIT_OK


def _plan(cfg, flags, norming, n_list=None):
    return simulate.SimulationPlan(cfg.model, cfg.observable,
                                   tuple(n_list or _n_list(cfg, flags)), _samples(cfg, flags),
                                   _seed(cfg, flags), _workers(cfg, flags), norming)


def cmd_simulate(cfg, flags, out, report):
    dom = resolve_domain(cfg)
    norming, target, desc = _limit(cfg, dom)
    plan = _plan(cfg, flags, norming)
    ens = simulate.run_plan(plan)
    floor = simulate.ks_noise_floor(plan.samples)
    ks = {}
    scripts = []
    for n in plan.n_list:
        path = os.path.join(out, f"ecdf_n{n}.csv")
        simulate.write_ecdf_csv(path, ens[n], target, cfg.run["ecdf_points"])
        report.outputs.append(path)
        ks[n] = simulate.ks_distance(ens[n], target)
        scripts.append(f"'ecdf_n{n}.csv' using 1:2 with lines title 'n={n}'")
        print(f"n={n:>8d}  KS={ks[n]:.5f}  floor={floor:.5f}")
    scripts.append(f"'ecdf_n{plan.n_list[-1]}.csv' using 1:3 with lines title 'limit'")
    gp = os.path.join(out, "ecdf.gp")
    _write_script(gp, ["set xlabel 'x'", "plot " + ", ".join(scripts)])
    report.outputs.append(gp)
    if "cf_t" in cfg.run:
        cf_n = cfg.run.get("cf_n_list", plan.n_list)
        table = simulate.epsilon_n_estimate(cfg.model, cfg.observable, cf_n, cfg.run["cf_t"],
                                            plan.samples, plan.seed, plan.workers)
        for n in sorted(set(int(v) for v in table.n)):
            sel = table.n == n
            sub = simulate.EpsilonTable(table.n[sel], table.t[sel], table.ecf[sel],
                                        table.pred[sel], table.eps[sel], table.noise_floor)
            path = os.path.join(out, f"cf_n{n}.csv")
            simulate.write_cf_csv(path, sub)
            report.outputs.append(path)
        report.details["eps_n"] = {f"n={n},t={t}": e for n, t, e in zip(table.n, table.t, table.eps)}
        report.details["cf_noise_floor"] = table.noise_floor
    last = ks[plan.n_list[-1]]
    verdict = _threshold_verdict(last, cfg.run["ks_tol"], floor)
    report.verdicts["ks"] = verdict
    report.details.update(limit=desc, ks={str(k): v for k, v in ks.items()}, noise_floor=floor,
                          variant=dom.variant, plan_hash=plan.digest())
    print(f"verdict: {verdict} (KS {last:.5f} vs tolerance {cfg.run['ks_tol']})")
    return EXIT_OK if verdict == "Pass" else EXIT_NEGATIVE


def cmd_equivalence(cfg, flags, out, report):
    dom = resolve_domain(cfg)
    norming, target, desc = _limit(cfg, dom)
    plan = _plan(cfg, flags, norming)
    dyn = simulate.run_plan(plan)
    iid = simulate.run_iid_plan(plan)
    floor1 = simulate.ks_noise_floor(plan.samples)
    floor2 = floor1 * math.sqrt(2.0)
    rows = []
    for n in plan.n_list:
        k_dyn = simulate.ks_distance(dyn[n], target)
        k_iid = simulate.ks_distance(iid[n], target)
        k_two = simulate.ks_two_sample(dyn[n], iid[n])
        rows.append((n, k_dyn, k_iid, k_two, floor2))
        for tag, ens in (("dynamical", dyn), ("iid", iid)):
            path = os.path.join(out, f"ecdf_{tag}_n{n}.csv")
            simulate.write_ecdf_csv(path, ens[n], target, cfg.run["ecdf_points"])
            report.outputs.append(path)
        print(f"n={n:>8d}  KS dyn={k_dyn:.5f}  KS iid={k_iid:.5f}  two-sample={k_two:.5f}")
    path = os.path.join(out, "equivalence.csv")
    _write_rows(path, ["n", "ks_dynamical", "ks_iid", "ks_two_sample", "noise_floor"], rows)
    gp = os.path.join(out, "equivalence.gp")
    _write_script(gp, ["set logscale xy", "set xlabel 'n'",
                       "plot 'equivalence.csv' using 1:2 with lp, '' using 1:3 with lp, "
                       "'' using 1:4 with lp, '' using 1:5 with lines"])
    report.outputs += [path, gp]
    tol = float(cfg.section("equivalence").get("ks_tol", 0.02))
    verdict = _threshold_verdict(rows[-1][3], tol, floor2, ok="Equivalent", bad="Distinct")
    report.verdicts["equivalence"] = verdict
    report.details.update(limit=desc, variant=dom.variant, table=[list(r) for r in rows])
    print(f"verdict: {verdict} (two-sample KS {rows[-1][3]:.5f} vs tolerance {tol})")
    return EXIT_OK if verdict == "Equivalent" else EXIT_NEGATIVE


def cmd_spectrum(cfg, flags, out, report):
    lo, hi, k = _t_range(cfg, flags, "spectrum", (-1.0, 1.0, 201))
    grid = np.linspace(lo, hi, k)
    max_dim = int(cfg.section("spectrum").get("max_dim", spectral.DEFAULT_MAX_DIM))
    pts = spectral.spectrum(cfg.model, cfg.observable, grid, max_dim, _workers(cfg, flags))
    path = os.path.join(out, "spectrum.csv")
    spectral.write_spectrum_csv(path, pts)
    gp = os.path.join(out, "spectrum.gp")
    _write_script(gp, ["set xlabel 't'",
                       "plot 'spectrum.csv' using 1:4 with lines, '' using 1:7 with lines"])
    report.outputs += [path, gp]
    bias = max(float(p.truncation_bias or 0.0) for p in pts)
    gap = min(float(p.gap) for p in pts)
    report.verdicts["spectrum"] = "Computed"
    report.details.update(points=len(pts), min_gap=gap, max_truncation_bias=bias)
    print(f"{len(pts)} points, min gap {gap:.3e}, max truncation bias {bias:.3e}")
    return EXIT_OK


def cmd_expansion(cfg, flags, out, report):
    sec = cfg.section("expansion")
    if "p_hint" in sec:
        p_hint = float(sec["p_hint"])
    else:
        dom = resolve_domain(cfg)
        p_hint = dom.p if dom.variant == "D3" else 2.0
    lo, hi, k = _t_range(cfg, flags, "expansion", (5e-4, 0.5, 31))
    grid = np.geomspace(lo, hi, k)
    fit = spectral.expansion_fit(cfg.model, cfg.observable, p_hint, grid,
                                 min_decades=float(sec.get("min_decades", 3.0)))
    path = os.path.join(out, "expansion.csv")
    _write_rows(path, ["t", "re_residual", "im_residual", "abs_residual"],
                ((t, r.real, r.imag, abs(r)) for t, r in zip(fit.t, fit.residual)))
    gp = os.path.join(out, "expansion.gp")
    _write_script(gp, ["set logscale xy", "set xlabel 't'",
                       "plot 'expansion.csv' using 1:4 with lp"])
    report.outputs += [path, gp]
    if fit.degenerate:
        verdict = "Exact"
        print("residual vanishes: the removed powers are exact")
    else:
        verdict = "Pass" if fit.q_hat > p_hint else "Fail"
        print(f"q_hat = {fit.q_hat:.4f} +- {fit.band:.4f} (one-sided check q_hat > {p_hint})")
    report.verdicts["expansion"] = verdict
    report.details.update(p_hint=p_hint, q_hat=fit.q_hat, band=fit.band,
                          coefficients={str(i): [c.real, c.imag]
                                        for i, c in fit.coefficients.items()})
    return EXIT_OK if verdict in ("Pass", "Exact") else EXIT_NEGATIVE


def cmd_berry_esseen(cfg, flags, out, report):
    sec = cfg.section("berry_esseen")
    s2 = asymptotic_variance(cfg)
    curve = simulate.berry_esseen_curve(cfg.model, cfg.observable, s2,
                                        _n_list(cfg, flags, "berry_esseen"), _samples(cfg, flags),
                                        _seed(cfg, flags), _workers(cfg, flags))
    path = os.path.join(out, "berry_esseen.csv")
    simulate.write_berry_esseen_csv(path, curve)
    gp = os.path.join(out, "berry_esseen.gp")
    _write_script(gp, ["set logscale xy", "set xlabel 'n'",
                       "plot 'berry_esseen.csv' using 1:2 with lp, '' using 1:3 with lines"])
    report.outputs += [path, gp]
    delta = float(sec.get("delta", 1.0))
    expected = delta / 2.0
    tol = float(sec.get("rate_tol", 0.1))
    for n, d in zip(curve.n, curve.delta):
        print(f"n={int(n):>8d}  Delta_n={d:.5f}")
    if not math.isfinite(curve.exponent):
        verdict = "Inconclusive"
    else:
        verdict = "Consistent" if abs(curve.exponent - expected) <= tol else "Inconsistent"
    report.details.update(sigma2=s2, exponent=curve.exponent, band=curve.band,
                          expected=expected, noise_floor=curve.noise_floor,
                          used=curve.used.tolist())
    if cfg.observable.kind != "induced_power":
        tc = simulate.tail_condition_check(tail_spec(cfg), delta)
        report.verdicts["tail_condition"] = tc.verdict
        report.details["tail_slope"] = tc.slope
        print(f"tail condition at delta={delta}: {tc.verdict} (trend {tc.slope:+.4f})")
    report.verdicts["rate"] = verdict
    print(f"exponent {curve.exponent:.4f} +- {curve.band:.4f}, expected {expected}: {verdict}")
    return EXIT_OK if verdict == "Consistent" else EXIT_NEGATIVE


def cmd_coboundary(cfg, flags, out, report):
    sec = cfg.section("coboundary")
    res = spectral.coboundary_detect(cfg.model, cfg.observable, tol=float(sec.get("tol", 1e-8)),
                                     n=int(sec.get("n", 10_000)),
                                     n_traj=int(sec.get("n_traj", 100)), seed=_seed(cfg, flags))
    path = os.path.join(out, "coboundary.csv")
    if res.centered_sums is not None:
        rows = zip(range(len(res.centered_sums)), res.centered_sums, res.path_ranges)
    else:
        rows = []
    _write_rows(path, ["trajectory", "centered_sum", "path_range"], rows)
    gp = os.path.join(out, "coboundary.gp")
    _write_script(gp, ["set xlabel 'trajectory'",
                       "plot 'coboundary.csv' using 1:2 with points, '' using 1:3 with points"])
    report.outputs += [path, gp]
    report.verdicts["coboundary"] = res.verdict
    report.details.update(sigma2=res.sigma2, c=res.c_estimate, range_growth=res.range_growth)
    if res.centered_sums is not None:
        report.details["sum_range"] = float(np.ptp(res.centered_sums))
    print(f"verdict: {res.verdict}  sigma^2={res.sigma2:.3e}  c={res.c_estimate!r}")
    return EXIT_OK if res.verdict == "Coboundary" else EXIT_NEGATIVE


HANDLERS = {"classify": cmd_classify, "norming": cmd_norming, "simulate": cmd_simulate,
            "spectrum": cmd_spectrum, "expansion": cmd_expansion,
            "berry-esseen": cmd_berry_esseen, "equivalence": cmd_equivalence,
            "coboundary": cmd_coboundary}


def dispatch(command, cfg, flags):
    """Run one pipeline, write its outputs and ``run_report.json``; returns the report."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}{_suggest(command, COMMANDS)}")
    out = flags.out
    os.makedirs(out, exist_ok=True)
    seed = _seed(cfg, flags)
    report = RunReport(command, cfg.digest, seed)
    workers = _workers(cfg, flags)
    simulate._set_workers(workers)
    start = time.perf_counter()
    try:
        code = HANDLERS[command](cfg, flags, out, report)
    except ConfigError:
        raise
    except GMLError as exc:
        report.verdicts["error"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_NEGATIVE
    report.wall_time = time.perf_counter() - start
    report.exit_code = code
    path = os.path.join(out, "run_report.json")
    report.outputs.append(path)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


# ------------------------------------------------------------------- main


def _csv_ints(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("n values must be positive")
    return vals


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="gml", description="Limit theorems for Gibbs-Markov "
                                     "maps: classification, spectra and Monte-Carlo checks.")
    parser.add_argument("--list-presets", action="store_true", help="print shipped presets")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="JSON experiment config")
        src.add_argument("--preset", metavar="NAME", help="shipped preset name")
        p.add_argument("--out", metavar="DIR", default="gml_out", help="output directory")
        p.add_argument("--seed", type=_u64, help="override run.seed")
        p.add_argument("--threads", type=_positive, help="worker threads (env GML_THREADS)")
        p.add_argument("--samples", type=_positive, help="override run.samples")
        p.add_argument("--n", type=_csv_ints, metavar="CSV", help="override n list, e.g. 100,1000")
        p.add_argument("--t-min", type=float)
        p.add_argument("--t-max", type=float)
        p.add_argument("--t-steps", type=_positive)
    return parser


def main(argv=None):
    parser = build_parser()
    flags = parser.parse_args(argv)
    if flags.list_presets:
        print("\n".join(preset_names()))
        return EXIT_OK
    if flags.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_preset(flags.preset) if flags.preset else parse_config(flags.config)
        report = dispatch(flags.command, cfg, flags)
    except ConfigError as exc:
        print(f"gml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
