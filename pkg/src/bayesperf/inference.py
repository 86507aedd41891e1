"""Expectation Propagation over time slices with MCMC tilted moments.

The latent state is one true value per event, shared by every slice inside
a sliding window of ``k_window`` slices.  Each slice contributes one site:
the likelihood of its measurements plus the relation factors it owns.  A
factor is owned by the most recent slice in the window that observes one of
its events, so every factor enters the target exactly once.  The global
approximation is a diagonal (mean-field) Gaussian, stored in natural
parameters as prior + sum of sites.

Per slice the engine slides the window, adds the new site, and sweeps.  A
sweep refreshes every site whose definition changed or whose cavity moved by
more than ``convergence_tol`` (mean shift in cavity standard deviations, or
relative variance change) since its last refresh; the window has converged
when a sweep finds nothing to refresh.  Tilted moments for the sites of one
sweep are computed against the same snapshot of the global approximation
(optionally on a thread pool) and then applied one at a time by the
controller, in slice order.  ``update_schedule="serial"`` instead refreshes
sites one after another against the latest global approximation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .errors import (CavityDegenerate, ImproperGlobal, InputError, NoObservations,
                     SchemaMismatch, UnknownEvent)
from .events import events_of
from .mcmc import ACCEPT_BAND, laplace, rw_metropolis
from .measurement import SampleBatch, summarize_samples
from .relations import evaluate_factor, solve_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class McmcConfig:
    n_samples: int = 4096
    n_burnin: int = 24
    proposal_scale: float = 1.0
    seed: int = 0
    n_chains: int = 256


@dataclass(frozen=True)
class EpConfig:
    k_window: int = 24
    damping: float = 0.8
    convergence_tol: float = 0.1
    max_iterations: int = 6
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    threads: int = 1
    update_schedule: str = "synchronous"
    site_order: str = "ascending"
    likelihood: str = "student_t"
    log_space: bool = True
    prior_scale: float = 10.0
    fallback_rel_noise: float = 0.1
    reset_alpha: Optional[float] = 1e-3
    refine_theta: bool = False
    theta_grid: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    smoothing_lag: Optional[int] = None     # None: k_window // 2

    @property
    def lag(self) -> int:
        return self.k_window // 2 if self.smoothing_lag is None else self.smoothing_lag

    def __post_init__(self):
        if self.k_window < 1 or self.max_iterations < 1 or self.threads < 1:
            raise InputError("k_window, max_iterations and threads must be positive")
        if not 0 < self.damping <= 1:
            raise InputError("damping must lie in (0, 1]")
        if self.convergence_tol <= 0:
            raise InputError("convergence_tol must be positive")
        if self.update_schedule not in ("synchronous", "serial"):
            raise InputError("update_schedule must be 'synchronous' or 'serial'")
        if self.likelihood not in ("student_t", "gaussian"):
            raise InputError("likelihood must be 'student_t' or 'gaussian'")


# Gaussian pieces -------------------------------------------------------------


@dataclass(frozen=True)
class GlobalApprox:
    mean: dict
    variance: dict

    @classmethod
    def from_natural(cls, precision, precision_mean):
        return cls({e: precision_mean[e] / precision[e] for e in precision},
                   {e: 1.0 / precision[e] for e in precision})

    def precision(self, e):
        return 1.0 / self.variance[e]

    def precision_mean(self, e):
        return self.mean[e] / self.variance[e]

    @property
    def events(self):
        return tuple(self.mean)


@dataclass
class GaussianSite:
    precision: dict = field(default_factory=dict)
    precision_mean: dict = field(default_factory=dict)

    def copy(self):
        return GaussianSite(dict(self.precision), dict(self.precision_mean))


def cavity(global_approx: GlobalApprox, site: GaussianSite) -> GlobalApprox:
    """Divide the site out of the global approximation (natural parameters)."""
    mean, var = {}, {}
    for e in global_approx.events:
        lam = global_approx.precision(e) - site.precision.get(e, 0.0)
        eta = global_approx.precision_mean(e) - site.precision_mean.get(e, 0.0)
        if not lam > 0 or not math.isfinite(lam):
            raise CavityDegenerate(f"cavity precision {lam:.3g} for {e}")
        mean[e] = eta / lam
        var[e] = 1.0 / lam
    return GlobalApprox(mean, var)


@dataclass(frozen=True)
class Observation:
    event: str
    mu: float
    scale: float
    dof: Optional[int] = None     # None: Gaussian likelihood


@dataclass(frozen=True)
class SiteData:
    slice_index: int
    observations: tuple = ()
    factors: tuple = ()           # (RelationFactor, weight)

    @property
    def scope(self) -> tuple:
        names = {o.event for o in self.observations}
        for f, _ in self.factors:
            names |= f.scope
        return tuple(sorted(names))

    @property
    def key(self):
        return (tuple(self.observations), tuple((f.id, f.slack_sigma, w) for f, w in self.factors))


@dataclass
class TiltedMoments:
    mean: dict
    variance: dict
    se_mean: dict = field(default_factory=dict)
    se_variance: dict = field(default_factory=dict)
    n_samples: int = 0
    acceptance: float = math.nan
    warnings: tuple = ()
    warm: Optional[tuple] = None     # (final chain states, proposal covariance)


def _site_logp(cav, site, names, log_space, likelihood):
    idx = {n: i for i, n in enumerate(names)}
    m = np.array([cav.mean[n] for n in names])
    v = np.array([cav.variance[n] for n in names])
    obs = [(idx[o.event], o) for o in site.observations]

    def logp(phi):
        theta = np.exp(phi) if log_space else phi
        out = -0.5 * np.sum((theta - m) ** 2 / v, axis=1)
        if log_space:
            out = out + phi.sum(axis=1)
        for i, o in obs:
            z = (o.mu - theta[:, i]) / o.scale
            if o.dof is None or likelihood == "gaussian":
                out = out - 0.5 * z * z
            else:
                out = out - 0.5 * (o.dof + 1) * np.log1p(z * z / o.dof)
        if site.factors:
            values = {n: theta[:, i] for n, i in idx.items()}
            for f, w in site.factors:
                out = out + evaluate_factor(f, values, w)
        return out

    return logp


def tilted_moments(cav: GlobalApprox, site: SiteData, mcmc: McmcConfig, rng=None, *,
                   log_space=True, likelihood="student_t", warm=None) -> TiltedMoments:
    """Moments of cavity x site likelihood, estimated by random-walk Metropolis.

    Only the site's scope is sampled; other events keep their cavity moments.
    """
    names = site.scope
    if not names:
        return TiltedMoments(dict(cav.mean), dict(cav.variance))
    missing = [n for n in names if n not in cav.mean]
    if missing:
        raise InputError(f"cavity lacks events {missing}")
    rng = rng if rng is not None else np.random.default_rng(mcmc.seed)
    logp = _site_logp(cav, site, names, log_space, likelihood)

    m = np.array([cav.mean[n] for n in names])
    sd = np.sqrt(np.array([cav.variance[n] for n in names]))
    for o in site.observations:
        i = names.index(o.event)
        sd[i] = min(sd[i], o.scale)
        if abs(m[i] - o.mu) > 3 * math.sqrt(cav.variance[o.event]):
            m[i] = o.mu
    if log_space:
        start = np.maximum(m, 1e-3 * sd + 1e-300)
        start = np.where(start > 0, start, 1.0)
        x0 = np.log(start)
        scale = np.minimum(sd / start, 1.0)
    else:
        x0, scale = m, sd

    if warm is not None and warm[0].shape[1] == len(names):
        states, cov = warm
        res = rw_metropolis(logp, states, rng, mcmc.n_samples, mcmc.n_burnin, cov,
                            scale_mult=mcmc.proposal_scale)
    else:
        mode, cov = laplace(logp, x0, scale)
        res = rw_metropolis(logp, mode, rng, mcmc.n_samples, mcmc.n_burnin, cov,
                            n_chains=mcmc.n_chains, scale_mult=mcmc.proposal_scale)

    draws = np.exp(res.draws) if log_space else res.draws        # (steps, chains, d)
    flat = draws.reshape(-1, len(names))
    mean = flat.mean(axis=0)
    var = flat.var(axis=0, ddof=1)
    chain_means = draws.mean(axis=0)
    chain_vars = draws.var(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros_like(chain_means)
    n_ch = draws.shape[1]
    se_m = chain_means.std(axis=0, ddof=1) / math.sqrt(n_ch)
    se_v = chain_vars.std(axis=0, ddof=1) / math.sqrt(n_ch)

    out_mean, out_var = dict(cav.mean), dict(cav.variance)
    se_mean, se_var = {}, {}
    for i, n in enumerate(names):
        out_mean[n] = float(mean[i])
        out_var[n] = float(var[i])
        se_mean[n] = float(se_m[i])
        se_var[n] = float(se_v[i])
    warnings = ()
    lo, hi = ACCEPT_BAND
    if not lo <= res.acceptance <= hi:
        warnings = (f"mcmc_acceptance={res.acceptance:.2f}@slice{site.slice_index}",)
    return TiltedMoments(out_mean, out_var, se_mean, se_var, res.n_samples, res.acceptance,
                         warnings, (res.final, res.proposal_cov))


# EP state --------------------------------------------------------------------


@dataclass
class EpState:
    prior_precision: dict = field(default_factory=dict)
    prior_precision_mean: dict = field(default_factory=dict)
    sites: dict = field(default_factory=dict)
    damping: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)   # site -> undamped (precision, precision-mean)

    def global_approx(self) -> GlobalApprox:
        lam = dict(self.prior_precision)
        eta = dict(self.prior_precision_mean)
        for site in self.sites.values():
            for e, p in site.precision.items():
                lam[e] += p
            for e, p in site.precision_mean.items():
                eta[e] += p
        return GlobalApprox.from_natural(lam, eta)

    def cavity(self, site_key) -> GlobalApprox:
        """Prior times every other site.  Summing the remaining sites avoids
        the cancellation of subtracting a site from the global product."""
        lam = dict(self.prior_precision)
        eta = dict(self.prior_precision_mean)
        for key, site in self.sites.items():
            if key == site_key:
                continue
            for e, p in site.precision.items():
                lam[e] += p
            for e, p in site.precision_mean.items():
                eta[e] += p
        for e, v in lam.items():
            if not v > 0 or not math.isfinite(v):
                raise CavityDegenerate(f"cavity precision {v:.3g} for {e}")
        return GlobalApprox.from_natural(lam, eta)

    def add_prior(self, event, mean, variance):
        self.prior_precision[event] = 1.0 / variance
        self.prior_precision_mean[event] = mean / variance

    def drop_event(self, event):
        self.prior_precision.pop(event, None)
        self.prior_precision_mean.pop(event, None)
        for site in self.sites.values():
            site.precision.pop(event, None)
            site.precision_mean.pop(event, None)
        for lam, eta in self.proposals.values():
            lam.pop(event, None)
            eta.pop(event, None)

    def settle(self, site_key) -> float:
        """Move a site onto its last proposal and return the largest resulting
        shift of the global approximation, in posterior-width units.

        With an unchanged cavity the tilted moments, and so the proposal,
        would come out the same, so this is the limit of repeated damped
        updates without another MCMC run.
        """
        if site_key not in self.proposals:
            return 0.0
        lam, eta = self.proposals[site_key]
        site = self.sites[site_key]
        if all(site.precision.get(e, 0.0) == lam[e]
               and site.precision_mean.get(e, 0.0) == eta[e] for e in lam):
            return 0.0
        before = self.global_approx()
        site.precision.update(lam)
        site.precision_mean.update(eta)
        after = self.global_approx()
        shift = 0.0
        for e in lam:
            v0 = before.variance[e]
            shift = max(shift, abs(after.mean[e] - before.mean[e]) / math.sqrt(v0),
                        abs(after.variance[e] - v0) / v0)
        return shift


def ep_update(state: EpState, site_key, moments: TiltedMoments, damping=None) -> EpState:
    """Moment-matching local update and damped global update for one site.

    The proposed site is tilted / cavity in natural parameters, blended with
    the old site by ``damping``.  If the result would make any global
    variance non-positive the update is rejected, the site's damping is
    halved, and ImproperGlobal is raised.
    """
    site = state.sites.setdefault(site_key, GaussianSite())
    d = state.damping.get(site_key, 1.0) if damping is None else damping
    cav = state.cavity(site_key)
    new_lam, new_eta = {}, {}
    prop = ({}, {})
    for e in moments.mean:
        if e not in cav.mean:
            continue
        v, mu = moments.variance[e], moments.mean[e]
        if not (v > 0 and math.isfinite(v) and math.isfinite(mu)):
            state.damping[site_key] = d / 2
            raise ImproperGlobal(f"tilted variance {v} for {e}")
        same = (v == cav.variance[e] and mu == cav.mean[e])
        lam_c, eta_c = 1.0 / cav.variance[e], cav.mean[e] / cav.variance[e]
        prop_lam = 0.0 if same else 1.0 / v - lam_c
        prop_eta = 0.0 if same else mu / v - eta_c
        if prop_lam < 0:
            # a widening site would make the product improper once its
            # partners leave the window, so it is flattened instead
            prop_lam, prop_eta = 0.0, 0.0
        prop[0][e], prop[1][e] = prop_lam, prop_eta
        old_lam = site.precision.get(e, 0.0)
        old_eta = site.precision_mean.get(e, 0.0)
        new_lam[e] = d * prop_lam + (1 - d) * old_lam
        new_eta[e] = d * prop_eta + (1 - d) * old_eta
        total = lam_c + new_lam[e]
        if not (total > 0 and math.isfinite(total)):
            state.damping[site_key] = d / 2
            raise ImproperGlobal(f"global precision {total:.3g} for {e}")
    site.precision.update(new_lam)
    site.precision_mean.update(new_eta)
    state.proposals[site_key] = prop
    return state


# Posteriors ------------------------------------------------------------------


@dataclass(frozen=True)
class EventPosterior:
    event: str
    slice_index: int
    mean: float
    variance: float
    mle: float
    n_mcmc_samples: int = 0
    warnings: tuple = ()
    point_mass: bool = False


POSTERIOR_HEADER = ["slice", "event", "mean", "variance", "mle", "n_samples", "warnings"]


def write_posteriors(posteriors, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSTERIOR_HEADER)
        for p in posteriors:
            w.writerow([p.slice_index, p.event, repr(p.mean), repr(p.variance), repr(p.mle),
                        p.n_mcmc_samples, ";".join(p.warnings)])


def read_posteriors(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POSTERIOR_HEADER:
            raise SchemaMismatch(f"posterior header must be {','.join(POSTERIOR_HEADER)}")
        for row in reader:
            if not row:
                continue
            s, e, mean, var, mle, n, warn = row
            out.append(EventPosterior(e, int(s), float(mean), float(var), float(mle), int(n),
                                      tuple(w for w in warn.split(";") if w),
                                      point_mass=float(var) == 0))
    return out


def posteriors_to_json(posteriors) -> list:
    return [{"slice": p.slice_index, "event": p.event, "mean": p.mean, "variance": p.variance,
             "mle": p.mle, "n_samples": p.n_mcmc_samples, "warnings": list(p.warnings)}
            for p in posteriors]


def write_posteriors_json(posteriors, path) -> None:
    Path(path).write_text(json.dumps(posteriors_to_json(posteriors), indent=1) + "\n")


# Driver ----------------------------------------------------------------------


def slice_observations(batch: SampleBatch, t: int, config: EpConfig) -> tuple:
    obs = []
    for e in batch.events_in(t):
        summary = summarize_samples(batch.samples(t, e), e)
        floor = max(abs(summary.mu), 1e-12)
        if summary.N >= 2 and summary.S > 0:
            scale = summary.S / math.sqrt(summary.N)
            dof = summary.nu if config.likelihood == "student_t" else None
            obs.append(Observation(e, summary.mu, max(scale, 1e-9 * floor), dof))
        elif summary.N >= 2:
            obs.append(Observation(e, summary.mu, 1e-3 * floor, None))
        else:
            obs.append(Observation(e, summary.mu, config.fallback_rel_noise * floor, None))
    return tuple(obs)


class EpEngine:
    """Sliding-window EP over a factor graph; one instance per trace."""

    def __init__(self, graph, config: EpConfig = EpConfig()):
        self.graph = graph
        self.config = config
        self.state = EpState()
        self.window = OrderedDict()       # slice -> observations
        self.site_data = {}               # slice -> SiteData
        self.dirty = set()
        self.last_cavity = {}             # slice -> (mean, var) arrays over scope
        self.warm = {}
        self.resets = []
        self.memory = {}                  # event -> latest posterior mean

    # window maintenance

    def reset(self):
        self.state = EpState()
        self.window.clear()
        self.site_data.clear()
        self.dirty.clear()
        self.last_cavity.clear()
        self.warm.clear()

    def surprise(self, obs) -> tuple:
        """(statistic, n): sum over observed events of chi2(1) quantiles of
        the two-sided predictive p-value of each new measurement."""
        if not self.window:
            return 0.0, 0
        g = self.state.global_approx()
        stat, n = 0.0, 0
        for o in obs:
            if o.event not in g.mean:
                continue
            z = (o.mu - g.mean[o.event]) / math.sqrt(g.variance[o.event] + o.scale ** 2)
            p = 2 * (stats.t.sf(abs(z), o.dof) if o.dof else stats.norm.sf(abs(z)))
            stat += stats.chi2.isf(max(p, 1e-300), 1)
            n += 1
        return stat, n

    def _assign_factors(self):
        owner = {}
        obs_events = {t: {o.event for o in obs} for t, obs in self.window.items()}
        for t in self.window:          # oldest -> newest; later slices overwrite
            for e in obs_events[t]:
                for f in self.graph.factors_of(e):
                    owner[f.id] = t
        owned = {t: [] for t in self.window}
        for fid in sorted(owner):
            owned[owner[fid]].append((self.graph.factor(fid), 1.0))
        for t, obs in self.window.items():
            data = SiteData(t, obs, tuple(owned[t]))
            old = self.site_data.get(t)
            if old is None or old.key != data.key:
                self.site_data[t] = data
                self.dirty.add(t)
                self.warm.pop(t, None)

    def _prior_centres(self, new, known) -> dict:
        """Centre of the weak prior for each newly tracked event: its first
        measurement in the window, else a value solved from a relation with
        already-centred events, else its last estimate before a restart,
        else 1."""
        means = dict(known)
        pending = []
        for e in new:
            first = next((o.mu for obs in self.window.values() for o in obs if o.event == e), None)
            if first is None:
                pending.append(e)
            else:
                means[e] = first
        progressed = True
        while pending and progressed:
            progressed = False
            for e in list(pending):
                for f in self.graph.factors_of(e):
                    others = f.scope - {e}
                    if not others <= set(means):
                        continue
                    x = solve_for(f, e, {n: means[n] for n in others}, self.memory.get(e, 1.0))
                    if x is not None and x > 0:
                        means[e] = x
                        pending.remove(e)
                        progressed = True
                        break
        for e in pending:
            means[e] = self.memory.get(e, 1.0)
        return {e: means[e] for e in new}

    def _sync_scope(self):
        scope = set()
        for data in self.site_data.values():
            scope |= set(data.scope)
        current = set(self.state.prior_precision)
        for e in current - scope:
            self.state.drop_event(e)
        new = sorted(scope - current)
        if new:
            known = self.state.global_approx().mean if current - (current - scope) else {}
            for e, c in self._prior_centres(new, known).items():
                var = max((self.config.prior_scale * abs(c)) ** 2, 1.0)
                self.state.add_prior(e, c, var)
        for t in self.window:
            self.state.sites.setdefault(t, GaussianSite())
            self.state.damping.setdefault(t, self.config.damping)

    def _drop_site(self, t):
        self.window.pop(t, None)
        self.site_data.pop(t, None)
        self.state.sites.pop(t, None)
        self.state.damping.pop(t, None)
        self.state.proposals.pop(t, None)
        self.last_cavity.pop(t, None)
        self.warm.pop(t, None)
        self.dirty.discard(t)

    # sweeps

    def _needs_refresh(self, t, cav):
        if t in self.dirty or t not in self.last_cavity:
            return True
        names = self.site_data[t].scope
        m0, v0 = self.last_cavity[t]
        m = np.array([cav.mean[n] for n in names])
        v = np.array([cav.variance[n] for n in names])
        if m.shape != m0.shape:
            return True
        # Measure the move against the cavity width plus the site's own
        # width: a weak site's moments hardly depend on small cavity moves.
        site = self.state.sites[t]
        lam = np.array([site.precision.get(n, 0.0) for n in names])
        width2 = v0 + 1.0 / np.maximum(lam, 1e-300)
        shift = np.max(np.abs(m - m0) / np.sqrt(width2))
        vrel = np.max(np.abs(v - v0) / width2)
        return max(shift, vrel) > self.config.convergence_tol

    def _compute(self, t, cav, now, sweep):
        seq = np.random.SeedSequence([self.config.mcmc.seed, now, sweep, t])
        rng = np.random.default_rng(seq)
        return tilted_moments(cav, self.site_data[t], self.config.mcmc, rng,
                              log_space=self.config.log_space,
                              likelihood=self.config.likelihood, warm=self.warm.get(t))

    def _apply(self, t, cav, moments):
        for _ in range(8):
            try:
                ep_update(self.state, t, moments)
                break
            except ImproperGlobal:
                continue
            except CavityDegenerate:
                break
        names = self.site_data[t].scope
        self.last_cavity[t] = (np.array([cav.mean[n] for n in names]),
                               np.array([cav.variance[n] for n in names]))
        self.dirty.discard(t)
        if moments.warm is not None:
            self.warm[t] = moments.warm

    def _ordered(self):
        keys = list(self.window)
        return keys[::-1] if self.config.site_order == "descending" else keys

    def converge(self, now, pool=None):
        """Sweep until no site needs refreshing; returns (samples, warnings, converged)."""
        n_samples, warnings = 0, []
        for sweep in range(self.config.max_iterations):
            todo = []
            for t in self._ordered():
                try:
                    cav = self.state.cavity(t)
                except CavityDegenerate:
                    log.debug("slice %d: degenerate cavity, site skipped", t)
                    continue
                if self._needs_refresh(t, cav):
                    todo.append((t, cav))
            pending = {t for t, _ in todo}
            settled = [t for t in self._ordered() if t not in pending
                       and self.state.settle(t) > self.config.convergence_tol]
            if not todo and not settled:
                return n_samples, warnings, True
            if self.config.update_schedule == "serial":
                for t, _ in todo:
                    try:
                        cav = self.state.cavity(t)
                    except CavityDegenerate:
                        continue
                    mom = self._compute(t, cav, now, sweep)
                    self._apply(t, cav, mom)
                    n_samples += mom.n_samples
                    warnings.extend(mom.warnings)
                continue
            if pool is not None and len(todo) > 1:
                results = list(pool.map(lambda tc: self._compute(tc[0], tc[1], now, sweep), todo))
            else:
                results = [self._compute(t, cav, now, sweep) for t, cav in todo]
            for (t, cav), mom in zip(todo, results):
                self._apply(t, cav, mom)
                n_samples += mom.n_samples
                warnings.extend(mom.warnings)
        return n_samples, warnings, False

    def step(self, t, obs, pool=None, restart=False, forget=False):
        """Advance the window to slice ``t`` and return its posteriors.

        ``restart`` drops every site first (break marker or changepoint);
        ``forget`` also clears the remembered estimates used to centre
        priors, so nothing before a break marker reaches later slices.
        """
        if restart:
            self.resets.append(t)
            self.reset()
        if forget:
            self.memory.clear()
        for old in [s for s in self.window if s <= t - self.config.k_window]:
            self._drop_site(old)
        if obs:
            self.window[t] = obs
        if not self.window:
            return []
        self._assign_factors()
        self._sync_scope()
        n_samples, warnings, ok = self.converge(t, pool)
        if not ok:
            warnings.append("not_converged")
        g = self.state.global_approx()
        self.memory.update(g.mean)
        warnings = tuple(dict.fromkeys(warnings))
        return [EventPosterior(e, t, g.mean[e], g.variance[e], g.mean[e], n_samples, warnings)
                for e in sorted(g.mean)]


def graph_components(graph) -> list:
    """Connected components of the factor graph as restricted FactorGraphs."""
    from .relations import FactorGraph

    seen, comps = set(), []
    for v in sorted(graph.variables):
        if v in seen:
            continue
        stack, comp = [v], set()
        while stack:
            u = stack.pop()
            if u in comp:
                continue
            comp.add(u)
            stack.extend(graph.neighbours(u) - comp)
        seen |= comp
        factors = tuple(f for f in graph.factors if f.scope <= comp)
        edges = frozenset(e for e in graph.edges if e[0] in comp)
        comps.append(FactorGraph(tuple(sorted(comp)), factors, edges))
    return comps


def run_inference(graph, schedule, batch: SampleBatch, config: EpConfig = EpConfig(),
                  n_slices: Optional[int] = None) -> list:
    """Posteriors for every slice of ``batch``; see the module docstring.

    Each connected component of the factor graph gets its own engine: under
    the mean-field approximation disconnected events never exchange
    information, so this changes nothing numerically but keeps sweeps small.
    A break marker before slice t restarts the engine of every component
    holding events configured on both sides of the break; components on only
    one side are independent of the other side already.
    """
    if len(batch) == 0:
        raise NoObservations("trace contains no samples")
    if config.refine_theta:
        graph = refine_slack(graph, batch, config)
    comps = graph_components(graph)
    engines = [EpEngine(c, config) for c in comps]
    member = {v: i for i, c in enumerate(comps) for v in c.variables}
    horizon = n_slices if n_slices is not None else batch.n_slices
    history = [[] for _ in engines]
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for t in range(horizon):
            obs = slice_observations(batch, t, config)
            unknown = [o.event for o in obs if o.event not in member]
            if unknown:
                raise UnknownEvent(unknown[0])
            split = {}
            for o in obs:
                split.setdefault(member[o.event], []).append(o)
            broken = set()
            if schedule is not None and schedule.break_at(t):
                before = {member[e] for e in events_of(schedule.slice_at(t - 1)) if e in member}
                after = {member[e] for e in events_of(schedule.slice_at(t)) if e in member}
                broken = before & after
            restart = broken | changepoints(engines, split, config.reset_alpha, t)
            for i, engine in enumerate(engines):
                obs_i = tuple(split.get(i, ()))
                history[i].append(engine.step(t, obs_i, pool, i in restart, i in broken))
    finally:
        if pool is not None:
            pool.shutdown()
    out = []
    for engine, steps in zip(engines, history):
        out.extend(smoothed_posteriors(steps, engine.resets, config.lag))
    out = [_pin_exact(p, batch) for p in out]
    out.sort(key=lambda p: (p.slice_index, p.event))
    return out


def _pin_exact(p: "EventPosterior", batch: SampleBatch) -> "EventPosterior":
    """Several identical samples leave no uncertainty about the value: report
    it as a point mass.  (Inside EP it was a narrow Gaussian so neighbours
    could still be updated.)"""
    samples = batch.samples(p.slice_index, p.event)
    if len(samples) < 2:
        return p
    summary = summarize_samples(samples, p.event)
    if summary.S > 0:
        return p
    return replace(p, mean=summary.mu, variance=0.0, mle=summary.mu, point_mass=True)


def changepoints(engines, split, alpha, t) -> set:
    """Engines to restart at slice ``t`` because new measurements contradict
    their current window.

    All engines restart when the pooled statistic over every observed event
    rejects at level ``alpha`` (a workload phase change moves most events
    together, and always-on counters see it first); otherwise each engine is
    tested on its own events.
    """
    if alpha is None:
        return set()
    tests = {i: engines[i].surprise(obs) for i, obs in split.items()}
    total = sum(st for st, _ in tests.values())
    n = sum(k for _, k in tests.values())
    if n and total > stats.chi2.isf(alpha, n):
        log.info("slice %d: workload change detected, restarting all windows", t)
        return set(range(len(engines)))
    out = {i for i, (st, k) in tests.items() if k and st > stats.chi2.isf(alpha, k)}
    if out:
        log.info("slice %d: restarting %d window(s)", t, len(out))
    return out


def smoothed_posteriors(steps, resets, lag: int) -> list:
    """Fixed-lag emission: slice t reports the state after step
    ``min(t + lag, next_reset - 1, last)``, so a slice's estimate also uses
    measurements up to ``lag`` slices later but never crosses a restart."""
    out = []
    last = len(steps) - 1
    for t in range(len(steps)):
        s = min(t + lag, last)
        later = [r for r in resets if r > t]
        if later:
            s = min(s, later[0] - 1)
        chosen = {p.event: p for p in steps[t]}
        chosen.update({p.event: p for p in steps[s]})
        out.extend(replace(p, slice_index=t) for _, p in sorted(chosen.items()))
    return out


# Slack refinement ------------------------------------------------------------


def slack_log_likelihood(factor, windows, multiplier):
    """Linearised marginal log-likelihood of window-averaged measurements
    under a factor with slack ``multiplier * slack_sigma``."""
    total = 0.0
    for means, variances in windows:
        r = float(factor.residual(means))
        scale = float(factor.scale(means))
        var_r = (multiplier * factor.slack_sigma * scale) ** 2
        for e in factor.scope:
            h = 1e-6 * max(abs(means[e]), 1.0)
            up, dn = dict(means), dict(means)
            up[e] += h
            dn[e] -= h
            grad = (float(factor.residual(up)) - float(factor.residual(dn))) / (2 * h)
            var_r += grad * grad * variances[e]
        total += -0.5 * (r * r / var_r + math.log(2 * math.pi * var_r))
    return total


def measurement_windows(batch: SampleBatch, scope, width: int):
    """Per-window event means and their variances, for windows observing all of ``scope``."""
    out = []
    n = batch.n_slices
    for start in range(0, n, width):
        mus = {e: [] for e in scope}
        vars_ = {e: [] for e in scope}
        for t in range(start, min(start + width, n)):
            for e in scope:
                samples = batch.samples(t, e)
                if len(samples) >= 2:
                    s = summarize_samples(samples, e)
                    mus[e].append(s.mu)
                    vars_[e].append(s.S ** 2 / s.N)
        if all(mus[e] for e in scope):
            means = {e: float(np.mean(mus[e])) for e in scope}
            variances = {e: float(np.sum(vars_[e])) / len(vars_[e]) ** 2 for e in scope}
            out.append((means, variances))
    return out


def refine_slack(graph, batch: SampleBatch, config: EpConfig):
    """Pick each factor's slack multiplier from ``theta_grid`` by maximum likelihood."""
    from .relations import FactorGraph

    factors = []
    for f in graph.factors:
        windows = measurement_windows(batch, sorted(f.scope), config.k_window)
        if not windows:
            factors.append(f)
            continue
        best = max(config.theta_grid, key=lambda c: slack_log_likelihood(f, windows, c))
        log.info("factor %s: slack multiplier %.3g", f.id, best)
        factors.append(f.with_slack(f.slack_sigma * best))
    return FactorGraph(graph.variables, tuple(factors), graph.edges)
