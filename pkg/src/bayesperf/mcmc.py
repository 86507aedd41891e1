"""Vectorised random-walk Metropolis over a batch of chains.

All chains advance in lock step so a single call of the log-density handles
every chain (``logp`` maps an ``(n_chains, d)`` array to ``(n_chains,)``).
The proposal is Gaussian with a covariance that starts from a Laplace
approximation (or a warm-start covariance) and is re-estimated from pooled
chain draws during burn-in; a global step scale is tuned toward the target
acceptance rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TARGET_ACCEPT = 0.35
ACCEPT_BAND = (0.1, 0.6)
ADAPT_BLOCK = 8          # burn-in steps between covariance re-estimates


@dataclass
class ChainResult:
    draws: np.ndarray          # (n_steps, n_chains, d), post burn-in
    acceptance: float
    final: np.ndarray          # (n_chains, d)
    proposal_cov: np.ndarray
    step_scale: float

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]


def _safe_logp(logp, x):
    with np.errstate(all="ignore"):
        out = np.asarray(logp(x), dtype=float)
    return np.where(np.isfinite(out), out, -np.inf)


def _psd_cov(cov, floor):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def laplace(logp, x0, scale, newton_steps=3):
    """Newton refinement of ``x0`` and the inverse negative Hessian there.

    Derivatives are central finite differences with per-coordinate steps
    ``1e-3 * scale``, all evaluated in one batched call per iteration.  No
    direction of the returned covariance is wider than ``max(scale)``.
    """
    d = x0.size
    h = 1e-3 * np.asarray(scale, dtype=float)
    x = np.array(x0, dtype=float)
    eye = np.eye(d)
    cov = np.diag(np.asarray(scale, dtype=float) ** 2)
    max_var = float(np.max(np.diag(cov)))
    fx = _safe_logp(logp, x[None, :])[0]
    if not np.isfinite(fx):
        return x, cov
    for _ in range(newton_steps + 1):
        pts = [x]
        for i in range(d):
            pts += [x + 2 * h[i] * eye[i], x - 2 * h[i] * eye[i],
                    x + h[i] * eye[i], x - h[i] * eye[i]]
        for i in range(d):
            for j in range(i + 1, d):
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    pts.append(x + si * h[i] * eye[i] + sj * h[j] * eye[j])
        f = _safe_logp(logp, np.array(pts))
        if not np.all(np.isfinite(f)):
            break
        f0 = f[0]
        grad = np.empty(d)
        hess = np.empty((d, d))
        for i in range(d):
            fp2, fm2, fp, fm = f[1 + 4 * i: 5 + 4 * i]
            grad[i] = (fp - fm) / (2 * h[i])
            hess[i, i] = (fp2 - 2 * f0 + fm2) / (4 * h[i] ** 2)
        k = 1 + 4 * d
        for i in range(d):
            for j in range(i + 1, d):
                fpp, fpm, fmp, fmm = f[k:k + 4]
                k += 4
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
        neg = -hess
        w, v = np.linalg.eigh(0.5 * (neg + neg.T))
        if not np.all(np.isfinite(w)) or w.max() <= 0:
            break
        # directions the finite differences see as flat or convex get the
        # widest initial scale instead of an unbounded variance
        w = np.maximum(w, 1.0 / max_var)
        cov = (v / w) @ v.T
        step = cov @ grad
        # backtracking Newton step
        accepted = False
        for t in (1.0, 0.5, 0.25, 0.1):
            cand = x + t * step
            fc = _safe_logp(logp, cand[None, :])[0]
            if fc >= fx - 1e-9:
                x, fx, accepted = cand, fc, True
                break
        if not accepted or np.max(np.abs(step) / np.sqrt(np.diag(cov))) < 1e-3:
            break
    return x, cov


def rw_metropolis(logp, x0, rng, n_samples, n_burnin, proposal_cov, n_chains=16,
                  scale_mult=1.0, adapt=True) -> ChainResult:
    """Run ``n_chains`` random-walk Metropolis chains.

    ``x0`` is either one point (chains start at Gaussian draws around it
    using ``proposal_cov``) or an ``(n_chains, d)`` array of warm states.
    """
    x0 = np.asarray(x0, dtype=float)
    cov = np.array(proposal_cov, dtype=float)
    d = cov.shape[0]
    floor = 1e-12 * max(np.trace(cov) / d, 1e-300)
    cov = _psd_cov(cov, floor)
    if x0.ndim == 1:
        chol = np.linalg.cholesky(cov)
        x = x0 + rng.standard_normal((n_chains, d)) @ chol.T
        lp = _safe_logp(logp, x)
        bad = ~np.isfinite(lp)
        x[bad] = x0
        lp[bad] = _safe_logp(logp, x0[None, :])[0]
    else:
        x = x0.copy()
        n_chains = x.shape[0]
        lp = _safe_logp(logp, x)

    s = scale_mult * 2.38 / np.sqrt(d)
    chol = np.linalg.cholesky(cov)
    n_steps = max(1, int(np.ceil(n_samples / n_chains)))
    block = []
    for it in range(n_burnin):
        prop = x + s * (rng.standard_normal((n_chains, d)) @ chol.T)
        lpp = _safe_logp(logp, prop)
        acc = np.log(rng.random(n_chains)) < lpp - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lpp, lp)
        if adapt:
            s *= np.exp((acc.mean() - TARGET_ACCEPT) / np.sqrt(it + 1.0))
            block.append(x.copy())
            if len(block) == ADAPT_BLOCK:
                pooled = np.concatenate(block)
                emp = np.cov(pooled, rowvar=False).reshape(d, d)
                if np.all(np.isfinite(emp)) and np.all(np.diag(emp) > 0):
                    cov = _psd_cov(emp, floor)
                    chol = np.linalg.cholesky(cov)
                    s = 2.38 / np.sqrt(d) * scale_mult
                block = []

    draws = np.empty((n_steps, n_chains, d))
    accepted = 0
    for it in range(n_steps):
        prop = x + s * (rng.standard_normal((n_chains, d)) @ chol.T)
        lpp = _safe_logp(logp, prop)
        acc = np.log(rng.random(n_chains)) < lpp - lp
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lpp, lp)
        accepted += int(acc.sum())
        draws[it] = x
    return ChainResult(draws, accepted / (n_steps * n_chains), x, cov, s)
