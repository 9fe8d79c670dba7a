"""
DRSYNTH - Bayesian Predictive Synthesis (recouple step)
Two-block Gibbs sampler for the dynamic synthesis model

    y_t = F_t' theta_t + nu_t,  nu_t ~ N(0, v_t),  F_t = (1, x_t')'
    theta_t = theta_{t-1} + omega_t,  omega_t ~ N(0, v_t W_t)

with agent latent states x_tj ~ h_tj (Student-t, handled as scale mixtures of
normals). Block 1 draws (theta, v) by forward filtering / backward sampling,
block 2 redraws the latent agent states and their mixing scales.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import logsumexp

from dlm_engine import DensityPath, DiscountConfig, DLMPosterior, StudentTDensity, evolve_draws
from errors import DataValidationError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentDensities:
    """T x J rectangle of agent forecast densities h_tj = T_{n_tj}(h_tj, H_tj)"""
    names: tuple
    dates: pd.PeriodIndex
    location: np.ndarray
    scale: np.ndarray
    dof: np.ndarray
    horizon: int = 1

    def __post_init__(self):
        shape = (len(self.dates), len(self.names))
        for label, array in (("location", self.location), ("scale", self.scale), ("dof", self.dof)):
            if array.shape != shape:
                raise DataValidationError(f"agent {label} array has shape {array.shape}, expected {shape}")
        if np.any(self.scale < 0) or np.any(self.dof <= 0):
            raise DataValidationError("agent densities need scale >= 0 and dof > 0")

    @classmethod
    def from_paths(cls, paths: Sequence[DensityPath], start: pd.Period, end: pd.Period) -> "AgentDensities":
        windows = [path.window(start, end) for path in paths]
        dates = windows[0].dates
        for window in windows[1:]:
            if not window.dates.equals(dates):
                raise DataValidationError(f"agent '{window.name}' dates do not line up with '{windows[0].name}'")
        horizons = {path.horizon for path in paths}
        if len(horizons) != 1:
            raise DataValidationError(f"agents mix horizons {sorted(horizons)}")
        return cls(
            names=tuple(w.name for w in windows),
            dates=dates,
            location=np.column_stack([w.location for w in windows]),
            scale=np.column_stack([w.scale for w in windows]),
            dof=np.column_stack([w.dof for w in windows]),
            horizon=horizons.pop(),
        )

    @property
    def T(self) -> int:
        return self.location.shape[0]

    @property
    def J(self) -> int:
        return self.location.shape[1]

    def row(self, i: int) -> List[StudentTDensity]:
        return [StudentTDensity(dof=float(self.dof[i, j]), location=float(self.location[i, j]),
                                scale=float(self.scale[i, j])) for j in range(self.J)]

    def permuted(self, order: Sequence[int]) -> "AgentDensities":
        order = list(order)
        return AgentDensities(names=tuple(self.names[j] for j in order), dates=self.dates,
                              location=self.location[:, order], scale=self.scale[:, order],
                              dof=self.dof[:, order], horizon=self.horizon)


@dataclass(frozen=True)
class GibbsConfig:
    burn_in: int
    n_saved: int
    disc: DiscountConfig
    prior: DLMPosterior
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.n_saved < 1:
            raise ValueError(f"n_saved must be >= 1, got {self.n_saved}")


@dataclass(frozen=True)
class SynthesisDraw:
    """One saved Gibbs draw over t = 1..T"""
    x: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    # filtered normal/inverse-gamma state at T given this draw's latent states
    terminal: DLMPosterior


class FFBSResult(NamedTuple):
    theta: np.ndarray
    v: np.ndarray
    terminal: DLMPosterior


def default_synthesis_prior(J: int, n0: float = 10.0, s0: float = 0.01,
                            m0: Optional[Sequence[float]] = None) -> DLMPosterior:
    """theta_0 | v_0 ~ N(m0, (v_0/s0) I) with m0 = (0, 1/J, ..., 1/J) unless given"""
    if m0 is None:
        m0 = np.concatenate([[0.0], np.full(J, 1.0 / J)])
    return DLMPosterior.initial(J + 1, n0=n0, s0=s0, m0=np.asarray(m0, dtype=np.float64))


def init_latent_states(H: AgentDensities, rng: np.random.Generator) -> np.ndarray:
    """x_tj drawn independently from h_tj; point masses return their location"""
    z = rng.standard_t(H.dof)
    return H.location + np.sqrt(H.scale) * z


def _draw_scales(x: np.ndarray, H: AgentDensities, rng: np.random.Generator) -> np.ndarray:
    """phi_tj | x_tj ~ G((n_tj + 1)/2, rate (n_tj + d_tj)/2), d_tj = (x_tj - h_tj)^2 / H_tj"""
    positive = H.scale > 0
    d = np.where(positive, (x - H.location) ** 2 / np.where(positive, H.scale, 1.0), 0.0)
    phi = rng.gamma(shape=(H.dof + 1.0) / 2.0, scale=2.0 / (H.dof + d))
    return np.where(positive, phi, 1.0)


def ffbs_draw(x: np.ndarray, y: np.ndarray, cfg: GibbsConfig, rng: np.random.Generator) -> FFBSResult:
    """Joint draw of (theta_{1:T}, v_{1:T}) given latent agent states"""
    T, J = x.shape
    p = J + 1
    if cfg.prior.dim != p:
        raise DataValidationError(f"synthesis prior has dimension {cfg.prior.dim}, expected J+1={p}")
    if len(y) != T:
        raise DataValidationError(f"{len(y)} targets for {T} latent-state rows")

    delta, beta = cfg.disc.delta, cfg.disc.beta
    F = np.column_stack([np.ones(T), x])
    ms = np.empty((T, p))
    Cs = np.empty((T, p, p))
    ns = np.empty(T)
    ss = np.empty(T)

    m, C, n, s = cfg.prior.m, cfg.prior.C, cfg.prior.n, cfg.prior.s
    for t in range(T):
        R = C / delta
        RF = R @ F[t]
        q = F[t] @ RF + s
        if not q > 0.0:
            raise NumericalError(f"non-positive predictive variance q={q:.3e} in forward filter", index=t)
        e = y[t] - F[t] @ m
        A = RF / q
        n_next = beta * n + 1.0
        r = (beta * n + e * e / q) / n_next
        m = m + A * e
        C = r * (R - q * np.outer(A, A))
        C = 0.5 * (C + C.T)
        n, s = n_next, r * s
        ms[t], Cs[t], ns[t], ss[t] = m, C, n, s

    try:
        L = np.linalg.cholesky(Cs)
    except np.linalg.LinAlgError:
        raise NumericalError("filtered scale matrix lost positive definiteness") from None

    z = rng.standard_normal((T, p))
    theta = np.empty((T, p))
    v = np.empty(T)

    v[-1] = 1.0 / rng.gamma(shape=ns[-1] / 2.0, scale=2.0 / (ns[-1] * ss[-1]))
    theta[-1] = ms[-1] + np.sqrt(v[-1] / ss[-1]) * (L[-1] @ z[-1])

    if beta < 1.0:
        gammas = rng.gamma(shape=(1.0 - beta) * ns[:-1] / 2.0, scale=2.0 / (ns[:-1] * ss[:-1]))
    for t in range(T - 2, -1, -1):
        if beta < 1.0:
            v[t] = 1.0 / (beta / v[t + 1] + gammas[t])
        else:
            v[t] = v[t + 1]
        if delta < 1.0:
            mean = ms[t] + delta * (theta[t + 1] - ms[t])
            theta[t] = mean + np.sqrt((1.0 - delta) * v[t] / ss[t]) * (L[t] @ z[t])
        else:
            theta[t] = theta[t + 1]

    terminal = DLMPosterior(m=ms[-1].copy(), C=Cs[-1].copy(), n=float(ns[-1]), s=float(ss[-1]), t=T)
    return FFBSResult(theta=theta, v=v, terminal=terminal)


def latent_state_moments(theta: np.ndarray, v: np.ndarray, phi: np.ndarray, y: np.ndarray,
                         H: AgentDensities):
    """Mean (T, J) and covariance (T, J, J) of p(x_t | theta_t, v_t, phi_t, y_t, H_t)

    N(h_t + b_t c_t, H_t - b_t b_t' g_t), H_t = diag(H_tj/phi_tj),
    c_t = y_t - theta_t0 - h_t'theta_t1, g_t = v_t + theta_t1' H_t theta_t1, b_t = H_t theta_t1 / g_t.
    """
    D = H.scale / phi
    theta1 = theta[:, 1:]
    c = y - theta[:, 0] - np.sum(H.location * theta1, axis=1)
    g = v + np.sum(theta1 * theta1 * D, axis=1)
    if np.any(g <= 0.0):
        raise NumericalError("non-positive conditional variance g", index=int(np.argmax(g <= 0.0)))
    b = D * theta1 / g[:, None]
    mean = H.location + b * c[:, None]
    cov = np.einsum("tj,jk->tjk", D, np.eye(H.J)) - np.einsum("tj,tk->tjk", b, b) * g[:, None, None]
    return mean, cov


def draw_latent_states(theta: np.ndarray, v: np.ndarray, phi: np.ndarray, y: np.ndarray,
                       H: AgentDensities, rng: np.random.Generator):
    """Redraw x_{1:T} from their conditional normals, then the scale-mixture weights phi"""
    if theta.shape != (H.T, H.J + 1) or v.shape != (H.T,) or phi.shape != (H.T, H.J):
        raise DataValidationError("latent-state inputs have inconsistent shapes")

    D = H.scale / phi
    theta1 = theta[:, 1:]
    c = y - theta[:, 0] - np.sum(H.location * theta1, axis=1)
    g = v + np.sum(theta1 * theta1 * D, axis=1)
    if np.any(g <= 0.0):
        raise NumericalError("non-positive conditional variance g", index=int(np.argmax(g <= 0.0)))
    mean = H.location + (D * theta1 / g[:, None]) * c[:, None]

    # Covariance D - u u' with u = D theta1 / sqrt(g) is a rank-one downdate of a diagonal;
    # its square root is D^{1/2} (I - kappa w w'), w = D^{1/2} theta1 / sqrt(g).
    sqrt_D = np.sqrt(D)
    w = sqrt_D * theta1 / np.sqrt(g)[:, None]
    rho = np.sum(w * w, axis=1)
    kappa = 1.0 / (1.0 + np.sqrt(np.clip(1.0 - rho, 0.0, None)))
    z = rng.standard_normal((H.T, H.J))
    eps = sqrt_D * (z - (kappa * np.sum(w * z, axis=1))[:, None] * w)
    x = mean + eps

    return x, _draw_scales(x, H, rng)


def run_gibbs(y: np.ndarray, H: AgentDensities, cfg: GibbsConfig,
              rng: Optional[np.random.Generator] = None,
              init_x: Optional[np.ndarray] = None) -> List[SynthesisDraw]:
    """Run burn_in + n_saved sweeps and return the saved draws"""
    y = np.asarray(y, dtype=np.float64)
    if H.T < 2:
        raise DataValidationError(f"synthesis needs at least 2 periods, got {H.T}")
    if len(y) != H.T:
        raise DataValidationError(f"{len(y)} targets for {H.T} agent-density rows")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    x = init_latent_states(H, rng) if init_x is None else np.array(init_x, dtype=np.float64)
    phi = _draw_scales(x, H, rng)

    draws = []
    for it in range(cfg.burn_in + cfg.n_saved):
        try:
            ffbs = ffbs_draw(x, y, cfg, rng)
            x, phi = draw_latent_states(ffbs.theta, ffbs.v, phi, y, H, rng)
        except NumericalError as e:
            where = f"period {H.dates[e.index]}" if e.index is not None and e.index < H.T else "unknown period"
            raise NumericalError(f"Gibbs iteration {it}, {where}: {e.reason}") from e
        if it >= cfg.burn_in:
            draws.append(SynthesisDraw(x=x, theta=ffbs.theta, v=ffbs.v, phi=phi, terminal=ffbs.terminal))

    logger.debug(f"Gibbs chain done: T={H.T}, J={H.J}, {cfg.burn_in}+{cfg.n_saved} sweeps")
    return draws


@dataclass
class SynthesisPosterior:
    """Stacked saved draws of one chain, plus what forecasting needs"""
    dates: pd.PeriodIndex
    agent_names: tuple
    horizon: int
    disc: DiscountConfig
    theta: np.ndarray
    v: np.ndarray
    x: np.ndarray
    C_T: np.ndarray
    n_T: np.ndarray
    s_T: np.ndarray

    @classmethod
    def from_draws(cls, draws: Sequence[SynthesisDraw], H: AgentDensities,
                   disc: DiscountConfig) -> "SynthesisPosterior":
        return cls(
            dates=H.dates,
            agent_names=H.names,
            horizon=H.horizon,
            disc=disc,
            theta=np.stack([d.theta for d in draws]),
            v=np.stack([d.v for d in draws]),
            x=np.stack([d.x for d in draws]),
            C_T=np.stack([d.terminal.C for d in draws]),
            n_T=np.array([d.terminal.n for d in draws]),
            s_T=np.array([d.terminal.s for d in draws]),
        )

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    def theta_mean(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    def terminal_theta_mean(self) -> np.ndarray:
        return self.theta[:, -1, :].mean(axis=0)


@dataclass(frozen=True)
class SynthesisForecast:
    """Sample from the synthesized predictive, with per-draw conditional normals N(loc, var)"""
    samples: np.ndarray
    loc: np.ndarray
    var: np.ndarray

    def mean(self) -> float:
        return float(np.mean(self.loc))

    def logpdf(self, y: float) -> float:
        """Rao-Blackwellized mixture density: mean over draws of N(y | F'theta, v)"""
        terms = stats.norm.logpdf(y, loc=self.loc, scale=np.sqrt(self.var))
        return float(logsumexp(terms) - np.log(len(terms)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if size == len(self.samples):
            return self.samples
        return rng.choice(self.samples, size=size, replace=True)


def _simulate_forecast(posterior: SynthesisPosterior, H_target: Sequence[StudentTDensity],
                       disc: DiscountConfig, rng: np.random.Generator, steps: int,
                       replicates: int) -> SynthesisForecast:
    J = len(posterior.agent_names)
    if len(H_target) != J:
        raise DataValidationError(f"{len(H_target)} agent densities supplied for {J} agents")

    idx = np.repeat(np.arange(posterior.n_draws), replicates)
    theta, v = evolve_draws(posterior.theta[idx, -1, :], posterior.v[idx, -1], posterior.C_T[idx],
                            posterior.n_T[idx], posterior.s_T[idx], disc, rng, steps=steps)
    N = len(idx)
    x = np.column_stack([h.sample(rng, N) for h in H_target])
    loc = theta[:, 0] + np.sum(theta[:, 1:] * x, axis=1)
    samples = loc + np.sqrt(v) * rng.standard_normal(N)
    return SynthesisForecast(samples=samples, loc=loc, var=v)


def predict_one_step(posterior: SynthesisPosterior, H_next: Sequence[StudentTDensity],
                     rng: np.random.Generator, disc: Optional[DiscountConfig] = None,
                     replicates: int = 1) -> SynthesisForecast:
    """1-step predictive: evolve each draw to T+1, draw x_{T+1,j} ~ h_{T+1,j}, then y"""
    return _simulate_forecast(posterior, H_next, disc or posterior.disc, rng, steps=1, replicates=replicates)


def predict_k_step(mode: str, posterior: SynthesisPosterior, H_target: Sequence[StudentTDensity], k: int,
                   rng: np.random.Generator, disc: Optional[DiscountConfig] = None, replicates: int = 1,
                   extra_steps: int = 0) -> SynthesisForecast:
    """k-step predictive for y_{T+k}

    customized: the chain was fit on lag-k agent densities, forecast as 1-step.
    direct: the chain was fit on 1-step agent densities, parameters evolve k times.
    `extra_steps` adds evolution when a stale chain (origin thinning) is reused.
    """
    if k < 1:
        raise DataValidationError(f"horizon must be >= 1, got {k}")
    if mode == "customized":
        if posterior.horizon != k:
            raise DataValidationError(
                f"customized synthesis at horizon {k} needs agents built on lag-{k} designs "
                f"(chain was fit on lag-{posterior.horizon})"
            )
        steps = 1
    elif mode == "direct":
        if posterior.horizon != 1:
            raise DataValidationError(f"direct mode evolves a 1-step synthesis model (chain horizon {posterior.horizon})")
        steps = k
    else:
        raise DataValidationError(f"unknown multi-step mode '{mode}'")
    return _simulate_forecast(posterior, H_target, disc or posterior.disc, rng,
                              steps=steps + extra_steps, replicates=replicates)
