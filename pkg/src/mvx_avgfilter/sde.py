"""Euler schemes for the slow/fast interacting-particle system.

Layout of a run: the slow coordinate advances on a macro grid of width
``dt_macro`` while the fast coordinate takes ``micro_substeps`` inner steps
per macro step, with drift scaled by 1/epsilon and noise by 1/sqrt(epsilon).
Both empirical laws are frozen at the start of each macro step; the slow
update uses the macro-start fast state.

Noise is drawn from counter-based streams keyed by (seed, label, particle,
component), so enlarging the ensemble or re-running with more threads never
perturbs the increments of existing particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GridMismatch, Instability, InvalidParams, MissingDelta
from .measure import MeasureSummary, ParticleCloud, summarize_points
from .model import ModelSpec
from .streams import normal_increments

STABILITY_CAP = 0.25

SLOW_LABEL = "signal-slow"
FAST_LABEL = "signal-fast"
FROZEN_LABEL = "frozen"


@dataclass(frozen=True)
class SdeConfig:
    """Discretization parameters for one particle run."""

    epsilon: float
    T: float
    dt_macro: float
    micro_substeps: int = 1
    N: int = 2
    seed: int = 0
    delta_eps: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise InvalidParams(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.T <= 0.0:
            raise InvalidParams(f"T must be positive, got {self.T}")
        if not (0.0 < self.dt_macro <= self.T):
            raise InvalidParams(
                f"dt_macro must lie in (0, T], got {self.dt_macro} with T={self.T}"
            )
        if self.micro_substeps < 1:
            raise InvalidParams(f"micro_substeps must be >= 1, got {self.micro_substeps}")
        if self.N < 2:
            raise InvalidParams(
                f"N must be >= 2 so empirical laws are nondegenerate, got {self.N}"
            )
        ratio = self.T / self.dt_macro
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise InvalidParams(
                f"dt_macro={self.dt_macro} does not tile [0, T={self.T}] exactly"
            )
        if self.delta_eps is not None and self.delta_eps <= 0.0:
            raise InvalidParams(f"delta_eps must be positive, got {self.delta_eps}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt_macro))


@dataclass(frozen=True)
class FrozenRunConfig:
    """Run length and ensemble size for the frozen fast equation.

    The frozen equation runs at unit time scale: epsilon plays no role once
    the slow input and its law are pinned.
    """

    M: int
    dt: float
    burn_in: float
    avg_window: float
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise InvalidParams(f"M must be >= 2, got {self.M}")
        if self.dt <= 0.0:
            raise InvalidParams(f"dt must be positive, got {self.dt}")
        if self.burn_in < 0.0:
            raise InvalidParams(f"burn_in must be >= 0, got {self.burn_in}")
        if self.avg_window <= 0.0:
            raise InvalidParams(f"avg_window must be positive, got {self.avg_window}")

    @property
    def n_steps(self) -> int:
        return int(math.ceil((self.burn_in + self.avg_window) / self.dt - 1e-9))


@dataclass(eq=False)
class PathEnsemble:
    """Time grid plus per-time particle clouds for one simulation.

    ``fast_clouds`` is None for averaged runs, ``aux_clouds`` is populated
    only by :func:`simulate_auxiliary`.  ``noise_tag`` records the stream
    identifiers needed to regenerate the driving increments bit-exactly.
    """

    times: np.ndarray
    slow_clouds: list
    fast_clouds: Optional[list] = None
    aux_clouds: Optional[list] = None
    noise_tag: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.slow_clouds):
            raise InvalidParams("times and slow_clouds must have equal length")
        if self.fast_clouds is not None and len(self.fast_clouds) != len(self.times):
            raise InvalidParams("fast_clouds length must match times")
        if self.aux_clouds is not None and len(self.aux_clouds) != len(self.times):
            raise InvalidParams("aux_clouds length must match times")


def estimate_dissipativity(
    model: ModelSpec, samples: int = 64, box: float = 1.0, seed: int = 0
) -> float:
    """Estimate the contraction rate of the fast drift in its own variable.

    Returns max over sampled pairs of -<dz, b2(x,mu,z1,nu)-b2(x,mu,z2,nu)>/|dz|^2
    with everything but z shared.  Exact (= gamma) for the linear family; a
    nonpositive value means no contraction was detected and the micro-step
    stability cap is inapplicable.
    """

    from .streams import stream

    rng = stream(seed, "dissipativity-probe")
    worst = -math.inf
    for _ in range(samples):
        x = rng.uniform(-box, box, size=model.n)
        z1 = rng.uniform(-box, box, size=model.l)
        z2 = rng.uniform(-box, box, size=model.l)
        if np.allclose(z1, z2):
            continue
        pts = rng.uniform(-box, box, size=(8, model.n))
        mu = summarize_points(pts)
        nu = summarize_points(rng.uniform(-box, box, size=(8, model.l)))
        dz = z1 - z2
        db = np.asarray(model.b2(x, mu, z1, nu)) - np.asarray(model.b2(x, mu, z2, nu))
        worst = max(worst, float(-np.dot(dz, db) / np.dot(dz, dz)))
    if not math.isfinite(worst):
        raise InvalidParams("dissipativity probe produced no usable sample pairs")
    return worst


def suggest_micro_substeps(
    dt_macro: float, epsilon: float, gamma_est: float, cap: float = STABILITY_CAP
) -> int:
    return max(1, int(math.ceil(dt_macro * gamma_est / (cap * epsilon))))


def validate_stability(
    model: ModelSpec,
    cfg: SdeConfig,
    gamma_est: Optional[float] = None,
    cap: float = STABILITY_CAP,
) -> None:
    """Enforce (dt_macro/micro_substeps)/epsilon * gamma_est <= cap.

    Skipped when no contraction is detected (gamma_est <= 0): the cap is a
    relaxation-rate condition and has no meaning without one.
    """

    if gamma_est is None:
        if model.linear_params is not None:
            gamma_est = model.linear_params.gamma
        else:
            gamma_est = estimate_dissipativity(model)
    if gamma_est <= 0.0:
        return
    effective = (cfg.dt_macro / cfg.micro_substeps) / cfg.epsilon * gamma_est
    if effective > cap:
        needed = suggest_micro_substeps(cfg.dt_macro, cfg.epsilon, gamma_est, cap)
        raise InvalidParams(
            f"fast step too coarse: (dt_macro/micro_substeps)/epsilon*gamma = "
            f"{effective:.3g} exceeds {cap}; set micro_substeps >= {needed}"
        )


def _apply_sigma(sig, dw: np.ndarray) -> np.ndarray:
    """Apply a diffusion matrix to increments, per particle.

    sig may be (d, q) shared across particles or (N, d, q) per particle;
    dw has shape (N, q).
    """

    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 2:
        return dw @ sig.T
    if sig.ndim == 3:
        return np.einsum("nij,nj->ni", sig, dw)
    raise InvalidParams(f"diffusion coefficient has unsupported ndim {sig.ndim}")


def _check_finite(arr: np.ndarray, what: str, step: int, time: float) -> None:
    if not np.all(np.isfinite(arr)):
        raise Instability(
            f"{what} became non-finite at step {step} (t={time:.6g}); "
            "reduce dt_macro or increase micro_substeps",
            step=step,
            time=time,
        )


def _tile_state(v: np.ndarray, count: int) -> np.ndarray:
    return np.tile(np.asarray(v, dtype=float).reshape(1, -1), (count, 1))


def _noise_tag(cfg: SdeConfig, labels: Sequence[str]) -> dict:
    return {
        "seed": cfg.seed,
        "epsilon": cfg.epsilon,
        "dt_macro": cfg.dt_macro,
        "micro_substeps": cfg.micro_substeps,
        "N": cfg.N,
        "labels": tuple(labels),
    }


def simulate_slow_fast(
    model: ModelSpec, cfg: SdeConfig, check_stability: bool = True
) -> PathEnsemble:
    """Run the coupled slow/fast particle system on the macro grid."""

    if check_stability:
        validate_stability(model, cfg)
    n_steps = cfg.n_steps
    dt = cfg.dt_macro
    ksub = cfg.micro_substeps
    dts = dt / ksub
    eps = cfg.epsilon
    times = np.arange(n_steps + 1) * dt

    x = _tile_state(model.x0, cfg.N)
    z = _tile_state(model.z0, cfg.N)
    dw_slow = normal_increments(cfg.seed, SLOW_LABEL, n_steps, cfg.N, model.m, math.sqrt(dt))
    dw_fast = normal_increments(
        cfg.seed, FAST_LABEL, n_steps * ksub, cfg.N, model.l, math.sqrt(dts)
    )
    inv_sqrt_eps = 1.0 / math.sqrt(eps)

    slow_clouds = [ParticleCloud(x)]
    fast_clouds = [ParticleCloud(z)]
    for k in range(n_steps):
        _check_finite(x, "slow state", k, times[k])
        _check_finite(z, "fast state", k, times[k])
        mu = summarize_points(x)
        nu = summarize_points(z)
        x_macro = x
        x = (
            x
            + np.asarray(model.b1(x_macro, mu, z)) * dt
            + _apply_sigma(model.sigma1(x_macro, mu), dw_slow[k])
        )
        for s in range(ksub):
            dw = dw_fast[k * ksub + s]
            z = (
                z
                + np.asarray(model.b2(x_macro, mu, z, nu)) * (dts / eps)
                + _apply_sigma(model.sigma2(x_macro, mu, z, nu), dw) * inv_sqrt_eps
            )
        _check_finite(x, "slow state", k + 1, times[k + 1])
        _check_finite(z, "fast state", k + 1, times[k + 1])
        slow_clouds.append(ParticleCloud(x))
        fast_clouds.append(ParticleCloud(z))
    return PathEnsemble(
        times=times,
        slow_clouds=slow_clouds,
        fast_clouds=fast_clouds,
        noise_tag=_noise_tag(cfg, (SLOW_LABEL, FAST_LABEL)),
    )


def simulate_frozen(
    model: ModelSpec,
    x: np.ndarray,
    mu: MeasureSummary,
    cfg: FrozenRunConfig,
    z0: Optional[np.ndarray] = None,
) -> PathEnsemble:
    """Run the fast equation with slow input and law pinned at (x, mu).

    The ensemble's own empirical law feeds the self-interaction term and is
    recomputed every step (unit time scale, no substepping).
    """

    n_steps = cfg.n_steps
    dt = cfg.dt
    times = np.arange(n_steps + 1) * dt
    x_frozen = _tile_state(x, cfg.M)
    z = _tile_state(model.z0 if z0 is None else z0, cfg.M)
    dw = normal_increments(cfg.seed, FROZEN_LABEL, n_steps, cfg.M, model.l, math.sqrt(dt))

    slow_cloud = ParticleCloud(x_frozen)
    slow_clouds = [slow_cloud] * (n_steps + 1)
    fast_clouds = [ParticleCloud(z)]
    for k in range(n_steps):
        _check_finite(z, "frozen fast state", k, times[k])
        nu = summarize_points(z)
        z = (
            z
            + np.asarray(model.b2(x_frozen, mu, z, nu)) * dt
            + _apply_sigma(model.sigma2(x_frozen, mu, z, nu), dw[k])
        )
        _check_finite(z, "frozen fast state", k + 1, times[k + 1])
        fast_clouds.append(ParticleCloud(z))
    tag = {
        "seed": cfg.seed,
        "dt": cfg.dt,
        "M": cfg.M,
        "labels": (FROZEN_LABEL,),
    }
    return PathEnsemble(
        times=times, slow_clouds=slow_clouds, fast_clouds=fast_clouds, noise_tag=tag
    )


def simulate_averaged(
    model: ModelSpec,
    drift: Callable[[np.ndarray, MeasureSummary], np.ndarray],
    cfg: SdeConfig,
) -> PathEnsemble:
    """Run the averaged slow system driven by the supplied effective drift.

    Uses the same slow-noise streams as :func:`simulate_slow_fast` under the
    same seed, so the two runs are coupled pathwise.
    """

    n_steps = cfg.n_steps
    dt = cfg.dt_macro
    times = np.arange(n_steps + 1) * dt
    x = _tile_state(model.x0, cfg.N)
    dw_slow = normal_increments(cfg.seed, SLOW_LABEL, n_steps, cfg.N, model.m, math.sqrt(dt))

    slow_clouds = [ParticleCloud(x)]
    for k in range(n_steps):
        _check_finite(x, "averaged slow state", k, times[k])
        mu = summarize_points(x)
        x = (
            x
            + np.asarray(drift(x, mu)) * dt
            + _apply_sigma(model.sigma1(x, mu), dw_slow[k])
        )
        _check_finite(x, "averaged slow state", k + 1, times[k + 1])
        slow_clouds.append(ParticleCloud(x))
    return PathEnsemble(
        times=times, slow_clouds=slow_clouds, noise_tag=_noise_tag(cfg, (SLOW_LABEL,))
    )


def coupled_pair(
    model: ModelSpec,
    drift: Callable[[np.ndarray, MeasureSummary], np.ndarray],
    cfg: SdeConfig,
):
    """Slow/fast run and averaged run under identical slow increments."""

    return simulate_slow_fast(model, cfg), simulate_averaged(model, drift, cfg)


def simulate_auxiliary(model: ModelSpec, slow_path: PathEnsemble, cfg: SdeConfig) -> PathEnsemble:
    """Rebuild the fast path with slow input frozen per delta_eps block.

    Restart points k*delta_eps are rounded to the macro grid; at each restart
    the auxiliary state is reset to the stored fast cloud and the slow input
    (and its law) are pinned until the next restart.  The driving increments
    are regenerated from the noise tag, so away from the frozen inputs this
    is the same discrete dynamics as the original run.
    """

    if cfg.delta_eps is None:
        raise MissingDelta("delta_eps is required for the auxiliary construction")
    tag = slow_path.noise_tag
    for key in ("seed", "epsilon", "dt_macro", "micro_substeps", "N"):
        if key not in tag or getattr(cfg, key) != tag[key]:
            raise GridMismatch(
                f"config field {key}={getattr(cfg, key)!r} does not match the "
                f"ensemble noise tag {tag.get(key)!r}"
            )
    if slow_path.fast_clouds is None:
        raise GridMismatch("ensemble has no fast clouds to restart from")

    n_steps = cfg.n_steps
    dt = cfg.dt_macro
    ksub = cfg.micro_substeps
    dts = dt / ksub
    eps = cfg.epsilon
    times = slow_path.times
    seg = max(1, int(round(cfg.delta_eps / dt)))
    dw_fast = normal_increments(
        cfg.seed, FAST_LABEL, n_steps * ksub, cfg.N, model.l, math.sqrt(dts)
    )
    inv_sqrt_eps = 1.0 / math.sqrt(eps)

    zh = slow_path.fast_clouds[0].points.copy()
    x_frozen = slow_path.slow_clouds[0].points
    mu_frozen = summarize_points(x_frozen)
    aux_clouds = [ParticleCloud(zh)]
    for k in range(n_steps):
        if k % seg == 0:
            zh = slow_path.fast_clouds[k].points.copy()
            x_frozen = slow_path.slow_clouds[k].points
            mu_frozen = summarize_points(x_frozen)
        _check_finite(zh, "auxiliary fast state", k, times[k])
        nu = summarize_points(zh)
        for s in range(ksub):
            dw = dw_fast[k * ksub + s]
            zh = (
                zh
                + np.asarray(model.b2(x_frozen, mu_frozen, zh, nu)) * (dts / eps)
                + _apply_sigma(model.sigma2(x_frozen, mu_frozen, zh, nu), dw) * inv_sqrt_eps
            )
        _check_finite(zh, "auxiliary fast state", k + 1, times[k + 1])
        aux_clouds.append(ParticleCloud(zh))
    return PathEnsemble(
        times=times,
        slow_clouds=slow_path.slow_clouds,
        fast_clouds=slow_path.fast_clouds,
        aux_clouds=aux_clouds,
        noise_tag=dict(tag, delta_eps=cfg.delta_eps),
    )
