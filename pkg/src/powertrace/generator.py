"""Synthetic server power: features -> state probabilities -> trajectory -> watts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from powertrace.bundle import ModelBundle
from powertrace.classifier import predict_state_probs
from powertrace.states import StateCatalog
from powertrace.types import ArrivalSchedule, PowerTrace, SeedLike, as_rng
from powertrace.workload import FeatureSeries, sample_lifetimes, schedule_features

MODES = ("iid", "ar1")


def sample_trajectory(probs, seed: SeedLike = 0) -> np.ndarray:
    """Draw one state per timestep from its categorical row (inverse-CDF, one uniform per step)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probs must be a (T, K) array")
    rng = as_rng(seed)
    u = rng.random(p.shape[0])
    cum = np.cumsum(p, axis=1)
    cum /= cum[:, -1:]
    states = np.sum(cum <= u[:, None], axis=1)
    return np.minimum(states, p.shape[1] - 1).astype(np.int64)


def _check_states(states, catalog: StateCatalog) -> np.ndarray:
    z = np.asarray(states, dtype=np.int64).reshape(-1)
    if z.size and (z.min() < 0 or z.max() >= catalog.K):
        raise ValueError(f"state labels must lie in [0, {catalog.K})")
    return z


def sample_power_iid(states, catalog: StateCatalog, seed: SeedLike = 0, dt: float = 0.25) -> PowerTrace:
    """Independent normal draw from each step's state, clipped to the observed range."""
    z = _check_states(states, catalog)
    eps = as_rng(seed).standard_normal(z.size)
    y = catalog.means[z] + catalog.stds[z] * eps
    return PowerTrace(np.clip(y, catalog.y_min, catalog.y_max), dt)


def sample_power_ar1(states, catalog: StateCatalog, seed: SeedLike = 0, dt: float = 0.25) -> PowerTrace:
    """Per-state AR(1) with stationary variance ``sigma_k^2``.

    Consumes the same one-normal-per-step stream as :func:`sample_power_iid`;
    step 0 is an i.i.d. draw, and each clipped value feeds the next step.
    """
    z = _check_states(states, catalog)
    eps = as_rng(seed).standard_normal(z.size)
    if z.size == 0:
        raise ValueError("need at least one state")
    mu = catalog.means[z].tolist()
    phi = catalog.phis[z].tolist()
    innov = (catalog.stds[z] * np.sqrt(1.0 - catalog.phis[z] ** 2) * eps).tolist()
    lo, hi = catalog.y_min, catalog.y_max
    out = [0.0] * z.size
    prev = min(max(mu[0] + float(catalog.stds[z[0]]) * float(eps[0]), lo), hi)
    out[0] = prev
    for t in range(1, z.size):
        y = mu[t] + phi[t] * (prev - mu[t]) + innov[t]
        prev = lo if y < lo else (hi if y > hi else y)
        out[t] = prev
    return PowerTrace(np.asarray(out), dt)


def sample_power(states, catalog: StateCatalog, mode: str, seed: SeedLike = 0, dt: float = 0.25) -> PowerTrace:
    if mode == "iid":
        return sample_power_iid(states, catalog, seed, dt)
    if mode == "ar1":
        return sample_power_ar1(states, catalog, seed, dt)
    raise ValueError(f"unknown generation mode {mode!r}; expected one of {MODES}")


def default_mode(bundle: ModelBundle) -> str:
    return "ar1" if bundle.config.is_moe else "iid"


def stage_seeds(seed: int, server_index: int = 0):
    """Independent streams for lifetimes, state trajectory and power noise."""
    return np.random.SeedSequence([int(seed), int(server_index)]).spawn(3)


@dataclass(frozen=True)
class GenerationRequest:
    bundle: ModelBundle
    schedule: ArrivalSchedule
    horizon: float
    mode: Optional[str] = None
    seed: int = 0
    dt: Optional[float] = None
    server_index: int = 0

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.mode is not None and self.mode not in MODES:
            raise ValueError(f"unknown generation mode {self.mode!r}")


def server_features(bundle: ModelBundle, schedule: ArrivalSchedule, horizon: float, seed,
                    dt: Optional[float] = None) -> FeatureSeries:
    dt = bundle.dt if dt is None else dt
    lifetimes = sample_lifetimes(schedule, bundle.surrogate, seed)
    return schedule_features(schedule, lifetimes, dt, horizon, bundle.batch_size)


def power_from_probs(bundle: ModelBundle, probs, mode: Optional[str], traj_seed, power_seed, dt) -> PowerTrace:
    states = sample_trajectory(probs, traj_seed)
    return sample_power(states, bundle.catalog, mode or default_mode(bundle), power_seed, dt)


def generate_server_trace(req: GenerationRequest) -> PowerTrace:
    """Schedule -> (A, dA) features -> state probabilities -> sampled trajectory -> power."""
    dt = req.bundle.dt if req.dt is None else req.dt
    s_life, s_traj, s_power = stage_seeds(req.seed, req.server_index)
    feats = server_features(req.bundle, req.schedule, req.horizon, s_life, dt)
    probs = predict_state_probs(req.bundle.classifier, feats)
    return power_from_probs(req.bundle, probs, req.mode, s_traj, s_power, dt)
