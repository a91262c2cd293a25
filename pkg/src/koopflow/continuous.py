"""Continuous-time view of a trained model: the generator D with exp(D) = K,
arbitrary-time prediction, trajectory upsampling, and the latent
linear-interpolation baseline.

One unit of latent time corresponds to source_dt seconds (the sampling period
the model was trained on), so the latent state t seconds ahead of phi(x0) is
exp((t/source_dt) * D) phi(x0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numlin
from .errors import IllConditioned, NonFinite
from .koopman import KoopmanModel, decode, encode
from .systems import Trajectory

GENERATOR_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class ContinuousOperator:
    """Real generator D of the latent flow, with extraction diagnostics."""

    D: np.ndarray
    source_dt: float
    k_eigenvalues: np.ndarray  # complex spectrum of the source K
    roundtrip_residual: float  # ||exp(D) - K||_F / ||K||_F

    @property
    def dim(self) -> int:
        return self.D.shape[0]


def extract_generator(model: KoopmanModel, source_dt: float) -> ContinuousOperator:
    """D = principal log of K through its eigenbasis; fails loudly on the
    negative-real-axis / ill-conditioned cases rather than projecting."""
    if not source_dt > 0:
        raise ValueError("source_dt must be positive")
    decomp = numlin.eig(model.K)
    d = numlin.principal_log(decomp)
    k_norm = float(np.linalg.norm(model.K))
    residual = float(np.linalg.norm(numlin.matrix_exp(d) - model.K))
    residual = residual / k_norm if k_norm > 0 else residual
    if residual > GENERATOR_RESIDUAL_TOL:
        raise IllConditioned(
            f"generator round-trip residual {residual:.3e} exceeds {GENERATOR_RESIDUAL_TOL:.0e}"
        )
    return ContinuousOperator(
        D=d,
        source_dt=float(source_dt),
        k_eigenvalues=decomp.eigenvalues.copy(),
        roundtrip_residual=residual,
    )


@dataclass(frozen=True)
class ContinuousPrediction:
    times: np.ndarray  # seconds relative to the initial state
    states: np.ndarray  # (len(times), n)
    negative_time: bool  # True when any queried time runs the flow backward


def latent_propagator(gen: ContinuousOperator, t: float) -> np.ndarray:
    """exp((t / source_dt) * D)."""
    return numlin.matrix_exp(gen.D, t / gen.source_dt)


def predict_continuous(model: KoopmanModel, gen: ContinuousOperator, x0, times) -> ContinuousPrediction:
    """States at arbitrary (possibly fractional or negative) time offsets from x0."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if not np.isfinite(times).all():
        raise ValueError("query times must be finite")
    z0 = encode(model, np.asarray(x0, dtype=float))
    latents = np.empty((times.size, model.d))
    for i, t in enumerate(times):
        latents[i] = z0 @ latent_propagator(gen, t).T
    if not np.isfinite(latents).all():
        raise NonFinite("latent flow left the float range")
    return ContinuousPrediction(
        times=times, states=decode(model, latents), negative_time=bool((times < 0).any())
    )


def _grid_count(span: float, step: float) -> int:
    """Number of steps covering [0, span]; snaps to the integer when step
    divides span up to rounding noise, otherwise stays inside the span."""
    ratio = span / step
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-6 * max(1.0, abs(ratio)):
        return int(nearest)
    return int(np.floor(ratio))


def upsample_forecast(
    model: KoopmanModel, gen: ContinuousOperator, traj_lf: Trajectory, target_dt: float
) -> Trajectory:
    """Forecast the LF trajectory's time span on a target_dt grid, using only
    its first sample (pure forecast; later LF samples are never read)."""
    if not target_dt > 0:
        raise ValueError("target_dt must be positive")
    span = (traj_lf.n_samples - 1) * traj_lf.dt
    k_max = _grid_count(span, target_dt)
    times = np.arange(k_max + 1) * target_dt
    pred = predict_continuous(model, gen, traj_lf.states[0], times)
    return Trajectory(t0=traj_lf.t0, dt=target_dt, states=pred.states)


def latent_rollout(model: KoopmanModel, x0, n_steps: int) -> np.ndarray:
    """z_k = K^k phi(x0) for k = 0..n_steps, by iterated multiplication."""
    z = np.empty((n_steps + 1, model.d))
    z[0] = encode(model, np.asarray(x0, dtype=float))
    for k in range(n_steps):
        z[k + 1] = z[k] @ model.K.T
    if not np.isfinite(z).all():
        raise NonFinite(f"latent rollout over {n_steps} steps left the float range")
    return z


def latent_linear_interp(model: KoopmanModel, traj_lf: Trajectory, target_dt: float) -> Trajectory:
    """Baseline for discrete-only models: roll out latents on the LF grid
    (z_k = K^k phi(x0), predictions, not encoded LF samples), linearly
    interpolate z between consecutive grid points, and decode.

    Grid points reproduce the decoded LF rollout exactly.
    """
    if not target_dt > 0:
        raise ValueError("target_dt must be positive")
    z = latent_rollout(model, traj_lf.states[0], traj_lf.n_samples - 1)
    span = (traj_lf.n_samples - 1) * traj_lf.dt
    k_max = _grid_count(span, target_dt)
    latents = np.empty((k_max + 1, model.d))
    for j in range(k_max + 1):
        p = (j * target_dt) / traj_lf.dt
        k = int(np.floor(p))
        k = min(max(k, 0), traj_lf.n_samples - 1)
        w = p - k
        if w <= 1e-9:
            latents[j] = z[k]
        elif w >= 1.0 - 1e-9 and k + 1 < traj_lf.n_samples:
            latents[j] = z[k + 1]
        else:
            latents[j] = (1.0 - w) * z[k] + w * z[min(k + 1, traj_lf.n_samples - 1)]
    return Trajectory(t0=traj_lf.t0, dt=target_dt, states=decode(model, latents))


# ---------------------------------------------------------------------------
# Generator sidecar: cached next to the checkpoint so every consumer uses the
# identical D.


def save_generator(gen: ContinuousOperator, path) -> None:
    doc = {
        "format_version": 1,
        "source_dt": gen.source_dt,
        "roundtrip_residual": gen.roundtrip_residual,
        "D": [[float(v) for v in row] for row in gen.D],
        "k_eigenvalues": [[lam.real, lam.imag] for lam in gen.k_eigenvalues],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_generator(path) -> ContinuousOperator:
    doc = json.loads(Path(path).read_text())
    eig_pairs = np.array(doc["k_eigenvalues"], dtype=float)
    return ContinuousOperator(
        D=np.array(doc["D"], dtype=float),
        source_dt=float(doc["source_dt"]),
        k_eigenvalues=eig_pairs[:, 0] + 1j * eig_pairs[:, 1],
        roundtrip_residual=float(doc["roundtrip_residual"]),
    )
