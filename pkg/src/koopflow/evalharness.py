"""Quantitative evaluation: trajectory MSE, per-timestep error curves,
K-spectrum inspection, and Benettin Lyapunov-exponent estimation.

The MSE protocol: forecast every test trajectory from its first sample over
its full span, then average squared errors over all trajectories, timesteps,
and components. Per-timestep curves are emitted for inspection only, never
thresholded (the error pattern need not grow with time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numlin
from .continuous import ContinuousOperator, latent_linear_interp, latent_propagator, upsample_forecast
from .errors import GridMismatch, KoopflowError
from .koopman import KoopmanModel, decode, encode
from .systems import Dataset, Trajectory, rk4_step
from .util import fmt_float, ordered_map

REPORT_VERSION = 1


def mse(predicted: Trajectory, truth: Trajectory):
    """(aggregate, per-timestep curve): mean squared error over timesteps and
    components, and the per-timestep mean over components."""
    if predicted.states.shape != truth.states.shape:
        raise GridMismatch(
            f"shape {predicted.states.shape} vs {truth.states.shape}"
        )
    if abs(predicted.dt - truth.dt) > 1e-9 * max(truth.dt, 1e-30):
        raise GridMismatch(f"dt {predicted.dt} vs {truth.dt}")
    if abs(predicted.t0 - truth.t0) > 1e-9 * max(1.0, abs(truth.t0)):
        raise GridMismatch(f"t0 {predicted.t0} vs {truth.t0}")
    sq = (predicted.states - truth.states) ** 2
    curve = sq.mean(axis=1)
    return float(sq.mean()), curve


def k_spectrum(model: KoopmanModel):
    """Eigenvalues of K as (modulus, argument) pairs sorted by argument."""
    lam = numlin.eig(model.K).eigenvalues
    pairs = sorted(((abs(v), float(np.angle(v))) for v in lam), key=lambda p: (p[1], p[0]))
    return [(float(m), a) for m, a in pairs]


@dataclass
class EvalReport:
    method: str
    eval_dt: float
    model_id: str = ""
    dataset_id: str = ""
    per_trajectory: list = field(default_factory=list)  # {"index", "mse"} or {"index", "error"}
    aggregate_mse: float | None = None
    curve_times: list = field(default_factory=list)
    curve: list = field(default_factory=list)  # mean curve over evaluated trajectories
    traj_curves: list = field(default_factory=list)  # [(index, times, values)]
    k_eigenvalues: list = field(default_factory=list)  # (modulus, argument)
    lyapunov: list | None = None

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "method": self.method,
            "eval_dt": self.eval_dt,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "aggregate_mse": self.aggregate_mse,
            "per_trajectory": self.per_trajectory,
            "curve_times": list(map(float, self.curve_times)),
            "curve": list(map(float, self.curve)),
            "k_eigenvalues": [[float(m), float(a)] for m, a in self.k_eigenvalues],
            "lyapunov": None if self.lyapunov is None else list(map(float, self.lyapunov)),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            method=doc["method"],
            eval_dt=doc["eval_dt"],
            model_id=doc["model_id"],
            dataset_id=doc["dataset_id"],
            per_trajectory=doc["per_trajectory"],
            aggregate_mse=doc["aggregate_mse"],
            curve_times=doc["curve_times"],
            curve=doc["curve"],
            k_eigenvalues=[tuple(p) for p in doc["k_eigenvalues"]],
            lyapunov=doc["lyapunov"],
        )


def _integer_ratio(num: float, den: float, what: str) -> int:
    ratio = num / den
    nearest = round(ratio)
    if nearest < 1 or abs(ratio - nearest) > 1e-9 * max(1.0, abs(ratio)):
        raise GridMismatch(f"{what}: {num} is not an integer multiple of {den}")
    return int(nearest)


def _forecast(model, gen, source_dt, truth: Trajectory, method: str, eval_dt: float) -> Trajectory:
    if method == "continuous":
        if gen is None:
            raise ValueError("continuous method needs a ContinuousOperator")
        return upsample_forecast(model, gen, truth, eval_dt)
    if method == "latent-interp":
        lf_steps = _integer_ratio(source_dt, truth.dt, "model dt over truth grid")
        traj_lf = Trajectory(t0=truth.t0, dt=source_dt,
                             states=truth.states[:: lf_steps].copy()) if lf_steps > 1 else truth
        return latent_linear_interp(model, traj_lf, eval_dt)
    if method == "discrete":
        per = _integer_ratio(eval_dt, source_dt, "eval dt over model dt")
        n_out = truth.n_samples
        k_step = np.linalg.matrix_power(model.K, per)
        z = encode(model, truth.states[0])
        latents = np.empty((n_out, model.d))
        latents[0] = z
        for k in range(1, n_out):
            z = z @ k_step.T
            latents[k] = z
        return Trajectory(t0=truth.t0, dt=eval_dt, states=decode(model, latents))
    raise ValueError(f"unknown method {method!r}")


def evaluate_model(
    model: KoopmanModel,
    gen: ContinuousOperator | None,
    dataset: Dataset,
    method: str,
    eval_dt: float,
    source_dt: float | None = None,
    model_id: str = "",
    dataset_id: str = "",
) -> EvalReport:
    """Forecast every test trajectory from its first sample by the chosen
    method and aggregate MSE over all points. Per-trajectory failures are
    recorded without aborting the batch; aggregate is None when nothing
    evaluated."""
    if source_dt is None:
        if gen is None:
            raise ValueError("need source_dt when no generator is given")
        source_dt = gen.source_dt
    test = dataset.split("test")
    report = EvalReport(method=method, eval_dt=float(eval_dt),
                        model_id=model_id, dataset_id=dataset_id)
    report.k_eigenvalues = k_spectrum(model)

    factor = _integer_ratio(eval_dt, dataset.dt, "eval dt over dataset grid")

    def run_one(item):
        index, truth = item
        grid = truth if factor == 1 else Trajectory(
            t0=truth.t0, dt=truth.dt * factor, states=truth.states[::factor].copy()
        )
        try:
            pred = _forecast(model, gen, source_dt, grid, method, eval_dt)
            value, curve = mse(pred, grid)
            return index, value, grid.times(), curve, None
        except KoopflowError as exc:
            return index, None, None, None, f"{type(exc).__name__}: {exc}"

    results = ordered_map(run_one, list(enumerate(test)))
    curves = []
    for index, value, times, curve, err in results:
        if err is not None:
            report.per_trajectory.append({"index": index, "error": err})
            continue
        report.per_trajectory.append({"index": index, "mse": value})
        report.traj_curves.append((index, times, curve))
        curves.append(curve)
    if curves:
        stacked = np.stack(curves)
        report.curve = list(map(float, stacked.mean(axis=0)))
        report.curve_times = list(map(float, report.traj_curves[0][1]))
        report.aggregate_mse = float(stacked.mean())
    return report


# ---------------------------------------------------------------------------
# Lyapunov spectrum, Benettin style: evolve an orthonormal tangent frame,
# re-orthonormalize by QR every few steps, accumulate log stretching factors.


@dataclass(frozen=True)
class LyapunovConfig:
    steps: int = 100_000
    discard: int = 10_000  # leading steps excluded from accumulation
    interval: int = 10  # renormalize every this many steps
    dt: float = 0.01
    substeps: int = 1  # integrator substeps per dt (ODE flows)
    jacobian_step: float = 1e-5  # finite-difference step (map flows)

    def __post_init__(self):
        if not (0 <= self.discard < self.steps):
            raise ValueError("need 0 <= discard < steps")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


@dataclass(frozen=True)
class OdeFlow:
    """Differentiable vector field with analytic Jacobian."""

    rhs: callable
    jacobian: callable
    dim: int


@dataclass(frozen=True)
class MapFlow:
    """Discrete-time flow map advancing config.dt per application; step_map
    must accept a (B, n) batch (finite-difference Jacobians are batched)."""

    step_map: callable
    dim: int


def learned_map_flow(model: KoopmanModel, gen: ContinuousOperator, dt: float) -> MapFlow:
    """One-step flow map of a trained model: x -> psi(exp((dt/source_dt) D) phi(x))."""
    propagator = latent_propagator(gen, dt)

    def step(x):
        return decode(model, encode(model, x) @ propagator.T)

    return MapFlow(step_map=step, dim=model.n)


def _fd_step_and_jacobian(step_map, x: np.ndarray, h: float):
    """(F(x), central-difference Jacobian of F at x) in one batched call."""
    n = x.size
    pts = np.repeat(x[None, :], 2 * n + 1, axis=0)
    for j in range(n):
        pts[j, j] += h
        pts[n + j, j] -= h
    out = step_map(pts)
    jac = (out[:n] - out[n : 2 * n]).T / (2.0 * h)
    return out[2 * n], jac


def lyapunov_spectrum(flow, x0, config: LyapunovConfig) -> np.ndarray:
    """Exponents sorted descending, in units of 1/time.

    ODE flows integrate the variational system dV/dt = J(x)V jointly with the
    state by RK4; map flows multiply finite-difference Jacobians of the
    one-step map. Frame degeneracy (a stretching factor underflowing to 0)
    raises rather than silently polluting the estimate.
    """
    n = flow.dim
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    v = np.eye(n)
    sums = np.zeros(n)

    if isinstance(flow, OdeFlow):
        def advance(xv):
            xx, vv = xv
            def rhs_aug(s):
                xs = s[:n]
                vs = s[n:].reshape(n, n)
                return np.concatenate([flow.rhs(xs), (flow.jacobian(xs) @ vs).ravel()])
            s = np.concatenate([xx, vv.ravel()])
            h = config.dt / config.substeps
            for _ in range(config.substeps):
                s = rk4_step(rhs_aug, s, h)
            return s[:n], s[n:].reshape(n, n)
    elif isinstance(flow, MapFlow):
        def advance(xv):
            xx, vv = xv
            x_next, j = _fd_step_and_jacobian(flow.step_map, xx, config.jacobian_step)
            return x_next, j @ vv
    else:
        raise TypeError(f"unsupported flow type {type(flow).__name__}")

    accumulated_time = 0.0
    block_start = 0
    for step in range(config.steps):
        x, v = advance((x, v))
        done = step + 1
        if done % config.interval == 0 or done == config.steps:
            q, r = np.linalg.qr(v)
            diag = np.abs(np.diag(r))
            if np.any(diag < 1e-300):
                raise KoopflowError("tangent frame degenerated (stretching factor ~ 0)")
            v = q
            # Only whole post-transient blocks accumulate.
            if block_start >= config.discard:
                sums += np.log(diag)
                accumulated_time += (done - block_start) * config.dt
            block_start = done
        if not np.isfinite(x).all():
            raise KoopflowError(f"reference trajectory left the float range at step {step}")
    if accumulated_time <= 0:
        raise ValueError("no post-transient accumulation; reduce discard")
    return np.sort(sums / accumulated_time)[::-1]


# ---------------------------------------------------------------------------
# Report emission.


def emit_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def read_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def emit_curves(report: EvalReport, out_dir) -> list:
    """One t,mse CSV per evaluated trajectory, plus the mean curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for index, times, values in report.traj_curves:
        path = out_dir / f"curve_{index:04d}.csv"
        _write_curve(path, times, values)
        written.append(path)
    if report.curve:
        path = out_dir / "curve_mean.csv"
        _write_curve(path, report.curve_times, report.curve)
        written.append(path)
    return written


def _write_curve(path: Path, times, values) -> None:
    lines = ["t,mse"]
    for t, v in zip(times, values):
        lines.append(f"{fmt_float(t)},{fmt_float(v)}")
    path.write_text("\n".join(lines) + "\n")
