"""Benchmark ODE systems, RK4 integration, and dataset generation/persistence.

Three systems: the simple pendulum (theta'' = -sin theta), the mean-field
fluid-flow attractor model, and Lorenz-63. Datasets are directories of CSV
trajectories plus a meta.json; generation is deterministic per (seed, split,
index) so parallel and serial runs produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FactorTooLarge, NonFinite
from .util import fmt_float, ordered_map

FORMAT_VERSION = 1

# Lorenz-63 parameters.
LORENZ_SIGMA = 10.0
LORENZ_R = 28.0
LORENZ_B = 8.0 / 3.0

# Mean-field fluid-flow model parameters (canonical benchmark values).
FLUID_MU = 0.1
FLUID_OMEGA = 1.0
FLUID_A = -0.1
FLUID_LAMBDA = 10.0

SPLIT_NAMES = ("train", "val", "test")


def lorenz_rhs(state, sigma: float = LORENZ_SIGMA, r: float = LORENZ_R, b: float = LORENZ_B):
    """(sigma(y-x), x(r-z)-y, xy-bz)."""
    x, y, z = state
    return np.array([sigma * (y - x), x * (r - z) - y, x * y - b * z])


def lorenz_jacobian(state, sigma: float = LORENZ_SIGMA, r: float = LORENZ_R, b: float = LORENZ_B):
    x, y, z = state
    return np.array([[-sigma, sigma, 0.0], [r - z, -1.0, -x], [y, x, -b]])


def pendulum_rhs(state):
    """(thetadot, -sin theta): unit gravity and length."""
    theta, thetadot = state
    return np.array([thetadot, -np.sin(theta)])


def fluidflow_rhs(
    state,
    mu: float = FLUID_MU,
    omega: float = FLUID_OMEGA,
    a: float = FLUID_A,
    lam: float = FLUID_LAMBDA,
):
    """Mean-field model: slow manifold z = x^2 + y^2 with spiral (x, y) dynamics."""
    x, y, z = state
    return np.array(
        [
            mu * x - omega * y + a * x * z,
            omega * x + mu * y + a * y * z,
            -lam * (z - x * x - y * y),
        ]
    )


@dataclass(frozen=True)
class OdeSystem:
    """An ODE with an observation map: rhs drives the internal state, obs_map
    produces the rows stored in trajectories."""

    name: str
    state_dim: int
    obs_dim: int
    rhs: Callable[[np.ndarray], np.ndarray]
    obs_map: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    init_low: np.ndarray = None
    init_high: np.ndarray = None

    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.init_low, self.init_high)


def _lorenz_obs(state):
    # Observations are the 3 variables plus their analytic derivatives
    # (computed, never finite-differenced).
    return np.concatenate([state, lorenz_rhs(state)])


def get_system(name: str) -> OdeSystem:
    if name == "pendulum":
        # Initial angle in a wide range below the separatrix, zero initial speed
        # (the degenerate [0, 0] bound draws exactly 0.0).
        return OdeSystem(
            name="pendulum",
            state_dim=2,
            obs_dim=2,
            rhs=pendulum_rhs,
            obs_map=lambda s: np.asarray(s, dtype=float).copy(),
            params={"gravity_over_length": 1.0, "theta0_range": [-3.0, 3.0]},
            init_low=np.array([-3.0, 0.0]),
            init_high=np.array([3.0, 0.0]),
        )
    if name == "fluidflow":
        return OdeSystem(
            name="fluidflow",
            state_dim=3,
            obs_dim=3,
            rhs=fluidflow_rhs,
            obs_map=lambda s: np.asarray(s, dtype=float).copy(),
            params={"mu": FLUID_MU, "omega": FLUID_OMEGA, "A": FLUID_A, "lambda": FLUID_LAMBDA},
            init_low=np.array([-1.1, -1.1, 0.0]),
            init_high=np.array([1.1, 1.1, 2.4]),
        )
    if name == "lorenz63":
        return OdeSystem(
            name="lorenz63",
            state_dim=3,
            obs_dim=6,
            rhs=lorenz_rhs,
            obs_map=_lorenz_obs,
            params={"sigma": LORENZ_SIGMA, "r": LORENZ_R, "b": LORENZ_B},
            init_low=np.array([-20.0, -20.0, 0.0]),
            init_high=np.array([20.0, 20.0, 40.0]),
        )
    raise ValueError(f"unknown system {name!r} (expected pendulum, fluidflow, lorenz63)")


@dataclass(frozen=True)
class Trajectory:
    """One regularly sampled solution: row k holds the observation at t0 + k*dt."""

    t0: float
    dt: float
    states: np.ndarray  # (T, n)
    initial_condition: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) * self.dt

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise ValueError("trajectory needs a (T, n) state matrix with T >= 2")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.isfinite(self.states).all():
            raise NonFinite("trajectory contains non-finite states")


@dataclass
class Dataset:
    system: str
    splits: dict  # split name -> list[Trajectory]
    meta: dict

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    def split(self, name: str):
        return self.splits[name]


def rk4_step(rhs, state: np.ndarray, dt: float) -> np.ndarray:
    """One classical 4th-order Runge-Kutta step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise NonFinite("integration step produced non-finite state (blow-up or dt too large)")
    return out


def simulate(
    system: OdeSystem,
    x0: np.ndarray,
    dt_sample: float,
    steps: int,
    substeps: int = 10,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate from x0 and record steps+1 observations dt_sample apart.

    The integrator step is dt_sample/substeps, so running with substeps s is
    arithmetically identical to sampling every step at dt_sample/s.
    """
    if not dt_sample > 0:
        raise ValueError("dt_sample must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    h = dt_sample / substeps
    state = x0.copy()
    rows = np.empty((steps + 1, system.obs_dim))
    rows[0] = system.obs_map(state)
    for k in range(steps):
        for _ in range(substeps):
            state = rk4_step(system.rhs, state, h)
        rows[k + 1] = system.obs_map(state)
    return Trajectory(t0=t0, dt=dt_sample, states=rows, initial_condition=x0)


@dataclass(frozen=True)
class GenerateConfig:
    system: str
    dt: float
    counts: tuple  # (train, val, test)
    seed: int
    duration: float | None = None  # T = round(duration/dt) + 1
    n_samples: int | None = None  # T given directly; exactly one of the two is set
    substeps: int = 10
    max_retries: int = 10

    def samples_per_trajectory(self) -> int:
        if (self.duration is None) == (self.n_samples is None):
            raise ValueError("exactly one of duration and n_samples must be set")
        if self.n_samples is not None:
            t = int(self.n_samples)
        else:
            t = int(round(self.duration / self.dt)) + 1
        if t < 2:
            raise ValueError("trajectories need at least 2 samples")
        return t


def _trajectory_rng(seed: int, split_idx: int, traj_idx: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, split_idx, traj_idx, attempt)))


def generate_dataset(config: GenerateConfig) -> Dataset:
    """Draw per-system initial conditions and integrate each trajectory.

    Each trajectory's rng stream is derived from (seed, split, index, attempt),
    so generation is reproducible and order-independent. A trajectory that
    blows up is redrawn with a fresh attempt stream, up to max_retries.
    """
    system = get_system(config.system)
    t = config.samples_per_trajectory()
    steps = t - 1

    def make_traj(task):
        split_idx, traj_idx = task
        last_err = None
        for attempt in range(config.max_retries):
            rng = _trajectory_rng(config.seed, split_idx, traj_idx, attempt)
            x0 = system.sample_initial(rng)
            try:
                return simulate(system, x0, config.dt, steps, substeps=config.substeps)
            except NonFinite as exc:
                last_err = exc
        raise NonFinite(
            f"trajectory ({SPLIT_NAMES[split_idx]}, {traj_idx}) failed after "
            f"{config.max_retries} attempts: {last_err}"
        )

    splits = {}
    for split_idx, split in enumerate(SPLIT_NAMES):
        count = int(config.counts[split_idx])
        tasks = [(split_idx, i) for i in range(count)]
        splits[split] = ordered_map(make_traj, tasks)

    meta = {
        "format_version": FORMAT_VERSION,
        "system": config.system,
        "dt": config.dt,
        "duration": config.duration,
        "n_samples": t,
        "counts": {name: int(config.counts[i]) for i, name in enumerate(SPLIT_NAMES)},
        "seed": int(config.seed),
        "substeps": int(config.substeps),
        "params": system.params,
    }
    return Dataset(system=config.system, splits=splits, meta=meta)


def subsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep rows 0, factor, 2*factor, ...; dt scales by factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return traj
    kept = traj.states[::factor]
    if kept.shape[0] < 2:
        raise FactorTooLarge(
            f"factor {factor} leaves {kept.shape[0]} of {traj.n_samples} samples"
        )
    return Trajectory(
        t0=traj.t0,
        dt=traj.dt * factor,
        states=kept.copy(),
        initial_condition=traj.initial_condition,
    )


def subsample_dataset(dataset: Dataset, factor: int) -> Dataset:
    splits = {name: [subsample(tr, factor) for tr in trs] for name, trs in dataset.splits.items()}
    meta = dict(dataset.meta)
    meta["dt"] = dataset.meta["dt"] * factor
    meta["n_samples"] = next((trs[0].n_samples for trs in splits.values() if trs), None)
    meta["subsampled_from_dt"] = dataset.meta["dt"]
    meta["subsample_factor"] = int(factor)
    return Dataset(system=dataset.system, splits=splits, meta=meta)


# ---------------------------------------------------------------------------
# Disk format: <dir>/meta.json + train/ val/ test/ with traj_%04d.csv files,
# header "t,x1,...,xn", 17-significant-digit floats.


def save_trajectory_csv(traj: Trajectory, path: Path) -> None:
    n = traj.obs_dim
    header = "t," + ",".join(f"x{i + 1}" for i in range(n))
    lines = [header]
    times = traj.times()
    for k in range(traj.n_samples):
        cells = [fmt_float(times[k])] + [fmt_float(v) for v in traj.states[k]]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def load_trajectory_csv(path: Path, dt: float | None = None) -> Trajectory:
    lines = path.read_text().strip().split("\n")
    if not lines or not lines[0].startswith("t,"):
        raise ValueError(f"{path}: not a trajectory CSV (missing 't,...' header)")
    rows = [[float(c) for c in line.split(",")] for line in lines[1:]]
    data = np.array(rows)
    times, states = data[:, 0], data[:, 1:]
    if dt is None:
        dt = float(times[1] - times[0])
    return Trajectory(t0=float(times[0]), dt=dt, states=states)


def save_dataset(dataset: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = out_dir / "meta.json"
    meta_path.write_text(json.dumps(dataset.meta, indent=2, sort_keys=True) + "\n")
    for split, trajs in dataset.splits.items():
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        for i, traj in enumerate(trajs):
            save_trajectory_csv(traj, split_dir / f"traj_{i:04d}.csv")


def load_dataset(dir_path: Path) -> Dataset:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "meta.json").read_text())
    dt = float(meta["dt"])
    splits = {}
    for split in SPLIT_NAMES:
        split_dir = dir_path / split
        trajs = []
        if split_dir.is_dir():
            for csv_path in sorted(split_dir.glob("traj_*.csv")):
                trajs.append(load_trajectory_csv(csv_path, dt=dt))
        splits[split] = trajs
    return Dataset(system=meta["system"], splits=splits, meta=meta)
