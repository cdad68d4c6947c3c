"""
Plastokh - SVI Simulator
Projected Euler scheme for the elasto-plastic oscillator, Khasminskii cycles
and Monte Carlo estimators used as oracles for the PDE solvers
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.interpolate import RegularGridInterpolator

from errors import HorizonExceeded, InvalidTimeStep
from model_core import CycleLevels, ModelParams, State

logger = logging.getLogger(__name__)

THREADS_ENV = 'PLASTOKH_THREADS'
_NOISE_CHUNK = 65536


class McOptions(BaseModel):
    """Monte Carlo options; horizon bounds every single run to a level"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    dt: float = Field(default=0.01, gt=0)
    n_paths: int = Field(default=2000, ge=1)
    horizon: float = Field(default=200.0, ge=0)
    burn_in: float = Field(default=20.0, ge=0)
    seed: int = Field(default=20111001, ge=0, le=2 ** 64 - 1)
    batch_size: int = Field(default=4096, ge=1)
    noise_scale: float = Field(default=1.0, ge=0)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> 'McEstimate':
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        stderr = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(mean=float(np.mean(samples)), stderr=stderr, n=n)

    def agrees_with(self, value: float, budget: float = 0.0, k: float = 3.0) -> bool:
        return abs(self.mean - value) <= k * self.stderr + budget

    def to_dict(self) -> Dict[str, float]:
        return {'mean': self.mean, 'stderr': self.stderr, 'n': self.n}


@dataclass(frozen=True)
class CycleSample:
    start: State
    hit_inner: State
    hit_outer: State
    tau_bar: float
    tau_bar1: float
    integral: float


@dataclass
class CycleEnsemble:
    """Vectorized counterpart of CycleSample over n_paths cycles from one start"""
    start: State
    inner: np.ndarray      # (n, 3) states at tau_bar
    outer: np.ndarray      # (n, 3) states at tau_bar1
    tau_bar: np.ndarray
    tau_bar1: np.ndarray
    integral: np.ndarray


def check_time_step(opts: McOptions, p: ModelParams) -> None:
    limit = 0.1 / max(p.alpha, p.c0, 1.0)
    if opts.dt > limit:
        raise InvalidTimeStep(f"dt = {opts.dt:g} exceeds stability guard 0.1/max(alpha, c0, 1) = {limit:g}")


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for (seed, index), hashed by SeedSequence"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _advance(x, y, z, p: ModelParams, dt: float, g1, g2):
    x_new = np.clip(x - p.alpha * x * dt + g1, -p.L, p.L)
    y_new = y - (p.beta * x + p.c0 * y + p.k * z) * dt + g2
    z_new = np.clip(z + y * dt, -p.Y, p.Y)
    return x_new, y_new, z_new


def step(s: State, p: ModelParams, dt: float, noise: Tuple[float, float]) -> State:
    """One projected Euler step; noise is already scaled by sqrt(dt)"""
    x, y, z = _advance(s.x, s.y, s.z, p, dt, noise[0], noise[1])
    return State(float(x), float(y), float(z), s.t + dt)


def simulate_path(s0: State, p: ModelParams, opts: McOptions,
                  observer: Optional[Callable[[State], None]] = None) -> State:
    """
    Iterate step for horizon/dt steps from s0

    Args:
        s0: Admissible start state
        p: Model parameters
        opts: Monte Carlo options (dt, horizon, seed)
        observer: Called with every new state

    Returns:
        Final state
    """
    check_time_step(opts, p)
    n_steps = int(round(opts.horizon / opts.dt))
    rng = substream(opts.seed, 0)
    scale = np.sqrt(opts.dt) * opts.noise_scale

    x, y, z, t = s0.x, s0.y, s0.z, s0.t
    done = 0
    while done < n_steps:
        chunk = min(_NOISE_CHUNK, n_steps - done)
        noise = rng.standard_normal((chunk, 2)) * scale
        for g1, g2 in noise:
            x, y, z = _advance(x, y, z, p, opts.dt, g1, g2)
            t += opts.dt
            if observer is not None:
                observer(State(float(x), float(y), float(z), t))
        done += chunk
    return State(float(x), float(y), float(z), t)


def _max_steps(opts: McOptions) -> int:
    return int(np.floor(opts.horizon / opts.dt + 1e-9))


def _run_to_level(x: np.ndarray, y: np.ndarray, z: np.ndarray, level: float,
                  p: ModelParams, opts: McOptions, rng: np.random.Generator,
                  f: Optional[Callable] = None):
    """
    Advance every path until |y| crosses level

    Paths starting below the level move outward, paths above move inward.
    The crossing state is snapped to +-level; sums of f are left-point.

    Returns:
        (x, y, z, steps, fsum) arrays
    """
    x, y, z = x.astype(float).copy(), y.astype(float).copy(), z.astype(float).copy()
    n = x.size
    outward = np.abs(y) < level
    active = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=np.int64)
    fsum = np.zeros(n)
    scale = np.sqrt(opts.dt) * opts.noise_scale
    limit = _max_steps(opts)

    count = 0
    while active.any():
        if count >= limit:
            raise HorizonExceeded(level, opts.horizon)
        idx = np.flatnonzero(active)
        xa, ya, za = x[idx], y[idx], z[idx]
        if f is not None:
            fsum[idx] += f(xa, ya, za)
        g = rng.standard_normal((2, idx.size)) * scale
        xn, yn, zn = _advance(xa, ya, za, p, opts.dt, g[0], g[1])
        count += 1

        out = outward[idx]
        crossed = np.where(out, np.abs(yn) >= level, np.abs(yn) <= level)
        sign = np.where(out, np.sign(yn), np.sign(ya))
        yn = np.where(crossed, sign * level, yn)

        x[idx], y[idx], z[idx] = xn, yn, zn
        hit = idx[crossed]
        steps[hit] = count
        active[hit] = False

    return x, y, z, steps, fsum


def _worker_count(n_batches: int) -> int:
    env = os.environ.get(THREADS_ENV, '').strip()
    cap = int(env) if env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, n_batches))


def _map_batches(fn: Callable[[int, int], dict], opts: McOptions) -> List[dict]:
    """Run fn(batch_index, batch_size) over all batches, results in batch order"""
    sizes = []
    remaining = opts.n_paths
    while remaining > 0:
        sizes.append(min(opts.batch_size, remaining))
        remaining -= sizes[-1]

    jobs = list(enumerate(sizes))
    workers = _worker_count(len(jobs))
    if workers == 1:
        return [fn(b, size) for b, size in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def _concat(results: List[dict], key: str) -> np.ndarray:
    return np.concatenate([r[key] for r in results])


def hit_level(s0: State, level: float, p: ModelParams, opts: McOptions) -> Tuple[State, float]:
    """
    First crossing of |y| = level from s0

    Returns:
        (state snapped onto the level, elapsed time)
    """
    if abs(s0.y) == level:
        raise ValueError("start state already on the target level")
    check_time_step(opts, p)
    rng = substream(opts.seed, 0)
    x, y, z, steps, _ = _run_to_level(np.array([s0.x]), np.array([s0.y]), np.array([s0.z]),
                                      level, p, opts, rng)
    elapsed = float(steps[0] * opts.dt)
    return State(float(x[0]), float(y[0]), float(z[0]), s0.t + elapsed), elapsed


def _cycle_batch(s0: State, f: Optional[Callable], p: ModelParams, c: CycleLevels,
                 opts: McOptions, rng: np.random.Generator, size: int) -> dict:
    x = np.full(size, s0.x)
    y = np.full(size, s0.y)
    z = np.full(size, s0.z)
    xi, yi, zi, n_in, sum_in = _run_to_level(x, y, z, c.ybar, p, opts, rng, f)
    xo, yo, zo, n_out, sum_out = _run_to_level(xi, yi, zi, c.ybar1, p, opts, rng, f)
    return {
        'inner': np.column_stack([xi, yi, zi]),
        'outer': np.column_stack([xo, yo, zo]),
        'tau_bar': n_in * opts.dt,
        'tau_bar1': (n_in + n_out) * opts.dt,
        'integral': (sum_in + sum_out) * opts.dt,
    }


def sample_cycle(s0: State, f: Callable, p: ModelParams, c: CycleLevels, opts: McOptions) -> CycleSample:
    """One Khasminskii cycle Gamma1 -> Gamma -> Gamma1 with the integral of f"""
    if abs(s0.y) != c.ybar1:
        raise ValueError("cycle must start on |y| = ybar1")
    check_time_step(opts, p)
    out = _cycle_batch(s0, f, p, c, opts, substream(opts.seed, 0), 1)
    tau_bar = float(out['tau_bar'][0])
    tau_bar1 = float(out['tau_bar1'][0])
    xi, yi, zi = out['inner'][0]
    xo, yo, zo = out['outer'][0]
    return CycleSample(
        start=s0,
        hit_inner=State(float(xi), float(yi), float(zi), s0.t + tau_bar),
        hit_outer=State(float(xo), float(yo), float(zo), s0.t + tau_bar1),
        tau_bar=tau_bar,
        tau_bar1=tau_bar1,
        integral=float(out['integral'][0]),
    )


def cycle_ensemble(s0: State, f: Optional[Callable], p: ModelParams, c: CycleLevels,
                   opts: McOptions) -> CycleEnsemble:
    """n_paths independent cycles from s0"""
    if abs(s0.y) != c.ybar1:
        raise ValueError("cycle must start on |y| = ybar1")
    check_time_step(opts, p)
    results = _map_batches(
        lambda b, size: _cycle_batch(s0, f, p, c, opts, substream(opts.seed, b), size), opts)
    return CycleEnsemble(
        start=s0,
        inner=np.vstack([r['inner'] for r in results]),
        outer=np.vstack([r['outer'] for r in results]),
        tau_bar=_concat(results, 'tau_bar'),
        tau_bar1=_concat(results, 'tau_bar1'),
        integral=_concat(results, 'integral'),
    )


def surface_lookup(surface, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a SurfaceField at hit points (sheet chosen by sign of y)"""
    upper = RegularGridInterpolator((surface.xs, surface.zs), surface.upper, bounds_error=False, fill_value=None)
    lower = RegularGridInterpolator((surface.xs, surface.zs), surface.lower, bounds_error=False, fill_value=None)
    points = np.column_stack([x, z])
    return np.where(y > 0, upper(points), lower(points))


def mc_boundary_functionals(surfaces: Sequence, s0: State, p: ModelParams, c: CycleLevels,
                            opts: McOptions) -> List[McEstimate]:
    """
    Estimate E[phi(x, z) at the first hit of the level] for several surfaces on one set of paths

    All surfaces must live on the same level. A Gamma1 surface needs an
    interior start (|y| < ybar1); a Gamma surface needs an exterior start
    (|y| > ybar).
    """
    kinds = {phi.level.value for phi in surfaces}
    if len(kinds) != 1:
        raise ValueError("surfaces must share one level")
    kind = kinds.pop()
    level = c.ybar1 if kind == 'gamma1' else c.ybar
    if kind == 'gamma1' and not abs(s0.y) < c.ybar1:
        raise ValueError("start must satisfy |y| < ybar1")
    if kind == 'gamma' and not abs(s0.y) > c.ybar:
        raise ValueError("start must satisfy |y| > ybar")
    check_time_step(opts, p)

    def batch(b: int, size: int) -> dict:
        rng = substream(opts.seed, b)
        x, y, z, _, _ = _run_to_level(np.full(size, s0.x), np.full(size, s0.y), np.full(size, s0.z),
                                      level, p, opts, rng)
        return {f'values_{n}': surface_lookup(phi, x, y, z) for n, phi in enumerate(surfaces)}

    results = _map_batches(batch, opts)
    estimates = [McEstimate.from_samples(_concat(results, f'values_{n}')) for n in range(len(surfaces))]
    for estimate in estimates:
        logger.debug("boundary functional from %s: %.6f +- %.6f", s0.as_tuple(), estimate.mean, estimate.stderr)
    return estimates


def mc_boundary_functional(phi, s0: State, p: ModelParams, c: CycleLevels, opts: McOptions) -> McEstimate:
    """Estimate E[phi(x, z) at the first hit of phi's level] from s0"""
    return mc_boundary_functionals([phi], s0, p, c, opts)[0]


def mc_exit_integral(f: Callable, s0: State, level: float, p: ModelParams, opts: McOptions) -> McEstimate:
    """Estimate E[integral of f up to the first crossing of |y| = level]; f = 1 gives E[tau]"""
    if abs(s0.y) == level:
        raise ValueError("start state already on the target level")
    check_time_step(opts, p)

    def batch(b: int, size: int) -> dict:
        rng = substream(opts.seed, b)
        _, _, _, _, fsum = _run_to_level(np.full(size, s0.x), np.full(size, s0.y), np.full(size, s0.z),
                                         level, p, opts, rng, f)
        return {'values': fsum * opts.dt}

    return McEstimate.from_samples(_concat(_map_batches(batch, opts), 'values'))


def _longrun_steps(opts: McOptions) -> Tuple[int, int]:
    """(total steps, burn-in steps); at least one step must be averaged after rounding to dt"""
    n_total = int(round(opts.horizon / opts.dt))
    n_burn = int(round(opts.burn_in / opts.dt))
    if n_total <= n_burn:
        raise ValueError(f"burn_in = {opts.burn_in} leaves no averaging steps before horizon = {opts.horizon} "
                         f"at dt = {opts.dt}")
    return n_total, n_burn


def _longrun_batch(f: Callable, s0: State, p: ModelParams, opts: McOptions,
                   rng: np.random.Generator, size: int, visit: Optional[Callable] = None) -> dict:
    n_total, n_burn = _longrun_steps(opts)
    scale = np.sqrt(opts.dt) * opts.noise_scale
    x = np.full(size, s0.x, dtype=float)
    y = np.full(size, s0.y, dtype=float)
    z = np.full(size, s0.z, dtype=float)
    acc = np.zeros(size)
    for n in range(n_total):
        if n >= n_burn:
            if f is not None:
                acc += f(x, y, z)
            if visit is not None:
                visit(x, y, z)
        g = rng.standard_normal((2, size)) * scale
        x, y, z = _advance(x, y, z, p, opts.dt, g[0], g[1])
    return {'values': acc / (n_total - n_burn)}


def mc_longrun_average(f: Callable, p: ModelParams, opts: McOptions,
                       s0: Optional[State] = None) -> McEstimate:
    """Time average of f over [burn_in, horizon], one replica per path"""
    _longrun_steps(opts)
    check_time_step(opts, p)
    s0 = s0 or State(0.0, 0.0, 0.0)
    results = _map_batches(lambda b, size: _longrun_batch(f, s0, p, opts, substream(opts.seed, b), size), opts)
    return McEstimate.from_samples(_concat(results, 'values'))


def mc_occupation(grid, p: ModelParams, opts: McOptions, s0: Optional[State] = None) -> np.ndarray:
    """
    Long-run occupation frequencies binned to the nearest grid node

    Plastic states (z = +-Y with matching sign of y) land on their face node.
    States beyond the truncation are binned at |y| = y_max.

    Returns:
        (nx, ny, nz) array of frequencies summing to 1
    """
    _longrun_steps(opts)
    check_time_step(opts, p)
    s0 = s0 or State(0.0, 0.0, 0.0)
    shape = (grid.xs.size, grid.ys.size, grid.zs.size)
    x_mid = 0.5 * (grid.xs[1:] + grid.xs[:-1])
    y_mid = 0.5 * (grid.ys[1:] + grid.ys[:-1])
    z_mid = 0.5 * (grid.zs[1:] + grid.zs[:-1])

    def batch(b: int, size: int) -> dict:
        counts = np.zeros(int(np.prod(shape)))

        def visit(x, y, z):
            i = np.searchsorted(x_mid, x)
            j = np.searchsorted(y_mid, y)
            k = np.searchsorted(z_mid, z)
            counts[:] += np.bincount(np.ravel_multi_index((i, j, k), shape), minlength=counts.size)

        _longrun_batch(None, s0, p, opts, substream(opts.seed, b), size, visit)
        return {'counts': counts}

    results = _map_batches(batch, opts)
    total = np.zeros(int(np.prod(shape)))
    for r in results:
        total += r['counts']
    return (total / total.sum()).reshape(shape)


def cycle_chain(start: State, n_cycles: int, burn_cycles: int, p: ModelParams, c: CycleLevels,
                opts: McOptions) -> np.ndarray:
    """
    Run n_paths copies of the embedded chain on Gamma1

    Returns:
        (n_paths * (n_cycles - burn_cycles), 3) array of post-burn-in outer hits
    """
    if abs(start.y) != c.ybar1:
        raise ValueError("chain must start on |y| = ybar1")
    if not 0 <= burn_cycles < n_cycles:
        raise ValueError("need 0 <= burn_cycles < n_cycles")
    check_time_step(opts, p)

    def batch(b: int, size: int) -> dict:
        rng = substream(opts.seed, b)
        x = np.full(size, start.x)
        y = np.full(size, start.y)
        z = np.full(size, start.z)
        hits = []
        for cycle in range(n_cycles):
            x, y, z, _, _ = _run_to_level(x, y, z, c.ybar, p, opts, rng)
            x, y, z, _, _ = _run_to_level(x, y, z, c.ybar1, p, opts, rng)
            if cycle >= burn_cycles:
                hits.append(np.column_stack([x, y, z]))
        return {'hits': np.vstack(hits)}

    return np.vstack([r['hits'] for r in _map_batches(batch, opts)])


def main():
    """Example usage"""
    p = ModelParams(alpha=1.0, beta=0.2, c0=1.0, k=1.0, Y=1.0, L=1.0)
    c = CycleLevels(ybar=0.5, ybar1=1.0)
    opts = McOptions(dt=0.01, n_paths=500, horizon=100.0, seed=7)
    sample = sample_cycle(State(0.0, 1.0, 0.0), lambda x, y, z: np.ones_like(x), p, c, opts)
    print(f"cycle duration: {sample.tau_bar1:.3f} (inner hit after {sample.tau_bar:.3f})")
    est = mc_exit_integral(lambda x, y, z: np.ones_like(x), State(0.0, 0.0, 0.0), c.ybar1, p, opts)
    print(f"E[tau_bar1] from origin: {est.mean:.4f} +- {est.stderr:.4f}")


if __name__ == "__main__":
    main()
