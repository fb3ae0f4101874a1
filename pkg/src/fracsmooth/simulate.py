"""Euler path generation, first-variation flows, and Markov restarts.

The explicit Euler scheme with left-point coefficients is used throughout:

    X_{j+1} = X_j + sigma(t_j, X_j) dB_j + b(t_j, X_j) dt_j.

Every path draws its Brownian increments from its own counter-based stream
(key = (seed, path id)), so a batch is bitwise reproducible for a given
(seed, grid, n_paths) no matter how path blocks are scheduled, and a prefix
of paths is unchanged when n_paths grows.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _rng

_BLOCK = 4096


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGridSpec:
    """Time grid recipe on [start, T].

    kinds:
      uniform    n_steps equal intervals
      geometric  distances to T shrink geometrically from T-start down to eps,
                 then one final step onto T (n_steps+1 intervals total)
      adapted    tau_i = start + (T-start) * (1 - (1 - i/n)**(1/theta));
                 theta = 1 reduces to uniform, theta < 1 piles points near T
      explicit   user-provided points
    """

    kind: str = "uniform"
    n_steps: int = 64
    eps: float = 1e-3
    theta: float = 1.0
    points: Optional[tuple] = None

    def times(self, horizon, start=0.0):
        T, n = float(horizon), int(self.n_steps)
        if self.kind == "explicit":
            ts = np.asarray(self.points, dtype=float)
        elif self.kind == "uniform":
            ts = np.linspace(start, T, n + 1)
        elif self.kind == "geometric":
            span = T - start
            if not 0.0 < self.eps < span:
                raise ValueError("geometric grid needs 0 < eps < T - start")
            rho = (self.eps / span) ** (1.0 / n)
            ts = T - span * rho ** np.arange(n + 1)
            ts = np.append(ts, T)
        elif self.kind == "adapted":
            if not 0.0 < self.theta <= 1.0:
                raise ValueError("adapted grid needs theta in (0, 1]")
            frac = np.arange(n + 1) / n
            ts = start + (T - start) * (1.0 - (1.0 - frac) ** (1.0 / self.theta))
            ts[-1] = T
        else:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        return ts


def adapted_times(n, theta, horizon):
    return TimeGridSpec(kind="adapted", n_steps=n, theta=theta).times(horizon)


@dataclass
class PathBatch:
    times: np.ndarray        # (m+1,)
    states: np.ndarray       # (n_paths, m+1, d)
    increments: np.ndarray   # (n_paths, m, d)
    seed: int
    stream_idents: np.ndarray  # per-path (class, ident) provenance, (n_paths, 2)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def n_steps(self):
        return self.increments.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def terminal(self):
        return self.states[:, -1, :]

    def time_index(self, t, tol=1e-12):
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not a grid point")
        return j


@dataclass
class FlowBatch:
    """First-variation matrices dX_t/dx0 and their inverses along each path.

    The inverse is integrated from its own linear SDE (with the sum of squared
    sigma-gradients correcting the drift), not by matrix inversion, so
    flow @ inv_flow == I only up to the Euler step error.
    """

    flow: np.ndarray      # (n_paths, m+1, d, d)
    inv_flow: np.ndarray  # (n_paths, m+1, d, d)

    def identity_defect(self):
        prod = np.einsum("pmij,pmjk->pmik", self.flow, self.inv_flow)
        eye = np.eye(prod.shape[-1])
        return np.max(np.abs(prod - eye))


def _check_finite(states, offset=0):
    if np.all(np.isfinite(states)):
        return
    bad = np.argwhere(~np.isfinite(states))
    p, j = int(bad[0, 0]), int(bad[0, 1])
    raise SimulationError(
        f"non-finite state on path {p + offset} at step {j}")


def _euler_block(model, times, x0s, increments, out=None):
    """Step a block of paths; returns states (n, m+1, d)."""
    n, m, d = increments.shape
    states = out if out is not None else np.empty((n, m + 1, d))
    states[:, 0, :] = x0s
    x = states[:, 0, :]
    for j in range(m):
        t = float(times[j])
        dt = float(times[j + 1] - times[j])
        sig = model.sigma(t, x)
        b = model.drift(t, x)
        x = x + np.einsum("nij,nj->ni", sig, increments[:, j, :]) + b * dt
        states[:, j + 1, :] = x
    return states


def _block_ranges(n, block):
    return [(lo, min(lo + block, n)) for lo in range(0, n, block)]


def euler_maruyama(model, grid, n_paths, seed, n_workers=1, path_offset=0):
    """Simulate n_paths Euler paths of the model on the given grid.

    grid may be a TimeGridSpec (materialized on [0, T]) or an explicit array of
    times starting at 0.  Results are bitwise identical for any n_workers.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    times = grid.times(model.horizon) if isinstance(grid, TimeGridSpec) \
        else np.asarray(grid, dtype=float)
    m = len(times) - 1
    d = model.dim
    sqrt_dt = np.sqrt(np.diff(times))

    states = np.empty((n_paths, m + 1, d))
    increments = np.empty((n_paths, m, d))
    idents = np.empty((n_paths, 2), dtype=np.uint64)

    def run_block(rng_range):
        lo, hi = rng_range
        for i in range(lo, hi):
            pid = path_offset + i
            gen = _rng.path_stream(seed, pid)
            increments[i] = gen.standard_normal((m, d)) * sqrt_dt[:, None]
            idents[i] = (_rng.OUTER_PATH, pid)
        _euler_block(model, times, np.broadcast_to(model.x0, (hi - lo, d)),
                     increments[lo:hi], out=states[lo:hi])
        _check_finite(states[lo:hi], offset=lo)

    ranges = _block_ranges(n_paths, _BLOCK)
    if n_workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            list(ex.map(run_block, ranges))
    else:
        for r in ranges:
            run_block(r)

    return PathBatch(times=times, states=states, increments=increments,
                     seed=seed, stream_idents=idents)


def resimulate_from(model, t_start, x_start, sub_grid, n_inner, stream):
    """Fresh paths of the same diffusion restarted at (t_start, x_start).

    ``stream`` is the dedicated inner generator (see _rng.restart_stream); the
    whole inner batch draws from it.  x_start is a single point or one start
    per inner path.
    """
    if t_start >= model.horizon:
        raise ValueError("restart time must satisfy t_start < horizon")
    times = sub_grid.times(model.horizon, start=t_start) \
        if isinstance(sub_grid, TimeGridSpec) else np.asarray(sub_grid, dtype=float)
    m = len(times) - 1
    d = model.dim
    x_start = np.atleast_1d(np.asarray(x_start, dtype=float))
    if x_start.ndim == 1:
        x0s = np.broadcast_to(x_start, (n_inner, d))
    else:
        x0s = x_start
    increments = stream.standard_normal((n_inner, m, d)) * np.sqrt(np.diff(times))[None, :, None]
    states = _euler_block(model, times, x0s, increments)
    _check_finite(states)
    key = getattr(stream.bit_generator, "state", {}).get("state", {}).get("key", None)
    idents = np.zeros((n_inner, 2), dtype=np.uint64)
    if key is not None:
        idents[:, 0] = _rng.RESTART
        idents[:, 1] = np.uint64(int(key[0]) & 0xFFFFFFFFFFFFFFFF)
    return PathBatch(times=times, states=states, increments=increments,
                     seed=-1, stream_idents=idents)


def _coefficient_gradients(model, fd_step=1e-6):
    """(dsigma, ddrift) callables, central finite differences if not declared."""
    if model.has_gradients:
        return model.dsigma, model.ddrift
    d = model.dim

    def dsigma(t, x):
        out = np.empty((x.shape[0], d, d, d))
        for l in range(d):
            h = np.zeros(d)
            h[l] = fd_step
            out[:, :, :, l] = (model.sigma(t, x + h) - model.sigma(t, x - h)) / (2 * fd_step)
        return out

    def ddrift(t, x):
        out = np.empty((x.shape[0], d, d))
        for l in range(d):
            h = np.zeros(d)
            h[l] = fd_step
            out[:, :, l] = (model.drift(t, x + h) - model.drift(t, x - h)) / (2 * fd_step)
        return out

    return dsigma, ddrift


def first_variation(model, paths, fd_fallback=True):
    """Euler schemes for the flow dX/dx0 and for its inverse.

    flow:      dG = sum_l (grad sigma_l) G dB^l + (grad b) G dt,  G_0 = I
    inverse:   dZ = -Z sum_l (grad sigma_l) dB^l
                    - Z (grad b - sum_l (grad sigma_l)^2) dt,     Z_0 = I

    grad sigma_l is the d x d state-gradient of the l-th column of sigma.
    """
    if not model.has_gradients and not fd_fallback:
        raise ValueError("model lacks coefficient gradients and fd_fallback is off")
    dsigma_f, ddrift_f = _coefficient_gradients(model)

    n, m, d = paths.increments.shape
    eye = np.eye(d)
    flow = np.empty((n, m + 1, d, d))
    inv = np.empty((n, m + 1, d, d))
    flow[:, 0] = eye
    inv[:, 0] = eye
    G = flow[:, 0].copy()
    Z = inv[:, 0].copy()
    for j in range(m):
        t = float(paths.times[j])
        dt = float(paths.times[j + 1] - paths.times[j])
        x = paths.states[:, j, :]
        dB = paths.increments[:, j, :]
        ds = dsigma_f(t, x)          # [n,i,l,r]: d sigma_il / d x_r
        db = ddrift_f(t, x)          # [n,i,r]
        # grad sigma_l as matrix acting on the flow: [n,l,i,r]
        gs = np.transpose(ds, (0, 2, 1, 3))
        noise = np.einsum("nlir,nrk,nl->nik", gs, G, dB)
        driftt = np.einsum("nir,nrk->nik", db, G) * dt
        G = G + noise + driftt
        gs_sq = np.einsum("nlir,nlrk->nik", gs, gs)
        noise_z = np.einsum("nir,nlrk,nl->nik", Z, gs, dB)
        drift_z = np.einsum("nir,nrk->nik", Z, db - gs_sq) * dt
        Z = Z - noise_z - drift_z
        flow[:, j + 1] = G
        inv[:, j + 1] = Z
    return FlowBatch(flow=flow, inv_flow=inv)


# ---------------------------------------------------------------------------
# external interfaces: binary path dump and summary CSV
# ---------------------------------------------------------------------------

_DUMP_MAGIC = b"FSPATHS1"
_HEADER = struct.Struct("<iiqd")  # d, m, n_paths, T  (little endian)


def dump_paths(batch, fileobj):
    """Binary dump: magic, header {d, m, n_paths, T}, then row-major float64 states."""
    fileobj.write(_DUMP_MAGIC)
    fileobj.write(_HEADER.pack(batch.dim, batch.n_steps, batch.n_paths,
                               float(batch.times[-1])))
    fileobj.write(np.ascontiguousarray(batch.times, dtype="<f8").tobytes())
    fileobj.write(np.ascontiguousarray(batch.states, dtype="<f8").tobytes())


def load_paths(fileobj):
    magic = fileobj.read(len(_DUMP_MAGIC))
    if magic != _DUMP_MAGIC:
        raise ValueError("not a path dump file")
    d, m, n, T = _HEADER.unpack(fileobj.read(_HEADER.size))
    times = np.frombuffer(fileobj.read(8 * (m + 1)), dtype="<f8")
    states = np.frombuffer(fileobj.read(8 * n * (m + 1) * d), dtype="<f8")
    states = states.reshape(n, m + 1, d)
    return times.copy(), states.copy(), T


def summary_csv(batch, fileobj):
    """Per-time mean / std / min / max of the first state coordinate."""
    x = batch.states[:, :, 0]
    fileobj.write("t,mean,std,min,max\n")
    for j, t in enumerate(batch.times):
        col = x[:, j]
        fileobj.write("%.17g,%.17g,%.17g,%.17g,%.17g\n" % (
            t, col.mean(), col.std(ddof=1) if len(col) > 1 else 0.0,
            col.min(), col.max()))
