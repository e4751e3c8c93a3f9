"""Damage calibration from production-well outflow measurements (finite-difference gradient descent)."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MeasurementError, NumericsError, ParameterError
from .site import SiteModel

log = logging.getLogger(__name__)


@dataclass
class MeasurementSet:
    """Measured production outflows (l/s, one per hexagon) and the injection inflows that produced them."""

    outflows: np.ndarray
    inflows: np.ndarray
    seed: int | None = None
    amplitude: float = 0.0

    def __post_init__(self):
        self.outflows = np.asarray(self.outflows, float)
        self.inflows = np.asarray(self.inflows, float)
        if np.any(self.outflows < 0):
            raise MeasurementError("measured outflows must be non-negative")

    def write_csv(self, path: str | Path, header_line: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_line:
                fh.write(header_line + "\n")
            w = csv.writer(fh)
            w.writerow(["well_id", "measured_outflow_lps"])
            for i, v in enumerate(self.outflows):
                w.writerow([i, repr(float(v))])

    @classmethod
    def read_csv(cls, path: str | Path, inflows) -> "MeasurementSet":
        rows = [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))][1:]
        out = np.zeros(len(rows))
        for r in rows:
            out[int(r[0])] = float(r[1])
        return cls(out, inflows)


def flow_error(computed: np.ndarray, measured: np.ndarray) -> float:
    """Root-mean-square relative outflow error over all production wells."""
    computed, measured = np.asarray(computed, float), np.asarray(measured, float)
    if computed.shape != measured.shape:
        raise MeasurementError(f"{computed.shape[0]} computed vs {measured.shape[0]} measured outflows")
    if np.any(measured <= 0):
        raise MeasurementError("measured outflows must be strictly positive")
    return float(np.sqrt(np.mean(((measured - computed) / measured) ** 2)))


def site_error(site: SiteModel, meas: MeasurementSet) -> float:
    return flow_error(site.solve().outflows, meas.outflows)


def synthesize_measurements(site: SiteModel, true_damage: np.ndarray, inflows=None, amplitude: float = 0.01,
                            seed: int | None = 0) -> MeasurementSet:
    """Forward-solve with ``true_damage`` and perturb outflows by uniform multiplicative noise ``±amplitude``."""
    if amplitude < 0:
        raise ParameterError("noise amplitude must be non-negative")
    s = site.copy()
    if inflows is not None:
        s.set_inflows(inflows)
    s.set_damage(true_damage)
    out = s.solve().outflows
    noise = np.random.default_rng(seed).uniform(-amplitude, amplitude, out.shape) if amplitude > 0 else 0.0
    return MeasurementSet(out * (1.0 + noise), s.inflows, seed, amplitude)


def smooth_damage_field(site: SiteModel, seed: int = 0, base: float = 0.5, spread: float = 0.3,
                        noise: float = 0.01, n_cracks: int = 1, crack_value: float = 0.95) -> np.ndarray:
    """Smooth random damage over the site plus small noise and a few localized crack values."""
    rng = np.random.default_rng(seed)
    c = site.centers
    span = np.ptp(c, axis=0).max() + 2 * site.well_distance
    sext = np.pi / 3.0 * np.arange(6)
    pts = (c[:, None, :] + 0.5 * site.well_distance * np.stack([np.cos(sext), np.sin(sext)], 1)[None])
    k = rng.normal(size=(2, 2)) * 2 * np.pi / span
    ph = rng.uniform(0, 2 * np.pi, 2)
    field_ = base + spread * 0.5 * (np.sin(pts @ k[0] + ph[0]) + np.cos(pts @ k[1] + ph[1]))
    field_ = field_ + noise * rng.standard_normal(field_.shape)
    for _ in range(n_cracks):
        field_[rng.integers(site.n_hex), rng.integers(6)] = crack_value
    return np.clip(field_, 0.0, 1.0)


def _perturbed_error(site: SiteModel, meas: MeasurementSet, h: int, s: int, value: float) -> float:
    trial = site.copy()
    D = trial.damage[h].copy()
    D[s] = value
    trial.update_damage(h, D)  # only this hexagon's block is recomputed
    return site_error(trial, meas)


def _fd_points(d: float, step: float) -> tuple[float, float, float]:
    lo, hi = d - step, d + step
    if lo < 0.0:
        return d, min(d + step, 1.0), 1.0
    if hi > 1.0:
        return max(d - step, 0.0), d, 1.0
    return lo, hi, 2.0


def difference_gradient(func, x: np.ndarray, h: float = 0.01, scheme: str = "central",
                        lower: float = 0.0, upper: float = 1.0) -> np.ndarray:
    """Finite-difference gradient of a scalar function of an array inside the box ``[lower, upper]``.

    ``central`` falls back to one-sided differences at the box edges;
    ``forward`` always uses ``(f(x + h) - f(x)) / h``.
    """
    if not h > 0:
        raise ParameterError("finite-difference step must be positive")
    if scheme not in ("central", "forward"):
        raise ParameterError(f"unknown difference scheme {scheme!r}")
    x = np.asarray(x, float)
    grad = np.zeros_like(x)
    f0 = None
    for idx in np.ndindex(x.shape):
        d = x[idx]
        if scheme == "forward":
            a, b = d, d + h
        else:
            a, b, _ = _fd_points((d - lower) / (upper - lower), h / (upper - lower))
            a, b = lower + a * (upper - lower), lower + b * (upper - lower)
        vals = []
        for v in (a, b):
            if v == d:
                f0 = func(x) if f0 is None else f0
                vals.append(f0)
            else:
                xt = x.copy()
                xt[idx] = v
                vals.append(func(xt))
        grad[idx] = (vals[1] - vals[0]) / (b - a)
    return grad


def numeric_gradient(site: SiteModel, meas: MeasurementSet, h: float = 0.01, workers: int = 1) -> np.ndarray:
    """Central differences ``(e(D+h) - e(D-h)) / 2h`` per sextant (one-sided at the box edges).

    Each evaluation re-assembles only the perturbed hexagon's block.
    Returns an (n_hex, 6) array.
    """
    if not h > 0:
        raise ParameterError("finite-difference step must be positive")
    e0 = None
    jobs = []
    for hx in range(site.n_hex):
        for s in range(6):
            a, b, kind = _fd_points(site.damage[hx, s], h)
            jobs.append((hx, s, a, b, kind))

    def evaluate(job):
        hx, s, a, b, kind = job
        ea = _perturbed_error(site, meas, hx, s, a) if a != site.damage[hx, s] else None
        eb = _perturbed_error(site, meas, hx, s, b) if b != site.damage[hx, s] else None
        return ea, eb

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(evaluate, jobs))
    else:
        results = [evaluate(j) for j in jobs]
    grad = np.zeros((site.n_hex, 6))
    for (hx, s, a, b, kind), (ea, eb) in zip(jobs, results):
        if ea is None or eb is None:
            if e0 is None:
                e0 = site_error(site, meas)
            ea = e0 if ea is None else ea
            eb = e0 if eb is None else eb
        grad[hx, s] = (eb - ea) / (b - a)
    return grad


def brute_force_gradient(site: SiteModel, meas: MeasurementSet, h: float = 0.01) -> np.ndarray:
    """Reference gradient that rebuilds the whole site for every evaluation (slow; for checking)."""
    grad = np.zeros((site.n_hex, 6))
    for hx in range(site.n_hex):
        for s in range(6):
            a, b, _ = _fd_points(site.damage[hx, s], h)
            vals = []
            for v in (a, b):
                D = site.damage.copy()
                D[hx, s] = v
                fresh = SiteModel(site.centers, site.bundle, D, intake_height=site.intake_height)
                fresh.wells, fresh.open_corners = site.wells, site.open_corners
                fresh._coupling = fresh._build_coupling()
                vals.append(site_error(fresh, meas))
            grad[hx, s] = (vals[1] - vals[0]) / (b - a)
    return grad


@dataclass
class CalibrationState:
    damage: np.ndarray
    iterations: int = 0
    history: list = field(default_factory=list)   # e_k of accepted iterates (k = 0 is the start)
    steps: list = field(default_factory=list)     # step size used for each accepted iterate
    converged: bool = False
    reason: str = ""

    @property
    def error(self) -> float:
        return self.history[-1]

    def write_log(self, path: str | Path, header_line: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_line:
                fh.write(header_line + "\n")
            w = csv.writer(fh)
            w.writerow(["k", "error", "step"])
            for k, e in enumerate(self.history):
                w.writerow([k, repr(float(e)), repr(float(self.steps[k - 1])) if k else ""])


def calibrate(site: SiteModel, meas: MeasurementSet, eta0: float = 0.5, h: float = 0.01, max_iter: int = 20,
              tol: float = 1e-6, max_halvings: int = 8, workers: int = 1, grow: float = 1.0) -> CalibrationState:
    """Projected gradient descent ``D <- clamp(D - eta grad e)`` with step halving on non-decrease.

    Each iteration starts from the previous accepted step times ``grow``
    (``grow = 1`` keeps ``eta0`` fixed; ``grow = 2`` lets the step recover after
    halvings and expand when the error surface is flat).
    The site is modified in place and ends at the best damage found.
    """
    if not eta0 > 0 or grow < 1.0:
        raise ParameterError("eta0 must be positive and grow >= 1")
    e = site_error(site, meas)
    if not np.isfinite(e):
        raise NumericsError("non-finite flow error at the initial state")
    state = CalibrationState(site.damage.copy(), 0, [e], [])
    while True:
        if e <= tol:
            state.converged, state.reason = True, "tolerance"
            break
        if state.iterations >= max_iter:
            state.reason = "max_iter"
            break
        g = numeric_gradient(site, meas, h, workers)
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient at iteration {state.iterations}")
        eta = eta0 if not state.steps or grow == 1.0 else state.steps[-1] * grow
        accepted = False
        for _ in range(max_halvings + 1):
            D_new = np.clip(site.damage - eta * g, 0.0, 1.0)
            trial = site.copy().set_damage(D_new)
            e_new = site_error(trial, meas)
            if not np.isfinite(e_new):
                raise NumericsError(f"non-finite flow error at iteration {state.iterations}, step {eta}")
            if e_new < e:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            state.reason = "step collapse"
            break
        site.set_damage(D_new)
        e = e_new
        state.iterations += 1
        state.history.append(e)
        state.steps.append(eta)
        state.damage = site.damage.copy()
        log.info("calibration iteration %d: e = %.4e (step %.3g)", state.iterations, e, eta)
    return state


def write_damage_csv(path: str | Path, damage: np.ndarray, header_line: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_line:
            fh.write(header_line + "\n")
        w = csv.writer(fh)
        w.writerow(["hex_id"] + [f"D{k}" for k in range(1, 7)])
        for h, row in enumerate(np.asarray(damage)):
            w.writerow([h] + [repr(float(d)) for d in row])
