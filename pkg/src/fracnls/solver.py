"""Mild-formulation time stepper for the noisy Schrodinger equation, with
blow-up (cemetery) semantics and the controlled skeleton problem.

One step combines a Strang splitting of the deterministic flow with the
precomputed forcing increment:

    u_{k+1} = N_{dt/2}( U(dt) ( N_{dt/2}(u_k) ) ) - i sqrt(eps) D_k,
    D_k     = Z(t_{k+1}) - U(dt) Z(t_k),

where N is the exact phase-rotation solution of the nonlinear subflow (the
modulus is invariant under it, so the splitting conserves mass exactly) and
U(dt) is the free group.  The increments D_k accumulate the convolution
consistently: the noise part of the state at t_k is exactly -i sqrt(eps) Z(t_k)
when the nonlinearity vanishes.

Blow-up is a legal outcome, not an error: once the energy-space norm passes
the configured threshold (or the field stops being finite), the trajectory is
absorbed in the cemetery state and carries no field values afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import ComplexField, GridSpec, group_multiplier, sobolev_norm
from .noise import Control, ConvolutionPath, DiscreteLOperator, mode_paths_to_fields

__all__ = [
    "NonlinearitySpec",
    "SolverConfig",
    "Trajectory",
    "evaluate_nonlinearity",
    "solve_mild",
    "solve_skeleton",
    "detect_blowup",
]


@dataclass(frozen=True)
class NonlinearitySpec:
    """Power nonlinearity lam |u|^{2 sigma} u, optionally saturated.

    kind = "kerr":      f(u) = lam |u|^{2 sigma} u
    kind = "saturated": f(u) = lam |u|^{2 sigma} u / (1 + kappa |u|^{2 sigma})

    lam = +1 focuses (blow-up possible), lam = -1 defocuses.  The saturated
    form is bounded and Lipschitz on bounded sets with f(0) = 0; it converges
    to the plain power law as kappa -> 0.
    """

    kind: str
    lam: float
    sigma: float
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ("kerr", "saturated"):
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        if self.lam not in (-1.0, 1.0, -1, 1):
            raise ValueError(f"lam must be +1 or -1, got {self.lam}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.kind == "saturated" and self.kappa <= 0:
            raise ValueError("saturated nonlinearity needs kappa > 0")

    def amplitude_rate(self, abs_u_sq: np.ndarray) -> np.ndarray:
        """Real factor rho(|u|) with f(u) = rho(|u|) u."""
        with np.errstate(over="raise", invalid="raise"):
            p = abs_u_sq**self.sigma
            if self.kind == "kerr":
                return self.lam * p
            return self.lam * p / (1.0 + self.kappa * p)


def evaluate_nonlinearity(nl: NonlinearitySpec, u: ComplexField) -> ComplexField:
    """Pointwise f(u) in physical space; overflow signals imminent blow-up."""
    try:
        rate = nl.amplitude_rate(np.abs(u.values) ** 2)
    except FloatingPointError as exc:
        raise OverflowError("nonlinearity overflow: field is blowing up") from exc
    return ComplexField(u.grid, rate * u.values)


@dataclass(frozen=True)
class SolverConfig:
    """Time step, blow-up threshold, and grid bookkeeping for one run.

    ``blowup_threshold`` caps the energy-space (H^1) norm; ``None`` resolves
    to 1e3 times the initial norm at solve time.  ``substep_tol`` is retained
    as a knob for approximate nonlinear substeps; the phase-rotation substep
    used here is exact, so it is not consulted.
    """

    T: float
    n_steps: int
    blowup_threshold: float | None = None
    substep_tol: float = 0.0

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and at least one step")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass
class Trajectory:
    """Time-indexed fields with optional cemetery absorption.

    ``fields[k]`` is the state at t_k, or None from the blow-up index onward;
    ``blowup_time`` is +inf for global trajectories.  Once absorbed, always
    absorbed: no field values exist after the cemetery index.
    """

    times: np.ndarray
    grid: GridSpec
    epsilon: float
    fields: list  # ComplexField | None per step
    cemetery_index: int | None = None
    blowup_time: float = math.inf
    h1_norms: np.ndarray | None = None

    @property
    def blown_up(self) -> bool:
        return self.cemetery_index is not None

    def field(self, k: int) -> ComplexField | None:
        return self.fields[k]

    def terminal_field(self) -> ComplexField | None:
        return self.fields[-1]


def detect_blowup(h1_norms, threshold: float) -> int | None:
    """First index whose energy norm exceeds the threshold (or is not finite)."""
    for k, v in enumerate(h1_norms):
        if not math.isfinite(v) or v > threshold:
            return k
    return None


def _forcing_fields(forcing, grid: GridSpec, cfg: SolverConfig) -> np.ndarray | None:
    """Forcing increments D_k = Z(t_{k+1}) - U(dt) Z(t_k) as physical fields."""
    if forcing is None:
        return None
    if isinstance(forcing, ConvolutionPath):
        mode_paths = forcing.mode_paths
        if forcing.tg.n != cfg.n_steps or abs(forcing.tg.T - cfg.T) > 1e-12 * cfg.T:
            raise ValueError("forcing path and solver config use different time grids")
    else:
        mode_paths = np.asarray(forcing, dtype=complex)
        if mode_paths.shape[0] != cfg.n_steps + 1:
            raise ValueError("forcing mode paths must cover every grid point")
    xi2 = grid.xi_squared.reshape(-1)
    mult = np.exp(1j * xi2 * cfg.dt)
    incr = mode_paths[1:] - mult[None, :] * mode_paths[:-1]
    return mode_paths_to_fields(grid, incr)


def solve_mild(
    u0: ComplexField,
    nl: NonlinearitySpec | None,
    forcing,
    eps: float,
    cfg: SolverConfig,
) -> Trajectory:
    """March the mild formulation on the configured uniform grid.

    ``forcing`` is a sampled convolution path, raw mode paths on the same
    grid, or None; ``eps`` scales the noise amplitude by sqrt(eps).  With
    eps = 0 and no nonlinearity each step is a single exact group
    application.  Returns the trajectory, absorbed at the cemetery from the
    first index whose H^1 norm exceeds the threshold.
    """
    if eps < 0:
        raise ValueError("noise intensity eps must be nonnegative")
    grid = u0.grid
    dt = cfg.dt
    u0_h1 = sobolev_norm(u0, 1.0)
    threshold = cfg.blowup_threshold
    if threshold is None:
        threshold = 1e3 * max(u0_h1, 1.0)
    if threshold <= u0_h1:
        raise ValueError(
            f"blow-up threshold {threshold} must exceed the initial H^1 norm {u0_h1}"
        )
    D = _forcing_fields(forcing, grid, cfg)
    scale = math.sqrt(eps)
    mult = group_multiplier(grid, dt)

    times = cfg.times
    fields: list = [ComplexField(grid, u0.values.copy())]
    h1 = np.empty(cfg.n_steps + 1)
    h1[0] = u0_h1
    values = u0.values.copy()
    cemetery = None
    for k in range(cfg.n_steps):
        try:
            if nl is not None:
                values = values * np.exp(-0.5j * dt * nl.amplitude_rate(np.abs(values) ** 2))
                values = np.fft.ifftn(mult * np.fft.fftn(values))
                values = values * np.exp(-0.5j * dt * nl.amplitude_rate(np.abs(values) ** 2))
            else:
                values = np.fft.ifftn(mult * np.fft.fftn(values))
            if D is not None and scale != 0.0:
                values = values - 1j * scale * D[k]
        except FloatingPointError:
            cemetery = k + 1
        u_next = ComplexField(grid, values)
        if cemetery is None:
            norm = sobolev_norm(u_next, 1.0) if u_next.is_finite() else math.inf
            if not math.isfinite(norm) or norm > threshold:
                cemetery = k + 1
            else:
                fields.append(u_next)
                h1[k + 1] = norm
        if cemetery is not None:
            fields.extend([None] * (cfg.n_steps + 1 - len(fields)))
            h1[cemetery:] = math.nan
            return Trajectory(
                times=times,
                grid=grid,
                epsilon=eps,
                fields=fields,
                cemetery_index=cemetery,
                blowup_time=float(times[cemetery]),
                h1_norms=h1,
            )
    return Trajectory(
        times=times,
        grid=grid,
        epsilon=eps,
        fields=fields,
        cemetery_index=None,
        blowup_time=math.inf,
        h1_norms=h1,
    )


def solve_skeleton(
    u0: ComplexField,
    h: Control,
    nl: NonlinearitySpec | None,
    cfg: SolverConfig,
    L: DiscreteLOperator,
) -> Trajectory:
    """Controlled trajectory S(u0, h): the mild stepper driven by the
    deterministic response path L h at unit intensity (same code path as
    :func:`solve_mild`)."""
    if L.tg.n != cfg.n_steps or abs(L.tg.T - cfg.T) > 1e-12 * cfg.T:
        raise ValueError("response operator and solver config use different grids")
    mode_paths = L.apply(h)
    return solve_mild(u0, nl, mode_paths, 1.0, cfg)
