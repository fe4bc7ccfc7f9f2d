"""Synthetic ground truth from a first-order finite-volume solver.

The conservation law rho_t + (rho*v)_x = 0 with the exponential
speed-density closure is advanced by a Godunov scheme. The flux
q(rho) = rho*v_f*exp(-rho/rho_cr) is non-monotone with its maximum at
rho_cr, so interface fluxes use the demand/supply construction:
demand D(rho) = q(min(rho, rho_cr)), supply S(rho) = q(max(rho, rho_cr)),
F_{i+1/2} = min(D(rho_i), S(rho_{i+1})).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grids import TrafficGrid
from .percentile_fd import UnderwoodParams, underwood_speed

INITIAL_KINDS = ("uniform", "riemann", "pulse", "riemann-pulse")
BOUNDARY_KINDS = ("outflow", "periodic", "forced-inflow")


@dataclass
class Scenario:
    """Domain geometry plus initial/boundary profile descriptions.

    initial: {"kind": "uniform", "rho": .08}
             {"kind": "riemann", "rho_left": .05, "rho_right": .3, "split": .5}
             {"kind": "pulse", "rho_base": .08, "amplitude": .1, "center": .5, "width": .1}
             {"kind": "riemann-pulse", riemann keys + pulse amplitude/center/width}
    boundary: {"kind": "outflow"} | {"kind": "periodic"}
              | {"kind": "forced-inflow", "rho": .2, "t_on": 0., "t_off": 300.}
    """

    n_x: int
    n_t: int
    dx: float = 30.0
    dt: float = 1.5
    x0: float = 0.0
    t0: float = 0.0
    initial: dict = field(default_factory=lambda: {"kind": "uniform", "rho": 0.08})
    boundary: dict = field(default_factory=lambda: {"kind": "outflow"})

    def __post_init__(self):
        if self.n_x < 2 or self.n_t < 2:
            raise ValidationError("scenario needs n_x >= 2 and n_t >= 2")
        if self.dx <= 0 or self.dt <= 0:
            raise ValidationError("dx and dt must be positive")
        kind = self.initial.get("kind")
        if kind not in INITIAL_KINDS:
            raise ValidationError(f"initial kind {kind!r} not one of {INITIAL_KINDS}")
        bkind = self.boundary.get("kind")
        if bkind not in BOUNDARY_KINDS:
            raise ValidationError(f"boundary kind {bkind!r} not one of {BOUNDARY_KINDS}")


def _flux(rho, fd: UnderwoodParams):
    return rho * fd.v_f * np.exp(-rho / fd.rho_cr)


def _initial_profile(scenario: Scenario):
    n_x = scenario.n_x
    x_frac = np.arange(n_x) / (n_x - 1)
    ini = scenario.initial
    kind = ini["kind"]
    if kind == "uniform":
        rho = np.full(n_x, float(ini["rho"]))
    elif kind == "riemann":
        split = float(ini.get("split", 0.5))
        rho = np.where(x_frac < split, float(ini["rho_left"]), float(ini["rho_right"]))
    elif kind == "pulse":
        center = float(ini.get("center", 0.5))
        width = float(ini.get("width", 0.1))
        rho = float(ini["rho_base"]) + float(ini["amplitude"]) * np.exp(
            -0.5 * ((x_frac - center) / width) ** 2
        )
    elif kind == "riemann-pulse":
        split = float(ini.get("split", 0.5))
        rho = np.where(x_frac < split, float(ini["rho_left"]), float(ini["rho_right"]))
        center = float(ini.get("center", 0.25))
        width = float(ini.get("width", 0.08))
        rho = rho + float(ini["amplitude"]) * np.exp(-0.5 * ((x_frac - center) / width) ** 2)
    else:  # pragma: no cover - guarded in Scenario
        raise ValidationError(f"unknown initial kind {kind!r}")
    if (rho < 0).any():
        raise ValidationError("initial density profile has negative values")
    return rho


def simulate_lwr(scenario: Scenario, fd: UnderwoodParams) -> TrafficGrid:
    """Run the Godunov scheme; returns the noise-free grid.

    The maximum characteristic speed of the flux is v_f (at rho=0), so
    stability requires dt <= dx / v_f.
    """
    if scenario.dt > scenario.dx / fd.v_f:
        raise ValidationError(
            f"CFL violated: dt={scenario.dt} > dx/v_f={scenario.dx / fd.v_f:.6g}; "
            f"reduce dt to at most {scenario.dx / fd.v_f:.6g} s"
        )
    n_x, n_t = scenario.n_x, scenario.n_t
    lam = scenario.dt / scenario.dx
    bkind = scenario.boundary["kind"]

    rho = _initial_profile(scenario)
    out = np.empty((n_x, n_t))
    out[:, 0] = rho

    for n in range(1, n_t):
        if bkind == "periodic":
            ext = np.concatenate(([rho[-1]], rho, [rho[0]]))
        elif bkind == "outflow":
            ext = np.concatenate(([rho[0]], rho, [rho[-1]]))
        else:  # forced-inflow: upstream ghost density forced during a window
            t_now = scenario.t0 + n * scenario.dt
            b = scenario.boundary
            if float(b.get("t_on", 0.0)) <= t_now <= float(b.get("t_off", np.inf)):
                left = float(b["rho"])
            else:
                left = rho[0]
            ext = np.concatenate(([left], rho, [rho[-1]]))
        demand = _flux(np.minimum(ext, fd.rho_cr), fd)
        supply = _flux(np.maximum(ext, fd.rho_cr), fd)
        f_iface = np.minimum(demand[:-1], supply[1:])  # n_x+1 interfaces
        rho = rho - lam * (f_iface[1:] - f_iface[:-1])
        out[:, n] = rho

    speeds = underwood_speed(fd, out)
    return TrafficGrid(
        densities=out, speeds=speeds,
        dx=scenario.dx, dt=scenario.dt, x0=scenario.x0, t0=scenario.t0,
    )


def apply_speed_noise(grid: TrafficGrid, noise_cv: float, seed: int) -> TrafficGrid:
    """Multiplicative log-normal speed noise with unit mean and CV noise_cv.

    Densities are left untouched; noise only creates observation scatter.
    """
    if noise_cv < 0:
        raise ValidationError("noise_cv must be >= 0")
    if noise_cv == 0:
        return TrafficGrid(
            densities=grid.densities.copy(), speeds=grid.speeds.copy(),
            dx=grid.dx, dt=grid.dt, x0=grid.x0, t0=grid.t0,
        )
    rng = np.random.default_rng(seed)
    sigma2 = np.log1p(noise_cv**2)
    factors = np.exp(rng.normal(0.0, np.sqrt(sigma2), grid.speeds.shape) - sigma2 / 2)
    return TrafficGrid(
        densities=grid.densities.copy(), speeds=grid.speeds * factors,
        dx=grid.dx, dt=grid.dt, x0=grid.x0, t0=grid.t0,
    )


def generate_synthetic_lwr(scenario: Scenario, fd: UnderwoodParams, noise_cv: float, seed: int) -> TrafficGrid:
    """Noise-free solve followed by speed noise; deterministic per seed."""
    return apply_speed_noise(simulate_lwr(scenario, fd), noise_cv, seed)
