"""Space-time traffic grids, detector sampling, and coordinate normalization.

A grid holds density (veh/m) and speed (m/s) matrices of shape (n_x, n_t)
sampled on the lattice x_i = x0 + i*dx, t_j = t0 + j*dt. Observations are
the grid cells on selected detector rows; collocation points are unlabeled
(x, t) locations used only for physics residuals.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

GRID_HEADER = ("nx", "nt", "dx", "dt", "x0", "t0")


@dataclass
class TrafficGrid:
    """Dense space-time lattice of (density, speed) cells.

    densities: (n_x, n_t) in veh/m, speeds: (n_x, n_t) in m/s.
    dx, dt are the physical cell sizes; x0, t0 the physical origin.
    """

    densities: np.ndarray
    speeds: np.ndarray
    dx: float = 30.0
    dt: float = 1.5
    x0: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=float)
        self.speeds = np.asarray(self.speeds, dtype=float)
        if self.densities.shape != self.speeds.shape:
            raise ShapeError(
                f"density shape {self.densities.shape} != speed shape {self.speeds.shape}"
            )
        if self.densities.ndim != 2 or min(self.densities.shape) < 2:
            raise ShapeError(f"grid must be 2-D with n_x,n_t >= 2, got {self.densities.shape}")
        if self.dx <= 0 or self.dt <= 0:
            raise ValidationError("dx and dt must be positive")
        if not (np.isfinite(self.densities).all() and np.isfinite(self.speeds).all()):
            raise ValidationError("grid contains NaN or infinite cells")
        if (self.densities < 0).any() or (self.speeds < 0).any():
            raise ValidationError("negative density or speed in grid")

    @property
    def n_x(self):
        return self.densities.shape[0]

    @property
    def n_t(self):
        return self.densities.shape[1]

    @property
    def length(self):
        """Domain length L spanned by the row lattice, meters."""
        return (self.n_x - 1) * self.dx

    @property
    def duration(self):
        """Domain duration T spanned by the column lattice, seconds."""
        return (self.n_t - 1) * self.dt

    def x_coords(self):
        return self.x0 + self.dx * np.arange(self.n_x)

    def t_coords(self):
        return self.t0 + self.dt * np.arange(self.n_t)

    def flows(self):
        """Implied flow q = rho*v, veh/s."""
        return self.densities * self.speeds


@dataclass
class ObservationSet:
    """Labeled points (x, t, rho, v) taken at detector rows."""

    x: np.ndarray
    t: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    detector_rows: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        n = len(self.x)
        if not (len(self.t) == len(self.rho) == len(self.v) == n):
            raise ShapeError("observation arrays must share one length")

    def __len__(self):
        return len(self.x)


@dataclass
class CollocationSet:
    """Unlabeled (x, t) points inside the domain; no state labels."""

    x: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if len(self.x) != len(self.t):
            raise ShapeError("collocation arrays must share one length")

    def __len__(self):
        return len(self.x)


@dataclass
class NormalizationSpec:
    """Scales mapping physical (x, t, rho, v) into [0, 1] network units."""

    x_scale: float
    t_scale: float
    rho_scale: float
    v_scale: float

    def __post_init__(self):
        if min(self.x_scale, self.t_scale, self.rho_scale, self.v_scale) <= 0:
            raise ValidationError("normalization scales must be positive")

    def normalize_coords(self, x, t):
        return np.asarray(x) / self.x_scale, np.asarray(t) / self.t_scale

    def denormalize_coords(self, xn, tn):
        return np.asarray(xn) * self.x_scale, np.asarray(tn) * self.t_scale

    def normalize_states(self, rho, v):
        return np.asarray(rho) / self.rho_scale, np.asarray(v) / self.v_scale

    def denormalize_states(self, rhon, vn):
        return np.asarray(rhon) * self.rho_scale, np.asarray(vn) * self.v_scale


def make_normalizer(grid: TrafficGrid) -> NormalizationSpec:
    """Scales (L, T, max rho, max v); zero maxima fall back to 1.0."""
    rho_scale = float(grid.densities.max())
    v_scale = float(grid.speeds.max())
    return NormalizationSpec(
        x_scale=grid.length,
        t_scale=grid.duration,
        rho_scale=rho_scale if rho_scale > 0 else 1.0,
        v_scale=v_scale if v_scale > 0 else 1.0,
    )


def equispaced_rows(n_x: int, k: int):
    """k detector rows spread over [0, n_x-1]: round(i*(n_x-1)/(k-1)).

    k=1 degenerates to row 0 (the i=0 limit of the formula).
    """
    if k == 1:
        return [0]
    return [int(round(i * (n_x - 1) / (k - 1))) for i in range(k)]


def sample_detectors(grid: TrafficGrid, k=None, strategy="equispaced", rows=None) -> ObservationSet:
    """Carve an ObservationSet from k detector rows (every time step).

    strategy "equispaced" derives rows from k; "explicit-rows" takes them
    verbatim. N_O = k * n_t.
    """
    if strategy == "equispaced":
        if k is None or not 1 <= k <= grid.n_x:
            raise ValidationError(f"detector count k={k} outside [1, {grid.n_x}]")
        rows = equispaced_rows(grid.n_x, k)
    elif strategy == "explicit-rows":
        if not rows:
            raise ValidationError("explicit-rows strategy requires rows")
        rows = [int(r) for r in rows]
        if len(set(rows)) != len(rows):
            raise ValidationError(f"duplicate detector rows: {rows}")
        if any(r < 0 or r >= grid.n_x for r in rows):
            raise ValidationError(f"detector row outside [0, {grid.n_x - 1}]: {rows}")
    else:
        raise ValidationError(f"unknown detector strategy {strategy!r}")

    xs = grid.x_coords()
    ts = grid.t_coords()
    x = np.repeat(xs[rows], grid.n_t)
    t = np.tile(ts, len(rows))
    rho = grid.densities[rows, :].reshape(-1)
    v = grid.speeds[rows, :].reshape(-1)
    return ObservationSet(x=x, t=t, rho=rho, v=v, detector_rows=list(rows))


def sample_collocation(grid: TrafficGrid, n_c: int, seed: int, scheme="uniform-random") -> CollocationSet:
    """n_c unlabeled points in [x0, x0+L] x [t0, t0+T], deterministic per seed.

    "uniform-random" draws i.i.d. uniform; "grid" takes a uniformly strided
    subset of the flattened lattice (exhaustive when n_c = n_x*n_t).
    """
    if n_c < 1:
        raise ValidationError("n_c must be >= 1")
    if scheme == "uniform-random":
        rng = np.random.default_rng(seed)
        x = grid.x0 + rng.uniform(0.0, grid.length, n_c)
        t = grid.t0 + rng.uniform(0.0, grid.duration, n_c)
    elif scheme == "grid":
        total = grid.n_x * grid.n_t
        if n_c > total:
            raise ValidationError(f"grid scheme supports at most n_x*n_t={total} points")
        idx = np.unique(np.round(np.linspace(0, total - 1, n_c)).astype(int))
        rows, cols = np.unravel_index(idx, (grid.n_x, grid.n_t))
        x = grid.x_coords()[rows]
        t = grid.t_coords()[cols]
    else:
        raise ValidationError(f"unknown collocation scheme {scheme!r}")
    return CollocationSet(x=x, t=t)


def export_grid(grid: TrafficGrid, path):
    """Write the CSV schema: header nx,nt,dx,dt,x0,t0 then exhaustive
    row-major x_index,t_index,density_veh_per_m,speed_m_per_s rows.

    Floats are written with repr so a round-trip is bit-identical.
    """
    with open(path, "w") as fh:
        fh.write(",".join(GRID_HEADER) + "\n")
        fh.write(f"{grid.n_x},{grid.n_t},{grid.dx!r},{grid.dt!r},{grid.x0!r},{grid.t0!r}\n")
        fh.write("x_index,t_index,density_veh_per_m,speed_m_per_s\n")
        for i in range(grid.n_x):
            for j in range(grid.n_t):
                fh.write(f"{i},{j},{float(grid.densities[i, j])!r},{float(grid.speeds[i, j])!r}\n")


def ingest_grid(path, dx=None, dt=None) -> TrafficGrid:
    """Read the grid CSV; the header is authoritative for geometry.

    Passing dx/dt cross-checks them against the header (mismatch is an
    error). Missing cells, NaN, negative values, or shape disagreement
    with the header all reject the file.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3:
        raise ParseError(f"{path}: truncated file")
    if [c.strip() for c in lines[0].split(",")] != list(GRID_HEADER):
        raise ParseError(f"{path}: row 1: expected header {','.join(GRID_HEADER)}")
    try:
        fields = lines[1].split(",")
        n_x, n_t = int(fields[0]), int(fields[1])
        hdx, hdt, x0, t0 = (float(s) for s in fields[2:6])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: row 2: bad geometry line ({exc})") from None
    if dx is not None and not np.isclose(dx, hdx):
        raise ShapeError(f"{path}: dx={hdx} in header, caller expected {dx}")
    if dt is not None and not np.isclose(dt, hdt):
        raise ShapeError(f"{path}: dt={hdt} in header, caller expected {dt}")

    densities = np.full((n_x, n_t), np.nan)
    speeds = np.full((n_x, n_t), np.nan)
    for lineno, line in enumerate(lines[3:], start=4):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            i, j = int(parts[0]), int(parts[1])
            rho, v = float(parts[2]), float(parts[3])
        except (ValueError, IndexError):
            raise ParseError(f"{path}: row {lineno}: malformed cell line {line!r}") from None
        if not (0 <= i < n_x and 0 <= j < n_t):
            raise ShapeError(f"{path}: row {lineno}: index ({i},{j}) outside {n_x}x{n_t}")
        densities[i, j] = rho
        speeds[i, j] = v
    if np.isnan(densities).any() or np.isnan(speeds).any():
        missing = int(np.isnan(densities).sum())
        raise ValidationError(f"{path}: {missing} cells missing or NaN")
    try:
        return TrafficGrid(densities=densities, speeds=speeds, dx=hdx, dt=hdt, x0=x0, t0=t0)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
