"""Two-variable excitable-tissue simulation on a 2D grid with linear ECG readout.

The tissue model couples an action potential ``u`` and a recovery current ``v``:

    du/dt = d * lap(u) - k*u*(u - a)*(u - 1) - u*v + I_stim(t)
    dv/dt = eps(u, v) * (-v - k*u*(u - a - 1)),   eps(u, v) = e0 + mu1*v/(u + mu2)

integrated with forward Euler and an explicit 5-point Laplacian with no-flux
boundaries.  The per-node excitability ``a`` is the estimation target: it is
piecewise constant over a rectangular block partition of the grid, one value
per region.  Lead voltages are a linear map ``Y = H @ U`` of the nodal action
potential, optionally corrupted with Gaussian noise at a requested SNR.

All quantities are dimensionless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Physiological range of the excitability parameter: ~0.15 is normal tissue,
# ~0.5 is necrotic; values outside [0, 0.52] are rejected everywhere.
A_MIN = 0.0
A_MAX = 0.52

# Standard constants for this excitable-medium family.
DEFAULT_K = 8.0
DEFAULT_D = 0.1
DEFAULT_E0 = 0.002
DEFAULT_MU1 = 0.2
DEFAULT_MU2 = 0.3


class SimulationBlowupError(RuntimeError):
    """Raised when the integrator produces a non-finite state."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite state at time step {step}")


@dataclass
class GridGeometry:
    """Rectangular grid of nx*ny nodes with spacing h, row-major node ids."""

    nx: int
    ny: int
    h: float
    laplacian: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not self.h > 0:
            raise ValueError(f"node spacing must be positive, got {self.h}")
        self.laplacian = self._build_laplacian()

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    def node_index(self, i, j):
        return i * self.ny + j

    def node_positions(self) -> np.ndarray:
        """(N, 2) array of node coordinates (i*h, j*h)."""
        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        return np.column_stack([ii.ravel() * self.h, jj.ravel() * self.h]).astype(float)

    def _build_laplacian(self) -> sp.csr_matrix:
        # 5-point stencil with zero-Neumann boundaries: each missing neighbor
        # contributes nothing and the diagonal only counts existing neighbors,
        # so constant fields map to exactly zero.
        n = self.n_nodes
        rows, cols, vals = [], [], []
        inv_h2 = 1.0 / (self.h * self.h)
        for i in range(self.nx):
            for j in range(self.ny):
                me = self.node_index(i, j)
                neighbors = []
                if i > 0:
                    neighbors.append(self.node_index(i - 1, j))
                if i < self.nx - 1:
                    neighbors.append(self.node_index(i + 1, j))
                if j > 0:
                    neighbors.append(self.node_index(i, j - 1))
                if j < self.ny - 1:
                    neighbors.append(self.node_index(i, j + 1))
                for nb in neighbors:
                    rows.append(me)
                    cols.append(nb)
                    vals.append(inv_h2)
                rows.append(me)
                cols.append(me)
                vals.append(-len(neighbors) * inv_h2)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass
class RegionPartition:
    """Node-to-region map; region ids are dense in [0, n_regions)."""

    region_of_node: np.ndarray
    n_regions: int

    def __post_init__(self):
        self.region_of_node = np.asarray(self.region_of_node, dtype=int)
        present = np.unique(self.region_of_node)
        if present.size != self.n_regions or present[0] != 0 or present[-1] != self.n_regions - 1:
            raise ValueError("every region id in [0, n_regions) must own at least one node")


@dataclass
class APParams:
    """Reaction constants plus the per-node excitability field."""

    a_field: np.ndarray
    k: float = DEFAULT_K
    d: float = DEFAULT_D
    e0: float = DEFAULT_E0
    mu1: float = DEFAULT_MU1
    mu2: float = DEFAULT_MU2

    def __post_init__(self):
        self.a_field = np.asarray(self.a_field, dtype=float)
        if not (self.k > 0 and self.d >= 0 and self.e0 > 0 and self.mu1 >= 0 and self.mu2 > 0):
            raise ValueError("invalid reaction constants")
        if not np.all(np.isfinite(self.a_field)):
            raise ValueError("a_field contains non-finite values")
        if np.any(self.a_field < A_MIN) or np.any(self.a_field > A_MAX):
            raise ValueError(f"a_field entries must lie in [{A_MIN}, {A_MAX}]")


@dataclass
class StimulusProtocol:
    """Additive current on a node set during [t_on, t_off)."""

    stim_nodes: np.ndarray
    t_on: float = 0.0
    t_off: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        self.stim_nodes = np.asarray(self.stim_nodes, dtype=int)
        if self.stim_nodes.size == 0:
            raise ValueError("stimulus node set is empty")
        if not (self.t_off > self.t_on >= 0):
            raise ValueError("need t_off > t_on >= 0")
        if not self.amplitude > 0:
            raise ValueError("stimulus amplitude must be positive")


@dataclass
class SimulationResult:
    """Stored trajectory: u and v are (T, N); times holds snapshot times."""

    u: np.ndarray
    v: np.ndarray
    dt: float
    times: np.ndarray

    @property
    def n_stored(self) -> int:
        return self.u.shape[0]


@dataclass
class LeadField:
    """L x N matrix mapping nodal potential to lead voltages."""

    H: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.H.shape[0] < 1:
            raise ValueError("lead field needs at least one lead")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("lead field has non-finite entries")
        if np.any(np.all(self.H == 0.0, axis=1)):
            raise ValueError("every lead must see at least one node")

    @property
    def n_leads(self) -> int:
        return self.H.shape[0]


@dataclass
class Observation:
    """Lead voltages Y (leads x stored timesteps) and the SNR applied, if any."""

    Y: np.ndarray
    snr_db: float | None = None


def build_grid(nx: int, ny: int, h: float) -> GridGeometry:
    """Construct an nx-by-ny grid with spacing h and a no-flux Laplacian."""
    return GridGeometry(nx=int(nx), ny=int(ny), h=float(h))


def partition_grid(geometry: GridGeometry, rows: int, cols: int) -> RegionPartition:
    """Split the grid into rows*cols contiguous rectangular regions.

    Block extents differ by at most one grid line per axis.  Region id of
    node (i, j) is row_block(i) * cols + col_block(j).
    """
    rows, cols = int(rows), int(cols)
    if not (1 <= rows <= geometry.nx and 1 <= cols <= geometry.ny):
        raise ValueError(
            f"invalid block count {rows}x{cols} for a {geometry.nx}x{geometry.ny} grid"
        )
    block_of_i = np.empty(geometry.nx, dtype=int)
    for b, idx in enumerate(np.array_split(np.arange(geometry.nx), rows)):
        block_of_i[idx] = b
    block_of_j = np.empty(geometry.ny, dtype=int)
    for b, idx in enumerate(np.array_split(np.arange(geometry.ny), cols)):
        block_of_j[idx] = b
    region = (block_of_i[:, None] * cols + block_of_j[None, :]).ravel()
    return RegionPartition(region_of_node=region, n_regions=rows * cols)


def expand_parameters(theta: np.ndarray, partition: RegionPartition) -> np.ndarray:
    """Broadcast one excitability value per region to the full node field."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size != partition.n_regions:
        raise ValueError(
            f"theta has length {theta.size}, partition has {partition.n_regions} regions"
        )
    if np.any(theta < A_MIN) or np.any(theta > A_MAX) or not np.all(np.isfinite(theta)):
        raise ValueError(f"theta entries must lie in [{A_MIN}, {A_MAX}]")
    return theta[partition.region_of_node]


def block_stimulus(
    geometry: GridGeometry,
    origin: tuple[int, int],
    block: tuple[int, int],
    t_on: float = 0.0,
    t_off: float = 1.0,
    amplitude: float = 1.0,
) -> StimulusProtocol:
    """Pacing over a rectangular node patch anchored at `origin` (i0, j0)."""
    i0, j0 = origin
    i1 = min(i0 + block[0], geometry.nx)
    j1 = min(j0 + block[1], geometry.ny)
    if not (0 <= i0 < i1 and 0 <= j0 < j1):
        raise ValueError("stimulus block lies outside the grid")
    nodes = [geometry.node_index(i, j) for i in range(i0, i1) for j in range(j0, j1)]
    return StimulusProtocol(np.array(nodes), t_on=t_on, t_off=t_off, amplitude=amplitude)


def corner_block_stimulus(
    geometry: GridGeometry,
    block: tuple[int, int] = (3, 3),
    t_on: float = 0.0,
    t_off: float = 1.0,
    amplitude: float = 1.0,
) -> StimulusProtocol:
    """Default pacing protocol: a block-sized patch at the (0, 0) corner."""
    return block_stimulus(geometry, (0, 0), block, t_on=t_on, t_off=t_off, amplitude=amplitude)


def simulate_ap(
    geometry: GridGeometry,
    params: APParams,
    stim: StimulusProtocol | None,
    dt: float,
    t_end: float,
    store_every: int = 1,
) -> SimulationResult:
    """Integrate the reaction-diffusion system from rest (u = v = 0).

    Forward Euler for the reaction, explicit 5-point diffusion; `stim` of None
    means no pacing (the rest state is then an exact fixed point).  The
    diffusion stability bound dt <= h^2/(4 d) is enforced up front; snapshots
    are stored at steps 0, store_every, 2*store_every, ...

    Raises
    ------
    ValueError
        On a violated stability bound or invalid step arguments.
    SimulationBlowupError
        If the state becomes non-finite; carries the failing step index.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    store_every = int(store_every)
    if store_every < 1:
        raise ValueError("store_every must be >= 1")
    if params.d > 0:
        dt_max = geometry.h**2 / (4.0 * params.d)
        if dt > dt_max * (1 + 1e-12):
            raise ValueError(
                f"dt={dt} violates the diffusion stability bound dt <= h^2/(4d) = {dt_max}"
            )
    if params.a_field.shape != (geometry.n_nodes,):
        raise ValueError("a_field length does not match the grid")

    n_steps = int(round(t_end / dt))
    n_stored = n_steps // store_every + 1
    n = geometry.n_nodes
    u = np.zeros(n)
    v = np.zeros(n)
    u_out = np.empty((n_stored, n))
    v_out = np.empty((n_stored, n))
    times = np.empty(n_stored)
    u_out[0] = u
    v_out[0] = v
    times[0] = 0.0

    lap = geometry.laplacian
    a = params.a_field
    k, d, e0, mu1, mu2 = params.k, params.d, params.e0, params.mu1, params.mu2
    stored = 1
    # overflow is detected via the finiteness check, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(n_steps):
            t = step * dt
            ku = k * u
            uma = u - a
            react = ku * uma * (u - 1.0)
            eps = e0 + mu1 * v / (u + mu2)
            du = d * (lap @ u) - react - u * v
            if stim is not None and stim.t_on <= t < stim.t_off:
                du[stim.stim_nodes] += stim.amplitude
            dv = eps * (-v - ku * (uma - 1.0))
            u = u + dt * du
            v = v + dt * dv
            if not np.isfinite(u.sum()):
                raise SimulationBlowupError(step + 1)
            if (step + 1) % store_every == 0:
                u_out[stored] = u
                v_out[stored] = v
                times[stored] = (step + 1) * dt
                stored += 1

    return SimulationResult(u=u_out[:stored], v=v_out[:stored], dt=dt, times=times[:stored])


def circle_electrodes(geometry: GridGeometry, count: int, radius: float | None = None) -> np.ndarray:
    """Electrode positions on a circle around the grid center.

    The default radius is 0.6x the grid diagonal, which keeps every electrode
    outside the grid's bounding box.
    """
    if count < 1:
        raise ValueError("need at least one electrode")
    wx = (geometry.nx - 1) * geometry.h
    wy = (geometry.ny - 1) * geometry.h
    if radius is None:
        radius = 0.6 * float(np.hypot(wx, wy))
    center = np.array([wx / 2.0, wy / 2.0])
    angles = 2.0 * np.pi * np.arange(count) / count
    return center + radius * np.column_stack([np.cos(angles), np.sin(angles)])


def build_lead_field(
    geometry: GridGeometry, electrodes: np.ndarray, seed: int | None = None
) -> LeadField:
    """Distance-weighted lead field: H[l, n] = 1 / (dist(electrode_l, node_n) + h).

    Deterministic given the inputs; `seed` is accepted for interface symmetry
    with the noisy operations but is never used.
    """
    del seed
    electrodes = np.atleast_2d(np.asarray(electrodes, dtype=float))
    if electrodes.size == 0:
        raise ValueError("electrode list is empty")
    pos = geometry.node_positions()
    diff = electrodes[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    return LeadField(H=1.0 / (dist + geometry.h))


def measure_ecg(sim: SimulationResult, lead_field: LeadField) -> Observation:
    """Project the stored action potential through the lead field: Y = H u^T."""
    if lead_field.H.shape[1] != sim.u.shape[1]:
        raise ValueError(
            f"lead field has {lead_field.H.shape[1]} columns, simulation has "
            f"{sim.u.shape[1]} nodes"
        )
    return Observation(Y=lead_field.H @ sim.u.T, snr_db=None)


def add_noise(obs: Observation, snr_db: float | None, seed=None) -> Observation:
    """Add iid Gaussian noise with variance mean(Y^2) * 10^(-snr_db/10).

    snr_db of None or +inf returns the signal unchanged.  Deterministic for a
    fixed seed.
    """
    Y = np.asarray(obs.Y, dtype=float)
    if Y.size == 0:
        raise ValueError("observation is empty")
    if not np.all(np.isfinite(Y)):
        raise ValueError("observation has non-finite entries")
    if snr_db is None or np.isinf(snr_db):
        return Observation(Y=Y.copy(), snr_db=snr_db)
    sigma = np.sqrt(np.mean(Y**2) * 10.0 ** (-snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return Observation(Y=Y + rng.normal(0.0, sigma, size=Y.shape), snr_db=float(snr_db))
