"""Incompressible two-phase (oil/water) flow on a 2-D Cartesian grid.

IMPES scheme: a finite-volume pressure solve with Peaceman well indices,
then upwind saturation transport — explicit with CFL-limited substeps or
fully implicit (Newton) per step.  Producers run on fixed bottom-hole
pressure, injectors on fixed water rate.  Units follow field practice:
permeability in mD, pressure in kgf/cm^2, rates in m^3/day, lengths in m.

The measurement vector is assembled in a fixed channel order (per producer:
oil rate, water rate, BHP; per injector: BHP, optional water rate) shared by
simulated data, observations and the noise covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericalError
from .fields import Grid, Realization

# q [m^3/day] = DARCY_CONST * k [mD] * A [m^2] / L [m] * lambda [1/cP] * dp [kgf/cm^2]
_MD_M2 = 9.869233e-16
_KGFCM2_PA = 98066.5
_DAY_S = 86400.0
_CP_PAS = 1e-3
DARCY_CONST = _MD_M2 * _KGFCM2_PA * _DAY_S / _CP_PAS  # ~8.3622e-3


@dataclass(frozen=True)
class WellSpec:
    name: str
    i: int                      # x index (column)
    j: int                      # y index (row)
    role: str                   # producer | injector
    control: float              # min BHP [kgf/cm^2] or max WIR [m^3/day]
    radius: float = 0.1
    bhp_limit: float | None = None   # injector ceiling; rate throttles when hit

    def validate(self, grid: Grid) -> None:
        if not (0 <= self.i < grid.nx and 0 <= self.j < grid.ny):
            raise ConfigError(f"well {self.name} cell ({self.i},{self.j}) outside {grid.nx}x{grid.ny} grid")
        if self.role not in ("producer", "injector"):
            raise ConfigError(f"well {self.name} has unknown role {self.role!r}")
        if self.bhp_limit is not None and self.role != "injector":
            raise ConfigError(f"bhp_limit only applies to injectors (well {self.name})")


@dataclass(frozen=True)
class FluidRock:
    mu_w: float = 1.0           # cP
    mu_o: float = 1.0
    swc: float = 0.2
    sor: float = 0.2
    nw: float = 2.0
    no: float = 2.0
    krw_end: float = 1.0
    kro_end: float = 1.0
    porosity: float = 0.2
    thickness: float = 10.0     # m


@dataclass(frozen=True)
class Schedule:
    total_days: float = 900.0
    report_every: float = 90.0
    pressure_every: float = 15.0
    mode: str = "explicit"      # explicit | implicit
    cfl: float = 0.8

    def __post_init__(self):
        if self.total_days <= 0 or self.report_every <= 0 or self.pressure_every <= 0:
            raise ConfigError("schedule intervals must be positive")
        n = self.report_every / self.pressure_every
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("pressure_every must divide report_every")
        if self.mode not in ("explicit", "implicit"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")

    @property
    def report_times(self) -> np.ndarray:
        n = int(round(self.total_days / self.report_every))
        return self.report_every * np.arange(1, n + 1)


@dataclass
class SimState:
    pressure: np.ndarray        # (ny, nx)
    sw: np.ndarray              # (ny, nx)
    time: float = 0.0


# -- relative permeability -------------------------------------------------------


def _sn(sw: np.ndarray, fr: FluidRock) -> np.ndarray:
    return np.clip((sw - fr.swc) / (1.0 - fr.swc - fr.sor), 0.0, 1.0)


def mobilities(sw: np.ndarray, fr: FluidRock) -> tuple[np.ndarray, np.ndarray]:
    sn = _sn(sw, fr)
    lam_w = fr.krw_end * sn**fr.nw / fr.mu_w
    lam_o = fr.kro_end * (1.0 - sn) ** fr.no / fr.mu_o
    return lam_w, lam_o


def fractional_flow(sw: np.ndarray, fr: FluidRock) -> np.ndarray:
    lam_w, lam_o = mobilities(sw, fr)
    return lam_w / (lam_w + lam_o)


def dfw_dsw(sw, fr: FluidRock):
    sw = np.asarray(sw, dtype=np.float64)
    sn = _sn(sw, fr)
    span = 1.0 - fr.swc - fr.sor
    lw = fr.krw_end * sn**fr.nw / fr.mu_w
    lo = fr.kro_end * (1.0 - sn) ** fr.no / fr.mu_o
    dlw = fr.krw_end * fr.nw * np.where(sn > 0, sn ** (fr.nw - 1.0), 0.0) / fr.mu_w / span
    dlo = -fr.kro_end * fr.no * np.where(sn < 1, (1.0 - sn) ** (fr.no - 1.0), 0.0) / fr.mu_o / span
    tot = lw + lo
    d = (dlw * tot - lw * (dlw + dlo)) / tot**2
    inside = (sw > fr.swc) & (sw < 1.0 - fr.sor)
    return np.where(inside, d, 0.0)


_SLOPE_CACHE: dict[FluidRock, float] = {}


def max_fw_slope(fr: FluidRock) -> float:
    cached = _SLOPE_CACHE.get(fr)
    if cached is None:
        s = np.linspace(fr.swc + 1e-9, 1.0 - fr.sor - 1e-9, 2001)
        cached = float(dfw_dsw(s, fr).max())
        _SLOPE_CACHE[fr] = cached
    return cached


# -- pressure solve ---------------------------------------------------------------


def _well_index(k_md: float, grid: Grid, fr: FluidRock, radius: float) -> float:
    r_eq = 0.2 * grid.dx
    return DARCY_CONST * 2.0 * np.pi * k_md * fr.thickness / np.log(r_eq / radius)


def _face_transmissibilities(grid: Grid, k_md: np.ndarray, lam_t: np.ndarray,
                             fr: FluidRock) -> tuple[np.ndarray, np.ndarray]:
    klam = k_md * lam_t

    def harm(a, b):
        return 2.0 * a * b / (a + b)

    tx = DARCY_CONST * fr.thickness * grid.dy / grid.dx * harm(klam[:, :-1], klam[:, 1:])
    ty = DARCY_CONST * fr.thickness * grid.dx / grid.dy * harm(klam[:-1, :], klam[1:, :])
    return tx, ty


def solve_pressure(grid: Grid, k_md: np.ndarray, sw: np.ndarray, wells: list[WellSpec],
                   fr: FluidRock) -> tuple[np.ndarray, dict[str, dict], dict[str, np.ndarray]]:
    """TPFA pressure solve.

    Returns the pressure field, per-well records (rates, bhp), and the face
    fluxes transport needs.  Transmissibilities use the harmonic mean of cell
    k*lambda_t; at least one BHP-controlled well must be present to fix the
    pressure level.
    """
    if np.any(k_md <= 0):
        raise NumericalError("permeability must be positive everywhere")
    if not any(w.role == "producer" for w in wells):
        raise NumericalError("pressure system is singular without a BHP-controlled well")
    for w in wells:
        w.validate(grid)
    ny, nx = grid.shape
    n = ny * nx
    lam_w, lam_o = mobilities(sw, fr)
    lam_t = lam_w + lam_o
    tx, ty = _face_transmissibilities(grid, k_md, lam_t, fr)

    idx = np.arange(n).reshape(ny, nx)
    ax = idx[:, :-1].ravel()
    bx = idx[:, 1:].ravel()
    ay = idx[:-1, :].ravel()
    by = idx[1:, :].ravel()
    t_all = np.concatenate([tx.ravel(), ty.ravel()])
    a_all = np.concatenate([ax, ay])
    b_all = np.concatenate([bx, by])

    wi_lam: dict[str, float] = {}
    for w in wells:
        wi = _well_index(float(k_md[w.j, w.i]), grid, fr, w.radius)
        wi_lam[w.name] = wi * float(lam_t[w.j, w.i])

    # injectors run at their rate unless that would exceed bhp_limit; throttled
    # wells switch to BHP control (outer loop converges in <= n_injector passes)
    bhp_mode = {w.name: False for w in wells if w.role == "injector"}
    for _ in range(max(1, sum(1 for w in wells if w.role == "injector")) + 1):
        diag = np.zeros(n)
        np.add.at(diag, a_all, t_all)
        np.add.at(diag, b_all, t_all)
        rhs = np.zeros(n)
        for w in wells:
            c = idx[w.j, w.i]
            wl = wi_lam[w.name]
            if w.role == "producer":
                diag[c] += wl
                rhs[c] += wl * w.control
            elif bhp_mode[w.name]:
                diag[c] += wl
                rhs[c] += wl * w.bhp_limit
            else:
                rhs[c] += w.control

        rows = np.concatenate([a_all, b_all, np.arange(n)])
        cols = np.concatenate([b_all, a_all, np.arange(n)])
        vals = np.concatenate([-t_all, -t_all, diag])
        a_mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        p = spla.spsolve(a_mat, rhs)
        if not np.isfinite(p).all():
            raise NumericalError("pressure solve returned non-finite values")
        p2 = p.reshape(ny, nx)
        switched = False
        for w in wells:
            if w.role != "injector" or w.bhp_limit is None or bhp_mode[w.name]:
                continue
            bhp = float(p2[w.j, w.i]) + w.control / wi_lam[w.name]
            if bhp > w.bhp_limit:
                bhp_mode[w.name] = True
                switched = True
        if not switched:
            break
    residual = np.linalg.norm(a_mat @ p - rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and residual > 1e-8 * scale:
        raise NumericalError(f"pressure residual {residual:.3e} exceeds tolerance")

    fw = fractional_flow(sw, fr)
    records: dict[str, dict] = {}
    for w in wells:
        pc = float(p2[w.j, w.i])
        if w.role == "producer":
            q_total = wi_lam[w.name] * (pc - w.control)      # >= 0 means production
            f = float(fw[w.j, w.i])
            records[w.name] = {
                "role": "producer",
                "cell": (w.j, w.i),
                "q_total": q_total,
                "q_water": f * q_total,
                "q_oil": (1.0 - f) * q_total,
                "bhp": w.control,
            }
        elif bhp_mode[w.name]:
            q_total = wi_lam[w.name] * (w.bhp_limit - pc)
            records[w.name] = {
                "role": "injector",
                "cell": (w.j, w.i),
                "q_total": q_total,
                "q_water": q_total,
                "q_oil": 0.0,
                "bhp": w.bhp_limit,
            }
        else:
            records[w.name] = {
                "role": "injector",
                "cell": (w.j, w.i),
                "q_total": w.control,
                "q_water": w.control,
                "q_oil": 0.0,
                "bhp": pc + w.control / wi_lam[w.name],
            }

    fluxes = {
        "fx": tx * (p2[:, :-1] - p2[:, 1:]),   # positive: flow to +x
        "fy": ty * (p2[:-1, :] - p2[1:, :]),   # positive: flow to +y
    }
    return p2, records, fluxes


# -- saturation transport ----------------------------------------------------------


def _divergence_water(grid: Grid, sw: np.ndarray, fluxes: dict, records: dict,
                      fr: FluidRock) -> np.ndarray:
    """Net water inflow per cell [m^3/day] with upwind fractional flow."""
    fw = fractional_flow(sw, fr)
    fx, fy = fluxes["fx"], fluxes["fy"]
    fwx = np.where(fx >= 0, fw[:, :-1], fw[:, 1:])
    fwy = np.where(fy >= 0, fw[:-1, :], fw[1:, :])
    wx = fwx * fx
    wy = fwy * fy
    net = np.zeros(grid.shape)
    net[:, :-1] -= wx
    net[:, 1:] += wx
    net[:-1, :] -= wy
    net[1:, :] += wy
    for rec in records.values():
        j, i = rec["cell"]
        if rec["role"] == "injector":
            net[j, i] += rec["q_total"]
        else:
            net[j, i] -= fw[j, i] * rec["q_total"]
    return net


def cfl_dt_limit(grid: Grid, fluxes: dict, records: dict, fr: FluidRock, cfl: float) -> float:
    """Largest stable explicit dt [days] for the current total-velocity field."""
    pv = grid.dx * grid.dy * fr.thickness * fr.porosity
    out = np.zeros(grid.shape)
    fx, fy = fluxes["fx"], fluxes["fy"]
    out[:, :-1] += np.maximum(fx, 0.0)
    out[:, 1:] += np.maximum(-fx, 0.0)
    out[:-1, :] += np.maximum(fy, 0.0)
    out[1:, :] += np.maximum(-fy, 0.0)
    for rec in records.values():
        if rec["role"] == "producer":
            j, i = rec["cell"]
            out[j, i] += max(rec["q_total"], 0.0)
    peak = float(out.max(initial=0.0))
    if peak <= 0:
        return np.inf
    return cfl * pv / (peak * max_fw_slope(fr))


def advance_saturation(grid: Grid, state: SimState, fluxes: dict, records: dict,
                       fr: FluidRock, dt: float, mode: str = "explicit",
                       cfl: float = 1.0) -> tuple[np.ndarray, float]:
    """Advance water saturation by dt.  Returns (sw_new, mass-balance residual).

    Explicit mode raises if dt exceeds the CFL limit; implicit mode accepts any
    dt, converging Newton tightly so the finite-volume update conserves water
    to round-off.  Saturations stay in [swc, 1 - sor] through the physics (the
    fractional-flow endpoints), not through output clipping.
    """
    pv = grid.dx * grid.dy * fr.thickness * fr.porosity
    if mode == "explicit":
        dt_max = cfl_dt_limit(grid, fluxes, records, fr, cfl)
        if dt > dt_max * (1 + 1e-9):
            raise NumericalError(f"explicit saturation step dt={dt:.4g} d exceeds CFL limit {dt_max:.4g} d")
        net = _divergence_water(grid, state.sw, fluxes, records, fr)
        sw_new = state.sw + dt * net / pv
        inflow = net.sum() * dt
    elif mode == "implicit":
        sw_new = _implicit_saturation(grid, state.sw, fluxes, records, fr, dt, pv)
        inflow = _divergence_water(grid, sw_new, fluxes, records, fr).sum() * dt
    else:
        raise ConfigError(f"unknown transport mode {mode!r}")

    acc = (sw_new - state.sw).sum() * pv
    gross = sum(abs(rec["q_total"]) for rec in records.values()) * dt
    scale = max(abs(inflow), gross, 1e-30)
    residual = abs(acc - inflow) / scale
    return sw_new, residual


def _implicit_saturation(grid, sw0, fluxes, records, fr, dt, pv) -> np.ndarray:
    ny, nx = grid.shape
    n = ny * nx
    idx = np.arange(n).reshape(ny, nx)
    fx, fy = fluxes["fx"], fluxes["fy"]

    ax = idx[:, :-1].ravel()
    bx = idx[:, 1:].ravel()
    ay = idx[:-1, :].ravel()
    by = idx[1:, :].ravel()
    f_all = np.concatenate([fx.ravel(), fy.ravel()])
    a_all = np.concatenate([ax, ay])
    b_all = np.concatenate([bx, by])
    up_all = np.where(f_all >= 0, a_all, b_all)
    dn_all = np.where(f_all >= 0, b_all, a_all)

    prod_cells = []
    prod_q = []
    for rec in records.values():
        if rec["role"] == "producer":
            j, i = rec["cell"]
            prod_cells.append(idx[j, i])
            prod_q.append(rec["q_total"])
    prod_cells = np.asarray(prod_cells, dtype=np.int64)
    prod_q = np.asarray(prod_q)

    sw = sw0.copy()
    eye = np.arange(n)
    for _ in range(60):
        net = _divergence_water(grid, sw, fluxes, records, fr)
        resid = (sw - sw0) * pv / dt - net
        if np.abs(resid).max() * dt / pv < 1e-12:
            return sw
        dfw = dfw_dsw(sw, fr).reshape(-1)
        # outflow leaves the upwind cell, so its diagonal gains |f| * dfw(up)
        diag = np.full(n, pv / dt)
        np.add.at(diag, up_all, np.abs(f_all) * dfw[up_all])
        off_vals = -np.abs(f_all) * dfw[up_all]
        if prod_cells.size:
            np.add.at(diag, prod_cells, dfw[prod_cells] * np.maximum(prod_q, 0.0))
        rows = np.concatenate([dn_all, eye])
        cols = np.concatenate([up_all, eye])
        vals = np.concatenate([off_vals, diag])
        jac = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        delta = spla.spsolve(jac, -resid.reshape(-1))
        step = np.clip(delta, -0.2, 0.2).reshape(ny, nx)
        sw = np.clip(sw + step, fr.swc, 1.0 - fr.sor)
    raise NumericalError("implicit saturation Newton failed to converge in 60 iterations")


# -- measurement channel layout ------------------------------------------------------


@dataclass(frozen=True)
class ChannelLayout:
    """Fixed ordering of measurement channels, part of the on-disk contract."""

    producers: tuple[str, ...]
    injectors: tuple[str, ...]
    include_injector_rate: bool = False

    @classmethod
    def from_wells(cls, wells: list[WellSpec], include_injector_rate: bool = False) -> "ChannelLayout":
        prods = tuple(w.name for w in wells if w.role == "producer")
        injs = tuple(w.name for w in wells if w.role == "injector")
        return cls(prods, injs, include_injector_rate)

    @property
    def per_time(self) -> int:
        per_inj = 2 if self.include_injector_rate else 1
        return 3 * len(self.producers) + per_inj * len(self.injectors)

    def channel_names(self) -> list[str]:
        names = []
        for p in self.producers:
            names += [f"{p}.oil_rate", f"{p}.water_rate", f"{p}.bhp"]
        for i in self.injectors:
            names.append(f"{i}.bhp")
            if self.include_injector_rate:
                names.append(f"{i}.water_rate")
        return names

    def channel_kinds(self) -> list[str]:
        kinds = []
        for _ in self.producers:
            kinds += ["prod_rate", "prod_rate", "bhp"]
        for _ in self.injectors:
            kinds.append("bhp")
            if self.include_injector_rate:
                kinds.append("inj_rate")
        return kinds


@dataclass
class DataVector:
    """Stacked measurements: all channels at report time 0, then time 1, ..."""

    values: np.ndarray
    layout: ChannelLayout
    report_times: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expect = self.layout.per_time * len(self.report_times)
        if self.values.shape != (expect,):
            raise ValueError(f"data vector length {self.values.shape} != layout expectation ({expect},)")

    @property
    def n_data(self) -> int:
        return self.values.size

    def to_csv(self, path) -> None:
        names = self.layout.channel_names()
        with open(path, "w") as f:
            f.write("# channel order per report time: " + ",".join(names) + "\n")
            f.write("time_days," + ",".join(names) + "\n")
            block = self.values.reshape(len(self.report_times), self.layout.per_time)
            for t, row in zip(self.report_times, block):
                f.write(f"{t:.6g}," + ",".join(f"{v:.10g}" for v in row) + "\n")


# -- full simulation ---------------------------------------------------------------


def simulate(m: Realization, wells: list[WellSpec], schedule: Schedule, fr: FluidRock,
             layout: ChannelLayout | None = None,
             diagnostics: dict | None = None) -> DataVector:
    """Forward operator: log-permeability field -> measurement vector.

    Pure function of its inputs; pass a ``diagnostics`` dict to receive the
    worst per-step mass-balance residual and the final saturation field.
    """
    if m.kind == "categorical-facies":
        from .fields import facies_to_log_perm

        m = facies_to_log_perm(m)
    if m.kind != "continuous-logperm":
        raise ConfigError(f"simulate expects a log-permeability field, got kind {m.kind!r}")
    grid = m.grid
    layout = layout or ChannelLayout.from_wells(wells)
    k_md = np.exp(m.values)
    state = SimState(pressure=np.zeros(grid.shape), sw=np.full(grid.shape, fr.swc), time=0.0)

    report_times = schedule.report_times
    rows = []
    t = 0.0
    worst_resid = 0.0
    n_steps = int(round(schedule.total_days / schedule.pressure_every))
    for step in range(1, n_steps + 1):
        target = step * schedule.pressure_every
        _, records, fluxes = solve_pressure(grid, k_md, state.sw, wells, fr)
        dt_total = target - t
        if schedule.mode == "explicit":
            dt_max = cfl_dt_limit(grid, fluxes, records, fr, schedule.cfl)
            nsub = max(1, int(np.ceil(dt_total / dt_max)))
            sub = dt_total / nsub
            pv = grid.dx * grid.dy * fr.thickness * fr.porosity
            gross = sum(abs(rec["q_total"]) for rec in records.values()) * sub
            for _ in range(nsub):
                net = _divergence_water(grid, state.sw, fluxes, records, fr)
                sw_new = state.sw + sub * net / pv
                acc = (sw_new - state.sw).sum() * pv
                inflow = net.sum() * sub
                resid = abs(acc - inflow) / max(abs(inflow), gross, 1e-30)
                state.sw = sw_new
                worst_resid = max(worst_resid, resid)
                if resid > 1e-8:
                    raise NumericalError(f"mass balance residual {resid:.3e} at t={t:.1f} d")
        else:
            state.sw, resid = advance_saturation(grid, state, fluxes, records, fr, dt_total, mode="implicit")
            worst_resid = max(worst_resid, resid)
            if resid > 1e-8:
                raise NumericalError(f"mass balance residual {resid:.3e} at t={t:.1f} d")
        t = target
        state.time = t
        if np.any(np.isclose(report_times, t)):
            _, records, _ = solve_pressure(grid, k_md, state.sw, wells, fr)
            rows.append(_report_row(records, layout))
    values = np.concatenate(rows) if rows else np.zeros(0)
    if diagnostics is not None:
        diagnostics["max_mass_residual"] = worst_resid
        diagnostics["final_sw"] = state.sw.copy()
    return DataVector(values, layout, report_times)


def _report_row(records: dict, layout: ChannelLayout) -> np.ndarray:
    row = []
    for p in layout.producers:
        rec = records[p]
        row += [rec["q_oil"], rec["q_water"], rec["bhp"]]
    for i in layout.injectors:
        rec = records[i]
        row.append(rec["bhp"])
        if layout.include_injector_rate:
            row.append(rec["q_water"])
    return np.asarray(row)


# -- observation model ----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    prod_rate_std: float = 4.0   # m^3/day
    inj_rate_std: float = 3.0    # m^3/day
    bhp_std: float = 2.0         # kgf/cm^2

    def stds_for(self, layout: ChannelLayout, n_times: int) -> np.ndarray:
        table = {"prod_rate": self.prod_rate_std, "inj_rate": self.inj_rate_std, "bhp": self.bhp_std}
        per_time = np.array([table[k] for k in layout.channel_kinds()])
        return np.tile(per_time, n_times)


def observe(d_true: DataVector, noise: NoiseSpec, seed: int) -> tuple[DataVector, np.ndarray]:
    """Perturb true data with independent Gaussian noise; returns (d_obs, diag of C_D).

    A zero-noise spec passes the data through unchanged and yields a zero
    covariance, which downstream consumers reject where C_D must be inverted.
    """
    stds = noise.stds_for(d_true.layout, len(d_true.report_times))
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, size=stds.shape) * stds
    d_obs = DataVector(d_true.values + eps, d_true.layout, d_true.report_times)
    return d_obs, stds**2


def default_well_pattern(grid: Grid, bhp: float = 200.0, wir: float = 500.0) -> list[WellSpec]:
    """Nine producers on a 3x3 lattice, four injectors at the five-spot centers.

    Positions are mirror-symmetric by construction, so a homogeneous field on
    an odd-sized grid produces exactly symmetric rates.
    """
    def axis_positions(n: int) -> tuple[list[int], list[int]]:
        a = int(round(0.1 * (n - 1)))
        c = (n - 1) // 2
        prods = [a, c, n - 1 - a]
        b = (a + c) // 2
        injs = [b, n - 1 - b]
        return prods, injs

    px, ix_ = axis_positions(grid.nx)
    py, iy_ = axis_positions(grid.ny)
    wells = []
    k = 1
    for j in py:
        for i in px:
            wells.append(WellSpec(f"P{k}", i, j, "producer", bhp))
            k += 1
    k = 1
    for j in iy_:
        for i in ix_:
            wells.append(WellSpec(f"I{k}", i, j, "injector", wir))
            k += 1
    return wells
