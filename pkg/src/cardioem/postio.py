"""Biomarkers, stress diagnostics, file outputs and run configuration.

Units at the file boundary are clinical (mmHg, mL, ms); everything internal
stays SI. Every output file carries the configuration hash so results can be
traced back to the exact run settings.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import os
from configparser import ConfigParser
from dataclasses import dataclass, field

import numpy as np

from .activation import ActivationParams
from .circulation import CircuitParams
from .ep import EPParams
from .fibers import AngleSet, D_RBM, R_RBM, mesh_centerline
from .mechanics import MaterialParams, active_piola, passive_piola
from .mesh import (
    BoundaryTag, GeometryKind, GeometrySpec, Mesh, write_vtk,
)


class PostIOError(Exception):
    pass


# named cross-fiber active-tension arrangements (n_f, n_s, n_n)
CROSS_FIBER_PRESETS = {
    "pure": (1.0, 0.0, 0.0),
    "f-n": (0.7, 0.0, 0.3),
    "f-s": (0.7, 0.3, 0.0),
    "iv": (0.7, 0.0, 0.3),
}


# ---------------------------------------------------------------------------
# Biomarkers
# ---------------------------------------------------------------------------

@dataclass
class Biomarkers:
    """Clinical summary of one or more beats (volumes mL, pressures mmHg)."""

    edv_lv: float
    esv_lv: float
    ef_lv: float        # %
    sv_lv: float        # mL
    edv_rv: float
    esv_rv: float
    ef_rv: float
    sv_rv: float
    p_lv_peak: float    # mmHg
    p_rv_peak: float
    lfs: float          # %, longitudinal fractional shortening
    wt: float           # %, fractional wall thickening
    activation_ms: float = float("nan")

    def as_dict(self):
        return dataclasses.asdict(self)


def _volume_markers(v):
    v = np.asarray(v, dtype=float)
    edv, esv = v.max(), v.min()
    if edv <= 0:
        raise PostIOError("volume trace must be positive")
    return edv, esv, (edv - esv) / edv * 100.0, edv - esv


def apico_basal_length(mesh: Mesh, d=None):
    """Apex-to-base extent of the left endocardium along the centerline."""
    axis = mesh_centerline(mesh)
    nodes = mesh.nodes_with_tag(BoundaryTag.ENDO_LV)
    x = mesh.nodes[nodes]
    if d is not None:
        x = x + np.asarray(d).reshape(-1, 3)[nodes]
    proj = x @ axis
    return proj.max() - proj.min()


def lv_wall_thickness(mesh: Mesh, fields, d=None, band=0.15):
    """Mean left-ventricular wall thickness on the mid apico-basal slice.

    Estimated as the difference between the mean epicardial and mean
    endocardial distances from the long axis, over nodes with the
    apico-basal coordinate within ``band`` of 0.5.
    """
    axis = mesh_centerline(mesh)
    x = mesh.nodes if d is None else mesh.nodes + np.asarray(d).reshape(-1, 3)

    def mean_radius(tag):
        nodes = mesh.nodes_with_tag(tag)
        sel = nodes[(np.abs(fields.psi[nodes] - 0.5) < band)
                    & (fields.xi_hat[nodes] >= 0.5)]
        if len(sel) == 0:
            raise PostIOError("empty mid-ventricular slice; widen the band")
        rel = x[sel] - x[sel].mean(axis=0)
        perp = rel - np.outer(rel @ axis, axis)
        return np.linalg.norm(perp, axis=1).mean()

    return mean_radius(BoundaryTag.EPI) - mean_radius(BoundaryTag.ENDO_LV)


def compute_biomarkers(times, p_lv, p_rv, v_lv, v_rv, snapshots=None,
                       activation_ms=float("nan")) -> Biomarkers:
    """Clinical biomarkers from a PV history plus two geometry snapshots.

    Pressures in mmHg, volumes in mL. ``snapshots`` is a tuple
    (mesh, fields, d_start, d_end_systole) used for the shape biomarkers;
    omitting it is an error because LFS and WT are part of the contract.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise PostIOError("empty PV history")
    if snapshots is None:
        raise PostIOError("missing geometry snapshots (need start and "
                          "end-systole displacement fields)")
    mesh, fields, d0, d_es = snapshots
    edv_l, esv_l, ef_l, sv_l = _volume_markers(v_lv)
    edv_r, esv_r, ef_r, sv_r = _volume_markers(v_rv)
    L0 = apico_basal_length(mesh, d0)
    L = apico_basal_length(mesh, d_es)
    T0 = lv_wall_thickness(mesh, fields, d0)
    T = lv_wall_thickness(mesh, fields, d_es)
    return Biomarkers(
        edv_lv=edv_l, esv_lv=esv_l, ef_lv=ef_l, sv_lv=sv_l,
        edv_rv=edv_r, esv_rv=esv_r, ef_rv=ef_r, sv_rv=sv_r,
        p_lv_peak=float(np.max(p_lv)), p_rv_peak=float(np.max(p_rv)),
        lfs=(L0 - L) / L0 * 100.0, wt=(T - T0) / T0 * 100.0,
        activation_ms=activation_ms)


# ---------------------------------------------------------------------------
# Axial stress diagnostics
# ---------------------------------------------------------------------------

def axial_stresses(problem, d, Ta):
    """Axial stress scalars (sigma_ff, sigma_ss, sigma_nn) per quadrature
    point: sigma_aa = (P a0) . (F a0 / |F a0|) for each material direction.

    ``problem`` is a MechanicsProblem, d the flat displacement vector and Ta
    the nodal active tension field.
    """
    F = problem.deformation_gradient(np.asarray(d).reshape(-1, 3))
    P = passive_piola(F, problem.dirs, problem.params) \
        + active_piola(F, problem.dirs, problem.ta_at_qp(Ta),
                       (problem.params.n_f, problem.params.n_s,
                        problem.params.n_n))
    out = []
    for a0 in problem.dirs:
        Pa = np.einsum("eqab,eqb->eqa", P, a0)
        Fa = np.einsum("eqab,eqb->eqa", F, a0)
        Fa = Fa / np.linalg.norm(Fa, axis=-1, keepdims=True)
        out.append(np.einsum("eqa,eqa->eq", Pa, Fa))
    return tuple(out)


def stress_trace(sigma):
    """(min, mean, max) of one axial stress field, for time traces."""
    return float(sigma.min()), float(sigma.mean()), float(sigma.max())


# ---------------------------------------------------------------------------
# CSV and report writers
# ---------------------------------------------------------------------------

class TimeSeriesCSV:
    """Append-only CSV writer with a fixed header row."""

    def __init__(self, path, columns, config_hash=""):
        self.path = path
        self.columns = list(columns)
        with open(path, "w", newline="") as f:
            if config_hash:
                f.write(f"# config {config_hash}\n")
            csv.writer(f).writerow(self.columns)

    def append(self, row):
        row = list(row)
        if len(row) != len(self.columns):
            raise PostIOError(
                f"row has {len(row)} fields, schema has {len(self.columns)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([f"{v:.10g}" if isinstance(v, float)
                                    else v for v in row])


def read_csv(path):
    """Read back a time-series CSV; returns (columns, (n, m) float array)."""
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(io.StringIO("".join(lines))))
    cols = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return cols, data.reshape(-1, len(cols))


PV_COLUMNS = ("t_ms", "p_LV_mmHg", "p_RV_mmHg", "V_LV_mL", "V_RV_mL")


def write_pv_csv(path, times_s, p_lv_mmhg, p_rv_mmhg, v_lv_ml, v_rv_ml,
                 config_hash=""):
    """PV time series in clinical units (ms, mmHg, mL)."""
    w = TimeSeriesCSV(path, PV_COLUMNS, config_hash=config_hash)
    for row in zip(1e3 * np.asarray(times_s, dtype=float), p_lv_mmhg,
                   p_rv_mmhg, v_lv_ml, v_rv_ml):
        w.append([float(v) for v in row])
    return w


def write_report(path, biomarkers: Biomarkers, config_hash=""):
    """Key-value biomarker summary."""
    try:
        with open(path, "w") as f:
            if config_hash:
                f.write(f"config = {config_hash}\n")
            for key, val in biomarkers.as_dict().items():
                f.write(f"{key} = {val:.6g}\n")
    except OSError as exc:
        raise PostIOError(f"cannot write report {path}: {exc}") from exc


def write_snapshot_vtk(path, mesh: Mesh, point_data=None, config_hash=""):
    """VTK snapshot whose title line records the configuration hash."""
    title = f"cardioem snapshot config={config_hash}" if config_hash \
        else "cardioem snapshot"
    try:
        write_vtk(path, mesh, point_data=point_data, title=title)
    except OSError as exc:
        raise PostIOError(f"cannot write VTK {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class FiberSettings:
    rule: str = D_RBM
    alpha_epi_lv: float = -60.0
    alpha_endo_lv: float = 60.0
    alpha_epi_rv: float = -25.0
    alpha_endo_rv: float = 90.0
    beta_epi_lv: float = 20.0
    beta_endo_lv: float = -20.0
    cross_fiber: str = "f-n"

    def angle_set(self):
        return AngleSet(alpha_epi_lv=self.alpha_epi_lv,
                        alpha_endo_lv=self.alpha_endo_lv,
                        alpha_epi_rv=self.alpha_epi_rv,
                        alpha_endo_rv=self.alpha_endo_rv,
                        beta_epi_lv=self.beta_epi_lv,
                        beta_endo_lv=self.beta_endo_lv)

    def proportions(self):
        if self.cross_fiber not in CROSS_FIBER_PRESETS:
            raise PostIOError(f"unknown cross-fiber preset "
                              f"{self.cross_fiber!r}; choose from "
                              f"{sorted(CROSS_FIBER_PRESETS)}")
        return CROSS_FIBER_PRESETS[self.cross_fiber]

    def validate(self):
        if self.rule not in (D_RBM, R_RBM):
            raise PostIOError(f"unknown fiber rule {self.rule!r}")
        self.proportions()
        return self


@dataclass
class SimulationSettings:
    resolution: float = 7e-3        # m, voxel size
    dt: float = 5e-4                # s, coupled step
    n_sub: int = 10                 # EP substeps per coupled step
    n_beats: int = 1
    base_variant: str = "WEIGHTED"
    geom_update_every: int = 10
    p_resid_lv: float = 600.0       # Pa, reference-recovery loads
    p_resid_rv: float = 400.0
    ta_resid: float = 350e3         # Pa; see recover_reference
    edv_lv_ml: float = 125.0        # end-diastolic volume targets
    edv_rv_ml: float = 55.0
    recover: bool = True            # run reference recovery in the pipeline
    v_cycle: bool = True            # accelerate the 0D state between beats

    def validate(self):
        if self.dt <= 0 or self.n_sub < 1 or self.n_beats < 1:
            raise PostIOError("dt, n_sub and n_beats must be positive")
        if self.base_variant not in ("UNIFORM", "PER_BASE", "WEIGHTED"):
            raise PostIOError(f"unknown base variant {self.base_variant!r}")
        if self.resolution <= 0:
            raise PostIOError("resolution must be positive")
        return self


@dataclass
class OutputSettings:
    directory: str = "out"
    csv_every: int = 1              # steps between CSV rows
    vtk_every: int = 100            # steps between VTK snapshots

    def validate(self):
        if self.csv_every < 1 or self.vtk_every < 1:
            raise PostIOError("output cadences must be >= 1")
        return self


@dataclass
class RunConfig:
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    material: MaterialParams = field(default_factory=MaterialParams)
    ep: EPParams = field(default_factory=EPParams)
    activation: ActivationParams = field(default_factory=ActivationParams)
    circulation: CircuitParams = field(default_factory=CircuitParams)
    fibers: FiberSettings = field(default_factory=FiberSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def validate(self):
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()
        # the material proportions must agree with the fiber preset
        n_f, n_s, n_n = self.fibers.proportions()
        self.material = dataclasses.replace(self.material, n_f=n_f,
                                            n_s=n_s, n_n=n_n)
        return self


_SECTIONS = ("geometry", "material", "ep", "activation", "circulation",
             "fibers", "simulation", "output")


def _coerce(name, raw, default):
    """Parse a string into the type of the default field value."""
    raw = raw.strip()
    if default is None:
        # optional numeric fields (e.g. geometry resolution)
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, GeometryKind):
        try:
            return GeometryKind[raw.upper()]
        except KeyError:
            raise PostIOError(f"unknown geometry kind {raw!r}") from None
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        vals = [float(v) for v in raw.replace(",", " ").split()]
        return tuple(type(d)(v) for d, v in zip(default, vals)) \
            if len(vals) == len(default) else tuple(vals)
    return raw


def _line_of(text, section, key):
    sec, lineno = None, 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip()
        elif sec == section and s.split("=")[0].strip() == key:
            return lineno
    return -1


def parse_config(path) -> RunConfig:
    """Build a RunConfig from a sectioned key = value file.

    Every key defaults to the built-in value of its section's dataclass; an
    empty file yields the full default configuration. Unknown sections or
    keys are rejected with their line numbers.
    """
    if not os.path.exists(path):
        raise PostIOError(f"config file not found: {path}")
    with open(path) as f:
        text = f.read()
    cp = ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # parameter names are case-sensitive
    cp.read_string(text, source=str(path))
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _SECTIONS:
            lineno = text.splitlines().index(f"[{section}]") + 1 \
                if f"[{section}]" in text.splitlines() else -1
            raise PostIOError(
                f"{path}:{lineno}: unknown section [{section}]")
        target = getattr(cfg, section)
        names = {f.name: getattr(target, f.name)
                 for f in dataclasses.fields(target)
                 if not f.name.startswith("_")}
        for key, raw in cp.items(section):
            if key not in names:
                raise PostIOError(
                    f"{path}:{_line_of(text, section, key)}: unknown key "
                    f"{key!r} in [{section}]")
            try:
                value = _coerce(key, raw, names[key])
            except (ValueError, PostIOError) as exc:
                raise PostIOError(
                    f"{path}:{_line_of(text, section, key)}: {exc}") from exc
            setattr(target, key, value)
    try:
        return cfg.validate()
    except Exception as exc:
        raise PostIOError(f"{path}: invalid configuration: {exc}") from exc


def serialize_config(cfg: RunConfig) -> str:
    """Canonical INI text of a RunConfig (parse -> serialize round trips)."""
    lines = []
    for section in _SECTIONS:
        target = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(target):
            if f.name.startswith("_"):
                continue
            v = getattr(target, f.name)
            if isinstance(v, GeometryKind):
                v = v.name
            elif isinstance(v, tuple):
                v = " ".join(f"{x:.17g}" if isinstance(x, float) else str(x)
                             for x in v)
            elif isinstance(v, float):
                v = f"{v:.17g}"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """Short provenance hash of the canonical configuration text."""
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


def write_config(path, cfg: RunConfig):
    with open(path, "w") as f:
        f.write(serialize_config(cfg))
