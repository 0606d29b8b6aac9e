"""Command-line interface.

Subcommands: ``fibers`` (fiber generation to VTK), ``ep`` (standalone
electrophysiology), ``circulation`` (standalone 0D loop to CSV),
``mechanics-inflate`` (quasi-static inflation), ``simulate`` (the full
checkpointed pipeline) and ``postprocess`` (biomarkers from run outputs).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .circulation import STATE_NAMES, CircState, run_standalone
from .coupling import (
    CoupledSimulation, cavity_directions, cavity_volume, load_checkpoint,
    save_checkpoint,
)
from .ep import (
    Stimulus, StimulusProtocol, default_stimulus_protocol, run_ep,
)
from .fibers import compute_distance_fields, generate_fibers
from .mechanics import MechanicsProblem, solve_quasistatic
from .mesh import build_geometry, uniform_refine
from .postio import (
    PostIOError, RunConfig, TimeSeriesCSV, compute_biomarkers, config_hash,
    parse_config, read_csv, write_report, write_snapshot_vtk,
)
from . import preflow


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return RunConfig().validate()


def _geometry(cfg: RunConfig):
    spec = cfg.geometry
    if spec.resolution is None:
        spec = dataclasses.replace(spec,
                                   resolution=cfg.simulation.resolution)
    return build_geometry(spec)


def _fiber_data(cfg: RunConfig, mesh, rule=None):
    rule = rule or cfg.fibers.rule
    fields = compute_distance_fields(mesh, rule=rule)
    fib = generate_fibers(mesh, rule=rule, angles=cfg.fibers.angle_set(),
                          fields=fields)
    return fields, fib


def _outdir(args, cfg):
    out = getattr(args, "out", None) or cfg.output.directory
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fibers(args):
    cfg = _load_config(args)
    if args.angles:
        text = open(args.angles).read()
        if "[fibers]" not in text:
            text = "[fibers]\n" + text
        tmp = os.path.join(_outdir(args, cfg), "_angles.ini")
        with open(tmp, "w") as f:
            f.write(text)
        cfg.fibers = parse_config(tmp).fibers
        os.remove(tmp)
    rule = {"d-rbm": "D_RBM", "r-rbm": "R_RBM"}.get(args.rule, args.rule) \
        if args.rule else cfg.fibers.rule
    mesh = _geometry(cfg)
    fields, fib = _fiber_data(cfg, mesh, rule=rule)
    out = _outdir(args, cfg)
    path = os.path.join(out, "fibers.vtk")
    write_snapshot_vtk(path, mesh, point_data={
        "FIBERS": fib.f0, "SHEETS": fib.s0, "NORMALS": fib.n0,
        "phi": fields.phi, "psi": fields.psi, "xi": fields.xi,
    }, config_hash=config_hash(cfg))
    print(f"wrote {path} ({mesh.n_nodes} nodes, rule {rule})")
    return 0


def cmd_ep(args):
    cfg = _load_config(args)
    mesh = _geometry(cfg)
    fields, fib = _fiber_data(cfg, mesh)
    protocol = default_stimulus_protocol(mesh, fields)
    _, recorder, _ = run_ep(mesh, fib, fields, cfg.ep, protocol,
                            t_end=args.duration)
    act = recorder.times
    out = _outdir(args, cfg)
    path = os.path.join(out, "activation.vtk")
    write_snapshot_vtk(path, mesh,
                       point_data={"activation_s": np.nan_to_num(act, nan=-1.0)},
                       config_hash=config_hash(cfg))
    done = np.isfinite(act)
    total = 1e3 * (act[done].max() - act[done].min()) if done.any() else 0.0
    print(f"wrote {path}; activated {done.sum()}/{len(act)} nodes, "
          f"total activation time {total:.1f} ms")
    return 0


def cmd_circulation(args):
    cfg = _load_config(args)
    if args.params:
        cfg.circulation = parse_config(args.params).circulation
    par = cfg.circulation
    _, times, hist, pres = run_standalone(par, args.beats, dt=args.dt)
    out = _outdir(args, cfg)
    path = os.path.join(out, "circulation.csv")
    cols = ("t_s",) + STATE_NAMES + ("p_LA_mmHg", "p_LV_mmHg",
                                     "p_RA_mmHg", "p_RV_mmHg")
    w = TimeSeriesCSV(path, cols, config_hash=config_hash(cfg))
    for k in range(len(times)):
        w.append([float(times[k])] + [float(v) for v in hist[k]]
                 + [float(v) for v in pres[k]])
    print(f"wrote {path} ({args.beats} beats, {len(times)} samples)")
    return 0


def cmd_mechanics_inflate(args):
    cfg = _load_config(args)
    mesh = _geometry(cfg)
    fields, fib = _fiber_data(cfg, mesh)
    prob = MechanicsProblem(mesh, (fib.f0, fib.s0, fib.n0), fields.xi_hat,
                            cfg.material,
                            base_variant=cfg.simulation.base_variant)
    Ta = np.full(mesh.n_nodes, args.ta)
    d = solve_quasistatic(prob, args.p_lv, args.p_rv, Ta)
    h, b_lv, b_rv = cavity_directions(mesh)
    v_lv = 1e6 * cavity_volume(mesh, d, "LV", h, b_lv)
    v_rv = 1e6 * cavity_volume(mesh, d, "RV", h, b_rv)
    J = np.linalg.det(prob.deformation_gradient(d.reshape(-1, 3)))
    out = _outdir(args, cfg)
    path = os.path.join(out, "inflated.vtk")
    write_snapshot_vtk(path, mesh, point_data={"d": d.reshape(-1, 3)},
                       config_hash=config_hash(cfg))
    print(f"wrote {path}; V_LV = {v_lv:.2f} mL, V_RV = {v_rv:.2f} mL, "
          f"J in [{J.min():.4f}, {J.max():.4f}]")
    return 0


def _beat_protocol(ep_mesh, ep_fields, T_hb, n_beats):
    """The default pacing sites repeated once per heartbeat."""
    base = default_stimulus_protocol(ep_mesh, ep_fields)
    stimuli = []
    for k in range(n_beats):
        for s in base.stimuli:
            stimuli.append(Stimulus(center=s.center, radius=s.radius,
                                    start=s.start + k * T_hb,
                                    duration=s.duration,
                                    amplitude=s.amplitude))
    return StimulusProtocol(stimuli=stimuli).validate()


def build_simulation(cfg: RunConfig, mesh, fields, fib):
    """Assemble a CoupledSimulation for the given (reference) geometry."""
    sim_cfg = cfg.simulation
    ep_mesh = uniform_refine(mesh)
    ep_fields, ep_fib = _fiber_data(cfg, ep_mesh)
    prob = MechanicsProblem(mesh, (fib.f0, fib.s0, fib.n0), fields.xi_hat,
                            cfg.material, base_variant=sim_cfg.base_variant)
    n_beats = sim_cfg.n_beats
    protocol = _beat_protocol(ep_mesh, ep_fields, cfg.circulation.T_hb,
                              n_beats)
    return CoupledSimulation(mesh, fields, fib, ep_mesh, ep_fields, ep_fib,
                             cfg.ep, cfg.activation, prob, cfg.circulation,
                             protocol, dt=sim_cfg.dt, n_sub=sim_cfg.n_sub,
                             geom_update_every=sim_cfg.geom_update_every)


def cmd_simulate(args):
    cfg = _load_config(args)
    sim_cfg = cfg.simulation
    out = _outdir(args, cfg)
    chash = config_hash(cfg)

    def stage_path(name):
        return os.path.join(out, name)

    # stage 1: geometry and fibers
    mesh = _geometry(cfg)
    fields, fib = _fiber_data(cfg, mesh)
    print(f"[1/6] geometry: {mesh.n_nodes} nodes, {mesh.n_elems} elements")

    # stage 2: single-cell pre-run (cached)
    cell_file = stage_path("cell.npz")
    if args.resume and os.path.exists(cell_file):
        z = np.load(cell_file)
        w0, s0 = z["w0"], z["s0"]
        print("[2/6] single-cell pre-run: resumed from checkpoint")
    else:
        w0, s0, diff = preflow.single_cell_prerun(
            cfg.ep, cfg.activation, T_hb=cfg.circulation.T_hb)
        np.savez(cell_file, w0=w0, s0=s0)
        print(f"[2/6] single-cell pre-run: cycle diff {diff:.2e}")

    # stage 3: reference recovery (cached)
    ref_file = stage_path("reference.npz")
    if not sim_cfg.recover:
        print("[3/6] reference recovery: skipped by configuration")
    elif args.resume and os.path.exists(ref_file):
        nodes = np.load(ref_file)["nodes"]
        mesh = dataclasses.replace(mesh, nodes=nodes, _cache={})
        fields, fib = _fiber_data(cfg, mesh)
        print("[3/6] reference recovery: resumed from checkpoint")
    else:
        rec = preflow.recover_reference(
            mesh, cfg.fibers.rule, p_lv=sim_cfg.p_resid_lv,
            p_rv=sim_cfg.p_resid_rv, Ta_resid=sim_cfg.ta_resid,
            params=cfg.material, base_variant=sim_cfg.base_variant,
            angles=cfg.fibers.angle_set())
        np.savez(ref_file, nodes=rec.mesh.nodes,
                 history=np.asarray(rec.history))
        mesh = rec.mesh
        fields, fib = _fiber_data(cfg, mesh)
        print(f"[3/6] reference recovery: {len(rec.history)} iterations, "
              f"final mismatch {rec.history[-1] * 1e3:.3f} mm")

    # stage 4: end-diastolic inflation (cached)
    ed_file = stage_path("ed.npz")
    if args.resume and os.path.exists(ed_file):
        z = np.load(ed_file)
        d0, p_lv0, p_rv0 = z["d0"], float(z["p_lv"]), float(z["p_rv"])
        print("[4/6] ED inflation: resumed from checkpoint")
    else:
        d0, p_lv0, p_rv0 = preflow.inflate_to_ED(
            mesh, (fib.f0, fib.s0, fib.n0), fields.xi_hat,
            1e-6 * sim_cfg.edv_lv_ml, 1e-6 * sim_cfg.edv_rv_ml,
            params=cfg.material, base_variant=sim_cfg.base_variant)
        np.savez(ed_file, d0=d0, p_lv=p_lv0, p_rv=p_rv0)
        print(f"[4/6] ED inflation: p_LV = {p_lv0:.1f} Pa, "
              f"p_RV = {p_rv0:.1f} Pa")

    # stage 5: coupled beats with optional limit-cycle acceleration
    sim = build_simulation(cfg, mesh, fields, fib)
    state = sim.initial_sim_state()
    state.d = d0.copy()
    state.d_prev = d0.copy()
    state.force_s[:, :] = s0
    state.w[:, :] = w0
    state.p_lv, state.p_rv = p_lv0, p_rv0
    state.circ[1] = 1e6 * cavity_volume(mesh, d0, "LV", sim.h, sim.b_lv)
    state.circ[3] = 1e6 * cavity_volume(mesh, d0, "RV", sim.h, sim.b_rv)
    ck_file = stage_path("sim_latest.npz")
    if args.resume and os.path.exists(ck_file):
        state = load_checkpoint(ck_file)
        print(f"[5/6] coupled run: resumed at step {state.n}")
    write_snapshot_vtk(stage_path("snap_start.vtk"), mesh,
                       point_data={"d": state.d.reshape(-1, 3)},
                       config_hash=chash)

    per_beat = int(round(cfg.circulation.T_hb / sim_cfg.dt))
    total = per_beat * sim_cfg.n_beats
    if args.max_steps:
        total = min(total, args.max_steps)
    log_path = stage_path("log.csv")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)
    min_vlv, best = np.inf, None

    def track(st):
        nonlocal min_vlv, best
        if st.diagnostics["V_LV_ml"] < min_vlv:
            min_vlv = st.diagnostics["V_LV_ml"]
            best = st.d.copy()
        if st.n % 50 == 0:
            save_checkpoint(ck_file, st)

    print(f"[5/6] coupled run: {total - state.n} steps")
    beat_end = state.n
    while state.n < total:
        beat_end = min(total, beat_end + per_beat)
        state = sim.run(state, beat_end - state.n, log_path=log_path,
                        progress=track, log_append=True)
        if sim_cfg.v_cycle and state.n < total:
            cols, data = read_csv(log_path)
            state.circ[:] = preflow.limit_cycle_accelerate(
                data[:, 0], data[:, 1], data[:, 3], data[:, 2], data[:, 4],
                cfg.circulation, CircState(state.circ.copy())).c
            print(f"      0D state accelerated after step {state.n}")

    if best is not None:
        write_snapshot_vtk(stage_path("snap_end_systole.vtk"), mesh,
                           point_data={"d": best.reshape(-1, 3)},
                           config_hash=chash)
    write_snapshot_vtk(stage_path("snap_final.vtk"), mesh,
                       point_data={"d": state.d.reshape(-1, 3)},
                       config_hash=chash)
    print(f"[6/6] wrote {log_path} and snapshots in {out}")
    return 0


def cmd_postprocess(args):
    cfg = _load_config(args)
    out = _outdir(args, cfg)
    cols, data = read_csv(args.log)
    if data.shape[0] == 0:
        raise PostIOError("log contains no steps")
    t, p_lv, p_rv, v_lv, v_rv = (data[:, k] for k in range(5))
    mesh = _geometry(cfg)
    from .mesh import read_vtk_points_and_vectors
    if args.snap_start and args.snap_es:
        _, v1 = read_vtk_points_and_vectors(args.snap_start)
        _, v2 = read_vtk_points_and_vectors(args.snap_es)
        d_start, d_es = v1["d"], v2["d"]
        if len(d_start) != mesh.n_nodes:
            raise PostIOError("snapshot does not match the configured "
                              "geometry")
    else:
        raise PostIOError("missing geometry snapshots: pass --snap-start "
                          "and --snap-es")
    fields = compute_distance_fields(mesh, rule=cfg.fibers.rule)
    bm = compute_biomarkers(t, p_lv, p_rv, v_lv, v_rv,
                            snapshots=(mesh, fields, d_start, d_es))
    path = os.path.join(out, "report.txt")
    write_report(path, bm, config_hash=config_hash(cfg))
    print(f"wrote {path}: EF_LV = {bm.ef_lv:.1f}%, EF_RV = {bm.ef_rv:.1f}%, "
          f"LFS = {bm.lfs:.1f}%, WT = {bm.wt:.1f}%")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def make_parser():
    p = argparse.ArgumentParser(
        prog="cardioem",
        description="Desk-scale cardiac electromechanics simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration (INI)")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("fibers", help="generate fiber fields to VTK")
    common(sp)
    sp.add_argument("--rule", choices=["d-rbm", "r-rbm"],
                    help="fiber rule (default from config)")
    sp.add_argument("--angles", help="angle settings file (key = value)")
    sp.set_defaults(func=cmd_fibers)

    sp = sub.add_parser("ep", help="standalone electrophysiology")
    common(sp)
    sp.add_argument("--standalone", action="store_true", default=True,
                    help="run on the fixed geometry (d = 0)")
    sp.add_argument("--duration", type=float, default=0.12,
                    help="simulated time in seconds")
    sp.set_defaults(func=cmd_ep)

    sp = sub.add_parser("circulation", help="standalone 0D loop to CSV")
    common(sp)
    sp.add_argument("--beats", type=int, default=10)
    sp.add_argument("--dt", type=float, default=5e-4)
    sp.add_argument("--params", help="parameter file ([circulation] INI)")
    sp.set_defaults(func=cmd_circulation)

    sp = sub.add_parser("mechanics-inflate",
                        help="quasi-static pressure inflation")
    common(sp)
    sp.add_argument("--p-lv", type=float, default=600.0, help="Pa")
    sp.add_argument("--p-rv", type=float, default=400.0, help="Pa")
    sp.add_argument("--ta", type=float, default=0.0,
                    help="uniform active tension, Pa")
    sp.set_defaults(func=cmd_mechanics_inflate)

    sp = sub.add_parser("simulate", help="full checkpointed pipeline")
    common(sp)
    sp.add_argument("--resume", action="store_true",
                    help="reuse stage checkpoints found in the output dir")
    sp.add_argument("--max-steps", type=int, default=0,
                    help="cap the number of coupled steps (0 = full run)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("postprocess", help="biomarkers from run outputs")
    common(sp)
    sp.add_argument("--log", required=True, help="per-step CSV from simulate")
    sp.add_argument("--snap-start", help="VTK snapshot at t = 0")
    sp.add_argument("--snap-es", help="VTK snapshot at end-systole")
    sp.set_defaults(func=cmd_postprocess)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface errors as clean CLI messages
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
