"""``qcbf`` command line: solve, sets, rollout, train, train-br, eval-critic.

Exit codes: 0 success, 2 configuration or input error, 3 non-convergence,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .core import ConfigurationError, ContractViolation, Grid, ScalarField, json_default
from .dynamics import InvertedPendulum, PendulumConfig
from .filters import (
    ContinuousBarrier,
    CTCBFFilter,
    LeastRestrictiveFilter,
    NoFilter,
    PDController,
    QCBFSafetyFilter,
)
from .harness import (
    ConstantDisturbance,
    RandomDisturbance,
    compute_set_metrics,
    deviation_stats,
    frozen_best_response,
    rollout,
    sample_boundary_states,
)
from .isaacs import Certificate, NonConvergenceError, SolveConfig, interpolation_error, solve
from .learn import (
    BestResponseConfig,
    Checkpoint,
    NumericalAbort,
    TrainConfig,
    library_rollout_pairs,
    local_optimality_probe,
    neural_value,
    sign_agreement,
    train_best_response,
    train_isaacs,
)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 2, 3, 4
PROBE_RHOS = (1e-4, 1e-3, 1e-2)


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=json_default) + "\n")


# -- construction from the resolved config ------------------------------------


def build_system(cfg: dict) -> InvertedPendulum:
    params = {k: v for k, v in cfg["system"].items() if k != "name"}
    return InvertedPendulum(PendulumConfig.from_dict(params))


def build_grid(cfg: dict) -> Grid:
    g = cfg["grid"]
    return Grid(tuple(g["min"]), tuple(g["max"]), tuple(g["count"]))


def build_solve_config(cfg: dict) -> SolveConfig:
    return SolveConfig.from_dict(cfg["solve"])


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "runs"}
    t["seed"] = seed
    return TrainConfig.from_dict(t)


def _load_field(path) -> ScalarField:
    try:
        return ScalarField.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"cannot load field {path}: {exc}") from None


def load_certificate(cfg: dict, field_path: str | None = None) -> Certificate | None:
    """The value field (and its lift, if recorded) named on the command line or in the config."""
    path = field_path or cfg["filter"]["value_field"]
    if path is None:
        return None
    V = _load_field(path)
    lift_path = cfg["filter"]["lift_field"]
    if lift_path is None:
        sibling = Path(path).with_name("lift.json")
        lift_path = sibling if sibling.exists() and Path(path).name == "value.json" else None
    if lift_path is None:
        return Certificate.of(V)
    return Certificate(V, _load_field(lift_path))


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except ConfigurationError as exc:
        raise _Fail(EXIT_CONFIG, str(exc)) from None


def build_filter(kind: str, cfg: dict, cert: Certificate | None, system):
    f = cfg["filter"]
    s = cfg["solve"]
    if kind in ("qcbf", "lrsf") and cert is None:
        raise _Fail(EXIT_CONFIG, f"filter '{kind}' needs a value field (filter.value_field or --field)")
    if kind == "qcbf":
        b = f["beta"]
        return QCBFSafetyFilter(b["kind"], b["gamma"], b["rate"], b["dt"], s["control_points"],
                                s["dstb_points"]).fit(cert, system)
    if kind == "lrsf":
        return LeastRestrictiveFilter(s["control_points"], s["dstb_points"]).fit(cert, system)
    if kind in ("ct-ana", "ct-heu"):
        barrier = "analytic" if kind == "ct-ana" else "heuristic"
        return CTCBFFilter(barrier, f["ct_alpha_rate"]).fit(None, system)
    return NoFilter()


def certificate_field(kind: str, cfg: dict, cert: Certificate | None):
    if kind in ("ct-ana", "ct-heu"):
        return ContinuousBarrier("analytic" if kind == "ct-ana" else "heuristic", alpha_rate=cfg["filter"]["ct_alpha_rate"])
    return cert


# -- commands -----------------------------------------------------------------


def cmd_solve(cfg: dict, out: Path, args) -> int:
    system = build_system(cfg)
    grid = build_grid(cfg)
    sc = build_solve_config(cfg)
    try:
        V, diag = solve(system, grid, sc)
    except NonConvergenceError as exc:
        _write_json(out / "diagnostics.json", exc.diagnostics.to_dict())
        raise _Fail(EXIT_NONCONVERGED, f"{exc}; final residual {exc.diagnostics.final_residual:.6e}") from None
    V.save(out / "value.json")
    diag.lift.save(out / "lift.json")
    _write_json(out / "diagnostics.json", diag.to_dict())
    _write_json(out / "run.json", {"wall_time": diag.wall_time})
    print(f"converged in {diag.iterations} sweeps, residual {diag.final_residual:.3e}, "
          f"valid={diag.valid}, safe area {float((V.values >= 0).sum() * grid.cell_volume):.6f}")
    return EXIT_OK


def _interp_error(cert: Certificate, system, cfg: dict) -> dict:
    return interpolation_error(cert, system, build_solve_config(cfg))


def cmd_sets(cfg: dict, out: Path, args) -> int:
    system = build_system(cfg)
    cert = load_certificate(cfg, args.field[0] if args.field else None)
    if cert is None:
        raise _Fail(EXIT_CONFIG, "sets needs a value field (--field or filter.value_field)")
    grid = cert.grid
    alpha = cfg["filter"]["ct_alpha_rate"]
    fields = {"V": cert.value,
              "h_heu": ContinuousBarrier("heuristic", alpha_rate=alpha),
              "h_ana": ContinuousBarrier("analytic", alpha_rate=alpha)}
    for extra in (args.field or [])[1:]:
        fields[Path(extra).stem] = _load_field(extra)
    nodes = grid.nodes()
    columns = {name: np.asarray(f(nodes), dtype=np.float64) for name, f in fields.items()}
    if args.checkpoint:
        ck = _load_checkpoint(args.checkpoint)
        sc = build_solve_config(cfg)
        vn = neural_value(ck.critic, system, nodes, sc.control_set(system), sc.dstb_set(system))
        vn_field = ScalarField(grid, vn, label="neural")
        fields["V_nn"] = vn_field
        columns["V_nn"] = vn
    err = _interp_error(cert, system, cfg)
    metrics = compute_set_metrics(fields, grid, eps={"V": err["max"]})
    report = metrics.to_dict()
    report["interpolation_error"] = err
    _write_json(out / "sets.json", report)
    names = list(columns)
    with open(out / "sets_nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "omega"] + names)
        for i, x in enumerate(nodes):
            w.writerow([repr(float(x[0])), repr(float(x[1]))] + [repr(float(columns[n][i])) for n in names])
    for name, area in metrics.areas.items():
        print(f"area {name}: {area:.6f}")
    print(f"area ratio V/h_ana: {metrics.area_ratios[('V', 'h_ana')]:.4f}")
    print(f"h_ana outside V>=-eps (eps={err['max']:.3e}): {metrics.containment_violations[('h_ana', 'V')]}")
    return EXIT_OK


def _disturbance(mode: str, cfg: dict, system, filt, task, cert, d_disc, seed: int, br_net):
    if mode == "zero":
        return ConstantDisturbance(np.zeros(system.dstb_box.dim))
    if mode == "random":
        return RandomDisturbance(system.dstb_box, seed)
    if mode == "best-response-neural":
        return _NeuralDisturbance(br_net, filt, task)
    if cert is None:
        raise _Fail(EXIT_CONFIG, "best-response-grid needs a value field (filter.value_field or --field)")
    return frozen_best_response(cert, system, filt, task, d_disc)


class _NeuralDisturbance:
    def __init__(self, net, filt, task):
        self.net, self.filt, self.task = net, filt, task

    def given_control(self, x, u_exec):
        return self.net(np.concatenate([x, u_exec])[None])[0]


def cmd_rollout(cfg: dict, out: Path, args) -> int:
    system = build_system(cfg)
    cert = load_certificate(cfg, args.field[0] if args.field else None)
    ro = cfg["rollout"]
    kp, kd = cfg["filter"]["pd_gains"]
    task = PDController(kp, kd, system.config.control_bound)
    d_disc = build_solve_config(cfg).dstb_set(system)
    band = ro["band"] if ro["band"] is not None else 0.02 * system.config.theta_failure
    br_net = None
    if "best-response-neural" in ro["disturbance"]:
        if ro["dstb_checkpoint"] is None:
            raise _Fail(EXIT_CONFIG, "best-response-neural needs rollout.dstb_checkpoint")
        br_net = _load_checkpoint(ro["dstb_checkpoint"]).dstb
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    summary = {}
    rows = []
    for kind in cfg["filter"]["kinds"]:
        filt = build_filter(kind, cfg, cert, system)
        if ro["x0"] is not None:
            x0s = np.asarray(ro["x0"], dtype=np.float64).reshape(-1, system.state_dim)
        else:
            fld = certificate_field(kind, cfg, cert)
            if fld is None:
                raise _Fail(EXIT_CONFIG, f"filter '{kind}' has no certificate to sample a boundary band from")
            try:
                x0s = sample_boundary_states(fld, ro["n"], band, cfg["seed"], grid=build_grid(cfg))
            except ConfigurationError as exc:
                raise _Fail(EXIT_CONFIG, str(exc)) from None
        for mode in ro["disturbance"]:
            trajs = []
            for i, x0 in enumerate(x0s):
                policy = _disturbance(mode, cfg, system, filt, task, cert, d_disc, cfg["seed"] + i, br_net)
                tr = rollout(system, filt, task, policy, x0, ro["horizon"], value=cert)
                tr.write_csv(tdir / f"{kind}_{mode}_{i:03d}.csv")
                trajs.append(tr)
            n_safe = sum(t.safe for t in trajs)
            summary[f"{kind}|{mode}"] = {
                "n": len(trajs), "safe": n_safe, "safe_rate": n_safe / len(trajs),
                "min_margin": min(t.min_margin for t in trajs),
                "interventions": sum(t.interventions for t in trajs),
                "deviation": deviation_stats(trajs, system.config.control_bound),
            }
            rows.append((kind, mode, n_safe, len(trajs)))
    _write_json(out / "rollout_summary.json", {"band": band, "config_hash": cfgmod.config_hash(cfg),
                                               "results": summary})
    print(f"{'filter':<8} {'disturbance':<22} safe")
    for kind, mode, n_safe, n in rows:
        print(f"{kind:<8} {mode:<22} {n_safe}/{n} ({n_safe / n:.2f})")
    return EXIT_OK


def _run_seeds(cfg: dict) -> list[int]:
    return [cfg["seed"] + i for i in range(cfg["train"]["runs"])]


def cmd_train(cfg: dict, out: Path, args) -> int:
    system = build_system(cfg)
    cert = load_certificate(cfg)
    sc = build_solve_config(cfg)
    report = {}
    for seed in _run_seeds(cfg):
        tc = build_train_config(cfg, seed)
        run_dir = out / f"seed_{seed}"
        try:
            cks = train_isaacs(system, tc, run_dir,
                               log=lambda step, m, s=seed: print(f"seed {s} step {step}: loss {m['critic_loss']} "
                                                                  f"eval safe {m['eval_safe_rate']:.2f}"))
        except NumericalAbort as exc:
            path = out / f"abort_seed{seed}.json"
            _write_json(path, exc.payload)
            raise _Fail(EXIT_NUMERIC, f"{exc}; diagnostics written to {path}") from None
        entry = {"checkpoints": [f"seed_{seed}/checkpoint_seed{seed}_step{c.step:08d}.json" for c in cks]}
        if cert is not None and cks:
            agree = sign_agreement(cks[-1].critic, system, cert.value, sc.control_set(system), sc.dstb_set(system))
            entry.update(agree)
            print(f"seed {seed}: sign agreement {agree['sign_agreement']:.4f}, MAE {agree['mae']:.4f}")
        report[str(seed)] = entry
    _write_json(out / "train_summary.json", report)
    return EXIT_OK


def _library(paths) -> list:
    lib = []
    for p in paths:
        ck = _load_checkpoint(p)
        if ck.ctrl is None:
            raise _Fail(EXIT_CONFIG, f"checkpoint {p} holds no controller")
        lib.append(ck.ctrl)
    return lib


def cmd_train_br(cfg: dict, out: Path, args) -> int:
    if not args.library:
        raise _Fail(EXIT_CONFIG, "train-br needs --library checkpoint paths")
    if not args.checkpoint:
        raise _Fail(EXIT_CONFIG, "train-br needs --checkpoint (the frozen critic)")
    system = build_system(cfg)
    critic_ck = _load_checkpoint(args.checkpoint)
    library = _library(args.library)
    br = dict(cfg["best_response"], seed=cfg["seed"])
    tr = cfg["train"]
    try:
        dstb = train_best_response(critic_ck.critic, library, system, BestResponseConfig.from_dict(br),
                                   tr["reset_low"], tr["reset_high"])
    except NumericalAbort as exc:
        path = out / "abort_best_response.json"
        _write_json(path, exc.payload)
        raise _Fail(EXIT_NUMERIC, f"{exc}; diagnostics written to {path}") from None
    ck = Checkpoint(br["steps"], cfg["seed"], None, None, dstb, cfgmod.config_hash(cfg)[:16])
    ck.save(out / "best_response.json")
    xs, us = library_rollout_pairs(system, library, dstb, 256, cfg["seed"] + 1,
                                   reset_low=tr["reset_low"], reset_high=tr["reset_high"])
    from .learn import q_eval

    report = {"mean_critic_value": float(q_eval(critic_ck.critic, xs, us, dstb(np.concatenate([xs, us], 1))).mean())}
    if critic_ck.dstb is not None:
        report["gda_mean_critic_value"] = float(
            q_eval(critic_ck.critic, xs, us, critic_ck.dstb(np.concatenate([xs, us], 1))).mean())
    _write_json(out / "best_response_report.json", report)
    print(f"best-response mean critic value {report['mean_critic_value']:.6f}"
          + (f" (GDA actor {report['gda_mean_critic_value']:.6f})" if "gda_mean_critic_value" in report else ""))
    return EXIT_OK


def cmd_eval_critic(cfg: dict, out: Path, args) -> int:
    if not args.checkpoint:
        raise _Fail(EXIT_CONFIG, "eval-critic needs --checkpoint")
    system = build_system(cfg)
    ck = _load_checkpoint(args.checkpoint)
    if ck.critic is None:
        raise _Fail(EXIT_CONFIG, f"checkpoint {args.checkpoint} holds no critic")
    cert = load_certificate(cfg, args.field[0] if args.field else None)
    if cert is None:
        raise _Fail(EXIT_CONFIG, "eval-critic needs a value field (--field or filter.value_field)")
    sc = build_solve_config(cfg)
    report = sign_agreement(ck.critic, system, cert.value, sc.control_set(system), sc.dstb_set(system))
    print(f"sign agreement {report['sign_agreement']:.4f} on {report['n_nodes']} nodes, MAE {report['mae']:.6f}")
    if args.dstb_checkpoint:
        br = _load_checkpoint(args.dstb_checkpoint).dstb
        if br is None:
            raise _Fail(EXIT_CONFIG, f"checkpoint {args.dstb_checkpoint} holds no disturbance actor")
        lib = _library(args.library) if args.library else ([ck.ctrl] if ck.ctrl is not None else [])
        tr = cfg["train"]
        if lib:
            xs, us = library_rollout_pairs(system, lib, br, 256, cfg["seed"], reset_low=tr["reset_low"],
                                           reset_high=tr["reset_high"])
        else:
            rng = np.random.default_rng(cfg["seed"])
            xs = rng.uniform(tr["reset_low"], tr["reset_high"], size=(256, system.state_dim))
            us = rng.uniform(system.control_box.lower, system.control_box.upper, size=(256, system.control_box.dim))
        probes = [local_optimality_probe(br, ck.critic, (xs, us), rho, 64, seed=cfg["seed"]) for rho in PROBE_RHOS]
        report["probe"] = probes
        for p in probes:
            print(f"probe rho={p['rho']:.0e}: violation fraction {p['violation_fraction']:.4f}")
    _write_json(out / "eval_critic.json", report)
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "sets": cmd_sets,
    "rollout": cmd_rollout,
    "train": cmd_train,
    "train-br": cmd_train_br,
    "eval-critic": cmd_eval_critic,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcbf", description="Robust Q-CBF safety filter toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment JSON (schema 1)")
        s.add_argument("--out", default=None, help="output directory (default: config 'output', else ./out)")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--threads", type=int, default=None, help="solver threads; results do not depend on it")
        if name in ("sets", "rollout", "eval-critic"):
            s.add_argument("--field", action="append", help="value field JSON (repeatable for sets)")
        if name in ("sets", "train-br", "eval-critic"):
            s.add_argument("--checkpoint", help="checkpoint holding the critic")
        if name in ("train-br", "eval-critic"):
            s.add_argument("--library", nargs="+", help="controller checkpoints")
        if name == "eval-critic":
            s.add_argument("--dstb-checkpoint", help="best-response disturbance checkpoint for the probe")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config, seed=args.seed)
        out = Path(args.out or cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigurationError("--threads must be >= 1")
            import numba

            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        digest = cfgmod.config_hash(cfg)
        (out / "config.resolved.json").write_text(cfgmod.canonical_json(cfg) + "\n")
        (out / "config.sha256").write_text(digest + "\n")
        print(f"config {digest[:16]} -> {out}")
        # field headers carry a creation stamp; pin it so reruns are byte-identical
        pinned = "SOURCE_DATE_EPOCH" not in os.environ
        if pinned:
            os.environ["SOURCE_DATE_EPOCH"] = "0"
        started = time.time()
        try:
            code = COMMANDS[args.command](cfg, out, args)
        finally:
            if pinned:
                del os.environ["SOURCE_DATE_EPOCH"]
        print(f"done in {time.time() - started:.1f}s")
        return code
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
