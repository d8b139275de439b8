"""Command-line driver ``collapse-lab``.

metrics.csv columns (fixed order, one row per logging point):

  step          global step index (continues across stages)
  stage         stage1 | stage2 | joint
  eta           step size in force at that step
  loss          L_n = (1/2n)||gamma W^T H - Y||_F^2 (stage features)
  reg_loss      L_n + (lam_W/2)||W||_F^2 + (lam_rho/2) mean ||theta_j||^2
  eps_s         drift residual sqrt((1/N) sum_j ||dA_j||^2 + ||dU_j||^2)
  nc1           within-class / total centred feature variation
  nb            normalised non-balancedness of E[aa^T] against W W^T
  sigma_min_w   smallest singular value of W
  sigma_max_w   largest singular value of W
  head_drift    ||W^T W - W_0^T W_0||_op
  kl_init       kNN estimate of KL(rho_t || N(0, I))
  free_energy   reg_loss - beta^{-1} * kNN entropy (reg_loss when beta^{-1} = 0)
"""

import argparse
import concurrent.futures
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import metrics, theory
from .checkpoint import CheckpointError, load_state, save_state
from .config import ConfigError, ExperimentConfig, load_config, parse_lr_schedule
from .data import ConstraintError, DataError, gen_separable, load_csv, sample_separable, write_csv
from .model import ActivationKind, Truncation
from .svg import Panel, Series, render
from .training import (
    DivergenceError,
    HyperParams,
    Record,
    Trajectory,
    init_state,
    run_flow,
    two_stage,
)

__all__ = ["main", "run_experiment", "repro_fig1_style", "build_dataset", "build_hyper", "METRICS_COLUMNS"]

log = logging.getLogger("collapse_lab")

METRICS_COLUMNS = Record.FIELDS
REPRO_LAMBDA = 1e-4
ARTIFACTS = ("metrics.csv", "summary.json", "state.txt", "curves.svg")
TOL = 1e-9


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def build_dataset(cfg: ExperimentConfig):
    """Return (train, test or None, SeparabilitySpec or None)."""
    dc = cfg.data
    if dc.source == "generated":
        ds, spec = gen_separable(dc.q, dc.d, dc.m, dc.tau, dc.M, seed=dc.seed)
        test = sample_separable(spec, dc.m_test, seed=dc.seed + 1_000_003) if dc.m_test > 0 else None
        return ds, test, spec
    ds = load_csv(dc.path, dc.q, dc.normalize, dc.force)
    test = load_csv(dc.test_path, dc.q, dc.normalize, dc.force) if dc.test_path else None
    return ds, test, None


def build_hyper(cfg: ExperimentConfig, repro: bool = False) -> HyperParams:
    hc, sc = cfg.hyper, cfg.schedule
    fallback = REPRO_LAMBDA if repro else hc.beta_inv
    trunc = None if cfg.model.trunc_R is None else Truncation(cfg.model.trunc_R, cfg.model.trunc_C0)
    steps = sc.steps if cfg.algorithm.kind == "joint_flow" else sc.stage1_steps + sc.stage2_steps
    return HyperParams(
        lambda_rho=fallback if hc.lambda_rho is None else hc.lambda_rho,
        lambda_w=fallback if hc.lambda_w is None else hc.lambda_w,
        beta_inv=hc.beta_inv,
        gamma=hc.gamma,
        eta=hc.eta,
        steps=steps,
        trunc=trunc,
        activation=ActivationKind.parse(cfg.model.activation),
        seed=hc.seed,
        batch=sc.batch,
        lr_schedule=parse_lr_schedule(sc.lr_schedule),
        eps_stop=sc.stage1_eps,
        freeze_w=hc.freeze_w,
    )


def _metrics_csv(trajs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for t in trajs:
        for r in t.records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.as_row()])
    return buf.getvalue()


def _theory_summary(cfg, state, ds, spec, hyper):
    checks = cfg.checks()
    out, violations = {}, []
    h = dataclasses.replace(hyper, trunc=None)
    if "theorem31" in checks:
        rep = theory.theorem31_check(state.cloud, state.head, ds, h)
        out["theorem31"] = rep.as_dict()
        if rep.res1_residual > rep.slack * rep.E1_bound + TOL:
            violations.append("res1_residual exceeds E1_bound")
        if rep.decomp_residual is not None and rep.decomp_residual > rep.slack * math.sqrt(rep.E2_bound) + TOL:
            violations.append("decomp_residual exceeds sqrt(E2_bound)")
        if rep.nc1_bound is not None and rep.nc1 is not None and rep.nc1 > rep.nc1_bound + TOL:
            violations.append("nc1 exceeds nc1_bound")
    if "lemma34" in checks:
        out["lemma34_gap"] = theory.lemma34_gap(state.cloud, state.head, h)
        out["lemma34_band"] = 0.5 * h.beta_inv * state.cloud.p
    lam_star = None
    if "kernel" in checks or "flow_constants" in checks:
        try:
            est, se = theory.kernel_positivity_jackknife(
                ds, hyper.activation, cfg.theory_checks.kernel_probes, seed=hyper.seed
            )
            out["kernel"] = {"lambda_min": est, "stderr": se, "N_probe": cfg.theory_checks.kernel_probes}
            lam_star = est
        except theory.AssumptionError as exc:
            out["kernel"] = {"error": str(exc)}
    if "flow_constants" in checks:
        if lam_star is not None and lam_star > 0:
            fc = theory.flow_constants(
                ds.n, ds.d, state.cloud.p, hyper.activation.C1, lam_star, state.head.gamma,
                q=ds.q, beta=(1.0 / h.beta_inv) if h.beta_inv > 0 else None,
            )
            out["flow_constants"] = dataclasses.asdict(fc)
        else:
            out["flow_constants"] = {"error": "kernel lambda_min estimate not positive"}
    if "test_bound" in checks:
        if spec is not None:
            C0 = hyper.trunc.C0 if hyper.trunc is not None else Truncation().C0
            consts, bound = theory.test_bound_constants(
                ds.d, state.cloud.p, C0, hyper.activation.C1, spec.M, spec.tau, ds.q, ds.n,
                cfg.theory_checks.delta0, cfg.theory_checks.delta,
            )
            out["test_bound"] = {"constants": dataclasses.asdict(consts), "bound": bound,
                                 "finite": math.isfinite(bound)}
        else:
            out["test_bound"] = {"error": "needs generated (tau, M)-separable data"}
    out["violations"] = violations
    return out


def _curves_svg(trajs, log_y: bool, title: str) -> str:
    recs = [r for t in trajs for r in t.records]
    x = [r.step for r in recs]
    panels = [
        Panel("loss", [Series("L_n", x, [r.loss for r in recs]),
                       Series("L_reg", x, [r.reg_loss for r in recs])], log_y),
        Panel("NC1", [Series("NC1", x, [r.nc1 for r in recs])], log_y),
        Panel("drift residual eps_S", [Series("eps_S", x, [r.eps_s for r in recs])], log_y),
        Panel("non-balancedness NB", [Series("NB", x, [r.nb for r in recs])], False),
    ]
    return render(panels, columns=2, title=title)


def run_experiment(cfg: ExperimentConfig, out_dir=None, repro: bool = False) -> dict:
    """Run one configured experiment and write its artifacts.

    Returns the summary dictionary (also written to summary.json).
    """
    out = Path(out_dir or cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, test, spec = build_dataset(cfg)
    hyper = build_hyper(cfg, repro)
    sc = cfg.schedule
    workers = max(1, cfg.run.workers)
    ex = concurrent.futures.ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        if cfg.algorithm.kind == "two_stage":
            state, t1, t2 = two_stage(
                ds, hyper, sc.stage1_steps, sc.stage2_steps, p=cfg.model.p, N=cfg.model.N,
                log_every=sc.log_every, executor=ex, diagnostics=cfg.run.diagnostics,
            )
            trajs = [t1, t2]
        else:
            state = init_state(ds, cfg.model.p, cfg.model.N, hyper)
            trajs = [run_flow(state, ds, hyper, sc.log_every, sc.steps, "joint", ex, cfg.run.diagnostics)]
    finally:
        if ex is not None:
            ex.shutdown()

    (out / "metrics.csv").write_text(_metrics_csv(trajs))
    written = ["metrics.csv", "summary.json"]
    if cfg.outputs.checkpoint:
        save_state(state, out / "state.txt")
        written.append("state.txt")
    if cfg.outputs.emit_svg:
        (out / "curves.svg").write_text(_curves_svg(trajs, cfg.outputs.log_y, f"{cfg.algorithm.kind} run"))
        written.append("curves.svg")

    final_hyper = dataclasses.replace(hyper, trunc=None) if cfg.algorithm.kind == "two_stage" else hyper
    batch = hyper.batch or ds.n
    summary = {
        "algorithm": cfg.algorithm.kind,
        "config": {k: dataclasses.asdict(getattr(cfg, k)) for k in
                   ("data", "model", "hyper", "schedule", "algorithm", "outputs", "theory_checks", "run")},
        "hyper_resolved": {"lambda_rho": hyper.lambda_rho, "lambda_w": hyper.lambda_w,
                           "beta_inv": hyper.beta_inv, "gamma": hyper.gamma},
        "n_train": ds.n,
        "steps": state.step,
        "epochs": state.step * min(batch, ds.n) / ds.n,
        "rows": sum(len(t.records) for t in trajs),
        "initial": dataclasses.asdict(trajs[0].initial),
        "final": dataclasses.asdict(trajs[-1].final),
        "stages": {t.stage: {"final": dataclasses.asdict(t.final), "stopped_early": t.stopped_early}
                   for t in trajs},
        "test_error": (metrics.test_error(state.head, state.cloud, test, hyper.activation, final_hyper.trunc)
                       if test is not None else None),
        "data_notes": ds.notes,
        "theory": _theory_summary(cfg, state, ds, spec, final_hyper),
        "artifacts": written,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _repro_seed(args):
    cfg, seed, out = args
    cfg = dataclasses.replace(cfg, hyper=dataclasses.replace(cfg.hyper, seed=seed))
    return run_experiment(cfg, out, repro=True)


def repro_fig1_style(cfg: ExperimentConfig, out_dir=None, seeds=None, jobs=None) -> dict:
    """Multi-seed run with a two-phase step-size schedule.

    Each seed writes its own artifacts to ``seed_<s>/``; the aggregate
    summary.json lists per-seed final NB values and their mean, and
    fig1.svg shows loss, NC1 and drift residual as mean +/- std bands.
    """
    sched = parse_lr_schedule(cfg.schedule.lr_schedule)
    if len(sched) < 2:
        raise ConfigError("repro needs a two-phase schedule.lr_schedule, e.g. '0:0.1,1000:1.0'",
                          "schedule.lr_schedule")
    out = Path(out_dir or cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    count = seeds or cfg.repro.seeds
    base = cfg.hyper.seed
    tasks = [(cfg, base + i, out / f"seed_{base + i}") for i in range(count)]
    jobs = jobs or cfg.repro.jobs
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            sums = list(pool.map(_repro_seed, tasks))
    else:
        sums = [_repro_seed(t) for t in tasks]

    curves = {}
    for name in ("loss", "nc1", "eps_s"):
        runs = []
        for _, _, d in tasks:
            with open(d / "metrics.csv") as fh:
                rows = list(csv.DictReader(fh))
            runs.append([float(r[name]) for r in rows])
            steps = [int(r["step"]) for r in rows]
        arr = np.array(runs)
        curves[name] = {"step": steps, "mean": arr.mean(axis=0).tolist(), "std": arr.std(axis=0).tolist()}

    nb = [s["final"]["nb"] for s in sums]
    summary = {
        "seeds": [t[1] for t in tasks],
        "final_nb": nb,
        "final_nb_mean": float(np.mean(nb)),
        "final_nc1": [s["final"]["nc1"] for s in sums],
        "final_loss": [s["final"]["loss"] for s in sums],
        "epochs": sums[0]["epochs"],
        "lr_schedule": [list(e) for e in sched],
        "curves": curves,
    }
    labels = {"loss": "loss", "nc1": "NC1", "eps_s": "gradient norm"}
    series = [Series(labels[k], v["step"], v["mean"], v["std"]) for k, v in curves.items()]
    (out / "fig1.svg").write_text(render([Panel("loss, NC1 and gradient norm (mean +/- std)", series, True)],
                                         columns=1, title=f"{count} seeds"))
    _write_json(out / "summary.json", summary)
    return summary


def _check(cfg: ExperimentConfig, state_path) -> dict:
    ds, _, spec = build_dataset(cfg)
    hyper = build_hyper(cfg)
    state = load_state(state_path)
    if state.cloud.d != ds.d or state.head.q != ds.q:
        raise CheckpointError("checkpoint does not match the configured dataset dimensions")
    rep = _theory_summary(cfg, state, ds, spec, dataclasses.replace(hyper, trunc=None))
    rep["state"] = {"step": state.step, "seed": state.seed, "N": state.cloud.N, "p": state.cloud.p}
    return rep


def _gen_params(tokens):
    allowed = {"q": int, "d": int, "m": int, "tau": float, "M": float, "seed": int}
    params = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}", tok)
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r} (allowed: {', '.join(sorted(allowed))})", k)
        try:
            params[k] = allowed[k](v)
        except ValueError:
            raise ConfigError(f"bad value {v!r} for {k}", k) from None
    return params


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="collapse-lab",
        description="Train finite-particle mean-field networks and check neural-collapse theory.",
        epilog=__doc__.split("\n", 2)[2],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and write metrics.csv, summary.json, state.txt, curves.svg")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override hyper.seed")
    p.add_argument("--out", help="override outputs.dir")
    p.add_argument("--workers", type=int, help="override run.workers (threads over particle blocks)")

    p = sub.add_parser("check", help="theory checks on a saved state")
    p.add_argument("config")
    p.add_argument("--state", help="checkpoint path (default <outputs.dir>/state.txt)")
    p.add_argument("--out", help="override outputs.dir")

    p = sub.add_parser("gen-data", help="emit a separable dataset as CSV, params as key=value")
    p.add_argument("params", nargs="*", help="q=3 d=10 m=20 tau=0.2 seed=0 [M=...]")
    p.add_argument("--out", help="output path (default stdout)")

    p = sub.add_parser("repro", help="multi-seed two-phase-schedule run with mean +/- std curves")
    p.add_argument("config")
    p.add_argument("--seeds", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    return ap


def _fail(status: str, exc: BaseException, code: int, **extra) -> int:
    payload = {"status": status, "error": type(exc).__name__, "message": str(exc), **extra}
    sys.stderr.write(json.dumps(_clean(payload)) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            params = _gen_params(args.params)
            ds, _ = gen_separable(params.get("q", 3), params.get("d", 10), params.get("m", 20),
                                  params.get("tau", 0.2), params.get("M"), params.get("seed", 0))
            if args.out:
                write_csv(ds, args.out)
            else:
                write_csv(ds, sys.stdout)
            return 0

        cfg = load_config(args.config)
        if getattr(args, "out", None):
            cfg.outputs.dir = args.out
        if args.command == "run":
            if args.seed is not None:
                cfg.hyper.seed = args.seed
            if args.workers is not None:
                cfg.run.workers = args.workers
            summary = run_experiment(cfg)
            sys.stdout.write(json.dumps(_clean({"status": "ok", "out": cfg.outputs.dir,
                                                "final": summary["final"]})) + "\n")
            return 0
        if args.command == "repro":
            summary = repro_fig1_style(cfg, seeds=args.seeds, jobs=args.jobs)
            sys.stdout.write(json.dumps(_clean({"status": "ok", "final_nb": summary["final_nb"],
                                                "final_nb_mean": summary["final_nb_mean"]})) + "\n")
            return 0
        if args.command == "check":
            path = args.state or str(Path(cfg.outputs.dir) / "state.txt")
            rep = _check(cfg, path)
            out = Path(cfg.outputs.dir)
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "check.json", rep)
            sys.stdout.write(json.dumps(_clean(rep), sort_keys=True) + "\n")
            return 1 if rep["violations"] else 0
    except ConfigError as exc:
        return _fail("config error", exc, 2, key=exc.key)
    except (DataError, ConstraintError) as exc:
        return _fail("data error", exc, 3)
    except DivergenceError as exc:
        return _fail("divergence", exc, 4, step=exc.step)
    except CheckpointError as exc:
        return _fail("checkpoint error", exc, 5)
    except (ValueError, ArithmeticError, OSError) as exc:
        return _fail("error", exc, 1)
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
