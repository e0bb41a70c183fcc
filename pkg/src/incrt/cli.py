"""Command-line entry point: run, predict, verify, sweep."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attention import LayerState, init_model, model_residual
from .controller import ControllerConfig, write_events
from .exceptions import PreconditionError
from .gate import init_gate
from .spectra import (
    BD,
    CapturedBasis,
    complexity_index,
    decay_envelope,
    pac_sample_bound,
    predict_head_count,
)
from .tasks import OperatorTaskSpec, SequenceTaskSpec, operator_task, sequence_task
from .trainer import TrainConfig, train_loop
from . import verify

CONTROLLER_KEYS = {
    "phi_w", "t_conv", "t_prune", "delta_preserve", "mode", "deflate_minor", "sigma_new",
    "gate_tol", "eta_plus", "eta_minus", "gate_steps", "freeze_on_stop", "w_o_init", "max_heads",
}


@dataclass
class ExperimentConfig:
    task: dict
    model: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    out: str = "runs/out"
    seed: int = 0

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - {"task", "model", "controller", "train", "out", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @property
    def kind(self) -> str:
        return self.task.get("kind", "operator")

    def task_spec(self):
        spec = {k: v for k, v in self.task.items() if k != "kind"}
        if self.kind == "operator":
            spec.setdefault("seed", self.seed)
            return OperatorTaskSpec(**spec)
        if self.kind == "sequence":
            spec.setdefault("seed", self.seed)
            return SequenceTaskSpec(**spec)
        raise ValueError(f"unknown task kind {self.kind!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def controller_factory(self):
        c = dict(self.controller)
        bad = set(c) - CONTROLLER_KEYS - {"theta_w", "phi_g", "theta_ratio", "phi_ratio"}
        if bad:
            raise ValueError(f"unknown controller keys: {sorted(bad)}")
        theta_w, phi_g = c.pop("theta_w", None), c.pop("phi_g", None)
        theta_ratio, phi_ratio = c.pop("theta_ratio", 0.4), c.pop("phi_ratio", 0.05)

        def build(gamma0: float) -> ControllerConfig:
            theta = theta_w if theta_w is not None else theta_ratio * gamma0
            phi = phi_g if phi_g is not None else phi_ratio * theta
            return ControllerConfig(theta_w=theta, phi_g=phi, **c)

        return build

    def validate(self) -> None:
        self.task_spec()
        self.train_config()
        c = self.controller
        # absolute thresholds can be checked before any data is seen
        theta = c.get("theta_w")
        phi = c.get("phi_g")
        if theta is not None and phi is not None and not 0 < phi < theta:
            raise PreconditionError(f"need 0 < phi_g < theta_w (got phi_g={phi}, theta_w={theta})")
        if "phi_ratio" in c and not 0 < c["phi_ratio"] < 1:
            raise PreconditionError("need 0 < phi_g < theta_w: phi_ratio must lie in (0, 1)")
        self.controller_factory()(1.0)


def _model_for(cfg: ExperimentConfig, spec):
    if cfg.kind == "operator":
        return LayerState([], CapturedBasis.empty(spec.d), init_gate(spec.d, seed=cfg.seed))
    m = dict(d=32, d_k=8, d_v=8, n=spec.n_tokens)
    m.update(cfg.model)
    model = init_model(spec.vocab_size, spec.n_classes, m["d"], m["d_k"], m["d_v"], m["n"], seed=cfg.seed)
    for k in ("value_variance", "w_o_init"):
        if k in m:
            model.meta[k] = m[k]
    return model


def initial_residual(cfg: ExperimentConfig, spec) -> np.ndarray:
    """The residual operator the controller sees on its first batch."""
    if cfg.kind == "operator":
        return operator_task(spec, spec.phases[0].start_epoch)
    model = _model_for(cfg, spec)
    tc = cfg.train_config()
    batch = sequence_task(spec, tc.batch_size, rng_state=[tc.seed, 0])
    return model_residual(model, batch.tokens)


def execute(cfg: ExperimentConfig, out: Optional[str] = None) -> dict:
    spec = cfg.task_spec()
    model = _model_for(cfg, spec)
    tc = cfg.train_config()
    model, trace, state, ccfg = train_loop(model, spec, tc, cfg.controller_factory())
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    trace.to_csv(os.path.join(out, "trace.csv"))
    write_events(os.path.join(out, "events.jsonl"), state.events)
    summary = {"kind": cfg.kind, "seed": cfg.seed, "steps": len(trace)}
    if ccfg is None:
        summary.update(final_heads=0, growths=0, prunes=0)
    else:
        layer = model if isinstance(model, LayerState) else model.layer
        A0 = initial_residual(cfg, spec)
        mode = ccfg.mode
        summary.update(
            theta_w=ccfg.theta_w,
            phi_g=ccfg.phi_g,
            gamma0=state.gamma_ref,
            final_heads=len(layer.heads),
            growths=len(state.growth_events()),
            prunes=len(state.prune_events()),
            stopped=state.stopped,
            final_gamma_res=trace.rows[-1]["gamma_res"],
            final_acc=trace.rows[-1]["acc"],
            gamma_trace=[e.gamma_res for e in state.growth_events()] + [trace.rows[-1]["gamma_res"]],
        )
        try:
            rep = complexity_index(A0, ccfg.theta_w, mode)
            summary.update(kappa=rep.kappa, k_pred=rep.k_star_pred, k_oracle=rep.k_oracle)
            summary["k_obs_over_k_pred"] = len(layer.heads) / rep.k_star_pred if rep.k_star_pred else None
            # decay figure data: online trace against the envelope
            with open(os.path.join(out, "gamma_decay.csv"), "w") as fh:
                fh.write("k,gamma_online,envelope\n")
                for k, g in enumerate(summary["gamma_trace"]):
                    fh.write(f"{k},{g!r},{decay_envelope(rep.gamma0, rep.kappa, k)!r}\n")
        except PreconditionError:
            summary.update(kappa=None, k_pred=0, k_oracle=0, k_obs_over_k_pred=None)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(verify._jsonable(summary), fh, indent=2, sort_keys=True)
    return summary


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    summary = execute(cfg, args.out)
    print(json.dumps(verify._jsonable({k: v for k, v in summary.items() if k != "gamma_trace"}), sort_keys=True))
    return 0


def _pac(args, k_star: int) -> Optional[float]:
    if args.epsilon is None:
        return None
    return pac_sample_bound(args.epsilon, args.delta, args.C, args.motor_norm, args.d_k, k_star, args.t_conv)


def cmd_predict(args) -> int:
    if args.kappa is not None:
        if args.ratio is None:
            raise PreconditionError("--kappa needs --ratio (Gamma0 / theta_w)")
        k = predict_head_count(args.kappa, args.ratio, 1.0)
        report = {"kappa": args.kappa, "ratio": args.ratio, "rho": 1 - 1 / args.kappa**2, "k_star_pred": k}
    else:
        if not args.config:
            raise PreconditionError("predict needs --config or --kappa/--ratio")
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        spec = cfg.task_spec()
        A0 = initial_residual(cfg, spec)
        gamma0 = float(np.linalg.norm(A0))
        if gamma0 == 0.0:
            print(json.dumps({"status": "already sufficient", "gamma0": 0.0, "k_star_pred": 0}))
            return 0
        ccfg = cfg.controller_factory()(gamma0)
        rep = complexity_index(A0, ccfg.theta_w, ccfg.mode)
        report = asdict(rep)
        report["status"] = "already sufficient" if rep.k_star_pred == 0 else "growth required"
    pac = _pac(args, report["k_star_pred"])
    if pac is not None:
        report["pac_samples"] = pac
    print(json.dumps(verify._jsonable(report), sort_keys=True))
    return 0


def cmd_verify(args) -> int:
    suites = args.suite.split(",") if args.suite else None
    checks = verify.run_suites(suites, fault=args.inject_fault, quick=args.quick)
    for c in checks:
        print(c.line())
    report = {"passed": all(c.passed for c in checks), "checks": [verify.check_to_dict(c) for c in checks]}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return 0 if report["passed"] else 1


def _sweep_point(cfg: ExperimentConfig, ratio: float, seed: int, out: str) -> dict:
    c = ExperimentConfig(**{**asdict(cfg), "seed": seed})
    c.controller = {k: v for k, v in c.controller.items() if k not in ("theta_w", "phi_g")}
    c.controller["theta_ratio"] = ratio
    s = execute(c, os.path.join(out, f"ratio{ratio:g}_seed{seed}"))
    return {"ratio": ratio, "seed": seed, "k_pred": s.get("k_pred"), "k_obs": s.get("final_heads"), "acc": s.get("final_acc")}


def cmd_sweep(args) -> int:
    grid = [float(x) for x in args.theta_grid.split(",")]
    seeds = list(range(args.seeds))
    out = args.out or "runs/sweep"
    os.makedirs(out, exist_ok=True)
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        jobs = [(cfg, r, cfg.seed + s, out) for r in grid for s in seeds]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as ex:
                points = list(ex.map(_sweep_point, *zip(*jobs)))
        else:
            points = [_sweep_point(*j) for j in jobs]
        rows = []
        for r in grid:
            pts = [p for p in points if p["ratio"] == r]
            kp = np.array([p["k_pred"] or 0 for p in pts], float)
            ko = np.array([p["k_obs"] for p in pts], float)
            acc = np.array([p["acc"] for p in pts], float)
            rows.append(
                {
                    "ratio": r,
                    "K_pred": float(kp.mean()),
                    "K_obs_mean": float(ko.mean()),
                    "K_obs_std": float(ko.std()),
                    "K_obs_over_K_pred": float(ko.mean() / kp.mean()) if kp.mean() else None,
                    "acc": float(np.nanmean(acc)) if np.isfinite(acc).any() else None,
                }
            )
        table = {"mode": cfg.controller.get("mode", BD), "rows": rows}
    else:
        table = verify.threshold_sweep(grid, seeds=seeds, d=args.d, mode=args.mode)
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write("ratio,K_pred,K_obs_mean,K_obs_std,K_obs_over_K_pred\n")
        for r in table["rows"]:
            fh.write(f"{r['ratio']},{r['K_pred']},{r['K_obs_mean']},{r['K_obs_std']},{r['K_obs_over_K_pred']}\n")
    print(json.dumps(table, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="incrt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train with growth/prune control and write traces")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("predict", help="complexity index, head-count law and sample bound")
    pr.add_argument("--config")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--kappa", type=float)
    pr.add_argument("--ratio", type=float, help="Gamma0 / theta_w")
    pr.add_argument("--epsilon", type=float)
    pr.add_argument("--delta", type=float, default=0.1)
    pr.add_argument("--C", type=float, default=1.0)
    pr.add_argument("--motor-norm", type=float, default=1.0)
    pr.add_argument("--d-k", type=int, default=8)
    pr.add_argument("--t-conv", type=int, default=50)
    pr.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="run invariant suites; nonzero exit on failure")
    v.add_argument("--suite", help=f"comma list from {','.join(verify.SUITES)}")
    v.add_argument("--inject-fault", choices=["deflation"])
    v.add_argument("--quick", action="store_true")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="head count against threshold ratio")
    s.add_argument("--config", help="experiment config; planted operators when omitted")
    s.add_argument("--theta-grid", default="0.2,0.4,0.6")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--mode", default=BD)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PreconditionError, ValueError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
