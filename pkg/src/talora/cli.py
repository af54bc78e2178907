"""Command-line entry point.

Subcommands::

    talora train      --config CFG [--seed N] --out DIR
    talora gradcheck  --config CFG [--seed N] [--out DIR] [--coords N] [--h H]
    talora paramcount [--d D --k K --p P --q Q --v V --r R] [--tasks 1-16]
    talora delta      CANDIDATE BASELINE
    talora oracle     [--dims d,k,T,p,q,v] [--seed N] [--trials N]

Exit status is 0 on success, 1 for invalid input and 2 when a check fails.
Failures print one line to stderr starting with ``talora: error:`` or
``talora: check-failed:``. ``--seed`` wins over ``TALORA_SEED``, which wins
over the config file.

Metrics arguments to ``delta`` are JSONL files or shipped fixture names such
as ``nyuv2/ta_lora`` (see :func:`fixture_path`).
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .adapter import param_count, reconstruct, seeded_rng, TuckerFactors
from .checkpoint import CheckpointError, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .gradcheck import check_model, move_off_init, random_batch
from .linear import LinearTaskModel
from .msam import build_model
from .objective import MetricsTable, delta_metric
from .synth import noise_floor, synth_dataset
from .tensor import frobenius_norm, tucker_oracle
from .trainer import TrainingDiverged, evaluate, frozen_digest, train

GRADCHECK_TOL = 1e-5
ORACLE_TOL = 1e-12
CHECKPOINT_NAME = "checkpoint.talr"


class CheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- experiment


def build_data(cfg: ExperimentConfig):
    tasks = cfg.task_specs()
    if cfg.recipe == "shared-lowrank-regression":
        dims = cfg.data.model_dump(include={"d", "k", "p", "q", "v"})
    else:
        dims = {"grid_h": cfg.encoder.grid_h, "grid_w": cfg.encoder.grid_w,
                "in_channels": cfg.encoder.in_channels, "latent": cfg.data.latent}
    return synth_dataset(cfg.recipe, dims, tasks, cfg.data.noise, cfg.seed, cfg.data.n_samples)


def build_experiment(cfg: ExperimentConfig):
    """Model and data for ``cfg``; the linear recipe adapts the data's ``W0``."""
    data = build_data(cfg)
    tasks = cfg.task_specs()
    if cfg.recipe == "shared-lowrank-regression":
        model = LinearTaskModel(data.truth["W0"], tasks, cfg.adapter_spec(), seed=cfg.seed)
    else:
        model = build_model(cfg.encoder_config(), tasks, cfg.adapter_spec())
    return model, data


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def cmd_train(cfg: ExperimentConfig, out) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model, data = build_experiment(cfg)
    try:
        history, state = train(model, data, cfg.train_config())
    except TrainingDiverged as exc:
        raise CheckFailed(f"training diverged at step {exc.step}") from None
    losses = evaluate(model, data)
    metrics = {
        "recipe": cfg.recipe,
        "adapter": cfg.adapter.kind,
        "adapter_params": model.adapter_param_count(),
        "trainable_params": int(sum(a.size for a in model.trainable_params().values())),
        "final_task_losses": losses,
        "final_reg": float(model.regularizer()),
        "initial_reg": history.initial_reg,
        "steps": history.total_steps,
        "frozen_digest": frozen_digest(model),
        "data_digest": data.digest(),
    }
    if cfg.recipe == "shared-lowrank-regression":
        metrics["noise_floor"] = noise_floor(data)
    (out / "config.json").write_text(_dump(cfg.to_dict()))
    (out / "history.json").write_text(_dump(history.to_dict()))
    (out / "metrics.json").write_text(_dump(metrics))
    save_checkpoint(model, out / CHECKPOINT_NAME, cfg.canonical_json(), state=state)
    print(f"train: {history.total_steps} steps, final losses "
          + " ".join(f"{x:.6g}" for x in losses) + f", wrote {out}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, out=None, n_coords: int = 200, h: float = 1e-6) -> int:
    model, _ = build_experiment(cfg)
    move_off_init(model, cfg.seed)
    batch = random_batch(model, n=1, seed=cfg.seed)
    rep = check_model(model, batch, lam=cfg.lam, mode="train", h=h, n_coords=n_coords,
                      seed=cfg.seed)
    report = {
        "max_rel_error": rep.max_rel_error,
        "mean_rel_error": rep.mean_rel_error,
        "n_checked": rep.n_checked,
        "h": h,
        "tolerance": GRADCHECK_TOL,
        "per_param": rep.per_param,
        "worst": None if rep.worst is None else {
            "param": rep.worst[0], "index": list(rep.worst[1]), "analytic": rep.worst[2],
            "rel_error": rep.worst[3]},
    }
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "gradcheck.json").write_text(_dump(report))
    print(f"gradcheck: max_rel_error={rep.max_rel_error:.3e} "
          f"mean_rel_error={rep.mean_rel_error:.3e} coords={rep.n_checked}")
    if not rep.passed(GRADCHECK_TOL):
        raise CheckFailed(f"gradcheck max relative error {rep.max_rel_error:.3e} > {GRADCHECK_TOL:g} "
                          f"at {rep.worst[0]}{list(rep.worst[1])}")
    return 0


def parse_range(text: str) -> list[int]:
    try:
        if "-" in text:
            lo, hi = (int(s) for s in text.split("-", 1))
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValueError(f"--tasks: expected N or LO-HI, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ValueError(f"--tasks: invalid range {text!r}")
    return list(range(lo, hi + 1))


def paramcount_rows(d, k, p, q, v, r, Ts) -> list[tuple[int, int, int, int]]:
    return [(T, param_count("ta_lora", d, k, T, p=p, q=q, v=v),
             param_count("lora_stl", d, k, T, r=r), param_count("lora_hps", d, k, T, r=r))
            for T in Ts]


def cmd_paramcount(d=1024, k=1024, p=32, q=32, v=8, r=16, tasks="1-16") -> int:
    rows = paramcount_rows(d, k, p, q, v, r, parse_range(tasks))
    print(f"# d={d} k={k} p={p} q={q} v={v} r={r}")
    print(f"{'T':>3} {'ta_lora':>12} {'lora_stl':>12} {'lora_hps':>12}")
    for T, ta, stl, hps in rows:
        print(f"{T:>3} {ta:>12,} {stl:>12,} {hps:>12,}")
    return 0


def fixture_path(ref: str) -> Path:
    """Resolve a metrics file path, falling back to a shipped fixture name."""
    p = Path(ref)
    if p.is_file():
        return p
    name = ref if ref.endswith(".jsonl") else ref + ".jsonl"
    fx = resources.files("talora") / "fixtures" / name
    if fx.is_file():
        return Path(str(fx))
    raise ValueError(f"{ref}: no such metrics file or fixture")


def cmd_delta(candidate: str, baseline: str) -> int:
    cand = MetricsTable.load(fixture_path(candidate))
    base = MetricsTable.load(fixture_path(baseline))
    frac = delta_metric(cand, base)
    print(f"delta: {100 * frac:+.2f}% (fraction {frac:.6f})")
    return 0


def parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ValueError(f"--dims: expected six comma-separated integers, got {text!r}") from None
    if len(dims) != 6 or min(dims) < 1:
        raise ValueError(f"--dims: expected six positive integers d,k,T,p,q,v, got {text!r}")
    return dims


def oracle_errors(dims, seed: int = 0, trials: int = 50) -> list[float]:
    """Relative Frobenius error of :func:`reconstruct` vs the loop oracle.

    Each trial draws dims uniformly from ``1..dims[i]``.
    """
    rng = seeded_rng(seed)
    errs = []
    for _ in range(trials):
        d, k, T, p, q, v = (int(rng.integers(1, m + 1)) for m in dims)
        f = TuckerFactors(rng.standard_normal((p, q, v)), rng.standard_normal((d, p)),
                          rng.standard_normal((k, q)), rng.standard_normal((T, v)))
        ref = tucker_oracle(f.G, f.U1, f.U2, f.U3)
        scale = frobenius_norm(ref)
        errs.append(frobenius_norm(reconstruct(f) - ref) / (scale if scale > 0 else 1.0))
    return errs


def cmd_oracle(dims="12,12,6,4,4,3", seed: int = 0, trials: int = 50) -> int:
    errs = oracle_errors(parse_dims(dims), seed, trials)
    worst = max(errs)
    print(f"oracle: trials={trials} max_rel_error={worst:.3e}")
    if worst > ORACLE_TOL:
        raise CheckFailed(f"reconstruction differs from oracle by {worst:.3e} > {ORACLE_TOL:g}")
    return 0


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"talora: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="talora", description="Tucker-structured multi-task LoRA experiments")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    common(sub.add_parser("train", help="train and write history, metrics and checkpoint"), True)
    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(g, False)
    g.add_argument("--coords", type=int, default=200, help="total coordinates to check")
    g.add_argument("--h", type=float, default=1e-6, help="central-difference step")

    pc = sub.add_parser("paramcount", help="adapter parameter counts over a range of T")
    for name, default in (("d", 1024), ("k", 1024), ("p", 32), ("q", 32), ("v", 8), ("r", 16)):
        pc.add_argument(f"--{name}", type=int, default=default)
    pc.add_argument("--tasks", default="1-16", help="task count N or range LO-HI")

    dl = sub.add_parser("delta", help="average relative improvement of CANDIDATE over BASELINE")
    dl.add_argument("candidate")
    dl.add_argument("baseline")

    orc = sub.add_parser("oracle", help="check fast reconstruction against the loop oracle")
    orc.add_argument("--dims", default="12,12,6,4,4,3", help="max d,k,T,p,q,v")
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--trials", type=int, default=50)
    return ap


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed: expected a non-negative integer, got {args.seed}")
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(_load_config(args), args.out)
        if args.command == "gradcheck":
            if args.coords < 1 or not args.h > 0:
                raise ValueError("--coords must be >= 1 and --h > 0")
            return cmd_gradcheck(_load_config(args), args.out, args.coords, args.h)
        if args.command == "paramcount":
            for name in ("d", "k", "p", "q", "v", "r"):
                if getattr(args, name) < 1:
                    raise ValueError(f"--{name}: expected a positive integer")
            return cmd_paramcount(args.d, args.k, args.p, args.q, args.v, args.r, args.tasks)
        if args.command == "delta":
            return cmd_delta(args.candidate, args.baseline)
        if args.trials < 1:
            raise ValueError("--trials must be >= 1")
        return cmd_oracle(args.dims, args.seed, args.trials)
    except CheckFailed as exc:
        print(f"talora: check-failed: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"talora: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
