"""Command-line interface: ``irlsrecon {reconstruct,train,check,grad-check}``.

Configuration comes from an optional TOML file (nested tables flatten to
dotted keys) and repeatable ``--override key=value`` flags. Exit codes: 0 on
success, 1 on numerical failure, 2 on usage or configuration errors, which
are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import tomli

from . import checks, fixtures, plots
from .implicit_grad import (ForwardNotConverged, ThetaParams, backward_pass, fd_gradient,
                            tight_settings)
from .irls import IrlsSettings, ProblemSpec, initial_estimate, run_irls, write_trace_csv
from .linops import (CFAMask, Compose, Decimation, IdentityOp, SubsampledDFT, ValidConv2D,
                     densify)
from .priors import LOWRANK, SPARSE, FilterBank, PriorConfig, gradient_filters
from .tensors_io import ImageMeta, psnr, read_image, read_tensor, ssim, write_image, write_tensor
from .training import (TrainConfig, initial_theta, load_checkpoint, loss_neg_psnr,
                       make_sample_set, save_theta, train, write_log_csv)

TASKS = ("deblur", "sr", "demosaick", "fourier", "denoise")
PRESETS = ("none", "tv-l1", "tv-iso", "tvn")

# key -> default; None means "unset"
DEFAULTS = {
    "task": "deblur",
    "fixture": None,
    "preset": "none",
    "sigma_n": 0.01,
    "seed": 0,
    "delta": 8e-4,
    "init": "auto",
    "input": None,
    "reference": None,
    "kernel": None,
    "mask": None,
    "theta": None,
    "image_shape": None,
    "sr.stride": 2,
    "output.bit_depth": 8,
    "prior.family": "sparse",
    "prior.p": 1.0,
    "prior.gamma": 1e-5,
    "prior.weights": 1.0,
    "prior.filters": None,
    "irls.preset": "train",
    "irls.max_steps": None,
    "irls.fp_rtol": 1e-4,
    "irls.consecutive": 3,
    "irls.require_convergence": True,
    "cg.rtol": 1e-6,
    "cg.maxiter": None,
    "cg.precondition": True,
    "backward.rtol": 1e-2,
    "backward.maxiter": 2000,
    "train.lr": 5e-3,
    "train.decay": 0.98,
    "train.batch_size": 8,
    "train.epochs": 1,
    "train.batches_per_epoch": 50,
    "train.steps": None,
    "train.filters": 4,
    "train.filter_size": 3,
    "train.family": "sparse",
    "train.p": 1.0,
    "train.gamma": 1e-3,
    "train.weight_init": 1.0,
    "train.crops": None,
    "train.kernel": None,
    "train.sigma_min": 0.01,
    "train.sigma_max": 0.01,
    "train.resume": None,
    "check.suites": ["adjoint", "majorizer", "equilibration", "descent"],
    "check.mutate_adjoint": False,
    "grad_check.fixture": "denoise8",
    "grad_check.filters": 2,
    "grad_check.eps": 1e-5,
    "grad_check.tolerance": 1e-3,
    "grad_check.weight": 1.0,
    "grad_check.max_steps": 20000,
}
PATH_KEYS = ("input", "reference", "kernel", "mask", "theta", "prior.filters", "train.crops",
             "train.kernel", "train.resume")


class UsageError(Exception):
    """Bad configuration or arguments (exit code 2)."""


class NumericalFailure(Exception):
    """Non-convergence or a failed check (exit code 1)."""


# ---------------------------------------------------------------- configuration

def _flatten(table, prefix=""):
    out = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    given = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                given.update(_flatten(tomli.load(fh)))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        except tomli.TOMLDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
        base = Path(path).resolve().parent
        for key in PATH_KEYS:
            if isinstance(given.get(key), str) and not Path(given[key]).is_absolute():
                given[key] = str(base / given[key])
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        given[key.strip()] = _parse_value(text.strip())
    unknown = sorted(k for k in given if k not in DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg.update(given)
    return cfg


def _choice(cfg, key, options):
    if cfg[key] not in options:
        raise UsageError(f"{key} must be one of {', '.join(map(str, options))}, got {cfg[key]!r}")
    return cfg[key]


def _number(cfg, key, positive=False, integer=False):
    value = cfg[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise UsageError(f"{key} must be a number, got {value!r}")
    if integer and int(value) != value:
        raise UsageError(f"{key} must be an integer, got {value!r}")
    if positive and not value > 0:
        raise UsageError(f"{key} must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _existing(cfg, key) -> Path:
    path = Path(cfg[key])
    if not path.is_file():
        raise UsageError(f"{key}: file not found: {path}")
    return path


def irls_settings(cfg) -> IrlsSettings:
    preset = _choice(cfg, "irls.preset", ("train", "inference"))
    base = IrlsSettings.train() if preset == "train" else IrlsSettings.inference()
    kw = {"fp_rtol": _number(cfg, "irls.fp_rtol", positive=True),
          "consecutive": _number(cfg, "irls.consecutive", positive=True, integer=True),
          "cg_rtol": _number(cfg, "cg.rtol", positive=True),
          "precondition": bool(cfg["cg.precondition"])}
    if cfg["irls.max_steps"] is not None:
        kw["max_steps"] = _number(cfg, "irls.max_steps", positive=True, integer=True)
    if cfg["cg.maxiter"] is not None:
        kw["cg_maxiter"] = _number(cfg, "cg.maxiter", positive=True, integer=True)
    return IrlsSettings(**{**base.__dict__, **kw})


# ---------------------------------------------------------------- problem assembly

def _read_array(path: Path):
    if path.suffix.lower() == ".png":
        return read_image(path)
    return read_tensor(path)


def build_operator(cfg, x_shape):
    task = _choice(cfg, "task", TASKS)
    c = x_shape[0]
    if task in ("deblur", "sr"):
        if cfg["kernel"] is None:
            raise UsageError(f"task {task} needs a kernel file")
        conv = ValidConv2D(read_tensor(_existing(cfg, "kernel")), x_shape)
        if task == "deblur":
            return conv
        stride = _number(cfg, "sr.stride", positive=True, integer=True)
        return Compose(Decimation(conv.out_shape, stride), conv)
    if task == "demosaick":
        if c != 3:
            raise UsageError(f"demosaick needs a 3-channel image, got {c} channel(s)")
        return CFAMask(*x_shape[1:])
    if task == "fourier":
        if cfg["mask"] is None:
            raise UsageError("task fourier needs a mask file")
        if c != 1:
            raise UsageError(f"fourier sampling needs a 1-channel image, got {c} channels")
        return SubsampledDFT(read_tensor(_existing(cfg, "mask")))
    return IdentityOp(x_shape)


def _image_shape(cfg, y):
    if cfg["image_shape"] is not None:
        shape = tuple(int(v) for v in cfg["image_shape"])
        if len(shape) != 3:
            raise UsageError("image_shape must be [channels, height, width]")
        return shape
    task = cfg["task"]
    if task == "deblur" and cfg["kernel"] is not None:
        kh, kw = read_tensor(_existing(cfg, "kernel")).shape[-2:]
        return (y.shape[0], y.shape[1] + kh - 1, y.shape[2] + kw - 1)
    if task in ("demosaick", "denoise"):
        return tuple(y.shape)
    if task == "fourier" and cfg["mask"] is not None:
        return (1,) + read_tensor(_existing(cfg, "mask")).shape
    raise UsageError(f"cannot infer the image size for task {task}; set image_shape or reference")


def build_prior(cfg, channels):
    """``(bank, prior, theta_or_None)`` from the preset, a checkpoint or prior.* keys."""
    preset = _choice(cfg, "preset", PRESETS)
    if cfg["theta"] is not None:
        theta = load_checkpoint(_existing(cfg, "theta"))[0]
        return FilterBank(theta.filters), theta.prior(), theta
    if preset == "tv-l1":
        return FilterBank(gradient_filters()), PriorConfig(SPARSE, 1.0, 1e-5, 1.0), None
    if preset == "tv-iso":
        if channels != 1:
            raise UsageError("preset tv-iso is for grayscale images; use tvn for color")
        return FilterBank(gradient_filters()), PriorConfig(LOWRANK, 1.0, 1e-5, 1.0), None
    if preset == "tvn":
        return FilterBank(gradient_filters()), PriorConfig(LOWRANK, 1.0, 1e-5, 1.0), None
    family = _choice(cfg, "prior.family", (SPARSE, LOWRANK))
    filters = gradient_filters() if cfg["prior.filters"] is None else \
        read_tensor(_existing(cfg, "prior.filters"))
    try:
        prior = PriorConfig(family, _number(cfg, "prior.p", positive=True),
                            _number(cfg, "prior.gamma", positive=True),
                            np.asarray(cfg["prior.weights"], dtype=np.float64))
    except ValueError as exc:
        raise UsageError(f"prior: {exc}") from exc
    return FilterBank(filters), prior, None


def build_problem(cfg):
    """``(spec, reference_or_None)`` for reconstruct."""
    _choice(cfg, "task", TASKS)
    sigma = _number(cfg, "sigma_n", positive=True)
    if cfg["fixture"] is not None:
        try:
            fx = fixtures.fixture(cfg["fixture"], sigma=sigma, seed=_number(cfg, "seed", integer=True))
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
        bank, prior, _ = build_prior(cfg, fx.x_true.shape[0]) if (
            cfg["preset"] != "none" or cfg["theta"] is not None) else (fx.bank, fx.prior, None)
        return ProblemSpec(fx.A, fx.y, sigma, bank, prior, _number(cfg, "delta", positive=True)), \
            fx.x_true
    reference = None
    if cfg["reference"] is not None:
        reference = read_image(_existing(cfg, "reference"))
    if cfg["input"] is not None:
        y = _read_array(_existing(cfg, "input"))
        x_shape = tuple(reference.shape) if reference is not None else _image_shape(cfg, y)
        A = build_operator(cfg, x_shape)
        if y.shape != tuple(A.out_shape):
            raise UsageError(f"observation has shape {y.shape}, task expects {A.out_shape}")
    elif reference is not None:
        A = build_operator(cfg, reference.shape)
        y = fixtures.noisy(A, reference, sigma, _number(cfg, "seed", integer=True))
    else:
        raise UsageError("give an observation (input), a reference image to degrade, or a fixture")
    bank, prior, _ = build_prior(cfg, A.in_shape[0])
    return ProblemSpec(A, y, sigma, bank, prior, _number(cfg, "delta", positive=True)), reference


def _init(cfg, spec):
    mode = _choice(cfg, "init", ("auto", "wiener", "backproject"))
    if mode == "backproject":
        return spec.A.adjoint(spec.y)
    return initial_estimate(spec.A, spec.y, spec.sigma)


# ---------------------------------------------------------------- subcommands

def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return str(value)


def _finite(value):
    return None if value is None or not math.isfinite(value) else float(value)


def cmd_reconstruct(cfg, out: Path) -> int:
    spec, reference = build_problem(cfg)
    settings = irls_settings(cfg)
    x0 = _init(cfg, spec)
    x, state, trace = run_irls(spec, x0, settings, reference=reference)
    bit_depth = _choice(cfg, "output.bit_depth", (8, 16))
    write_image(x, out / "reconstruction.png", ImageMeta(bit_depth, x.shape[0]))
    write_tensor(x, out / "reconstruction.ltsr")
    write_trace_csv(trace, out / "trace.csv")
    plots.plot_convergence(trace, out / "convergence.png")
    metrics = {"steps": state.k, "converged": state.converged,
               "final_fixed_point_rtol": state.residuals[-1],
               "objective": trace[-1].objective, "descent_violations": state.descent_violations}
    if reference is not None:
        metrics.update(psnr=_finite(psnr(x, reference)), psnr_init=_finite(psnr(x0, reference)))
        if min(x.shape[1:]) >= 11:
            metrics.update(ssim=ssim(np.clip(x, 0, 1), reference),
                           ssim_init=ssim(np.clip(x0, 0, 1), reference))
    _dump(metrics, out / "metrics.json")
    status = "ok" if state.converged or not cfg["irls.require_convergence"] else "not-converged"
    _dump({"command": "reconstruct", "status": status, "config": cfg, "flags": state.flags},
          out / "report.json")
    print(f"steps {state.k}  converged {state.converged}  residual {state.residuals[-1]:.3e}"
          + (f"  psnr {metrics['psnr']:.2f} dB (init {metrics['psnr_init']:.2f})"
             if reference is not None else ""))
    if status != "ok":
        raise NumericalFailure(
            f"IRLS did not meet the fixed-point criterion in {state.k} steps "
            f"(last residual {state.residuals[-1]:.3e})")
    return 0


def _train_config(cfg) -> TrainConfig:
    try:
        return TrainConfig(
            lr=_number(cfg, "train.lr"), decay=_number(cfg, "train.decay"),
            batch_size=_number(cfg, "train.batch_size", positive=True, integer=True),
            epochs=_number(cfg, "train.epochs", positive=True, integer=True),
            batches_per_epoch=_number(cfg, "train.batches_per_epoch", positive=True, integer=True),
            seed=_number(cfg, "seed", integer=True),
            backward_rtol=_number(cfg, "backward.rtol", positive=True),
            backward_maxiter=_number(cfg, "backward.maxiter", positive=True, integer=True))
    except ValueError as exc:
        raise UsageError(f"train: {exc}") from exc


def cmd_train(cfg, out: Path) -> int:
    config = _train_config(cfg)
    crops = fixtures.training_crops() if cfg["train.crops"] is None else \
        read_tensor(_existing(cfg, "train.crops"))
    if crops.ndim == 3:
        crops = crops[:, None]
    blur = fixtures.kernel("gauss5") if cfg["train.kernel"] is None else \
        read_tensor(_existing(cfg, "train.kernel"))
    sigma_range = (_number(cfg, "train.sigma_min", positive=True),
                   _number(cfg, "train.sigma_max", positive=True))
    samples = make_sample_set(crops, blur, sigma_range, _number(cfg, "seed", integer=True))
    adam, start = None, 0
    if cfg["train.resume"] is not None:
        theta, adam, start = load_checkpoint(_existing(cfg, "train.resume"))
    else:
        family = _choice(cfg, "train.family", (SPARSE, LOWRANK))
        p = cfg["train.p"]
        if p != "learned":
            p = _number(cfg, "train.p", positive=True)
        theta = initial_theta(_number(cfg, "train.filters", positive=True, integer=True),
                              _number(cfg, "train.filter_size", positive=True, integer=True),
                              family, _number(cfg, "train.weight_init"),
                              None if p == "learned" else p,
                              _number(cfg, "train.gamma", positive=True),
                              channels=crops.shape[1], seed=_number(cfg, "seed", integer=True))
    steps = None if cfg["train.steps"] is None else \
        _number(cfg, "train.steps", positive=True, integer=True)
    result = train(theta, samples, config, irls_settings(cfg), adam=adam, start_step=start,
                   steps=steps)
    end = start + len(result.log)
    save_theta(out / "theta.ltsr", result.theta, result.adam, step=end)
    write_log_csv(result.log, out / "train_log.csv")
    plots.plot_training(result.log, out / "loss.png")
    first, last = result.log[0]["loss"], result.log[-1]["loss"]
    _dump({"command": "train", "status": "ok", "config": cfg, "steps": [start, end],
           "loss_first": first, "loss_last": last}, out / "report.json")
    print(f"steps {start}..{end}  loss {first:.3f} -> {last:.3f}")
    return 0


def cmd_check(cfg, out: Path) -> int:
    names = cfg["check.suites"]
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    try:
        results = checks.run_suites(list(names), _number(cfg, "seed", integer=True),
                                    bool(cfg["check.mutate_adjoint"]))
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0])) from exc
    lines = [f"{'suite':<14}{'check':<18}{'value':>14}{'threshold':>12}  result"]
    for r in results:
        lines.append(f"{r.suite:<14}{r.name:<18}{r.value:>14.3e}{r.threshold:>12.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    print("\n".join(lines))
    with open(out / "check.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "check", "value", "threshold", "passed"])
        writer.writerows([r.suite, r.name, repr(float(r.value)), repr(r.threshold), bool(r.passed)]
                         for r in results)
    failed = [f"{r.suite}/{r.name}" for r in results if not r.passed]
    _dump({"command": "check", "status": "fail" if failed else "ok", "failed": failed,
           "config": cfg}, out / "report.json")
    if failed:
        raise NumericalFailure(f"failed checks: {', '.join(failed)}")
    return 0


def grad_check_table(cfg):
    """``(rows, max_rel)``; rows are ``(name, analytic, reference, rel_err)``."""
    name = cfg["grad_check.fixture"]
    seed = _number(cfg, "seed", integer=True)
    if name == "quadratic":
        return _quadratic_table(cfg)
    try:
        fx = fixtures.tiny_fixture(name, seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    theta = initial_theta(_number(cfg, "grad_check.filters", positive=True, integer=True), 3,
                          SPARSE, _number(cfg, "grad_check.weight"), 1.0, 1e-3, seed=seed)
    settings = tight_settings()
    settings.max_steps = _number(cfg, "grad_check.max_steps", positive=True, integer=True)
    spec = fx.spec()
    x, state, _ = run_irls(theta.apply_to(spec), spec.A.adjoint(spec.y), settings)
    if not state.converged:
        raise NumericalFailure(
            f"forward pass did not converge in {state.k} steps (residual "
            f"{state.residuals[-1]:.3e}); raise grad_check.max_steps")
    loss = lambda z: loss_neg_psnr(z, fx.x_true)[0]
    rep = backward_pass(spec, theta, x, loss_neg_psnr(x, fx.x_true)[1], rtol=1e-12,
                        maxiter=_number(cfg, "backward.maxiter", positive=True, integer=True))
    try:
        fd = fd_gradient(spec, theta, loss, eps=_number(cfg, "grad_check.eps", positive=True),
                         x0=x, settings=settings)
    except ForwardNotConverged as exc:
        raise NumericalFailure(f"finite-difference probe: {exc}") from exc
    analytic = rep.grad.to_vector()
    return _rows(theta.names()[:-1], analytic[:-1], fd[:-1])


def _rows(names, analytic, reference):
    rows = []
    for n, a, r in zip(names, analytic, reference):
        rel = abs(a - r) / abs(r) if r != 0 else abs(a - r)
        rows.append((n, float(a), float(r), float(rel)))
    return rows, max(r[3] for r in rows)


def _quadratic_table(cfg):
    """p = 2 prior on a denoising crop: implicit gradient against the dense ridge formula."""
    fx = fixtures.tiny_fixture("denoise8", _number(cfg, "seed", integer=True))
    shape = fx.x_true.shape
    filters = gradient_filters()
    w = np.full(2, _number(cfg, "grad_check.weight"))
    theta = ThetaParams(filters, w, 0.0, SPARSE, 1e-3, p_fixed=2.0)
    spec = fx.spec()
    A = densify(spec.A)
    G = [densify(FilterBank(f, shape)) for f in filters]
    s2 = spec.sigma ** 2
    M = A.T @ A + sum(2 * s2 * wf * g.T @ g for wf, g in zip(w, G))
    x = np.linalg.solve(M, A.T @ spec.y.ravel())
    dl = loss_neg_psnr(x.reshape(shape), fx.x_true)[1].ravel()
    lam = np.linalg.solve(M, dl)
    closed = np.array([-2 * s2 * lam @ (g.T @ (g @ x)) for g in G])
    rep = backward_pass(spec, theta, x.reshape(shape), dl.reshape(shape),
                        rtol=1e-13)
    analytic = rep.grad.weights
    return _rows([f"weight[{j}]" for j in range(len(w))], analytic, closed)


def cmd_grad_check(cfg, out: Path) -> int:
    rows, worst = grad_check_table(cfg)
    tol = _number(cfg, "grad_check.tolerance", positive=True)
    lines = [f"{'parameter':<20}{'analytic':>16}{'reference':>16}{'rel_err':>12}"]
    lines += [f"{n:<20}{a:>16.8e}{r:>16.8e}{e:>12.2e}" for n, a, r, e in rows]
    print("\n".join(lines))
    print(f"max relative error {worst:.3e} (tolerance {tol:.1e})")
    with open(out / "grad_check.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "analytic", "reference", "rel_err"])
        writer.writerows([n, repr(a), repr(r), repr(e)] for n, a, r, e in rows)
    _dump({"command": "grad-check", "status": "ok" if worst <= tol else "fail",
           "max_rel_err": worst, "config": cfg}, out / "report.json")
    if worst > tol:
        raise NumericalFailure(f"max relative error {worst:.3e} exceeds {tol:.1e}")
    return 0


COMMANDS = {"reconstruct": cmd_reconstruct, "train": cmd_train, "check": cmd_check,
            "grad-check": cmd_grad_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irlsrecon", description="IRLS image reconstruction")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a configuration key (repeatable)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
    return ap


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.override)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        return _fail(2, "usage", str(exc))
    except NumericalFailure as exc:
        return _fail(1, "numerical", str(exc))
    except (ForwardNotConverged, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(1, "numerical", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(2, "input", str(exc))


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
