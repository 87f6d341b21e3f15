"""Command-line interface: simulate, train, eval, inspect, gradcheck, upsample."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import cubeio, metrics
from .diffmath import ShapeError, constant, upsample_bilinear
from .observation import DivisibilityError, kernel_summary
from .scene import generate_scene
from .selfreg import (
    ConfigError,
    NonFiniteLossError,
    SrfnConfig,
    ablation_config,
    learned_model,
    train,
)

log = logging.getLogger("srfn")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


DEFAULTS = {
    "simulate": dict(width=64, height=64, bands=31, msi_bands=3, scale=4, psf_size=8,
                     psf_sigma=1.0, seed=0, out=None),
    "train": dict(y=None, z=None, out=None, resume=None, ablation=None, known_model=None),
    "eval": dict(pred=None, gt=None, scale=None, out=None),
    "inspect": dict(checkpoint=None),
    "gradcheck": dict(seed=0),
    "upsample": dict(input=None, scale=None, out=None),
}


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing_file", f"config file not found: {path}") from None
    except ValueError as exc:
        raise CliError("malformed_config", f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise CliError("malformed_config", f"{path}: top level must be a JSON object")
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the --config JSON and explicit flags (highest priority)."""
    merged = dict(DEFAULTS[args.command])
    extra = {}
    if args.config:
        for key, value in _load_json(args.config).items():
            key = key.replace("-", "_")
            if key in merged:
                merged[key] = value
            else:
                extra[key] = value
    for key in DEFAULTS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    merged["_extra"] = extra
    return merged


def _require(opts: dict, *keys) -> None:
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        raise CliError("missing_argument", "missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _read_cube(path):
    if not Path(path).exists():
        raise CliError("missing_file", f"no such file: {path}")
    return cubeio.read_cube(path)


def cmd_simulate(opts: dict) -> int:
    _require(opts, "out")
    if opts["_extra"]:
        raise CliError("malformed_config", f"unknown keys: {sorted(opts['_extra'])}")
    scene = generate_scene(int(opts["width"]), int(opts["height"]), int(opts["bands"]),
                           int(opts["msi_bands"]), int(opts["scale"]), int(opts["psf_size"]),
                           float(opts["psf_sigma"]), int(opts["seed"]))
    out = Path(opts["out"])
    cubeio.write_cube(out / "X.hcube", scene.x)
    cubeio.write_cube(out / "Y.hcube", scene.y)
    cubeio.write_cube(out / "Z.hcube", scene.z)
    cubeio.write_model(out / "model.json", scene.psf, scene.srf, scene.scale)
    print(f"wrote scene to {out} (X {scene.x.shape}, Y {scene.y.shape}, Z {scene.z.shape})")
    return 0


def _train_config(opts: dict) -> SrfnConfig:
    try:
        cfg = SrfnConfig.from_dict(opts["_extra"])
        if opts["ablation"]:
            cfg = ablation_config(opts["ablation"], cfg)
    except (TypeError, ConfigError) as exc:
        raise CliError("malformed_config", str(exc)) from None
    return cfg


def loss_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "L_spa", "L_spe", "L_lc", "total"])
    for row in history:
        writer.writerow([row["iteration"]] + [repr(row[k]) for k in ("spa", "spe", "lc", "total")])
    return buf.getvalue()


def cmd_train(opts: dict) -> int:
    _require(opts, "y", "z", "out")
    Y, Z = _read_cube(opts["y"]), _read_cube(opts["z"])
    state = None
    if opts["resume"]:
        state = cubeio.read_checkpoint(opts["resume"])
        try:
            cfg = SrfnConfig.from_dict({**state.config.to_dict(), **opts["_extra"]})
        except (TypeError, ConfigError) as exc:
            raise CliError("malformed_config", str(exc)) from None
        state.config = cfg
    else:
        cfg = _train_config(opts)
    psf = srf = None
    if opts["known_model"]:
        psf, srf, scale = cubeio.read_model(opts["known_model"])
        if scale != cfg.scale:
            raise CliError("malformed_config", f"known model scale {scale} != config scale {cfg.scale}")
    result = train(Y, Z, cfg, psf=psf, srf=srf, state=state)
    out = Path(opts["out"])
    cubeio.write_cube(out / "xhat.hcube", result.xhat)
    cubeio.write_checkpoint(out / "checkpoint.bin", result.state)
    cubeio.write_model(out / "learned_model.json", result.psf, result.srf, cfg.scale)
    cubeio.atomic_write(out / "loss.csv", loss_csv(result.history).encode())
    final = ", ".join(f"{k}={v:.6g}" for k, v in result.final.items())
    print(f"trained {result.state.iteration} iterations; final {final}")
    return 0


def cmd_eval(opts: dict) -> int:
    _require(opts, "pred", "gt", "scale")
    pred, gt = _read_cube(opts["pred"]), _read_cube(opts["gt"])
    report = metrics.evaluate(pred, gt, int(opts["scale"]))
    text = report.to_text()
    if opts["out"]:
        out = Path(opts["out"])
        cubeio.atomic_write(out, (report.to_json() + "\n").encode())
        cubeio.atomic_write(out.with_suffix(".txt"), text.encode())
    sys.stdout.write(text)
    return 0


def cmd_inspect(opts: dict) -> int:
    _require(opts, "checkpoint")
    if not Path(opts["checkpoint"]).exists():
        raise CliError("missing_file", f"no such file: {opts['checkpoint']}")
    state = cubeio.read_checkpoint(opts["checkpoint"])
    store = state.store
    groups = {}
    for name in store.names():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + store[name].value.size
    psf, srf = learned_model(state)
    summary = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "bands": state.bands,
        "msi_bands": state.msi_bands,
        "parameters": {"total": store.count(), **groups},
        "learned_psf": kernel_summary(psf.value),
        "learned_srf_row_sums": [float(v) for v in srf.value.sum(axis=1)],
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_gradcheck(opts: dict) -> int:
    from .gradcheck import check_gradients

    report = check_gradients(seed=int(opts["seed"]))
    print(report.summary())
    for name, idx, g, fd in report.failures[:10]:
        print(f"  {name}{list(idx)}: analytic {g:.6e} finite-difference {fd:.6e}")
    return 0 if report.passed else 1


def cmd_upsample(opts: dict) -> int:
    _require(opts, "input", "scale", "out")
    cube = _read_cube(opts["input"])
    up = upsample_bilinear(constant(cube[None]), int(opts["scale"])).value[0]
    cubeio.write_cube(opts["out"], up)
    print(f"wrote {up.shape} cube to {opts['out']}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "upsample": cmd_upsample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srfn", description="Blind hyperspectral fusion by self-regression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file supplying any of this command's options")
        return p

    p = command("simulate", "generate a synthetic scene and its observations")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--msi-bands", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--psf-size", type=int)
    p.add_argument("--psf-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("train", "fit SRFN to an (LR-HSI, HR-MSI) pair")
    p.add_argument("--y", help="LR-HSI cube")
    p.add_argument("--z", help="HR-MSI cube")
    p.add_argument("--out")
    p.add_argument("--resume", help="continue from checkpoint.bin")
    p.add_argument("--ablation", choices=["baseline", "S", "SN", "SNL", "SNLA"])
    p.add_argument("--known-model", help="model.json to freeze B and R (non-blind)")

    p = command("eval", "compare a fused cube with ground truth")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--scale", type=int)
    p.add_argument("--out")

    p = command("inspect", "summarize a checkpoint")
    p.add_argument("--checkpoint")

    p = command("gradcheck", "finite-difference check of every parameter gradient")
    p.add_argument("--seed", type=int)

    p = command("upsample", "bilinear upsampling of a cube (baseline)")
    p.add_argument("--input")
    p.add_argument("--scale", type=int)
    p.add_argument("--out")
    return parser


def _fail(code: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](resolve(args))
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except cubeio.FormatError as exc:
        return _fail(exc.code, str(exc))
    except DivisibilityError as exc:
        return _fail("divisibility", str(exc))
    except (ShapeError, metrics.MetricError) as exc:
        return _fail("shape_mismatch", str(exc))
    except ConfigError as exc:
        return _fail("malformed_config", str(exc))
    except NonFiniteLossError as exc:
        return _fail("non_finite", str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc))


if __name__ == "__main__":
    sys.exit(main())
