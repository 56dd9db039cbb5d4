"""Command-line entry point: ``spherelab <subcommand> ...``.

Exit codes: 0 success, 1 fit or verification failure (or a diverged run),
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import scalefit as sf
from . import theoremlab
from .hyperp import Scheme
from .model import ConfigError
from .training import RunConfig, load_config, sweep, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --grid value {text!r}") from None


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.scheme is not None:
        cfg = replace(cfg, model=replace(cfg.model, scheme=Scheme.parse(args.scheme).value))
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = train(cfg)
    _emit({"status": res.status, "final_loss": res.final_loss, "val_loss": res.val_loss,
           "steps": res.steps, "log": res.log_path, "failed_step": res.failed_step})
    return EXIT_OK if res.status == "ok" else EXIT_FAIL


def cmd_sweep(args) -> int:
    if not args.grid:
        raise ConfigError("sweep needs --grid")
    cfg = _run_config(args)
    res = sweep(cfg, _grid(args.grid), cfg.out_dir, workers=args.workers)
    for lr in res["failed"]:
        print(f"warning: run at lr={lr} failed and was excluded from the fit", file=sys.stderr)
    _emit(res)
    return EXIT_OK if res["fit"] is not None else EXIT_FAIL


def cmd_fit(args) -> int:
    if args.power:
        x, y = sf.read_xy_csv(args.csv, args.x, args.y)
        _emit(sf.fit_power_law(x, y, with_floor=args.floor).to_dict())
    else:
        pts = sf.read_sweep_csv(args.csv)
        try:
            _emit(sf.fit_quadratic_loglr(pts).to_dict())
        except sf.NoInteriorMinimum as exc:
            _emit({"error": str(exc), "fit": exc.fit.to_dict()})
            return EXIT_FAIL
    return EXIT_OK


def _read_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise sf.FitError(f"{path}: no data rows")
    try:
        return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    except ValueError as exc:
        raise sf.FitError(f"{path}: {exc}") from None


def _cel_table(path, baseline, methods, flops_col="flops"):
    cols = _read_columns(path)
    for c in [flops_col, baseline, *methods]:
        if c not in cols:
            raise sf.FitError(f"column {c!r} not in {path}")
    C = cols[flops_col]
    fits = {m: sf.fit_power_law(C, cols[m], with_floor=True) for m in [baseline, *methods]}
    out = {"fits": {m: f.to_dict() for m, f in fits.items()}, "leverage": {}, "cel_baseline_law": {}}
    for m in methods:
        out["leverage"][m] = [sf.leverage(fits[m], c, b) for c, b in zip(C, cols[baseline])]
        lit = []
        for c, l in zip(C, cols[m]):
            try:
                lit.append(sf.cel(fits[baseline], c, l))
            except sf.BelowFloor:
                lit.append(None)
        out["cel_baseline_law"][m] = lit
    out["flops"] = list(C)
    return out


def cmd_cel(args) -> int:
    methods = [m for m in args.method.split(",") if m]
    if not methods:
        raise ConfigError("cel needs --method")
    _emit(_cel_table(args.csv, args.baseline, methods, args.x or "flops"))
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.config:
        model = load_config(args.config).model
    else:
        model = sf.full_scale_config(args.depth, vocab=args.vocab)
    counts = sf.param_count(model)
    T = args.tokens if args.tokens else args.tpp * counts["active"]
    _emit({"depth": model.depth, "width": model.width, "vocab": model.vocab, "context": model.context,
           "params": counts, "tokens": T, "flops": sf.chinchilla_flops(model, T),
           "forward_flops_per_token": sf.forward_flops_per_token(model),
           "vocab_assumption": f"V={model.vocab} (tokenizer size is not part of the model description)"})
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    pts = sf.read_sweep_csv(args.csv)
    ks = [args.k] if args.k else list(range(3, len(pts) + 1))
    _emit([vars(sf.sensitivity(pts, k)) for k in ks])
    return EXIT_OK


def cmd_loo(args) -> int:
    x, y = sf.read_xy_csv(args.csv, args.x, args.y)
    _emit({"loo_mean_abs_pct": sf.loo_cv_power(x, y), "n": int(x.size)})
    return EXIT_OK


def cmd_verify(args) -> int:
    names = args.checks.split(",") if args.checks else None
    try:
        reports = theoremlab.run_all(names)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(theoremlab.summary_table(reports))
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in reports], indent=2, default=float))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_plotdata(args) -> int:
    out = Path(args.out or ".")
    written = []
    if args.sweep:
        sdir = Path(args.sweep)
        with open(sdir / "sweep.csv", newline="") as fh:
            pts = list(csv.DictReader(fh))
        fit = json.loads((sdir / "fit.json").read_text()).get("fit")
        rows = []
        for p in pts:
            lr = float(p["lr"])
            pred = "" if fit is None else float(sf.QuadFit(**fit).predict(lr))
            rows.append([lr, p["loss"], p["status"], pred])
        _write_csv(out / "loss_vs_lr.csv", ["lr", "loss", "status", "fit_loss"], rows)
        written.append(str(out / "loss_vs_lr.csv"))
    if args.csv:
        cols = _read_columns(args.csv)
        methods = [m for m in (args.method or "").split(",") if m]
        table = _cel_table(args.csv, args.baseline, methods, args.x or "flops")
        C = table["flops"]
        rows = []
        for m, f in table["fits"].items():
            fit = sf.PowerFit(**f)
            rows += [[c, m, l, float(fit.predict(c))] for c, l in zip(C, cols[m])]
        _write_csv(out / "loss_vs_flops.csv", ["flops", "method", "loss", "fit_loss"], rows)
        rows = [[c, m, v] for m in methods for c, v in zip(C, table["leverage"][m])]
        _write_csv(out / "cel_vs_flops.csv", ["flops", "method", "leverage"], rows)
        written += [str(out / "loss_vs_flops.csv"), str(out / "cel_vs_flops.csv")]
    if not written:
        raise ConfigError("plotdata needs --sweep DIR and/or --csv PATH")
    _emit({"written": written})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spherelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--scheme", choices=[s.value for s in Scheme])

    sp = sub.add_parser("train", help="train one desk-scale model")
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="train over an LR grid and fit the optimum")
    run_flags(sp)
    sp.add_argument("--grid", help="comma-separated learning rates")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    def csv_flags(sp, xy=True):
        sp.add_argument("--csv", required=True)
        if xy:
            sp.add_argument("--x", help="x column (default: first)")
            sp.add_argument("--y", help="y column (default: second)")

    sp = sub.add_parser("fit", help="quadratic LR fit (default) or power law")
    csv_flags(sp)
    sp.add_argument("--power", action="store_true")
    sp.add_argument("--floor", action="store_true", help="fit an irreducible floor C0")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("cel", help="compute efficiency leverage against a baseline column")
    csv_flags(sp, xy=False)
    sp.add_argument("--x", help="FLOPs column (default: flops)")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--method", required=True, help="comma-separated method columns")
    sp.set_defaults(func=cmd_cel)

    sp = sub.add_parser("flops", help="parameter and training-FLOPs accounting")
    sp.add_argument("--config", help="YAML run config (uses its model)")
    sp.add_argument("--depth", type=int, default=8)
    sp.add_argument("--vocab", type=int, default=32000)
    sp.add_argument("--tokens", type=float)
    sp.add_argument("--tpp", type=float, default=50.0, help="tokens per parameter when --tokens is absent")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("sensitivity", help="subset sensitivity of a sweep fit")
    csv_flags(sp, xy=False)
    sp.add_argument("--k", type=int)
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("loo", help="leave-one-out error of a power law")
    csv_flags(sp)
    sp.set_defaults(func=cmd_loo)

    sp = sub.add_parser("verify", help="run the theorem checks")
    sp.add_argument("--checks", help=f"subset of {','.join(theoremlab.CHECKS)}")
    sp.add_argument("--json", help="write CheckReport JSON here")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("plotdata", help="emit plain CSV for loss-vs-lr, loss-vs-FLOPs and CEL-vs-FLOPs")
    sp.add_argument("--sweep", help="sweep output directory")
    sp.add_argument("--csv", help="loss-vs-FLOPs table")
    sp.add_argument("--x", help="FLOPs column (default: flops)")
    sp.add_argument("--baseline", default="muon")
    sp.add_argument("--method", default="")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (sf.FitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
