"""Command-line front end.

Subcommands: moments, evolve, dispersion, flux-asymptote, prob-asymptote,
table1, continuity. Every flag has a `key = value` config-file equivalent
(--config PATH); flags override the file. Outputs are CSV or JSON with
17-significant-digit floats and fixed key order, so identical configurations
produce byte-identical artifacts. Exit codes: 0 success, 1 validation
error, 2 convergence failure; failures are printed to stderr with an E_*
code prefix.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from ._parallel import map_ordered, worker_count
from .asymptotics import (
    asymptote_rows,
    continuity_residual,
    dispersion_times_table,
    write_asymptote_csv,
    write_dispersion_times_csv,
)
from .core import SpacetimePoint, kinematics_from
from .errors import ConvergenceError, ValidationError, WavekitError
from .models import gaussian_cov_model, gaussian_noncov_model, load_envelope_csv
from .observables import dispersion_curve, dump_fields_csv, moments

_MODEL_KINDS = ("gaussian-noncov", "gaussian-cov-exact", "gaussian-cov-factorized", "tabulated-isotropic")

# the five reference cases: 0.5 MeV and 0.1 eV at rest and at 1 GeV total
# energy, plus a one-gram "classical" particle; sigma_x = 1 um at rest
_GRAM_EV = 299792458.0**2 * 1e-3 / 1.602176634e-19
_TABLE_ENTRIES = [
    (0.5e6, 0.5e6),
    (0.5e6, 1e9),
    (0.1, 0.1),
    (0.1, 1e9),
    (_GRAM_EV, _GRAM_EV),
]


def _fmt(value):
    if isinstance(value, float):
        return float(f"{value:.17g}")
    return value


def _json_text(obj, indent=0) -> str:
    """Deterministic JSON: insertion key order, %.17g floats."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  "{k}": {_json_text(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[" + ", ".join(_json_text(v, indent) for v in seq) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if v != v or v in (float("inf"), float("-inf")):
            return "null"  # JSON has no inf/nan
        return f"{v:.17g}"
    if obj is None:
        return "null"
    return '"' + str(obj).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _emit_json(payload: dict, path: str | None) -> None:
    text = _json_text(payload) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _parse_config_file(path: str) -> dict:
    """Line-oriented `key = value`; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("_", "-")] = value
    return out


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


_COMMON_FLAGS = {
    "model": dict(default="gaussian-noncov", choices=_MODEL_KINDS),
    "mass": dict(type=float, default=1.0, help="mass in eV"),
    "momentum": dict(default="0,0,0", help="mean momentum px,py,pz in eV"),
    "sigma-p": dict(type=float, default=0.01, help="momentum width in eV"),
    "table": dict(default=None, help="k_eV,phi CSV for tabulated envelopes"),
    "tol": dict(type=float, default=1e-6, help="target accuracy of derived quantities"),
    "grid": dict(type=int, default=96, help="grid points per axis / profile density"),
    "extent": dict(type=float, default=8.0, help="grid half-extent in units of sigma_x(t)"),
    "threads": dict(type=int, default=None, help="worker threads (default: WAVEKIT_THREADS or cores)"),
    "output": dict(default=None, help="output path ('-' for stdout)"),
    "format": dict(default=None, choices=("csv", "json")),
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    for name, kw in _COMMON_FLAGS.items():
        sub.add_argument(f"--{name}", **kw)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavekit", description="relativistic wave-packet analyses")
    p.add_argument("--version", action="version", version=f"wavekit {__version__}")
    p.add_argument("--config", default=None, help="key = value config file; flags override it")
    subs = p.add_subparsers(dest="command", required=True)

    s = subs.add_parser("moments", help="momentum-space moments as JSON")
    _add_common(s)

    s = subs.add_parser("evolve", help="field dump over box grids")
    _add_common(s)
    s.add_argument("--t", default="0:10000:3", help="time range start:stop:n")

    s = subs.add_parser("dispersion", help="sigma_x^2(t) law, optionally grid-measured")
    _add_common(s)
    s.add_argument("--times", default="0,2500,5000", help="comma-separated times (1/eV)")
    s.add_argument("--measure", action="store_true")

    s = subs.add_parser("flux-asymptote", help="4 pi r^2 |Phi| rows")
    _add_common(s)
    s.add_argument("--radii", required=True, help="comma-separated radii (1/eV)")
    s.add_argument("--method", default="both", choices=("time", "spectral", "both"))
    s.add_argument("--t-max", default="auto")

    s = subs.add_parser("prob-asymptote", help="4 pi r^2 P / <1/|v|> rows")
    _add_common(s)
    s.add_argument("--radii", required=True)
    s.add_argument("--method", default="both", choices=("time", "spectral", "both"))
    s.add_argument("--t-max", default="auto")

    s = subs.add_parser("table1", help="dispersion times for five reference cases")
    _add_common(s)
    s.add_argument("--sigma-x-um", type=float, default=1.0, help="rest-frame size in micrometers")

    s = subs.add_parser("continuity", help="continuity-equation residual statistics")
    _add_common(s)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--seed", type=int, default=20260809)
    s.add_argument("--psi-method", default="auto", choices=("auto", "closed-form", "quadrature"))

    return p


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, argv) -> None:
    if not args.config:
        return
    file_values = _parse_config_file(args.config)
    given = {a.split("=", 1)[0].lstrip("-").replace("_", "-") for a in argv if a.startswith("--")}
    for key, value in file_values.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or key in given:
            continue
        current = getattr(args, dest)
        if isinstance(current, bool):
            setattr(args, dest, value.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(args, dest, int(value))
        elif isinstance(current, float):
            setattr(args, dest, float(value))
        else:
            setattr(args, dest, value)


def _build_model(args: argparse.Namespace):
    kin = kinematics_from(args.mass, _floats(args.momentum), args.sigma_p)
    kind = args.model
    if kind == "gaussian-noncov":
        return gaussian_noncov_model(kin)
    if kind == "gaussian-cov-exact":
        return gaussian_cov_model(kin, "exact")
    if kind == "gaussian-cov-factorized":
        return gaussian_cov_model(kin, "factorized")
    if not args.table:
        raise ValidationError("tabulated-isotropic needs --table pointing at a k_eV,phi CSV")
    return load_envelope_csv(args.table, kin)


def _config_dict(args: argparse.Namespace) -> dict:
    keys = ["model", "mass", "momentum", "sigma_p", "table", "tol", "grid", "extent", "threads"]
    out = {}
    for k in keys:
        if hasattr(args, k):
            out[k.replace("_", "-")] = _fmt(getattr(args, k))
    out["threads"] = args.threads if args.threads else worker_count()
    return out


def _write_csv(writer, path: str) -> None:
    """Run a path-taking CSV writer, with '-' spooled to stdout."""
    if path == "-":
        import os
        import tempfile

        fd, name = tempfile.mkstemp(suffix=".csv")
        os.close(fd)
        try:
            writer(name)
            with open(name, encoding="utf-8") as fh:
                sys.stdout.write(fh.read())
        finally:
            os.unlink(name)
    else:
        writer(path)


def _cmd_moments(args) -> int:
    model = _build_model(args)
    rep = moments(model)
    payload = {"config": _config_dict(args), "results": rep.as_dict(), "errors": []}
    _emit_json(payload, args.output)
    return 0


def _cmd_evolve(args) -> int:
    model = _build_model(args)
    start, stop, n = args.t.split(":")
    times = np.linspace(float(start), float(stop), int(n))
    path = args.output or "fields.csv"
    rows = dump_fields_csv(model, times, path, grid_points=min(args.grid, 48), extent_sigmas=args.extent)
    sys.stderr.write(f"wrote {rows} rows to {path}\n")
    return 0


def _cmd_dispersion(args) -> int:
    model = _build_model(args)
    curve = dispersion_curve(model, _floats(args.times), measure=args.measure,
                             grid_points=args.grid, extent_sigmas=args.extent)
    path = args.output or "dispersion.csv"
    _write_csv(curve.write_csv, path)
    if path != "-":
        sys.stderr.write(f"wrote {len(curve.times)} rows to {path}\n")
    return 0


def _asymptote_cmd(args, which: str) -> int:
    model = _build_model(args)
    methods = {"time": ("time-domain",), "spectral": ("spectral",),
               "both": ("time-domain", "spectral")}[args.method]
    t_max = args.t_max if args.t_max == "auto" else float(args.t_max)
    radii = _floats(args.radii)

    def one(r):
        return asymptote_rows(model, [r], methods, t_max=t_max, rtol=args.tol)

    rows = [row for chunk in map_ordered(one, radii, args.threads) for row in chunk]
    path = args.output or f"{which}.csv"
    if args.format == "json" or path == "-":
        payload = {
            "config": _config_dict(args),
            "results": [
                {"r": row.r, "flux_norm": row.flux_norm, "prob_norm": row.prob_norm,
                 "method": row.method, "t_max": row.t_max, "err": row.err}
                for row in rows
            ],
            "errors": [],
        }
        _emit_json(payload, args.output)
        return 0
    write_asymptote_csv(rows, path)
    sys.stderr.write(f"wrote {len(rows)} rows to {path}\n")
    return 0


def _cmd_table1(args) -> int:
    entries = [(m, e, args.sigma_x_um * 1e-6) for m, e in _TABLE_ENTRIES]
    rows = dispersion_times_table(entries)
    path = args.output or "-"
    _write_csv(lambda p: write_dispersion_times_csv(rows, p), path)
    if path != "-":
        sys.stderr.write(f"wrote {len(rows)} rows to {path}\n")
    return 0


def _cmd_continuity(args) -> int:
    model = _build_model(args)
    rep = moments(model)
    rng = np.random.default_rng(args.seed)
    tau = model.kin.tau
    residuals = []
    for _ in range(args.samples):
        t = float(rng.uniform(0.0, 2.0 * tau))
        sig = np.sqrt((rep.sigma_x2 + rep.sigma_v2 * t * t) / 3.0)
        x = rep.mean_v * t + rng.uniform(-3.0 * sig, 3.0 * sig, size=3)
        residuals.append(continuity_residual(model, SpacetimePoint(t=t, x=x), method=args.psi_method))
    arr = np.asarray(residuals)
    payload = {
        "config": _config_dict(args),
        "results": {
            "samples": int(args.samples),
            "max_residual": float(arr.max()),
            "mean_residual": float(arr.mean()),
            "residuals": [float(v) for v in arr],
        },
        "errors": [],
    }
    _emit_json(payload, args.output)
    return 0


_COMMANDS = {
    "moments": _cmd_moments,
    "evolve": _cmd_evolve,
    "dispersion": _cmd_dispersion,
    "flux-asymptote": lambda a: _asymptote_cmd(a, "flux-asymptote"),
    "prob-asymptote": lambda a: _asymptote_cmd(a, "prob-asymptote"),
    "table1": _cmd_table1,
    "continuity": _cmd_continuity,
}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser, argv)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        sys.stderr.write(f"{exc.code}: {exc}\n")
        return 1
    except ConvergenceError as exc:
        sys.stderr.write(f"{exc.code}: {exc}\n")
        return 2
    except WavekitError as exc:  # pragma: no cover - safety net
        sys.stderr.write(f"{exc.code}: {exc}\n")
        return 1
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"E_VALIDATION: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run())
