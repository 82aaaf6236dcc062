"""Convergence sweeps over epsilon: configuration, orchestration and output."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .corrector import ErrorReport, error_report
from .errors import ConfigError, StageError, ThinHomogError
from .homog import CoefficientTable, SourceSpec, build_table, hat_f_limit, solve_homog
from .profile import ProfileSpec, as_expr

EXACT = 1e-8  # error columns at or below this are reported as exact

ERROR_COLUMNS = ("e_l2_plain", "e_h1_plain", "e_h1_corr")
CSV_HEADER = ["eps", "h", "e_l2_plain", "e_h1_plain", "e_h1_corr", "norm_X", "rate_l2", "rate_h1corr"]


def _number(text):
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _int(text):
    v = _number(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _eps_list(text):
    return tuple(_number(t) for t in text.split(",") if t.strip())


def _levels(text):
    return tuple(_int(t) for t in text.split(",") if t.strip())


# key -> (attribute, parser)
_KEYS = {
    "profile.b": ("b", str.strip),
    "profile.G": ("G", str.strip),
    "profile.L": ("L", _number),
    "source.f0": ("f0", str.strip),
    "study.eps": ("eps_list", _eps_list),
    "study.eps0": ("eps0", _number),
    "study.x_samples": ("x_samples", _int),
    "study.homog_n": ("homog_n", _int),
    "study.workers": ("workers", _int),
    "study.gate": ("gate", _bool),
    "mesh.factor": ("mesh_factor", _number),
    "mesh.cells_per_period": ("cells_per_period", _int),
    "mesh.nz": ("nz", _int),
    "solver.tol_cell": ("tol_cell", _number),
    "solver.tol_thin": ("tol_thin", _number),
    "output.dir": ("out_dir", str.strip),
    "pullback.G": ("pullback_G", str.strip),
    "pullback.Ghat": ("pullback_Ghat", str.strip),
    "pullback.levels": ("pullback_levels", _levels),
}


@dataclass(frozen=True)
class StudyConfig:
    b: str = "0"
    G: str = "2+sin(2*pi*y)"
    L: float = 1.0
    f0: str = "cos(pi*x)"
    eps_list: tuple = (1 / 8, 1 / 16, 1 / 32, 1 / 64)
    eps0: float = 0.5
    x_samples: int = 17
    homog_n: int = 64
    workers: int | None = None
    gate: bool = True
    mesh_factor: float = 1.0
    cells_per_period: int = 16
    nz: int = 8
    tol_cell: float = 1e-10
    tol_thin: float = 1e-8
    out_dir: str = "."
    pullback_G: str = "1"
    pullback_Ghat: str = "1+0.2*sin(2*pi*y)"
    pullback_levels: tuple = (32, 64, 128)

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        if any(not e > 0 for e in eps):
            raise ConfigError(f"eps values must be positive: {eps}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"study.eps must be strictly decreasing: {eps}")
        if eps and eps[0] > self.eps0:
            raise ConfigError(f"eps {eps[0]} exceeds the ceiling study.eps0 = {self.eps0}")
        if not self.mesh_factor > 0:
            raise ConfigError(f"mesh.factor must be positive, got {self.mesh_factor}")
        if self.x_samples < 2:
            raise ConfigError("study.x_samples must be >= 2")
        if self.tol_cell <= 0 or self.tol_thin <= 0:
            raise ConfigError("solver tolerances must be positive")

    @property
    def thin_columns(self) -> int:
        """Columns per oscillation period after the mesh factor."""
        return max(8, int(round(self.cells_per_period * self.mesh_factor)))

    @property
    def thin_layers(self) -> int:
        return max(2, int(round(self.nz * self.mesh_factor)))

    def profile(self) -> ProfileSpec:
        return ProfileSpec(as_expr(self.b), as_expr(self.G), self.L)

    def source(self) -> SourceSpec:
        return SourceSpec.from_text(self.f0)


def parse_config(text: str, origin: str = "<config>") -> StudyConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        attr, conv = _KEYS[key]
        try:
            values[attr] = conv(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return StudyConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def load_config(path) -> StudyConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple
    rates: dict
    table: CoefficientTable | None = field(default=None, repr=False)
    f_norms: tuple = ()
    gate: dict | None = None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def ratios(self, name):
        c = self.column(name)
        return c[1:] / c[:-1]

    @property
    def f_bound_ratio(self):
        """``max / min`` of the rescaled source norms over the sweep."""
        f = np.asarray(self.f_norms, dtype=float)
        return float(f.max() / f.min()) if len(f) and f.min() > 0 else float("nan")


def fit_rate(eps, err):
    """Least-squares slope of ``log err`` against ``log eps``; NaN when exact."""
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(err, dtype=float)
    if len(eps) < 2 or np.any(err <= EXACT):
        return float("nan")
    return float(np.polyfit(np.log(eps), np.log(err), 1)[0])


def _stage(name, epsilon, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (ThinHomogError, ArithmeticError, ValueError, MemoryError) as exc:
        raise StageError(name, epsilon, exc) from exc


def _prepare(config: StudyConfig):
    profile = _stage("profile", None, lambda: config.profile().with_bounds())
    source = _stage("source", None, config.source)
    table = _stage(
        "table", None, build_table, profile, config.x_samples, config.thin_columns, config.thin_layers,
        config.tol_cell, config.workers,
    )
    w0 = _stage("homog", None, lambda: solve_homog(table, hat_f_limit(source, table), config.homog_n))
    return profile, source, table, w0


def run_study(config: StudyConfig) -> ConvergenceTable:
    """profile -> coefficient table -> w0 -> one error report per epsilon (concurrently)."""
    profile, source, table, w0 = _prepare(config)

    def one(eps):
        return _stage(
            "report", eps, error_report, profile, source, table, w0, eps, config.thin_columns,
            config.thin_layers, config.tol_thin, config.eps0,
        )

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        rows = tuple(pool.map(one, config.eps_list))
    eps = [r.epsilon for r in rows]
    rates = {name: fit_rate(eps, [getattr(r, name) for r in rows]) for name in ERROR_COLUMNS}
    gate = mesh_factor_gate(config, rows[0]) if config.gate and rows else None
    return ConvergenceTable(rows, rates, table, tuple(r.f_norm for r in rows), gate)


def mesh_factor_gate(config: StudyConfig, coarse: ErrorReport | None = None, limit: float = 0.1):
    """Relative change of ``e_h1_corr`` at the largest epsilon when the mesh factor doubles."""
    eps = config.eps_list[0]
    if coarse is None:
        profile, source, table, w0 = _prepare(config)
        coarse = _stage("gate", eps, error_report, profile, source, table, w0, eps, config.thin_columns,
                        config.thin_layers, config.tol_thin, config.eps0)
    fine_cfg = replace(config, mesh_factor=2 * config.mesh_factor, eps_list=(eps,), gate=False)
    profile, source, table, w0 = _prepare(fine_cfg)
    fine = _stage("gate", eps, error_report, profile, source, table, w0, eps, fine_cfg.thin_columns,
                  fine_cfg.thin_layers, fine_cfg.tol_thin, fine_cfg.eps0)
    a, b = coarse.e_h1_corr, fine.e_h1_corr
    if max(a, b) <= EXACT:
        change = 0.0
    else:
        change = abs(b - a) / max(a, b)
    return {"eps": eps, "coarse": a, "fine": b, "change": change, "passed": change < limit}


def _fmt(v):
    return "exact" if isinstance(v, float) and math.isnan(v) else f"{v:.10e}"


def emit_csv(table: ConvergenceTable, path):
    """One line per epsilon; the fitted rates are repeated on every line."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in table.rows:
                w.writerow([
                    f"{r.epsilon:.10e}", f"{r.h:.10e}", f"{r.e_l2_plain:.10e}", f"{r.e_h1_plain:.10e}",
                    f"{r.e_h1_corr:.10e}", f"{r.norm_X:.10e}",
                    _fmt(table.rates["e_l2_plain"]), _fmt(table.rates["e_h1_corr"]),
                ])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


_COLORS = {"e_l2_plain": "#1f77b4", "e_h1_plain": "#d62728", "e_h1_corr": "#2ca02c"}


def emit_svg(table: ConvergenceTable, path, width: int = 640, height: int = 420):
    """Log-log chart of the three error columns against epsilon."""
    left, right, top, bottom = 70, 160, 20, 50
    pw, ph = width - left - right, height - top - bottom
    eps = table.column("epsilon") if table.rows else np.array([])
    series = {k: table.column(k) if table.rows else np.array([]) for k in ERROR_COLUMNS}
    vals = np.concatenate([v[v > 0] for v in series.values()]) if table.rows else np.array([])
    if len(eps) and len(vals):
        x0, x1 = np.floor(np.log10(eps.min())), np.ceil(np.log10(eps.max()))
        y0, y1 = np.floor(np.log10(vals.min())), np.ceil(np.log10(vals.max()))
    else:
        x0, x1, y0, y1 = -2.0, 0.0, -3.0, 0.0
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)

    def sx(v):
        return left + (np.log10(v) - x0) / (x1 - x0) * pw

    def sy(v):
        return top + ph - (np.log10(v) - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for d in range(int(x0), int(x1) + 1):
        x = sx(10.0**d)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">1e{d}</text>')
    for d in range(int(y0), int(y1) + 1):
        y = sy(10.0**d)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">1e{d}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape("eps")}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" '
               f'text-anchor="middle">rescaled error</text>')
    for i, (name, v) in enumerate(series.items()):
        ok = v > 0
        if table.rows:
            pts = " ".join(f"{sx(e):.2f},{sy(y):.2f}" for e, y in zip(eps[ok], v[ok]))
            out.append(f'<polyline fill="none" stroke="{_COLORS[name]}" stroke-width="1.5" points="{pts}">'
                       f'<title>{escape(name)}</title></polyline>')
        ly = top + 14 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{_COLORS[name]}" stroke-width="1.5"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def coefficient_smoothness(table: CoefficientTable):
    """``(max |second difference|, max |first difference|)`` of ``r`` over the samples."""
    r = np.asarray(table.r, dtype=float)
    return float(np.max(np.abs(np.diff(r, 2)), initial=0.0)), float(np.max(np.abs(np.diff(r)), initial=0.0))
