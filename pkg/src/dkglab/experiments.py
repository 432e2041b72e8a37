"""Scenario runner: one function per scenario, each writing artifacts and a manifest.

Every run produces ``manifest.json`` in its output directory, including
runs that end in a numerical error.  Metrics depend only on (config, seed),
so reruns reproduce them bit for bit; the wall-clock time is kept outside
the metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
import time
import traceback
from typing import Callable, Optional

import numpy as np

from . import __version__
from .bound_states import BoundStateError, ShootingError, find_bound_state, pairing_identity_check, tail_slope
from .config import ConfigError, ExperimentConfig
from .evolution import BlowUpError, EvolutionConfig, dissipation_defect, evolve, write_trajectory_csv
from .fitting import rate_fit
from .grid import PairState, RadialField, RadialGrid, h1_norm_sq, inner_product
from .modulation import (
    ModulationWindowError,
    coercivity_suite,
    mode_ode_residual,
    trace,
    write_trace_csv,
)
from .persistence import atomic_write_text, write_json, write_modes_csv, write_profile_csv
from .reduced import (
    Coupling,
    EnvelopeError,
    ReducedParams,
    ReducedState,
    TransversalityError,
    UnstableEscape,
    integrate,
    lyapunov_identity_defects,
    theorem3_shoot,
)
from .spectrum import SpectralError, assemble_Lq, classify, coercivity_check
from .threshold import BracketFailure, ThresholdShooter

logger = logging.getLogger(__name__)

__all__ = ["RunManifest", "NUMERICAL_ERRORS", "run", "make_rng", "report_rows", "format_report"]

NUMERICAL_ERRORS = (
    ShootingError,
    BoundStateError,
    SpectralError,
    BlowUpError,
    UnstableEscape,
    TransversalityError,
    BracketFailure,
    ModulationWindowError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream derived from a SeedSequence; the same seed gives the same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass
class RunManifest:
    scenario: str
    config: dict
    seed: int
    status: str = "pass"  # pass | fail | error | invalid
    metrics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0
    error: Optional[str] = None
    code_version: str = __version__

    def check(self, name: str, passed: bool, value=None, bound=None) -> None:
        self.checks[name] = {"passed": bool(passed), "value": value, "bound": bound}

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "status": self.status,
            "code_version": self.code_version,
            "seed": self.seed,
            "rng": "PCG64(SeedSequence(seed))",
            "config": self.config,
            "metrics": self.metrics,
            "checks": self.checks,
            "outputs": self.outputs,
            "wall_clock_seconds": self.wall_clock,
            "error": self.error,
        }

    def write(self, out_dir) -> Path:
        return write_json(Path(out_dir) / "manifest.json", self.to_json())

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(scenario=d["scenario"], config=d["config"], seed=d["seed"], status=d["status"],
                   metrics=d.get("metrics", {}), checks=d.get("checks", {}), outputs=d.get("outputs", []),
                   wall_clock=d.get("wall_clock_seconds", 0.0), error=d.get("error"),
                   code_version=d.get("code_version", ""))


# --- shared pieces --------------------------------------------------------------------------


def _grid(cfg: ExperimentConfig) -> RadialGrid:
    return RadialGrid(cfg.physics.dim, cfg.numerics.r_max, cfg.numerics.m)


def _ground(cfg: ExperimentConfig, nodes: int = 0):
    ph = cfg.physics
    return find_bound_state(ph.p, ph.dim, nodes, _grid(cfg))


def _spectrum(cfg: ExperimentConfig, q, n_eig: int = 12):
    return classify(q, cfg.physics.alpha, kernel_tol=cfg.numerics.tolerances["kernel"], n_eig=n_eig)


def _couplings(raw) -> tuple:
    return tuple(Coupling(c["target"], float(c["coefficient"]), dict(c["powers"])) for c in raw)


# --- scenarios ------------------------------------------------------------------------------


def _bound_state(cfg, man, out, rng):
    o = cfg.options()
    q = _ground(cfg, o["nodes"])
    man.metrics.update({
        "origin_value": q.origin_value,
        "grid_origin_value": q.grid_origin_value,
        "residual_norm": q.residual_norm,
        "static_action": q.action,
        "nodes": q.nodes,
        "pairing_defect": pairing_identity_check(q),
        "tail_slope": tail_slope(q),
        "newton_iterations": q.newton_iterations,
    })
    man.outputs.append(str(write_profile_csv(out / "profile.csv", q.profile)))
    top = float(np.max(np.abs(q.profile.values)))
    man.check("residual", q.residual_norm <= 1e-8 * (1 + top), q.residual_norm, 1e-8 * (1 + top))
    man.check("pairing_identity", man.metrics["pairing_defect"] <= 1e-6, man.metrics["pairing_defect"], 1e-6)
    man.check("tail_slope", -1.3 <= man.metrics["tail_slope"] <= -0.7, man.metrics["tail_slope"], [-1.3, -0.7])


def _spectrum_scenario(cfg, man, out, rng):
    o = cfg.options()
    q = _ground(cfg, o["nodes"])
    sp = _spectrum(cfg, q, o["n_eig"])
    L = assemble_Lq(q)
    g = q.grid
    residuals = [float(np.sqrt(np.sum((L.apply(Y.values) + lam * Y.values) ** 2)))
                 for lam, Y in sp.negative]
    gram = np.array([[inner_product(a, b) for b in sp.modes] for a in sp.modes])
    ortho = float(np.max(np.abs(gram - np.eye(sp.K)))) if sp.K else 0.0
    pairing = g.dot(L.apply(q.profile.values), q.profile.values)
    pred = (1.0 - q.p) * float(np.dot(g.quad_weights, np.abs(q.profile.values) ** (q.p + 1)))
    man.metrics.update(sp.to_json())
    man.metrics.update({
        "K": sp.K,
        "coercivity_min": coercivity_check(q, sp),
        "orthonormality_defect": ortho,
        "eigen_residuals": residuals,
        "pairing_relative_defect": abs(pairing - pred) / abs(pred),
        "slowest_stable_rate": sp.slowest_stable_rate(),
    })
    if sp.K:
        ident = max(float(np.max(np.abs(sp.nu_plus * sp.zeta_plus - sp.lambda_sq))),
                    float(np.max(np.abs(sp.nu_minus * sp.zeta_minus - sp.lambda_sq))),
                    float(np.max(np.abs(sp.nu_plus - (sp.zeta_plus - 2 * sp.alpha)))),
                    float(np.max(np.abs(sp.nu_minus - (sp.zeta_minus - 2 * sp.alpha)))))
    else:
        ident = 0.0
    man.metrics["mode_identity_defect"] = ident
    man.outputs.append(str(write_json(out / "spectrum.json", sp.to_json())))
    man.outputs.append(str(write_modes_csv(out / "modes.csv", sp.modes)))
    man.check("negative_count", sp.K >= 1, sp.K, ">= 1")
    if o["nodes"] == 0:
        man.check("ground_state_K", sp.K == 1, sp.K, 1)
        man.check("empty_kernel", len(sp.kernel) == 0, len(sp.kernel), 0)
    man.check("orthonormality", ortho <= 1e-8, ortho, 1e-8)
    man.check("eigen_residual", max(residuals, default=0.0) <= 1e-6, max(residuals, default=0.0), 1e-6)
    man.check("pairing_identity", man.metrics["pairing_relative_defect"] <= 1e-6,
              man.metrics["pairing_relative_defect"], 1e-6)
    man.check("mode_identities", ident <= 1e-12, ident, 1e-12)
    man.check("coercivity_positive", man.metrics["coercivity_min"] > 0, man.metrics["coercivity_min"], "> 0")


def _evolve(cfg, man, out, rng):
    o = cfg.options()
    ph, nu = cfg.physics, cfg.numerics
    q = _ground(cfg)
    g = q.grid
    ecfg = EvolutionConfig(ph.alpha, ph.p, nu.dt, nu.t_end, sample_every=nu.sample_every)
    background = q.profile
    mode = None
    if o["init"] == "stationary":
        s0 = PairState(q.profile, g.zeros())
    elif o["init"] in ("stable-mode", "unstable-mode"):
        sp = _spectrum(cfg, q)
        Y = sp.modes[0]
        mode = "minus" if o["init"] == "stable-mode" else "plus"
        rate = float(sp.nu_minus[0] if mode == "minus" else sp.nu_plus[0])
        eps = o["amplitude"]
        s0 = PairState(q.profile + eps * Y, eps * rate * Y)
    else:
        r = g.r
        s0 = PairState(o["scale"] * q.profile,
                       RadialField(g, o["kick"] * np.exp(-((r - o["kick_center"]) ** 2))))
        background = None
    try:
        tr = evolve(s0, ecfg, background=background)
    except BlowUpError as exc:
        man.metrics["blowup_time"] = exc.time
        if exc.trajectory is not None and len(exc.trajectory) >= 2:
            man.metrics["dissipation_defect"] = dissipation_defect(exc.trajectory)
        man.check("no_blowup", False, exc.time, None)
        return
    man.metrics["blowup_time"] = None
    man.metrics["reflections"] = tr.reflections
    man.metrics["energy_initial"] = float(tr.energies[0])
    man.metrics["energy_final"] = float(tr.energies[-1])
    man.metrics["h1_error_max"] = float(np.max(tr.h1_errors(q.profile)))
    man.outputs.append(str(write_trajectory_csv(out / "trajectory.csv", tr, q.profile)))
    if len(tr) >= 2:
        d = dissipation_defect(tr)
        man.metrics["dissipation_defect"] = d
        man.check("dissipation_identity", d <= o["defect_tol"], d, o["defect_tol"])
    if mode is not None:
        zeta = sp.zeta_minus[0] if mode == "minus" else sp.zeta_plus[0]
        amp = np.array([zeta * g.dot(s.position.values - q.profile.values, Y.values)
                        + g.dot(s.velocity.values, Y.values) for s in tr.states])
        fit = rate_fit(tr.times, np.abs(amp), "exponential")
        err = abs(fit.rate - rate) / abs(rate)
        man.metrics.update({"fit": fit.to_json(), "fitted_rate": fit.rate, "predicted_rate": rate,
                            "rate_error": err})
        man.check("mode_rate", err <= o["rate_tol"], err, o["rate_tol"])


def _threshold(cfg, man, out, rng):
    o = cfg.options()
    ph, nu = cfg.physics, cfg.numerics
    q = _ground(cfg)
    sp = _spectrum(cfg, q)
    sh = ThresholdShooter(q, sp, ph.alpha, dt=nu.dt, sample_every=nu.sample_every,
                          eta_amplitude=o["eta_amplitude"], eta_width=o["eta_width"],
                          exit_distance=o["exit_distance"], min_exit_time=o["min_exit_time"], t_end=o["t_end"])
    res = sh.search(o["bracket"], o["width"], o["fit_start"], o["depth_offsets"])
    man.metrics.update(res.to_json())
    path = out / "trapped_distance.csv"
    rows = "\n".join(f"{t:.17g},{d:.17g}" for t, d in zip(res.trapped.times, res.trapped.distance))
    atomic_write_text(path, "t,distance\n" + rows + "\n")
    man.outputs.append(str(path))
    man.check("decay_rate", res.rate_error <= o["rate_tol"], res.rate_error, o["rate_tol"])
    deps = res.departure_times
    man.check("departure_grows_with_depth", bool(np.all(np.diff(deps) > 0)) and res.depth_slope_error <= o["depth_tol"],
              res.depth_slope_error, o["depth_tol"])
    man.check("endpoint_flags", res.endpoint_flags.get("lower") == "decay-to-zero"
              and res.endpoint_flags.get("upper") == "blow-up", res.endpoint_flags, "decay-to-zero / blow-up")
    man.check("trapped_window", res.trapped_window >= o["trapped_target"], res.trapped_window, o["trapped_target"])


def _modulation_trace(cfg, man, out, rng):
    o = cfg.options()
    ph, nu = cfg.physics, cfg.numerics
    q = _ground(cfg)
    sp = _spectrum(cfg, q)
    g = q.grid
    Y = sp.modes[0].values if sp.K else np.zeros(g.m)
    eta = np.exp(-((g.r / o["bump_width"]) ** 2))
    eta -= g.dot(eta, Y) * Y
    eta *= o["amplitude"] / math.sqrt(h1_norm_sq(RadialField(g, eta)))
    s0 = PairState(q.profile + RadialField(g, eta), g.zeros())
    window = o["window"]

    def inside(t, s):
        d = s.position - q.profile
        return math.sqrt(h1_norm_sq(d) + inner_product(s.velocity, s.velocity)) >= 0.9 * window

    ecfg = EvolutionConfig(ph.alpha, ph.p, nu.dt, nu.t_end, sample_every=nu.sample_every)
    tr = evolve(s0, ecfg, [inside], background=q.profile)
    if tr.stopped_early:  # the last snapshot sits at the window edge; keep only interior ones
        tr.times, tr.states = tr.times[:-1], tr.states[:-1]
        tr.dissipation_ledger = tr.dissipation_ledger[:-1]
    mt = trace(tr, q, sp, window=window)
    man.outputs.append(str(write_trace_csv(out / "modulation.csv", mt.rows(), sp.K)))
    lower = np.array([c.f_func + c.a_unstable / c.mu for c in mt.coords])
    upper_gap = np.array([c.e_func - (h1_norm_sq(c.remainder.position)
                                      + inner_product(c.remainder.velocity, c.remainder.velocity)) / c.mu
                          for c in mt.coords])
    man.metrics.update({
        "snapshots": len(mt.times),
        "t_last": float(mt.times[-1]),
        "left_window": tr.stopped_early,
        "min_F_plus_A": float(np.min(lower)),
        "max_energy_upper_gap": float(np.max(upper_gap)),
    })
    man.check("F_plus_A_nonnegative", man.metrics["min_F_plus_A"] >= 0, man.metrics["min_F_plus_A"], ">= 0")
    man.check("energy_upper_bound", man.metrics["max_energy_upper_gap"] <= 0, man.metrics["max_energy_upper_gap"], "<= 0")
    if len(tr) >= 3:
        res = mode_ode_residual(tr, q, sp, window=window)
        man.metrics["mode_residual_C"] = res.C
    if o["coercivity_samples"] > 0:
        rep = coercivity_suite(q, sp, rng, n_samples=o["coercivity_samples"], amplitude=o["coercivity_amplitude"])
        man.metrics["coercivity"] = rep.to_json()
        man.check("coercivity_sandwich", rep.passed, rep.tight_constant, rep.C0)
        man.check("coercivity_energy_upper_bound", rep.upper_bound_ok, None, None)


def _reduced_ode(cfg, man, out, rng):
    o = cfg.options()
    params = ReducedParams(cfg.physics.alpha, tuple(o["nu_plus"]), tuple(o["nu_minus"]),
                           couplings=_couplings(o["couplings"]), p_bar=min(3.0, cfg.physics.p))
    s0 = ReducedState(o["a0"], o["b0"], a_minus=np.array(o["a_minus0"], dtype=float),
                      a_plus=np.array(o["a_plus0"], dtype=float))
    t_end = float(o["t_end"])
    t_eval = np.unique(np.concatenate([np.linspace(0, min(100.0, t_end), 1001),
                                       np.geomspace(min(100.0, t_end), t_end, 2001)]))
    tr = integrate(s0, params, t_end, tol=o["tol"], t_eval=t_eval, raise_on_escape=False, dense=True)
    man.outputs.append(str(write_trace_csv(out / "reduced.csv", tr.rows(), params.K)))
    man.metrics.update({"escaped": tr.escaped, "escape_time": tr.escape_time,
                        "escape_sign": tr.escape_sign if tr.escaped else None,
                        "escape_variable": tr.escape_variable})
    if not params.couplings and len(tr.t) >= 2:
        dfx = lyapunov_identity_defects(tr)
        man.metrics["r1_identity_defect"] = dfx["r1"]
        man.metrics["r2_identity_defect"] = dfx["r2"]
        man.check("lyapunov_identities", max(dfx.values()) <= 10 * o["tol"], max(dfx.values()), 10 * o["tol"])
    if tr.escaped:
        man.check("no_escape", False, tr.escape_time, None)
        return
    if o["a0"] > 0 and o["asymptotic_check"]:
        dev = float(np.max(np.abs((tr.t + 1.0 / o["a0"]) * tr.a - 1.0)))
        man.metrics["asymptotic_defect"] = dev
        man.check("t_times_a", dev <= o["asymptotic_tol"], dev, o["asymptotic_tol"])
        lo, hi = o["fit_window"]
        sel = (tr.t >= lo) & (tr.t <= hi)
        if np.count_nonzero(sel) >= 10 and np.all(tr.a[sel] > 0):
            fit = rate_fit(tr.t[sel], tr.a[sel], "algebraic")
            man.metrics.update({"fit": fit.to_json(), "fitted_rate": fit.rate, "predicted_rate": -1.0})
            man.check("algebraic_rate", abs(fit.rate + 1.0) <= o["rate_tol"], fit.rate, [-1 - o["rate_tol"], -1 + o["rate_tol"]])


def _theorem3(cfg, man, out, rng):
    o = cfg.options()
    params = ReducedParams(cfg.physics.alpha, tuple(o["nu_plus"]), tuple(o["nu_minus"]),
                           couplings=_couplings(o["couplings"]), p_bar=min(3.0, cfg.physics.p))
    delta = o["delta"]
    t_max = o["t_max"] or 1e3 / delta
    res = theorem3_shoot(delta, params, t_max=t_max, tol=o["tol"])
    man.metrics.update(res.to_json())
    tr = res.trajectory
    ta = float(tr.t[-1] * tr.a[-1])
    man.metrics["t_times_a_final"] = ta
    man.metrics["predicted_rate"] = -1.0
    man.outputs.append(str(write_json(out / "shoot.json", res.to_json())))
    man.outputs.append(str(write_trace_csv(out / "survivor.csv", tr.rows(), params.K)))
    radius = delta**1.5
    amp = float(np.max(np.abs(res.a_plus_initial)))
    man.check("survival", res.survived, res.survival_time, t_max)
    man.check("ball_radius", amp <= radius, amp, radius)
    worst = min(res.bootstrap_margins.values())
    man.check("bootstrap_margins", worst >= o["margin"], worst, o["margin"])
    man.check("t_times_a", abs(ta - 1.0) <= o["asymptotic_tol"], ta, [1 - o["asymptotic_tol"], 1 + o["asymptotic_tol"]])
    if res.fitted_rate is not None:
        man.check("algebraic_rate", abs(res.fitted_rate + 1.0) <= o["rate_tol"], res.fitted_rate,
                  [-1 - o["rate_tol"], -1 + o["rate_tol"]])


# --- report ---------------------------------------------------------------------------------

_THEORY = {
    "evolve": "linear mode exponent",
    "threshold": "exponential decay on the stable set",
    "reduced-ode": "algebraic 1/t decay",
    "theorem3-shoot": "algebraic 1/t decay of the survivor",
}


def report_rows(manifests) -> list[dict]:
    """One row per (run, check) plus one per fitted-vs-predicted rate; empty values are skipped."""
    rows = []
    for i, m in enumerate(manifests):
        run = f"{i}:{m.scenario}"
        fr, pr = m.metrics.get("fitted_rate"), m.metrics.get("predicted_rate")
        if fr is not None and pr is not None:
            rows.append({"run": run, "item": f"rate ({_THEORY.get(m.scenario, 'rate')})", "value": fr,
                         "reference": pr, "status": None})
        for name, c in sorted(m.checks.items()):
            if c.get("value") is None and c.get("passed") is None:
                continue
            rows.append({"run": run, "item": name, "value": c.get("value"), "reference": c.get("bound"),
                         "status": "pass" if c.get("passed") else "fail"})
        if m.error:
            rows.append({"run": run, "item": "error", "value": m.error, "reference": None, "status": "fail"})
    return rows


def format_report(rows) -> str:
    def show(x):
        if x is None:
            return ""
        if isinstance(x, float):
            return f"{x:.6g}"
        return str(x)

    header = ("run", "item", "value", "reference", "status")
    table = [header] + [tuple(show(r[k]) for k in header) for r in rows]
    widths = [max(len(row[j]) for row in table) for j in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _report(cfg, man, out, rng):
    paths, missing = [], []
    for entry in cfg.options()["manifests"]:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.rglob("manifest.json")))
        elif p.is_file():
            paths.append(p)
        else:
            missing.append(f"[report] manifest path does not exist: {p}")
    if missing:
        raise ConfigError(missing)
    own = out.resolve()
    paths = [p for p in paths if p.resolve().parent != own]
    if not paths:
        raise ConfigError(["[report] manifests must list at least one manifest file or directory"])
    manifests = [RunManifest.load(p) for p in paths]
    rows = report_rows(manifests)
    man.outputs.append(str(write_json(out / "report.json", {"sources": [str(p) for p in paths], "rows": rows})))
    man.outputs.append(str(atomic_write_text(out / "report.txt", format_report(rows))))
    failed = [r for r in rows if r["status"] == "fail"]
    man.metrics.update({"runs": len(manifests), "rows": len(rows), "failed_rows": len(failed)})
    man.check("all_rows_pass", not failed, len(failed), 0)


_DISPATCH: dict[str, Callable] = {
    "bound-state": _bound_state,
    "spectrum": _spectrum_scenario,
    "evolve": _evolve,
    "threshold": _threshold,
    "modulation-trace": _modulation_trace,
    "reduced-ode": _reduced_ode,
    "theorem3-shoot": _theorem3,
    "report": _report,
}


def run(cfg: ExperimentConfig, out_dir=None) -> RunManifest:
    """Validate, dispatch, write artifacts and the manifest.

    Validation errors raise ConfigError (after writing an 'invalid'
    manifest).  Numerical errors are recorded in the manifest with status
    'error' and do not propagate.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.scenario, cfg.to_dict(), cfg.seed)
    t0 = time.perf_counter()
    try:
        cfg.validate()
    except ConfigError as exc:
        man.status, man.error = "invalid", str(exc)
        man.write(out)
        raise
    rng = make_rng(cfg.seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            _DISPATCH[cfg.scenario](cfg, man, out, rng)
        man.status = "pass" if all(c["passed"] for c in man.checks.values()) else "fail"
    except (ConfigError, EnvelopeError) as exc:
        man.status, man.error = "invalid", str(exc)
        man.wall_clock = time.perf_counter() - t0
        man.write(out)
        raise ConfigError(getattr(exc, "errors", [str(exc)])) from exc
    except NUMERICAL_ERRORS as exc:
        logger.error("numerical failure: %s\n%s", exc, traceback.format_exc(limit=3))
        man.status = "error"
        man.error = f"{type(exc).__name__}: {exc}"
    man.wall_clock = time.perf_counter() - t0
    man.outputs.append(str(out / "manifest.json"))
    man.write(out)
    return man
