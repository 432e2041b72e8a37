"""Experiment configuration: a TOML document with physics, numerics and one block per scenario."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
import math
from pathlib import Path
import sys
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .grid import critical_exponent

__all__ = ["SCENARIOS", "DEFAULTS", "ConfigError", "Physics", "Numerics", "ExperimentConfig"]

SCENARIOS = (
    "bound-state",
    "spectrum",
    "evolve",
    "threshold",
    "modulation-trace",
    "reduced-ode",
    "theorem3-shoot",
    "report",
)

PDE_SCENARIOS = ("bound-state", "spectrum", "evolve", "threshold", "modulation-trace")

# Scenario blocks and their defaults.  Keys outside these tables are rejected.
DEFAULTS: dict[str, dict[str, Any]] = {
    "bound-state": {"nodes": 0},
    "spectrum": {"nodes": 0, "n_eig": 12},
    "evolve": {
        "init": "stable-mode",  # stationary | stable-mode | unstable-mode | scaled-kick
        "amplitude": 1e-6,
        "scale": 0.97,
        "kick": 0.05,
        "kick_center": 2.0,
        "defect_tol": 1e-6,
        "rate_tol": 0.01,
    },
    "threshold": {
        "bracket": [-0.05, 0.05],
        "width": 1e-10,
        "eta_amplitude": 0.02,
        "eta_width": 0.5,
        "exit_distance": 0.3,
        "min_exit_time": 0.5,
        "t_end": 30.0,
        "fit_start": 1.0,
        "depth_offsets": [1e-4, 1e-6, 1e-8],
        "rate_tol": 0.1,
        "depth_tol": 0.15,
        "trapped_target": 15.0,
    },
    "modulation-trace": {
        "amplitude": 1e-3,
        "bump_width": 0.5,
        "window": 0.5,
        "coercivity_samples": 1000,
        "coercivity_amplitude": 1e-2,
    },
    "reduced-ode": {
        "a0": 0.1,
        "b0": 0.0,
        "nu_plus": [1.0],
        "nu_minus": [-3.0],
        "a_plus0": [0.0],
        "a_minus0": [0.0],
        "t_end": 1e4,
        "tol": 1e-12,
        "couplings": [],
        "fit_window": [1e2, 1e4],
        "asymptotic_check": True,  # compare a(t) with 1/(t + 1/a0); meaningful for b0 = 0
        "asymptotic_tol": 0.05,
        "rate_tol": 0.05,
    },
    "theorem3-shoot": {
        "delta": 0.1,
        "nu_plus": [1.0],
        "nu_minus": [-3.0],
        "couplings": [{"target": "a_plus[0]", "coefficient": 0.1, "powers": {"a": 2}}],
        "t_max": 0.0,  # 0 selects 1e3/delta
        "tol": 1e-12,
        "margin": 0.1,
        "asymptotic_tol": 0.05,
        "rate_tol": 0.05,
    },
    "report": {"manifests": []},
}


class ConfigError(ValueError):
    """Carries every violated bound, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.errors))


@dataclass
class Physics:
    dim: int = 3
    p: float = 3.0
    alpha: float = 0.5


@dataclass
class Numerics:
    m: int = 4096
    r_max: float = 40.0
    dt: float = 1e-3
    t_end: float = 10.0
    sample_every: int = 10
    tolerances: dict = field(default_factory=lambda: {"kernel": 1e-4, "ode": 1e-10})


@dataclass
class ExperimentConfig:
    scenario: str
    physics: Physics = field(default_factory=Physics)
    numerics: Numerics = field(default_factory=Numerics)
    blocks: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0

    # --- access --------------------------------------------------------------------------

    def options(self, scenario: Optional[str] = None) -> dict:
        """Scenario block merged over its defaults."""
        name = scenario or self.scenario
        out = copy.deepcopy(DEFAULTS.get(name, {}))
        out.update(copy.deepcopy(self.blocks.get(name, {})))
        return out

    # --- validation ----------------------------------------------------------------------

    def errors(self) -> list[str]:
        errs = []
        if self.scenario not in SCENARIOS:
            errs.append(f"scenario must be one of {', '.join(SCENARIOS)}; got {self.scenario!r}")
        ph, nu = self.physics, self.numerics
        if not isinstance(ph.dim, int) or not 2 <= ph.dim <= 5:
            errs.append(f"physics.dim must satisfy 2 <= dim <= 5, got {ph.dim}")
            pstar = math.inf
        else:
            pstar = critical_exponent(ph.dim)
        if not (2 < ph.p < pstar):
            bound = "inf" if math.isinf(pstar) else f"{pstar:g}"
            errs.append(f"physics.p must satisfy 2 < p < p*(N) = {bound}, got {ph.p}")
        if not ph.alpha > 0:
            errs.append(f"physics.alpha must satisfy alpha > 0, got {ph.alpha}")
        if not isinstance(nu.m, int) or nu.m < 16:
            errs.append(f"numerics.m must be an integer >= 16, got {nu.m}")
        if not nu.r_max > 0:
            errs.append(f"numerics.r_max must be > 0, got {nu.r_max}")
        if not nu.dt > 0:
            errs.append(f"numerics.dt must be > 0, got {nu.dt}")
        elif self.scenario in PDE_SCENARIOS and isinstance(nu.m, int) and nu.m >= 16 and nu.r_max > 0:
            dr = nu.r_max / (nu.m + 1)
            if nu.dt > 0.5 * dr:
                errs.append(f"numerics.dt must satisfy dt <= 0.5*dr = {0.5 * dr:.4g} (CFL), got {nu.dt}")
        if not nu.t_end >= 0:
            errs.append(f"numerics.t_end must be >= 0, got {nu.t_end}")
        if not isinstance(nu.sample_every, int) or nu.sample_every < 1:
            errs.append(f"numerics.sample_every must be an integer >= 1, got {nu.sample_every}")
        for k, v in nu.tolerances.items():
            if k not in ("kernel", "ode"):
                errs.append(f"numerics.tolerances: unknown key {k!r}")
            elif not (isinstance(v, (int, float)) and v > 0):
                errs.append(f"numerics.tolerances.{k} must be > 0, got {v}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append(f"seed must be a non-negative integer, got {self.seed}")
        for name, block in self.blocks.items():
            if name not in DEFAULTS:
                errs.append(f"unknown scenario block [{name}]")
                continue
            for key in block:
                if key not in DEFAULTS[name]:
                    errs.append(f"[{name}] unknown key {key!r}")
        if self.scenario in DEFAULTS:
            errs.extend(_check_options(self.scenario, self.options(), ph))
        return errs

    def validate(self) -> "ExperimentConfig":
        errs = self.errors()
        if errs:
            raise ConfigError(errs)
        return self

    # --- serialization -------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "physics": {"dim": self.physics.dim, "p": self.physics.p, "alpha": self.physics.alpha},
            "numerics": {
                "m": self.numerics.m,
                "r_max": self.numerics.r_max,
                "dt": self.numerics.dt,
                "t_end": self.numerics.t_end,
                "sample_every": self.numerics.sample_every,
                "tolerances": dict(self.numerics.tolerances),
            },
            **{name: copy.deepcopy(b) for name, b in self.blocks.items()},
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        errs = []
        known = {"scenario", "output_dir", "seed", "physics", "numerics"} | set(DEFAULTS)
        for k in data:
            if k not in known:
                errs.append(f"unknown top-level key {k!r}")
        phys = data.get("physics", {})
        nums = data.get("numerics", {})
        for k in phys:
            if k not in ("dim", "p", "alpha"):
                errs.append(f"physics: unknown key {k!r}")
        for k in nums:
            if k not in ("m", "r_max", "dt", "t_end", "sample_every", "tolerances"):
                errs.append(f"numerics: unknown key {k!r}")
        if "scenario" not in data:
            errs.append("scenario is required")
        if errs:
            raise ConfigError(errs)
        tol = {"kernel": 1e-4, "ode": 1e-10}
        tol.update(nums.get("tolerances", {}))
        numerics = Numerics(**{k: v for k, v in nums.items() if k != "tolerances"}, tolerances=tol)
        return cls(
            scenario=data["scenario"],
            physics=Physics(**phys),
            numerics=numerics,
            blocks={k: v for k, v in data.items() if k in DEFAULTS},
            output_dir=str(data.get("output_dir", "runs")),
            seed=data.get("seed", 0),
        )

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"malformed TOML: {exc}"]) from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_toml(Path(path).read_text())

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path


def _positive(errs, block, key, value):
    if not (isinstance(value, (int, float)) and value > 0):
        errs.append(f"[{block}] {key} must be > 0, got {value!r}")


def _check_options(name: str, o: dict, ph: Physics) -> list[str]:
    errs: list[str] = []
    if name in ("bound-state", "spectrum"):
        if not isinstance(o["nodes"], int) or o["nodes"] < 0:
            errs.append(f"[{name}] nodes must be an integer >= 0, got {o['nodes']!r}")
    if name == "spectrum" and (not isinstance(o["n_eig"], int) or o["n_eig"] < 1):
        errs.append(f"[spectrum] n_eig must be an integer >= 1, got {o['n_eig']!r}")
    if name == "evolve":
        inits = ("stationary", "stable-mode", "unstable-mode", "scaled-kick")
        if o["init"] not in inits:
            errs.append(f"[evolve] init must be one of {', '.join(inits)}, got {o['init']!r}")
        for k in ("amplitude", "defect_tol", "rate_tol"):
            _positive(errs, name, k, o[k])
    if name == "threshold":
        br = o["bracket"]
        if not (isinstance(br, list) and len(br) == 2 and br[0] < br[1]):
            errs.append(f"[threshold] bracket must be [lo, hi] with lo < hi, got {br!r}")
        for k in ("width", "exit_distance", "t_end", "rate_tol", "depth_tol", "eta_width"):
            _positive(errs, name, k, o[k])
        offs = o["depth_offsets"]
        if not (isinstance(offs, list) and len(offs) >= 2 and all(x > 0 for x in offs)):
            errs.append("[threshold] depth_offsets needs at least two positive offsets")
    if name == "modulation-trace":
        for k in ("amplitude", "window", "coercivity_amplitude"):
            _positive(errs, name, k, o[k])
        if o["window"] <= o["amplitude"]:
            errs.append("[modulation-trace] window must exceed amplitude")
    if name in ("reduced-ode", "theorem3-shoot"):
        nup, num = o["nu_plus"], o["nu_minus"]
        if not all(x > 0 for x in nup):
            errs.append(f"[{name}] nu_plus entries must be > 0, got {nup!r}")
        if not all(x < 0 for x in num):
            errs.append(f"[{name}] nu_minus entries must be < 0, got {num!r}")
        if len(nup) != len(num):
            errs.append(f"[{name}] nu_plus and nu_minus must have equal length")
        _positive(errs, name, "tol", o["tol"])
        for i, c in enumerate(o["couplings"]):
            if not (isinstance(c, dict) and {"target", "coefficient", "powers"} <= set(c)):
                errs.append(f"[{name}] couplings[{i}] needs target, coefficient and powers")
    if name == "reduced-ode":
        if len(o["a_plus0"]) != len(o["nu_plus"]) or len(o["a_minus0"]) != len(o["nu_minus"]):
            errs.append("[reduced-ode] a_plus0/a_minus0 lengths must match nu_plus/nu_minus")
        _positive(errs, name, "t_end", o["t_end"])
    if name == "theorem3-shoot":
        if not 0 < o["delta"] < 1:
            errs.append(f"[theorem3-shoot] delta must satisfy 0 < delta < 1, got {o['delta']!r}")
        if len(o["nu_plus"]) not in (1, 2):
            errs.append("[theorem3-shoot] the shooting search supports K = 1 or 2 unstable modes")
        if o["t_max"] < 0:
            errs.append("[theorem3-shoot] t_max must be >= 0 (0 selects 1e3/delta)")
    return errs
