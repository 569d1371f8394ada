"""Fluid properties, non-dimensional groups and the FiLM conditioning vector."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

KELVIN = 273.15
STANDARD_GRAVITY = 9.81

CONDITIONING_FIELDS = (
    "Re", "Pr", "St", "k_ratio", "rho_ratio", "mu_ratio", "cp_ratio",
    "gravity", "T_bulk_normalized", "T_wall_normalized", "T_sat_nondim", "subcooled",
)
COND_DIM = len(CONDITIONING_FIELDS)
# entries spanning orders of magnitude are standardized in log space
LOG_ENTRIES = (0, 1)


class FluidError(ValueError):
    pass


@dataclass(frozen=True)
class ThermophysicalProperties:
    T_sat: float
    rho_l: float
    rho_v: float
    mu_l: float
    mu_v: float
    cp_l: float
    cp_v: float
    k_l: float
    k_v: float
    h_lv: float
    sigma: float

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if f.name == "T_sat":
                continue
            v = getattr(self, f.name)
            if not (v > 0 and math.isfinite(v)):
                raise FluidError(f"property {f.name} must be positive, got {v}")
        if self.rho_l <= self.rho_v:
            raise FluidError("non-buoyant configuration: rho_l must exceed rho_v")


@dataclass(frozen=True)
class BoilingCondition:
    T_bulk: float
    T_wall: float
    gravity: float = STANDARD_GRAVITY
    subcooled: bool = False
    nucleation_sites: int = 0


@dataclass(frozen=True)
class NondimParams:
    l_c: float
    u_c: float
    t_c: float
    rho_ratio: float
    mu_ratio: float
    k_ratio: float
    cp_ratio: float
    Re: float
    We: float
    Pr: float
    St: float


@dataclass(frozen=True)
class FluidParams:
    name: str
    props: ThermophysicalProperties
    nondim: NondimParams
    condition: BoilingCondition
    T_sat_nondim: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "props": dataclasses.asdict(self.props),
            "nondim": dataclasses.asdict(self.nondim),
            "condition": dataclasses.asdict(self.condition),
            "T_sat_nondim": self.T_sat_nondim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FluidParams":
        props = ThermophysicalProperties(**d["props"])
        cond = BoilingCondition(**d["condition"])
        fp = cls(d["name"], props, NondimParams(**d["nondim"]), cond, d["T_sat_nondim"])
        fp.check_consistent()
        return fp

    def check_consistent(self, rtol: float = 1e-6) -> None:
        fresh = derive_nondimensional(self.props, self.condition)
        for f in dataclasses.fields(fresh):
            a, b = getattr(fresh, f.name), getattr(self.nondim, f.name)
            if abs(a - b) > rtol * max(abs(a), abs(b)):
                raise FluidError(f"stored {f.name}={b} disagrees with recomputed {a}")


def derive_nondimensional(props: ThermophysicalProperties, cond: BoilingCondition) -> NondimParams:
    props.validate()
    g = cond.gravity
    if not g > 0:
        raise FluidError(f"gravity must be positive, got {g}")
    l_c = math.sqrt(props.sigma / ((props.rho_l - props.rho_v) * g))
    u_c = math.sqrt(g * l_c)
    t_c = l_c / u_c
    # ratios are vapor over liquid, matching the tabulated magnitudes
    return NondimParams(
        l_c=l_c,
        u_c=u_c,
        t_c=t_c,
        rho_ratio=props.rho_v / props.rho_l,
        mu_ratio=props.mu_v / props.mu_l,
        k_ratio=props.k_v / props.k_l,
        cp_ratio=props.cp_v / props.cp_l,
        Re=props.rho_l * u_c * l_c / props.mu_l,
        # equals rho_l / (rho_l - rho_v), i.e. ~1 by the choice of l_c
        We=props.rho_l * u_c ** 2 * l_c / props.sigma,
        Pr=props.mu_l * props.cp_l / props.k_l,
        St=props.cp_l * (cond.T_wall - cond.T_bulk) / props.h_lv,
    )


def nondim_saturation_temp(T_sat: float, T_bulk: float, T_wall: float) -> float:
    if T_wall == T_bulk:
        raise FluidError("T_wall equals T_bulk: saturation temperature is undefined")
    return (T_sat - T_bulk) / (T_wall - T_bulk)


@lru_cache(maxsize=None)
def _library(path: str | None = None) -> dict:
    if path is None:
        text = resources.files("nucleus").joinpath("data/fluids.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def fluid_names(path: str | None = None) -> list[str]:
    return sorted(_library(path))


def load_properties(name: str, path: str | None = None) -> ThermophysicalProperties:
    lib = _library(path)
    if name not in lib:
        raise FluidError(f"unknown fluid {name!r}; known: {sorted(lib)}")
    props = ThermophysicalProperties(**lib[name])
    props.validate()
    return props


def make_params(fluid: str | ThermophysicalProperties, T_bulk: float, T_wall: float,
                gravity: float = STANDARD_GRAVITY, nucleation_sites: int = 0,
                name: str | None = None) -> FluidParams:
    """Build validated FluidParams for a fluid at an operating condition."""
    if isinstance(fluid, str):
        props = load_properties(fluid)
        name = name or fluid
    else:
        props = fluid
        name = name or "custom"
    if not T_wall > props.T_sat:
        raise FluidError(f"T_wall={T_wall} must exceed T_sat={props.T_sat} (nucleate regime)")
    if T_bulk > props.T_sat:
        raise FluidError(f"T_bulk={T_bulk} above T_sat={props.T_sat}")
    cond = BoilingCondition(T_bulk, T_wall, gravity, T_bulk < props.T_sat, nucleation_sites)
    nondim = derive_nondimensional(props, cond)
    return FluidParams(name, props, nondim, cond, nondim_saturation_temp(props.T_sat, T_bulk, T_wall))


def _normalized_temp(T: float, T_sat: float) -> float:
    return (T - T_sat) / (T_sat + KELVIN)


def raw_conditioning_vector(p: FluidParams) -> np.ndarray:
    """The 12 conditioning entries in physical form, ordered as CONDITIONING_FIELDS."""
    nd, c = p.nondim, p.condition
    return np.array([
        nd.Re, nd.Pr, nd.St, nd.k_ratio, nd.rho_ratio, nd.mu_ratio, nd.cp_ratio,
        c.gravity,
        _normalized_temp(c.T_bulk, p.props.T_sat),
        _normalized_temp(c.T_wall, p.props.T_sat),
        p.T_sat_nondim,
        1.0 if c.subcooled else 0.0,
    ], dtype=np.float64)


def _transform(raw: np.ndarray) -> np.ndarray:
    v = np.array(raw, dtype=np.float64)
    v[..., list(LOG_ENTRIES)] = np.log(v[..., list(LOG_ENTRIES)])
    return v


def conditioning_stats(params: list[FluidParams]) -> dict:
    """Per-entry affine standardization constants from a set of conditions."""
    if not params:
        raise FluidError("need at least one FluidParams to fit conditioning stats")
    mat = np.stack([_transform(raw_conditioning_vector(p)) for p in params])
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return {"mean": mean.tolist(), "std": std.tolist()}


def default_conditioning_stats() -> dict:
    """Stats over the shipped fluids at saturated and 10 K subcooled conditions."""
    ps = []
    for name in fluid_names():
        T_sat = load_properties(name).T_sat
        for sub in (0.0, 10.0):
            for superheat in (20.0, 40.0):
                ps.append(make_params(name, T_sat - sub, T_sat + superheat))
    return conditioning_stats(ps)


def conditioning_vector(p: FluidParams, stats: dict | None = None) -> np.ndarray:
    """Standardized length-12 vector fed to the FiLM conditioning network."""
    stats = stats or default_conditioning_stats()
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    if mean.shape != (COND_DIM,) or std.shape != (COND_DIM,):
        raise FluidError(f"conditioning stats must have {COND_DIM} entries")
    return ((_transform(raw_conditioning_vector(p)) - mean) / std).astype(np.float32)
