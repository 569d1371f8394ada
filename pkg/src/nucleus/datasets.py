"""Trajectory storage, the synthetic bubble generator, windowing and augmentation.

Grids are indexed ``[row, col]`` with row 0 at the top of the domain and the
heater below the last row. ``Uy > 0`` points upward (toward row 0) and
``Ux > 0`` toward increasing column. ``phi`` is a signed distance in cells,
positive inside vapor.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .fluids import FluidParams, make_params

FIELDS = ("T", "Ux", "Uy", "phi")
T, UX, UY, PHI = range(4)

MAGIC = b"NUCL"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class PayloadSizeError(FormatError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        kind = "truncated payload" if found < expected else "trailing bytes after payload"
        super().__init__(f"{kind}: expected {expected} bytes, found {found}")


class TruncatedPayloadError(PayloadSizeError):
    pass


class MetadataShapeError(FormatError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class FieldState:
    T: np.ndarray
    Ux: np.ndarray
    Uy: np.ndarray
    phi: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.T.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.T, self.Ux, self.Uy, self.phi]).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FieldState":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 4:
            raise DatasetError(f"expected (4, H, W) field stack, got {arr.shape}")
        return cls(arr[T], arr[UX], arr[UY], arr[PHI])


@dataclass
class Trajectory:
    """``data`` holds all states as (steps, 4, H, W) float32."""

    data: np.ndarray
    dt: float
    dx: float
    params: FluidParams
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1] != 4:
            raise DatasetError(f"trajectory data must be (steps, 4, H, W), got {self.data.shape}")
        if self.data.shape[0] < 2:
            raise DatasetError("a trajectory needs at least 2 states")
        if not np.isfinite(self.data).all():
            raise DatasetError("trajectory contains non-finite values")

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[2]

    @property
    def W(self) -> int:
        return self.data.shape[3]

    @property
    def states(self) -> list[FieldState]:
        return [FieldState.from_array(s) for s in self.data]

    def __len__(self) -> int:
        return self.steps

    def metadata(self) -> dict:
        return {
            "H": self.H,
            "W": self.W,
            "steps": self.steps,
            "dt": self.dt,
            "dx": self.dx,
            "fields": list(FIELDS),
            "fluid": self.params.name,
            "params": self.params.to_dict(),
            "seed": self.seed,
            "meta": self.meta,
        }


@dataclass
class TrainingSample:
    history: np.ndarray      # (F, 4, H, W)
    target: np.ndarray       # (4, H, W)
    params: FluidParams


# -- NUCL-1 format ---------------------------------------------------------------

def encode_trajectory(tr: Trajectory) -> bytes:
    meta = json.dumps(tr.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = tr.data.astype("<f4", copy=False).tobytes(order="C")
    return _HEADER.pack(MAGIC, VERSION, len(meta)) + meta + payload


def decode_trajectory(buf: bytes) -> Trajectory:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(_HEADER.size, len(buf))
    magic, version, meta_len = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported NUCL version {version}")
    start = _HEADER.size + meta_len
    if len(buf) < start:
        raise TruncatedPayloadError(start, len(buf))
    try:
        meta = json.loads(buf[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MetadataShapeError(f"unreadable metadata: {exc}") from exc
    try:
        H, W, steps = int(meta["H"]), int(meta["W"]), int(meta["steps"])
        fields = meta["fields"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MetadataShapeError(f"metadata missing shape entries: {exc}") from exc
    if min(H, W) < 1 or steps < 2 or list(fields) != list(FIELDS):
        raise MetadataShapeError(f"invalid declared shape H={H} W={W} steps={steps} fields={fields}")
    expected = steps * len(FIELDS) * H * W * 4
    found = len(buf) - start
    if found < expected:
        raise TruncatedPayloadError(expected, found)
    if found > expected:
        raise PayloadSizeError(expected, found)
    data = np.frombuffer(buf, dtype="<f4", offset=start).reshape(steps, 4, H, W)
    params = FluidParams.from_dict(meta["params"])
    if params.name != meta.get("fluid"):
        raise MetadataShapeError("fluid name disagrees with stored parameters")
    return Trajectory(data.astype(np.float32), float(meta["dt"]), float(meta["dx"]), params,
                      meta.get("seed"), meta.get("meta") or {})


def write_trajectory(tr: Trajectory, path) -> None:
    Path(path).write_bytes(encode_trajectory(tr))


def read_trajectory(path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes())


# -- manifests -----------------------------------------------------------------

def write_manifest(entries: list[tuple[str, str]], path) -> None:
    """``entries`` are (relative trajectory path, split tag) pairs."""
    doc = {"trajectories": [{"path": p, "split": s} for p, s in entries]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path) -> dict[str, list[Path]]:
    path = Path(path)
    doc = json.loads(path.read_text())
    splits: dict[str, list[Path]] = {}
    for item in doc.get("trajectories", []):
        p = Path(item["path"])
        if not p.is_absolute():
            p = path.parent / p
        splits.setdefault(item.get("split", "train"), []).append(p)
    return splits


def load_split(manifest, split: str) -> list[Trajectory]:
    paths = read_manifest(manifest).get(split, [])
    if not paths:
        raise DatasetError(f"manifest {manifest} has no {split!r} trajectories")
    return [read_trajectory(p) for p in paths]


# -- synthetic generator ---------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    H: int = 32
    W: int = 32
    steps: int = 40
    dt: float = 1.0
    dx: float = 1.0
    fluid: str = "FC-72"
    T_bulk: float = 58.0
    T_wall: float = 88.0
    gravity: float = 9.81
    nucleation_sites: int = 3
    rise_speed: float = 0.5        # cells per time unit once detached
    rise_accel: float = 0.1        # ramp toward rise_speed after detachment
    growth_rate: float = 0.25      # radius cells per time unit while attached
    start_radius: float = 0.0
    detach_radius: float = 3.5
    detach_jitter: float = 0.0
    shrink_rate: float = 0.05      # subcooled condensation, radius per time unit
    wait_max: float = 2.0          # idle time at a site after detachment
    warmup: int = 40
    thermal_layer: float = 3.0
    interface_width: float = 1.5

    @property
    def subcooled(self) -> bool:
        return self.params().condition.subcooled

    def params(self) -> FluidParams:
        return make_params(self.fluid, self.T_bulk, self.T_wall, self.gravity, self.nucleation_sites)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Bubble:
    ident: int
    site: int
    row: float
    col: float
    radius: float
    attached: bool
    speed: float


def _site_cols(cfg: GeneratorConfig) -> np.ndarray:
    n = cfg.nucleation_sites
    return (np.arange(n) + 0.5) * cfg.W / n - 0.5


def _attached_row(cfg: GeneratorConfig, radius: float) -> float:
    # heater surface sits half a cell below the last row; bubble is a truncated disk
    return cfg.H - 0.5 - 0.7 * radius


def bubble_sdf(shape: tuple[int, int], bubbles: list[Bubble], fallback: float | None = None) -> np.ndarray:
    """Signed distance to the union of disks, positive inside."""
    H, W = shape
    if not bubbles:
        return np.full(shape, -(H + W) if fallback is None else fallback, dtype=np.float64)
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    best = None
    for b in bubbles:
        d = b.radius - np.hypot(rows - b.row, cols - b.col)
        best = d if best is None else np.maximum(best, d)
    return best


def _velocity(cfg: GeneratorConfig, bubbles: list[Bubble]) -> tuple[np.ndarray, np.ndarray]:
    """Superposed Gaussian stream-function plumes with wall images."""
    H, W = cfg.H, cfg.W
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    ux = np.zeros((H, W))
    uy = np.zeros((H, W))
    heater = H - 0.5
    for b in bubbles:
        v = b.speed
        s = 1.5 * max(b.radius, 0.0) + 1.0
        images = [
            (b.row, b.col, v),
            (b.row, -1.0 - b.col, v),               # left wall
            (b.row, 2 * (W - 0.5) - b.col, v),      # right wall
            (2 * heater - b.row, b.col, -v),        # heater
        ]
        for r0, c0, vv in images:
            dxc = cols - c0
            dyc = r0 - rows  # upward positive
            g = np.exp(-(dxc ** 2 + dyc ** 2) / (2 * s * s))
            uy += vv * g * (1.0 - dxc ** 2 / (s * s))
            ux += vv * g * dxc * dyc / (s * s)
    return ux, uy


def _temperature(cfg: GeneratorConfig, params: FluidParams, phi: np.ndarray) -> np.ndarray:
    H = cfg.H
    rows = np.arange(H, dtype=np.float64)[:, None]
    c = params.condition
    base = c.T_bulk + (c.T_wall - c.T_bulk) * np.exp(-(H - 0.5 - rows) / cfg.thermal_layer)
    vapor = 0.5 * (1.0 + np.tanh(phi / cfg.interface_width))
    return base * (1.0 - vapor) + params.props.T_sat * vapor


def synth_generate(cfg: GeneratorConfig, seed: int, return_records: bool = False):
    """Toy pool-boiling trajectory: disk bubbles nucleate, grow, detach and rise.

    Subcooled conditions shrink rising bubbles until they vanish. The result is
    deterministic in ``(cfg, seed)``. With ``return_records`` the per-step
    bubble lists are returned alongside the trajectory.
    """
    params = cfg.params()
    subcooled = params.condition.subcooled
    if cfg.nucleation_sites < 0:
        raise DatasetError("nucleation_sites must be >= 0")
    if cfg.nucleation_sites == 0 and subcooled and cfg.shrink_rate > 0:
        raise DatasetError("degenerate config: subcooled shrink with zero nucleation sites")
    if cfg.steps < 2 or cfg.H < 3 or cfg.W < 3:
        raise DatasetError("generator needs steps >= 2 and a grid of at least 3x3")
    rng = np.random.default_rng(seed)
    dt = cfg.dt
    site_cols = _site_cols(cfg)
    bubbles: list[Bubble] = []
    next_id = 0
    site_wait = np.zeros(cfg.nucleation_sites)
    detach_at = cfg.detach_radius + rng.uniform(-cfg.detach_jitter, cfg.detach_jitter, cfg.nucleation_sites)
    for k, col in enumerate(site_cols):
        r = rng.uniform(cfg.start_radius, detach_at[k])
        bubbles.append(Bubble(next_id, k, _attached_row(cfg, r), float(col), r, True, 0.7 * cfg.growth_rate))
        next_id += 1

    frames = []
    records = []
    for step in range(cfg.warmup + cfg.steps):
        if step >= cfg.warmup:
            phi = bubble_sdf((cfg.H, cfg.W), bubbles)
            ux, uy = _velocity(cfg, bubbles)
            temp = _temperature(cfg, params, phi)
            frames.append(np.stack([temp, ux, uy, phi]))
            records.append([dataclasses.replace(b) for b in bubbles])
        # advance one step
        survivors = []
        occupied = set()
        for b in bubbles:
            if b.attached:
                b.radius += cfg.growth_rate * dt
                b.row = _attached_row(cfg, b.radius)
                if b.radius >= detach_at[b.site]:
                    b.attached = False
                    site_wait[b.site] = rng.uniform(0.0, cfg.wait_max)
                    detach_at[b.site] = cfg.detach_radius + rng.uniform(-cfg.detach_jitter, cfg.detach_jitter)
                else:
                    occupied.add(b.site)
            else:
                b.speed = min(b.speed + cfg.rise_accel * dt, cfg.rise_speed)
                b.row -= b.speed * dt
                if subcooled:
                    b.radius -= cfg.shrink_rate * dt
            # condensed bubbles keep shrinking below zero radius so they fade out
            # of phi continuously; drop them once they cannot influence the grid
            reach = 3.0 * (1.5 * max(b.radius, 0.0) + 1.0)
            if not b.attached and (b.row + max(b.radius, reach) < -cfg.H / 2 or b.radius < -(cfg.H + cfg.W)):
                continue
            survivors.append(b)
        bubbles = survivors
        for k, col in enumerate(site_cols):
            if k in occupied:
                continue
            site_wait[k] -= dt
            if site_wait[k] <= 0 and not any(b.attached and b.site == k for b in bubbles):
                r = cfg.start_radius
                bubbles.append(Bubble(next_id, k, _attached_row(cfg, r), float(col), r, True,
                                      0.7 * cfg.growth_rate))
                next_id += 1

    tr = Trajectory(np.stack(frames).astype(np.float32), cfg.dt, cfg.dx, params, seed,
                    {"generator": cfg.to_dict()})
    return (tr, records) if return_records else tr


# -- samples and augmentation ---------------------------------------------------------

def window_iter(tr: Trajectory, F: int) -> Iterator[TrainingSample]:
    if F < 1:
        raise DatasetError("history length must be >= 1")
    if tr.steps < F + 1:
        raise DatasetError(f"trajectory of {tr.steps} states too short for history {F}")
    for start in range(tr.steps - F):
        yield TrainingSample(tr.data[start:start + F], tr.data[start + F], tr.params)


def flip_fields(arr: np.ndarray) -> np.ndarray:
    """Mirror left-right along the last axis and negate Ux (axis -3 holds fields)."""
    out = np.array(arr[..., ::-1], dtype=np.float32, copy=True)
    out[..., UX, :, :] *= -1.0
    return out


def field_scales(trajectories: list[Trajectory]) -> np.ndarray:
    """Per-field spread: std of T - T_bulk, Ux, Uy, phi over all states."""
    acc = [[] for _ in FIELDS]
    for tr in trajectories:
        acc[T].append((tr.data[:, T] - tr.params.condition.T_bulk).ravel())
        for f in (UX, UY, PHI):
            acc[f].append(tr.data[:, f].ravel())
    scales = np.array([np.concatenate(a).std() for a in acc])
    return np.where(scales > 1e-8, scales, 1.0)


def augment(s: TrainingSample, rng: np.random.Generator, field_scale=None, sigma_frac: float = 0.01,
            flip: bool | None = None, sigma=None) -> TrainingSample:
    """Random mirror (p=0.5) then zero-mean Gaussian noise on the history only.

    Per field the noise std is drawn from Uniform(0, sigma_frac * field_scale)
    unless ``sigma`` fixes it; ``flip`` likewise forces the mirror decision.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    history, target = s.history, s.target
    if flip:
        history, target = flip_fields(history), flip_fields(target)
    if sigma is None:
        scale = np.ones(4) if field_scale is None else np.asarray(field_scale, dtype=np.float64)
        sigma = rng.uniform(0.0, 1.0, size=4) * sigma_frac * scale
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (4,))
    if np.any(sigma > 0):
        noise = rng.standard_normal(history.shape) * sigma[None, :, None, None]
        history = (history + noise).astype(np.float32)
    return TrainingSample(history, target, s.params)
