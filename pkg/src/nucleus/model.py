"""The NUCLEUS surrogate: patch tokens, FiLM-conditioned transformer blocks and field heads."""

from __future__ import annotations

import contextlib
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import levelset
from . import tensorcore as tc
from .attention import AttentionConfig, TemporalAttention, make_spatial
from .datasets import FIELDS, T, Trajectory
from .fluids import COND_DIM, FluidParams, conditioning_vector, default_conditioning_stats
from .layers import LayerNorm, Linear, Module, _rng, param
from .moe import DenseFFN, MoeConfig, MoELayer, RoutingRecord
from .tensorcore import Tensor

EPS_NORM = 1e-8


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    H: int = 32
    W: int = 32
    P: int = 4
    D: int = 64
    L: int = 4
    F: int = 3
    heads: int = 4
    radius: int = 3
    attention: str = "neighborhood"
    moe: bool = True
    E: int = 4
    k: int = 2
    expert_hidden: int = 128
    dense_hidden: int | None = None     # defaults to k * expert_hidden (matched active size)
    alpha: float = 0.01
    renormalize: bool = True
    cond_hidden: int = 64
    residual: bool = True
    zero_heads: bool = True
    eikonal_weight: float = 0.0
    seed: int = 0
    cond_stats: dict = field(default_factory=default_conditioning_stats)
    field_center: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    field_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])

    def __post_init__(self):
        for name in ("H", "W", "P", "D", "L", "F", "heads", "E", "k", "expert_hidden", "cond_hidden"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.H % self.P or self.W % self.P:
            raise ModelError(f"grid {self.H}x{self.W} not divisible by patch size {self.P}")
        self.attention_config().validate(self.D)
        self.moe_config()

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.P, self.W // self.P

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.heads, self.radius, self.attention)

    def moe_config(self) -> MoeConfig:
        return MoeConfig(self.E, self.k, self.expert_hidden, self.alpha, self.renormalize)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def fit_normalization(cfg: ModelConfig, trajectories: list[Trajectory]) -> ModelConfig:
    """Freeze per-field centering/scaling statistics of a training set into the config."""
    if not trajectories:
        raise ModelError("need training trajectories to fit normalization")
    acc = [[] for _ in FIELDS]
    for tr in trajectories:
        acc[T].append((tr.data[:, T] - tr.params.condition.T_bulk).ravel())
        for f in range(1, 4):
            acc[f].append(tr.data[:, f].ravel())
    vals = [np.concatenate(a).astype(np.float64) for a in acc]
    center = [float(v.mean()) for v in vals]
    scale = [float(v.std()) if v.std() > 1e-8 else 1.0 for v in vals]
    return dataclasses.replace(cfg, field_center=center, field_scale=scale)


def patchify(x: np.ndarray, P: int) -> np.ndarray:
    """(..., C, H, W) -> (..., H/P, W/P, C*P*P), channel-major within a patch."""
    *lead, C, H, W = x.shape
    if H % P or W % P:
        raise ModelError(f"extents {H}x{W} not divisible by patch size {P}")
    nl = len(lead)
    y = x.reshape(*lead, C, H // P, P, W // P, P)
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return y.transpose(axes).reshape(*lead, H // P, W // P, C * P * P)


def unpatchify(t: Tensor, P: int) -> Tensor:
    """(..., Hp, Wp, P*P) -> (..., Hp*P, Wp*P) for a single channel."""
    *lead, Hp, Wp, _ = t.shape
    lead = tuple(lead)
    nl = len(lead)
    y = t.reshape(lead + (Hp, Wp, P, P))
    y = y.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3))
    return y.reshape(lead + (Hp * P, Wp * P))


class FiLM(Module):
    """Maps the conditioning vector to per-channel (gamma, beta) for every norm site."""

    def __init__(self, n_sites: int, dim: int, hidden: int, rng=None):
        rng = _rng(rng)
        self.n_sites = n_sites
        self.dim = dim
        self.fc1 = Linear(COND_DIM, hidden, rng)
        # zero output layer: gamma = 1, beta = 0 at initialization
        self.fc2 = Linear(hidden, n_sites * 2 * dim, rng, zero=True)

    def forward(self, cond: Tensor) -> Tensor:
        """(B, 12) -> (B, n_sites, 2, D) with gamma offsets and beta."""
        out = self.fc2(tc.gelu(self.fc1(cond)))
        return out.reshape((cond.shape[0], self.n_sites, 2, self.dim))


def film(x: Tensor, mod: Tensor, site: int) -> Tensor:
    """x * (1 + dgamma) + beta, broadcast over all token axes of x (B, ..., D)."""
    B, D = mod.shape[0], mod.shape[-1]
    shape = (B,) + (1,) * (x.ndim - 2) + (D,)
    gamma = mod[:, site, 0].reshape(shape)
    beta = mod[:, site, 1].reshape(shape)
    return x * (gamma + 1.0) + beta


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng):
        D = cfg.D
        self.norm1 = LayerNorm(D)
        self.temporal = TemporalAttention(D, cfg.heads, cfg.F, rng)
        self.norm2 = LayerNorm(D)
        self.spatial = make_spatial(D, cfg.attention_config(), rng)
        self.norm3 = LayerNorm(D)
        if cfg.moe:
            self.ffn = MoELayer(D, cfg.moe_config(), rng)
        else:
            hidden = cfg.dense_hidden or cfg.k * cfg.expert_hidden
            self.ffn = DenseFFN(D, hidden, rng)

    def forward(self, h: Tensor, mod: Tensor, base: int) -> Tensor:
        h = h + self.temporal(film(self.norm1(h), mod, base))
        h = h + self.spatial(film(self.norm2(h), mod, base + 1))
        return h + self.ffn(film(self.norm3(h), mod, base + 2))


class Nucleus(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        D, P = cfg.D, cfg.P
        Hp, Wp = cfg.grid
        self.embed = Linear(4 * P * P, D, rng)
        self.pos_embed = param(rng.normal(0.0, 0.02, size=(Hp, Wp, D)))
        self.film = FiLM(3 * cfg.L, D, cfg.cond_hidden, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.L)]
        self.final_norm = LayerNorm(D)
        self.heads = [Linear(D, P * P, rng, zero=cfg.zero_heads) for _ in FIELDS]
        self._center = np.asarray(cfg.field_center, dtype=np.float64)
        self._scale = np.asarray(cfg.field_scale, dtype=np.float64)

    # -- plumbing ----------------------------------------------------------------
    def moe_layers(self) -> list[MoELayer]:
        return [b.ffn for b in self.blocks if isinstance(b.ffn, MoELayer)]

    @contextlib.contextmanager
    def freeze_routing(self):
        """Reuse the first call's expert assignments for every later call."""
        layers = self.moe_layers()
        for m in layers:
            m.set_frozen(True)
        try:
            yield
        finally:
            for m in layers:
                m.set_frozen(False)

    def conditioning(self, params: list[FluidParams]) -> np.ndarray:
        return np.stack([conditioning_vector(p, self.config.cond_stats) for p in params])

    def normalize(self, x: np.ndarray, T_bulk: np.ndarray) -> np.ndarray:
        """(B, F, 4, H, W) physical -> normalized model inputs."""
        x = np.array(x, dtype=np.float64)
        x[:, :, T] -= np.asarray(T_bulk, dtype=np.float64)[:, None, None, None]
        x -= self._center[None, None, :, None, None]
        x /= self._scale[None, None, :, None, None]
        return x

    def embed_history(self, history: np.ndarray, T_bulk: np.ndarray) -> Tensor:
        """(B, F, 4, H, W) -> tokens (B, F, Hp, Wp, D)."""
        cfg = self.config
        if history.ndim != 5 or history.shape[2] != 4:
            raise ModelError(f"history must be (B, F, 4, H, W), got {history.shape}")
        if history.shape[3:] != (cfg.H, cfg.W):
            raise ModelError(f"grid {history.shape[3:]} does not match config {(cfg.H, cfg.W)}")
        if history.shape[1] != cfg.F:
            raise ModelError(f"history length {history.shape[1]} != F={cfg.F}")
        patches = Tensor(patchify(self.normalize(history, T_bulk), cfg.P))
        return self.embed(patches) + self.pos_embed

    # -- forward -----------------------------------------------------------------
    def forward(self, history, cond, T_bulk) -> Tensor:
        """Predict the next state (B, 4, H, W) from (B, F, 4, H, W) history."""
        history = np.asarray(history)
        T_bulk = np.asarray(T_bulk, dtype=np.float64).reshape(-1)
        cfg = self.config
        h = self.embed_history(history, T_bulk)
        mod = self.film(tc.as_tensor(cond))
        for i, block in enumerate(self.blocks):
            try:
                h = block(h, mod, 3 * i)
            except tc.NonFiniteError as exc:
                raise ModelError(f"non-finite activation in block {i}: {exc}") from exc
            except tc.ShapeError as exc:
                raise ModelError(f"shape mismatch in block {i}: {exc}") from exc
        last = self.final_norm(h[:, -1])
        last_frame = history[:, -1].astype(np.float64)
        outs = []
        for f, head in enumerate(self.heads):
            y = unpatchify(head(last), cfg.P) * float(self._scale[f])
            if cfg.residual:
                y = y + last_frame[:, f]
            else:
                offset = self._center[f] + (T_bulk[:, None, None] if f == T else 0.0)
                y = y + offset
            outs.append(y)
        return tc.stack(outs, axis=1)

    def aux_loss(self) -> Tensor | float:
        layers = self.moe_layers()
        if not layers:
            return 0.0
        total = layers[0].aux_loss()
        for m in layers[1:]:
            total = total + m.aux_loss()
        return total

    def routing_records(self, frame: int = -1, sample: int = 0) -> list[RoutingRecord]:
        """Per MoE layer, the routing of one sample's frame with patch positions."""
        out = []
        for m in self.moe_layers():
            rec = m.last_record
            if rec is None:
                continue
            B, F, Hp, Wp = rec.meta["lead_shape"]
            ids = np.arange(B * F * Hp * Wp).reshape(B, F, Hp, Wp)[sample, frame].ravel()
            pos = np.stack(np.divmod(np.arange(Hp * Wp), Wp), axis=1)
            out.append(rec.subset(ids, pos))
        return out

    def predict(self, history: np.ndarray, params: FluidParams) -> np.ndarray:
        """Single-sample inference: (F, 4, H, W) -> (4, H, W)."""
        with tc.no_grad():
            out = self.forward(np.asarray(history)[None], self.conditioning([params]),
                               [params.condition.T_bulk])
        return out.data[0]


# -- losses ----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    fields: dict
    load_balance: float
    eikonal: float
    eikonal_weight: float

    @property
    def data(self) -> float:
        return float(sum(self.fields.values()))

    @property
    def total(self) -> float:
        return self.data + self.load_balance + self.eikonal_weight * self.eikonal


def field_norms(target: np.ndarray, T_bulk) -> np.ndarray:
    """Per-sample N_f of (B, 4, H, W) targets; temperature measured from T_bulk."""
    target = np.asarray(target, dtype=np.float64)
    T_bulk = np.asarray(T_bulk, dtype=np.float64).reshape(-1)
    centered = target.copy()
    centered[:, T] -= T_bulk[:, None, None]
    return np.abs(centered).sum(axis=(2, 3))


def relative_l1_loss(pred, target, T_bulk) -> dict:
    """Per-field relative L1 for batched (B, 4, H, W) states, averaged over the batch.

    L_f = ||pred_f - target_f||_1 / (N_f / N_max) with N_max the largest N_f of the sample.
    """
    pred = tc.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise tc.ShapeError("relative_l1_loss", pred.shape, target.shape)
    if pred.ndim == 3:
        pred = pred.reshape((1,) + pred.shape)
        target = target[None]
    norms = np.maximum(field_norms(target, T_bulk), EPS_NORM)
    weight = norms.max(axis=1, keepdims=True) / norms               # (B, 4)
    diff = tc.abs_(pred - target).sum(axis=(2, 3))                 # (B, 4)
    weighted = (diff * weight).mean(axis=0)
    return {name: weighted[i] for i, name in enumerate(FIELDS)}


def eikonal_loss(phi, dx: float = 1.0) -> Tensor:
    """Mean of | |grad phi| - 1 | with central differences (one-sided at edges)."""
    phi = tc.as_tensor(phi)
    return tc.abs_(levelset.central_grad_norm(phi, dx) - 1.0).mean()


def compute_loss(model: Nucleus, history, target, params: list[FluidParams], dx: float = 1.0,
                 eikonal_weight: float | None = None):
    """Total training objective and its breakdown for one batch."""
    w = model.config.eikonal_weight if eikonal_weight is None else eikonal_weight
    T_bulk = np.array([p.condition.T_bulk for p in params])
    pred = model(history, model.conditioning(params), T_bulk)
    parts = relative_l1_loss(pred, target, T_bulk)
    total = parts["T"] + parts["Ux"] + parts["Uy"] + parts["phi"]
    lb = model.aux_loss()
    if isinstance(lb, Tensor):
        total = total + lb
    eik_val = 0.0
    if w:
        eik = eikonal_loss(pred[:, 3], dx)
        total = total + eik * w
        eik_val = eik.item()
    breakdown = LossBreakdown(
        {k: v.item() for k, v in parts.items()},
        lb.item() if isinstance(lb, Tensor) else 0.0,
        eik_val, w,
    )
    return total, breakdown, pred


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict                  # name -> float32 array
    optimizer: dict = field(default_factory=dict)   # name -> array, plus "step"
    step: int = 0
    best: dict = field(default_factory=dict)

    def build(self) -> Nucleus:
        model = Nucleus(self.config)
        model.load_state_dict(self.weights)
        return model

    @classmethod
    def from_model(cls, model: Nucleus, optimizer: dict | None = None, step: int = 0,
                   best: dict | None = None) -> "Checkpoint":
        weights = {k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()}
        return cls(model.config, weights, dict(optimizer or {}), step, dict(best or {}))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Directory with manifest.json and one little-endian float32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    groups = [("weights", ckpt.weights), ("optimizer", {k: v for k, v in ckpt.optimizer.items()
                                                      if isinstance(v, np.ndarray)})]
    for group, tensors in groups:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    scalars = {k: v for k, v in ckpt.optimizer.items() if not isinstance(v, np.ndarray)}
    manifest = {
        "format": "nucleus-checkpoint-1",
        "config": ckpt.config.to_dict(),
        "tensors": entries,
        "optimizer_scalars": scalars,
        "step": ckpt.step,
        "best": ckpt.best,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (path / "weights.bin").write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "weights.bin").read_bytes()
    groups: dict[str, dict] = {"weights": {}, "optimizer": {}}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ModelError(f"checkpoint blob truncated at tensor {e['name']}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
        groups[e["group"]][e["name"]] = arr
    optimizer = dict(groups["optimizer"])
    optimizer.update(manifest.get("optimizer_scalars", {}))
    cfg = ModelConfig.from_dict(manifest["config"])
    return Checkpoint(cfg, groups["weights"], optimizer, manifest.get("step", 0), manifest.get("best", {}))
