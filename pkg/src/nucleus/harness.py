"""Training, fine-tuning, rollout, evaluation metrics, the Eikonal ablation and the scaling bench."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import levelset
from . import tensorcore as tc
from .attention import attention_cost
from .datasets import (FIELDS, PHI, T, UX, UY, FieldState, TrainingSample, Trajectory, augment,
                       field_scales, load_split, window_iter)
from .fluids import FluidParams
from .model import (Checkpoint, ModelConfig, ModelError, Nucleus, compute_loss, fit_normalization,
                    relative_l1_loss)
from .moe import RoutingRecord

log = logging.getLogger(__name__)

SWEEP_WEIGHTS = (5.0, 3.0, 1.0, 0.5, 0.1, 0.01, 0.0)


class HarnessError(RuntimeError):
    pass


class TrainingDiverged(HarnessError):
    pass


# -- optimizer and schedule ----------------------------------------------------------

@dataclass
class TrainConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    model: dict = field(default_factory=dict)
    epochs: int = 10
    batch_size: int = 8
    peak_lr: float = 1e-3
    final_lr: float = 1e-6
    warmup_steps: int | None = None      # None: min(5000, total // 10)
    max_steps: int | None = None
    flip: bool = True
    noise: bool = True
    noise_frac: float = 0.01
    eikonal_weight: float = 0.0
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if not self.peak_lr > self.final_lr > 0:
            raise HarnessError("need peak_lr > final_lr > 0")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise HarnessError("warmup_steps must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise HarnessError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def default_warmup(total_steps: int) -> int:
    return min(5000, total_steps // 10)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float = 1e-3,
                final_lr: float = 1e-6) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``final_lr`` at ``total_steps``."""
    if total_steps <= warmup_steps:
        raise HarnessError(f"total_steps={total_steps} must exceed warmup_steps={warmup_steps}")
    if not 0 <= step <= total_steps:
        raise HarnessError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with bias correction; moments are float32 arrays keyed by parameter name."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for k in self.params:
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state.get("t", 0))
        for k in self.params:
            if f"m/{k}" in state:
                self.m[k] = np.array(state[f"m/{k}"], dtype=self.m[k].dtype)
                self.v[k] = np.array(state[f"v/{k}"], dtype=self.v[k].dtype)


# -- batching and losses ---------------------------------------------------------------

def samples_from(trajectories: Iterable[Trajectory], F: int) -> list[TrainingSample]:
    out = []
    for tr in trajectories:
        out.extend(window_iter(tr, F))
    return out


def stack_batch(samples: list[TrainingSample]):
    hist = np.stack([s.history for s in samples])
    tgt = np.stack([s.target for s in samples])
    return hist, tgt, [s.params for s in samples]


def _t_bulk(params: list[FluidParams]) -> np.ndarray:
    return np.array([p.condition.T_bulk for p in params])


def persistence_loss(samples: list[TrainingSample]) -> dict:
    """Mean per-field relative L1 of predicting the last history frame unchanged."""
    if not samples:
        raise HarnessError("no samples")
    hist, tgt, params = stack_batch(samples)
    with tc.no_grad():
        parts = relative_l1_loss(hist[:, -1], tgt, _t_bulk(params))
    out = {k: v.item() for k, v in parts.items()}
    out["total"] = sum(out[f] for f in FIELDS)
    return out


def validation_loss(model: Nucleus, samples: list[TrainingSample], batch_size: int = 16) -> dict:
    """Sample-weighted mean per-field relative L1 (data loss only)."""
    if not samples:
        raise HarnessError("no validation samples")
    sums = dict.fromkeys(FIELDS, 0.0)
    with tc.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            hist, tgt, params = stack_batch(chunk)
            pred = model(hist, model.conditioning(params), _t_bulk(params))
            parts = relative_l1_loss(pred, tgt, _t_bulk(params))
            for f in FIELDS:
                sums[f] += parts[f].item() * len(chunk)
    out = {f: sums[f] / len(samples) for f in FIELDS}
    out["total"] = sum(out[f] for f in FIELDS)
    return out


LOG_COLUMNS = ["step", "epoch", "total", "T", "Ux", "Uy", "phi", "load_balance", "eikonal", "lr"]


def _write_log(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS + ["val_total"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fit(model: Nucleus, train_samples, val_samples, epochs: int, batch_size: int, lr_fn: Callable,
         rng: np.random.Generator, cfg: TrainConfig, scales, optimizer: Adam, rows: list,
         select_best: bool, max_steps: int | None = None):
    """Shared epoch loop for training and fine-tuning."""
    best = None
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_samples))
        for b in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                break
            ids = order[b:b + batch_size]
            batch = []
            for i in ids:
                s = train_samples[i]
                if cfg.flip or cfg.noise:
                    s = augment(s, rng, scales, sigma_frac=cfg.noise_frac if cfg.noise else 0.0,
                                flip=None if cfg.flip else False)
                batch.append(s)
            hist, tgt, params = stack_batch(batch)
            lr = lr_fn(step)
            try:
                total, parts, _ = compute_loss(model, hist, tgt, params,
                                               eikonal_weight=cfg.eikonal_weight)
            except (tc.NonFiniteError, ModelError) as exc:
                raise TrainingDiverged(f"non-finite forward at epoch {epoch} batch {b // batch_size} "
                                       f"(samples {ids.tolist()}): {exc}") from exc
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b // batch_size} "
                                       f"(samples {ids.tolist()})")
            model.zero_grads()
            tc.backward(total)
            optimizer.step(lr)
            step += 1
            rows.append({"step": step, "epoch": epoch, "total": parts.total, **parts.fields,
                         "load_balance": parts.load_balance, "eikonal": parts.eikonal, "lr": lr})
        if val_samples:
            val = validation_loss(model, val_samples)
            rows[-1]["val_total"] = val["total"]
            log.info("epoch %d val %.4f", epoch, val["total"])
            if select_best and (best is None or val["total"] < best[0]):
                best = (val["total"], model.state_dict(), optimizer.state_dict(), step, val)
    return best, step


def _resolve_sets(cfg: TrainConfig, train_set, val_set):
    if train_set is None:
        if cfg.train_manifest is None:
            raise HarnessError("no training manifest given")
        train_set = load_split(cfg.train_manifest, "train")
    if val_set is None and cfg.val_manifest is not None:
        split = "val"
        val_set = load_split(cfg.val_manifest, split)
    if not train_set:
        raise HarnessError("empty training set")
    return list(train_set), list(val_set or [])


def count_steps(n_samples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_samples / batch_size)


def train(cfg: TrainConfig, train_set: list[Trajectory] | None = None,
          val_set: list[Trajectory] | None = None, rows: list | None = None) -> Checkpoint:
    """Single-step supervised training; returns the best-validation checkpoint."""
    train_set, val_set = _resolve_sets(cfg, train_set, val_set)
    mcfg = ModelConfig.from_dict(dict(cfg.model)) if isinstance(cfg.model, dict) else cfg.model
    tr0 = train_set[0]
    mcfg = dataclasses.replace(mcfg, H=tr0.H, W=tr0.W, eikonal_weight=cfg.eikonal_weight)
    mcfg = fit_normalization(mcfg, train_set)
    model = Nucleus(mcfg)
    train_samples = samples_from(train_set, mcfg.F)
    val_samples = samples_from(val_set, mcfg.F) if val_set else []
    if not train_samples:
        raise HarnessError("training set yields no windows")
    epochs = cfg.epochs
    total = count_steps(len(train_samples), cfg.batch_size, epochs)
    if cfg.max_steps is not None and total > cfg.max_steps:
        total = cfg.max_steps        # the last epoch may be partial
    warmup = default_warmup(total) if cfg.warmup_steps is None else cfg.warmup_steps
    if total <= warmup:
        raise HarnessError(f"training budget of {total} steps does not exceed warmup {warmup}")

    def lr_fn(step):
        return lr_schedule(min(step, total), total, warmup, cfg.peak_lr, cfg.final_lr)

    rng = np.random.default_rng(cfg.seed)
    scales = field_scales(train_set)
    optimizer = Adam(dict(model.named_parameters()))
    rows = [] if rows is None else rows
    n_epochs = math.ceil(total / math.ceil(len(train_samples) / cfg.batch_size))
    best, step = _fit(model, train_samples, val_samples, n_epochs, cfg.batch_size, lr_fn, rng, cfg,
                      scales, optimizer, rows, select_best=bool(val_samples), max_steps=total)
    if cfg.log_path:
        _write_log(rows, cfg.log_path)
    if best is None:
        return Checkpoint.from_model(model, optimizer.state_dict(), step)
    _, weights, opt_state, best_step, val = best
    model.load_state_dict(weights)
    return Checkpoint.from_model(model, opt_state, best_step, {"val": val, "steps_run": step})


def finetune(ckpt: Checkpoint, train_set: list[Trajectory], lr: float = 1e-5, epochs: int = 5,
             batch_size: int = 8, seed: int = 0, flip: bool = True, noise: bool = True,
             rows: list | None = None) -> Checkpoint:
    """Resume from ``ckpt`` with fresh optimizer moments and a constant learning rate."""
    cfg = ckpt.config
    if not train_set:
        raise HarnessError("empty fine-tuning set")
    for tr in train_set:
        if (tr.H, tr.W) != (cfg.H, cfg.W):
            raise HarnessError(f"trajectory grid {tr.H}x{tr.W} does not match checkpoint "
                               f"{cfg.H}x{cfg.W}")
    if epochs < 0:
        raise HarnessError("epochs must be >= 0")
    model = ckpt.build()
    if epochs == 0:
        return Checkpoint.from_model(model, {}, ckpt.step, dict(ckpt.best))
    tcfg = TrainConfig(epochs=epochs, batch_size=batch_size, flip=flip, noise=noise,
                       eikonal_weight=cfg.eikonal_weight, seed=seed)
    optimizer = Adam(dict(model.named_parameters()))
    rng = np.random.default_rng(seed)
    rows = [] if rows is None else rows
    samples = samples_from(train_set, cfg.F)
    _, step = _fit(model, samples, [], epochs, batch_size, lambda s: lr, rng, tcfg,
                   field_scales(train_set), optimizer, rows, select_best=False)
    return Checkpoint.from_model(model, optimizer.state_dict(), ckpt.step + step,
                                 {"finetune_steps": step})


# -- rollout -----------------------------------------------------------------------------

@dataclass
class RolloutResult:
    states: np.ndarray                  # (n, 4, H, W) predicted states
    requested: int
    eikonal: np.ndarray                 # (n,) mean eikonal residual per step
    mae: np.ndarray | None = None       # (n, 4) per-field MAE vs ground truth
    routing: list | None = None         # per step, list of RoutingRecord per MoE layer
    diverged: bool = False
    message: str = ""

    @property
    def steps(self) -> int:
        return self.states.shape[0]

    def trajectory(self, last_input: np.ndarray, dt: float, dx: float, params: FluidParams) -> Trajectory:
        data = np.concatenate([np.asarray(last_input)[None], self.states]).astype(np.float32)
        return Trajectory(data, dt, dx, params, meta={"rollout": True, "diverged": self.diverged})


def _as_model(m) -> Nucleus:
    return m.build() if isinstance(m, Checkpoint) else m


def rollout(model, history: np.ndarray, params: FluidParams, n: int,
            reinit: levelset.ReinitConfig | None = None, truth: np.ndarray | None = None,
            dx: float = 1.0, record_routing: bool = False) -> RolloutResult:
    """Autoregressive prediction of ``n`` states from an (F, 4, H, W) history window."""
    if n < 1:
        raise HarnessError("rollout length must be >= 1")
    model = _as_model(model)
    cfg = model.config
    if np.shape(history) != (cfg.F, 4, cfg.H, cfg.W):
        raise HarnessError(f"history shape {np.shape(history)} does not match the model's "
                           f"(F, 4, H, W) = {(cfg.F, 4, cfg.H, cfg.W)}")
    window = [np.asarray(h, dtype=np.float32) for h in history]
    if truth is not None and len(truth) < n:
        raise HarnessError(f"ground truth has {len(truth)} states, need {n}")
    states, eik, maes, routing = [], [], [], []
    diverged, message = False, ""
    for step in range(n):
        try:
            nxt = model.predict(np.stack(window), params)
        except (tc.NonFiniteError, ModelError) as exc:
            diverged, message = True, f"non-finite prediction at step {step + 1}: {exc}"
            break
        if not np.isfinite(nxt).all():
            diverged, message = True, f"non-finite prediction at step {step + 1}"
            break
        if reinit is not None:
            nxt = nxt.copy()
            nxt[PHI] = levelset.sussman_reinit(nxt[PHI].astype(np.float64), reinit, dx)
        nxt = nxt.astype(np.float32)
        states.append(nxt)
        eik.append(levelset.eikonal_residual(nxt[PHI], dx)["mean"])
        if truth is not None:
            maes.append(np.abs(nxt.astype(np.float64) - truth[step]).mean(axis=(1, 2)))
        if record_routing:
            routing.append(model.routing_records())
        window = window[1:] + [nxt]
    H, W = history.shape[-2:]
    return RolloutResult(
        np.stack(states) if states else np.zeros((0, 4, H, W), np.float32), n, np.array(eik),
        np.array(maes) if truth is not None else None, routing if record_routing else None,
        diverged, message,
    )


# -- metrics -------------------------------------------------------------------------------

def emd_1d(a, b, m: int = 1024) -> float:
    """Wasserstein-1 distance between two empirical 1-D distributions."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise HarnessError("emd_1d needs non-empty sample sets")
    if a.size == b.size:
        return float(np.abs(np.sort(a) - np.sort(b)).mean())
    q = (np.arange(m) + 0.5) / m
    qa = np.quantile(a, q, method="inverted_cdf")
    qb = np.quantile(b, q, method="inverted_cdf")
    return float(np.abs(qa - qb).mean())


REGIONS = ("liquid", "vapor", "interface")


def region_masks(phi: np.ndarray, band: float = 1.5, dx: float = 1.0) -> dict:
    phi = np.asarray(phi)
    liquid = phi < -band * dx
    vapor = phi > band * dx
    return {"liquid": liquid, "vapor": vapor, "interface": ~(liquid | vapor)}


def region_stats(state, band: float = 1.5, dx: float = 1.0) -> dict:
    """Per-region cell count and mean T, Ux, Uy; an empty region maps to None."""
    if band < 0:
        raise HarnessError("band must be >= 0")
    data = state.stack() if isinstance(state, FieldState) else np.asarray(state)
    out = {}
    for name, mask in region_masks(data[PHI], band, dx).items():
        count = int(mask.sum())
        if count == 0:
            out[name] = None
            continue
        out[name] = {"count": count, "T": float(data[T][mask].mean()),
                     "Ux": float(data[UX][mask].mean()), "Uy": float(data[UY][mask].mean())}
    return out


class PersistencePredictor:
    """Predicts that nothing changes."""

    def predict(self, history, params):
        return np.array(history[-1], dtype=np.float32)


class OraclePredictor:
    """Looks up the true successor of the last history frame in known trajectories."""

    def __init__(self, trajectories: list[Trajectory]):
        self._next = {}
        for tr in trajectories:
            for i in range(tr.steps - 1):
                self._next[tr.data[i].tobytes()] = tr.data[i + 1]

    def predict(self, history, params):
        key = np.asarray(history[-1], dtype=np.float32).tobytes()
        if key not in self._next:
            raise HarnessError("oracle has no successor for this state")
        return self._next[key].copy()


def condition_label(p: FluidParams) -> str:
    c = p.condition
    return f"{p.name} Tb={c.T_bulk:g} Tw={c.T_wall:g}"


@dataclass
class EvalReport:
    mae: dict            # condition -> field -> single-step MAE
    emd: dict            # condition -> {"T": .., "Uy": ..}
    mean_T: dict         # condition -> {"pred": .., "truth": ..}
    regions: dict        # condition -> region -> {"pred": {Ux, Uy} | None, "truth": ...}
    rollout_steps: int

    def rows(self) -> list[list]:
        out = []
        for cond, per in self.mae.items():
            for f, v in per.items():
                out.append([cond, "mae", f, "", v])
        for cond, per in self.emd.items():
            for f, v in per.items():
                out.append([cond, "emd", f, "", v])
        for cond, per in self.mean_T.items():
            out.append([cond, "mean_T", "T", "pred", per["pred"]])
            out.append([cond, "mean_T", "T", "truth", per["truth"]])
        for cond, per in self.regions.items():
            for region, src in per.items():
                for which in ("pred", "truth"):
                    stats = src[which]
                    for comp in ("Ux", "Uy"):
                        out.append([cond, f"velocity_{region}", comp, which,
                                    "" if stats is None else stats[comp]])
        return out

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "metric", "field", "source", "value"])
            w.writerows(self.rows())


def _time_averaged_regions(states: np.ndarray, band: float, dx: float) -> dict:
    acc = {r: [] for r in REGIONS}
    for s in states:
        for r, st in region_stats(s, band, dx).items():
            if st is not None:
                acc[r].append((st["Ux"], st["Uy"]))
    return {r: ({"Ux": float(np.mean([v[0] for v in vals])), "Uy": float(np.mean([v[1] for v in vals]))}
                if vals else None) for r, vals in acc.items()}


def evaluate(predictor, trajectories: list[Trajectory], steps: int, F: int | None = None,
             band: float = 1.5) -> EvalReport:
    """Single-step MAE, pooled rollout EMD, mean temperature and region velocities."""
    if not trajectories:
        raise HarnessError("no test trajectories")
    predictor = _as_model(predictor)
    if F is None:
        F = predictor.config.F if isinstance(predictor, Nucleus) else 1
    groups: dict[str, list[Trajectory]] = {}
    for tr in trajectories:
        if tr.steps < F + steps:
            raise HarnessError(f"trajectory of {tr.steps} states too short for F={F} + {steps} steps")
        groups.setdefault(condition_label(tr.params), []).append(tr)
    mae, emd, mean_T, regions = {}, {}, {}, {}
    for cond, trs in groups.items():
        err_sum = np.zeros(4)
        n = 0
        pool_pred, pool_true = [], []
        for tr in trs:
            for s in window_iter(tr, F):
                pred = predictor.predict(s.history, s.params)
                err_sum += np.abs(pred.astype(np.float64) - s.target).mean(axis=(1, 2))
                n += 1
            truth = tr.data[F:F + steps]
            if isinstance(predictor, Nucleus):
                res = rollout(predictor, tr.data[:F], tr.params, steps)
                states = res.states
            else:
                window = list(tr.data[:F])
                states = []
                for _ in range(steps):
                    nxt = predictor.predict(np.stack(window), tr.params)
                    states.append(nxt)
                    window = window[1:] + [nxt]
                states = np.stack(states)
            pool_pred.append(states)
            pool_true.append(truth[:len(states)])
        pred_all = np.concatenate(pool_pred)
        true_all = np.concatenate(pool_true)
        mae[cond] = {f: float(err_sum[i] / n) for i, f in enumerate(FIELDS)}
        emd[cond] = {"T": emd_1d(pred_all[:, T], true_all[:, T]),
                     "Uy": emd_1d(pred_all[:, UY], true_all[:, UY])}
        mean_T[cond] = {"pred": float(pred_all[:, T].mean()), "truth": float(true_all[:, T].mean())}
        dx = trs[0].dx
        pr = _time_averaged_regions(pred_all, band, dx)
        tt = _time_averaged_regions(true_all, band, dx)
        regions[cond] = {r: {"pred": pr[r], "truth": tt[r]} for r in REGIONS}
    return EvalReport(mae, emd, mean_T, regions, steps)


# -- Eikonal ablation ----------------------------------------------------------------------

ABLATION_COLUMNS = ["case", "weight", "mean_err", "max_err", "sim_mean_err", "sim_max_err",
                    "phi_mae", "diverged"]


def sdf_errors(eikonal_per_step: np.ndarray) -> tuple[float, float]:
    """Mean and maximum over timesteps of the per-step mean Eikonal residual."""
    e = np.asarray(eikonal_per_step, dtype=np.float64)
    if e.size == 0:
        return float("nan"), float("nan")
    return float(e.mean()), float(e.max())


@dataclass
class AblationResult:
    rows: list[dict]
    claim_holds: bool
    detail: str

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)


def _rollout_errors(model, tests: list[Trajectory], steps: int, reinit) -> tuple[list, list, bool]:
    F = model.config.F
    eik, mae, diverged = [], [], False
    for tr in tests:
        res = rollout(model, tr.data[:F], tr.params, steps, reinit=reinit, truth=tr.data[F:F + steps],
                      dx=tr.dx)
        eik.extend(res.eikonal.tolist())
        if res.mae is not None and len(res.mae):
            mae.extend(res.mae[:, PHI].tolist())
        diverged |= res.diverged
    return eik, mae, diverged


def ablation_eikonal(train_cfg: TrainConfig, train_set: list[Trajectory], test_set: list[Trajectory],
                     steps: int, weights=SWEEP_WEIGHTS,
                     reinit: levelset.ReinitConfig = levelset.ROLLOUT_REINIT,
                     val_set: list[Trajectory] | None = None) -> AblationResult:
    """Train one model per Eikonal weight and compare against rollout-time reinitialization."""
    if 0.0 not in weights:
        raise HarnessError("the sweep needs the w=0 base model")
    F = ModelConfig.from_dict(dict(train_cfg.model)).F if isinstance(train_cfg.model, dict) \
        else train_cfg.model.F
    sim = []
    for tr in test_set:
        for s in tr.data[F:F + steps]:
            sim.append(levelset.eikonal_residual(s[PHI], tr.dx)["mean"])
    sim_mean, sim_max = sdf_errors(np.array(sim))
    rows, base = [], None
    for w in weights:
        cfg = dataclasses.replace(train_cfg, eikonal_weight=float(w), log_path=None)
        model = train(cfg, train_set, val_set).build()
        eik, mae, div = _rollout_errors(model, test_set, steps, None)
        mean, mx = sdf_errors(np.array(eik))
        rows.append({"case": f"w={w:g}", "weight": w, "mean_err": mean, "max_err": mx,
                     "sim_mean_err": sim_mean, "sim_max_err": sim_max,
                     "phi_mae": float(np.mean(mae)) if mae else float("nan"), "diverged": div})
        if w == 0.0:
            base = model
    eik, mae, div = _rollout_errors(base, test_set, steps, reinit)
    mean, mx = sdf_errors(np.array(eik))
    rows.append({"case": "reinit", "weight": 0.0, "mean_err": mean, "max_err": mx,
                 "sim_mean_err": sim_mean, "sim_max_err": sim_max,
                 "phi_mae": float(np.mean(mae)) if mae else float("nan"), "diverged": div})
    weighted = [r for r in rows if r["case"] != "reinit" and r["weight"] > 0]
    best_w = min(weighted, key=lambda r: r["max_err"]) if weighted else None
    if best_w is None:
        return AblationResult(rows, False, "no positive Eikonal weights in the sweep")
    holds = rows[-1]["max_err"] < min(r["max_err"] for r in weighted)
    detail = (f"reinit max error {rows[-1]['max_err']:.4f} vs best Eikonal-weight max error "
              f"{best_w['max_err']:.4f} ({best_w['case']}): claim {'PASS' if holds else 'FAIL'}")
    return AblationResult(rows, holds, detail)


# -- scaling bench -------------------------------------------------------------------------

BENCH_MODES = ("neighborhood+moe", "full+mlp", "full+moe", "neighborhood+mlp")
BENCH_COLUMNS = ["resolution", "mode", "tokens", "attn_score_flops", "attn_flops", "ffn_flops",
                 "ffn_all_expert_flops", "total_flops", "peak_score_memory", "measured_ms"]


def ffn_cost(tokens: int, D: int, hidden: int, E: int | None = None, k: int | None = None) -> dict:
    """Multiply-add flops (x2) of a dense MLP, or of a top-k MoE when E and k are given."""
    per_expert = 2 * 2 * D * hidden          # two matmuls, 2 flops per multiply-add
    if E is None:
        f = tokens * per_expert
        return {"flops": f, "all_expert_flops": f, "router_flops": 0}
    all_experts = tokens * E * per_expert
    router = tokens * 2 * D * E
    active = tokens * k * per_expert + router
    return {"flops": active, "all_expert_flops": all_experts, "router_flops": router}


@dataclass
class BenchConfig:
    P: int = 8
    D: int = 256
    heads: int = 8
    radius: int = 3
    E: int = 8
    k: int = 2
    expert_hidden: int = 1024
    dense_hidden: int | None = None          # defaults to k * expert_hidden
    measure_max_tokens: int = 1024           # wall-clock measured only at or below this size
    repeats: int = 1


def bench(resolutions, cfg: BenchConfig = BenchConfig(), modes=BENCH_MODES, measure: bool = True) -> list[dict]:
    """Analytic (and where cheap, measured) cost of one transformer block per resolution."""
    from .attention import AttentionConfig
    from .model import Block

    rows = []
    dense_hidden = cfg.dense_hidden or cfg.k * cfg.expert_hidden
    for res in resolutions:
        if res % cfg.P:
            raise HarnessError(f"resolution {res} not divisible by patch size {cfg.P}")
        Hp = Wp = res // cfg.P
        N = Hp * Wp
        for mode in modes:
            attn_mode, ffn_mode = mode.split("+")
            a = attention_cost(Hp, Wp, cfg.D, cfg.heads, cfg.radius, attn_mode)
            f = (ffn_cost(N, cfg.D, cfg.expert_hidden, cfg.E, cfg.k) if ffn_mode == "moe"
                 else ffn_cost(N, cfg.D, dense_hidden))
            measured = ""
            if measure and N <= cfg.measure_max_tokens:
                mcfg = ModelConfig(H=res, W=res, P=cfg.P, D=cfg.D, L=1, F=1, heads=cfg.heads,
                                   radius=cfg.radius, attention=attn_mode, moe=ffn_mode == "moe",
                                   E=cfg.E, k=cfg.k, expert_hidden=cfg.expert_hidden,
                                   dense_hidden=dense_hidden)
                block = Block(mcfg, np.random.default_rng(0))
                x = tc.Tensor(np.random.default_rng(1).normal(size=(1, 1, Hp, Wp, cfg.D)))
                mod = tc.Tensor(np.zeros((1, 3, 2, cfg.D)))
                with tc.no_grad():
                    block(x, mod, 0)
                    t0 = time.perf_counter()
                    for _ in range(cfg.repeats):
                        block(x, mod, 0)
                    measured = 1e3 * (time.perf_counter() - t0) / cfg.repeats
            rows.append({
                "resolution": res, "mode": mode, "tokens": N,
                "attn_score_flops": a["score_flops"], "attn_flops": a["flops"],
                "ffn_flops": f["flops"], "ffn_all_expert_flops": f["all_expert_flops"],
                "total_flops": a["flops"] + f["flops"], "peak_score_memory": a["peak_score_memory"],
                "measured_ms": measured,
            })
    return rows


def write_rows(rows: list[dict], path, columns: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
