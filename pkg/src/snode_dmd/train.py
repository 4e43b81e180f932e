"""Minibatched training with the teacher-forcing to autoregressive curriculum.

Every random choice (window order, teacher/autoregressive draw) comes from
a generator keyed by ``(seed, epoch, ...)``, so a run resumed from a
checkpoint replays exactly the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffengine as de
from .core import Dataset, read_array, write_array, write_json
from .losses import LossWeights, recon_nll_lift, total_loss
from .model import AUTOREGRESSIVE, TEACHER, ModelConfig, lift_field, unroll
from .nets import NetConfig, init_params, positional_encode
from .sde import IntegrationError

LOG_COLUMNS = ("epoch", "eps", "loss_total", "loss_recon", "loss_kl", "loss_cons", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    rank: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    window: int = 8
    substeps: int = 5
    tau: float | None = None
    L: int = 6
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    freeze_drift: bool = False
    mode_weight_decay: float = 0.0
    lr_min: float | None = None
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.window < 2:
            raise ValueError("window must cover at least one transition")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.mode_weight_decay < 0:
            raise ValueError("mode_weight_decay must be >= 0")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr:
            raise ValueError("lr_min must lie in [0, lr]")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def net_config(self) -> NetConfig:
        extra = {k: tuple(v) if isinstance(v, list) else v for k, v in self.net.items()}
        return NetConfig(rank=self.rank, L=self.L, **extra)

    def model_config(self, ds: Dataset) -> ModelConfig:
        tau = 0.0 if self.freeze_drift and self.tau is None else self.tau
        return ModelConfig(net=self.net_config(), dt=float(ds.dt), substeps=self.substeps,
                           tau=tau, complex_data=bool(ds.is_complex))


def curriculum_epsilon(epoch: int, total: int) -> float:
    """Teacher-forcing probability, linear from 1 at epoch 0 to 0 at the last epoch."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if total == 1:
        return 1.0
    return 1.0 - epoch / (total - 1)


def select_mode(epsilon: float, rng) -> str:
    """One Bernoulli(epsilon) draw deciding the mode of a whole batch."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    return TEACHER if rng.random() < epsilon else AUTOREGRESSIVE


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def clip_by_norm(g, max_norm):
    n = float(np.linalg.norm(g))
    if max_norm and n > max_norm:
        return g * (max_norm / n), n
    return g, n


def adam_update(x, g, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    return x - lr * mhat / (np.sqrt(vhat) + eps)


# -- data windows -------------------------------------------------------------------

@dataclass
class Sequence:
    y: np.ndarray          # (p, m, 2) real lift
    times: np.ndarray
    n_train: int           # frames usable for training windows


def _as_list(data):
    if isinstance(data, Dataset):
        return [data]
    data = list(data)
    if not data:
        raise ValueError("no datasets given")
    return data


def prepare(datasets, cfg: TrainConfig):
    """Split each sequence into a training head and a validation tail."""
    datasets = _as_list(datasets)
    ref = datasets[0]
    seqs = []
    for ds in datasets:
        if ds.observations.shape[0] < 2:
            raise ValueError("dataset needs at least 2 snapshots")
        if not np.array_equal(ds.sensor_indices, ref.sensor_indices) or ds.dt != ref.dt:
            raise ValueError("all training sequences must share sensors and dt")
        p = ds.observations.shape[0]
        n_val = int(math.floor(cfg.val_fraction * (p - 1)))
        if p - n_val < 2:
            n_val = 0
        seqs.append(Sequence(lift_field(ds.observations), np.asarray(ds.times, float), p - n_val))
    return ref, seqs


def _windows(seqs, H):
    out = []
    for i, s in enumerate(seqs):
        h = min(H, s.n_train)
        out.extend((i, st, h) for st in range(s.n_train - h + 1))
    return out


def _batch(seqs, items, feats):
    ys = np.stack([seqs[i].y[st:st + h] for i, st, h in items])
    t0 = np.array([seqs[i].times[st] for i, st, _ in items])
    return {"y": ys, "feats": feats, "t0": t0}


# -- checkpoints --------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: de.ParamStore
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    epoch: int = -1                # last completed epoch
    adam: AdamState | None = None
    history: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    sensor_coords: np.ndarray | None = None

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        adam = self.adam or AdamState.zeros(self.params.size)
        arrays = {"params": write_array(path / "params.bin", self.params.flat, False),
                  "adam_m": write_array(path / "adam_m.bin", adam.m, False),
                  "adam_v": write_array(path / "adam_v.bin", adam.v, False)}
        if self.sensor_coords is not None:
            arrays["sensor_coords"] = write_array(path / "sensor_coords.bin",
                                                  self.sensor_coords, False)
        manifest = {
            "version": 1, "epoch": self.epoch, "adam_t": adam.t,
            "layout": self.params.layout(), "train_config": self.train_cfg.to_dict(),
            "model_config": self.model_cfg.to_dict(), "history": self.history,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "best_epoch": self.best_epoch, "arrays": arrays,
        }
        write_json(path / "manifest.json", manifest)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        man = json.loads((path / "manifest.json").read_text())
        arrays = man["arrays"]
        params = de.ParamStore.from_layout(man["layout"], read_array(path, arrays["params"]))
        adam = AdamState(read_array(path, arrays["adam_m"]), read_array(path, arrays["adam_v"]),
                         int(man["adam_t"]))
        coords = read_array(path, arrays["sensor_coords"]) if "sensor_coords" in arrays else None
        best = man.get("best_val")
        return cls(params, TrainConfig.from_dict(man["train_config"]),
                   ModelConfig.from_dict(man["model_config"]), int(man["epoch"]), adam,
                   man.get("history", []), math.inf if best is None else float(best),
                   int(man.get("best_epoch", -1)), coords)


# -- training -----------------------------------------------------------------------

def _mode_weight_mask(params: de.ParamStore):
    mask = np.zeros(params.size)
    for name in params.names:
        if name.startswith("mode.W"):
            mask[params.segment(name)] = 1.0
    return mask


def _drift_mask(params: de.ParamStore):
    mask = np.ones(params.size)
    for name in params.names:
        if name.startswith("drift."):
            mask[params.segment(name)] = 0.0
    return mask


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr``, or cosine decay from ``lr`` to ``lr_min`` when set."""
    if cfg.lr_min is None or cfg.epochs == 1:
        return cfg.lr
    c = 0.5 * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * c


def validation_nll(params, seqs, feats, mcfg: ModelConfig) -> float:
    """Teacher-forced reconstruction NLL over the held-out tail of every sequence."""
    P = {n: de.Tensor(params[n]) for n in params.names}
    vals = []
    for s in seqs:
        p = s.y.shape[0]
        if s.n_train == p:
            continue
        y = s.y[s.n_train - 1:][None]
        u = unroll(P, y, feats, [s.times[s.n_train - 1]], mcfg, TEACHER, encode_targets=False)
        for k in range(len(u.pred_mean)):
            vals.append(float(recon_nll_lift(y[:, k + 1], u.pred_mean[k], u.pred_var[k],
                                             mcfg.complex_data).value))
    return float(np.mean(vals)) if vals else math.nan


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in LOG_COLUMNS])


def train(data, cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None,
          until_epoch: int | None = None, log=None) -> Checkpoint:
    """Optimize ``total_loss`` over windows of one or more sequences.

    Returns the final checkpoint; its ``best`` attribute holds the
    checkpoint with the lowest validation NLL. With ``out_dir`` set, writes
    ``final/``, ``best/`` and ``train_log.csv`` there. ``until_epoch``
    stops early (exclusive) without changing the schedule, which is how
    interrupted runs are produced for resume tests.
    """
    ref, seqs = prepare(data, cfg)
    mcfg = cfg.model_config(ref)
    coords = ref.sensors.coords
    feats = positional_encode(coords, mcfg.net.L)
    windows = _windows(seqs, cfg.window)
    if not windows:
        raise ValueError("no training windows")

    if resume is None:
        params = init_params(mcfg.net, cfg.seed)
        ckpt = Checkpoint(params, cfg, mcfg, -1, AdamState.zeros(params.size),
                          sensor_coords=np.array(coords))
    else:
        ckpt = Checkpoint(resume.params.copy(), cfg, mcfg, resume.epoch,
                          AdamState(resume.adam.m.copy(), resume.adam.v.copy(), resume.adam.t),
                          list(resume.history), resume.best_val, resume.best_epoch,
                          np.array(coords))
    params = ckpt.params
    mask = _drift_mask(params) if cfg.freeze_drift else None
    if mask is not None:
        params.flat[mask == 0] = 0.0
    # decoupled decay on the mode network's weight matrices only
    decay = cfg.lr * cfg.mode_weight_decay * _mode_weight_mask(params) \
        if cfg.mode_weight_decay else None
    best = None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and resume is not None and (out / "best").exists():
        best = Checkpoint.load(out / "best")

    def objective(leaves, batch, mode):
        return total_loss(leaves, batch, cfg.weights, mcfg, mode)

    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    for epoch in range(ckpt.epoch + 1, stop):
        t_start = time.perf_counter()
        eps = curriculum_epsilon(epoch, cfg.epochs)
        lr = learning_rate(epoch, cfg)
        order = de.keyed_rng(cfg.seed, 11, epoch).permutation(len(windows))
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            items = [windows[i] for i in order[start:start + cfg.batch_size]]
            # windows of unequal length (short sequences) are grouped by length
            groups = {}
            for it in items:
                groups.setdefault(it[2], []).append(it)
            mode = select_mode(eps, de.keyed_rng(cfg.seed, 12, epoch, b))
            grad = np.zeros(params.size)
            terms = np.zeros(4)
            try:
                for h, group in sorted(groups.items()):
                    batch = _batch(seqs, group, feats)
                    res = de.evaluate_with_gradients(
                        lambda lv, inp, _s: objective(lv, inp, mode), params, batch)
                    w = len(group) / len(items)
                    grad += w * res.grads
                    terms += w * np.array([res.loss, res.aux["recon"], res.aux["kl"],
                                           res.aux["cons"]])
            except (de.NonFiniteError, IntegrationError, FloatingPointError) as exc:
                diag = f"non-finite loss at epoch {epoch}, batch {b} ({mode}): {exc}"
                if out is not None:
                    ckpt.save(out / "last_good")
                raise TrainingError(diag) from exc
            if mask is not None:
                grad *= mask
            grad, _ = clip_by_norm(grad, cfg.clip_norm)
            new = adam_update(params.flat, grad, ckpt.adam, lr, cfg.betas, cfg.adam_eps)
            if decay is not None:
                new -= (lr / cfg.lr) * decay * params.flat
            params.flat[:] = new
            sums += terms
            n_batches += 1
        mean = sums / max(n_batches, 1)
        row = {"epoch": epoch, "eps": eps, "loss_total": mean[0], "loss_recon": mean[1],
               "loss_kl": mean[2], "loss_cons": mean[3],
               "wall_ms": round(1000 * (time.perf_counter() - t_start), 3)}
        ckpt.history.append(row)
        ckpt.epoch = epoch
        val = validation_nll(params, seqs, feats, mcfg)
        score = val if math.isfinite(val) else mean[0]
        if score < ckpt.best_val:
            ckpt.best_val, ckpt.best_epoch = float(score), epoch
            best = Checkpoint(params.copy(), cfg, mcfg, epoch, None, [], ckpt.best_val, epoch,
                              np.array(coords))
            if out is not None:
                best.save(out / "best")
        if log is not None:
            log(row)
    if best is None:
        best = Checkpoint(params.copy(), cfg, mcfg, ckpt.epoch, None, [], ckpt.best_val,
                          ckpt.best_epoch, np.array(coords))
    ckpt.best = best
    if out is not None:
        ckpt.save(out / "final")
        _write_log(out / "train_log.csv", ckpt.history)
    return ckpt


def history_array(ckpt: Checkpoint, column: str = "loss_total") -> np.ndarray:
    return np.array([row[column] for row in ckpt.history])
