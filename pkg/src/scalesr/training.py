"""Two-stage training: deterministic U-Net first, residual diffusion second."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .conservation import ConservationSpec, conserve_pipeline
from .data import (
    DatasetConfig, StormParams, build_samples, fold_tile_ids, load_region, prepare_tiles,
    synthesize_region,
)
from .diffusion import Conditioning, NoiseSchedule, sample_ensemble, training_loss
from .grid import SRFactors, upsample_bicubic, upsample_nearest
from .metrics import EnsembleForecast, evaluate
from .nets import DetUNet, DifUNet, UNetConfig, load_weights, save_weights

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    epochs: int = 80
    early_stop_patience: int = 8
    batch_size: int = 12
    mc_activation_epoch: int = 20
    seed: int = 0
    fold_id: int = 0

    def __post_init__(self):
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if not 0 <= self.early_stop_patience < self.epochs:
            raise ValueError("need 0 <= early_stop_patience < epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(epoch, cfg: TrainConfig):
    """``lr_init * (1 + cos(pi * epoch / epochs)) / 2``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs}")
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to rebuild data, networks and training for one run."""

    factors: str = "4x2"
    context_len: int = 4
    fold: int = 0
    seed: int = 0
    data: DatasetConfig = DatasetConfig()
    storms: StormParams = StormParams()
    data_seed: int = 0
    data_dir: str | None = None
    topo_dir: str | None = None
    n_frames: int = 240
    n_train_frames: int = 160
    sample_stride: int | None = None
    max_train_samples: int | None = None
    max_val_samples: int | None = None
    max_test_samples: int | None = None
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 2, 4)
    window_sizes: tuple = (3, 3, 1, 1, 1)
    heads: int = 4
    emb_dim: int = 128
    attention: bool = True
    skip_bicubic: bool = True
    scale_residuals: bool = True
    schedule: NoiseSchedule = NoiseSchedule(200)
    conservation: ConservationSpec = ConservationSpec.linear(1e-2)
    det_train: TrainConfig = TrainConfig()
    dif_train: TrainConfig = TrainConfig()
    members: int = 3
    prediction: str = "velocity"
    deterministic_only: bool = False
    sample_batch: int = 64

    @property
    def sr(self) -> SRFactors:
        return SRFactors.parse(self.factors)

    def net_config(self, kind):
        return UNetConfig(
            kind=kind, context_len=self.context_len, out_frames=self.sr.T,
            base_channels=self.base_channels, channel_mults=tuple(self.channel_mults),
            window_sizes=tuple(self.window_sizes), heads=self.heads, attention=self.attention,
            steps=self.schedule.J, emb_dim=self.emb_dim,
            skip_bicubic=self.skip_bicubic and kind == "det")

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                asdict(v) if hasattr(v, "__dataclass_fields__") else v)
            if isinstance(d[f.name], tuple):
                d[f.name] = list(d[f.name])
        d["storms"]["wind"] = list(d["storms"]["wind"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {
            "data": lambda x: DatasetConfig(**x),
            "storms": lambda x: StormParams(**{**x, "wind": tuple(x.get("wind", (0.8, 0.5)))}),
            "schedule": NoiseSchedule.from_dict,
            "conservation": ConservationSpec.from_dict,
            "det_train": lambda x: TrainConfig(**x),
            "dif_train": lambda x: TrainConfig(**x),
        }
        for k, make in nested.items():
            if k in d and isinstance(d[k], dict):
                d[k] = make(d[k])
        for k in ("channel_mults", "window_sizes"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def merged(self, overrides: dict):
        """Deep-merge ``overrides`` into this config."""
        return RunConfig.from_dict(deep_merge(self.to_dict(), overrides))


def deep_merge(base: dict, over: dict):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


PRESETS = {
    "paper": RunConfig(
        data=DatasetConfig(H=100, W=100),
        n_frames=2 * 8760, n_train_frames=8760,
        schedule=NoiseSchedule(1000),
        det_train=TrainConfig(1e-4, 80, 8, 12, 20),
        dif_train=TrainConfig(1e-4, 80, 8, 12, 20),
    ),
    "desk": RunConfig(
        data=DatasetConfig(H=40, W=40),
        n_frames=240, n_train_frames=160,
        schedule=NoiseSchedule(200),
        det_train=TrainConfig(1e-4, 30, 8, 8, 8),
        dif_train=TrainConfig(1e-4, 30, 8, 8, 8),
    ),
}


def configure_threads(default=1):
    """Cap intra-op threads via ``SCALESR_THREADS`` (single thread by default)."""
    n = int(os.environ.get("SCALESR_THREADS", default))
    torch.set_num_threads(max(1, n))
    return n


# ------------------------------------------------------------------ data assembly


@dataclass
class SampleTensors:
    """Stacked model inputs for a list of samples (float32 torch, float64 numpy)."""

    context: torch.Tensor   # (N, L, H, W) bicubic context
    topography: torch.Tensor  # (N, 1, H, W)
    target: torch.Tensor    # (N, T, H, W)
    lr_last: torch.Tensor   # (N, h, w)
    tile_ids: np.ndarray
    times: np.ndarray
    lr_context: np.ndarray | None = None  # (N, L, h, w)

    @classmethod
    def from_samples(cls, samples, dtype=torch.float32):
        if not samples:
            raise ValueError("no samples")
        f = samples[0].factors
        ctx = np.stack([upsample_bicubic(s.lr_context.frames, f) for s in samples])
        topo = np.stack([s.topography[None] for s in samples])
        tgt = np.stack([s.hr_target.frames for s in samples])
        lr = np.stack([s.lr_context.frames[-1] for s in samples])
        t = lambda a: torch.as_tensor(a, dtype=dtype)
        return cls(t(ctx), t(topo), t(tgt), torch.as_tensor(lr, dtype=torch.float64),
                   np.array([s.tile_id for s in samples]), np.array([s.time for s in samples]),
                   np.stack([s.lr_context.frames for s in samples]))

    def __len__(self):
        return self.target.shape[0]

    @property
    def det_input(self):
        return torch.cat([self.context, self.topography], dim=1)

    @property
    def bicubic_last(self):
        return self.context[:, -1:]

    def conditioning(self, det_mean):
        return Conditioning(det_mean, self.bicubic_last, self.context)


def _thin(samples, limit):
    if limit is None or len(samples) <= limit:
        return samples
    idx = np.linspace(0, len(samples) - 1, limit).round().astype(int)
    return [samples[i] for i in idx]


@dataclass
class Experiment:
    cfg: RunConfig
    train: SampleTensors
    val: SampleTensors
    test: SampleTensors
    cap_value: float
    train_tiles: list
    held_out_tiles: list


def prepare_experiment(cfg: RunConfig) -> Experiment:
    """Data for one fold: train/validation from the training period, test after it.

    Training uses every tile outside the held-out fold; validation and test
    use the held-out fold's tiles.
    """
    dc = cfg.data
    folds = fold_tile_ids(dc.grid_rows, dc.grid_cols, dc.fold_count)
    if cfg.fold not in folds:
        raise ValueError(f"fold {cfg.fold} not in 0..{dc.fold_count - 1}")
    held = folds[cfg.fold]
    if cfg.data_dir:
        raw = load_region(cfg.data_dir, cfg.topo_dir, dc)
    else:
        raw = synthesize_region(cfg.data_seed, cfg.n_frames, dc, cfg.storms)
    train_ids = [t.tile_id for t in raw if t.tile_id not in held]
    prep = prepare_tiles(raw, cfg.n_train_frames, dc, train_ids)
    f, L = cfg.sr, cfg.context_len

    def collect(ids, start, stop):
        out = []
        for t in prep.tiles:
            if t.tile_id in ids:
                out += build_samples(t, f, L, cfg.sample_stride, start, stop)
        return out

    train = _thin(collect(train_ids, 0, cfg.n_train_frames), cfg.max_train_samples)
    val = _thin(collect(held, 0, cfg.n_train_frames), cfg.max_val_samples)
    test = _thin(collect(held, cfg.n_train_frames, None), cfg.max_test_samples)
    assert not set(s.tile_id for s in train) & set(s.tile_id for s in val)
    return Experiment(cfg, SampleTensors.from_samples(train), SampleTensors.from_samples(val),
                      SampleTensors.from_samples(test), prep.cap_value, train_ids, held)


# ------------------------------------------------------------------ records


@dataclass
class RunRecord:
    stage: str
    epochs: list = field(default_factory=list)
    stop_reason: str = "completed"
    best_epoch: int = -1
    best_val: float = float("inf")
    checkpoint: str | None = None

    def log_epoch(self, **row):
        self.epochs.append(row)

    @property
    def train_losses(self):
        return [e["train_loss"] for e in self.epochs]

    def jsonl(self):
        return "".join(json.dumps({"stage": self.stage, **e}) + "\n" for e in self.epochs)

    def summary(self):
        return {"stage": self.stage, "stop_reason": self.stop_reason,
                "best_epoch": self.best_epoch, "best_val": self.best_val,
                "epochs_run": len(self.epochs), "checkpoint": self.checkpoint}


class EarlyStopping:
    """Tracks the best validation loss and keeps a copy of the best weights.

    ``step`` returns True once ``patience + 1`` consecutive epochs fail to
    improve on the best loss.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.bad = 0
        self.state = None

    def step(self, loss, model=None, epoch=None):
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            if model is not None:
                self.state = copy.deepcopy(model.state_dict())
            return False
        self.bad += 1
        return self.bad > self.patience

    def restore(self, model):
        if self.state is not None:
            model.load_state_dict(self.state)


# ------------------------------------------------------------------ stage loops


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _det_forward(det, x, lr_last, f, spec, epoch):
    raw = det(x)
    return conserve_pipeline(raw, lr_last.to(raw.dtype), f, spec, epoch=epoch)


def _fit(model, stage, cfg: TrainConfig, batch_loss, val_loss, n_train):
    """Shared epoch loop: Adam with a cosine lr, early stopping, divergence abort."""
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999), eps=1e-8)
    stopper = EarlyStopping(cfg.early_stop_patience)
    record = RunRecord(stage)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        total, seen = 0.0, 0
        for idx in _batches(n_train, cfg.batch_size, gen):
            opt.zero_grad()
            loss = batch_loss(idx, epoch, gen)
            if not torch.isfinite(loss):
                record.stop_reason = "diverged"
                break
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if record.stop_reason == "diverged":
            log.error("%s: non-finite loss at epoch %d", stage, epoch)
            break
        model.eval()
        with torch.no_grad():
            v = float(val_loss(epoch))
        record.log_epoch(epoch=epoch, train_loss=total / seen, val_loss=v, lr=lr,
                         wall=time.perf_counter() - t0)
        log.info("%s epoch %d: train %.4e val %.4e lr %.2e", stage, epoch, total / seen, v, lr)
        if stopper.step(v, model, epoch):
            record.stop_reason = "early_stop"
            break
    stopper.restore(model)
    record.best_epoch, record.best_val = stopper.best_epoch, stopper.best
    return record


def train_deterministic(exp: Experiment, cfg: TrainConfig | None = None,
                        net_cfg: UNetConfig | None = None, spec: ConservationSpec | None = None):
    """Fit the mean predictor by pixel MSE; the conservation step joins at its activation epoch.

    Validation always applies the conservation step, matching inference.
    """
    rc = exp.cfg
    cfg = cfg or rc.det_train
    net_cfg = net_cfg or rc.net_config("det")
    spec = rc.conservation if spec is None else spec
    spec = replace(spec, activation_epoch=cfg.mc_activation_epoch)
    f = rc.sr
    torch.manual_seed(cfg.seed)
    det = DetUNet(net_cfg)
    x_tr, x_va = exp.train.det_input, exp.val.det_input

    def batch_loss(idx, epoch, gen):
        out = _det_forward(det, x_tr[idx], exp.train.lr_last[idx], f, spec, epoch)
        return ((out - exp.train.target[idx]) ** 2).mean()

    def val_loss(epoch):
        out = predict_det(det, exp.val, f, spec)
        return ((out - exp.val.target) ** 2).mean()

    record = _fit(det, "det", cfg, batch_loss, val_loss, len(exp.train))
    det.eval()
    return det, record


@torch.no_grad()
def predict_det(det, data: SampleTensors, f: SRFactors, spec: ConservationSpec | None,
                batch_size=32):
    """Deterministic mean ``D`` with the conservation step applied (when given)."""
    det.eval()
    outs = []
    x = data.det_input
    for i in range(0, len(data), batch_size):
        raw = det(x[i:i + batch_size])
        if spec is not None:
            raw = conserve_pipeline(raw, data.lr_last[i:i + batch_size].to(raw.dtype), f, spec)
        outs.append(raw)
    return torch.cat(outs)


def train_diffusion(exp: Experiment, det, cfg: TrainConfig | None = None,
                    net_cfg: UNetConfig | None = None, schedule: NoiseSchedule | None = None,
                    spec: ConservationSpec | None = None, prediction: str | None = None):
    """Fit the residual velocity model on ``r0 = y - D`` with ``D`` from the frozen mean net."""
    rc = exp.cfg
    cfg = cfg or rc.dif_train
    net_cfg = net_cfg or rc.net_config("dif")
    schedule = schedule or rc.schedule
    spec = rc.conservation if spec is None else spec
    prediction = prediction or rc.prediction
    f = rc.sr
    for p in det.parameters():
        p.requires_grad_(False)
        p.grad = None
    d_tr = predict_det(det, exp.train, f, spec)
    d_va = predict_det(det, exp.val, f, spec)
    cond_tr, cond_va = exp.train.conditioning(d_tr), exp.val.conditioning(d_va)
    r0_tr, r0_va = exp.train.target - d_tr, exp.val.target - d_va
    torch.manual_seed(cfg.seed)
    dif = DifUNet(net_cfg)
    if rc.scale_residuals:
        dif.residual_scale.fill_(float(r0_tr.double().std()))

    def batch_loss(idx, epoch, gen):
        return training_loss(dif, r0_tr[idx], cond_tr.index(idx), schedule, gen,
                             prediction=prediction)

    def val_loss(epoch):
        # same noise draws every epoch so validation losses are comparable
        gen = torch.Generator().manual_seed(cfg.seed + 7919)
        tot = 0.0
        for i in range(0, len(exp.val), 32):
            sl = slice(i, i + 32)
            n = r0_va[sl].shape[0]
            tot += training_loss(dif, r0_va[sl], cond_va.index(sl), schedule, gen,
                                 prediction=prediction).item() * n
        return tot / len(exp.val)

    record = _fit(dif, "dif", cfg, batch_loss, val_loss, len(exp.train))
    dif.eval()
    return dif, record


# ------------------------------------------------------------------ evaluation


def run_baselines(data: SampleTensors, f: SRFactors, seed=0):
    """Bicubic and nearest upsampling of the last LR frame, repeated over the T outputs."""
    lr = data.lr_last.numpy()
    target = data.target.double().numpy()
    out = {}
    for name, up in (("bicubic", upsample_bicubic), ("nearest", upsample_nearest)):
        pred = np.repeat(up(lr, f)[:, None], f.T, axis=1)
        out[name] = evaluate(EnsembleForecast.deterministic(pred, target), seed)
    return out


def ensemble_for(det, dif, data: SampleTensors, rc: RunConfig, K, seed, spec=None):
    """Sample ``K`` members for every item of ``data``; returns ``(members, D)``."""
    spec = rc.conservation if spec is None else spec
    f = rc.sr
    d = predict_det(det, data, f, spec)
    cond = data.conditioning(d)
    members = sample_ensemble(dif, cond, data.lr_last.numpy(), f, rc.schedule, K, seed,
                              spec=spec, prediction=rc.prediction, batch_size=rc.sample_batch)
    return members, d.double().numpy()


# ------------------------------------------------------------------ run directories


def save_run(run_dir, rc: RunConfig, det, dif=None, records=(), extra=None):
    run = Path(run_dir)
    (run / "weights").mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    save_weights(run / "weights" / "det.bin", det, rc.net_config("det"))
    if dif is not None:
        save_weights(run / "weights" / "dif.bin", dif, rc.net_config("dif"))
    with open(run / "record.jsonl", "w") as fh:
        for r in records:
            fh.write(r.jsonl())
    summary = {"records": [r.summary() for r in records], **(extra or {})}
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def load_run(run_dir):
    run = Path(run_dir)
    rc = RunConfig.from_dict(json.loads((run / "config.json").read_text()))
    det, _ = load_weights(run / "weights" / "det.bin", rc.net_config("det"))
    dif = None
    if (run / "weights" / "dif.bin").exists():
        dif, _ = load_weights(run / "weights" / "dif.bin", rc.net_config("dif"))
    return rc, det.eval(), (dif.eval() if dif is not None else None)


def train_run(rc: RunConfig, run_dir=None, exp: Experiment | None = None):
    """Both stages (or the mean net alone when ``deterministic_only``).

    A prepared ``exp`` is reused for its data only; ``rc`` drives the models.
    """
    exp = replace(exp, cfg=rc) if exp is not None else prepare_experiment(rc)
    log.info("fold %d: %d train / %d val / %d test samples",
             rc.fold, len(exp.train), len(exp.val), len(exp.test))
    det, rec_det = train_deterministic(exp)
    records = [rec_det]
    dif = None
    if not rc.deterministic_only:
        dif, rec_dif = train_diffusion(exp, det)
        records.append(rec_dif)
    if run_dir is not None:
        rec_det.checkpoint = "weights/det.bin"
        if dif is not None:
            records[1].checkpoint = "weights/dif.bin"
        save_run(run_dir, rc, det, dif, records, {"cap_value": exp.cap_value})
    return det, dif, records, exp
