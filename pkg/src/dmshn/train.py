"""Two-stage training protocol and the stacked fine-tune, with checkpoints.

Stage 1 optimizes L1 + alpha * (1 - SSIM) from fresh weights; stage 2
continues a stage-1 checkpoint under the multi-scale loss; stack-finetune
duplicates one trained network into both halves of the stacked model and
fine-tunes the composition end to end. Stage transitions reset the optimizer
moments and the learning-rate schedule; --resume continues the same stage
bitwise from the stored optimizer state.

Every run appends one JSON object per step to <run_dir>/train.log and echoes
the resolved config to <run_dir>/config.json. A NaN/Inf loss aborts the run
(never silently skipped).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_store
from . import data as data_mod
from . import losses, model as model_mod
from .errors import CheckpointStageMismatch, ConfigError, EmptyDataset, NonFiniteLoss
from .model import DmshnParams, attach_depth, build_pyramid, dmshn_forward, stacked_forward
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .tensor import Rng, Tape, Tensor, backward

STAGES = ("stage1", "stage2", "stack_finetune")


@dataclass
class TrainConfig:
    stage: str
    total_steps: int
    run_dir: str
    batch_size: int = 2
    seed: int = 0
    alpha: float = 0.1
    stage2_variant: str = "ms_ssim_only"
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    lr_kind: str = "cosine"
    eval_every: int = 0
    checkpoint_every: int = 0
    channels: tuple = (32, 64, 128)
    use_level_residuals: bool = True
    depth_input: bool = False
    convt_kernel: int = 4
    augment: bool = True
    train_resolution: tuple = (1024, 1024)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}; got {self.stage!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.stage2_variant not in losses.STAGE2_VARIANTS:
            raise ConfigError(f"unknown stage2_variant: {self.stage2_variant!r}")
        self.channels = tuple(self.channels)
        self.train_resolution = tuple(self.train_resolution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["train_resolution"] = list(self.train_resolution)
        return d

    def schedule(self) -> LrSchedule:
        return LrSchedule(total_steps=self.total_steps, lr_start=self.lr_start,
                          lr_end=self.lr_end, kind=self.lr_kind)


class TrainableModel:
    """One or two DMSHN parameter sets plus the forward that joins them."""

    def __init__(self, kind: str, nets):
        assert kind in ("single", "stacked")
        self.kind = kind
        self.nets = nets

    @classmethod
    def fresh(cls, cfg: TrainConfig, kind: str) -> "TrainableModel":
        n = 2 if kind == "stacked" else 1
        nets = [DmshnParams(cfg.channels, cfg.use_level_residuals, cfg.depth_input,
                            cfg.convt_kernel, rng=Rng(cfg.seed, stream=(7 << 60) + i))
                for i in range(n)]
        return cls(kind, nets)

    def named_params(self):
        if self.kind == "single":
            yield from self.nets[0].named_params()
        else:
            for i, net in enumerate(self.nets):
                yield from net.named_params(f"net{i + 1}.")

    def forward(self, x: Tensor, depth: Tensor | None = None,
                clamp_output: bool = False) -> Tensor:
        pyr = build_pyramid(x)
        if depth is not None:
            pyr = attach_depth(pyr, depth)
        if self.kind == "single":
            return dmshn_forward(pyr, self.nets[0], clamp_output=clamp_output)
        return stacked_forward(pyr, self.nets[0], self.nets[1],
                               clamp_output=clamp_output, depth=depth)

    def model_meta(self) -> dict:
        meta = self.nets[0].config()
        meta["kind"] = self.kind
        return meta


def _config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str, model: TrainableModel, state: AdamState,
                    cfg: TrainConfig, step: int) -> None:
    tensors = {}
    for name, p in model.named_params():
        tensors[name] = p.data
        tensors[name + ".adam_m"] = state.m[name]
        tensors[name + ".adam_v"] = state.v[name]
    meta = {
        "stage": cfg.stage,
        "step": step,
        "adam_t": state.t,
        "model": model.model_meta(),
        "config_hash": _config_hash(cfg),
        "schedule": {"total_steps": cfg.total_steps, "lr_start": cfg.lr_start,
                     "lr_end": cfg.lr_end, "kind": cfg.lr_kind},
    }
    ckpt_store.save(tensors, meta, path)


def load_model(path: str, expect_kind: str | None = None):
    """Rebuild a TrainableModel (and raw tensors/meta) from a checkpoint."""
    tensors, meta = ckpt_store.load(path)
    mm = meta["model"]
    if expect_kind and mm["kind"] != expect_kind:
        raise CheckpointStageMismatch(
            f"{path}: checkpoint holds a {mm['kind']} model, expected {expect_kind}")
    n = 2 if mm["kind"] == "stacked" else 1
    nets = [DmshnParams(mm["channels"], mm["use_level_residuals"], mm["depth_input"],
                        mm["convt_kernel"]) for _ in range(n)]
    model = TrainableModel(mm["kind"], nets)
    ckpt_store.validate_against(tensors, model.named_params(), path)
    for name, p in model.named_params():
        p.data[...] = tensors[name]
    return model, tensors, meta


def _restore_moments(model: TrainableModel, tensors: dict, meta: dict) -> AdamState:
    state = AdamState(model.named_params())
    state.t = int(meta["adam_t"])
    for name in state.m:
        state.m[name][...] = tensors[name + ".adam_m"]
        state.v[name][...] = tensors[name + ".adam_v"]
    return state


class _RunLogger:
    def __init__(self, run_dir: str, cfg: TrainConfig):
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        self.path = os.path.join(run_dir, "train.log")

    def log(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _loss_for_stage(cfg: TrainConfig, pred: Tensor, gt: Tensor) -> Tensor:
    if cfg.stage == "stage1":
        return losses.stage1_loss(pred, gt, cfg.alpha)
    return losses.stage2_loss(pred, gt, cfg.stage2_variant)


def evaluate_model(model: TrainableModel, dataset: data_mod.PairedDataset,
                   max_pairs: int = 8) -> dict:
    """Mean PSNR/SSIM over (up to) the first records, at train resolution."""
    psnrs, ssims = [], []
    for record in dataset.records[:max_pairs]:
        x, gt = data_mod.load_pair(record, dataset.train_resolution)
        depth = None
        if model.nets[0].depth_input:
            depth = Tensor(data_mod.load_depth(record)[None])
        pred = model.forward(Tensor(x[None]), depth=depth, clamp_output=True)
        gt_t = Tensor(gt[None])
        psnrs.append(losses.psnr(pred, gt_t))
        ssims.append(losses.ssim(pred, gt_t).item())
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def train_loop(cfg: TrainConfig, dataset: data_mod.PairedDataset,
               model: TrainableModel, state: AdamState, start_step: int,
               val_dataset: data_mod.PairedDataset | None = None) -> str:
    """Run steps [start_step, total_steps); returns the final checkpoint path."""
    if len(dataset) < cfg.batch_size:
        raise EmptyDataset(
            f"dataset has {len(dataset)} records, batch size is {cfg.batch_size}")
    bpe = data_mod.batches_per_epoch(dataset, cfg.batch_size)
    spec = data_mod.AugmentSpec() if cfg.augment else None
    schedule = cfg.schedule()
    logger = _RunLogger(cfg.run_dir, cfg)
    named = list(model.named_params())

    for step in range(start_step, cfg.total_steps):
        t0 = time.perf_counter()
        epoch, bidx = divmod(step, bpe)
        order = data_mod.epoch_order(dataset, cfg.seed, epoch)
        idx = order[bidx * cfg.batch_size:(bidx + 1) * cfg.batch_size]
        x, gt, depth = data_mod.make_batch(dataset, idx, cfg.seed, epoch, spec,
                                           with_depth=cfg.depth_input)
        lr = lr_at(schedule, step)
        with Tape():
            pred = model.forward(x, depth=depth)
            loss = _loss_for_stage(cfg, pred, gt)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NonFiniteLoss(f"loss is {loss_val} at step {step}")
        backward(loss)
        adam_step(named, state, lr)

        record = {"step": step, "lr": lr, "loss": loss_val,
                  "wall_ms": (time.perf_counter() - t0) * 1e3}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and val_dataset is not None:
            metrics = evaluate_model(model, val_dataset)
            record["val_psnr"] = metrics["psnr"]
            record["val_ssim"] = metrics["ssim"]
        logger.log(record)

        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(cfg.run_dir, f"ckpt-{step + 1:06d}.dmsn"),
                            model, state, cfg, step + 1)

    final = os.path.join(cfg.run_dir, "ckpt-final.dmsn")
    save_checkpoint(final, model, state, cfg, cfg.total_steps)
    return final


def _check_stage(meta: dict, allowed, path: str) -> None:
    if meta.get("stage") not in allowed:
        raise CheckpointStageMismatch(
            f"{path}: stage is {meta.get('stage')!r}, expected one of {allowed}")


def run_stage1(cfg: TrainConfig, dataset, val_dataset=None,
               resume_path: str | None = None) -> str:
    cfg = replace(cfg, stage="stage1")
    if resume_path:
        model, tensors, meta = load_model(resume_path, expect_kind="single")
        _check_stage(meta, ("stage1",), resume_path)
        state = _restore_moments(model, tensors, meta)
        start = int(meta["step"])
    else:
        model = TrainableModel.fresh(cfg, "single")
        state = AdamState(model.named_params())
        start = 0
    return train_loop(cfg, dataset, model, state, start, val_dataset)


def run_stage2(cfg: TrainConfig, dataset, ckpt_path: str, val_dataset=None,
               resume: bool = False) -> str:
    cfg = replace(cfg, stage="stage2")
    model, tensors, meta = load_model(ckpt_path, expect_kind="single")
    if resume:
        _check_stage(meta, ("stage2",), ckpt_path)
        state = _restore_moments(model, tensors, meta)
        start = int(meta["step"])
    else:
        _check_stage(meta, ("stage1",), ckpt_path)
        state = AdamState(model.named_params())
        start = 0
    return train_loop(cfg, dataset, model, state, start, val_dataset)


def run_stack_finetune(cfg: TrainConfig, dataset, ckpt_path: str, val_dataset=None,
                       resume: bool = False) -> str:
    cfg = replace(cfg, stage="stack_finetune")
    if resume:
        model, tensors, meta = load_model(ckpt_path, expect_kind="stacked")
        _check_stage(meta, ("stack_finetune",), ckpt_path)
        state = _restore_moments(model, tensors, meta)
        start = int(meta["step"])
        return train_loop(cfg, dataset, model, state, start, val_dataset)

    single, _, meta = load_model(ckpt_path, expect_kind="single")
    _check_stage(meta, ("stage1", "stage2"), ckpt_path)
    # both halves start from the same pretrained weights
    model = TrainableModel.fresh(cfg, "stacked")
    src = dict(single.nets[0].named_params())
    for net in model.nets:
        for name, p in net.named_params():
            p.data[...] = src[name].data
    state = AdamState(model.named_params())
    return train_loop(cfg, dataset, model, state, 0, val_dataset)
