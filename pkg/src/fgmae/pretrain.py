"""Pretraining loop: seeded data flow, feature targets, masked loss, AdamW
with linear warmup + cosine decay, and bit-exact checkpointing.

All randomness is derived from (seed, consumer name, step), so a run can be
checkpointed and resumed bitwise and two runs with the same config are
identical in deterministic mode.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as D
from . import features as F
from . import model as M
from . import optim as O
from .rng import Rng
from .tensor import Tensor, global_grad_norm


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries step/lr/grad-norm."""

    def __init__(self, step, lr, grad_norm):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}, "
                         f"grad_norm={grad_norm:.3e})")
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm


@dataclass
class PretrainConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    feature: F.FeatureSpec = field(default_factory=F.FeatureSpec)
    augment: D.AugmentationConfig = field(default_factory=D.AugmentationConfig)
    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    adam_betas: tuple = (0.9, 0.95)
    head_weights: tuple = (1.0, 1.0)
    grad_clip: float = 0.0       # 0 disables clipping
    seed: int = 0
    deterministic: bool = True
    checkpoint_interval: int = 0  # steps; 0 = only final

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup cannot exceed total epochs")

    def digest(self):
        blob = json.dumps(config_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_to_dict(cfg):
    d = asdict(cfg)
    d["feature"]["variant"] = cfg.feature.variant
    return d


def _resolve_head_dims(cfg):
    """Fill the model head width(s) from the feature spec if left at 0."""
    dims = cfg.feature.out_dims(cfg.model.in_channels, cfg.model.patch_size)
    if isinstance(dims, tuple):
        return cfg.model.with_(out_dims=dims[0], out_dims_2=dims[1])
    return cfg.model.with_(out_dims=dims, out_dims_2=0)


class Trainer:
    """Owns the model, optimizer state and data flow for one pretraining run."""

    def __init__(self, cfg, entries, data_dir, params_from=None):
        self.cfg = cfg
        self.model_cfg = _resolve_head_dims(cfg)
        self.entries = entries
        self.data_dir = data_dir
        self.locations = D.locations(entries)
        if not self.locations:
            raise ValueError("empty manifest")
        if cfg.augment.out_size != self.model_cfg.image_size:
            raise ValueError("augmentation output size must match the model "
                             "image size")
        self.rng = Rng(cfg.seed)
        if params_from is None:
            init_gen = self.rng.child("init").at(0)
            self.model = M.FgMae(self.model_cfg, init_gen)
        else:
            self.model = params_from
        self.opt = O.OptimState(lr=cfg.base_lr, beta1=cfg.adam_betas[0],
                                beta2=cfg.adam_betas[1],
                                weight_decay=cfg.weight_decay)
        self.opt.no_decay = {n for n in self.model.params
                             if ".ln" in n or ".norm." in n or n == "mask_token"}
        self.step = 0
        self.loss_log = []  # (step, lr, loss)

        self.steps_per_epoch = math.ceil(len(self.locations) / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.schedule = O.LrSchedule(base_lr=cfg.base_lr,
                                     warmup_steps=cfg.warmup_epochs * self.steps_per_epoch,
                                     total_steps=self.total_steps,
                                     min_lr=cfg.min_lr)

    # -- data ----------------------------------------------------------------

    def _epoch_order(self, epoch):
        gen = self.rng.child("order").at(epoch)
        return gen.permutation(len(self.locations))

    def _load_scene(self, entry):
        return D.read_tensor(os.path.join(self.data_dir, entry.path))

    def _batch_for_step(self, step):
        cfg = self.cfg
        epoch = step // self.steps_per_epoch
        k = step % self.steps_per_epoch
        order = self._epoch_order(epoch)
        idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
        images = []
        for j, loc_i in enumerate(idx):
            gen = self.rng.child("sample").at(step * cfg.batch_size + j)
            entry = D.select_season(self.entries, self.locations[loc_i], gen)
            img = self._load_scene(entry)
            img = D.random_resized_crop(img, cfg.augment, gen)
            img = D.horizontal_flip(img, cfg.augment.hflip_prob, gen)
            images.append(img)
        return np.stack(images).astype(np.float32)

    # -- optimization --------------------------------------------------------

    def train_step(self):
        """One optimizer step; returns (lr, loss). Targets are computed from
        the augmented view, then masked, forwarded and regressed."""
        cfg = self.cfg
        step = self.step
        batch = self._batch_for_step(step)
        target = F.assemble_targets(batch, cfg.feature, self.model_cfg.patch_size)
        plan = M.random_masking_plan(batch.shape[0], self.model_cfg.n_patches,
                                     self.model_cfg.mask_ratio,
                                     self.rng.child("mask").at(step))
        self.model.zero_grad()
        pred = self.model.forward(Tensor(batch), plan)
        loss = M.masked_l2_loss(pred, target, plan, cfg.head_weights)
        loss_val = float(loss.data)
        lr = O.lr_at(step, self.schedule)
        loss.backward()
        grads = {n: p.grad for n, p in self.model.params.items()}
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step, lr,
                                   global_grad_norm(self.model.params.values()))
        if cfg.grad_clip > 0:
            from .tensor import clip_global_norm
            clip_global_norm(list(self.model.params.values()), cfg.grad_clip)
            grads = {n: p.grad for n, p in self.model.params.items()}
        O.adamw_step(self.model.params, grads, self.opt, lr=lr)
        self.step += 1
        self.loss_log.append((step, lr, loss_val))
        return lr, loss_val

    def run(self, out_dir=None, max_steps=None):
        limit = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
        while self.step < limit:
            self.train_step()
            if (out_dir and self.cfg.checkpoint_interval
                    and self.step % self.cfg.checkpoint_interval == 0
                    and self.step < limit):
                self.save(os.path.join(out_dir, f"ckpt_{self.step:06d}"))
        if out_dir:
            self.save(os.path.join(out_dir, "checkpoint"))
            write_loss_log(os.path.join(out_dir, "loss_log.csv"), self.loss_log,
                           self.cfg.digest())
        return self

    # -- checkpointing -------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.model, self.opt, self.step, self.loss_log,
                        self.cfg)

    @classmethod
    def load(cls, path, entries, data_dir, cfg=None):
        model, opt, step, loss_log, stored_cfg_dict, _ = load_checkpoint(path, cfg)
        if cfg is None:
            cfg = config_from_dict(stored_cfg_dict)
        trainer = cls(cfg, entries, data_dir, params_from=model)
        trainer.opt = opt
        trainer.opt.no_decay = {n for n in model.params
                                if ".ln" in n or ".norm." in n or n == "mask_token"}
        trainer.step = step
        trainer.loss_log = list(loss_log)
        return trainer


def pretrain_run(cfg, manifest_path, out_dir):
    """End-to-end pretraining from a manifest; returns the Trainer."""
    entries = D.read_manifest(manifest_path)
    data_dir = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg, entries, data_dir)
    return trainer.run(out_dir=out_dir)


def write_loss_log(path, loss_log, digest=""):
    with open(path, "w") as f:
        f.write(f"# config_digest={digest}\n")
        f.write("step,lr,loss\n")
        for step, lr, loss in loss_log:
            f.write(f"{step},{lr!r},{loss!r}\n")


def read_loss_log(path):
    """Returns (rows, config_digest)."""
    rows = []
    digest = ""
    with open(path) as f:
        for line in f:
            if line.startswith("# config_digest="):
                digest = line.strip().split("=", 1)[1]
                continue
            if line.startswith("#") or line.startswith("step,"):
                continue
            step, lr, loss = line.strip().split(",")
            rows.append((int(step), float(lr), float(loss)))
    return rows, digest


# ---------------------------------------------------------------------------
# checkpoint serialization


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model, opt, step, loss_log, cfg):
    """Directory of FGMR tensors (parameters + moments) plus index.json.
    Writes are atomic per file; the index goes last."""
    os.makedirs(path, exist_ok=True)
    names = {}
    for name, p in model.params.items():
        fname = f"param__{name}.fgmr"
        D.write_tensor(os.path.join(path, fname), p.data)
        names[name] = list(p.shape)
        for kind, store in (("m", opt.m), ("v", opt.v)):
            if name in store:
                D.write_tensor(os.path.join(path, f"{kind}__{name}.fgmr"), store[name])
    index = {
        "format": "fgmae-checkpoint-v1",
        "step": step,
        "config_digest": cfg.digest(),
        "config": config_to_dict(cfg),
        "model_config": asdict(model.config),
        "names": names,
        "optimizer": {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.weight_decay,
                      "has_moments": sorted(opt.m)},
        "loss_log": [[s, lr, lo] for s, lr, lo in loss_log],
    }
    tmp = os.path.join(path, "index.json.tmp")
    with open(tmp, "w") as f:
        json.dump(index, f, indent=1)
    os.replace(tmp, os.path.join(path, "index.json"))


def load_checkpoint(path, cfg=None):
    """Rebuild (model, optimizer state, step, loss log, config dict, index).

    Shape mismatches against the index are fatal and name the parameter; a
    config-digest mismatch only warns.
    """
    index_path = os.path.join(path, "index.json")
    if not os.path.exists(index_path):
        raise CheckpointError(f"no index.json under {path}")
    with open(index_path) as f:
        index = json.load(f)
    if cfg is not None and cfg.digest() != index["config_digest"]:
        warnings.warn(f"checkpoint config digest {index['config_digest']} does not "
                      f"match the supplied config {cfg.digest()}", stacklevel=2)
    model_cfg = M.ModelConfig(**index["model_config"])
    model = M.FgMae.__new__(M.FgMae)
    model.config = model_cfg
    model.dtype = np.float32
    model.params = {}
    model.enc_pos = M.sincos_pos_embed(model_cfg.enc_width, model_cfg.grid).astype(np.float32)
    model.dec_pos = M.sincos_pos_embed(model_cfg.dec_width, model_cfg.grid).astype(np.float32)
    for name, shape in index["names"].items():
        fpath = os.path.join(path, f"param__{name}.fgmr")
        if not os.path.exists(fpath):
            raise CheckpointError(f"missing tensor file for parameter {name!r}")
        arr = D.read_tensor(fpath)
        if list(arr.shape) != list(shape):
            raise CheckpointError(f"shape mismatch for parameter {name!r}: "
                                  f"index says {shape}, file has {list(arr.shape)}")
        model.params[name] = Tensor(arr, requires_grad=True)
    oi = index["optimizer"]
    opt = O.OptimState(lr=oi["lr"], beta1=oi["beta1"], beta2=oi["beta2"],
                       eps=oi["eps"], weight_decay=oi["weight_decay"], t=oi["t"])
    for name in oi["has_moments"]:
        opt.m[name] = D.read_tensor(os.path.join(path, f"m__{name}.fgmr"))
        opt.v[name] = D.read_tensor(os.path.join(path, f"v__{name}.fgmr"))
    loss_log = [(int(s), float(lr), float(lo)) for s, lr, lo in index["loss_log"]]
    return model, opt, int(index["step"]), loss_log, index["config"], index


def load_model(path):
    """Just the model from a checkpoint directory."""
    model, _, _, _, _, _ = load_checkpoint(path)
    return model


def config_from_dict(d):
    model = M.ModelConfig(**d["model"])
    feat = d["feature"]
    feature = F.FeatureSpec(variant=feat["variant"],
                            hog=F.HogParams(**feat["hog"]),
                            canny=F.CannyParams(**feat["canny"]),
                            sift=F.SiftParams(**feat["sift"]),
                            bands=F.BandMap(**feat["bands"]))
    augment = D.AugmentationConfig(**d["augment"])
    rest = {k: v for k, v in d.items() if k not in ("model", "feature", "augment")}
    for key in ("head_weights", "adam_betas"):
        if isinstance(rest.get(key), list):
            rest[key] = tuple(rest[key])
    return PretrainConfig(model=model, feature=feature, augment=augment, **rest)
