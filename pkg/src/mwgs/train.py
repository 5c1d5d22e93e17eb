"""Training loop, checkpoints and evaluation helpers.

A checkpoint directory holds ``params.bin``/``manifest.json`` (model
parameters), ``optim/`` (Adam moments in the same format) and
``scene.json`` (cameras and anchors in readable form).  The metrics log is
JSON lines with sorted keys, so equal runs produce equal bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import PARAM_GROUPS, RunConfig
from .errors import MissingEntry, TrainingDivergence
from .losses import LossWeights, psnr, ssim, total_loss
from .model import Model, param_group
from .optim import OptimState, adam_step, lr_schedule
from .scene import save_scene
from .synth import Dataset, load_dataset


def view_order(seed, epoch, n):
    """Seeded shuffle of ``n`` training views for one epoch."""
    return np.random.default_rng((seed, epoch)).permutation(n)


def group_lrs(cfg: RunConfig, step):
    frozen = set(cfg.frozen_groups)
    out = {}
    for g in PARAM_GROUPS:
        start, end = getattr(cfg, f"lr_{g}")
        out[g] = 0.0 if g in frozen else lr_schedule(start, end, step, cfg.steps)
    return out


def reference_image(model: Model, ds: Dataset, image_id):
    """The image a bundle is encoded from (conv mode reads pixels, grid mode only the id)."""
    return ds.images[image_id] if model.encoder.mode == "conv" else None


def bundle_for(model: Model, ds: Dataset, image_id):
    """Bundle used to render ``image_id``: its own for train views, its reference otherwise."""
    ref = image_id if ds.splits[image_id] == "train" else ds.references[image_id]
    return model.encode(ref, reference_image(model, ds, ref))


@dataclass
class StepResult:
    step: int
    loss: float
    terms: dict
    psnr: float
    image_id: str


class Trainer:
    def __init__(self, cfg: RunConfig, ds: Dataset, model: Model, state: OptimState | None = None):
        self.cfg = cfg
        self.ds = ds
        self.model = model
        self.state = state or OptimState()
        self.train_ids = ds.split_ids("train")
        if not self.train_ids:
            raise MissingEntry("dataset has no training views")
        self.weights = LossWeights(cfg.lambda_ssim, cfg.lambda_l1, cfg.lambda_vm)

    @classmethod
    def fresh(cls, cfg: RunConfig, ds: Dataset):
        model = Model.from_points(cfg, ds.image_hw, ds.points, ds.split_ids("train"))
        return cls(cfg, ds, model)

    @property
    def step(self):
        return self.state.step

    def view_at(self, step):
        n = len(self.train_ids)
        epoch, pos = divmod(step, n)
        return self.train_ids[view_order(self.cfg.seed, epoch, n)[pos]]

    def train_step(self) -> StepResult:
        step = self.state.step
        image_id = self.view_at(step)
        model, ds = self.model, self.ds
        gt = ds.images[image_id]
        bundle = model.encode(image_id, reference_image(model, ds, image_id))
        fwd = model.forward(ds.cameras[image_id], bundle)
        loss = total_loss(fwd.image, gt, bundle.vm, self.weights)
        if not math.isfinite(loss.total):
            raise TrainingDivergence(f"non-finite loss at step {step}")
        grads = model.backward(fwd, loss.d_image, loss.d_vm)
        lrs = group_lrs(self.cfg, step)
        per_param = {name: lrs[param_group(name)] for name in grads}
        adam_step(model.params, grads, self.state, per_param)
        return StepResult(step, loss.total, loss.terms, psnr(fwd.image, gt), image_id)

    def run(self, log_path=None, until=None, on_step=None):
        """Train to ``until`` (default ``cfg.steps``), appending JSON lines to ``log_path``."""
        until = self.cfg.steps if until is None else until
        log = open(log_path, "a") if log_path else None
        try:
            while self.state.step < until:
                try:
                    r = self.train_step()
                except TrainingDivergence as exc:
                    exc.dump_path = self.dump_divergence()
                    raise
                if log and (r.step % self.cfg.log_every == 0 or r.step == until - 1):
                    log.write(json.dumps(self.log_record(r), sort_keys=True) + "\n")
                    log.flush()
                if on_step:
                    on_step(r)
                every = self.cfg.checkpoint_every
                if every and self.state.step % every == 0 and self.state.step < until:
                    self.save(Path(self.cfg.output) / "checkpoint")
        finally:
            if log:
                log.close()
        return self

    def log_record(self, r: StepResult) -> dict:
        return {
            "step": r.step, "image": r.image_id, "loss": r.loss, "psnr": r.psnr,
            "ssim": r.terms["ssim"], "l1": r.terms["l1"], "vm_reg": r.terms["vm_reg"],
            "lr": group_lrs(self.cfg, r.step),
        }

    def dump_divergence(self):
        out = Path(self.cfg.output) / "divergence"
        bad = sorted(n for n, v in self.model.params.items() if not np.all(np.isfinite(v)))
        self.save(out, extra={"non_finite_params": bad})
        return str(out)

    # -- checkpoints -----------------------------------------------------------------

    def save(self, directory, extra=None):
        directory = Path(directory)
        meta = {"config": self.cfg.to_dict(), "step": self.state.step,
                "image_hw": list(self.model.image_hw), **(extra or {})}
        io.save_params(directory, self.model.params, meta)
        moments = {f"m.{k}": v for k, v in self.state.m.items()}
        moments.update({f"v.{k}": v for k, v in self.state.v.items()})
        io.save_params(directory / "optim", moments, {"step": self.state.step})
        cams = [self.ds.cameras[i] for i in self.ds.ids]
        save_scene(directory / "scene.json", cams, self.model.anchors(), self.cfg.to_dict())
        return directory


def load_checkpoint(directory, cfg: RunConfig | None = None):
    """Returns ``(model, state, saved_config)``.  ``cfg`` overrides run-time keys."""
    params, meta = io.load_params(directory)
    saved = RunConfig.from_dict(meta["config"])
    use = cfg or saved
    model = Model(use, tuple(meta["image_hw"]), params)
    state = OptimState(step=int(meta["step"]))
    opt_dir = Path(directory) / "optim"
    if (opt_dir / "manifest.json").exists():
        moments, _ = io.load_params(opt_dir)
        for key, val in moments.items():
            kind, name = key.split(".", 1)
            (state.m if kind == "m" else state.v)[name] = val
    return model, state, saved


def train(cfg: RunConfig, log_name="train_log.jsonl"):
    """Fresh or resumed training run driven entirely by ``cfg``; returns the trainer."""
    ds = load_dataset(cfg.dataset)
    cfg.validate(ds.image_hw)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.checkpoint:
        model, state, _ = load_checkpoint(cfg.checkpoint, cfg)
        trainer = Trainer(cfg, ds, model, state)
    else:
        trainer = Trainer.fresh(cfg, ds)
        (out / log_name).unlink(missing_ok=True)
    init = evaluate(trainer.model, ds, "train")
    trainer.run(out / log_name)
    trainer.save(out / "checkpoint")
    final = evaluate(trainer.model, ds, "train")
    summary = {"steps": trainer.step, "initial_train_psnr": init["mean"]["psnr"],
               "final_train_psnr": final["mean"]["psnr"], "n_anchors": trainer.model.n_anchors}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    trainer.summary = summary
    return trainer


def evaluate(model: Model, ds: Dataset, split="train"):
    """Per-image and mean PSNR/SSIM under the evaluation bundle protocol."""
    ids = ds.split_ids(split)
    if not ids:
        raise MissingEntry(f"dataset has no {split!r} views")
    rows = {}
    for image_id in ids:
        img = model.render_view(ds.cameras[image_id], bundle_for(model, ds, image_id)).image
        gt = ds.images[image_id]
        rows[image_id] = {"psnr": psnr(img, gt), "ssim": ssim(img, gt)}
    mean = {m: float(np.mean([r[m] for r in rows.values()])) for m in ("psnr", "ssim")}
    return {"split": split, "images": rows, "mean": mean}
