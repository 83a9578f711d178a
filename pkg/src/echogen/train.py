"""Training: adaptive-moment optimizer under a cosine-annealed learning rate,
objective alternation between masked linear flow and masked mean flow, and
bit-reproducible checkpoint/resume.

All randomness of a run flows through one generator whose state is saved at
every checkpoint, so resuming replays the exact trajectory.
"""

from __future__ import annotations

import json
import logging
import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetItem, to_model_space
from .model import Model
from .objectives import (
    Objective,
    loss_mlf,
    loss_mmf_adaptive,
    loss_rec,
    make_flow_sample,
    meanflow_target,
    pick_objective,
    rmmf,
    sample_timesteps,
)
from .seqcond import ConditioningSet, LossMask, alpha, build_masked_conditioning, temporal_normalize

__all__ = ["Adam", "cosine_lr", "train", "TrainingDiverged"]

log = logging.getLogger("echogen.train")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the offending batch diagnostics."""


class Adam:
    """Adaptive moment estimation over a named parameter table."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    if total_steps <= 1:
        return lr0
    frac = min(step / (total_steps - 1), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


def _video_loss(model: Model, params, item_frames, phi, config: RunConfig, rng):
    """One training term for one video; returns (loss tensor, objective)."""
    d = config.data
    vid = temporal_normalize(to_model_space(item_frames), d.capacity)
    mask = LossMask.from_p(vid.p)
    al = alpha(mask, d.channels, d.height, d.width)

    x_m = build_masked_conditioning(vid, config.train.pmf, rng)
    drop = config.train.cfg_dropout > 0 and rng.uniform() < config.train.cfg_dropout
    if drop:
        cond = ConditioningSet(np.zeros_like(x_m), None, vid.p)
    else:
        cond = ConditioningSet(x_m, phi, vid.p)

    x = Tensor(vid.frames)
    eps = Tensor(rng.standard_normal(vid.frames.shape))
    objective = pick_objective(rng, config.loss.p_linear)

    def net(x_t, r, t, c):
        return model.forward(params, x_t, r, t, c)

    if objective is Objective.MASKED_LINEAR_FLOW:
        pair = sample_timesteps(rng, 1.0, config.loss)  # r = t for linear flow
        fs = make_flow_sample(x, eps, pair)
        v_pred = net(fs.x_t, pair.r, pair.t, cond)
        loss = loss_mlf(v_pred, fs.eps, fs.x, mask, al)
    else:
        pair = sample_timesteps(rng, config.loss.ratio_equal, config.loss)
        fs = make_flow_sample(x, eps, pair)
        u_pred, u_tgt, i_term = meanflow_target(net, fs, cond)
        loss = rmmf(
            loss_mmf_adaptive(u_pred, u_tgt, mask, al, config.loss),
            loss_rec(u_pred, i_term, fs.x_t, fs.x, fs.pair.t, mask, al),
            config.loss.lambda_rec,
        )
    return loss, objective


def train(
    config: RunConfig,
    dataset: list[DatasetItem],
    out_dir,
    resume: Checkpoint | None = None,
    epoch_callback=None,
) -> Checkpoint:
    """Run the training loop; returns (and writes) the final checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    model = Model(config.model)
    tcfg = config.train

    if resume is not None:
        params = resume.tensor_params()
        opt = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
        opt.m = {k: v.copy() for k, v in resume.adam_m.items()}
        opt.v = {k: v.copy() for k, v in resume.adam_v.items()}
        opt.t = resume.adam_t
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start_epoch, step = resume.epoch, resume.step
    else:
        rng = np.random.default_rng(config.seed)
        params = model.init_params(rng)
        opt = Adam(params, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
        start_epoch, step = 0, 0

    n = len(dataset)
    steps_per_epoch = max(1, n // tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    history = []

    def snapshot(epoch):
        return Checkpoint(
            config=config,
            params={k: p.data.copy() for k, p in params.items()},
            epoch=epoch,
            step=step,
            adam_m={k: v.copy() for k, v in opt.m.items()},
            adam_v={k: v.copy() for k, v in opt.v.items()},
            adam_t=opt.t,
            rng_state=rng.bit_generator.state,
        )

    for epoch in range(start_epoch, tcfg.epochs):
        perm = rng.permutation(n)
        sums = {Objective.MASKED_LINEAR_FLOW: 0.0, Objective.MASKED_MEAN_FLOW: 0.0}
        counts = {Objective.MASKED_LINEAR_FLOW: 0, Objective.MASKED_MEAN_FLOW: 0}
        for b in range(steps_per_epoch):
            batch = perm[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
            lr = cosine_lr(step, total_steps, tcfg.lr, tcfg.lr_min)
            grand = None
            batch_losses = []
            for idx in batch:
                item = dataset[idx]
                try:
                    loss, objective = _video_loss(
                        model, params, item.frames, item.ef_proxy, config, rng
                    )
                    loss_val = float(loss.data)
                    if not np.isfinite(loss_val):
                        raise ad.NonFiniteError("loss is non-finite")
                    g = ad.grad(loss, params)
                except ad.NonFiniteError as exc:
                    diag = {
                        "epoch": epoch,
                        "step": step,
                        "item_id": item.item_id,
                        "item_seed": item.seed,
                        "batch_items": [dataset[i].item_id for i in batch],
                        "error": str(exc),
                    }
                    dump = os.path.join(out_dir, "divergence.json")
                    with open(dump, "w") as fh:
                        json.dump(diag, fh, indent=2, sort_keys=True)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step} on "
                        f"{item.item_id} (seed {item.seed}); diagnostics in {dump}"
                    ) from exc
                sums[objective] += loss_val
                counts[objective] += 1
                batch_losses.append(loss_val)
                if grand is None:
                    grand = g
                else:
                    for k in grand:
                        grand[k] = grand[k] + g[k]
            scale = 1.0 / len(batch)
            opt.step(params, {k: v * scale for k, v in grand.items()}, lr)
            step += 1
        means = {
            o.value: (sums[o] / counts[o] if counts[o] else None) for o in sums
        }
        record = {
            "epoch": epoch,
            "lr": cosine_lr(step - 1, total_steps, tcfg.lr, tcfg.lr_min),
            "loss_mlf": means["mlf"],
            "loss_mmf": means["mmf"],
            "n_mlf": counts[Objective.MASKED_LINEAR_FLOW],
            "n_mmf": counts[Objective.MASKED_MEAN_FLOW],
        }
        history.append(record)
        log.info(
            "epoch %d  mlf=%s mmf=%s (lr %.2e)",
            epoch,
            "n/a" if means["mlf"] is None else f"{means['mlf']:.5f}",
            "n/a" if means["mmf"] is None else f"{means['mmf']:.5f}",
            record["lr"],
        )
        if epoch_callback is not None:
            epoch_callback(record, params)
        done = epoch + 1
        if tcfg.ckpt_every and done % tcfg.ckpt_every == 0 and done < tcfg.epochs:
            save_checkpoint(os.path.join(out_dir, f"ckpt_ep{done:04d}.bin"), snapshot(done))

    final = snapshot(tcfg.epochs)
    save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), final)
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return final
