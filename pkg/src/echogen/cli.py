"""Command-line entry point: dataset generation, training, sampling,
evaluation, and the throughput benchmark.

Subcommands: datagen, train, sample, eval, bench. A key-value config file
(--config) supplies defaults; individual flags override it. Set ECHOGEN_LOG
to DEBUG/INFO/WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import EvalConfig, RunConfig, SamplerConfig, paper_scale_config
from .data import DatasetItem, generate_dataset, load_dataset, to_intensity, to_model_space
from .evalbench import AdherenceRecord, MetricReport, psnr, rejection_sample, ssim, throughput_bench
from .model import Model
from .samplers import (
    InvocationCounter,
    SampleRequest,
    sample_cfg,
    sample_euler_linear,
    sample_interval,
    sample_one_step,
)
from .seqcond import ConditioningSet, PaddedVideo, build_masked_conditioning, temporal_normalize
from .toyecho import SegmentationError, proxy_ef, segment_threshold
from .train import train

log = logging.getLogger("echogen.cli")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _setup_logging():
    level = os.environ.get("ECHOGEN_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config(args) -> RunConfig:
    if getattr(args, "paper_scale", False):
        cfg = paper_scale_config()
    elif args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    # flag overrides
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    loss_over = {}
    for flag, name in (("h", "h"), ("lambda_rec", "lambda_rec"), ("p_linear", "p_linear")):
        v = getattr(args, flag, None)
        if v is not None:
            loss_over[name] = v
    if loss_over:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, **loss_over))
    if getattr(args, "pmf", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, pmf=args.pmf),
            eval=dataclasses.replace(cfg.eval, pmf=args.pmf),
        )
    if getattr(args, "steps", None) is not None:
        method = "one_step" if args.steps == 1 else "euler"
        cfg = dataclasses.replace(
            cfg, sampler=SamplerConfig(method=method, steps=args.steps)
        )
    if getattr(args, "task", None):
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, task=args.task))
    if getattr(args, "rs", None) is not None:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, rs=args.rs))
    return cfg


def _item_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])


def _build_conditioning(
    item: DatasetItem, capacity: int, pmf: float, phi: float, mask_seed: int
) -> tuple[ConditioningSet, PaddedVideo]:
    vid = temporal_normalize(to_model_space(item.frames), capacity)
    x_m = build_masked_conditioning(vid, pmf, np.random.default_rng(mask_seed))
    return ConditioningSet(x_m, phi, vid.p), vid


def _run_sampler(scfg: SamplerConfig, velocity_fn, params, c, seed: int) -> PaddedVideo:
    if scfg.method == "one_step":
        return sample_one_step(velocity_fn, params, SampleRequest(c=c, seed=seed))
    if scfg.method == "interval":
        grid = np.linspace(1.0, 0.0, scfg.steps + 1)
        return sample_interval(velocity_fn, params, c, grid, seed)
    if scfg.method == "euler":
        return sample_euler_linear(velocity_fn, params, c, scfg.steps, seed)
    if scfg.method == "cfg":
        return sample_cfg(velocity_fn, params, c, scfg.guidance, scfg.steps, seed)
    raise ValueError(f"unknown sampler method {scfg.method!r}")


def _observed_ef(video: PaddedVideo, tau: float) -> float:
    frames = to_intensity(video.frames)
    valid = np.flatnonzero(video.p == 0)
    ed = segment_threshold(frames[valid[0], 0], tau)
    es = segment_threshold(frames[valid[-1], 0], tau)
    return proxy_ef(ed, es)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return (np.clip(frame, 0.0, 1.0) * 255.0).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.out_dir, "dataset")
    if args.n is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, n_videos=args.n))
    items = generate_dataset(cfg.data, out, cfg.seed)
    cfg.save(os.path.join(out, "datagen_config.ini"))
    print(f"wrote {len(items)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(args.data)
    out = args.out or cfg.out_dir
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        cfg = resume.config
    ckpt = train(cfg, dataset, out, resume=resume)
    print(f"trained {ckpt.epoch} epochs; checkpoint at {os.path.join(out, 'ckpt_final.bin')}")
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.steps is not None:
        method = "one_step" if args.steps == 1 else "euler"
        cfg = dataclasses.replace(cfg, sampler=SamplerConfig(method=method, steps=args.steps))
    dataset = load_dataset(args.data)
    index = args.item
    item = dataset[index]
    phi = args.ef if args.ef is not None else item.ef_proxy
    seed = args.seed if args.seed is not None else _item_seed(cfg.seed, index, 0)
    c, _ = _build_conditioning(
        item, cfg.data.capacity, cfg.eval.pmf, phi, _item_seed(seed, index, 2)
    )
    model = Model(cfg.model)
    params = ckpt.tensor_params()
    counted = InvocationCounter(model.forward)
    video = _run_sampler(cfg.sampler, counted, params, c, seed)
    log.info("sampler finished: %d model invocations", counted.count)

    out = args.out or "sample_out"
    os.makedirs(out, exist_ok=True)
    frames = to_intensity(video.frames)
    valid = np.flatnonzero(video.p == 0)
    pngs = []
    for i in valid:
        img = Image.fromarray(_to_uint8(frames[i, 0]), mode="L")
        path = os.path.join(out, f"frame_{i:03d}.png")
        img.save(path)
        pngs.append(img)
    gif = [p.resize((p.width * 8, p.height * 8), Image.NEAREST) for p in pngs]
    gif[0].save(
        os.path.join(out, "video.gif"),
        save_all=True,
        append_images=gif[1:],
        duration=150,
        loop=0,
    )
    mmode = np.stack([frames[i, 0][frames.shape[2] // 2] for i in valid])  # (f, W)
    strip = Image.fromarray(_to_uint8(mmode), mode="L")
    strip = strip.resize((strip.width * 8, strip.height * 8), Image.NEAREST)
    strip.save(os.path.join(out, "mmode.png"))
    print(
        f"wrote {len(valid)} frames + video.gif + mmode.png to {out} "
        f"({counted.count} model invocations)"
    )
    return 0


def _evaluate(
    cfg: RunConfig, ckpt: Checkpoint, dataset, n_items: int, run_sampler=None
) -> MetricReport:
    model = Model(cfg.model)
    params = ckpt.tensor_params()
    ecfg = cfg.eval
    tau = cfg.data.tau
    records = []
    quality_acc = {"ssim": [], "psnr": [], "mae": [], "rmse": []}
    failures = 0

    if run_sampler is None:
        def run_sampler(index, c, seed):
            return _run_sampler(cfg.sampler, model.forward, params, c, seed)

    def estimator(video: PaddedVideo) -> float:
        return _observed_ef(video, tau)

    n = min(n_items, len(dataset))
    for index in range(n):
        item = dataset[index]
        source_ef = item.ef_proxy
        if ecfg.task == "rec":
            requested = source_ef
        else:
            draw = np.random.default_rng(_item_seed(cfg.seed, index, 1))
            requested = None
            for _ in range(1000):
                cand = float(draw.uniform(ecfg.gen_ef_min, ecfg.gen_ef_max))
                if abs(cand - source_ef) >= ecfg.min_gap:
                    requested = cand
                    break
            if requested is None:
                raise RuntimeError("could not draw a conflicting EF")
        c, vid = _build_conditioning(
            item, cfg.data.capacity, ecfg.pmf, requested, _item_seed(cfg.seed, index, 2)
        )
        base_seed = _item_seed(cfg.seed, index, 3)
        try:
            if ecfg.rs > 1:
                def sampler(fn, p, cond, s):
                    return run_sampler(index, cond, s)

                video, _ = rejection_sample(
                    model.forward, params, c, ecfg.rs, estimator, base_seed, sampler=sampler
                )
                observed = estimator(video)
                log.debug("item %s: %d candidates drawn", item.item_id, ecfg.rs)
            else:
                video = run_sampler(index, c, base_seed)
                observed = estimator(video)
        except (SegmentationError, RuntimeError, ValueError) as exc:
            failures += 1
            log.warning("item %s skipped: %s", item.item_id, exc)
            continue
        records.append(
            AdherenceRecord(
                requested_ef=requested,
                observed_ef=observed,
                task=ecfg.task,
                item_id=item.item_id,
                source_ef=source_ef if ecfg.task == "gen" else None,
            )
        )
        if ecfg.task == "rec":
            gen_i = to_intensity(video.frames)[video.p == 0, 0]
            src_i = to_intensity(vid.frames)[vid.p == 0, 0]
            quality_acc["ssim"].append(ssim(gen_i, src_i))
            quality_acc["psnr"].append(psnr(gen_i, src_i))
            quality_acc["mae"].append(float(np.abs(gen_i - src_i).mean()))
            quality_acc["rmse"].append(float(np.sqrt(((gen_i - src_i) ** 2).mean())))

    quality = {
        k: float(np.mean(v)) for k, v in quality_acc.items() if v
    }
    extra = {
        "sampler_method": cfg.sampler.method,
        "sampler_steps": cfg.sampler.steps,
        "rs": ecfg.rs,
        "pmf": ecfg.pmf,
        "seed": cfg.seed,
        "n_requested": n,
    }
    return MetricReport.from_records(
        ecfg.task, records, quality=quality, n_failures=failures, extra=extra
    )


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    # eval-time overrides ride on top of the checkpointed config
    over = {}
    if args.task:
        over["task"] = args.task
    if args.rs is not None:
        over["rs"] = args.rs
    if args.pmf is not None:
        over["pmf"] = args.pmf
    if args.n is not None:
        over["n_items"] = args.n
    if args.gen_ef_range is not None:
        over["gen_ef_min"], over["gen_ef_max"] = args.gen_ef_range
    if over:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **over))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        method = "one_step" if args.steps == 1 else "euler"
        cfg = dataclasses.replace(cfg, sampler=SamplerConfig(method=method, steps=args.steps))
    dataset = load_dataset(args.data)
    report = _evaluate(cfg, ckpt, dataset, cfg.eval.n_items)
    out = args.out or "eval_out"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    report.write_csv(os.path.join(out, "records.csv"))
    print(report.render_table())
    print(f"report written to {out}")
    return 0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    dataset = load_dataset(args.data)
    item = dataset[0]
    c, _ = _build_conditioning(
        item, cfg.data.capacity, cfg.eval.pmf, item.ef_proxy, _item_seed(cfg.seed, 0, 2)
    )
    model = Model(cfg.model)
    params = ckpt.tensor_params()
    rows = []

    def bench_row(name, scfg):
        counted = InvocationCounter(model.forward)
        state = {"seed": 0}

        def closure():
            state["seed"] += 1
            _run_sampler(scfg, counted, params, c, state["seed"])

        rate = throughput_bench(closure, n_iter=args.iters, warmup=5)
        per_video_calls = counted.count // (args.iters + 5)
        rows.append(
            {
                "sampler": name,
                "steps": scfg.steps,
                "vid_per_s": rate,
                "seconds_per_video": 1.0 / rate,
                "model_calls_per_video": per_video_calls,
            }
        )

    bench_row("one_step_meanflow", SamplerConfig(method="one_step", steps=1))
    bench_row("euler_linear", SamplerConfig(method="euler", steps=args.steps))
    if args.cfg:
        bench_row(
            "euler_cfg", SamplerConfig(method="cfg", steps=args.steps, guidance=cfg.sampler.guidance)
        )

    ratio = rows[0]["vid_per_s"] / rows[1]["vid_per_s"]
    table = {"rows": rows, "speedup_one_step_vs_euler": ratio, "n_iter": args.iters}
    out = args.out or "bench_out"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "bench.json"), "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    for row in rows:
        print(
            f"{row['sampler']:>20}  steps={row['steps']:>3}  "
            f"{row['vid_per_s']:8.2f} vid/s  ({row['seconds_per_video'] * 1e3:7.1f} ms/vid, "
            f"{row['model_calls_per_video']} calls/vid)"
        )
    print(f"one-step vs {args.steps}-step speedup: {ratio:.1f}x")
    print(f"bench written to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="echogen", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=None, help="number of videos")
    p.add_argument("--paper-scale", action="store_true", help="use the full-scale preset")
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--pmf", type=float, default=None)
    p.add_argument("--h", type=float, default=None, dest="h")
    p.add_argument("--lambda-rec", type=float, default=None, dest="lambda_rec")
    p.add_argument("--p-linear", type=float, default=None, dest="p_linear")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample a video from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory for conditioning")
    p.add_argument("--item", type=int, default=0, help="conditioning item index")
    p.add_argument("--ef", type=float, default=None, help="requested EF (fraction)")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="EF-adherence evaluation")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["rec", "gen"], default=None)
    p.add_argument("--rs", type=int, default=None, help="rejection-sampling candidates")
    p.add_argument("--pmf", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="number of eval items")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument(
        "--gen-ef-range", type=float, nargs=2, default=None, metavar=("LO", "HI")
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="sampling throughput benchmark")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--steps", type=int, default=25, help="Euler baseline steps")
    p.add_argument("--cfg", action="store_true", help="benchmark the CFG sampler too")
    p.set_defaults(fn=cmd_bench)

    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
