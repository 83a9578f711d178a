import dataclasses
import json
import logging
import os

import numpy as np
import pytest

from echogen.checkpoint import load_checkpoint, save_checkpoint
from echogen.cli import _evaluate, main
from echogen.config import DataConfig, EvalConfig, RunConfig, TrainConfig
from echogen.data import generate_dataset, load_dataset
from echogen.model import ModelConfig
from echogen.seqcond import PaddedVideo, temporal_normalize
from echogen.data import to_model_space
from echogen.toyecho import EllipseVideoSpec, analytic_cavity_mask, proxy_ef
from echogen.train import TrainingDiverged, train


def _tiny_config(**over):
    base = dict(
        seed=5,
        data=DataConfig(
            n_videos=8, capacity=4, height=12, width=12,
            f_min=2, f_max=4, a=4.0, b_ed=3.2, ring=1.4,
        ),
        model=ModelConfig(channels=(4, 8), capacity=4, embed_dim=8),
        train=TrainConfig(epochs=1, batch_size=4),
        eval=EvalConfig(n_items=4),
    )
    base.update(over)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Shared tiny dataset + 1-epoch checkpoint for command tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = _tiny_config()
    data_dir = root / "data"
    generate_dataset(cfg.data, data_dir, cfg.seed)
    dataset = load_dataset(data_dir)
    run_dir = root / "run"
    ckpt = train(cfg, dataset, run_dir)
    return cfg, str(data_dir), str(run_dir / "ckpt_final.bin"), dataset


class TestDatagen:
    def test_manifests_byte_identical(self, tmp_path):
        cfg = _tiny_config()
        generate_dataset(cfg.data, tmp_path / "a", 7)
        generate_dataset(cfg.data, tmp_path / "b", 7)
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_video_files_identical(self, tmp_path):
        cfg = _tiny_config()
        generate_dataset(cfg.data, tmp_path / "a", 7)
        generate_dataset(cfg.data, tmp_path / "b", 7)
        for name in sorted(os.listdir(tmp_path / "a")):
            if name.endswith(".npy"):
                va = np.load(tmp_path / "a" / name)
                vb = np.load(tmp_path / "b" / name)
                assert np.array_equal(va, vb)

    def test_length_range_contract(self, tmp_path):
        cfg = _tiny_config()
        items = generate_dataset(cfg.data, tmp_path / "d", 3)
        for item in items:
            assert cfg.data.f_min <= item.f <= cfg.data.f_max
            assert item.frames.shape[0] == item.f

    def test_manifest_ef_close_to_analytic_proxy(self, tmp_path):
        # at oracle scale (64x64) the analytic-mask proxy tracks stored EF
        data = DataConfig(n_videos=6, capacity=8, height=64, width=64,
                          a=24.0, b_ed=20.0, ring=4.0, f_min=4, f_max=8)
        items = generate_dataset(data, tmp_path / "d64", 9)
        for item in items:
            spec = EllipseVideoSpec(
                ef=item.ef, f=item.f, H=64, W=64, a=24.0, b_ed=20.0,
                ring=4.0, seed=item.seed,
            )
            got = proxy_ef(
                analytic_cavity_mask(spec, 0), analytic_cavity_mask(spec, item.f - 1)
            )
            assert abs(got - item.ef) <= 0.02


class TestTrainLoop:
    def test_deterministic_final_loss(self, tmp_path):
        cfg = _tiny_config()
        data_dir = tmp_path / "data"
        generate_dataset(cfg.data, data_dir, cfg.seed)
        ds = load_dataset(data_dir)
        c1 = train(cfg, ds, tmp_path / "r1")
        c2 = train(cfg, ds, tmp_path / "r2")
        log1 = (tmp_path / "r1" / "train_log.jsonl").read_text()
        log2 = (tmp_path / "r2" / "train_log.jsonl").read_text()
        assert log1 == log2
        for k in c1.params:
            assert np.array_equal(c1.params[k], c2.params[k])

    def test_checkpoint_resume_bitwise(self, tmp_path):
        cfg = _tiny_config(train=TrainConfig(epochs=4, batch_size=4, ckpt_every=2))
        data_dir = tmp_path / "data"
        generate_dataset(cfg.data, data_dir, cfg.seed)
        ds = load_dataset(data_dir)

        full = train(cfg, ds, tmp_path / "full")
        mid = load_checkpoint(tmp_path / "full" / "ckpt_ep0002.bin")
        resumed = train(cfg, ds, tmp_path / "resumed", resume=mid)

        for k in full.params:
            assert np.array_equal(full.params[k], resumed.params[k]), k
        assert full.rng_state == resumed.rng_state

        log_full = [
            json.loads(line)
            for line in (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()
        ]
        log_res = [
            json.loads(line)
            for line in (tmp_path / "resumed" / "train_log.jsonl").read_text().splitlines()
        ]
        assert log_full[2:] == log_res  # epochs 2..3 replayed bit-identically

    def test_point_mass_loss_decreases(self, tmp_path):
        # every item identical: the smoothed objective must trend down early
        cfg = _tiny_config(
            train=TrainConfig(epochs=25, batch_size=2, lr=3e-3),
        )
        data_dir = tmp_path / "data"
        items = generate_dataset(
            dataclasses.replace(cfg.data, n_videos=1), data_dir, cfg.seed
        )
        ds = [dataclasses.replace(items[0], item_id=f"vid_{i:05d}") for i in range(8)]
        losses = []

        def cb(record, params):
            vals = [v for v in (record["loss_mlf"], record["loss_mmf"]) if v is not None]
            losses.append(float(np.mean(vals)))

        train(cfg, ds, tmp_path / "run", epoch_callback=cb)
        # 25 epochs x 4 steps = 100 steps; compare first vs last thirds
        first = np.mean(losses[:8])
        last = np.mean(losses[-8:])
        assert last < first * 0.8

    def test_p_linear_zero_no_linear_steps(self, tmp_path):
        from echogen.objectives import LossConfig

        cfg = _tiny_config(loss=LossConfig(p_linear=0.0))
        data_dir = tmp_path / "data"
        generate_dataset(cfg.data, data_dir, cfg.seed)
        ds = load_dataset(data_dir)
        train(cfg, ds, tmp_path / "run")
        rec = json.loads((tmp_path / "run" / "train_log.jsonl").read_text().splitlines()[0])
        assert rec["n_mlf"] == 0
        assert rec["n_mmf"] > 0

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path):
        cfg = _tiny_config()
        data_dir = tmp_path / "data"
        generate_dataset(cfg.data, data_dir, cfg.seed)
        ds = load_dataset(data_dir)
        ckpt = train(cfg, ds, tmp_path / "ok")
        ckpt.params = {k: v * 1e200 for k, v in ckpt.params.items()}
        ckpt.epoch = 0  # replay from the poisoned state
        with pytest.raises(TrainingDiverged):
            train(cfg, ds, tmp_path / "bad", resume=ckpt)
        diag = json.loads((tmp_path / "bad" / "divergence.json").read_text())
        assert "item_seed" in diag and "item_id" in diag


class TestSampleCommand:
    def test_writes_exactly_f_frames(self, tiny_run, tmp_path):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        out = tmp_path / "s1"
        rc = main(
            [
                "sample", "--ckpt", ckpt_path, "--data", data_dir,
                "--item", "0", "--ef", "0.5", "--seed", "3", "--out", str(out),
            ]
        )
        assert rc == 0
        pngs = [f for f in os.listdir(out) if f.startswith("frame_")]
        assert len(pngs) == dataset[0].f
        assert (out / "video.gif").exists()
        assert (out / "mmode.png").exists()

    def test_same_request_identical_files(self, tiny_run, tmp_path):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            main(
                [
                    "sample", "--ckpt", ckpt_path, "--data", data_dir,
                    "--item", "1", "--ef", "0.4", "--seed", "9", "--out", str(out),
                ]
            )
            outs.append(out)
        for f in os.listdir(outs[0]):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f

    def test_one_step_single_invocation_logged(self, tiny_run, tmp_path, caplog):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        with caplog.at_level(logging.INFO, logger="echogen.cli"):
            main(
                [
                    "sample", "--ckpt", ckpt_path, "--data", data_dir,
                    "--item", "0", "--seed", "1", "--out", str(tmp_path / "s"),
                ]
            )
        assert any("1 model invocations" in m for m in caplog.messages)


class TestEvalCommand:
    def test_gen_task_respects_gap(self, tiny_run, tmp_path):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        out = tmp_path / "e"
        main(
            [
                "eval", "--ckpt", ckpt_path, "--data", data_dir,
                "--task", "gen", "--n", "6", "--out", str(out),
            ]
        )
        payload = json.loads((out / "metrics.json").read_text())
        for rec in payload["records"]:
            assert abs(rec["requested_ef"] - rec["source_ef"]) >= 0.05

    def test_perfect_oracle_sampler_r2_one(self, tiny_run):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        ckpt = load_checkpoint(ckpt_path)
        run_cfg = dataclasses.replace(
            ckpt.config, eval=EvalConfig(task="rec", n_items=6)
        )

        def echo_source(index, c, seed):
            item = dataset[index]
            vid = temporal_normalize(to_model_space(item.frames), run_cfg.data.capacity)
            return PaddedVideo(vid.frames, vid.p)

        report = _evaluate(run_cfg, ckpt, dataset, 6, run_sampler=echo_source)
        assert report.r2 == pytest.approx(1.0, abs=1e-12)
        assert report.mae == pytest.approx(0.0, abs=1e-12)

    def test_rs_three_logged_and_recorded(self, tiny_run, tmp_path, caplog):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        out = tmp_path / "ers"
        with caplog.at_level(logging.DEBUG, logger="echogen.cli"):
            main(
                [
                    "eval", "--ckpt", ckpt_path, "--data", data_dir,
                    "--task", "gen", "--n", "4", "--rs", "3", "--out", str(out),
                ]
            )
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["extra"]["rs"] == 3
        assert any("3 candidates" in m for m in caplog.messages)


class TestBenchCommand:
    def test_rows_and_invocation_counts(self, tiny_run, tmp_path):
        cfg, data_dir, ckpt_path, dataset = tiny_run
        out = tmp_path / "bench"
        rc = main(
            [
                "bench", "--ckpt", ckpt_path, "--data", data_dir,
                "--iters", "3", "--steps", "25", "--cfg", "--out", str(out),
            ]
        )
        assert rc == 0
        payload = json.loads((out / "bench.json").read_text())
        steps = {row["sampler"]: row["steps"] for row in payload["rows"]}
        assert steps["one_step_meanflow"] == 1
        assert steps["euler_linear"] == 25
        calls = {row["sampler"]: row["model_calls_per_video"] for row in payload["rows"]}
        assert calls["one_step_meanflow"] == 1
        assert calls["euler_linear"] == 25
        assert calls["euler_cfg"] == 50  # two passes per step
        assert payload["speedup_one_step_vs_euler"] > 1.0


class TestPipelineDeterminism:
    def test_metric_reports_byte_identical(self, tmp_path):
        cfg = _tiny_config()
        reports = []
        for tag in ("x", "y"):
            root = tmp_path / tag
            generate_dataset(cfg.data, root / "data", cfg.seed)
            ds = load_dataset(root / "data")
            train(cfg, ds, root / "run")
            rc = main(
                [
                    "eval", "--ckpt", str(root / "run" / "ckpt_final.bin"),
                    "--data", str(root / "data"), "--task", "gen",
                    "--n", "4", "--out", str(root / "eval"),
                ]
            )
            assert rc == 0
            reports.append((root / "eval" / "metrics.json").read_bytes())
        assert reports[0] == reports[1]
