import time

import numpy as np
import pytest

from echogen.evalbench import (
    AdherenceRecord,
    MetricReport,
    ef_adherence,
    psnr,
    rejection_sample,
    ssim,
    throughput_bench,
)
from echogen.autodiff import Tensor
from echogen.seqcond import ConditioningSet, temporal_normalize
from echogen.toyecho import EllipseVideoSpec, generate_toy_video


def _records(req, obs, task="gen"):
    return [
        AdherenceRecord(requested_ef=r, observed_ef=o, task=task)
        for r, o in zip(req, obs)
    ]


class TestEfAdherence:
    def test_perfect_match(self):
        r2, mae, rmse = ef_adherence(_records([0.2, 0.4, 0.6], [0.2, 0.4, 0.6]))
        assert (r2, mae, rmse) == (1.0, 0.0, 0.0)

    def test_swapped_hand_value(self):
        # requested {10,20}%, observed {20,10}%: MAE=RMSE=0.10, R2 = -3
        r2, mae, rmse = ef_adherence(_records([0.10, 0.20], [0.20, 0.10]))
        assert mae == pytest.approx(0.10)
        assert rmse == pytest.approx(0.10)
        assert r2 == pytest.approx(-3.0)

    def test_single_record_r2_undefined(self):
        r2, mae, rmse = ef_adherence(_records([0.3], [0.5]))
        assert r2 is None
        assert mae == pytest.approx(0.2)
        assert rmse == pytest.approx(0.2)

    def test_degenerate_variance_r2_undefined(self):
        r2, _, _ = ef_adherence(_records([0.3, 0.3], [0.2, 0.4]))
        assert r2 is None

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            req = rng.uniform(0.1, 0.9, size=10)
            obs = np.clip(req + rng.normal(0, 0.1, size=10), 0, 1)
            _, mae, rmse = ef_adherence(_records(req, obs))
            assert rmse >= mae >= 0

    def test_permutation_invariant(self):
        req = [0.2, 0.5, 0.7, 0.35]
        obs = [0.25, 0.45, 0.75, 0.3]
        a = ef_adherence(_records(req, obs))
        b = ef_adherence(_records(req[::-1], obs[::-1]))
        assert a == b

    def test_gen_gap_enforced(self):
        with pytest.raises(ValueError):
            AdherenceRecord(0.40, 0.41, "gen", source_ef=0.42)
        AdherenceRecord(0.40, 0.41, "gen", source_ef=0.50)  # fine


class TestRejectionSampling:
    def _setup(self):
        rng = np.random.default_rng(0)
        vid = temporal_normalize(rng.standard_normal((4, 1, 4, 4)), 6)
        c = ConditioningSet(vid.frames, 0.5, vid.p)
        return c

    def _seed_sampler(self):
        # candidate "video" encodes its seed so the estimator can vary by it
        def sampler(fn, params, c, seed):
            frames = np.zeros_like(c.x_m)
            frames[c.p == 0] = seed
            from echogen.seqcond import PaddedVideo

            return PaddedVideo(frames, c.p)

        return sampler

    def test_k1_is_single_sampling(self):
        c = self._setup()
        est = lambda v: 0.3 + 0.01 * float(v.frames[0].ravel()[0])
        video, err = rejection_sample(
            None, None, c, 1, est, seed=10, sampler=self._seed_sampler()
        )
        assert err == pytest.approx(abs(0.3 + 0.1 - 0.5))

    def test_best_of_three(self):
        c = self._setup()
        # seeds 10,11,12 -> observed 0.40, 0.41, 0.42 -> best is seed 12
        est = lambda v: 0.3 + 0.01 * float(v.frames[0].ravel()[0])
        video, err = rejection_sample(
            None, None, c, 3, est, seed=10, sampler=self._seed_sampler()
        )
        assert err == pytest.approx(abs(0.42 - 0.5))

    def test_monotone_over_k(self):
        c = self._setup()
        est = lambda v: 0.3 + 0.013 * float(v.frames[0].ravel()[0])
        _, e1 = rejection_sample(None, None, c, 1, est, seed=7, sampler=self._seed_sampler())
        _, e3 = rejection_sample(None, None, c, 3, est, seed=7, sampler=self._seed_sampler())
        assert e3 <= e1

    def test_all_failures_raise(self):
        c = self._setup()

        def bad_estimator(v):
            raise RuntimeError("segmentation failed")

        with pytest.raises(RuntimeError):
            rejection_sample(
                None, None, c, 3, bad_estimator, seed=0, sampler=self._seed_sampler()
            )


class TestSSIM:
    def test_identity(self):
        frames, _ = generate_toy_video(EllipseVideoSpec(ef=0.4, f=4))
        assert ssim(frames[0, 0], frames[0, 0]) == pytest.approx(1.0)

    def test_independent_noise_low(self):
        rng = np.random.default_rng(1)
        vals = []
        for _ in range(100):
            a = rng.uniform(size=(64, 64))
            b = rng.uniform(size=(64, 64))
            vals.append(ssim(a, b))
        assert max(abs(v) for v in vals) < 0.1

    def test_constant_offset(self):
        frames, _ = generate_toy_video(EllipseVideoSpec(ef=0.4, f=4, noise_sigma=0.0))
        a = frames[0, 0]
        b = np.clip(a + 0.03, 0, 1)
        val = ssim(a, b)
        assert 0.8 < val < 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(0, 0.1, size=(32, 32)), 0, 1)
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-10

    def test_video_averaging(self):
        frames, _ = generate_toy_video(EllipseVideoSpec(ef=0.4, f=4))
        assert ssim(frames, frames) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((9, 9)))


class TestPSNR:
    def test_known_value(self):
        a = np.zeros((16, 16))
        b = np.full((16, 16), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)  # 10*log10(1/0.01)

    def test_identical_infinite(self):
        a = np.ones((8, 8)) * 0.3
        assert psnr(a, a) == float("inf")


class TestThroughput:
    def test_sleep_stub_rate(self):
        rate = throughput_bench(lambda: time.sleep(0.01), n_iter=20, warmup=2)
        assert 100 * 0.8 <= rate <= 100 * 1.2

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            throughput_bench(lambda: None, n_iter=0)


class TestMetricReport:
    def test_json_roundtrip_fields(self):
        import json

        recs = _records([0.2, 0.5], [0.25, 0.45])
        rep = MetricReport.from_records("gen", recs)
        payload = json.loads(rep.to_json())
        assert payload["task"] == "gen"
        assert payload["summary"]["n_records"] == 2
        assert payload["records"][0]["requested_ef"] == 0.2

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            MetricReport(task="rec", mae=0.5, rmse=0.4)

    def test_csv_written(self, tmp_path):
        recs = _records([0.2, 0.5], [0.25, 0.45])
        rep = MetricReport.from_records("gen", recs)
        path = tmp_path / "records.csv"
        rep.write_csv(path)
        text = path.read_text().strip().splitlines()
        assert len(text) == 3
        assert text[0].startswith("item_id,task,requested_ef")
