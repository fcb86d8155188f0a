"""Supernet training, optimizer, BN recalibration, evaluation and checkpoints."""

import math

import numpy as np
import pytest

from autospikformer import tensor as tc
from autospikformer.data import normalize, synthetic_patterns
from autospikformer.energy import model_energy
from autospikformer.model import Supernet, build_subnet, subnet_param_shapes
from autospikformer.space import CandidateArch, baseline_candidate, make_space, sample_candidate
from autospikformer.tensor import Rng
from autospikformer.training import (
    AdamW,
    CheckpointError,
    EvalResult,
    SupernetEvaluator,
    TrainConfig,
    TrainingDivergedError,
    calibration_batches,
    clip_grad_norm,
    evaluate,
    load_checkpoint,
    recalibrate_bn,
    sample_step_candidate,
    save_checkpoint,
    train_supernet,
)

TOY_T = make_space("toy_t")
TOY_S = make_space("toy_s")


def tiny_data(n_per_class=4, split="train"):
    return normalize(synthetic_patterns(seed=0, num_classes=3, size=8, samples_per_class=n_per_class, split=split))


def all_arrays(sn: Supernet) -> dict:
    out = {n: p.data.copy() for n, p in sn.params.items()}
    out.update({n: a.copy() for n, a in sn.bn_arrays().items()})
    return out


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"calib_batches": 0},
                                    {"clip_norm": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_cosine_schedule(self):
        c = TrainConfig(epochs=10, lr=1e-2, min_lr=1e-4)
        assert c.lr_at(0) == pytest.approx(1e-2)
        assert c.lr_at(5) == pytest.approx((1e-2 + 1e-4) / 2)
        assert c.lr_at(10) == pytest.approx(1e-4)
        assert all(c.lr_at(e) >= c.lr_at(e + 1) for e in range(10))

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_dict({"bogus": 1})


class TestAdamW:
    def reference(self, w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * wd * w
            w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        return w

    def test_full_mask_matches_textbook_adamw(self, np_rng):
        w0 = np_rng.normal(size=(3, 4)).astype(np.float32)
        grads = [np_rng.normal(size=(3, 4)).astype(np.float32) for _ in range(5)]
        p = tc.parameter(w0.copy(), "x.w")
        opt = AdamW({"x.w": p}, lr=1e-2, weight_decay=0.1)
        for g in grads:
            p.grad = g
            opt.step({"x.w": np.ones((3, 4), bool)})
        ref = self.reference(w0.astype(np.float64), grads, 1e-2, 0.1)
        np.testing.assert_allclose(p.data, ref, rtol=1e-5, atol=1e-6)

    def test_masked_elements_untouched_and_counted_separately(self, np_rng):
        w0 = np_rng.normal(size=(2, 3)).astype(np.float32)
        p = tc.parameter(w0.copy(), "x.w")
        opt = AdamW({"x.w": p}, lr=1e-2, weight_decay=0.1)
        left = np.zeros((2, 3), bool)
        left[:, :1] = True
        for k in range(3):
            p.grad = np.ones((2, 3), np.float32)
            opt.step({"x.w": left if k < 2 else np.ones((2, 3), bool)})
        assert opt.t["x.w"][:, 0].tolist() == [3, 3]
        assert opt.t["x.w"][:, 1:].ravel().tolist() == [1] * 4
        # a column seen once gets a first-step (bias-corrected) update of exactly lr * (1 - wd*lr) scaling
        expected = w0[:, 1:] * (1 - 1e-2 * 0.1) - 1e-2 * 1.0 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data[:, 1:], expected, rtol=1e-5)

    def test_no_decay_on_biases_and_norm_params(self):
        p = tc.parameter(np.ones(3, np.float32), "head.b")
        opt = AdamW({"head.b": p}, lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(3, np.float32)
        opt.step({"head.b": np.ones(3, bool)})
        np.testing.assert_array_equal(p.data, 1.0)


class TestClipGradNorm:
    def test_rescales_to_max_norm(self, np_rng):
        a = tc.parameter(np.zeros((2, 2)), "a")
        b = tc.parameter(np.zeros(3), "b")
        a.grad = np.full((2, 2), 3.0, np.float32)
        b.grad = np.array([4.0, 0.0, 0.0], np.float32)
        masks = {"a": np.ones((2, 2), bool), "b": np.ones(3, bool)}
        norm = clip_grad_norm({"a": a, "b": b}, masks, 1.0)
        assert norm == pytest.approx(math.sqrt(36 + 16))
        total = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_small_gradients_unchanged(self):
        a = tc.parameter(np.zeros(2), "a")
        a.grad = np.array([0.1, 0.2], np.float32)
        clip_grad_norm({"a": a}, {"a": np.ones(2, bool)}, 1.0)
        np.testing.assert_array_equal(a.grad, np.array([0.1, 0.2], np.float32))


class TestTrainSupernet:
    def test_one_batch_epoch_touches_only_sampled_slices(self):
        ds = tiny_data()
        cfg = TrainConfig(epochs=1, batch_size=len(ds), lr=1e-2, space="toy_t")
        sn = Supernet(TOY_T, num_classes=3, seed=0)
        before = {n: p.data.copy() for n, p in sn.params.items()}
        cand = sample_step_candidate(sn, cfg.seed, 0, 0)
        arch = TOY_T.to_arch(cand)
        train_supernet(sn, ds, cfg)
        sub_shapes = subnet_param_shapes(arch, 3, 3)
        for name, p in sn.params.items():
            changed = p.data != before[name]
            if name in sub_shapes:
                region = tuple(slice(0, s) for s in sub_shapes[name])
                outside = changed.copy()
                outside[region] = False
                assert not outside.any(), name
            else:
                assert not changed.any(), name
        assert any((sn.params[n].data != before[n]).any() for n in sub_shapes)

    def test_same_seed_same_history_and_weights(self):
        ds = tiny_data()
        cfg = TrainConfig(epochs=2, batch_size=4, lr=5e-3, space="toy_s")
        runs = []
        for _ in range(2):
            sn = Supernet(TOY_S, num_classes=3, seed=0)
            _, _, hist = train_supernet(sn, ds, cfg)
            runs.append((hist, all_arrays(sn)))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert runs[0][1][k].tobytes() == runs[1][1][k].tobytes()

    def test_candidate_sampling_is_uniform_per_gene(self):
        sn = Supernet(TOY_S, num_classes=3, seed=0)
        ts = [sample_step_candidate(sn, 0, e, s).time_step for e in range(30) for s in range(20)]
        counts = np.bincount(ts)[2:]
        assert abs(counts / len(ts) - 1 / 3).max() < 0.05

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_is_reported(self):
        ds = tiny_data()
        sn = Supernet(TOY_S, num_classes=3, seed=0)
        sn.params["head.b"].data[...] = 3e38
        sn.params["head.w"].data[...] = 3e38
        with pytest.raises(TrainingDivergedError, match="epoch 0 step 0"):
            train_supernet(sn, ds, TrainConfig(epochs=1, batch_size=4, space="toy_s"))

    def test_empty_dataset(self):
        ds = tiny_data().subset(np.array([], int))
        with pytest.raises(ValueError):
            train_supernet(Supernet(TOY_S, num_classes=3), ds, TrainConfig())

    def test_resume_equals_uninterrupted(self, tmp_path):
        ds = tiny_data()
        cfg = TrainConfig(epochs=3, batch_size=6, lr=5e-3, space="toy_s")
        sn = Supernet(TOY_S, num_classes=3, seed=0)
        _, _, full = train_supernet(sn, ds, cfg)

        sn2 = Supernet(TOY_S, num_classes=3, seed=0)
        _, opt, hist = train_supernet(sn2, ds, cfg, stop_after=1)
        save_checkpoint(tmp_path, sn2, opt, cfg, 1, hist)
        sn3, opt3, manifest = load_checkpoint(tmp_path, "toy_s")
        _, _, resumed = train_supernet(sn3, ds, cfg, opt3, start_epoch=manifest["epoch"],
                                       history=manifest["loss_history"])
        assert resumed == full
        a, b = all_arrays(sn), all_arrays(sn3)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestRecalibration:
    @pytest.fixture(scope="class")
    @classmethod
    def trained(cls):
        ds = tiny_data(6)
        sn = Supernet(TOY_T, num_classes=3, seed=0)
        train_supernet(sn, ds, TrainConfig(epochs=2, batch_size=6, lr=5e-3, space="toy_t"))
        return sn, ds

    def test_idempotent_and_weights_untouched(self, trained):
        sn, ds = trained
        cand = sample_candidate(TOY_T, Rng(4))
        w = {n: p.data.copy() for n, p in sn.params.items()}
        store = {n: a.copy() for n, a in sn.bn_arrays().items()}
        calib = [ds.images[:6], ds.images[6:12]]
        a = recalibrate_bn(build_subnet(sn, cand), calib).bn_snapshot()
        b = recalibrate_bn(build_subnet(sn, cand), calib).bn_snapshot()
        for k in a:
            np.testing.assert_allclose(a[k], b[k], atol=1e-6)
        assert all(w[n].tobytes() == p.data.tobytes() for n, p in sn.params.items())
        assert all(store[n].tobytes() == arr.tobytes() for n, arr in sn.bn_arrays().items())

    def test_stats_differ_from_training_store(self, trained):
        sn, ds = trained
        arch = CandidateArch(2, (3.0, 3.0), (6, 6), (1.0, 1.0), (2.0, 2.0), 2, 24)
        sub = build_subnet(sn, arch)
        fresh = recalibrate_bn(sub, [ds.images[:6]]).bn_snapshot()
        stored = sub.bn_snapshot()
        assert any(not np.allclose(fresh[k], stored[k]) for k in fresh)

    def test_needs_a_batch(self, trained):
        sn, _ = trained
        with pytest.raises(ValueError):
            recalibrate_bn(build_subnet(sn, baseline_candidate(TOY_T)), [])

    def test_evaluation_energy_is_model_energy(self, trained):
        sn, ds = trained
        cand = sample_candidate(TOY_T, Rng(8))
        sub = recalibrate_bn(build_subnet(sn, cand), [ds.images[:6]])
        res = evaluate(sub, ds, batch_size=5, candidate=cand)
        assert 0.0 <= res.accuracy <= 1.0 and res.total == len(ds)
        rep = model_energy(sub.arch, res.fr_trace, image_size=(8, 8), num_classes=3)
        assert res.energy == rep.total_energy
        assert 0.0 <= res.mean_fr <= 1.0

    def test_evaluator_returns_accuracy_energy_fr(self, trained):
        sn, ds = trained
        cfg = TrainConfig(batch_size=6, calib_batches=2)
        ev = SupernetEvaluator(sn, calibration_batches(ds, cfg), ds)
        acc, energy, fr = ev(baseline_candidate(TOY_T))
        res = ev.results[baseline_candidate(TOY_T)]
        assert (acc, energy, fr) == (res.accuracy, res.energy, res.mean_fr)
        assert isinstance(res, EvalResult) and res.to_json()["candidate"].startswith("(4,")

    def test_calibration_batches_fixed(self, trained):
        _, ds = trained
        cfg = TrainConfig(batch_size=4, calib_batches=3)
        a, b = calibration_batches(ds, cfg), calibration_batches(ds, cfg)
        assert len(a) == 3 and all(np.array_equal(x, y) for x, y in zip(a, b))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        sn = Supernet(TOY_S, num_classes=3, seed=2)
        cfg = TrainConfig(space="toy_s")
        opt = AdamW(sn.params)
        opt.t["head.w"][...] = 7
        save_checkpoint(tmp_path, sn, opt, cfg, 4, [1.0, 0.5])
        sn2, opt2, manifest = load_checkpoint(tmp_path)
        assert manifest["epoch"] == 4 and manifest["loss_history"] == [1.0, 0.5]
        a, b = all_arrays(sn), all_arrays(sn2)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert (opt2.t["head.w"] == 7).all()
        assert (tmp_path / "loss_history.csv").read_text().splitlines()[0] == "epoch,loss"

    def test_blob_is_little_endian_float32_in_manifest_order(self, tmp_path):
        import json
        sn = Supernet(TOY_S, num_classes=3, seed=2)
        save_checkpoint(tmp_path, sn, None, TrainConfig(space="toy_s"), 0, [])
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        blob = (tmp_path / "weights.bin").read_bytes()
        offset = 0
        for e in manifest["tensors"]:
            assert e["offset"] == offset and e["dtype"] == "float32-le"
            offset += e["nbytes"]
        assert offset == len(blob)
        first = manifest["tensors"][0]
        arr = np.frombuffer(blob, "<f4", count=int(np.prod(first["shape"])))
        np.testing.assert_array_equal(arr.reshape(first["shape"]), sn.params[first["name"]].data)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            load_checkpoint(tmp_path)

    def test_space_mismatch(self, tmp_path):
        sn = Supernet(TOY_S, num_classes=3)
        save_checkpoint(tmp_path, sn, None, TrainConfig(space="toy_s"), 0, [])
        with pytest.raises(CheckpointError, match="toy_s"):
            load_checkpoint(tmp_path, "toy_t")

    def test_truncated_blob(self, tmp_path):
        sn = Supernet(TOY_S, num_classes=3)
        save_checkpoint(tmp_path, sn, AdamW(sn.params), TrainConfig(space="toy_s"), 0, [])
        blob = tmp_path / "weights.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path)
