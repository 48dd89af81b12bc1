import csv

import numpy as np
import pytest

from sadunet.audio import AudioClip, num_frames, stft
from sadunet.checkpoint import load_checkpoint
from sadunet.model import ModelConfig, init_params
from sadunet.synth import SynthSpec, gen_dataset, gen_pair, track_seeds
from sadunet.tensor import ContractError, Tensor, backward
from sadunet.train import (
    Adam,
    TrackPair,
    TrainOptions,
    augment_pair,
    frozen_batch,
    frozen_loss,
    l1_mask_loss,
    pair_features,
    periodic_path,
    read_manifest,
    split_pool,
    train,
    train_from_manifest,
    window_loss,
    window_samples,
)

SHORT = SynthSpec(duration_s=1.024, pattern_period_s=0.256)
TINY = ModelConfig(channels=4, layers=2, levels=2, window_frames=8)


@pytest.fixture(scope="module")
def pool():
    return [TrackPair(*gen_pair(SHORT, ss), name=f"t{i}") for i, ss in enumerate(track_seeds(0, 3))]


class TestLoss:
    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        Y, X1, X2, m1, m2 = (rng.uniform(0, 1, (5, 6)) for _ in range(5))
        got = l1_mask_loss((Tensor(m1), Tensor(m2)), Y, (X1, X2)).item()
        want = np.abs(m1 * Y - X1).sum() + np.abs(m2 * Y - X2).sum()
        assert got == pytest.approx(want, rel=1e-6)

    def test_symmetric_in_source_order(self):
        rng = np.random.default_rng(1)
        Y, X1, X2, m1, m2 = (rng.uniform(0, 1, (4, 4)) for _ in range(5))
        a = l1_mask_loss((Tensor(m1), Tensor(m2)), Y, (X1, X2)).item()
        b = l1_mask_loss((Tensor(m2), Tensor(m1)), Y, (X2, X1)).item()
        assert a == pytest.approx(b, rel=1e-6)

    def test_oracle_masks_vanish(self, pool):
        Y, X1, X2 = pair_features(pool[0], TINY)
        masks = [Tensor(x / (Y + 1e-8)) for x in (X1, X2)]
        assert l1_mask_loss(masks, Y, (X1, X2)).item() < 1e-3 * Y.sum()

    def test_shape_mismatch(self):
        with pytest.raises(Exception, match="shapes differ"):
            l1_mask_loss((Tensor(np.ones((2, 2))),), np.ones((2, 3)), (np.ones((2, 3)),))


class TestAdam:
    def test_first_step_oracle(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        g = rng.standard_normal((3, 4)).astype(np.float32)
        w0 = w.data.copy()
        w.grad = g.copy()
        opt = Adam({"w": w}, lr=1e-3)
        opt.step()
        # bias-corrected first step: m_hat = g, v_hat = g^2
        want = w0 - 1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w.data, want, rtol=1e-5, atol=1e-8)
        assert w.grad is None

    def test_second_step_oracle(self):
        w = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        g1, g2 = np.array([1.0, -2.0], np.float32), np.array([3.0, 1.0], np.float32)
        for g in (g1, g2):
            w.grad = g.copy()
            opt.step()
        b1, b2 = 0.9, 0.999
        m = (1 - b1) * (b1 * g1 + g2)
        v = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2)
        step2 = 0.1 * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + 1e-8)
        step1 = 0.1 * np.sign(g1)
        np.testing.assert_allclose(w.data, -(step1 + step2), rtol=1e-5)

    def test_lr_zero_is_identity(self):
        p = init_params(TINY, seed=0)
        before = {k: v.data.copy() for k, v in p.items()}
        for t in p.values():
            t.grad = np.ones_like(t.data)
        Adam(p, lr=0.0).step()
        assert all(np.array_equal(before[k], p[k].data) for k in p)

    def test_missing_grad(self):
        p = {"a": Tensor(np.ones(2), requires_grad=True)}
        with pytest.raises(ContractError, match="'a'"):
            Adam(p).step()


class TestData:
    def test_window_samples_gives_exact_frames(self):
        for T in (8, 64, 1250):
            cfg = ModelConfig(window_frames=T)
            assert num_frames(window_samples(cfg)) == T

    def test_augment_obeys_mixing(self, pool):
        pair = augment_pair(pool, np.random.default_rng(0), 4000)
        np.testing.assert_array_equal(pair.mixture().samples, pair.voice.samples + pair.accompaniment.samples)

    def test_augment_draw_order(self, pool):
        rng = np.random.default_rng(5)
        pair = augment_pair(pool, rng, 3000, (0.25, 1.25))
        ref = np.random.default_rng(5)
        vi, ai = int(ref.integers(3)), int(ref.integers(3))
        gv, ga = ref.uniform(0.25, 1.25, size=2)
        v, a = pool[vi].voice.samples, pool[ai].accompaniment.samples
        sv, sa = int(ref.integers(len(v))), int(ref.integers(len(a)))
        np.testing.assert_array_equal(pair.voice.samples, gv * np.roll(v, -sv)[:3000])
        np.testing.assert_array_equal(pair.accompaniment.samples, ga * np.roll(a, -sa)[:3000])
        assert rng.bit_generator.state == ref.bit_generator.state

    def test_augment_unit_gain_no_shift_is_identity(self, pool):
        class Fixed:
            def integers(self, n):
                return 0

            def uniform(self, lo, hi, size):
                return np.ones(size)

        pair = augment_pair(pool, Fixed(), None, (1, 1))
        np.testing.assert_array_equal(pair.voice.samples, pool[0].voice.samples)
        np.testing.assert_array_equal(pair.accompaniment.samples, pool[0].accompaniment.samples)

    def test_augment_too_long(self, pool):
        with pytest.raises(ValueError):
            augment_pair(pool, np.random.default_rng(0), 10 ** 6)

    def test_pair_length_mismatch(self):
        with pytest.raises(Exception, match="lengths differ"):
            TrackPair(AudioClip(np.zeros(5)), AudioClip(np.zeros(6)))

    def test_features_are_stft_magnitudes(self, pool):
        Y, X1, _ = pair_features(pool[1], TINY)
        assert Y.shape == (513, 8) and Y.dtype == np.float32
        want = np.abs(stft(pool[1].voice).bins[:, :8])
        np.testing.assert_allclose(X1, want, rtol=1e-6, atol=1e-7)

    def test_manifest(self, tmp_path):
        m = gen_dataset(2, SHORT, tmp_path, seed=0)
        pairs = read_manifest(m)
        assert [p.name for p in pairs] == ["voice_000", "voice_001"]
        bad = tmp_path / "bad.tsv"
        bad.write_text("only_one_column.wav\n")
        with pytest.raises(ValueError, match="bad.tsv:1"):
            read_manifest(bad)
        empty = tmp_path / "empty.tsv"
        empty.write_text("\n")
        with pytest.raises(ValueError, match="no tracks"):
            read_manifest(empty)

    def test_split_pool(self):
        assert split_pool(list(range(10)), 0.2) == (list(range(8)), [8, 9])
        assert split_pool([1], 0.5) == ([1], [])


class TestLoop:
    def test_small_lr_step_decreases_frozen_loss(self, pool):
        batch = frozen_batch(pool[:1], TINY)
        params = init_params(TINY, seed=1)
        before = frozen_loss(params, TINY, batch)
        backward(window_loss(params, TINY, batch[0]))
        Adam(params, lr=1e-6).step()
        assert frozen_loss(params, TINY, batch) < before

    def test_log_and_checkpoints(self, pool, tmp_path):
        out = tmp_path / "m.ckpt"
        opts = TrainOptions(lr=1e-3, steps=4, seed=0, checkpoint_every=2, val_every=2, val_fraction=0.34)
        res = train(pool, TINY, opts, out_ckpt=out, log_path=tmp_path / "log.csv")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["step", "loss", "val_loss"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
        assert rows[1][2] == "" and rows[2][2] != ""
        assert sorted(res.val_losses) == [2, 4]
        assert periodic_path(out, 2).exists() and periodic_path(out, 4).exists()
        assert load_checkpoint(out).step == 4
        assert all(np.isfinite(res.losses))

    def test_resume_is_bitwise(self, pool, tmp_path):
        out = tmp_path / "m.ckpt"
        opts = TrainOptions(lr=1e-3, steps=6, seed=4, checkpoint_every=3)
        full = train(pool, TINY, opts, out_ckpt=out, log_path=tmp_path / "a.csv")
        mid = load_checkpoint(periodic_path(out, 3))
        rest = train(pool, TINY, opts, out_ckpt=tmp_path / "r.ckpt", resume=mid)
        assert rest.losses == full.losses[3:]
        assert (tmp_path / "r.ckpt").read_bytes() == out.read_bytes()

    def test_resume_rejects_other_config(self, pool):
        res = train(pool, TINY, TrainOptions(steps=1, seed=0))
        other = ModelConfig(channels=4, layers=2, levels=2, window_frames=16)
        with pytest.raises(ValueError, match="config"):
            train(pool, other, TrainOptions(steps=2), resume=res.checkpoint)

    def test_same_seed_same_bytes(self, pool, tmp_path):
        opts = TrainOptions(lr=1e-3, steps=2, seed=9)
        train(pool, TINY, opts, out_ckpt=tmp_path / "a.ckpt")
        train(pool, TINY, opts, out_ckpt=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_batch_option_averages(self, pool):
        res = train(pool, TINY, TrainOptions(steps=1, seed=2, batch=2, augment=False))
        assert np.isfinite(res.losses[0])

    def test_from_manifest(self, tmp_path):
        m = gen_dataset(2, SHORT, tmp_path, seed=1)
        res = train_from_manifest(m, TINY, TrainOptions(steps=1, seed=0), out_ckpt=tmp_path / "x.ckpt")
        assert res.checkpoint.step == 1

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            train([], TINY, TrainOptions(steps=1))
