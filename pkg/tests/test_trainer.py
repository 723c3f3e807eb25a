import numpy as np
import pytest

from fairssl.errors import ConfigError, DataError, NumericError
from fairssl.losses import LossConfig, MultiviewedBatch, multi_attribute_anchor_stats, validation_topk_loss
from fairssl.network import GradientBundle, Layer, ModelParams, backward, forward_embed, set_frozen
from fairssl.seeding import substream
from fairssl.trainer import (
    AdamW,
    LrSchedule,
    TrainConfig,
    make_views,
    meta_stage,
    meta_step,
    meta_weights,
    per_sample_alignments,
    pretrain_epoch,
    pretrain_stage,
    staged_train,
    stratified_batches,
)


def tiny_params(seed=0, d=6):
    return ModelParams.create(d, [8, 5], [6, 6, 4], num_classes=2, seed=seed)


def toy_data(rng, n=64, d=6, n_attrs=2):
    X = rng.standard_normal((n, d)).astype(np.float32)
    labels = rng.integers(0, 2, size=(n, n_attrs))
    return X, labels


class TestMakeViews:
    def test_identity_when_disabled(self, rng):
        x = rng.standard_normal((4, 5))
        v1, v2 = make_views(x, rng, noise_sigma=0.0, mask_prob=0.0, scale_jitter=0.0)
        assert np.array_equal(v1, x)
        assert np.array_equal(v2, x)

    def test_reproducible_under_seed(self, rng):
        x = rng.standard_normal((4, 5))
        a = make_views(x, substream(9, "v"), 0.1, 0.2, 0.1)
        b = make_views(x, substream(9, "v"), 0.1, 0.2, 0.1)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_noise_variance(self):
        x = np.zeros((10000, 4))
        rng = substream(3, "noise")
        v1, _ = make_views(x, rng, noise_sigma=0.1, mask_prob=0.0, scale_jitter=0.0)
        var = v1.var()
        assert abs(var - 0.01) < 0.05 * 0.01

    def test_single_vector(self, rng):
        v1, v2 = make_views(np.ones(5), rng, 0.0, 0.0, 0.0)
        assert v1.shape == (5,)


class TestSchedule:
    def test_warmup_boundary(self):
        s = LrSchedule(1.0, warmup_steps=10, total_steps=100)
        assert s.lr(0) == 0.0
        assert abs(s.lr(5) - 0.5) < 1e-12
        assert abs(s.lr(10) - 1.0) < 1e-12

    def test_cosine_reaches_zero(self):
        s = LrSchedule(2.0, warmup_steps=0, total_steps=50)
        assert abs(s.lr(50)) < 1e-12
        assert s.lr(25) == pytest.approx(1.0)

    def test_constant(self):
        s = LrSchedule(0.3)
        assert s.lr(0) == 0.3
        assert s.lr(1000) == 0.3


class TestAdamW:
    def test_zero_grads_no_decay_fixed_point(self):
        params = tiny_params()
        snap = {n: l.weight.copy() for n, l in params.named_layers()}
        opt = AdamW(params, LrSchedule(0.1), weight_decay=0.0)
        for _ in range(3):
            opt.step(params, GradientBundle.zeros_like(params))
        for name, layer in params.named_layers():
            assert np.array_equal(layer.weight, snap[name])

    def test_constant_gradient_hand_recurrence(self):
        # one 1x1 linear layer, constant gradient g, three hand-derived steps
        params = ModelParams(
            [Layer(np.array([[1.0]]), np.zeros(1), "identity")],
            [Layer(np.array([[1.0]]), np.zeros(1), "identity") for _ in range(3)],
            Layer(np.array([[1.0]]), np.zeros(1), "identity"),
        )
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        g = 0.5
        opt = AdamW(params, LrSchedule(lr), weight_decay=0.0, beta1=b1, beta2=b2, eps=eps)
        grads = GradientBundle.zeros_like(params)
        grads["encoder.0"][0][...] = g

        theta = 1.0
        m = v = 0.0
        for t in range(1, 4):
            opt.step(params, grads)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            theta -= lr * mhat / (np.sqrt(vhat) + eps)
            assert params.encoder[0].weight[0, 0] == pytest.approx(theta, abs=1e-15)

    def test_decoupled_weight_decay(self):
        params = tiny_params()
        w0 = params.encoder[0].weight.copy()
        opt = AdamW(params, LrSchedule(0.1), weight_decay=0.5)
        opt.step(params, GradientBundle.zeros_like(params))
        # zero gradient: only the decay term acts, biases untouched
        assert np.allclose(params.encoder[0].weight, w0 * (1 - 0.1 * 0.5))

    def test_nonfinite_gradient_aborts(self):
        params = tiny_params()
        grads = GradientBundle.zeros_like(params)
        grads["head"][0][0, 0] = np.nan
        opt = AdamW(params, LrSchedule(0.1))
        with pytest.raises(NumericError, match="head"):
            opt.step(params, grads)

    def test_frozen_layer_untouched_even_with_decay(self):
        params = tiny_params()
        set_frozen(params, ["encoder.0"])
        snap = params.encoder[0].weight.copy()
        opt = AdamW(params, LrSchedule(0.1), weight_decay=0.9)
        grads = GradientBundle.zeros_like(params)
        grads["encoder.1"][0][...] = 1.0
        opt.step(params, grads)
        assert np.array_equal(params.encoder[0].weight, snap)


class TestBatches:
    def test_partition_without_labels(self, rng):
        batches = stratified_batches(100, 25, rng)
        idx = np.concatenate(batches)
        assert sorted(idx.tolist()) == list(range(100))

    def test_partial_batch_dropped(self, rng):
        batches = stratified_batches(103, 25, rng)
        assert [len(b) for b in batches] == [25, 25, 25, 25]

    def test_small_dataset_single_batch(self, rng):
        batches = stratified_batches(10, 32, rng)
        assert len(batches) == 1 and len(batches[0]) == 10

    def test_stratified_class_coverage(self, rng):
        labels = np.array([0] * 50 + [1] * 50)
        batches = stratified_batches(100, 20, rng, labels)
        for b in batches:
            counts = np.bincount(labels[b], minlength=2)
            assert counts.min() >= 2


class TestPretrain:
    def test_zero_lr_leaves_parameters(self, rng):
        params = tiny_params()
        X, labels = toy_data(rng)
        snap = {n: l.weight.copy() for n, l in params.named_layers()}
        cfg = TrainConfig(batch_size=16, epochs=1, base_lr=0.0, warmup_epochs=0, seed=0)
        opt = AdamW(params, LrSchedule(0.0), weight_decay=0.0)
        pretrain_epoch(params, X, labels, [0, 1], LossConfig(), cfg, opt,
                       substream(0, "s"), substream(0, "v"))
        for name, layer in params.named_layers():
            assert np.array_equal(layer.weight, snap[name])

    def test_loss_decreases_on_fixed_batch(self, rng):
        params = tiny_params(seed=2)
        X = rng.standard_normal((16, 6)).astype(np.float32)
        labels = np.tile(np.array([0, 1]), 8)[:, None]
        cfg = TrainConfig(batch_size=16, epochs=1, base_lr=5e-3, warmup_epochs=0, seed=0,
                          noise_sigma=0.0, mask_prob=0.0, scale_jitter=0.0)
        opt = AdamW(params, LrSchedule(5e-3), weight_decay=0.0)
        losses = []
        for _ in range(200):
            m = pretrain_epoch(params, X, labels, [0], LossConfig(temperature=0.2), cfg, opt,
                               substream(0, "s"), substream(0, "v"))
            losses.append(m["loss"])
        first = np.mean(losses[:20])
        last = np.mean(losses[-20:])
        assert last < first

    def test_same_seed_bit_identical(self, rng):
        X, labels = toy_data(rng, n=48)

        def run():
            params = tiny_params(seed=1)
            cfg = TrainConfig(batch_size=16, epochs=2, base_lr=1e-3, warmup_epochs=1, seed=5)
            pretrain_stage(params, X, labels, [0, 1], LossConfig(), cfg, epochs=2)
            return {n: (l.weight.copy(), l.bias.copy()) for n, l in params.named_layers()}

        a, b = run(), run()
        for name in a:
            assert np.array_equal(a[name][0], b[name][0])
            assert np.array_equal(a[name][1], b[name][1])

    def test_contrastive_objective_runs(self, rng):
        params = tiny_params()
        X, labels = toy_data(rng, n=32)
        cfg = TrainConfig(batch_size=16, epochs=1, base_lr=1e-3, warmup_epochs=0,
                          seed=0, objective="contrastive")
        opt = AdamW(params, LrSchedule(1e-3))
        m = pretrain_epoch(params, X, labels, [0, 1], LossConfig(), cfg, opt,
                           substream(0, "s"), substream(0, "v"))
        assert np.isfinite(m["loss"])

    def test_empty_dataset(self, rng):
        cfg = TrainConfig(seed=0)
        with pytest.raises(DataError):
            pretrain_epoch(tiny_params(), np.zeros((0, 6), dtype=np.float32), np.zeros((0, 1)),
                           [0], LossConfig(), cfg, AdamW(tiny_params(), LrSchedule(1e-3)),
                           substream(0, "s"), substream(0, "v"))


class TestMetaWeights:
    def test_aligned_and_orthogonal(self):
        state = meta_weights(np.array([1.0, 0.0]), inner_lr=0.1)
        assert state.w.tolist() == [1.0, 0.0]
        assert not state.skipped

    def test_zero_sum_guard(self):
        state = meta_weights(np.array([-1.0, -0.5, 0.0]), inner_lr=0.1)
        assert state.skipped
        assert np.all(state.w == 0.0)

    def test_weights_nonnegative_and_sum_to_one_or_zero(self, rng):
        for _ in range(50):
            state = meta_weights(rng.standard_normal(16), inner_lr=0.3)
            assert np.all(state.w >= 0)
            total = state.w.sum()
            assert abs(total - 1.0) < 1e-9 or total == 0.0

    def test_scaling_invariance_exact(self, rng):
        a = rng.standard_normal(10)
        base = meta_weights(a, 0.2)
        for c in (2.0, 4.0, 0.25):  # powers of two scale exactly in floating point
            scaled = meta_weights(c * a, 0.2)
            assert np.array_equal(base.w, scaled.w)
        near = meta_weights(1.7 * a, 0.2)
        assert np.max(np.abs(near.w - base.w)) < 1e-12

    def test_linear_in_inner_lr(self, rng):
        a = rng.standard_normal(6)
        g1 = meta_weights(a, 1e-3).grad_eps
        g2 = meta_weights(a, 2e-3).grad_eps
        assert np.allclose(g2, 2.0 * g1)
        assert np.max(np.abs(meta_weights(a, 1e-9).grad_eps)) < 1e-8

    def test_bad_inner_lr(self):
        with pytest.raises(ConfigError):
            meta_weights(np.ones(2), 0.0)


def build_meta_inputs(rng, n=8, d=6, n_attrs=2, seed=0):
    params = tiny_params(seed=seed, d=d)
    X = rng.standard_normal((n * 3, d)).astype(np.float32)
    labels = rng.integers(0, 2, size=(n * 3, n_attrs))
    idx = np.arange(n)
    val_x = rng.standard_normal((6, d))
    val_y = rng.integers(0, 2, size=6)
    return params, X, labels, idx, val_x, val_y


class TestMetaStep:
    def test_alignments_match_per_sample_gradients(self, rng):
        # <g_v, g_i> via the forward-mode shortcut equals explicit per-sample backprop
        params, X, labels, idx, val_x, val_y = build_meta_inputs(rng)
        cfg = TrainConfig(batch_size=8, seed=0, noise_sigma=0.0, mask_prob=0.0, scale_jitter=0.0)
        tau = 0.4
        n = idx.size
        views = np.vstack([X[idx], X[idx]]).astype(np.float64)
        origins = np.concatenate([np.arange(n), np.arange(n)])
        vlabels = np.vstack([labels[idx], labels[idx]])
        _, Z, tape = forward_embed(params, views)
        batch = MultiviewedBatch(Z, origins, vlabels)
        terms, R_list, _ = multi_attribute_anchor_stats(batch, [0, 1], tau)
        _, g_v = validation_topk_loss(params, val_x, val_y, 3)

        from fairssl.network import forward_jvp

        _, dZ_dir = forward_jvp(params, tape, g_v)
        fast = per_sample_alignments(Z, dZ_dir, R_list, tau)

        for anchor in range(2 * n):
            u = np.zeros_like(Z)
            for R in R_list:
                r = R[anchor]
                u[anchor] += (r @ Z) / tau / len(R_list)
                u += np.outer(r, Z[anchor]) / tau / len(R_list)
            g_i = backward(params, tape, d_projection=u)
            assert abs(g_v.dot(g_i) - fast[anchor]) < 1e-10 * max(1.0, abs(fast[anchor]))

    def test_zero_sum_guard_skips_update(self, rng):
        # flipping the validation labels of a fitted head opposes every
        # training gradient; search a few seeds for a fully opposed batch
        for seed in range(30):
            r = np.random.default_rng(seed)
            params, X, labels, idx, val_x, val_y = build_meta_inputs(r, seed=seed)
            cfg = TrainConfig(batch_size=8, seed=seed, noise_sigma=0.0, mask_prob=0.0,
                              scale_jitter=0.0, train_head_in_meta=True)
            opt = AdamW(params, LrSchedule(1e-3))
            snap = {n_: (l.weight.copy(), l.bias.copy()) for n_, l in params.named_layers()}
            metrics = meta_step(params, X, labels, idx, val_x, val_y, [0, 1],
                                LossConfig(), cfg, opt, substream(seed, "v"))
            if metrics["skipped"]:
                for name, layer in params.named_layers():
                    assert np.array_equal(layer.weight, snap[name][0])
                    assert np.array_equal(layer.bias, snap[name][1])
                return
        pytest.fail("no fully opposed batch found in 30 seeds")

    def test_step_updates_and_reports(self, rng):
        params, X, labels, idx, val_x, val_y = build_meta_inputs(rng, seed=4)
        cfg = TrainConfig(batch_size=8, seed=0)
        opt = AdamW(params, LrSchedule(1e-3))
        metrics = meta_step(params, X, labels, idx, val_x, val_y, [0, 1],
                            LossConfig(), cfg, opt, substream(1, "v"))
        state = metrics["meta_state"]
        assert np.all(state.w >= 0)
        assert state.w.sum() == pytest.approx(1.0) or metrics["skipped"]
        if not metrics["skipped"]:
            assert metrics["weight_entropy"] >= 0.0

    def test_meta_gradient_matches_epsilon_finite_difference(self, rng):
        params, X, labels, idx, val_x, val_y = build_meta_inputs(rng, n=4, seed=7)
        tau, alpha, k = 0.5, 0.05, 3
        n = idx.size
        views = np.vstack([X[idx], X[idx]]).astype(np.float64)
        origins = np.concatenate([np.arange(n), np.arange(n)])
        vlabels = np.vstack([labels[idx], labels[idx]])
        _, Z, tape = forward_embed(params, views)
        batch = MultiviewedBatch(Z, origins, vlabels)
        _, R_list, _ = multi_attribute_anchor_stats(batch, [0, 1], tau)
        _, g_v = validation_topk_loss(params, val_x, val_y, k)

        from fairssl.network import forward_jvp

        _, dZ_dir = forward_jvp(params, tape, g_v)
        anchor_align = per_sample_alignments(Z, dZ_dir, R_list, tau)
        sample_align = 0.5 * (anchor_align[:n] + anchor_align[n:])
        grad_eps = meta_weights(sample_align, alpha).grad_eps

        # independent oracle: materialize g_i, take the virtual step, vary eps
        g = []
        for i in range(n):
            u = np.zeros_like(Z)
            for R in R_list:
                for view in (i, i + n):
                    r = R[view]
                    u[view] += (r @ Z) / tau * 0.5 / len(R_list)
                    u += np.outer(r, Z[view]) / tau * 0.5 / len(R_list)
            g.append(backward(params, tape, d_projection=u))

        def val_at(eps):
            p = params.copy()
            for name, layer in p.named_layers():
                for j in range(n):
                    dw, db = g[j][name]
                    layer.weight -= alpha * eps[j] * dw
                    layer.bias -= alpha * eps[j] * db
            return validation_topk_loss(p, val_x, val_y, k)[0]

        delta = 1e-3
        for i in range(n):
            e = np.zeros(n)
            e[i] = delta
            fd = (val_at(e) - val_at(-e)) / (2 * delta)
            assert abs(fd - grad_eps[i]) <= 1e-2 * max(abs(fd), abs(grad_eps[i]), 1e-12)


class TestStagedTraining:
    def test_stage_split_one_is_pure_pretraining(self, rng):
        X, labels = toy_data(rng, n=48)
        params = tiny_params()
        cfg = TrainConfig(batch_size=16, epochs=4, stage_split=1.0, warmup_epochs=0, seed=3)
        history, summary = staged_train(params, X, labels, [0, 1], None, None, LossConfig(), cfg)
        assert len(history) == 4
        assert all(h["stage"] == "pretrain" for h in history)
        assert summary["meta_epochs"] == 0

    def test_stage_epoch_counts(self, rng):
        X, labels = toy_data(rng, n=64)
        params = tiny_params()
        cfg = TrainConfig(batch_size=16, epochs=10, stage_split=0.7, warmup_epochs=0,
                          seed=3, val_subset_size=16, val_topk=4, val_batch_size=8)
        val_idx = np.arange(16)
        val_y = labels[:16, 0]
        history, summary = staged_train(params, X, labels, [0, 1], val_idx, val_y,
                                        LossConfig(), cfg)
        stages = [h["stage"] for h in history]
        assert stages.count("pretrain") == 7
        assert stages.count("meta") == 3
        assert summary["meta_epochs"] == 3
        assert [h["epoch"] for h in history] == list(range(1, 11))

    def test_frozen_layers_byte_identical_through_meta_stage(self, rng):
        X, labels = toy_data(rng, n=64)
        params = tiny_params(seed=6)
        cfg = TrainConfig(batch_size=16, epochs=4, stage_split=0.5, warmup_epochs=0,
                          seed=2, val_subset_size=16, val_topk=4, val_batch_size=8)
        pretrain_stage(params, X, labels, [0, 1], LossConfig(), cfg, epochs=2)
        frozen_names = [f"encoder.{i}" for i in range(len(params.encoder) - 1)]
        before = {}
        # meta_stage freezes and fits the head; snapshot the to-be-frozen layers first
        for name in frozen_names:
            layer = params.layer(name)
            before[name] = (layer.weight.tobytes(), layer.bias.tobytes())
        meta_stage(params, X, labels, [0, 1], np.arange(16), labels[:16, 0],
                   LossConfig(), cfg, epochs=2, epoch_offset=2)
        for name in frozen_names:
            layer = params.layer(name)
            assert layer.weight.tobytes() == before[name][0]
            assert layer.bias.tobytes() == before[name][1]

    def test_meta_stage_requires_val_subset(self, rng):
        X, labels = toy_data(rng, n=32)
        cfg = TrainConfig(batch_size=16, epochs=4, stage_split=0.5, seed=0)
        with pytest.raises(ConfigError):
            staged_train(tiny_params(), X, labels, [0, 1], None, None, LossConfig(), cfg)
