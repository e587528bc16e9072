import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxoutlier.network import (
    DegenerateCosineError,
    LayerParams,
    ModelFormatError,
    SgdConfig,
    SiameseModel,
    _encode_all,
    cosine,
    decode_model,
    encode,
    encode_model,
    finetune,
    load_model,
    mean_pair_cosine,
    pair_loss,
    pair_loss_grad,
    pretrain_layer,
    pretrain_stack,
    reconstruct,
    reconstruction_mse,
    save_model,
)
from voxoutlier.volume import PairBatch

from oracles import central_differences, encode_by_hand, loss_by_hand, reconstruct_by_hand


def random_model(dims=(6, 4, 3), alpha=0.66, seed=0, bias_scale=0.5):
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers.append(LayerParams(rng.normal(size=(b, a)), bias_scale * rng.normal(size=b),
                                  bias_scale * rng.normal(size=a)))
    return SiameseModel(layers, alpha=alpha)


def zero_model(dims=(6, 4, 3)):
    return SiameseModel([LayerParams(np.zeros((b, a)), np.zeros(b), np.zeros(a))
                         for a, b in zip(dims[:-1], dims[1:])])


def oracle_args(m):
    return ([l.W.tolist() for l in m.layers], [l.b_enc.tolist() for l in m.layers],
            [l.b_dec.tolist() for l in m.layers])


class TestForward:
    def test_zero_params_encode(self):
        assert np.all(encode(zero_model(), np.ones(6)) == 0.5)

    def test_zero_params_reconstruct(self):
        assert np.all(reconstruct(zero_model(), np.ones(6)) == 0.5)

    @pytest.mark.parametrize("dims", [(6, 4), (6, 4, 3), (9, 7, 5, 2)])
    def test_shapes(self, dims):
        m = random_model(dims)
        x = np.random.default_rng(1).random(dims[0])
        assert encode(m, x).shape == (dims[-1],)
        assert reconstruct(m, x).shape == (dims[0],)
        assert encode(m, np.tile(x, (5, 1))).shape == (5, dims[-1])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            encode(random_model(), np.ones(5))
        with pytest.raises(ValueError):
            reconstruct(random_model(), np.ones(7))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_hand_evaluation(self, seed):
        m = random_model(seed=seed)
        x = np.random.default_rng(100 + seed).random(6)
        Ws, be, bd = oracle_args(m)
        np.testing.assert_allclose(encode(m, x), encode_by_hand(Ws, be, x), rtol=0, atol=1e-12)
        np.testing.assert_allclose(reconstruct(m, x), reconstruct_by_hand(Ws, be, bd, x), rtol=0, atol=1e-12)

    def test_outputs_in_open_interval(self):
        m = random_model(seed=3)
        h = encode(m, np.random.default_rng(0).random((50, 6)))
        assert np.all((h > 0) & (h < 1))


class TestLoss:
    def test_extremes(self):
        # alpha=0.66, zero reconstruction error, identical codes
        m = zero_model()
        x = np.full(6, 0.5)
        assert pair_loss(m, x, x, x, x) == pytest.approx(-0.34, abs=1e-15)

    def test_reconstruction_only(self):
        m = zero_model()
        m.alpha = 1.0
        x1 = np.full(6, 0.5)
        x1[0] += np.sqrt(0.5)
        x2 = np.full(6, 0.5)
        x2[3] -= 0.5
        t = np.ones(6)
        assert pair_loss(m, x1, x2, t, t) == pytest.approx(0.75, abs=1e-12)

    @pytest.mark.parametrize("alpha", [0.0, 0.66, 1.0])
    def test_matches_formula(self, alpha):
        rng = np.random.default_rng(7)
        m = random_model(alpha=alpha, seed=11)
        x1, x2 = rng.random(6), rng.random(6)
        t1, t2 = x1 * (rng.random(6) > 0.3), x2 * (rng.random(6) > 0.3)
        expected = loss_by_hand(*oracle_args(m), alpha, x1, x2, t1, t2)
        assert abs(pair_loss(m, x1, x2, t1, t2) - expected) <= 1e-12

    def test_degenerate_cosine(self):
        m = random_model((3, 2))
        m.layers[0].b_enc[:] = -1e6  # saturate to zero codes
        with pytest.raises(DegenerateCosineError):
            pair_loss(m, np.ones(3), np.ones(3), np.ones(3), np.ones(3))

    def test_cosine_helper(self):
        assert cosine([1.0, 0.0], [0.0, 2.0]) == 0.0
        assert cosine([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), alpha=st.floats(0, 1))
    def test_lower_bound(self, seed, alpha):
        rng = np.random.default_rng(seed)
        m = random_model(alpha=alpha, seed=seed)
        xs = rng.random((4, 6))
        assert pair_loss(m, *xs) >= -(1 - alpha) - 1e-12


def fd_check(m, x1, x2, t1, t2, step=1e-5):
    analytic = pair_loss_grad(m, x1, x2, t1, t2)
    arrays = [a for l in m.layers for a in l.arrays()]
    numeric = central_differences(lambda: pair_loss(m, x1, x2, t1, t2), arrays, step)
    worst = 0.0
    for a, n in zip([a for g in analytic for a in g.arrays()], numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))))
    return worst


class TestGradient:
    @pytest.mark.parametrize("alpha", [0.0, 0.66, 1.0])
    def test_finite_differences(self, alpha):
        rng = np.random.default_rng(21)
        m = random_model(alpha=alpha, seed=5)
        x1, x2 = rng.random(6), rng.random(6)
        t1, t2 = x1 * (rng.random(6) > 0.3), x2 * (rng.random(6) > 0.3)
        assert fd_check(m, x1, x2, t1, t2) <= 1e-5

    def test_gradient_shapes(self):
        m = random_model()
        g = pair_loss_grad(m, *np.random.default_rng(0).random((4, 6)))
        for gl, l in zip(g, m.layers):
            assert [a.shape for a in gl.arrays()] == [a.shape for a in l.arrays()]

    def test_stationary_at_perfect_reconstruction(self):
        # one hidden unit copies a scalar input through an exact logistic round trip
        # when the input already equals the zero-parameter reconstruction
        m = SiameseModel([LayerParams(np.zeros((2, 3)), np.zeros(2), np.zeros(3))], alpha=1.0)
        x = np.full(3, 0.5)
        g = pair_loss_grad(m, x, x, x, x)
        for arr in g[0].arrays():
            assert np.max(np.abs(arr)) <= 1e-15

    def test_symmetric_branches(self):
        # identical inputs in both branches: the pair loss is symmetric, so swapping does nothing
        m = random_model(alpha=0.0, seed=9)
        x = np.random.default_rng(3).random(6)
        y = np.random.default_rng(4).random(6)
        g_xy = pair_loss_grad(m, x, y, x, y)
        g_yx = pair_loss_grad(m, y, x, y, x)
        for a, b in zip(g_xy, g_yx):
            for u, v in zip(a.arrays(), b.arrays()):
                np.testing.assert_allclose(u, v, rtol=0, atol=1e-14)
        # and with a duplicated pair the cosine is at its maximum, so its gradient vanishes
        g_xx = pair_loss_grad(m, x, x, x, x)
        for a in g_xx:
            for u in a.arrays():
                assert np.max(np.abs(u)) <= 1e-12

    def test_weight_tying(self):
        m = random_model(seed=2)
        x = np.random.default_rng(0).random(6)
        e0, r0 = encode(m, x), reconstruct(m, x)
        m.layers[0].W[0, 0] += 0.1
        assert not np.array_equal(encode(m, x), e0)
        assert not np.array_equal(reconstruct(m, x), r0)
        assert len(m.layers[0].arrays()) == 3  # W, b_enc, b_dec only


def smooth_patches(n=200, d=10, seed=0):
    rng = np.random.default_rng(seed)
    base = np.linspace(0.2, 0.8, d)
    return np.clip(base + 0.1 * rng.standard_normal((n, d)), 0, 1)


class TestPretrain:
    def test_constant_patch_improves(self):
        X = np.tile(np.linspace(0.1, 0.9, 9), (1, 1))
        sgd = SgdConfig(learning_rate=0.5, batch_size=1, epochs=50, seed=0)
        init = LayerParams.init(9, 4, np.random.default_rng([0, 4, 9]))
        layer = pretrain_layer(X, 4, 0.0, sgd)
        assert reconstruction_mse([layer], X) < reconstruction_mse([init], X)

    def test_deterministic(self):
        X = smooth_patches()
        sgd = SgdConfig(epochs=3, seed=4)
        a = pretrain_layer(X, 6, 0.3, sgd)
        b = pretrain_layer(X, 6, 0.3, sgd)
        for u, v in zip(a.arrays(), b.arrays()):
            assert np.array_equal(u, v)

    def test_training_curve_decreases(self):
        X = np.random.default_rng(0).random((500, 10))
        curve = []
        pretrain_layer(X, 6, 0.3, SgdConfig(learning_rate=0.1, epochs=200, seed=0), on_epoch=curve.append)
        assert len(curve) == 200
        assert curve[-1].mse < curve[0].mse

    def test_empty_stack(self):
        with pytest.raises(ValueError):
            pretrain_stack(smooth_patches(), widths=[], rates=[])
        with pytest.raises(ValueError):
            SiameseModel([])

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            pretrain_stack(smooth_patches(), widths=[4, 2], rates=[0.3])

    def test_single_layer_base_case(self):
        X = smooth_patches()
        sgd = SgdConfig(epochs=3, seed=1)
        m = pretrain_stack(X, [4], [0.3], sgd)
        layer = pretrain_layer(X, 4, 0.3, sgd)
        for u, v in zip(m.layers[0].arrays(), layer.arrays()):
            assert np.array_equal(u, v)

    def test_second_layer_sees_first_layer_codes(self):
        X = smooth_patches()
        sgd = SgdConfig(epochs=3, seed=2)
        m = pretrain_stack(X, [6, 3], [0.3, 0.1], sgd)
        codes = _encode_all(m.layers[:1], X)[-1]
        again = pretrain_layer(codes, 3, 0.1, sgd)
        for u, v in zip(m.layers[1].arrays(), again.arrays()):
            assert np.array_equal(u, v)

    def test_epoch_record_text(self):
        recs = []
        pretrain_stack(smooth_patches(40), [3], [0.1], SgdConfig(epochs=1), on_epoch=lambda k, r: recs.append((k, r)))
        k, r = recs[0]
        assert k == 0 and str(r).startswith("epoch=1 loss=")


def similar_pairs(n, d=10, seed=0, shift_scale=0.3):
    """Pairs sharing a per-pair pattern, each side with its own offset and noise."""
    rng = np.random.default_rng(seed)
    pattern = rng.random((n, d))
    a = np.clip(pattern + shift_scale * rng.standard_normal((n, 1)) + 0.05 * rng.standard_normal((n, d)), 0, 1)
    b = np.clip(pattern + shift_scale * rng.standard_normal((n, 1)) + 0.05 * rng.standard_normal((n, d)), 0, 1)
    centers = np.zeros((n, 3), dtype=np.int64)
    return PairBatch(a, b, centers, np.tile([0, 1], (n, 1)))


class TestFinetune:
    def test_zero_learning_rate(self):
        m = random_model((10, 6, 3), seed=1)
        out = finetune(m, similar_pairs(50), SgdConfig(learning_rate=0.0, epochs=2))
        assert out == m

    def test_input_untouched_and_deterministic(self):
        m = random_model((10, 6, 3), seed=1)
        before = m.copy()
        sgd = SgdConfig(learning_rate=0.05, epochs=2, seed=3)
        a = finetune(m, similar_pairs(50), sgd)
        b = finetune(m, similar_pairs(50), sgd)
        assert m == before
        assert a == b and a != m

    def test_shared_branches(self):
        m = random_model((10, 6, 3), seed=1)
        out = finetune(m, similar_pairs(50), SgdConfig(learning_rate=0.05, epochs=1))
        x = np.random.default_rng(0).random(10)
        assert np.array_equal(encode(out, x), encode(out, x.copy()))

    def test_similar_pair_cosine_rises(self):
        X = np.concatenate([similar_pairs(200, seed=1).first, similar_pairs(200, seed=1).second])
        m = pretrain_stack(X, [6, 3], [0.3, 0.1], SgdConfig(learning_rate=0.5, epochs=20))
        train = similar_pairs(200, seed=1)
        held = similar_pairs(200, seed=2)
        before = mean_pair_cosine(m, held)
        tuned = finetune(m, train, SgdConfig(learning_rate=0.5, epochs=30), alpha=0.66, rate=0.1)
        assert mean_pair_cosine(tuned, held) > before

    def test_empty_pairs(self):
        m = random_model((10, 6, 3))
        empty = PairBatch(np.zeros((0, 10)), np.zeros((0, 10)), np.zeros((0, 3), np.int64), np.zeros((0, 2), np.int64))
        with pytest.raises(ValueError):
            finetune(m, empty, SgdConfig())


class TestModelFormat:
    def test_round_trip(self, tmp_path):
        m = random_model((9, 7, 4), alpha=0.3, seed=8)
        m.corruption_finetune = 0.25
        save_model(m, tmp_path / "m.vxwm")
        assert load_model(tmp_path / "m.vxwm") == m

    def test_byte_identical(self, tmp_path):
        m = random_model(seed=8)
        save_model(m, tmp_path / "a")
        save_model(m, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_wrong_magic(self):
        raw = bytearray(encode_model(random_model()))
        raw[:4] = b"XXXX"
        with pytest.raises(ModelFormatError):
            decode_model(bytes(raw))

    def test_truncated(self):
        raw = encode_model(random_model())
        with pytest.raises(ModelFormatError):
            decode_model(raw[:-1])

    def test_bad_version(self):
        raw = bytearray(encode_model(random_model()))
        raw[4] = 99
        with pytest.raises(ModelFormatError):
            decode_model(bytes(raw))
