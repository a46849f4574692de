import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lddmm_gan import nets
from lddmm_gan.autodiff import Tape, Tensor, backward, ops
from lddmm_gan.errors import DivergenceError, ParseError, ShapeError


@pytest.fixture(scope="module")
def gen():
    return nets.init_generator(2, seed=3)


@pytest.fixture(scope="module")
def disc():
    return nets.init_discriminator((64, 64), seed=4)


def _zeroed(params):
    for t in params.values():
        t.data[:] = 0
    return params


class TestGenerator:
    def test_output_shape(self, gen, rng):
        I0, I1 = rng.normal(size=(2, 2, 64, 64))
        assert nets.generator_forward(gen, I0, I1).shape == (2, 64, 64, 2)

    def test_output_shape_3d(self, rng):
        g = nets.init_generator(3, seed=0)
        I0, I1 = rng.normal(size=(2, 1, 32, 32, 32)).astype(np.float32)
        assert nets.generator_forward(g, I0, I1).shape == (1, 32, 32, 32, 3)

    def test_zero_parameters_give_zero_velocity(self, rng):
        g = nets.init_generator(2, seed=0)
        _zeroed(g.params)
        I0, I1 = rng.normal(size=(2, 1, 16, 16))
        assert np.all(nets.generator_forward(g, I0, I1).data == 0)

    def test_untrained_generator_is_identity(self, gen, rng):
        I0, I1 = rng.normal(size=(2, 2, 32, 32))
        assert np.all(nets.generator_forward(gen, I0, I1).data == 0)

    def test_deterministic(self, rng):
        I0, I1 = rng.normal(size=(2, 2, 32, 32))
        out_w = rng.normal(scale=0.1, size=(2, 16, 3, 3))

        def run():
            g = nets.init_generator(2, seed=9)
            g.params["out.w"].data[:] = out_w
            return nets.generator_forward(g, I0, I1).data

        a, b = run(), run()
        assert np.any(a != 0)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_fused_per_level(self, gen):
        for level, c in enumerate(gen.channels):
            assert gen.params[f"enc{level}.fuse.w"].shape[:2] == (c, 2 * c)

    @pytest.mark.parametrize("shape", [(1, 30, 32), (1, 32, 33)])
    def test_indivisible_extents(self, gen, shape):
        with pytest.raises(ShapeError):
            nets.generator_forward(gen, np.zeros(shape), np.zeros(shape))

    def test_mismatched_pair(self, gen):
        with pytest.raises(ShapeError):
            nets.generator_forward(gen, np.zeros((1, 16, 16)), np.zeros((1, 16, 32)))

    def test_gradients_reach_every_parameter(self, rng):
        g = nets.init_generator(2, channels=(4, 8), seed=0)
        g.params["out.w"].data[:] = rng.normal(scale=0.1, size=g.params["out.w"].shape)
        I0, I1 = rng.normal(size=(2, 2, 16, 16))
        with Tape() as tape:
            loss = ops.sum_of_squares(nets.generator_forward(g, I0, I1))
        grads = backward(tape, loss, wrt=g.tensors())
        assert all(np.any(gr != 0) for gr in grads)


class TestDiscriminator:
    def test_zero_weights_give_half(self, rng):
        d = nets.init_discriminator((64, 64), seed=0)
        _zeroed(d.params)
        p = nets.discriminator_forward(d, rng.normal(size=(3, 64, 64)), rng.normal(size=(3, 64, 64)))
        np.testing.assert_allclose(p.data, 0.5)

    def test_flattened_feature_map_is_2x2(self, disc):
        assert disc.params["fc0.w"].shape[1] == disc.channels[-1] * 2 * 2

    def test_one_probability_per_pair(self, disc, rng):
        p = nets.discriminator_forward(disc, rng.normal(size=(5, 64, 64)), rng.normal(size=(5, 64, 64)))
        assert p.shape == (5,)

    @settings(max_examples=10)
    @given(st.floats(-1e4, 1e4), st.integers(0, 10**6))
    def test_probability_strictly_inside(self, disc, scale, seed):
        rng = np.random.default_rng(seed)
        p = nets.discriminator_forward(disc, scale * rng.normal(size=(1, 64, 64)), rng.normal(size=(1, 64, 64)))
        assert np.all((p.data > 0) & (p.data < 1))

    def test_extreme_logits_clamped(self):
        d = nets.init_discriminator((32, 32), seed=0)
        _zeroed(d.params)
        d.params["fc2.b"].data[:] = 1e4
        p = nets.discriminator_forward(d, np.zeros((1, 32, 32)), np.zeros((1, 32, 32)))
        assert p.data[0] == 1 - nets.PROB_EPS

    def test_rejects_wrong_shape(self, disc):
        with pytest.raises(ShapeError):
            nets.discriminator_forward(disc, np.zeros((1, 32, 32)), np.zeros((1, 32, 32)))
        with pytest.raises(ShapeError):
            nets.init_discriminator((48, 48))


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        st_ = nets.AdamState(0.1)
        nets.adam_step(st_, p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert st_.step == 1

    def test_first_step_is_signed_lr(self):
        p = {"w": Tensor(np.zeros(3))}
        nets.adam_step(nets.AdamState(1e-3), p, {"w": np.array([5.0, -0.2, 3e-3])})
        np.testing.assert_allclose(p["w"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-5)

    def test_zero_lr_is_identity(self, rng):
        w = rng.normal(size=(4, 4))
        p = {"w": Tensor(w.copy())}
        st_ = nets.AdamState(0.0)
        for _ in range(5):
            nets.adam_step(st_, p, {"w": rng.normal(size=(4, 4))})
        np.testing.assert_array_equal(p["w"].data, w)

    def test_convex_quadratic_tail_decreases(self, rng):
        A = rng.normal(size=(6, 6))
        A = A @ A.T + np.eye(6)
        x = {"x": Tensor(rng.normal(size=6) * 3)}
        st_ = nets.AdamState(0.05)
        losses = []
        for _ in range(100):
            v = x["x"].data
            losses.append(0.5 * v @ A @ v)
            nets.adam_step(st_, x, {"x": A @ v})
        assert all(b < a for a, b in zip(losses[10:], losses[11:]))

    def test_non_finite_gradient(self):
        p = {"w": Tensor(np.zeros(2))}
        with pytest.raises(DivergenceError):
            nets.adam_step(nets.AdamState(0.1), p, {"w": np.array([np.nan, 0.0])})
        assert np.all(p["w"].data == 0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, gen, rng):
        path = tmp_path / "g.ckpt"
        nets.generator_checkpoint(gen, path, {"epoch": 3})
        loaded, meta = nets.load_generator(path)
        assert meta["epoch"] == "3"
        I0, I1 = rng.normal(size=(2, 1, 32, 32))
        np.testing.assert_array_equal(nets.generator_forward(gen, I0, I1).data,
                                      nets.generator_forward(loaded, I0, I1).data)

    def test_layout(self, tmp_path):
        path = tmp_path / "x.ckpt"
        nets.save_checkpoint(path, {"a": np.arange(6.0).reshape(2, 3)}, {"k": "v"})
        raw = path.read_bytes()
        head = b"LDDMMGAN-CHECKPOINT 1\nmeta k v\ntensor a 2,3\nEND\n"
        assert raw[:len(head)] == head
        np.testing.assert_array_equal(np.frombuffer(raw[len(head):], "<f4"), np.arange(6.0))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.ckpt"
        nets.save_checkpoint(path, {"a": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ParseError, match="truncated"):
            nets.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello\nEND\n")
        with pytest.raises(ParseError):
            nets.load_checkpoint(path)

    def test_discriminator_is_not_a_generator(self, tmp_path, disc):
        path = tmp_path / "d.ckpt"
        nets.save_checkpoint(path, disc.params, {"kind": "discriminator"})
        with pytest.raises(ParseError):
            nets.load_generator(path)
