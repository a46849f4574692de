import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lddmm_gan import gan, nets
from lddmm_gan.autodiff import Tape, Tensor, backward
from lddmm_gan.data import TorusSpec, torus_stack
from lddmm_gan.errors import DivergenceError, InvalidParameterError

SMALL = dict(channels=(4, 8), batch_size=4, epochs=1)


@pytest.fixture(scope="module")
def tori():
    return torus_stack(TorusSpec(size=32, count=8, seed=5, outer_mean=8, outer_std=2))


class TestPositiveCase:
    def test_constant_mix(self):
        out = gan.make_positive(np.ones((4, 4)), np.zeros((4, 4)), 0.2)
        np.testing.assert_allclose(out, 0.2)

    def test_identical_pair(self, rng):
        I = rng.normal(size=(8, 8))
        np.testing.assert_allclose(gan.make_positive(I, I, 0.7), I)

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.1])
    def test_strict_convexity(self, beta):
        with pytest.raises(InvalidParameterError):
            gan.make_positive(np.ones(4), np.ones(4), beta)


class TestLosses:
    def test_known_values(self):
        assert gan.discriminator_loss(0.5, "positive") == pytest.approx(0.6931, abs=1e-4)
        assert gan.discriminator_loss(0.5, "negative") == pytest.approx(0.6931, abs=1e-4)
        assert gan.discriminator_loss(0.9, "negative") == pytest.approx(2.3026, abs=1e-4)
        assert gan.discriminator_loss(1 - 1e-7, "positive") < 1e-6

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    def test_monotone(self, a, b):
        if a == b:
            return
        lo, hi = min(a, b), max(a, b)
        assert gan.discriminator_loss(hi, "positive") < gan.discriminator_loss(lo, "positive")
        assert gan.discriminator_loss(hi, "negative") > gan.discriminator_loss(lo, "negative")

    def test_tensor_batch_mean(self):
        p = Tensor(np.array([0.2, 0.6]))
        assert gan.discriminator_loss(p, "negative").item() == pytest.approx(
            -(math.log(0.8) + math.log(0.4)) / 2)

    def test_unknown_case(self):
        with pytest.raises(InvalidParameterError):
            gan.discriminator_loss(0.5, "neutral")

    def test_generator_loss_arithmetic(self):
        n = 16
        I0, I1 = np.full((n, n), 0.1), np.zeros((n, n))
        cfg = gan.GanConfig()
        assert gan.generator_loss(0.5, np.zeros((n, n, 2)), I0, I1, cfg) == pytest.approx(10.6931, abs=1e-4)

    def test_generator_loss_at_rest(self):
        I = np.ones((16, 16))
        assert gan.generator_loss(1 - 1e-7, np.zeros((16, 16, 2)), I, I, gan.GanConfig()) == pytest.approx(0, abs=1e-6)

    def test_doubling_lambda_doubles_energy_component(self, rng):
        I0, I1 = rng.normal(size=(2, 1, 16, 16))
        v = Tensor(0.01 * rng.normal(size=(1, 16, 16, 2)))
        p = Tensor(np.array([0.4]))
        outs = []
        for lam in (1000.0, 2000.0):
            cfg = gan.GanConfig(lam=lam)
            outs.append(gan.generator_loss(p, v, I0, I1, cfg, cfg.energy_config((16, 16))))
        assert outs[1][2].item() == pytest.approx(2 * outs[0][2].item(), rel=1e-12)
        for l_g, l_adv, lam_e, _ in outs:
            assert l_g.item() == pytest.approx(l_adv.item() + lam_e.item(), abs=1e-6)


def test_pipeline_gradient_matches_finite_differences(rng):
    """d L_G / d generator weights on a 32x32 pair, float64 end to end."""
    cfg = gan.GanConfig(channels=(2, 4))
    gen = nets.init_generator(2, cfg.channels, seed=0, dtype=np.float64)
    disc = nets.init_discriminator((32, 32), seed=1, dtype=np.float64)
    ecfg = cfg.energy_config((32, 32))
    I0 = torus_stack(TorusSpec(size=32, count=2, seed=2, outer_mean=8, outer_std=2)).astype(np.float64)
    I1, I0 = I0[1:], I0[:1]
    W = gen.params["dec0.conv.w"]

    def loss():
        v = gan.velocity(gen, I0, I1, cfg, ecfg)
        p = nets.discriminator_forward(disc, gan.energy_terms(v, I0, I1, ecfg).warped, I1)
        return gan.generator_loss(p, v, I0, I1, cfg, ecfg)[0]

    with Tape() as tape:
        out = loss()
    (g,) = backward(tape, out, wrt=[W])
    eps = 1e-6
    flat = W.data.reshape(-1)
    for i in rng.choice(flat.size, size=10, replace=False):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss().item()
        flat[i] = keep - eps
        down = loss().item()
        flat[i] = keep
        fd = (up - down) / (2 * eps)
        assert g.reshape(-1)[i] == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_sample_pairs_never_self_paired():
    rng = np.random.default_rng(0)
    for _ in range(20):
        src, tgt = gan.sample_pairs(rng, 9)
        assert sorted(src) == list(range(9))
        assert np.all(src != tgt)


class TestTraining:
    def test_log_schema_and_artifacts(self, tori, tmp_path):
        cfg = gan.GanConfig(**SMALL)
        res = gan.train(tori, cfg, tmp_path)
        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == gan.LOG_COLUMNS
        assert len(rows) == len(res.records) == 2
        for name in ("generator.ckpt", "discriminator.ckpt", "run_config.txt"):
            assert (tmp_path / name).exists()
        saved = gan.read_run_config(tmp_path / "run_config.txt")
        assert saved["lam"] == "1000.0" and saved["beta"] == "0.2" and saved["mode"] == "svf-gan"

    def test_per_sample_probabilities_logged(self, tori, tmp_path):
        res = gan.train(tori, gan.GanConfig(**SMALL), tmp_path)
        with open(tmp_path / "train_p.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == gan.P_COLUMNS
        assert len(rows) == 3 * len(tori)
        for r in res.records:
            for case, want in (("pos", r.p_pos_each), ("neg", r.p_neg_each), ("gen", r.p_gen_each)):
                got = [float(x["p"]) for x in rows if int(x["step"]) == r.step and x["case"] == case]
                np.testing.assert_array_equal(np.float32(got), want)

    def test_logged_loss_identities(self, tori):
        cfg = gan.GanConfig(**SMALL, parameterization="epdiff")
        res = gan.train(tori, cfg)
        for r in res.records:
            assert abs(r.loss_g - (r.loss_adv + cfg.lam * r.energy)) <= 1e-6
            assert abs(r.lambda_energy - cfg.lam * r.energy) <= 1e-6
            assert abs(r.loss_d_pos - np.mean(-np.log(r.p_pos_each.astype(np.float64)))) <= 1e-6
            assert abs(r.loss_d_neg - np.mean(-np.log1p(-r.p_neg_each.astype(np.float64)))) <= 1e-6
            assert abs(r.loss_adv - np.mean(-np.log(r.p_gen_each.astype(np.float64)))) <= 1e-6

    def test_deterministic(self, tori, tmp_path):
        cfg = gan.GanConfig(**SMALL, seed=11)
        for run in ("a", "b"):
            gan.train(tori, cfg, tmp_path / run)

        def rows(run):
            with open(tmp_path / run / "train_log.csv") as fh:
                return [{k: v for k, v in r.items() if k != "wall_ms"} for r in csv.DictReader(fh)]

        assert rows("a") == rows("b")
        for name in ("generator.ckpt", "discriminator.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_identical_pairs_stay_registered(self, tori):
        same = np.repeat(tori[:1], 8, axis=0)
        cfg = gan.GanConfig(**SMALL)
        res = gan.train(same, cfg)
        out = gan.infer(res.generator, same[:4], same[:4], cfg)
        # mse_rel is undefined when I0 == I1; normalize by the image energy instead
        resid = np.sum((out.warped - same[:4]) ** 2) / np.sum(same[:4] ** 2)
        assert resid <= 1e-3

    def test_divergent_batches_are_skipped(self, tori, monkeypatch):
        real = gan.train_step
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                raise DivergenceError("shooting blew up", step=3)
            return real(*args, **kw)

        monkeypatch.setattr(gan, "train_step", flaky)
        res = gan.train(tori, gan.GanConfig(**SMALL))
        assert res.skipped == [(0, 1)]
        assert [r.step for r in res.records] == [0]

    def test_aborts_after_consecutive_divergence(self, tori, monkeypatch):
        def always(*args, **kw):
            raise DivergenceError("nan", step=1)

        monkeypatch.setattr(gan, "train_step", always)
        imgs = np.repeat(tori, 4, axis=0)
        with pytest.raises(DivergenceError, match="10 consecutive"):
            gan.train(imgs, gan.GanConfig(**{**SMALL, "epochs": 2}))

    @pytest.mark.parametrize("kw", [{"beta": 1.0}, {"lam": 0.0}, {"parameterization": "flow"}, {"head": "x"}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidParameterError):
            gan.GanConfig(**kw)


def test_infer_single_and_batch(tori):
    cfg = gan.GanConfig(channels=(4, 8))
    gen, _ = gan.init_models(cfg, (32, 32))
    one = gan.infer(gen, tori[0], tori[1], cfg)
    many = gan.infer(gen, tori[:2], tori[1:3], cfg)
    assert one.velocity.shape == (32, 32, 2) and one.warped.shape == (32, 32)
    assert many.displacement.shape == (2, 32, 32, 2)
    np.testing.assert_allclose(one.warped, many.warped[0], atol=1e-6)
