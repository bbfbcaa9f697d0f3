import math

import numpy as np
import pytest

from fairvae import numerics as nx
from fairvae import objectives as obj
from fairvae.errors import ConfigError, NumericError
from fairvae.model import MLP
from fairvae.numerics import Tensor

from oracles import mc_gaussian_kl, random_covariance


class TestMultinomial:
    def test_hand_value(self):
        logits = np.log([0.5, 0.25, 0.25])
        val = obj.multinomial_ll(np.array([1.0, 0.0, 1.0]), logits)
        assert float(val.data) == pytest.approx(math.log(0.5) + math.log(0.25), abs=1e-12)
        assert float(val.data) == pytest.approx(-2.0794415416798357, abs=1e-12)

    def test_zero_row(self, rng):
        assert float(obj.multinomial_ll(np.zeros(5), rng.standard_normal(5)).data) == 0.0

    def test_linear_in_x(self, rng):
        x, lg = (rng.random(6) < 0.5).astype(float), rng.standard_normal(6)
        one = float(obj.multinomial_ll(x, lg).data)
        assert float(obj.multinomial_ll(2 * x, lg).data) == pytest.approx(2 * one, rel=1e-12)

    def test_permutation_invariant(self, rng):
        x, lg = (rng.random((3, 8)) < 0.4).astype(float), rng.standard_normal((3, 8))
        perm = rng.permutation(8)
        np.testing.assert_allclose(obj.multinomial_ll(x, lg).data,
                                   obj.multinomial_ll(x[:, perm], lg[:, perm]).data, rtol=1e-12)

    def test_batch_rows(self, rng):
        x, lg = (rng.random((4, 5)) < 0.5).astype(float), rng.standard_normal((4, 5))
        per_row = obj.multinomial_ll(x, lg).data
        assert per_row.shape == (4,)
        assert per_row[2] == pytest.approx(float(obj.multinomial_ll(x[2], lg[2]).data))


class TestPriorKL:
    def test_standard_normal_zero(self):
        assert float(obj.gaussian_prior_kl(np.zeros(3), np.zeros(3)).data) == 0.0

    def test_unit_shift(self):
        assert float(obj.gaussian_prior_kl(np.array([1.0]), np.array([0.0])).data) == 0.5

    def test_positive(self, rng):
        for _ in range(20):
            mu = rng.standard_normal(4)
            assert float(obj.gaussian_prior_kl(mu, rng.standard_normal(4)).data) > 0

    def test_zero_iff_standard(self, rng):
        vals = obj.gaussian_prior_kl(rng.standard_normal((50, 3)) * 1e-3,
                                     rng.standard_normal((50, 3)) * 1e-3).data
        assert np.all(vals >= 0) and vals.max() < 1e-5


class TestSensitiveCE:
    def test_confident_correct(self):
        assert float(obj.sensitive_ce(np.array([1.0, 0.0]), np.array([1 - 1e-15, 1e-15])).data) < 1e-12

    def test_half(self):
        assert float(obj.sensitive_ce(np.array([[1.0, 0.0]]), np.full((1, 2), 0.5)).data) == \
            pytest.approx(math.log(2), abs=1e-15)

    def test_symmetry(self, rng):
        s = (rng.random((5, 2)) < 0.5).astype(float)
        p = rng.uniform(0.05, 0.95, (5, 2))
        assert float(obj.sensitive_ce(s, p).data) == pytest.approx(float(obj.sensitive_ce(1 - s, 1 - p).data))

    def test_logits_route_agrees(self, rng):
        s = (rng.random((6, 2)) < 0.5).astype(float)
        lg = rng.standard_normal((6, 2)) * 3
        assert float(obj.sensitive_ce_logits(s, lg).data) == pytest.approx(
            float(obj.sensitive_ce(s, nx.sigmoid_array(lg)).data), rel=1e-12)

    def test_rejects_boundary(self):
        with pytest.raises(NumericError):
            obj.sensitive_ce(np.array([1.0]), np.array([1.0]))


class TestEmpiricKL:
    def test_zero_cross_covariance(self):
        cov = np.diag([1.0, 2.0, 0.5])
        assert obj.gaussian_split_kl(cov, 2) == pytest.approx(0.0, abs=1e-14)

    def test_two_dim_hand_value(self):
        val = obj.gaussian_split_kl(np.array([[1.0, 0.5], [0.5, 1.0]]), 1)
        assert val == pytest.approx(0.5 * math.log(1 / 0.75), abs=1e-12)
        assert val == pytest.approx(0.14384103622589045, abs=1e-12)

    def test_exactly_decorrelated_batch(self, rng):
        # columns orthogonal to the ones vector and to each other: zero mean, zero cross block
        q, _ = np.linalg.qr(np.column_stack([np.ones(40), rng.standard_normal((40, 4))]))
        samples = q[:, 1:] * 3.0
        assert float(obj.empiric_kl(samples, 2).data) == pytest.approx(0.0, abs=1e-9)

    def test_batch_matches_closed_form(self, rng):
        x = rng.standard_normal((200, 5)) @ rng.standard_normal((5, 5))
        cov = np.cov(x, rowvar=False) + obj.COV_RIDGE * np.eye(5)
        assert float(obj.empiric_kl(x, 3).data) == pytest.approx(obj.gaussian_split_kl(cov, 3), rel=1e-12)

    def test_non_negative(self, rng):
        for _ in range(30):
            x = rng.standard_normal((25, 6)) @ rng.standard_normal((6, 6))
            assert float(obj.empiric_kl(x, int(rng.integers(1, 6))).data) >= -1e-9

    @pytest.mark.parametrize("case", range(5))
    def test_monte_carlo_oracle(self, case):
        rng = np.random.default_rng(100 + case)
        d = int(rng.integers(2, 9))
        split = int(rng.integers(1, d))
        cov1 = random_covariance(rng, d)
        cov2 = cov1.copy()
        cov2[:split, split:] = 0
        cov2[split:, :split] = 0
        mc = mc_gaussian_kl(cov1, cov2, n=200_000, seed=case)
        assert obj.gaussian_split_kl(cov1, split) == pytest.approx(mc, rel=0.02)

    def test_gradient(self, rng):
        s = Tensor(rng.standard_normal((40, 7)) @ rng.standard_normal((7, 7)), requires_grad=True)
        assert nx.finite_diff_check(lambda: obj.empiric_kl(s, 3), [s]) < 1e-4


class TestGanKL:
    def test_zero_logits(self):
        assert float(obj.gan_kl_estimate(np.zeros(10)).data) == 0.0

    def test_discriminator_loss_chance(self):
        assert float(obj.discriminator_loss(np.zeros(8), np.zeros(8)).data) == pytest.approx(math.log(2))

    def test_discriminator_loss_separated(self):
        assert float(obj.discriminator_loss(np.full(4, 1e3), np.full(4, -1e3)).data) < 1e-12

    def test_discriminator_loss_symmetry(self, rng):
        r, f = rng.standard_normal(9), rng.standard_normal(9)
        assert float(obj.discriminator_loss(r, f).data) == pytest.approx(
            float(obj.discriminator_loss(-f, -r).data), rel=1e-12)


def train_density_ratio(rho: float, steps: int = 1500, batch: int = 512, seed: int = 0,
                        extra_constant: float | None = None) -> float:
    """Fit a discriminator on joint vs shuffled 2-d Gaussian samples; return the mean real logit."""
    rng = nx.make_rng(seed)
    cov = np.array([[1.0, rho], [rho, 1.0]])
    width = 2 if extra_constant is None else 3
    net = MLP([width, 64, 64, 1], rng, "disc", activation="leaky")
    params = {p.name: p for p in net.parameters()}
    opt = nx.Adam(params, lr=1e-3)

    def draw(n):
        x = rng.multivariate_normal(np.zeros(2), cov, size=n)
        shuf = np.column_stack([x[:, 0], rng.permutation(x[:, 1])])
        if extra_constant is not None:
            x = np.column_stack([x, np.full(n, extra_constant)])
            shuf = np.column_stack([shuf, np.full(n, extra_constant)])
        return x, shuf

    for _ in range(steps):
        x, shuf = draw(batch)
        opt.zero_grad()
        obj.discriminator_loss(net(Tensor(x))[:, 0], net(Tensor(shuf))[:, 0]).backward()
        opt.step()
    with nx.no_grad():
        x, _ = draw(100_000)
        return float(obj.gan_kl_estimate(net(Tensor(x))[:, 0]).data)


@pytest.mark.slow
def test_gan_kl_constant_feature_invariance():
    base = train_density_ratio(0.5, seed=1)
    shifted = train_density_ratio(0.5, seed=1, extra_constant=2.0)
    assert shifted == pytest.approx(base, rel=0.25)


class TestCompose:
    def parts(self, rng):
        return {k: Tensor(np.array(rng.uniform(0.1, 2.0)))
                for k in ("reconstruction", "prior_kl", "sensitive_ce", "independence", "adversary")}

    def test_emp_definition(self, rng):
        p = self.parts(rng)
        total, br = obj.compose("vaeemp", p, beta=1.0, alpha=10.0, gamma=5.0)
        expect = br.reconstruction + br.prior_kl + 10 * br.sensitive_ce + 5 * br.independence
        assert float(total.data) == pytest.approx(expect, abs=1e-9)
        assert br.total == pytest.approx(expect, abs=1e-9)

    def test_degenerate_weights_reduce_to_base(self, rng):
        p = self.parts(rng)
        emp, _ = obj.compose("vaeemp", p, beta=0.7, alpha=0.0, gamma=0.0)
        rec, _ = obj.compose("vaerec", p, beta=0.7)
        assert float(emp.data) == float(rec.data)

    def test_adv_fooling_sign(self, rng):
        p = self.parts(rng)
        total, br = obj.compose("vaeadv", p, beta=1.0, adv_weight=2.0)
        assert br.total == pytest.approx(br.reconstruction + br.prior_kl - 2.0 * br.adversary, abs=1e-9)

    def test_missing_part(self, rng):
        p = self.parts(rng)
        del p["independence"]
        with pytest.raises(ConfigError):
            obj.compose("vaegan", p, beta=1.0)

    def test_unknown_variant(self, rng):
        with pytest.raises(ConfigError):
            obj.compose("vaexyz", self.parts(rng), beta=1.0)


class TestGradients:
    """Every objective term against central differences on small random instances."""

    def test_all_terms(self, rng):
        mean = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
        lv = Tensor(rng.standard_normal((5, 6)) * 0.5, requires_grad=True)
        logits = Tensor(rng.standard_normal((5, 9)), requires_grad=True)
        slog = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        probs = Tensor(rng.uniform(0.1, 0.9, (5, 2)), requires_grad=True)
        x = (rng.random((5, 9)) < 0.4).astype(float)
        s = (rng.random((5, 2)) < 0.5).astype(float)
        samples = Tensor(rng.standard_normal((20, 6)) @ rng.standard_normal((6, 6)), requires_grad=True)
        checks = {
            "multinomial": (lambda: obj.multinomial_ll(x, logits).sum(), [logits]),
            "prior_kl": (lambda: obj.gaussian_prior_kl(mean, lv).sum(), [mean, lv]),
            "sensitive_ce": (lambda: obj.sensitive_ce(s, probs), [probs]),
            "sensitive_ce_logits": (lambda: obj.sensitive_ce_logits(s, slog), [slog]),
            "empiric_kl": (lambda: obj.empiric_kl(samples, 4), [samples]),
            "discriminator": (lambda: obj.discriminator_loss(slog[:, 0], slog[:, 1]), [slog]),
        }
        for name, (fn, params) in checks.items():
            assert nx.finite_diff_check(fn, params) < 1e-4, name
