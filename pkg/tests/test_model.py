import numpy as np
import pytest
import torch

from contraspk.errors import NumericalError, ValidationError
from contraspk.model import (
    AttentiveStatsPool,
    ModelConfig,
    SpeakerContentVAE,
    reparameterize,
    tiny_config,
)
from contraspk.seeding import torch_generator


def batch(rng, b=4, t=16, f=12):
    return rng.standard_normal((b, t, f))


class TestConfig:
    def test_paper_defaults(self):
        cfg = ModelConfig()
        assert cfg.channels == 512
        assert cfg.d_s == 192
        assert cfg.d_c == 32
        assert cfg.content_birnn_hidden == 512
        assert cfg.content_rnn_hidden == 512
        assert cfg.decoder_hidden == 512
        assert cfg.decoder_dilations == (2, 1)
        assert cfg.n_shared_layers == 4

    def test_tiny_defaults(self):
        cfg = tiny_config()
        assert (cfg.channels, cfg.d_s, cfg.d_c) == (64, 32, 8)

    def test_validation(self):
        with pytest.raises(ValidationError):
            ModelConfig(n_shared_layers=9)
        with pytest.raises(ValidationError):
            ModelConfig(channels=130, res2net_scale=8)
        with pytest.raises(ValidationError):
            ModelConfig(dtype="float16")


class TestSpeakerEncoder:
    def test_paper_output_dim_is_192(self):
        cfg = ModelConfig(feat_dim=80, seed=0)
        model = SpeakerContentVAE(cfg)
        model.eval()
        with torch.no_grad():
            post = model.encode_speaker(np.random.default_rng(0).standard_normal((2, 30, 80)))
        assert post.mu_s.shape == (2, 192)
        assert post.sigma_s.shape == (2, 192)

    def test_identical_inputs_identical_posteriors(self, tiny_model, rng):
        x = batch(rng, b=1)
        x2 = np.concatenate([x, x], axis=0)
        tiny_model.eval()
        with torch.no_grad():
            post = tiny_model.encode_speaker(x2)
        assert torch.equal(post.mu_s[0], post.mu_s[1])
        assert torch.equal(post.sigma_s[0], post.sigma_s[1])

    def test_sigma_strictly_positive(self, rng):
        model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=99))
        with torch.no_grad():
            post = model.encode_speaker(50.0 * batch(rng))
        assert torch.all(post.sigma_s > 0)

    def test_batch_permutation_equivariance(self, tiny_model, rng):
        x = batch(rng, b=5)
        perm = [3, 0, 4, 1, 2]
        tiny_model.eval()
        with torch.no_grad():
            direct = tiny_model.encode_speaker(x[perm])
            permuted = tiny_model.encode_speaker(x).mu_s[perm]
        assert torch.allclose(direct.mu_s, permuted, atol=1e-6)

    def test_finite_outputs_for_bounded_inputs(self, tiny_model, rng):
        x = 50.0 * (2.0 * rng.random((3, 20, 12)) - 1.0)
        with torch.no_grad():
            post = tiny_model.encode_speaker(x)
        assert torch.isfinite(post.mu_s).all() and torch.isfinite(post.sigma_s).all()

    def test_nonfinite_input_rejected(self, tiny_model):
        x = np.zeros((2, 10, 12))
        x[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            tiny_model.encode_speaker(x)

    def test_numerical_error_names_layer(self, rng):
        model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=1))
        with torch.no_grad():
            model.speaker_branch.mu_head.weight[0, 0] = float("nan")
        with pytest.raises(NumericalError, match="speaker.mu_head"):
            with torch.no_grad():
                model.encode_speaker(batch(rng))


class TestPooling:
    def test_weighted_stats_frame_permutation_invariant(self, rng):
        h = torch.from_numpy(rng.standard_normal((3, 6, 11)))
        logits = torch.from_numpy(rng.standard_normal((3, 6, 11)))
        w = torch.softmax(logits, dim=2)
        perm = torch.randperm(11)
        mu1, sd1 = AttentiveStatsPool.weighted_stats(h, w)
        mu2, sd2 = AttentiveStatsPool.weighted_stats(h[:, :, perm], w[:, :, perm])
        assert torch.allclose(mu1, mu2, atol=1e-12)
        assert torch.allclose(sd1, sd2, atol=1e-12)

    def test_uniform_weights_recover_plain_stats(self, rng):
        h = torch.from_numpy(rng.standard_normal((2, 4, 9)))
        w = torch.full((2, 4, 9), 1.0 / 9)
        mu, sd = AttentiveStatsPool.weighted_stats(h, w, eps=0.0)
        assert torch.allclose(mu, h.mean(dim=2), atol=1e-12)
        assert torch.allclose(sd, h.std(dim=2, unbiased=False), atol=1e-9)

    def test_full_pool_frame_permutation_invariant(self, rng):
        pool = AttentiveStatsPool(8, 4).double()
        h = torch.from_numpy(rng.standard_normal((2, 8, 13)))
        perm = torch.randperm(13)
        with torch.no_grad():
            a = pool(h)
            b = pool(h[:, :, perm])
        assert torch.allclose(a, b, atol=1e-10)


class TestContentEncoder:
    def test_paper_output_shapes(self):
        cfg = ModelConfig(feat_dim=80, seed=0)
        model = SpeakerContentVAE(cfg)
        with torch.no_grad():
            post = model.encode_content(np.random.default_rng(0).standard_normal((2, 12, 80)), rng_seed=0)
        assert post.mu_c.shape == (2, 12, 32)
        assert post.sigma_c.shape == (2, 12, 32)
        assert post.sample_c.shape == (2, 12, 32)

    def test_causality_of_posterior_recurrence(self, tiny_model, rng):
        h = torch.from_numpy(rng.standard_normal((3, 20, 2 * 64))).float()
        with torch.no_grad():
            full = tiny_model.content_branch.posterior_steps(h, torch_generator(7))
            trunc = tiny_model.content_branch.posterior_steps(h[:, :8], torch_generator(7))
        assert torch.equal(full.mu_c[:, :8], trunc.mu_c)
        assert torch.equal(full.sample_c[:, :8], trunc.sample_c)

    def test_first_step_depends_only_on_first_frame(self, tiny_model, rng):
        h = torch.from_numpy(rng.standard_normal((2, 10, 2 * 64))).float()
        h2 = h.clone()
        h2[:, 1:] += 5.0  # later frames differ
        with torch.no_grad():
            a = tiny_model.content_branch.posterior_steps(h, torch_generator(0))
            b = tiny_model.content_branch.posterior_steps(h2, torch_generator(0))
        assert torch.equal(a.mu_c[:, 0], b.mu_c[:, 0])
        assert not torch.equal(a.mu_c[:, 1], b.mu_c[:, 1])

    def test_deterministic_given_seed(self, tiny_model, rng):
        x = batch(rng)
        with torch.no_grad():
            a = tiny_model.encode_content(x, rng_seed=3)
            b = tiny_model.encode_content(x, rng_seed=3)
            c = tiny_model.encode_content(x, rng_seed=4)
        assert torch.equal(a.sample_c, b.sample_c)
        assert not torch.equal(a.sample_c, c.sample_c)


class TestReparameterize:
    def test_zero_sigma_limit_returns_mu(self):
        mu = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        sigma = torch.full_like(mu, 1e-300)
        out = reparameterize(mu, sigma, rng_seed=0)
        assert torch.equal(out, mu)

    def test_bit_exact_reproducibility(self):
        mu = torch.zeros(100)
        sigma = torch.ones(100)
        assert torch.equal(reparameterize(mu, sigma, rng_seed=5), reparameterize(mu, sigma, rng_seed=5))

    def test_sample_mean_within_clt_bound(self):
        n = 10**5
        mu = torch.tensor([0.7, -1.3, 2.1], dtype=torch.float64)
        sigma = torch.tensor([0.5, 1.5, 2.0], dtype=torch.float64)
        draws = reparameterize(mu.expand(n, 3), sigma.expand(n, 3), rng_seed=11)
        bound = 3.0 * sigma / np.sqrt(n)
        assert torch.all((draws.mean(dim=0) - mu).abs() < bound)

    def test_sigma_positivity_enforced(self):
        with pytest.raises(ValidationError):
            reparameterize(torch.zeros(3), torch.zeros(3), rng_seed=0)


class TestContentPrior:
    def test_first_step_shared_across_batch(self, tiny_model, rng):
        samples = torch.from_numpy(rng.standard_normal((5, 7, 8))).float()
        with torch.no_grad():
            prior = tiny_model.prior_rollout(samples)
        first = prior.mu_p[:, 0]
        assert torch.all(first == first[0])

    def test_shapes_match_posterior(self, tiny_model, rng):
        x = batch(rng)
        with torch.no_grad():
            post = tiny_model.encode_content(x, rng_seed=0)
            prior = tiny_model.prior_rollout(post.sample_c)
        assert prior.mu_p.shape == post.mu_c.shape
        assert prior.sigma_p.shape == post.sigma_c.shape

    def test_zeroed_network_gives_standard_normal(self, rng):
        model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=2))
        with torch.no_grad():
            for p in model.content_prior.parameters():
                p.zero_()
        samples = torch.from_numpy(rng.standard_normal((3, 6, 8))).float()
        with torch.no_grad():
            prior = model.prior_rollout(samples)
        assert torch.all(prior.mu_p == 0.0)
        assert torch.allclose(prior.sigma_p, torch.ones_like(prior.sigma_p))

    def test_teacher_forcing_uses_past_samples_only(self, tiny_model, rng):
        s = torch.from_numpy(rng.standard_normal((2, 9, 8))).float()
        s2 = s.clone()
        s2[:, 5:] += 1.0  # change steps >= 5
        with torch.no_grad():
            a = tiny_model.prior_rollout(s)
            b = tiny_model.prior_rollout(s2)
        assert torch.equal(a.mu_p[:, :6], b.mu_p[:, :6])  # step t uses samples < t
        assert not torch.equal(a.mu_p[:, 6:], b.mu_p[:, 6:])


class TestDecoder:
    def test_paper_output_shape(self):
        model = SpeakerContentVAE(ModelConfig(feat_dim=80, seed=0))
        s = torch.zeros(2, 192)
        c = torch.zeros(2, 15, 32)
        with torch.no_grad():
            out = model.decode(s, c)
        assert out.shape == (2, 15, 80)

    def test_deterministic(self, tiny_model, rng):
        s = torch.from_numpy(rng.standard_normal((2, 32))).float()
        c = torch.from_numpy(rng.standard_normal((2, 10, 8))).float()
        with torch.no_grad():
            assert torch.equal(tiny_model.decode(s, c), tiny_model.decode(s, c))

    def test_shape_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValidationError):
            tiny_model.decode(torch.zeros(2, 32), torch.zeros(3, 10, 8))

    def test_time_shift_equivariance_in_interior(self, rng):
        model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=4, dtype="float64"))
        s = torch.from_numpy(rng.standard_normal((1, 32)))
        c = torch.from_numpy(rng.standard_normal((1, 40, 8)))
        k = 3
        c_shifted = torch.roll(c, shifts=k, dims=1)
        with torch.no_grad():
            y = model.decode(s, c)
            y_shifted = model.decode(s, c_shifted)
        margin = 8  # clear of both receptive-field edges and the roll wrap
        np.testing.assert_allclose(
            y_shifted[:, margin + k : 40 - margin].numpy(),
            y[:, margin : 40 - margin - k].numpy(),
            atol=1e-6,
        )


class TestParameterPartition:
    def test_groups_partition_all_parameters(self, tiny_model):
        groups = tiny_model.parameter_groups()
        assert set(groups) == {"shared_trunk", "speaker_branch", "content_branch", "content_prior", "decoder"}
        names = []
        for d in groups.values():
            names.extend(d)
        all_names = [n for n, _ in tiny_model.named_parameters()]
        assert sorted(names) == sorted(all_names)
        assert len(names) == len(set(names))

    def test_construction_deterministic_under_seed(self):
        a = SpeakerContentVAE(tiny_config(feat_dim=12, seed=8))
        b = SpeakerContentVAE(tiny_config(feat_dim=12, seed=8))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_shared_boundary_config(self, rng):
        # fewer shared layers: remaining blocks belong to the speaker branch
        cfg = tiny_config(feat_dim=12, seed=3, n_shared_layers=2)
        model = SpeakerContentVAE(cfg)
        assert len(model.shared_trunk.layers) == 2
        assert len(model.speaker_branch.rest) == 2
        with torch.no_grad():
            post = model.encode_speaker(batch(rng))
        assert post.mu_s.shape == (4, 32)
