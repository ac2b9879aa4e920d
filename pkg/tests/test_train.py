import json
import math

import numpy as np
import pytest
import torch

import contraspk.train as tr
from contraspk.dataset import AugmentationPolicy, SyntheticSpec, generate_synthetic
from contraspk.errors import TrainingError, ValidationError
from contraspk.losses import ContrastiveConfig, total_loss
from contraspk.model import SpeakerContentVAE, tiny_config
from contraspk.seeding import derive_seed, torch_generator
from contraspk.train import (
    TrainConfig,
    forward_batch,
    load_checkpoint,
    lr_at,
    model_from_checkpoint,
    read_step_log,
    save_checkpoint,
    train,
)


def smoke_corpus(num_speakers=2, utts=4, seed=0):
    return generate_synthetic(
        SyntheticSpec(
            num_speakers=num_speakers, utts_per_speaker=utts, feat_dim=12, utt_frames=60, seed=seed
        )
    )


def smoke_cfg(**overrides):
    base = dict(
        epochs=2,
        batch_pairs=4,
        warmup_epochs=1,
        seg_seconds=0.25,
        lambda_=0.05,
        seed=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


MODEL_CFG = tiny_config(feat_dim=12, seed=1)


class TestLrSchedule:
    CFG = TrainConfig(epochs=50, warmup_epochs=10, batch_pairs=256)

    def test_step_zero_is_lr_start(self):
        assert lr_at(0, 100, self.CFG) == 1e-4

    def test_end_of_warmup_is_lr_peak(self):
        assert lr_at(10 * 100, 100, self.CFG) == 1e-3

    def test_final_step_is_lr_final(self):
        total = 50 * 100
        assert abs(lr_at(total - 1, 100, self.CFG) - 1e-5) < 1e-12

    def test_continuous_at_boundary(self):
        w = 10 * 100
        before = lr_at(w - 1, 100, self.CFG)
        at = lr_at(w, 100, self.CFG)
        after = lr_at(w + 1, 100, self.CFG)
        assert before < at
        assert abs(at - 1e-3) == 0.0
        assert after < at
        assert at - before < 2e-6 and at - after < 2e-6

    def test_monotone_decay_after_peak(self):
        values = [lr_at(s, 10, self.CFG) for s in range(100, 500, 7)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_no_warmup_starts_at_peak(self):
        cfg = TrainConfig(epochs=5, warmup_epochs=0)
        assert lr_at(0, 10, cfg) == cfg.lr_peak

    def test_validation(self):
        with pytest.raises(ValidationError):
            lr_at(-1, 10, self.CFG)
        with pytest.raises(ValidationError):
            TrainConfig(warmup_epochs=60, epochs=50)


class TestTrainingLoop:
    def test_smoke_convergence_and_logs(self, tmp_path):
        corpus = smoke_corpus()
        cfg = smoke_cfg(epochs=5)
        result = train(corpus, MODEL_CFG, cfg, tmp_path / "run")
        assert len(result.epoch_mean_total) == 5
        assert result.epoch_mean_total[4] < result.epoch_mean_total[0]
        records = read_step_log(result.step_log)
        assert len(records) == 5 * 2  # 8 utts / 4 pairs = 2 steps per epoch
        expected_keys = {"step", "epoch", "lr", "nt_xent", "recon", "kl_speaker", "kl_content",
                         "mi_s_x", "mi_c_x", "mi_s_c", "dsvae_total", "total", "lambda", "tau"}
        assert expected_keys <= set(records[0])
        assert len(result.checkpoints) == 5

    def test_fixed_seed_rerun_bitwise_identical(self, tmp_path):
        corpus = smoke_corpus()
        cfg = smoke_cfg()
        a = train(corpus, MODEL_CFG, cfg, tmp_path / "a")
        b = train(corpus, MODEL_CFG, cfg, tmp_path / "b")
        assert (tmp_path / "a" / "steps.jsonl").read_bytes() == (tmp_path / "b" / "steps.jsonl").read_bytes()
        sa = load_checkpoint(a.checkpoints[-1])["model_state"]
        sb = load_checkpoint(b.checkpoints[-1])["model_state"]
        for key in sa:
            assert torch.equal(sa[key], sb[key]), key

    def test_resume_matches_uninterrupted(self, tmp_path):
        import shutil

        corpus = smoke_corpus()
        straight = train(corpus, MODEL_CFG, smoke_cfg(epochs=3), tmp_path / "straight")
        # simulate an interruption after epoch 2 of the same schedule
        (tmp_path / "resumed" / "checkpoints").mkdir(parents=True)
        shutil.copy(
            tmp_path / "straight" / "checkpoints" / "epoch_0002.pt",
            tmp_path / "resumed" / "checkpoints" / "epoch_0002.pt",
        )
        resumed = train(corpus, MODEL_CFG, smoke_cfg(epochs=3), tmp_path / "resumed", resume=True)
        sa = load_checkpoint(straight.checkpoints[-1])
        sb = load_checkpoint(resumed.checkpoints[-1])
        assert sa["step"] == sb["step"]
        for key in sa["model_state"]:
            assert torch.equal(sa["model_state"][key], sb["model_state"][key]), key
        # optimizer moments restored exactly as well
        for pa, pb in zip(sa["optimizer_state"]["state"].values(), sb["optimizer_state"]["state"].values()):
            assert torch.equal(pa["exp_avg"], pb["exp_avg"])

    def test_resume_without_checkpoints_fails(self, tmp_path):
        with pytest.raises(TrainingError):
            train(smoke_corpus(), MODEL_CFG, smoke_cfg(), tmp_path / "none", resume=True)

    def test_corpus_smaller_than_batch_rejected(self, tmp_path):
        corpus = smoke_corpus(num_speakers=1, utts=2)
        with pytest.raises(ValidationError):
            train(corpus, MODEL_CFG, smoke_cfg(batch_pairs=8), tmp_path / "x")

    def test_nonfinite_loss_aborts_with_breakdown(self, tmp_path, monkeypatch):
        def poisoned(results, lam, cfg, mi_weights=(1.0, 1.0, 1.0), dsvae_views="both"):
            total, bd = total_loss(results, lam, cfg, mi_weights=mi_weights, dsvae_views=dsvae_views)
            bd.total = float("nan")
            return total, bd

        monkeypatch.setattr(tr, "total_loss", poisoned)
        with pytest.raises(TrainingError, match="non-finite loss"):
            train(smoke_corpus(), MODEL_CFG, smoke_cfg(), tmp_path / "bad")

    def test_checkpoint_roundtrip_one_step(self, tmp_path):
        """save -> load -> one step equals one uninterrupted step, bitwise."""
        corpus = smoke_corpus()
        cfg = smoke_cfg(epochs=1)
        result = train(corpus, MODEL_CFG, cfg, tmp_path / "base")
        # one payload per instance: Optimizer.load_state_dict adopts the
        # payload's tensors rather than copying them
        payload_a = load_checkpoint(result.checkpoints[-1])
        payload_b = load_checkpoint(result.checkpoints[-1])
        model_a = model_from_checkpoint(payload_a)
        model_b = model_from_checkpoint(payload_b)
        opt_a = torch.optim.Adam(model_a.parameters(), lr=1e-3)
        opt_b = torch.optim.Adam(model_b.parameters(), lr=1e-3)
        opt_a.load_state_dict(payload_a["optimizer_state"])
        opt_b.load_state_dict(payload_b["optimizer_state"])

        from contraspk import dataset as ds

        seg = ds.seg_frames_for(corpus, cfg.seg_seconds)
        batch = ds.build_pair_batch(corpus, corpus.utt_ids[:4], seg, AugmentationPolicy(), 5)
        for model, opt in ((model_a, opt_a), (model_b, opt_b)):
            res = forward_batch(model, batch.flat_views(), torch_generator(8))
            total, _ = total_loss(res, cfg.lambda_, cfg.contrastive())
            opt.zero_grad()
            total.backward()
            opt.step()
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert torch.equal(pa, pb)


class TestLambdaZeroEquivalence:
    def test_simclr_path_identical_with_and_without_vae_graph(self):
        """lambda=0 with the VAE branches evaluated under no_grad must update
        parameters exactly like a run that builds their autograd graph."""
        corpus = smoke_corpus()
        from contraspk import dataset as ds

        seg = ds.seg_frames_for(corpus, 0.25)
        cfg = ContrastiveConfig()

        trajectories = []
        for grad_dsvae in (True, False):
            model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=2))
            opt = torch.optim.Adam(model.parameters(), lr=1e-3)
            for step in range(3):
                batch = ds.build_pair_batch(
                    corpus, corpus.utt_ids[: 4], seg, AugmentationPolicy(), derive_seed(0, step)
                )
                res = forward_batch(model, batch.flat_views(), torch_generator(step), grad_dsvae=grad_dsvae)
                total, bd = total_loss(res, 0.0, cfg)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
            trajectories.append({n: p.detach().clone() for n, p in model.named_parameters()})
        for name in trajectories[0]:
            assert torch.equal(trajectories[0][name], trajectories[1][name]), name

    def test_lambda_zero_leaves_vae_branches_untouched(self, tmp_path):
        corpus = smoke_corpus()
        result = train(corpus, MODEL_CFG, smoke_cfg(lambda_=0.0), tmp_path / "run")
        init = SpeakerContentVAE(MODEL_CFG)
        final = model_from_checkpoint(result.checkpoints[-1])
        groups_init = init.parameter_groups()
        groups_final = final.parameter_groups()
        for group in ("content_branch", "content_prior", "decoder"):
            for name in groups_init[group]:
                assert torch.equal(groups_init[group][name], groups_final[group][name]), name
        # while the contrastive path did move
        moved = any(
            not torch.equal(groups_init["speaker_branch"][n], groups_final["speaker_branch"][n])
            for n in groups_init["speaker_branch"]
        )
        assert moved

    def test_lambda_zero_logs_vae_terms(self, tmp_path):
        corpus = smoke_corpus()
        result = train(corpus, MODEL_CFG, smoke_cfg(lambda_=0.0, epochs=1), tmp_path / "run")
        records = read_step_log(result.step_log)
        for rec in records:
            assert rec["total"] == rec["nt_xent"]
            assert rec["recon"] > 0.0  # reported even though unused


class TestGradientMasks:
    """No parameter is updated by a loss term it cannot influence."""

    def test_term_gradient_footprints(self, rng):
        from conftest import make_batch
        from contraspk.losses import kl_content, kl_speaker, nt_xent, reconstruction_loss

        model = SpeakerContentVAE(tiny_config(feat_dim=12, seed=4))
        x = make_batch(rng, n_pairs=2, t=10, f=12)
        res = forward_batch(model, x, torch_generator(0))
        terms = {
            "nt_xent": (nt_xent(res.speaker.mu_s, ContrastiveConfig())[0],
                        {"content_branch", "content_prior", "decoder"}),
            "recon": (reconstruction_loss(res.features, res.recon), {"content_prior"}),
            "kl_speaker": (kl_speaker(res.speaker), {"content_branch", "content_prior", "decoder"}),
            "kl_content": (kl_content(res.content, res.prior), {"speaker_branch", "decoder"}),
        }
        groups = model.parameter_groups()
        for term_name, (value, silent_groups) in terms.items():
            grads = torch.autograd.grad(value, list(model.parameters()), allow_unused=True, retain_graph=True)
            by_name = {n: g for (n, _), g in zip(model.named_parameters(), grads)}
            for group in silent_groups:
                for pname in groups[group]:
                    g = by_name[pname]
                    assert g is None or torch.all(g == 0), f"{term_name} leaked into {pname}"


class TestCheckpointFormat:
    def test_contents(self, tmp_path):
        model = SpeakerContentVAE(MODEL_CFG)
        opt = torch.optim.Adam(model.parameters())
        save_checkpoint(tmp_path / "ck.pt", model, opt, smoke_cfg(), epoch=3, step=17)
        payload = load_checkpoint(tmp_path / "ck.pt")
        assert payload["format_version"] == 1
        assert payload["epoch"] == 3 and payload["step"] == 17
        assert payload["model_config"]["feat_dim"] == 12
        assert "lambda" in payload["train_config"]
        rebuilt = model_from_checkpoint(payload)
        for pa, pb in zip(model.parameters(), rebuilt.parameters()):
            assert torch.equal(pa, pb)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(TrainingError):
            load_checkpoint(tmp_path / "none.pt")
