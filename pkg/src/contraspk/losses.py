"""Training objectives: contrastive loss on speaker posterior means, VAE
reconstruction/KL terms, minibatch mutual-information estimators, and the
weighted total.

Embedding batches are laid out pair-major: row 2n + i is view i of pair n,
so an anchor's positive sits at (row XOR 1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

from .errors import ValidationError
from .model import ContentPosterior, ContentPrior, SpeakerPosterior

LOG_2PI = math.log(2.0 * math.pi)


class DenominatorRule(str, enum.Enum):
    # All other segments in the batch (2N - 1 terms, positive included).
    EXCLUDE_ANCHOR_ONLY = "exclude_anchor_only"
    # Literal indicator reading: other pairs' opposite view only (N - 1 terms).
    STRICT_INDICATOR = "strict_indicator"


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.05
    denominator_rule: DenominatorRule = DenominatorRule.EXCLUDE_ANCHOR_ONLY

    def __post_init__(self):
        object.__setattr__(self, "denominator_rule", DenominatorRule(self.denominator_rule))
        if not (self.tau > 0):
            raise ValidationError(f"tau must be positive, got {self.tau}")


@dataclass
class LossBreakdown:
    """Every additive term of the objective, individually reported.

    The mi_* fields hold the weighted contributions (weights default to 1),
    so dsvae_total == recon + kl_speaker + kl_content - (mi_s_x + mi_c_x)
    + mi_s_c and total == nt_xent + lambda * dsvae_total hold by construction.
    """

    nt_xent: float
    recon: float
    kl_speaker: float
    kl_content: float
    mi_s_x: float
    mi_c_x: float
    mi_s_c: float
    dsvae_total: float
    total: float
    lambda_: float
    tau: float

    FIELD_ORDER = (
        "nt_xent", "recon", "kl_speaker", "kl_content", "mi_s_x", "mi_c_x",
        "mi_s_c", "dsvae_total", "total", "lambda", "tau",
    )

    def to_dict(self) -> dict[str, float]:
        d = {name: float(getattr(self, name)) for name in self.FIELD_ORDER if name != "lambda"}
        d["lambda"] = float(self.lambda_)
        return {name: d[name] for name in self.FIELD_ORDER}

    @staticmethod
    def from_dict(d: dict) -> "LossBreakdown":
        kwargs = {k: v for k, v in d.items() if k in LossBreakdown.FIELD_ORDER and k != "lambda"}
        return LossBreakdown(lambda_=d["lambda"], **kwargs)


def nt_xent(mu_s: torch.Tensor, cfg: ContrastiveConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Temperature-scaled cross-entropy over cosine similarities.

    ``mu_s`` is (2N, D) pair-major. Returns (mean loss over the 2N anchors,
    per-anchor losses).
    """
    if mu_s.ndim != 2 or mu_s.shape[0] % 2 != 0:
        raise ValidationError(f"expected (2N, D) embeddings, got {tuple(mu_s.shape)}")
    two_n = mu_s.shape[0]
    if two_n < 4:
        raise ValidationError("need N >= 2 pairs: a single pair has no negatives")
    norms = mu_s.norm(dim=1)
    if torch.any(norms == 0):
        raise ValidationError("zero-norm embedding: cosine similarity undefined")

    z = mu_s / norms.unsqueeze(1)
    sim = (z @ z.T) / cfg.tau  # (2N, 2N)
    idx = torch.arange(two_n, device=mu_s.device)
    pos = sim[idx, idx ^ 1]

    if cfg.denominator_rule == DenominatorRule.EXCLUDE_ANCHOR_ONLY:
        mask = ~torch.eye(two_n, dtype=torch.bool, device=mu_s.device)
    else:
        other_pair = (idx.unsqueeze(1) // 2) != (idx.unsqueeze(0) // 2)
        other_view = (idx.unsqueeze(1) % 2) != (idx.unsqueeze(0) % 2)
        mask = other_pair & other_view
    denom = torch.logsumexp(sim.masked_fill(~mask, float("-inf")), dim=1)
    per_anchor = denom - pos
    return per_anchor.mean(), per_anchor


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """0.5 * squared error summed over frames and dims, averaged over batch
    (unit-variance Gaussian likelihood up to an additive constant)."""
    if x.shape != x_hat.shape:
        raise ValidationError(f"shape mismatch: targets {tuple(x.shape)} vs reconstructions {tuple(x_hat.shape)}")
    return 0.5 * (x - x_hat).pow(2).sum(dim=(1, 2)).mean()


def kl_speaker(post: SpeakerPosterior) -> torch.Tensor:
    """Closed-form KL from the speaker posterior to a standard normal prior."""
    var = post.sigma_s.pow(2)
    per_item = 0.5 * (post.mu_s.pow(2) + var - 1.0 - torch.log(var)).sum(dim=1)
    return per_item.mean()


def kl_content(post: ContentPosterior, prior: ContentPrior) -> torch.Tensor:
    """Per-step closed-form Gaussian KL to the teacher-forced prior, summed
    over steps and dims, averaged over batch."""
    if post.mu_c.shape != prior.mu_p.shape:
        raise ValidationError(
            f"shape mismatch: posterior {tuple(post.mu_c.shape)} vs prior {tuple(prior.mu_p.shape)}"
        )
    var_q = post.sigma_c.pow(2)
    var_p = prior.sigma_p.pow(2)
    kl = torch.log(prior.sigma_p / post.sigma_c) + (var_q + (post.mu_c - prior.mu_p).pow(2)) / (2.0 * var_p) - 0.5
    return kl.sum(dim=(1, 2)).mean()


def _gaussian_log_density_matrix(x: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """log q(x_b | x_b') for every (b, b'), reducing all trailing dims."""
    x_e = x.unsqueeze(1)  # (B, 1, ...)
    mu_e = mu.unsqueeze(0)  # (1, B, ...)
    sigma_e = sigma.unsqueeze(0)
    log_p = -0.5 * ((x_e - mu_e) / sigma_e).pow(2) - torch.log(sigma_e) - 0.5 * LOG_2PI
    return log_p.flatten(start_dim=2).sum(dim=2)  # (B, B)


def mi_terms(
    speaker: SpeakerPosterior,
    content: ContentPosterior,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Minibatch-weighted-sampling MI estimates.

    With q-hat(a) = (1/B) sum_b' q(a | x_b') evaluated in log-sum-exp form:
    mi_a_x approximates I(a; x) as mean_b[log q(a_b|x_b) - log q-hat(a_b)];
    mi_s_c approximates I(s; c) with the joint aggregated over the same
    minibatch index. Content densities factorize over steps and dims.
    Memory scales as B^2 * T * D_c.
    """
    if speaker.sample_s is None or content.sample_c is None:
        raise ValidationError("mi_terms needs sampled latents")
    b = speaker.mu_s.shape[0]
    if b < 2:
        raise ValidationError("mutual-information estimators need batch size >= 2")
    log_b = math.log(b)

    log_qs = _gaussian_log_density_matrix(speaker.sample_s, speaker.mu_s, speaker.sigma_s)
    log_qc = _gaussian_log_density_matrix(content.sample_c, content.mu_c, content.sigma_c)

    own_s = log_qs.diagonal()
    own_c = log_qc.diagonal()
    mix_s = torch.logsumexp(log_qs, dim=1) - log_b
    mix_c = torch.logsumexp(log_qc, dim=1) - log_b
    mix_joint = torch.logsumexp(log_qs + log_qc, dim=1) - log_b

    mi_s_x = (own_s - mix_s).mean()
    mi_c_x = (own_c - mix_c).mean()
    mi_s_c = (mix_joint - mix_s - mix_c).mean()
    return mi_s_x, mi_c_x, mi_s_c


@dataclass
class ForwardResults:
    """Everything one forward pass of the 2N segments produced."""

    features: torch.Tensor  # (2N, T, F) CMN-applied inputs, also the targets
    speaker: SpeakerPosterior
    content: ContentPosterior
    prior: ContentPrior
    recon: torch.Tensor  # (2N, T, F)


def _subset(indices, speaker, content, prior, features, recon):
    return (
        SpeakerPosterior(speaker.mu_s[indices], speaker.sigma_s[indices], speaker.sample_s[indices]),
        ContentPosterior(content.mu_c[indices], content.sigma_c[indices], content.sample_c[indices]),
        ContentPrior(prior.mu_p[indices], prior.sigma_p[indices]),
        features[indices],
        recon[indices],
    )


def total_loss(
    results: ForwardResults,
    lambda_: float,
    cfg: ContrastiveConfig,
    mi_weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    dsvae_views: str = "both",
) -> tuple[torch.Tensor, LossBreakdown]:
    """Assemble the combined objective.

    Returns the tensor to backpropagate and the float breakdown. With
    lambda_ = 0 the returned tensor is exactly the contrastive term, so the
    VAE branches receive no gradient at all. ``dsvae_views`` selects whether
    the VAE terms average over both augmented views or only the first.
    """
    if dsvae_views not in ("both", "first"):
        raise ValidationError(f"dsvae_views must be 'both' or 'first', got {dsvae_views!r}")
    nt, _ = nt_xent(results.speaker.mu_s, cfg)

    if dsvae_views == "both":
        spk, con, pri, feats, recon = results.speaker, results.content, results.prior, results.features, results.recon
    else:
        idx = torch.arange(0, results.features.shape[0], 2, device=results.features.device)
        spk, con, pri, feats, recon = _subset(idx, results.speaker, results.content, results.prior,
                                              results.features, results.recon)

    rec = reconstruction_loss(feats, recon)
    kls = kl_speaker(spk)
    klc = kl_content(con, pri)
    w_sx, w_cx, w_sc = mi_weights
    mi_sx, mi_cx, mi_sc = mi_terms(spk, con)
    mi_sx, mi_cx, mi_sc = w_sx * mi_sx, w_cx * mi_cx, w_sc * mi_sc

    dsvae = rec + kls + klc - (mi_sx + mi_cx) + mi_sc
    total = nt if lambda_ == 0.0 else nt + lambda_ * dsvae

    # Reported identities are assembled in float64 from the term values so
    # they hold to well under 1e-6 regardless of the model dtype.
    terms = [float(v.detach()) for v in (nt, rec, kls, klc, mi_sx, mi_cx, mi_sc)]
    nt_f, rec_f, kls_f, klc_f, mi_sx_f, mi_cx_f, mi_sc_f = terms
    dsvae_f = rec_f + kls_f + klc_f - (mi_sx_f + mi_cx_f) + mi_sc_f
    breakdown = LossBreakdown(
        nt_xent=nt_f,
        recon=rec_f,
        kl_speaker=kls_f,
        kl_content=klc_f,
        mi_s_x=mi_sx_f,
        mi_c_x=mi_cx_f,
        mi_s_c=mi_sc_f,
        dsvae_total=dsvae_f,
        total=nt_f + lambda_ * dsvae_f,
        lambda_=float(lambda_),
        tau=float(cfg.tau),
    )
    return total, breakdown
