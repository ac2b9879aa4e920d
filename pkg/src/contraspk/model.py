"""Speaker/content network family behind the contrastive-plus-VAE objective.

A shared frame-level trunk (ECAPA-TDNN style: SE-Res2Blocks, multi-layer
feature aggregation, attentive statistics pooling) feeds two branches: a
speaker encoder producing one Gaussian posterior per segment, and an
autoregressive content encoder producing one Gaussian posterior per frame.
A learned recurrent prior scores the content sequence and a dilated
convolutional decoder reconstructs features from the sampled latents.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError, ValidationError
from .seeding import torch_generator

PARAM_GROUPS = ("shared_trunk", "speaker_branch", "content_branch", "content_prior", "decoder")


@dataclass
class ModelConfig:
    feat_dim: int = 80
    channels: int = 512
    block_dilations: tuple[int, ...] = (2, 3, 4)
    res2net_scale: int = 8
    se_bottleneck: int = 128
    attention_channels: int = 128
    # Frame-level layers are [initial conv, SE-Res2Block 1..3]; the lowest
    # n_shared_layers of them are shared between the two encoders.
    n_shared_layers: int = 4
    d_s: int = 192
    d_c: int = 32
    content_birnn_hidden: int = 512
    content_rnn_hidden: int = 512
    prior_hidden: int = 512
    decoder_hidden: int = 512
    decoder_dilations: tuple[int, int] = (2, 1)
    log_sigma_min: float = -7.0
    log_sigma_max: float = 2.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.block_dilations = tuple(self.block_dilations)
        self.decoder_dilations = tuple(self.decoder_dilations)
        n_frame_layers = 1 + len(self.block_dilations)
        if not (0 <= self.n_shared_layers <= n_frame_layers):
            raise ValidationError(f"n_shared_layers must be in [0, {n_frame_layers}]")
        if self.channels % self.res2net_scale != 0:
            raise ValidationError("channels must be divisible by res2net_scale")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype '{self.dtype}'")
        for name in ("feat_dim", "channels", "d_s", "d_c", "content_birnn_hidden",
                     "content_rnn_hidden", "prior_hidden", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def tiny_config(feat_dim: int = 20, **overrides) -> ModelConfig:
    """Desk/test-scale variant of the paper-sized topology."""
    base = dict(
        feat_dim=feat_dim,
        channels=64,
        res2net_scale=8,
        se_bottleneck=32,
        attention_channels=32,
        d_s=32,
        d_c=8,
        content_birnn_hidden=64,
        content_rnn_hidden=64,
        prior_hidden=64,
        decoder_hidden=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class SpeakerPosterior:
    """Per-segment Gaussian q(speaker latent | segment)."""

    mu_s: torch.Tensor  # (B, D_s)
    sigma_s: torch.Tensor  # (B, D_s), > 0
    sample_s: torch.Tensor | None = None


@dataclass
class ContentPosterior:
    """Per-frame Gaussian q(content latent_t | content latents_<t, frames_<=t)."""

    mu_c: torch.Tensor  # (B, T, D_c)
    sigma_c: torch.Tensor  # (B, T, D_c), > 0
    sample_c: torch.Tensor | None = None


@dataclass
class ContentPrior:
    """Teacher-forced per-step prior parameters over the content sequence."""

    mu_p: torch.Tensor  # (B, T, D_c)
    sigma_p: torch.Tensor  # (B, T, D_c), > 0


def _finite(t: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalError("non-finite activations", layer=layer)
    return t


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor,
                   rng_seed: int | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """mu + sigma * eps with eps ~ N(0, I) drawn deterministically."""
    if torch.any(sigma <= 0):
        raise ValidationError("sigma must be strictly positive")
    if generator is None:
        if rng_seed is None:
            raise ValidationError("reparameterize needs rng_seed or generator")
        generator = torch_generator(rng_seed)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


class SigmaHead(nn.Module):
    """Linear head emitting log sigma; sigma = exp(clamp(log sigma, lo, hi))."""

    def __init__(self, in_dim: int, out_dim: int, lo: float, hi: float):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.lo, self.hi = lo, hi

    def forward(self, x):
        return torch.exp(torch.clamp(self.linear(x), self.lo, self.hi))


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, bottleneck)
        self.fc2 = nn.Linear(bottleneck, channels)

    def forward(self, x):  # (B, C, T)
        s = torch.sigmoid(self.fc2(torch.relu(self.fc1(x.mean(dim=2)))))
        return x * s.unsqueeze(2)


class SeRes2Block(nn.Module):
    """1x1 conv, scale-split dilated convs, 1x1 conv, squeeze-excitation,
    residual add."""

    def __init__(self, channels: int, dilation: int, scale: int, se_bottleneck: int):
        super().__init__()
        width = channels // scale
        self.scale = scale
        self.width = width
        self.conv_in = nn.Conv1d(channels, channels, kernel_size=1)
        self.bn_in = nn.BatchNorm1d(channels)
        self.convs = nn.ModuleList(
            nn.Conv1d(width, width, kernel_size=3, dilation=dilation, padding=dilation)
            for _ in range(scale - 1)
        )
        self.conv_out = nn.Conv1d(channels, channels, kernel_size=1)
        self.bn_out = nn.BatchNorm1d(channels)
        self.se = SqueezeExcite(channels, se_bottleneck)

    def forward(self, x):  # (B, C, T)
        h = self.bn_in(torch.relu(self.conv_in(x)))
        chunks = torch.split(h, self.width, dim=1)
        outs = [chunks[0]]
        prev = None
        for i, conv in enumerate(self.convs):
            inp = chunks[i + 1] if prev is None else chunks[i + 1] + prev
            prev = torch.relu(conv(inp))
            outs.append(prev)
        h = self.bn_out(torch.relu(self.conv_out(torch.cat(outs, dim=1))))
        return x + self.se(h)


class AttentiveStatsPool(nn.Module):
    """Channel-dependent attention over time; outputs weighted mean and std.

    Attention logits come from a per-frame 1x1-conv net over the local frame
    concatenated with global mean/std context, so the pooled statistics are
    invariant to frame order.
    """

    def __init__(self, channels: int, attention_channels: int, eps: float = 1e-6):
        super().__init__()
        self.pre = nn.Conv1d(3 * channels, attention_channels, kernel_size=1)
        self.post = nn.Conv1d(attention_channels, channels, kernel_size=1)
        self.eps = eps

    @staticmethod
    def weighted_stats(h: torch.Tensor, weights: torch.Tensor, eps: float = 1e-6):
        """Weighted mean/std over time; weights sum to 1 along T per channel."""
        mean = (weights * h).sum(dim=2)
        var = (weights * h * h).sum(dim=2) - mean * mean
        return mean, torch.sqrt(torch.clamp(var, min=eps))

    def forward(self, h):  # (B, C, T) -> (B, 2C)
        t = h.shape[2]
        mean = h.mean(dim=2, keepdim=True).expand(-1, -1, t)
        std = h.std(dim=2, unbiased=False, keepdim=True).expand(-1, -1, t)
        logits = self.post(torch.tanh(self.pre(torch.cat([h, mean, std], dim=1))))
        weights = torch.softmax(logits, dim=2)
        mu, sigma = self.weighted_stats(h, weights, self.eps)
        return torch.cat([mu, sigma], dim=1)


def _frame_layers(cfg: ModelConfig) -> list[nn.Module]:
    first = nn.Sequential(
        nn.Conv1d(cfg.feat_dim, cfg.channels, kernel_size=5, padding=2),
        nn.ReLU(),
        nn.BatchNorm1d(cfg.channels),
    )
    blocks = [
        SeRes2Block(cfg.channels, d, cfg.res2net_scale, cfg.se_bottleneck)
        for d in cfg.block_dilations
    ]
    return [first, *blocks]


class SharedTrunk(nn.Module):
    """The lowest frame-level layers, shared by both encoders."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(_frame_layers(cfg)[: cfg.n_shared_layers])

    def forward(self, x):  # (B, F, T) -> (boundary, per-block outputs)
        block_outs = []
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i > 0:
                block_outs.append(h)
        return h, block_outs


class SpeakerBranch(nn.Module):
    """Remaining frame layers, feature aggregation, attentive pooling, heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rest = nn.ModuleList(_frame_layers(cfg)[cfg.n_shared_layers :])
        n_blocks = len(cfg.block_dilations)
        agg = n_blocks * cfg.channels
        self.mfa = nn.Conv1d(agg, agg, kernel_size=1)
        self.pool = AttentiveStatsPool(agg, cfg.attention_channels)
        self.bn = nn.BatchNorm1d(2 * agg)
        self.mu_head = nn.Linear(2 * agg, cfg.d_s)
        self.sigma_head = SigmaHead(2 * agg, cfg.d_s, cfg.log_sigma_min, cfg.log_sigma_max)

    def forward(self, boundary, block_outs) -> SpeakerPosterior:
        h = boundary
        outs = list(block_outs)
        for layer in self.rest:
            h = layer(h)
            outs.append(h)
        h = _finite(torch.relu(self.mfa(torch.cat(outs, dim=1))), "speaker.mfa")
        pooled = _finite(self.bn(self.pool(h)), "speaker.pool")
        mu = _finite(self.mu_head(pooled), "speaker.mu_head")
        sigma = _finite(self.sigma_head(pooled), "speaker.sigma_head")
        return SpeakerPosterior(mu_s=mu, sigma_s=sigma)


class ContentEncoder(nn.Module):
    """Bidirectional recurrence over trunk features, then an autoregressive
    unidirectional recurrence whose step t consumes the step t-1 sample."""

    def __init__(self, cfg: ModelConfig, in_dim: int):
        super().__init__()
        self.d_c = cfg.d_c
        self.bilstm = nn.LSTM(in_dim, cfg.content_birnn_hidden, batch_first=True, bidirectional=True)
        self.cell = nn.RNNCell(2 * cfg.content_birnn_hidden + cfg.d_c, cfg.content_rnn_hidden)
        self.mu_head = nn.Linear(cfg.content_rnn_hidden, cfg.d_c)
        self.sigma_head = SigmaHead(cfg.content_rnn_hidden, cfg.d_c, cfg.log_sigma_min, cfg.log_sigma_max)

    def posterior_steps(self, h: torch.Tensor, generator: torch.Generator) -> ContentPosterior:
        """Run the autoregressive recurrence over precomputed features h
        (B, T, H); step t sees h[:, t] and the previous content sample only."""
        b, t, _ = h.shape
        state = h.new_zeros(b, self.cell.hidden_size)
        e_prev = h.new_zeros(b, self.d_c)
        mus, sigmas, samples = [], [], []
        for step in range(t):
            state = self.cell(torch.cat([h[:, step], e_prev], dim=1), state)
            mu = self.mu_head(state)
            sigma = self.sigma_head(state)
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            e_prev = mu + sigma * eps
            mus.append(mu)
            sigmas.append(sigma)
            samples.append(e_prev)
        mu_c = _finite(torch.stack(mus, dim=1), "content.mu_head")
        sigma_c = _finite(torch.stack(sigmas, dim=1), "content.sigma_head")
        return ContentPosterior(mu_c=mu_c, sigma_c=sigma_c, sample_c=torch.stack(samples, dim=1))

    def forward(self, boundary: torch.Tensor, generator: torch.Generator) -> ContentPosterior:
        h, _ = self.bilstm(boundary.transpose(1, 2))  # (B, T, 2H)
        _finite(h, "content.bilstm")
        return self.posterior_steps(h, generator)


class ContentPriorNet(nn.Module):
    """Learned recurrent prior over the content sequence, step t conditioned
    on samples at steps < t (step 1 on the zero vector)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cell = nn.RNNCell(cfg.d_c, cfg.prior_hidden)
        self.mu_head = nn.Linear(cfg.prior_hidden, cfg.d_c)
        self.sigma_head = SigmaHead(cfg.prior_hidden, cfg.d_c, cfg.log_sigma_min, cfg.log_sigma_max)

    def forward(self, samples: torch.Tensor) -> ContentPrior:
        """Teacher-forced rollout over posterior samples (B, T, D_c)."""
        b, t, d = samples.shape
        state = samples.new_zeros(b, self.cell.hidden_size)
        e_prev = samples.new_zeros(b, d)
        mus, sigmas = [], []
        for step in range(t):
            state = self.cell(e_prev, state)
            mus.append(self.mu_head(state))
            sigmas.append(self.sigma_head(state))
            e_prev = samples[:, step]
        mu_p = _finite(torch.stack(mus, dim=1), "prior.mu_head")
        sigma_p = _finite(torch.stack(sigmas, dim=1), "prior.sigma_head")
        return ContentPrior(mu_p=mu_p, sigma_p=sigma_p)


class FeatureDecoder(nn.Module):
    """Two dilated convolutions mapping [speaker sample; content sample_t] to
    reconstructed frames; no output nonlinearity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d1, d2 = cfg.decoder_dilations
        self.conv1 = nn.Conv1d(cfg.d_s + cfg.d_c, cfg.decoder_hidden, kernel_size=3, dilation=d1, padding=d1)
        self.conv2 = nn.Conv1d(cfg.decoder_hidden, cfg.feat_dim, kernel_size=3, dilation=d2, padding=d2)

    def forward(self, sample_s: torch.Tensor, sample_c: torch.Tensor) -> torch.Tensor:
        if sample_s.ndim != 2 or sample_c.ndim != 3 or sample_s.shape[0] != sample_c.shape[0]:
            raise ValidationError(
                f"latent shape mismatch: speaker {tuple(sample_s.shape)}, content {tuple(sample_c.shape)}"
            )
        t = sample_c.shape[1]
        z = torch.cat([sample_s.unsqueeze(1).expand(-1, t, -1), sample_c], dim=2)  # (B, T, Ds+Dc)
        h = torch.relu(self.conv1(z.transpose(1, 2)))
        return _finite(self.conv2(h).transpose(1, 2), "decoder.conv2")  # (B, T, F)


class SpeakerContentVAE(nn.Module):
    """Full network; parameters partition into the five named groups."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.shared_trunk = SharedTrunk(cfg)
            self.speaker_branch = SpeakerBranch(cfg)
            content_in = cfg.channels if cfg.n_shared_layers >= 1 else cfg.feat_dim
            self.content_branch = ContentEncoder(cfg, content_in)
            self.content_prior = ContentPriorNet(cfg)
            self.decoder = FeatureDecoder(cfg)
        self.to(cfg.torch_dtype)

    # -- plumbing ----------------------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Named parameters keyed by the owning group; groups partition the
        full parameter set."""
        return {g: dict(getattr(self, g).named_parameters(prefix=g)) for g in PARAM_GROUPS}

    def _prepare(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(x)
        x = x.to(self.cfg.torch_dtype)
        if x.ndim != 3 or x.shape[2] != self.cfg.feat_dim:
            raise ValidationError(f"expected input (B, T, {self.cfg.feat_dim}), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValidationError("input features contain non-finite values")
        return x

    def _trunk(self, x: torch.Tensor):
        boundary, block_outs = self.shared_trunk(x.transpose(1, 2))
        return _finite(boundary, "shared_trunk"), block_outs

    # -- public operations --------------------------------------------------

    def encode_speaker(self, x) -> SpeakerPosterior:
        boundary, block_outs = self._trunk(self._prepare(x))
        return self.speaker_branch(boundary, block_outs)

    def encode_content(self, x, rng_seed: int | None = None,
                       generator: torch.Generator | None = None) -> ContentPosterior:
        if generator is None:
            generator = torch_generator(0 if rng_seed is None else rng_seed)
        boundary, _ = self._trunk(self._prepare(x))
        return self.content_branch(boundary, generator)

    def prior_rollout(self, sample_c: torch.Tensor) -> ContentPrior:
        return self.content_prior(sample_c)

    def decode(self, sample_s: torch.Tensor, sample_c: torch.Tensor) -> torch.Tensor:
        return self.decoder(sample_s, sample_c)

    def forward_all(self, x, generator: torch.Generator):
        """One pass of everything the training objective needs.

        Returns (speaker posterior with sample, content posterior with sample,
        teacher-forced prior, reconstruction)."""
        x = self._prepare(x)
        boundary, block_outs = self._trunk(x)
        spk = self.speaker_branch(boundary, block_outs)
        spk.sample_s = reparameterize(spk.mu_s, spk.sigma_s, generator=generator)
        con = self.content_branch(boundary, generator)
        prior = self.content_prior(con.sample_c)
        recon = self.decoder(spk.sample_s, con.sample_c)
        return spk, con, prior, recon
