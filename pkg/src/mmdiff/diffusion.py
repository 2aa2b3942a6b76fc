"""DDPM foundation: noise schedule, forward corruption, training loss, guidance.

The forward process mixes signal and unit Gaussian noise with
variance-preserving weights, x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps.
Training minimizes the mean squared error between the injected noise and
the denoiser's prediction, with the timestep drawn uniformly from {1..T}
and the condition replaced by a learned NULL with a small dropout
probability (the classifier-free guidance recipe).

Schedule tensors are kept in float64; coefficients are cast to the working
dtype at the point of use so image math stays float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

DEFAULT_T = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 0.012
DEFAULT_GUIDANCE_SCALE = 8.0
DEFAULT_SAMPLE_STEPS = 50
SAMPLERS = ("ddpm", "pseudo_numerical")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor       # (T,) float64, strictly increasing, in (0, 1)
    alphas: torch.Tensor      # 1 - betas
    alpha_bars: torch.Tensor  # cumulative products, strictly decreasing

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t) -> torch.Tensor:
        """abar_t for t in {0..T}; t may be an int or an integer tensor.
        t = 0 means no corruption (abar_0 = 1)."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"t must lie in [0, {self.T}], got {t}")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bars])
        return padded[t]

    @property
    def near_gaussian_terminal(self) -> bool:
        """True when abar_T < 0.01, i.e. x_T is dominated by noise and
        starting a sampler from pure Gaussian noise is sound."""
        return float(self.alpha_bars[-1]) < 0.01

    def snr(self, t) -> torch.Tensor:
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)


def build_schedule(
    T: int = DEFAULT_T,
    kind: str = "scaled_linear",
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear or scaled-linear beta schedule.

    scaled_linear interpolates linearly in sqrt(beta) and squares, the
    convention of the latent-diffusion lineage; linear interpolates beta
    directly.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start < beta_end < 1.0) and T > 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1 and not (0.0 < beta_start < 1.0):
        raise ValueError(f"beta_start must lie in (0, 1), got {beta_start}")
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "scaled_linear":
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, T, dtype=torch.float64) ** 2
    else:
        raise ValueError(f"schedule kind must be linear or scaled_linear, got {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def corrupt(x: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward corruption x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps.

    t is an int applied to the whole batch or a (B,) tensor of per-element
    steps (x then being (B, ...)).
    """
    if x.shape != eps.shape:
        raise ValueError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} must match")
    ab = sched.alpha_bar(t).to(x.dtype)
    if ab.dim() > 0:
        if ab.shape[0] != x.shape[0]:
            raise ValueError(f"{ab.shape[0]} timesteps for batch of {x.shape[0]}")
        ab = ab.view(-1, *([1] * (x.dim() - 1)))
    return ab.sqrt() * x + (1.0 - ab).sqrt() * eps


@dataclass(frozen=True)
class GuidanceParams:
    scale: float = DEFAULT_GUIDANCE_SCALE
    steps: int = DEFAULT_SAMPLE_STEPS
    sampler: str = "pseudo_numerical"

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: eps_u + scale * (eps_c - eps_u).

    scale 0 and 1 return the unconditional/conditional branch exactly.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"branch shapes differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if scale == 0.0:
        return eps_uncond
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def select_condition(pair: tuple, p_image: float, generator: torch.Generator):
    """Pick the image member of (image_cond, text_cond) with probability
    p_image, else the text member; reproducible under the generator."""
    if not (0.0 <= p_image <= 1.0):
        raise ValueError(f"p_image must lie in [0, 1], got {p_image}")
    image_cond, text_cond = pair
    u = torch.rand((), generator=generator)
    return image_cond if float(u) < p_image else text_cond


def training_loss(
    denoiser,
    images: torch.Tensor,
    conditions: torch.Tensor | None,
    sched: NoiseSchedule,
    generator: torch.Generator,
    dropout: float = 0.0,
    null_condition: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    timesteps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE over a batch, averaged per coordinate.

    denoiser(x_t, c, t) must return a tensor shaped like x_t; conditions is
    a uniform (B, L, d) tensor or None for an unconditional batch. With
    dropout > 0, each element's condition is replaced by null_condition
    with that probability (the replaced and kept elements run as separate
    denoiser calls since NULL has its own length).

    noise and timesteps override the random draws; tests use them to pin
    the corruption exactly.
    """
    if images.dim() == 0 or images.shape[0] == 0:
        raise ValueError("empty batch")
    B = images.shape[0]
    if timesteps is None:
        timesteps = torch.randint(1, sched.T + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    if dropout > 0.0:
        dropped = torch.rand(B, generator=generator) < dropout
    else:
        dropped = torch.zeros(B, dtype=torch.bool)
    if dropped.any() and null_condition is None:
        raise ValueError("dropout > 0 requires a null_condition")

    x_t = corrupt(images, noise, timesteps, sched)
    total = images.new_zeros(())
    for flag in (False, True):
        idx = torch.nonzero(dropped == flag, as_tuple=True)[0]
        if idx.numel() == 0:
            continue
        if flag:
            c = null_condition[None].expand(idx.numel(), -1, -1)
        else:
            c = conditions[idx] if conditions is not None else None
        pred = denoiser(x_t[idx], c, timesteps[idx])
        if pred.shape != x_t[idx].shape:
            raise ValueError(f"denoiser returned {tuple(pred.shape)} for {tuple(x_t[idx].shape)}")
        diff = (pred - noise[idx]) ** 2
        total = total + diff.reshape(idx.numel(), -1).mean(dim=1).sum()
    return total / B
