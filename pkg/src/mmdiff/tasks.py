"""Image-synthesis tasks over a trained model.

Every task is a pure function of (model, arguments, seed): it embeds a
prompt, runs the configured sampler from pure noise (or from a corrupted
input for the strength-based baselines), and returns a [-1, 1] image
tensor. Fixing the seed fixes the output bit for bit.

The two *_baseline tasks implement the pixel-space alternatives that the
prompt-based tasks are contrasted against: noising an input part-way and
denoising back (img2img), and convex-combining noised inputs before
unconditional denoising (interpolate).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import tokenize
from .diffusion import GuidanceParams, corrupt
from .embedder import ImageElement, MultimodalPrompt, TextElement
from .model import DiffusionModel
from .samplers import guided_eps, sample

DEFAULT_STYLE_RHO = 0.5


@dataclass(frozen=True)
class GenerationRequest:
    prompt: MultimodalPrompt
    guidance: GuidanceParams = GuidanceParams()
    seed: int = 0
    resolution: int | None = None   # None: whatever the model was trained at


def _as_tokens(text) -> tuple[int, ...]:
    if isinstance(text, str):
        return tuple(int(i) for i in tokenize(text))
    return tuple(int(i) for i in text)


def _run(
    model: DiffusionModel,
    cond: torch.Tensor | None,
    guidance: GuidanceParams,
    generator: torch.Generator,
    batch: int = 1,
    x_start: torch.Tensor | None = None,
    t_start: int | None = None,
    cond_theta: torch.Tensor | None = None,
) -> torch.Tensor:
    eps_fn = guided_eps(model.denoise, cond, guidance.scale, cond_theta=cond_theta)
    x = sample(
        eps_fn, (batch, *model.image_shape), model.schedule,
        guidance.sampler, guidance.steps, generator=generator,
        x_start=x_start, t_start=t_start,
    )
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def generate(model: DiffusionModel, request: GenerationRequest) -> torch.Tensor:
    """Sample one image from pure noise under the embedded prompt.

    The prompt's attention factors act twice: inside the embedder's
    self-attention (already folded into the hidden states) and on the
    condition keys of the denoiser's cross-attention, where the elements
    compete for influence on the image. Uniform factors of 1 skip the
    second application so plain prompts take the unmodified path.
    """
    if request.resolution is not None and request.resolution != model.image_shape[-1]:
        raise ValueError(
            f"requested resolution {request.resolution}, model renders {model.image_shape[-1]}"
        )
    cond = model.embedder.embed(request.prompt)
    theta = None if (request.prompt.theta == 1).all() else request.prompt.theta
    generator = torch.Generator().manual_seed(request.seed)
    return _run(model, cond, request.guidance, generator, cond_theta=theta)[0]


@torch.no_grad()
def style_modify(
    model: DiffusionModel,
    instruction,
    image: torch.Tensor,
    rho: float = DEFAULT_STYLE_RHO,
    guidance: GuidanceParams = GuidanceParams(),
    seed: int = 0,
) -> torch.Tensor:
    """Generate from [instruction text; image] with the image's attention
    factor turned down to rho; rho=1 is exactly generate on that prompt
    and rho=0 matches generating from the text alone (the suppressed keys
    carry zero attention mass everywhere)."""
    if not (0.0 <= rho <= 1.0):
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    prompt = MultimodalPrompt.build(
        [TextElement(_as_tokens(instruction)), ImageElement(image)],
        element_theta=[1.0, rho],
        image_tokens=model.decoder_config.image_tokens,
    )
    return generate(model, GenerationRequest(prompt=prompt, guidance=guidance, seed=seed))


@torch.no_grad()
def compose(
    model: DiffusionModel,
    image1: torch.Tensor,
    image2: torch.Tensor,
    theta1: float = 1.0,
    theta2: float = 1.0,
    guidance: GuidanceParams = GuidanceParams(),
    seed: int = 0,
) -> torch.Tensor:
    """Generate from a two-image prompt with per-image attention factors.
    Element order matters: the embedder is causal, so swapping the images
    changes the conditioning."""
    prompt = MultimodalPrompt.build(
        [ImageElement(image1), ImageElement(image2)],
        element_theta=[theta1, theta2],
        image_tokens=model.decoder_config.image_tokens,
    )
    return generate(model, GenerationRequest(prompt=prompt, guidance=guidance, seed=seed))


@torch.no_grad()
def vary(
    model: DiffusionModel,
    image: torch.Tensor,
    guidance: GuidanceParams = GuidanceParams(),
    seed: int = 0,
) -> torch.Tensor:
    """Fresh sample conditioned on the image's embedding alone."""
    prompt = MultimodalPrompt.build(
        [ImageElement(image)], image_tokens=model.decoder_config.image_tokens
    )
    return generate(model, GenerationRequest(prompt=prompt, guidance=guidance, seed=seed))


@torch.no_grad()
def img2img_baseline(
    model: DiffusionModel,
    image: torch.Tensor,
    text=None,
    strength: float = 0.5,
    guidance: GuidanceParams = GuidanceParams(),
    seed: int = 0,
) -> torch.Tensor:
    """Corrupt the input to t = round(strength * T), then denoise it back
    under the text condition (None denoises unconditionally).

    strength 0 returns the input unchanged; strength 1 never looks at the
    input and takes the pure-noise path of generate.
    """
    if not (0.0 <= strength <= 1.0):
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    cond = None
    if text is not None:
        prompt = MultimodalPrompt.build(
            [TextElement(_as_tokens(text))], image_tokens=model.decoder_config.image_tokens
        )
        cond = model.embedder.embed(prompt)
    generator = torch.Generator().manual_seed(seed)
    n_steps = round(strength * guidance.steps)
    if n_steps == 0:
        return image.clone().clamp(-1.0, 1.0)
    if strength == 1.0:
        return _run(model, cond, guidance, generator)[0]
    t_mid = round(strength * model.schedule.T)
    eps = torch.randn(image.shape, generator=generator)
    x_mid = corrupt(image, eps, t_mid, model.schedule)
    stepped = GuidanceParams(scale=guidance.scale, steps=n_steps, sampler=guidance.sampler)
    return _run(model, cond, stepped, generator, x_start=x_mid[None], t_start=t_mid)[0]


@torch.no_grad()
def interpolate_baseline(
    model: DiffusionModel,
    images: list[torch.Tensor],
    weights: list[float],
    strength: float = 0.5,
    guidance: GuidanceParams = GuidanceParams(),
    seed: int = 0,
) -> torch.Tensor:
    """Noise every input to the same t with one shared draw, convex-combine
    the noised latents, then denoise unconditionally."""
    if len(images) != len(weights) or not images:
        raise ValueError(f"{len(images)} images for {len(weights)} weights")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-6:
        raise ValueError(f"weights must be convex (nonnegative, sum 1), got {weights}")
    if not (0.0 <= strength <= 1.0):
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    generator = torch.Generator().manual_seed(seed)
    n_steps = round(strength * guidance.steps)
    if n_steps == 0:
        mixed = sum(w * im for w, im in zip(weights, images))
        return mixed.clamp(-1.0, 1.0)
    t_mid = round(strength * model.schedule.T)
    eps = torch.randn(images[0].shape, generator=generator)
    mixed = sum(w * corrupt(im, eps, t_mid, model.schedule) for w, im in zip(weights, images))
    stepped = GuidanceParams(scale=guidance.scale, steps=n_steps, sampler=guidance.sampler)
    return _run(model, None, stepped, generator, x_start=mixed[None], t_start=t_mid)[0]


@torch.no_grad()
def condition_attention_mass(
    model: DiffusionModel, prompt: MultimodalPrompt, element_index: int
) -> float:
    """Total post-softmax attention mass landing on one element's key
    positions, summed over the embedder's layers, heads, and query rows."""
    k = model.decoder_config.image_tokens
    lengths = [len(e) if isinstance(e, TextElement) else k for e in prompt.elements]
    start = sum(lengths[:element_index])
    stop = start + lengths[element_index]
    _, maps = model.embedder.embed(prompt, want_attention=True)
    return float(sum(m[..., start:stop].sum() for m in maps))


@torch.no_grad()
def batch_generate(
    model: DiffusionModel,
    cond: torch.Tensor | None,
    guidance: GuidanceParams,
    seeds: list[int],
    cond_theta: torch.Tensor | None = None,
) -> torch.Tensor:
    """Render one image per seed in a single batched sampler run.

    Per-seed starting noise matches what the seed would produce alone;
    the batched network evaluation is for evaluation throughput and does
    not carry the solo runs' bit-identity guarantee.
    """
    starts = torch.cat([
        torch.randn(1, *model.image_shape, generator=torch.Generator().manual_seed(s))
        for s in seeds
    ])
    return _run(model, cond, guidance, torch.Generator(), batch=len(seeds),
                x_start=starts, cond_theta=cond_theta)
