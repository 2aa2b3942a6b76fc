"""Reverse-process samplers: strided ancestral DDPM and pseudo-numerical PLMS.

Both consume an eps_fn(x, t) -> predicted noise callback, so they can run
against the real guided model or against analytic stand-ins in tests. The
ancestral sampler injects fresh posterior noise at every step except the
last; the pseudo-numerical sampler is deterministic once the starting
noise is fixed, using a pseudo improved-Euler first step and then
Adams-Bashforth multistep combinations of stored noise predictions.

Neither sampler clamps intermediate or final values; callers working with
images clamp to [-1, 1] at the end (pure-math outputs keep the analytic
sampler oracles exact).
"""

from __future__ import annotations

import math

import torch

from .diffusion import NoiseSchedule, cfg_combine


def strided_timesteps(T: int, steps: int, stride: str = "uniform") -> list[int]:
    """Ascending subsequence of {1..T} with final element T.

    uniform spaces steps evenly; quadratic concentrates them near t=0 and
    raises if the requested count collides under rounding (use fewer steps
    or the uniform stride).
    """
    if not (1 <= steps <= T):
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    frac = torch.linspace(0.0, 1.0, steps, dtype=torch.float64)
    if stride == "uniform":
        taus = (1 + frac * (T - 1)).round().long()
    elif stride == "quadratic":
        taus = (1 + frac.square() * (T - 1)).round().long()
        if len(set(taus.tolist())) != steps:
            raise ValueError(
                f"quadratic stride with {steps} steps collides at T={T}; reduce steps"
            )
    else:
        raise ValueError(f"stride must be uniform or quadratic, got {stride!r}")
    return taus.tolist()


def _top_step(sched: NoiseSchedule, t_start: int | None) -> int:
    if t_start is None:
        return sched.T
    if not (1 <= t_start <= sched.T):
        raise ValueError(f"t_start must lie in [1, {sched.T}], got {t_start}")
    return t_start


def transfer(x: torch.Tensor, e: torch.Tensor, t: int, s: int, sched: NoiseSchedule) -> torch.Tensor:
    """Move x from time t to earlier time s along the predicted-noise direction.

    At s=0 this reduces to the standard clean-sample estimate
    (x - sqrt(1-abar_t) e) / sqrt(abar_t).
    """
    ab_t = float(sched.alpha_bar(t))
    ab_s = float(sched.alpha_bar(s))
    coeff_x = math.sqrt(ab_s) / math.sqrt(ab_t)
    denom = math.sqrt(ab_t) * (math.sqrt((1 - ab_s) * ab_t) + math.sqrt((1 - ab_t) * ab_s))
    coeff_e = (ab_s - ab_t) / denom
    return coeff_x * x - coeff_e * e


def sample_ddpm(
    eps_fn,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    steps: int | None = None,
    generator: torch.Generator | None = None,
    x_start: torch.Tensor | None = None,
    stride: str = "uniform",
    t_start: int | None = None,
) -> torch.Tensor:
    """Ancestral sampling over a strided subsequence of the schedule.

    Each stride is treated as one effective step with beta_eff =
    1 - abar_t/abar_s and the matching posterior variance; the final step
    returns the posterior mean (the predicted clean sample) without noise.
    t_start denoises from an intermediate time instead of T (x_start then
    being a sample corrupted to that time).
    """
    top = _top_step(sched, t_start)
    steps = top if steps is None else steps
    taus = strided_timesteps(top, steps, stride)
    x = torch.randn(shape, generator=generator) if x_start is None else x_start.clone()
    for i in reversed(range(len(taus))):
        t = taus[i]
        s = taus[i - 1] if i > 0 else 0
        e = eps_fn(x, t)
        ab_t = float(sched.alpha_bar(t))
        ab_s = float(sched.alpha_bar(s))
        alpha_eff = ab_t / ab_s
        beta_eff = 1.0 - alpha_eff
        x0 = (x - math.sqrt(1.0 - ab_t) * e) / math.sqrt(ab_t)
        mean = (math.sqrt(ab_s) * beta_eff / (1.0 - ab_t)) * x0 + (
            math.sqrt(alpha_eff) * (1.0 - ab_s) / (1.0 - ab_t)
        ) * x
        if s > 0:
            var = beta_eff * (1.0 - ab_s) / (1.0 - ab_t)
            x = mean + math.sqrt(var) * torch.randn(shape, generator=generator)
        else:
            x = mean
    return x


def sample_pndm(
    eps_fn,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    steps: int = 50,
    generator: torch.Generator | None = None,
    x_start: torch.Tensor | None = None,
    stride: str = "uniform",
    t_start: int | None = None,
) -> torch.Tensor:
    """Pseudo linear-multistep sampling; deterministic given the start noise.

    The first stride uses a pseudo improved-Euler estimate (one extra
    noise evaluation); later strides reuse up to three stored predictions
    with Adams-Bashforth weights. Needs steps >= 4 so the multistep ramp
    completes before the final stride.
    """
    if steps < 4:
        raise ValueError(f"pseudo-numerical sampler needs steps >= 4, got {steps}")
    taus = strided_timesteps(_top_step(sched, t_start), steps, stride)
    x = torch.randn(shape, generator=generator) if x_start is None else x_start.clone()
    history: list[torch.Tensor] = []  # most recent first
    for i in reversed(range(len(taus))):
        t = taus[i]
        s = taus[i - 1] if i > 0 else 0
        e = eps_fn(x, t)
        if len(history) == 0:
            x_mid = transfer(x, e, t, s, sched)
            e_mid = eps_fn(x_mid, s)
            e_use = (e + e_mid) / 2
        elif len(history) == 1:
            e_use = (3 * e - history[0]) / 2
        elif len(history) == 2:
            e_use = (23 * e - 16 * history[0] + 5 * history[1]) / 12
        else:
            e_use = (55 * e - 59 * history[0] + 37 * history[1] - 9 * history[2]) / 24
        x = transfer(x, e_use, t, s, sched)
        history = [e] + history[:2]
    return x


def guided_eps(model, cond: torch.Tensor | None, scale: float,
               cond_theta: torch.Tensor | None = None):
    """eps_fn running the conditional and NULL branches through the model
    and combining them with classifier-free guidance.

    cond may be (L, d) shared across the batch, (B, L, d) per-element, or
    None for purely unconditional sampling (no guidance applied). scale 1
    skips the NULL branch entirely. cond_theta reweights the condition
    keys in the model's cross-attention; the NULL branch never sees it.
    """

    def eps_fn(x: torch.Tensor, t: int) -> torch.Tensor:
        B = x.shape[0]
        if cond is None:
            return model(x, None, t)
        c = cond[None].expand(B, -1, -1) if cond.dim() == 2 else cond
        e_c = model(x, c, t) if cond_theta is None else model(x, c, t, cond_theta)
        if scale == 1.0:
            return e_c
        e_u = model(x, None, t)
        return cfg_combine(e_u, e_c, scale)

    return eps_fn


def sample(
    eps_fn,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    sampler: str,
    steps: int,
    generator: torch.Generator | None = None,
    x_start: torch.Tensor | None = None,
    stride: str = "uniform",
    t_start: int | None = None,
) -> torch.Tensor:
    """Dispatch to the named sampler with shared arguments."""
    fn = {"ddpm": sample_ddpm, "pseudo_numerical": sample_pndm}.get(sampler)
    if fn is None:
        raise ValueError(f"unknown sampler {sampler!r}")
    return fn(eps_fn, shape, sched, steps=steps, generator=generator,
              x_start=x_start, stride=stride, t_start=t_start)
