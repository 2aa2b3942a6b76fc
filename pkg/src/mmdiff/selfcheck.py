"""One-command invariant battery: fast checks of the load-bearing math.

Each check is independent and returns (name, passed, detail); run_all
prints one line per check and reports the failure count. These cover the
properties that do not need a trained model: schedule shape, attention
reweighting semantics, the loss oracle stubs, the conditioning mixture
rate, both samplers against the analytic Gaussian case, the optimizer on
a quadratic bowl, and checkpoint/causality plumbing.
"""

from __future__ import annotations

import math

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import (
    GuidanceParams,
    build_schedule,
    cfg_combine,
    corrupt,
    select_condition,
    training_loss,
)
from .embedder import (
    DecoderConfig,
    EmbedderStack,
    ImageElement,
    MultimodalPrompt,
    TextElement,
)
from .samplers import sample_ddpm, sample_pndm, transfer


def check_schedule() -> tuple[bool, str]:
    sched = build_schedule()
    ok = (
        bool((sched.betas[1:] > sched.betas[:-1]).all())
        and bool((sched.alpha_bars[1:] < sched.alpha_bars[:-1]).all())
        and sched.near_gaussian_terminal
    )
    return ok, f"abar_T={float(sched.alpha_bars[-1]):.2e}"


def check_attention_reweighting(seed: int = 0) -> tuple[bool, str]:
    torch.manual_seed(seed)
    stack = EmbedderStack(DecoderConfig())
    img = torch.rand(3, 32, 32) * 2 - 1
    elements = [TextElement((1, 2, 3)), ImageElement(img)]
    n = 3 + stack.config.image_tokens

    base = stack.embed(MultimodalPrompt(elements, torch.ones(n)))
    explicit = stack.embed(MultimodalPrompt.build(elements, [1.0, 1.0], stack.config.image_tokens))
    identity = torch.equal(base, explicit)

    _, maps = stack.embed(
        MultimodalPrompt.build(elements, [1.0, 0.0], stack.config.image_tokens),
        want_attention=True,
    )
    mass_zero = float(sum(m[..., 3:].sum() for m in maps))

    masses = []
    for th in (0.25, 0.5, 1.0):
        _, maps = stack.embed(
            MultimodalPrompt.build(elements, [1.0, th], stack.config.image_tokens),
            want_attention=True,
        )
        masses.append(float(sum(m[..., 3:].sum() for m in maps)))
    monotone = masses[0] < masses[1] < masses[2]

    ok = identity and mass_zero < 1e-12 and monotone
    return ok, f"identity={identity} zero_mass={mass_zero:.1e} monotone={monotone}"


def check_loss_oracles(seed: int = 0) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    sched = build_schedule(T=10)
    x = torch.randn(16, 3, 8, 8, generator=g)
    noise = torch.randn(x.shape, generator=g)
    t = torch.randint(1, 11, (16,), generator=g)

    exact = float(training_loss(lambda xt, c, tt: noise, x, None, sched, g,
                                noise=noise, timesteps=t))
    delta = 0.3
    off = float(training_loss(lambda xt, c, tt: noise[: xt.shape[0]] + delta, x, None, sched, g,
                              noise=noise, timesteps=t))
    g2 = torch.Generator().manual_seed(seed + 1)
    big = torch.randn(4096, 8, generator=g2)
    mc = float(training_loss(lambda xt, c, tt: torch.zeros_like(xt), big, None, sched, g2))
    sigma = math.sqrt(2.0 / (4096 * 8))  # var of eps^2 is 2 per coordinate
    ok = exact == 0.0 and abs(off - delta ** 2) < 1e-6 and abs(mc - 1.0) < 3 * sigma
    return ok, f"exact={exact} offset={off:.6f} mc={mc:.4f} (3sigma={3 * sigma:.4f})"


def check_condition_mixture(seed: int = 0, n: int = 10_000) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    img, txt = object(), object()
    hits = sum(select_condition((img, txt), 0.2, g) is img for _ in range(n))
    rate = hits / n
    ok = abs(rate - 0.2) <= 0.012
    return ok, f"rate={rate:.4f}"


def _gaussian_eps(sched, mu, Sigma):
    def eps(x, t):
        ab = float(sched.alpha_bar(t))
        M = ab * Sigma + (1 - ab) * torch.eye(2)
        return math.sqrt(1 - ab) * (x - math.sqrt(ab) * mu) @ torch.linalg.inv(M).T
    return eps


def check_gaussian_ddpm(seed: int = 42, n: int = 10_000) -> tuple[bool, str]:
    sched = build_schedule()
    mu = torch.tensor([1.0, -2.0])
    Sigma = torch.tensor([[1.5, 0.6], [0.6, 0.8]])
    g = torch.Generator().manual_seed(seed)
    xs = sample_ddpm(_gaussian_eps(sched, mu, Sigma), (n, 2), sched, steps=1000, generator=g)
    mean_err = float((xs.mean(0) - mu).norm() / mu.norm())
    cov_err = float((torch.cov(xs.T) - Sigma).norm() / Sigma.norm())
    ok = mean_err < 0.05 and cov_err < 0.05
    return ok, f"mean_err={mean_err:.4f} cov_err={cov_err:.4f}"


def check_gaussian_pndm(seed: int = 7, n: int = 256) -> tuple[bool, str]:
    sched = build_schedule()
    mu = torch.tensor([1.0, -2.0])
    Sigma = torch.tensor([[1.5, 0.6], [0.6, 0.8]])
    eps = _gaussian_eps(sched, mu, Sigma)
    g = torch.Generator().manual_seed(seed)
    zT = torch.randn(n, 2, generator=g)
    fast = sample_pndm(eps, (n, 2), sched, steps=50, x_start=zT)
    ref = zT.clone()
    for t in range(sched.T, 0, -1):
        ref = transfer(ref, eps(ref, t), t, t - 1, sched)
    rel = float((fast - ref).norm() / ref.norm())
    return rel < 0.02, f"rel_err={rel:.5f}"


def check_cfg_and_corrupt(seed: int = 0) -> tuple[bool, str]:
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(4, 3, generator=g)
    b = torch.randn(4, 3, generator=g)
    affine = torch.allclose(
        cfg_combine(a, b, 5.0), cfg_combine(a, b, 1.0) + 4.0 * (b - a), atol=1e-6
    )
    endpoints = torch.equal(cfg_combine(a, b, 0.0), a) and torch.equal(cfg_combine(a, b, 1.0), b)

    sched = build_schedule(T=100)
    x = torch.randn(2, 5, generator=g)
    e = torch.randn(2, 5, generator=g)
    linear = torch.allclose(
        corrupt(2 * x, e, 50, sched) + corrupt(x, 2 * e, 50, sched),
        corrupt(3 * x, 3 * e, 50, sched), atol=1e-6,
    )
    ok = affine and endpoints and linear
    return ok, f"affine={affine} endpoints={endpoints} corrupt_linear={linear}"


def check_causal_prefix(seed: int = 0, n_prompts: int = 10) -> tuple[bool, str]:
    torch.manual_seed(seed)
    stack = EmbedderStack(DecoderConfig())
    g = torch.Generator().manual_seed(seed)
    k = stack.config.image_tokens
    def rand_img():
        return torch.rand(3, 32, 32, generator=g) * 2 - 1

    def rand_text():
        return TextElement(tuple(int(i) for i in torch.randint(0, 12, (5,), generator=g)))

    for i in range(n_prompts):
        img_a = torch.rand(3, 32, 32, generator=g) * 2 - 1
        # same-length edits: resizing the suffix changes kernel shapes, which
        # is only float-identical, not bit-identical
        e2, e2_edit = (
            (ImageElement(rand_img()), ImageElement(rand_img())) if i % 2
            else (rand_text(), rand_text())
        )
        h1 = stack.embed(MultimodalPrompt.build([ImageElement(img_a), e2], image_tokens=k))
        h2 = stack.embed(MultimodalPrompt.build([ImageElement(img_a), e2_edit], image_tokens=k))
        if not torch.equal(h1[:k], h2[:k]):
            return False, "prefix states changed when the suffix element changed"
    return True, f"{n_prompts} prompts, prefix bit-identical"


def check_optimizer(seed: int = 0) -> tuple[bool, str]:
    """Adam on an anisotropic quadratic bowl reaches the minimum within 1e-6."""
    with torch.enable_grad():
        gen = torch.Generator().manual_seed(seed)
        target = torch.randn(8, generator=gen, dtype=torch.float64)
        scales = torch.linspace(0.5, 3.0, 8, dtype=torch.float64)
        x = torch.zeros(8, dtype=torch.float64, requires_grad=True)
        # constant phase to close the distance, then decay to kill oscillation
        opt = torch.optim.Adam([x], lr=1.0, betas=(0.9, 0.999), eps=1e-8)
        steps = 0
        for steps in range(1, 501):
            opt.zero_grad()
            loss = (scales * (x - target) ** 2).sum()
            loss.backward()
            opt.step()
            if steps > 100:
                for group in opt.param_groups:
                    group["lr"] *= 0.98
            if float((x.detach() - target).abs().max()) < 1e-6:
                break
    dist = float((x.detach() - target).abs().max())
    return dist < 1e-6, f"steps={steps} max_err={dist:.1e}"


def check_checkpoint_roundtrip(tmp_dir="/tmp") -> tuple[bool, str]:
    import os
    torch.manual_seed(0)
    tensors = {"w": torch.randn(4, 5), "b": torch.randn(5)}
    path = os.path.join(tmp_dir, "selfcheck.ckpt")
    save_checkpoint({"probe": 1}, tensors, path)
    cfg, loaded = load_checkpoint(path)
    save_checkpoint(cfg, loaded, path + "2")
    same = open(path, "rb").read() == open(path + "2", "rb").read()
    bit = all(torch.equal(tensors[k], loaded[k]) for k in tensors)
    for p in (path, path + "2"):
        os.remove(p)
    return same and bit, f"bytes_identical={same} tensors_identical={bit}"


CHECKS = [
    ("schedule", check_schedule),
    ("attention_reweighting", check_attention_reweighting),
    ("loss_oracles", check_loss_oracles),
    ("condition_mixture", check_condition_mixture),
    ("gaussian_ddpm", check_gaussian_ddpm),
    ("gaussian_pndm", check_gaussian_pndm),
    ("cfg_and_corrupt", check_cfg_and_corrupt),
    ("causal_prefix", check_causal_prefix),
    ("optimizer", check_optimizer),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
]


def run_all(echo=print) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    with torch.no_grad():
        for name, fn in CHECKS:
            passed, detail = fn()
            failures += not passed
            echo(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return failures
