"""Multimodal decoder embedder: frozen causal core plus plug-in components.

A prompt is an ordered mix of text and image elements. Images enter through a
trainable patch encoder as a fixed-length prefix of ``k`` embeddings; text
enters through the token embedding. The causal decoder turns the flattened
sequence into one hidden state per token (the conditioning sequence consumed
by the denoiser). Every self-attention layer applies per-key score
reweighting: ``score + log(theta_key)``, so ``theta=0`` suppresses a token
entirely and ``theta=1`` is an exact no-op.

Plug-in components (additive bias set, bottleneck adapters) attach and detach
without mutating the core, so a stack can be restored to base behavior
bit-exactly. The core itself is meant to be frozen after a captioning warm-up;
freezing is enforced by excluding core parameters from optimizers and
asserting byte-identity across training (see training module).

A constructed stack is read-only during inference and may be shared across
parallel generations; training mutates parameters and must be serialized
externally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 16
    rotary_base: float = 10000.0
    image_tokens: int = 16      # k: embeddings per image
    image_size: int = 32
    adapter_rank: int = 32

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.vocab_size < 1:
            raise ValueError("decoder config: all extents must be positive")
        if self.d_model % (2 * self.n_heads) != 0:
            raise ValueError(
                f"decoder config: d_model={self.d_model} must be divisible by "
                f"2*n_heads={2 * self.n_heads} (rotary needs an even head dim)"
            )
        grid = math.isqrt(self.image_tokens)
        if grid * grid != self.image_tokens:
            raise ValueError(f"decoder config: image_tokens={self.image_tokens} must be a perfect square")
        if self.image_size % grid != 0:
            raise ValueError(
                f"decoder config: image_size={self.image_size} not divisible by prefix grid {grid}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TextElement:
    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ImageElement:
    image: torch.Tensor  # (3, H, W), values in [-1, 1]


PromptElement = TextElement | ImageElement


@dataclass
class MultimodalPrompt:
    """Ordered text/image elements with one attention factor per flattened token."""

    elements: list[PromptElement]
    theta: torch.Tensor  # (total_tokens,), all >= 0

    @staticmethod
    def build(
        elements: Sequence[PromptElement],
        element_theta: Sequence[float] | None = None,
        image_tokens: int = 16,
    ) -> "MultimodalPrompt":
        """Expand one uniform factor per element into the per-token vector.

        Text tokens default to 1.0 and each image contributes ``image_tokens``
        positions sharing that element's factor.
        """
        elements = list(elements)
        if element_theta is None:
            element_theta = [1.0] * len(elements)
        if len(element_theta) != len(elements):
            raise ValueError(f"{len(element_theta)} theta values for {len(elements)} elements")
        parts = []
        for el, th in zip(elements, element_theta):
            if th < 0:
                raise ValueError(f"attention factor must be >= 0, got {th}")
            n = len(el) if isinstance(el, TextElement) else image_tokens
            parts.append(torch.full((n,), float(th), dtype=torch.float32))
        return MultimodalPrompt(elements, torch.cat(parts) if parts else torch.zeros(0))

    def token_count(self, image_tokens: int) -> int:
        return sum(len(e) if isinstance(e, TextElement) else image_tokens for e in self.elements)


def apply_rotary(
    q: torch.Tensor, k: torch.Tensor, positions: torch.Tensor, base: float = 10000.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate query/key coordinate pairs by position-dependent angles.

    q, k: (..., L, head_dim) with even head_dim. Pair j is rotated by
    position * base**(-2j/head_dim). Rotation preserves pair norms, and the
    q-k inner product depends only on relative position.
    """
    d = q.shape[-1]
    if d % 2:
        raise ValueError(f"rotary: head dim must be even, got {d}")
    half = d // 2
    inv_freq = base ** (-2.0 * torch.arange(half, dtype=q.dtype) / d)
    ang = positions.to(q.dtype)[:, None] * inv_freq[None, :]  # (L, half)
    cos, sin = torch.cos(ang), torch.sin(ang)

    def rot(x: torch.Tensor) -> torch.Tensor:
        x1, x2 = x[..., :half], x[..., half:]
        return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)

    return rot(q), rot(k)


def reweight_scores(scores: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Add log(theta) along the key axis of pre-softmax attention scores.

    theta must be nonnegative with one entry per key; zero entries map to
    -inf and are completely suppressed after the softmax. theta == 1
    leaves the scores bit-identical.
    """
    if theta.dim() != 1 or theta.shape[0] != scores.shape[-1]:
        raise ValueError(
            f"reweight: {tuple(theta.shape)} factors for key axis of {tuple(scores.shape)}"
        )
    if (theta < 0).any():
        raise ValueError("reweight: attention factors must be >= 0")
    if (theta == 1).all():
        return scores  # log(1) == 0; keep the no-op bit-exact
    return scores + torch.log(theta.to(scores.dtype))


def softmax_suppressed(scores: torch.Tensor) -> torch.Tensor:
    """Row softmax where rows with every key suppressed yield zero weights."""
    row_max = scores.amax(dim=-1, keepdim=True)
    dead = ~torch.isfinite(row_max)
    safe = torch.where(dead, torch.zeros_like(scores), scores)
    w = torch.softmax(safe, dim=-1)
    return torch.where(dead, torch.zeros_like(w), w)


class BiasSet(nn.Module):
    """Additive bias deltas for every linear in the core (BitFit-style plug-in).

    Zero-initialized, so attaching a fresh set leaves outputs bit-identical.
    Touches bias terms only; core weights are never referenced.
    """

    def __init__(self, config: DecoderConfig):
        super().__init__()
        d = config.d_model
        self.qkv = nn.ParameterList(nn.Parameter(torch.zeros(3 * d)) for _ in range(config.n_layers))
        self.attn_out = nn.ParameterList(nn.Parameter(torch.zeros(d)) for _ in range(config.n_layers))
        self.fc1 = nn.ParameterList(nn.Parameter(torch.zeros(4 * d)) for _ in range(config.n_layers))
        self.fc2 = nn.ParameterList(nn.Parameter(torch.zeros(d)) for _ in range(config.n_layers))

    @property
    def config_dims(self) -> tuple[int, int]:
        return (len(self.qkv), self.qkv[0].shape[0] // 3)


class Adapter(nn.Module):
    """Bottleneck adapter; the up-projection starts at zero (identity at attach)."""

    def __init__(self, d_model: int, rank: int):
        super().__init__()
        self.down = nn.Linear(d_model, rank)
        self.up = nn.Linear(rank, d_model)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(torch.nn.functional.silu(self.down(x)))


class AdapterSet(nn.Module):
    """One adapter after attention and one after the MLP, per layer."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.post_attn = nn.ModuleList(
            Adapter(config.d_model, config.adapter_rank) for _ in range(config.n_layers)
        )
        self.post_mlp = nn.ModuleList(
            Adapter(config.d_model, config.adapter_rank) for _ in range(config.n_layers)
        )

    @property
    def config_dims(self) -> tuple[int, int]:
        return (len(self.post_attn), self.post_attn[0].down.weight.shape[1])


class DecoderBlock(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.rotary_base = config.rotary_base
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(
        self,
        x: torch.Tensor,                 # (B, L, d)
        positions: torch.Tensor,         # (L,)
        log_theta: torch.Tensor | None,  # (L,) additive key-axis term, or None
        causal_mask: torch.Tensor,       # (L, L) bool, True above diagonal
        bias: dict | None = None,
        adapters: dict | None = None,
        want_attention: bool = False,
    ):
        B, L, d = x.shape
        h = self.ln1(x)
        qkv = self.qkv(h)
        if bias is not None:
            qkv = qkv + bias["qkv"]
        q, k, v = qkv.chunk(3, dim=-1)

        def split(t):
            return t.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        q, k = apply_rotary(q, k, positions, base=self.rotary_base)
        scores = (q / math.sqrt(self.head_dim)) @ k.transpose(-2, -1)
        if log_theta is not None:
            scores = scores + log_theta
        scores = scores.masked_fill(causal_mask, float("-inf"))
        attn = softmax_suppressed(scores)
        y = (attn @ v).transpose(1, 2).reshape(B, L, d)
        y = self.attn_out(y)
        if bias is not None:
            y = y + bias["attn_out"]
        if adapters is not None:
            y = y + adapters["post_attn"](y)
        x = x + y

        h = self.fc1(self.ln2(x))
        if bias is not None:
            h = h + bias["fc1"]
        h = self.fc2(torch.nn.functional.gelu(h))
        if bias is not None:
            h = h + bias["fc2"]
        if adapters is not None:
            h = h + adapters["post_mlp"](h)
        x = x + h
        return (x, attn) if want_attention else (x, None)


class DecoderCore(nn.Module):
    """Causal decoder with rotary positions and a captioning head for warm-up."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.apply(self._init)

    @staticmethod
    def _init(m: nn.Module) -> None:
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)


class ImagePrefixEncoder(nn.Module):
    """Strided patch encoder mapping one image to ``k`` embeddings of d_model."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        grid = math.isqrt(config.image_tokens)
        self.patch = config.image_size // grid
        self.image_size = config.image_size
        self.k = config.image_tokens
        self.conv = nn.Conv2d(3, config.d_model, kernel_size=self.patch, stride=self.patch)
        self.proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, k, d_model)."""
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"image prefix: expected (B, 3, {self.image_size}, {self.image_size}), got {tuple(images.shape)}"
            )
        h = self.conv(images)                      # (B, d, g, g)
        h = h.flatten(2).transpose(1, 2)           # (B, k, d)
        return self.proj(h)


class EmbedderStack(nn.Module):
    """Frozen-core decoder + image prefix + optional plug-in components.

    ``with_components`` / ``without_components`` return new stacks that share
    the core and prefix modules, so attach/detach never mutates the base.
    """

    def __init__(
        self,
        config: DecoderConfig,
        core: DecoderCore | None = None,
        image_prefix: ImagePrefixEncoder | None = None,
        bias_set: BiasSet | None = None,
        adapter_set: AdapterSet | None = None,
    ):
        super().__init__()
        self.config = config
        self.core = core if core is not None else DecoderCore(config)
        self.image_prefix = image_prefix if image_prefix is not None else ImagePrefixEncoder(config)
        self.bias_set = bias_set
        self.adapter_set = adapter_set

    # -- component plumbing -------------------------------------------------

    def with_components(
        self, bias_set: BiasSet | None = None, adapter_set: AdapterSet | None = None
    ) -> "EmbedderStack":
        for comp in (bias_set, adapter_set):
            if comp is not None and comp.config_dims != (self.config.n_layers, self.config.d_model):
                raise ValueError(
                    f"component dims {comp.config_dims} do not match core "
                    f"({self.config.n_layers}, {self.config.d_model})"
                )
        return EmbedderStack(self.config, self.core, self.image_prefix, bias_set, adapter_set)

    def without_components(self) -> "EmbedderStack":
        return EmbedderStack(self.config, self.core, self.image_prefix, None, None)

    def set_trainable(
        self, core: bool = False, prefix: bool = False, biases: bool = False, adapters: bool = False
    ) -> None:
        self.core.requires_grad_(core)
        self.image_prefix.requires_grad_(prefix)
        if self.bias_set is not None:
            self.bias_set.requires_grad_(biases)
        if self.adapter_set is not None:
            self.adapter_set.requires_grad_(adapters)

    # -- forward paths -------------------------------------------------------

    def _layer_extras(self, i: int) -> tuple[dict | None, dict | None]:
        bias = None
        if self.bias_set is not None:
            bias = {
                "qkv": self.bias_set.qkv[i],
                "attn_out": self.bias_set.attn_out[i],
                "fc1": self.bias_set.fc1[i],
                "fc2": self.bias_set.fc2[i],
            }
        adapters = None
        if self.adapter_set is not None:
            adapters = {
                "post_attn": self.adapter_set.post_attn[i],
                "post_mlp": self.adapter_set.post_mlp[i],
            }
        return bias, adapters

    def forward_embeddings(
        self,
        x: torch.Tensor,                       # (B, L, d) already-embedded tokens
        theta: torch.Tensor | None = None,     # (L,) or None for all-ones
        want_attention: bool = False,
    ):
        B, L, _ = x.shape
        positions = torch.arange(L)
        log_theta = None
        if theta is not None and not (theta == 1).all():
            if theta.shape != (L,):
                raise ValueError(f"theta has {tuple(theta.shape)} entries for {L} tokens")
            if (theta < 0).any():
                raise ValueError("theta entries must be >= 0")
            log_theta = torch.log(theta.to(x.dtype))
        causal = torch.ones(L, L, dtype=torch.bool).triu(1)
        maps = []
        for i, block in enumerate(self.core.blocks):
            bias, adapters = self._layer_extras(i)
            x, attn = block(x, positions, log_theta, causal, bias, adapters, want_attention)
            if want_attention:
                maps.append(attn)
        x = self.core.ln_f(x)
        return (x, maps) if want_attention else x

    def embed_elements(self, elements: Sequence[PromptElement]) -> torch.Tensor:
        """Embed prompt elements into one (1, L, d) sequence, order preserved."""
        parts = []
        for el in elements:
            if isinstance(el, TextElement):
                ids = torch.tensor(el.tokens, dtype=torch.long)
                if ids.numel() and ids.max() >= self.config.vocab_size:
                    raise ValueError(f"token id {int(ids.max())} >= vocab size {self.config.vocab_size}")
                parts.append(self.core.tok_emb(ids))
            elif isinstance(el, ImageElement):
                parts.append(self.image_prefix(el.image[None])[0])
            else:
                raise TypeError(f"unsupported prompt element {type(el).__name__}")
        return torch.cat(parts, dim=0)[None]

    def embed(self, prompt: MultimodalPrompt, want_attention: bool = False):
        """Hidden-state sequence H for a prompt: (L, d_model), one state per token.

        Causal masking means prefix states never depend on later elements.
        The prompt's theta reweights keys in every attention layer.
        """
        if not prompt.elements:
            raise ValueError("empty prompt")
        n = prompt.token_count(self.config.image_tokens)
        if prompt.theta.shape != (n,):
            raise ValueError(f"theta has {tuple(prompt.theta.shape)} entries for {n} tokens")
        x = self.embed_elements(prompt.elements)
        out = self.forward_embeddings(x, prompt.theta, want_attention=want_attention)
        if want_attention:
            h, maps = out
            return h[0], maps
        return out[0]

    def embed_token_batch(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, n) token ids -> (B, n, d) hidden states; training fast path."""
        return self.forward_embeddings(self.core.tok_emb(ids))

    def embed_image_batch(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, k, d) hidden states; training fast path."""
        return self.forward_embeddings(self.image_prefix(images))

    def caption_logits(self, images: torch.Tensor | None, ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits over an (optional image prefix +) caption sequence.

        Returns (B, prefix_len + n, vocab); used only by the warm-up phase.
        """
        emb = self.core.tok_emb(ids)
        if images is not None:
            prefix = self.image_prefix(images)
            emb = torch.cat([prefix, emb], dim=1)
        h = self.forward_embeddings(emb)
        return self.core.lm_head(h)


def embed_prompt(prompt: MultimodalPrompt, stack: EmbedderStack, want_attention: bool = False):
    """Functional form of EmbedderStack.embed."""
    return stack.embed(prompt, want_attention=want_attention)


def encode_image_prefix(image: torch.Tensor, stack: EmbedderStack) -> torch.Tensor:
    """One image (3, H, W) -> its k prefix embeddings (k, d_model)."""
    return stack.image_prefix(image[None])[0]


def attach_components(
    stack: EmbedderStack, bias_set: BiasSet | None = None, adapter_set: AdapterSet | None = None
) -> EmbedderStack:
    """Functional form of EmbedderStack.with_components."""
    return stack.with_components(bias_set=bias_set, adapter_set=adapter_set)
