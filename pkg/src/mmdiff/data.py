"""Synthetic captioned shapes: renderer, caption grammar, oracle classifier.

Scenes are a single colored shape on a plain background, drawn on a 32x32
grid with integer-jittered position and size. Attributes live in a small
closed world (4 colors x 3 shapes x 2 backgrounds) and the caption grammar
is a bijection onto token sequences, so ground truth is always recoverable.

The oracle classifier inverts the renderer by rule (border statistics for
the background, color distance for the foreground mask, template IoU for
the shape). It is the measuring stick for generated images, so it returns
"unknown" rather than guessing when confidence is low.

Pixel values are float32 in [-1, 1] throughout; PNG I/O maps linearly to
8-bit and back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

IMAGE_SIZE = 32

COLORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = {
    "black": (-1.0, -1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
}
UNKNOWN = "unknown"

# "make"/"it" never appear in captions; they exist so instruction-style
# prompts ("make it blue") tokenize
WORDS = ("a", "on", "background", *COLORS, *SHAPES, *BACKGROUNDS, "make", "it")
VOCAB = {w: i for i, w in enumerate(WORDS)}
CAPTION_LEN = 7

# jitter ranges keep every shape >= 4 px away from the border,
# so the border ring is always pure background
CENTER_RANGE = (13, 18)
RADIUS_RANGE = (6, 9)


@dataclass(frozen=True)
class SceneAttributes:
    color: str
    shape: str
    background: str


@dataclass
class CaptionedImage:
    image: torch.Tensor        # (3, 32, 32) in [-1, 1]
    caption: torch.Tensor      # (CAPTION_LEN,) long
    attributes: SceneAttributes


def caption_text(attrs: SceneAttributes) -> str:
    return f"a {attrs.color} {attrs.shape} on a {attrs.background} background"


def tokenize(text: str) -> torch.Tensor:
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise ValueError(f"word {word!r} not in vocabulary {sorted(VOCAB)}")
        ids.append(VOCAB[word])
    return torch.tensor(ids, dtype=torch.long)


def detokenize(ids: torch.Tensor) -> str:
    return " ".join(WORDS[int(i)] for i in ids)


def caption_tokens(attrs: SceneAttributes) -> torch.Tensor:
    return tokenize(caption_text(attrs))


def parse_caption(ids: torch.Tensor) -> SceneAttributes:
    """Invert caption_tokens; raises on anything outside the grammar."""
    words = detokenize(ids).split()
    if (
        len(words) != CAPTION_LEN
        or words[0] != "a" or words[3] != "on" or words[4] != "a" or words[6] != "background"
        or words[1] not in COLORS or words[2] not in SHAPES or words[5] not in BACKGROUNDS
    ):
        raise ValueError(f"not a valid caption: {' '.join(words)!r}")
    return SceneAttributes(color=words[1], shape=words[2], background=words[5])


# -- rendering ----------------------------------------------------------------


def shape_mask(shape: str, center: tuple[int, int], radius: int, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Boolean (size, size) mask; hard edges, no anti-aliasing."""
    cy, cx = center
    ys = torch.arange(size).view(-1, 1).expand(size, size)
    xs = torch.arange(size).view(1, -1).expand(size, size)
    dy, dx = ys - cy, xs - cx
    if shape == "circle":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return torch.maximum(dy.abs(), dx.abs()) <= radius
    if shape == "triangle":
        # apex at the top, base at the bottom; width grows linearly with depth
        return (dy >= -radius) & (dy <= radius) & (2 * dx.abs() <= dy + radius)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(
    attrs: SceneAttributes, center: tuple[int, int] = (16, 16), radius: int = 8
) -> torch.Tensor:
    bg = torch.tensor(BACKGROUNDS[attrs.background]).view(3, 1, 1)
    fg = torch.tensor(COLORS[attrs.color]).view(3, 1, 1)
    mask = shape_mask(attrs.shape, center, radius)
    return torch.where(mask, fg, bg)


def make_dataset(n: int, seed: int) -> list[CaptionedImage]:
    """Deterministic dataset: attributes uniform over the closed world,
    center/size jittered on the integer grid."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    color_names = tuple(COLORS)
    bg_names = tuple(BACKGROUNDS)
    items = []
    for _ in range(n):
        attrs = SceneAttributes(
            color=color_names[int(torch.randint(len(color_names), (1,), generator=gen))],
            shape=SHAPES[int(torch.randint(len(SHAPES), (1,), generator=gen))],
            background=bg_names[int(torch.randint(len(bg_names), (1,), generator=gen))],
        )
        cy = int(torch.randint(CENTER_RANGE[0], CENTER_RANGE[1] + 1, (1,), generator=gen))
        cx = int(torch.randint(CENTER_RANGE[0], CENTER_RANGE[1] + 1, (1,), generator=gen))
        r = int(torch.randint(RADIUS_RANGE[0], RADIUS_RANGE[1] + 1, (1,), generator=gen))
        items.append(CaptionedImage(render_scene(attrs, (cy, cx), r), caption_tokens(attrs), attrs))
    return items


def dataset_tensors(items: list[CaptionedImage]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a dataset into (images (n,3,H,W), captions (n,7)) for batching."""
    return (
        torch.stack([it.image for it in items]),
        torch.stack([it.caption for it in items]),
    )


# -- oracle classifier --------------------------------------------------------

# acceptance thresholds; a prototype match farther than this is "unknown"
_PROTO_TOL = 0.6
_MASK_DIST = 1.0     # foreground = farther than this from the background color
_MIN_AREA = 20
_IOU_FLOOR = 0.65


def _nearest(prototypes: dict[str, tuple], rgb: torch.Tensor) -> tuple[str, float]:
    best_name, best_d = UNKNOWN, float("inf")
    for name, proto in prototypes.items():
        d = (rgb - torch.tensor(proto)).norm().item()
        if d < best_d:
            best_name, best_d = name, d
    return best_name, best_d


def _template_bank() -> tuple[torch.Tensor, list[str]]:
    """All candidate masks at the canonical center, for vectorized IoU."""
    templates, labels = [], []
    for shape in SHAPES:
        for r in range(RADIUS_RANGE[0] - 2, RADIUS_RANGE[1] + 3):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    templates.append(shape_mask(shape, (16 + dy, 16 + dx), r))
                    labels.append(shape)
    return torch.stack(templates), labels


_TEMPLATES, _TEMPLATE_SHAPES = _template_bank()


def oracle_classify(image: torch.Tensor) -> SceneAttributes:
    """Rule-based attribute detection; any low-confidence stage yields "unknown".

    Stages: border ring -> background; distance-to-background -> foreground
    mask (cleaned of isolated pixels); masked mean -> color; best template
    IoU over (shape, center, radius) candidates -> shape.
    """
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(image.shape)}")
    unknown = SceneAttributes(UNKNOWN, UNKNOWN, UNKNOWN)

    border = torch.cat([
        image[:, 0, :].reshape(3, -1), image[:, -1, :].reshape(3, -1),
        image[:, :, 0].reshape(3, -1), image[:, :, -1].reshape(3, -1),
    ], dim=1).mean(dim=1)
    background, bg_dist = _nearest(BACKGROUNDS, border)
    if bg_dist > _PROTO_TOL:
        return unknown

    bg_rgb = torch.tensor(BACKGROUNDS[background]).view(3, 1, 1)
    mask = (image - bg_rgb).norm(dim=0) > _MASK_DIST

    # drop isolated pixels: keep only those with >= 2 foreground 4-neighbors
    neighbors = torch.nn.functional.conv2d(
        mask[None, None].float(),
        torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])[None, None],
        padding=1,
    )[0, 0]
    mask = mask & (neighbors >= 2)
    if mask.sum() < _MIN_AREA:
        return SceneAttributes(UNKNOWN, UNKNOWN, background)

    color, color_dist = _nearest(COLORS, image[:, mask].mean(dim=1))
    if color_dist > _PROTO_TOL:
        color = UNKNOWN

    # shift the mask to the canonical template center, then match all
    # (shape, radius, offset) candidates at once
    ys, xs = torch.nonzero(mask, as_tuple=True)
    cy0 = int((ys.min() + ys.max()) // 2)
    cx0 = int((xs.min() + xs.max()) // 2)
    centered = torch.roll(mask, shifts=(16 - cy0, 16 - cx0), dims=(0, 1))
    inter = (_TEMPLATES & centered).sum(dim=(1, 2)).float()
    union = (_TEMPLATES | centered).sum(dim=(1, 2)).float()
    iou = inter / union
    best = int(iou.argmax())
    best_shape = _TEMPLATE_SHAPES[best] if iou[best] >= _IOU_FLOOR else UNKNOWN

    return SceneAttributes(color=color, shape=best_shape, background=background)


# -- PNG I/O ------------------------------------------------------------------


def image_to_png(image: torch.Tensor, path) -> None:
    arr = ((image.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path, format="PNG")


def png_to_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = torch.from_numpy(np.asarray(im.convert("RGB")).copy())
    return arr.permute(2, 0, 1).to(torch.float32) / 127.5 - 1.0
