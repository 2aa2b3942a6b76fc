"""Two-phase training: captioning warm-up, then conditional denoising.

The warm-up phase stands in for large-scale pretraining: it teaches the
randomly initialized decoder core and image prefix to caption the
synthetic scenes (next-token loss over [image tokens; caption]), which
aligns text and image hidden states in one space. After warm-up the core
and prefix are frozen for good.

The denoising phase then trains the U-Net (and, in variant V1, the
embedder's bias deltas) on the noise-prediction objective. Each element's
condition is the embedded caption or the embedded image, picked
image-with-probability-0.2, and is replaced by the learned NULL with the
variant's embedding-dropout rate.

Variant semantics:
  V1: bias deltas attached and *trainable* during denoising; no adapters.
  V2: bias deltas and adapters attached, trained only in the warm-up,
      then frozen alongside the core.

Toy-scale hyperparameters differ from the full-scale reference recorded
in FULL_SCALE_REFERENCE: the U-Net here trains from scratch rather than
finetuning a pretrained backbone, so its learning rate is far higher, and
batch/iteration counts are sized for a single CPU.

Determinism: the loop pins torch to one thread and draws every random
quantity from one seeded generator, so a (seed, config) pair reproduces
the final checkpoint byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from pathlib import Path

import torch

from .data import CaptionedImage, dataset_tensors
from .diffusion import select_condition, training_loss
from .model import DiffusionModel, save_model

P_IMAGE = 0.2  # probability of conditioning on the image instead of the caption

# reference hyperparameters of the full-scale configuration this toy is
# scaled down from (13B-parameter embedder, batch 2048); kept for context
FULL_SCALE_REFERENCE = {
    "V1": {"lr_cross_attn": 5e-4, "lr_unet": 5e-5, "batch_size": 2048,
           "iterations": 54_000, "embedding_dropout": 0.05},
    "V2": {"lr_cross_attn": 1e-4, "lr_unet": 5e-5, "batch_size": 2048,
           "iterations": 60_000, "embedding_dropout": 0.10},
}


@dataclasses.dataclass(frozen=True)
class TrainingVariant:
    name: str
    bias_mode: str           # trainable | frozen | absent
    adapter_mode: str        # frozen | absent
    embedding_dropout: float
    lr_cross_attn: float
    lr_unet: float
    batch_size: int
    iterations: int
    warmup_iterations: int
    warmup_lr: float

    def __post_init__(self):
        if self.bias_mode not in ("trainable", "frozen", "absent"):
            raise ValueError(f"bias_mode must be trainable/frozen/absent, got {self.bias_mode!r}")
        if self.adapter_mode not in ("frozen", "absent"):
            raise ValueError(f"adapter_mode must be frozen/absent, got {self.adapter_mode!r}")
        if not (0.0 <= self.embedding_dropout < 1.0):
            raise ValueError(f"embedding dropout must lie in [0, 1), got {self.embedding_dropout}")


V1 = TrainingVariant(
    name="V1", bias_mode="trainable", adapter_mode="absent", embedding_dropout=0.05,
    lr_cross_attn=1.5e-3, lr_unet=4e-4, batch_size=32, iterations=6000,
    warmup_iterations=1200, warmup_lr=1e-3,
)
V2 = TrainingVariant(
    name="V2", bias_mode="frozen", adapter_mode="frozen", embedding_dropout=0.10,
    lr_cross_attn=1.5e-3, lr_unet=4e-4, batch_size=32, iterations=1500,
    warmup_iterations=1200, warmup_lr=1e-3,
)
VARIANTS = {"V1": V1, "V2": V2}


class TrainingDivergedError(RuntimeError):
    pass


def build_model(variant: TrainingVariant, **model_kwargs) -> DiffusionModel:
    return DiffusionModel(
        with_bias_set=variant.bias_mode != "absent",
        with_adapter_set=variant.adapter_mode != "absent",
        **model_kwargs,
    )


# content words (color, shape, background) sit at these caption positions;
# see data.caption_text
_CONTENT_POSITIONS = (1, 2, 5)


# separation hinge: captions that differ in a single word must stay at least
# this far apart (L2, per state) from the differing position onward. Next-token
# captioning alone leaves inter-caption geometry to drift: once the CE is
# near zero the optimizer wanders in its null space and the distances the
# denoiser later depends on fluctuate by 5-10x between checkpoints
_SEPARATION_MARGIN = 4.0


def _minimal_pairs(distinct: torch.Tensor) -> torch.Tensor:
    """Index pairs of caption rows differing in exactly one position, with
    that position; a (n_pairs, 3) tensor of (i, j, position)."""
    rows = [tuple(r.tolist()) for r in distinct]
    out = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            diff = [p for p, (a, b) in enumerate(zip(rows[i], rows[j])) if a != b]
            if len(diff) == 1:
                out.append((i, j, diff[0]))
    return torch.tensor(out, dtype=torch.long).reshape(-1, 3)


def caption_warmup(
    model: DiffusionModel,
    images: torch.Tensor,
    captions: torch.Tensor,
    variant: TrainingVariant,
    generator: torch.Generator,
) -> None:
    """Captioning over [image prefix; caption] sequences, plus two geometry
    terms shaping the states the denoiser will cross-attend to.

    Grounding: the trailing image-token states must themselves predict the
    scene words through the LM head. Pure next-token captioning computes
    attributes lazily at text positions (attending back to raw patches),
    which leaves the image prefix states nearly shape-blind.

    Separation: states of captions forming minimal pairs (one word changed)
    are pushed apart from the changed position onward. Captioning CE does
    not constrain those distances, and whenever they land small the trained
    denoiser confuses the corresponding prompts.

    Trains the decoder core and image prefix; V2 additionally trains its
    bias deltas and adapters here (their only training), while V1's biases
    stay at zero for the denoising phase to move.
    """
    emb = model.embedder
    emb.set_trainable(
        core=True, prefix=True,
        biases=variant.bias_mode == "frozen" and emb.bias_set is not None,
        adapters=variant.adapter_mode == "frozen" and emb.adapter_set is not None,
    )
    params = [p for p in emb.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=variant.warmup_lr)
    k = emb.config.image_tokens
    n_cap = captions.shape[1]
    vocab = emb.config.vocab_size
    grounded = k >= 4 and n_cap > max(_CONTENT_POSITIONS)
    distinct = captions.unique(dim=0)
    pairs = _minimal_pairs(distinct)
    for step in range(variant.warmup_iterations):
        idx = torch.randint(images.shape[0], (variant.batch_size,), generator=generator)
        logits = emb.caption_logits(images[idx], captions[idx])
        pred = logits[:, k - 1: k - 1 + n_cap]
        loss = torch.nn.functional.cross_entropy(
            pred.reshape(-1, vocab), captions[idx].reshape(-1)
        )
        if grounded:
            # image positions k-4..k-2 ground (color, shape, background);
            # k-1 keeps its next-token target
            ground = logits[:, k - 4: k - 1]
            targets = captions[idx][:, list(_CONTENT_POSITIONS)]
            loss = loss + torch.nn.functional.cross_entropy(
                ground.reshape(-1, vocab), targets.reshape(-1)
            )
        if len(pairs):
            states = emb.embed_token_batch(distinct)
            gaps = []
            for i, j, pos in pairs.tolist():
                d = (states[i, pos:] - states[j, pos:]).norm(dim=-1)
                gaps.append(torch.relu(_SEPARATION_MARGIN - d).mean())
            loss = loss + torch.stack(gaps).mean()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"warm-up loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    # leave no stale grads behind; these params freeze after warm-up and a
    # frozen parameter carrying a gradient must stay detectable as a bug
    opt.zero_grad(set_to_none=True)


def _optimizer_groups(model: DiffusionModel, variant: TrainingVariant) -> list[dict]:
    """U-Net cross-attention weights (and the NULL token) get lr_cross_attn,
    remaining U-Net weights get lr_unet; trainable bias deltas are grouped
    with the cross-attention rate."""
    cross, rest = [], []
    for name, p in model.unet.named_parameters():
        (cross if "cross" in name or name == "null_condition" else rest).append(p)
    groups = [
        {"params": cross, "lr": variant.lr_cross_attn},
        {"params": rest, "lr": variant.lr_unet},
    ]
    if variant.bias_mode == "trainable":
        groups.append({"params": list(model.embedder.bias_set.parameters()),
                       "lr": variant.lr_cross_attn})
    return groups


def train(
    variant: TrainingVariant,
    dataset: list[CaptionedImage],
    seed: int,
    checkpoint_path=None,
    log_path=None,
    progress: bool = False,
    **model_kwargs,
) -> tuple[DiffusionModel, dict]:
    """Full two-phase run; returns the model and its training metadata.

    Deterministic per (variant, dataset, seed): the model init, warm-up,
    condition routing, dropout, and noise draws all come from one seeded
    stream on a single thread.
    """
    if not dataset:
        raise ValueError("empty dataset")
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)

    model = build_model(variant, **model_kwargs)
    images, captions = dataset_tensors(dataset)
    sched = model.schedule

    caption_warmup(model, images, captions, variant, generator)
    model.embedder.set_trainable(
        core=False, prefix=False,
        biases=variant.bias_mode == "trainable",
        adapters=False,
    )

    opt = torch.optim.Adam(_optimizer_groups(model, variant))
    base_lrs = [g["lr"] for g in opt.param_groups]
    image_conditions = 0
    log_rows = []
    start = time.time()
    for step in range(1, variant.iterations + 1):
        # cosine decay to a 5% floor; constant lr leaves the model bouncing
        # around the optimum and the samples visibly soft
        decay = 0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / variant.iterations))
        for g, base in zip(opt.param_groups, base_lrs):
            g["lr"] = base * decay
        idx = torch.randint(images.shape[0], (variant.batch_size,), generator=generator)
        text_emb = model.embedder.embed_token_batch(captions[idx])
        img_emb = model.embedder.embed_image_batch(images[idx])

        text_rows, img_rows = [], []
        for i in range(idx.shape[0]):
            pair = (img_emb[i], text_emb[i])
            chosen = select_condition(pair, P_IMAGE, generator)
            (img_rows if chosen is pair[0] else text_rows).append(i)
        image_conditions += len(img_rows)

        # condition-length augmentation: the embedder is causal, so a caption
        # prefix's states are an exact slice of the full sequence. Training on
        # sliced conditions teaches the denoiser to accept prompts shorter
        # than a full caption ("a red circle") and partial image evidence;
        # without it any key count other than the native one is out of
        # distribution and the sampler emits mush
        t_len = text_emb.shape[1]
        if torch.rand((), generator=generator) < 0.5:
            t_len = int(torch.randint(2, text_emb.shape[1], (1,), generator=generator))
        i_len = img_emb.shape[1]
        if torch.rand((), generator=generator) < 0.25:
            i_len = img_emb.shape[1] * 3 // 4

        loss = images.new_zeros(())
        for rows, emb, length in ((text_rows, text_emb, t_len), (img_rows, img_emb, i_len)):
            if not rows:
                continue
            sel = torch.tensor(rows)
            part = training_loss(
                model.denoise, images[idx[sel]], emb[sel, :length], sched, generator,
                dropout=variant.embedding_dropout,
                null_condition=model.unet.null_condition,
            )
            loss = loss + part * (len(rows) / idx.shape[0])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss.item()} at step {step}")

        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
        log_rows.append((step, loss_val, variant.lr_cross_attn * decay, image_conditions))
        if progress and (step % 100 == 0 or step == 1):
            rate = (time.time() - start) / step
            print(f"step {step}/{variant.iterations} loss {loss_val:.4f} "
                  f"({rate:.2f}s/step)", flush=True)

    metadata = {
        "variant": variant.name,
        "seed": seed,
        "step": variant.iterations,
        "image_conditions": image_conditions,
        "dataset_size": len(dataset),
    }
    if log_path is not None:
        write_training_log(log_rows, log_path)
    if checkpoint_path is not None:
        save_model(model, checkpoint_path, metadata)
    return model, metadata


def write_training_log(rows: list[tuple], path) -> None:
    """CSV of (step, loss, lr, cumulative image-condition count)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr", "image_conditions"])
        w.writerows(rows)
    tmp.replace(path)
