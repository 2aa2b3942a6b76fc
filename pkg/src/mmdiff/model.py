"""Bundled conditional diffusion model: embedder stack + noise-predicting U-Net.

One object owns everything a sampler or task needs: the multimodal
embedder that turns prompts into hidden-state sequences, the U-Net that
predicts noise given (x_t, condition, t), and the noise schedule
parameters. Checkpointing snapshots the full configuration alongside the
weights so a file can be loaded without any out-of-band knowledge.
"""

from __future__ import annotations

import dataclasses
import hashlib

import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, build_schedule
from .embedder import AdapterSet, BiasSet, DecoderConfig, EmbedderStack
from .unet import UNet, UNetConfig


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    kind: str = "scaled_linear"
    beta_start: float = 8.5e-4
    beta_end: float = 0.012

    def build(self) -> NoiseSchedule:
        return build_schedule(self.T, self.kind, self.beta_start, self.beta_end)


class DiffusionModel(nn.Module):
    def __init__(
        self,
        decoder_config: DecoderConfig | None = None,
        unet_config: UNetConfig | None = None,
        schedule_config: ScheduleConfig | None = None,
        with_bias_set: bool = False,
        with_adapter_set: bool = False,
    ):
        super().__init__()
        self.decoder_config = decoder_config if decoder_config is not None else DecoderConfig()
        self.unet_config = unet_config if unet_config is not None else UNetConfig(
            cross_attention_dim=self.decoder_config.d_model
        )
        if self.unet_config.cross_attention_dim != self.decoder_config.d_model:
            raise ValueError(
                f"cross-attention dim {self.unet_config.cross_attention_dim} must equal "
                f"embedder d_model {self.decoder_config.d_model}"
            )
        self.schedule_config = schedule_config if schedule_config is not None else ScheduleConfig()
        self.embedder = EmbedderStack(
            self.decoder_config,
            bias_set=BiasSet(self.decoder_config) if with_bias_set else None,
            adapter_set=AdapterSet(self.decoder_config) if with_adapter_set else None,
        )
        self.unet = UNet(self.unet_config)
        self.schedule = self.schedule_config.build()

    def denoise(
        self,
        x: torch.Tensor,
        cond: torch.Tensor | None,
        t,
        cond_theta: torch.Tensor | None = None,
    ) -> torch.Tensor:
        return self.unet(x, cond, t, cond_theta)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c = self.unet_config
        return (c.in_channels, c.image_size, c.image_size)

    def config_snapshot(self, metadata: dict | None = None) -> dict:
        return {
            "decoder": dataclasses.asdict(self.decoder_config),
            "unet": dataclasses.asdict(self.unet_config),
            "schedule": dataclasses.asdict(self.schedule_config),
            "components": {
                "bias_set": self.embedder.bias_set is not None,
                "adapter_set": self.embedder.adapter_set is not None,
            },
            "metadata": metadata or {},
        }


def save_model(model: DiffusionModel, path, metadata: dict | None = None) -> None:
    tensors = {k: v for k, v in model.state_dict().items()}
    save_checkpoint(model.config_snapshot(metadata), tensors, path)


def load_model(path) -> tuple[DiffusionModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    config, tensors = load_checkpoint(path)
    decoder = DecoderConfig(**config["decoder"])
    unet_kwargs = dict(config["unet"])
    for key in ("channel_mults", "attention_levels"):
        unet_kwargs[key] = tuple(unet_kwargs[key])
    model = DiffusionModel(
        decoder_config=decoder,
        unet_config=UNetConfig(**unet_kwargs),
        schedule_config=ScheduleConfig(**config["schedule"]),
        with_bias_set=config["components"]["bias_set"],
        with_adapter_set=config["components"]["adapter_set"],
    )
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()}, strict=True)
    return model, config.get("metadata", {})


def model_fingerprint(model: nn.Module) -> str:
    """sha256 over all parameters in state-dict order; identifies exact weights."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()
