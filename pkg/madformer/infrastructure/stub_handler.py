"""Oracle denoiser for exercising the sampler without a trained model."""

from typing import Self

import torch

from madformer.application import RunConfig
from madformer.layout import blockify
from madformer.sampler import BlockDenoiser
from madformer.trainer import class_means


class OracleBlockDenoiser(BlockDenoiser):
    """Always predicts the data-generating class mean of the requested block."""

    def __init__(self: Self, mean_blocks: torch.Tensor):
        self.mean_blocks = mean_blocks
        self._labels = None

    @property
    def channels(self: Self) -> int:
        return self.mean_blocks.shape[-1]

    def start(self: Self, prompt: torch.Tensor) -> None:
        self._labels = prompt[:, 0].to(torch.long)

    def prepare(self: Self, block_index: int) -> None:
        return

    def denoise(self: Self, x_t: torch.Tensor, t: int, block_index: int) -> torch.Tensor:
        return self.mean_blocks[self._labels, block_index].to(x_t.dtype)

    def commit(self: Self, block_index: int, latent: torch.Tensor) -> None:
        return


def create_stub_denoiser(config: RunConfig) -> OracleBlockDenoiser:
    """(num_classes, l, tokens, C) class means laid out like the model's blocks."""
    means = torch.from_numpy(class_means(config.data)).to(torch.float32)
    return OracleBlockDenoiser(blockify(means, config.model.layout))
