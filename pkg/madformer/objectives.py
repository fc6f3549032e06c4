"""The weighted four-term training loss."""

from dataclasses import dataclass, field
from typing import Optional, Self

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from madformer.errors import EmptySupervision, ShapeMismatch
from madformer.layout import SequencePlan, TokenRole, delimiter_ids


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_text: float = Field(default=1.0, ge=0.0)
    lambda_image: float = Field(default=5.0, ge=0.0)
    lambda_hidden: float = Field(default=0.1, ge=0.0)
    lambda_tower: float = Field(default=0.0, ge=0.0)


@dataclass
class LossReport:
    total: torch.Tensor
    text_nll: torch.Tensor
    image_mse: torch.Tensor
    hidden_mse: torch.Tensor
    tower_mse: torch.Tensor
    counts: dict[str, int] = field(default_factory=dict)

    def as_row(self: Self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "text_nll": self.text_nll.item(),
            "image_mse": self.image_mse.item(),
            "hidden_mse": self.hidden_mse.item(),
            "tower_mse": self.tower_mse.item(),
        }


@dataclass(frozen=True)
class TermMasks:
    """Which plan tokens and blocks each loss term supervises."""

    text: tuple[int, ...]
    image: tuple[int, ...]
    hidden_blocks: tuple[int, ...]
    tower: tuple[int, ...]
    tower_blocks: tuple[int, ...]


def term_masks(plan: SequencePlan) -> TermMasks:
    """
    Text covers every TEXT position (each predicts the following id, BOI after
    the last one). The tower term covers CLEAN(i) for i < l - 1, each aimed at
    block i + 1.
    """
    tower_blocks = tuple(range(plan.ar_length - 1)) if plan.clean_blocks else ()
    return TermMasks(
        text=tuple(plan.indices(TokenRole.TEXT)),
        image=tuple(plan.indices(TokenRole.NOISY)),
        hidden_blocks=tuple(range(plan.ar_length)),
        tower=tuple(i for b in tower_blocks for i in plan.indices(TokenRole.CLEAN, b)),
        tower_blocks=tower_blocks,
    )


def text_targets(plan: SequencePlan, text_ids: torch.Tensor, text_vocab: int) -> torch.Tensor:
    """Next-token targets for every TEXT position.

    Ids shift left by one; the last text position predicts BOI, or EOI when
    the sequence has no image.
    """
    if text_ids.shape[1] == 0:
        return text_ids.to(torch.long)
    boi, eoi = delimiter_ids(text_vocab)
    closing = boi if plan.has_image else eoi
    tail = torch.full(
        (text_ids.shape[0], 1), closing, dtype=torch.long, device=text_ids.device
    )
    return torch.cat([text_ids[:, 1:].to(torch.long), tail], dim=1)


def _mse(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.numel() == 0:
        return prediction.new_zeros(())
    return F.mse_loss(prediction, target)


def total_loss(
    text_logits: torch.Tensor,
    text_targets: torch.Tensor,
    z_hat: torch.Tensor,
    z_image: torch.Tensor,
    z_cond: torch.Tensor,
    z_clean: Optional[torch.Tensor],
    weights: LossWeights,
    clean_blocks_enabled: bool = True,
    condition_enabled: bool = True,
) -> LossReport:
    """
    Combines the four terms, each a mean over its supervised elements.

    Args:
        text_logits: (B, n, V)
        text_targets: (B, n)
        z_hat: (B, l, T, C) clean-latent prediction at noisy positions
        z_image: (B, l, T, C) ground-truth clean latents
        z_cond: (B, l, T, C) conditions projected to latent channels
        z_clean: (B, l, T, C) clean-tower outputs or None
        weights: term weights
        clean_blocks_enabled: the tower term is 0 when False
        condition_enabled: the hidden term is 0 when False

    Raises:
        ShapeMismatch: If inputs disagree
        EmptySupervision: If the image or hidden term is weighted but has no blocks
    """
    if tuple(text_logits.shape[:-1]) != tuple(text_targets.shape):
        raise ShapeMismatch(
            f"logits {tuple(text_logits.shape)} vs targets {tuple(text_targets.shape)}"
        )
    for name, tensor in (("z_hat", z_hat), ("z_cond", z_cond)):
        if tensor.shape != z_image.shape:
            raise ShapeMismatch(f"{name} {tuple(tensor.shape)} vs z_image {tuple(z_image.shape)}")
    use_tower = clean_blocks_enabled and z_clean is not None
    if use_tower and z_clean.shape != z_image.shape:
        raise ShapeMismatch(f"z_clean {tuple(z_clean.shape)} vs z_image {tuple(z_image.shape)}")

    blocks = z_image.shape[1] if z_image.ndim >= 2 else 0
    zero = z_hat.new_zeros(())

    text_count = text_targets.numel()
    if text_count:
        text_nll = F.cross_entropy(
            text_logits.reshape(-1, text_logits.shape[-1]), text_targets.reshape(-1)
        )
    else:
        text_nll = zero

    if z_hat.numel() == 0 and weights.lambda_image > 0:
        raise EmptySupervision("image term is weighted but the batch has no noisy blocks")
    image_mse = _mse(z_hat, z_image)

    if condition_enabled:
        if blocks == 0 and weights.lambda_hidden > 0:
            raise EmptySupervision("hidden term is weighted but the batch has no blocks")
        hidden_mse = _mse(z_cond, z_image)
    else:
        hidden_mse = zero

    tower_blocks = max(blocks - 1, 0) if use_tower else 0
    if tower_blocks:
        tower_mse = _mse(z_clean[:, :-1], z_image[:, 1:])
    else:
        tower_mse = zero

    total = (
        weights.lambda_text * text_nll
        + weights.lambda_image * image_mse
        + weights.lambda_hidden * hidden_mse
        + weights.lambda_tower * tower_mse
    )
    return LossReport(
        total=total,
        text_nll=text_nll,
        image_mse=image_mse,
        hidden_mse=hidden_mse,
        tower_mse=tower_mse,
        counts={
            "text_tokens": text_count,
            "image_elements": z_hat.numel(),
            "hidden_blocks": blocks if condition_enabled else 0,
            "tower_blocks": tower_blocks,
        },
    )
