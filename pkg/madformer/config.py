from typing import Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

from madformer.backbone import ModelConfig
from madformer.evaluation import EvalConfig
from madformer.noise_schedule import ScheduleConfig
from madformer.objectives import LossWeights
from madformer.sampler import SamplerConfig
from madformer.trainer import SyntheticSpec, TrainConfig

# Ids kept out of the class vocabulary: BOI and EOI.
RESERVED_TEXT_IDS = 2


class RunConfig(BaseModel):
    """Every section of a run configuration file."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: SyntheticSpec = Field(default_factory=SyntheticSpec)
    loss: LossWeights = Field(default_factory=LossWeights)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_sections_agree(self) -> Self:
        model, data = self.model, self.data
        if (data.grid_h, data.grid_w) != (model.grid_h, model.grid_w):
            raise ValueError(
                f"data grid {data.grid_h}x{data.grid_w} differs from model grid "
                f"{model.grid_h}x{model.grid_w}"
            )
        if data.channels != model.latent_channels:
            raise ValueError(
                f"data.channels={data.channels} differs from "
                f"model.latent_channels={model.latent_channels}"
            )
        if data.num_classes > model.text_vocab - RESERVED_TEXT_IDS:
            raise ValueError(
                f"data.num_classes={data.num_classes} exceeds the "
                f"{model.text_vocab - RESERVED_TEXT_IDS} usable text ids"
            )
        if model.max_text_len < 1:
            raise ValueError("class prompts need model.max_text_len >= 1")
        if data.text_only:
            if data.text_len > model.max_text_len:
                raise ValueError(
                    f"data.text_len={data.text_len} exceeds model.max_text_len={model.max_text_len}"
                )
            if self.loss.lambda_image > 0:
                raise ValueError("text-only data needs loss.lambda_image = 0")
        return self

    def with_seed(self: Self, seed: int) -> Self:
        return self.model_validate(
            {
                **self.model_dump(),
                "train": {**self.train.model_dump(), "seed": seed},
                "sampler": {**self.sampler.model_dump(), "seed": seed},
            }
        )
