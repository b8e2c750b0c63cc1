"""The full classification network: embedding, encoder, head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mce import MCE, MceConfig, TokenSequence
from .nn import EVAL, Context, Module
from .tensor import Tensor
from .transformer import ClassifierHead, Encoder, EncoderConfig

ENCODER_PREFIXES = ("mce.", "encoder.")


@dataclass
class ModelConfig:
    mce: MceConfig
    encoder: EncoderConfig
    n_classes: int
    head_hidden: int | None = None

    def __post_init__(self):
        if self.encoder.d_model != self.mce.d_model:
            raise ValueError(f"encoder d_model {self.encoder.d_model} != embedding d_model {self.mce.d_model}")

    def to_dict(self) -> dict:
        return {"mce": self.mce.to_dict(), "encoder": self.encoder.to_dict(),
                "n_classes": self.n_classes, "head_hidden": self.head_hidden}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(MceConfig(**d["mce"]), EncoderConfig(**d["encoder"]), d["n_classes"], d.get("head_hidden"))


class MCT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.mce = MCE(cfg.mce, rng)
        self.encoder = Encoder(cfg.encoder, rng)
        self.init_head(np.random.default_rng([seed, 1]))
        self.assign_names()

    def init_head(self, rng: np.random.Generator) -> None:
        self.head = ClassifierHead(self.cfg.mce.d_model, self.cfg.n_classes, rng, self.cfg.head_hidden)
        self.assign_names()

    def features(self, x, ctx: Context = EVAL) -> TokenSequence:
        seq = self.mce(x, ctx)
        return TokenSequence(self.encoder(seq, ctx), seq.grid)

    def __call__(self, x, ctx: Context = EVAL) -> Tensor:
        return self.head(self.features(x, ctx).tokens)

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith(ENCODER_PREFIXES)}
