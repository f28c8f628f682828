"""End-to-end captioning model: frontend -> encoder -> bridge -> decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .bridge import BridgeConfig, QueryBridge
from .decoder import CaptionDecoder, DecoderConfig, Vocabulary, assemble_sequence
from .encoder import EncoderConfig, PatchEncoder
from .frontend import FrontendConfig, PatchSequence, Waveform, wave_to_patches
from .lora import LoraConfig, TrainStrategy, apply_strategy
from .nn import Module, Tensor


@dataclass
class PipelineConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    strategy: TrainStrategy = field(default_factory=TrainStrategy)
    seed: int = 0

    def __post_init__(self):
        if self.bridge.d_dec != self.decoder.d_dec:
            raise ValueError("bridge output width must match decoder width")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        kwargs = {}
        sections = {"frontend": FrontendConfig, "encoder": EncoderConfig,
                    "bridge": BridgeConfig, "decoder": DecoderConfig,
                    "lora": LoraConfig}
        for key, val in d.items():
            if key in sections:
                kwargs[key] = sections[key](**val)
            elif key == "strategy":
                kwargs[key] = TrainStrategy.from_dict(val)
            elif key == "seed":
                kwargs[key] = int(val)
            else:
                raise ValueError(f"unknown config section {key!r}")
        return cls(**kwargs)


class CaptionModel(Module):
    """Composition of the trainable stages; frontend is parameter-free."""

    def __init__(self, cfg: PipelineConfig, vocab: Vocabulary,
                 dtype=np.float32):
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = PatchEncoder(cfg.encoder, nn.rng_from_seed([cfg.seed, 1]),
                                    dtype=dtype)
        self.bridge = QueryBridge(cfg.bridge, cfg.encoder.d_enc,
                                  nn.rng_from_seed([cfg.seed, 2]), dtype=dtype)
        self.decoder = CaptionDecoder(cfg.decoder, len(vocab),
                                      nn.rng_from_seed([cfg.seed, 3]),
                                      dtype=dtype)

    def acoustic_tokens(self, patches: PatchSequence) -> Tensor:
        return self.bridge(self.encoder(patches))

    def splice(self, patches: PatchSequence, caption: str | None):
        acoustic = self.acoustic_tokens(patches)
        return assemble_sequence(acoustic, caption, self.vocab,
                                 self.cfg.decoder.max_seq)

    def loss_on_batch(self, batch: list[tuple[PatchSequence, str]]) -> Tensor:
        splices = [self.splice(p, caption) for p, caption in batch]
        return self.decoder.forward_loss(splices)

    def caption_patches(self, patches: PatchSequence, beam: int = 1,
                        max_caption: int | None = None) -> str:
        acoustic = self.acoustic_tokens(patches)
        if beam == 1:
            return self.decoder.greedy_decode(acoustic, self.vocab, max_caption)
        return self.decoder.beam_decode(acoustic, self.vocab, beam, max_caption)

    def caption_wave(self, wave: Waveform, beam: int = 1,
                     max_caption: int | None = None) -> str:
        patches = wave_to_patches(wave, self.cfg.frontend)
        return self.caption_patches(patches, beam, max_caption)


def build_model(cfg: PipelineConfig, vocab: Vocabulary,
                dtype=np.float32) -> CaptionModel:
    """Construct the model and apply the train strategy (LoRA wrapping)."""
    model = CaptionModel(cfg, vocab, dtype=dtype)
    apply_strategy(model, cfg.strategy, cfg.lora, seed=cfg.seed)
    return model
