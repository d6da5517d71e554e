# app/models/pipeline.py
"""The assembled classifier: frozen text/vision backbones, knowledge-aware
prompts, video prompts and the projection heads, built from one config."""

import logging
from typing import Dict, List, Optional, Sequence

import torch
from torch import nn

from app.config import ExperimentConfig
from app.diffmath import DTYPE
from app.diffmath.checkpoint import load_checkpoint, save_checkpoint
from app.diffmath.graph import trainable
from app.models.encoders import PromptBundle, VideoPromptState, encode_text, encode_video
from app.models.knowledge import load_class_knowledge
from app.models.losses import ProjectionHeads
from app.models.transformer import FrozenTextEncoder, FrozenVisionEncoder
from app.numtext.vocab import Vocabulary, default_vocabulary
from app.utils.errors import CheckpointFormatError
from app.utils.models import ClassKnowledge

logger = logging.getLogger(__name__)


def build_text_encoder(cfg: ExperimentConfig, vocab: Optional[Vocabulary] = None) -> FrozenTextEncoder:
    return FrozenTextEncoder(
        vocab or default_vocabulary(),
        d=cfg.d,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_len=cfg.text_max_len,
        seed=cfg.seed,
        reserved_dims=cfg.reserved_dims,
    )


class GaitVLM(nn.Module):
    def __init__(
        self,
        cfg: ExperimentConfig,
        knowledge: Optional[Sequence[ClassKnowledge]] = None,
        text_encoder: Optional[FrozenTextEncoder] = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.knowledge: List[ClassKnowledge] = list(
            knowledge or load_class_knowledge(cfg.task, cfg.knowledge_path, k=cfg.n_keywords)
        )
        self.text_encoder = text_encoder or build_text_encoder(cfg)
        self.vision_encoder = FrozenVisionEncoder(cfg.d, cfg.n_layers, cfg.n_heads, seed=cfg.seed + 1)
        self.prompts = PromptBundle(
            n_classes=len(self.knowledge),
            d=cfg.d,
            k_ctx=cfg.k_ctx,
            per_class_projection=cfg.per_class_projection,
            use_kapt=cfg.use_kapt,
            seed=cfg.seed + 2,
        )
        self.video = VideoPromptState(cfg.d, cfg.n_layers, cfg.f_in, cfg.window, cfg.n_global, seed=cfg.seed + 3)
        self.heads = ProjectionHeads(cfg.d, seed=cfg.seed + 4)

    @property
    def n_classes(self) -> int:
        return len(self.knowledge)

    def trainable_parameters(self) -> Dict[str, nn.Parameter]:
        return trainable(self.named_parameters())

    def frozen_state(self) -> Dict[str, torch.Tensor]:
        return {
            name: p.detach().clone()
            for name, p in self.named_parameters()
            if name.startswith(("text_encoder.", "vision_encoder."))
        }

    def text_features(self) -> torch.Tensor:
        return encode_text(self.prompts, self.knowledge, self.text_encoder)

    def video_features(self, clips: torch.Tensor) -> torch.Tensor:
        return encode_video(clips.to(DTYPE), self.video, self.vision_encoder)

    @torch.no_grad()
    def predict(self, clips: torch.Tensor, chunk: int = 64) -> torch.Tensor:
        """argmax_i <F_i^T, F^V> per clip."""
        f_t = self.text_features()
        preds = []
        for start in range(0, clips.shape[0], chunk):
            preds.append((self.video_features(clips[start : start + chunk]) @ f_t.T).argmax(dim=-1))
        return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)

    # --- persistence: trainable tensors only; frozen weights follow from the seed ---
    def save(self, path: str) -> str:
        return save_checkpoint(path, {k: v.detach() for k, v in self.trainable_parameters().items()})

    def load(self, path: str) -> "GaitVLM":
        tensors = load_checkpoint(path)
        params = self.trainable_parameters()
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise CheckpointFormatError(f"Checkpoint {path} does not match the model: missing={missing} unexpected={unexpected}")
        with torch.no_grad():
            for name, p in params.items():
                if tuple(tensors[name].shape) != tuple(p.shape):
                    raise CheckpointFormatError(f"Shape of '{name}' differs: {tuple(tensors[name].shape)} vs {tuple(p.shape)}")
                p.copy_(tensors[name])
        logger.info(f"Loaded {len(params)} trainable tensors from {path}")
        return self
