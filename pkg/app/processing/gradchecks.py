# app/processing/gradchecks.py
"""Finite-difference checks of every training objective composed with the
full encoder stack, at seeded points."""

import logging
from typing import Dict, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.func import functional_call

from app.config import ExperimentConfig
from app.diffmath import DTYPE
from app.diffmath.gradcheck import DEFAULT_STEP, grad_check
from app.diffmath.graph import Graph
from app.models.decoder import DecoderConfig, TextDecoder
from app.models.losses import (
    CombinedLossConfig,
    FocalConfig,
    focal_contrastive,
    numeric_alignment_loss,
    one_hot,
    ordinal_ce,
    total_loss,
)
from app.models.pipeline import GaitVLM, build_text_encoder
from app.numtext.vocab import NUM_FIRST_ID, NUM_LAST_ID

logger = logging.getLogger(__name__)

LOSSES = ("focal", "numeric", "ordinal", "total")
TOLERANCE = 1e-4


class ObjectiveModule(nn.Module):
    """Evaluates one named objective so that functional_call can rebind any
    trainable tensor of the classifier or the decoder."""

    def __init__(self, model: GaitVLM, decoder: TextDecoder, cfg: ExperimentConfig):
        super().__init__()
        self.model = model
        self.decoder = decoder
        self.focal = FocalConfig(alpha=cfg.focal_alpha, gamma=cfg.focal_gamma, tau=cfg.tau)
        self.combined = CombinedLossConfig(omega=cfg.omega)
        self.tau = cfg.tau

    def forward(self, kind: str, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        if kind == "ordinal":
            logits = self.decoder(batch["prefix"], batch["inputs"])
            return ordinal_ce(logits, batch["targets"], self.decoder.vocab)
        f_t = self.model.text_features()
        l_gp = numeric_alignment_loss(batch["f_num"], f_t, batch["num_labels"], self.model.heads, self.tau)
        if kind == "numeric":
            return l_gp
        f_v = self.model.video_features(batch["clips"])
        l_k = focal_contrastive(f_v, f_t, one_hot(batch["labels"], self.model.n_classes), self.focal)
        if kind == "focal":
            return l_k
        return total_loss(l_k, l_gp, self.combined)


def _point(cfg: ExperimentConfig, seed: int, batch_size: int, target_len: int):
    point_cfg = cfg.model_copy(update={"seed": seed})
    text_encoder = build_text_encoder(point_cfg)
    model = GaitVLM(point_cfg, text_encoder=text_encoder)
    decoder = TextDecoder(
        text_encoder.vocab,
        DecoderConfig(
            d=cfg.d,
            n_layers=cfg.decoder_layers,
            n_heads=cfg.decoder_heads,
            n_prefix=cfg.decoder_prefix,
            max_len=target_len,
        ),
        d_in=cfg.d,
        seed=seed,
    )
    gen = torch.Generator().manual_seed(seed)
    vocab = text_encoder.vocab
    targets = torch.randint(NUM_FIRST_ID, NUM_LAST_ID + 1, (batch_size, target_len), generator=gen)
    clips = torch.randn(batch_size, cfg.window, cfg.f_in, generator=gen, dtype=DTYPE)
    f_num = torch.randn(batch_size, cfg.d, generator=gen, dtype=DTYPE)
    # labels are the least similar class, so no objective starts saturated at tau
    with torch.no_grad():
        f_t = model.text_features()
        labels = (model.video_features(clips) @ f_t.T).argmin(dim=-1)
        num_labels = (model.heads.numeric(f_num) @ model.heads.text(f_t).T).argmin(dim=-1)
    batch = {
        "clips": clips,
        "labels": labels,
        "num_labels": num_labels,
        "f_num": f_num,
        "prefix": torch.randn(batch_size, cfg.d, generator=gen, dtype=DTYPE),
        "inputs": torch.randint(0, vocab.size, (batch_size, target_len), generator=gen),
        "targets": targets,
    }
    return ObjectiveModule(model, decoder, cfg), batch


def loss_graph(objective: ObjectiveModule, batch: Dict[str, torch.Tensor], kind: str) -> Tuple[Graph, Dict[str, torch.Tensor]]:
    """Graph over the trainable tensors the objective reads plus its
    differentiable data input (F^num or the decoder prefix), with the
    point to check at."""
    prefix = "decoder." if kind == "ordinal" else "model."
    params = {n: p for n, p in objective.named_parameters() if p.requires_grad and n.startswith(prefix)}
    data_input = "prefix" if kind == "ordinal" else "f_num"

    def fn(bindings: Dict[str, torch.Tensor]) -> torch.Tensor:
        rebound = {n: bindings[n] for n in params}
        return functional_call(objective, rebound, (kind, {**batch, data_input: bindings[data_input]}))

    graph = Graph(name=f"{kind}_loss", fn=fn, inputs=tuple(params) + (data_input,))
    point = {**{n: p.detach() for n, p in params.items()}, data_input: batch[data_input]}
    return graph, point


def run_gradchecks(
    cfg: ExperimentConfig,
    points: int = 10,
    losses: Sequence[str] = LOSSES,
    max_entries: Optional[int] = 8,
    h: float = DEFAULT_STEP,
    batch_size: int = 2,
    target_len: int = 6,
) -> Dict[str, float]:
    """Worst relative error per objective over ``points`` seeded points."""
    unknown = [k for k in losses if k not in LOSSES]
    if unknown:
        raise ValueError(f"Unknown objectives {unknown}; choose from {LOSSES}")
    worst = {kind: 0.0 for kind in losses}
    for p in range(points):
        objective, batch = _point(cfg, cfg.seed + p, batch_size, target_len)
        for kind in losses:
            graph, point = loss_graph(objective, batch, kind)
            err = grad_check(graph, point, h=h, max_entries=max_entries, seed=cfg.seed + p)
            worst[kind] = max(worst[kind], err)
            logger.info(f"gradcheck point {p} '{kind}': max rel err {err:.3e}")
    return worst
