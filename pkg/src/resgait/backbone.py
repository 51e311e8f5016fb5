"""Gait recognition backbones and adaptive feature integration.

Both the holistic signature network and the restoration network share one
per-frame convolutional encoder (1->16->32->64 channels) whose frame maps are
combined by elementwise temporal max pooling, making the clip representation
invariant to frame order. The holistic network projects the pooled map to the
embedding G; the restoration network concatenates the occlusion feature O
into its penultimate layer and emits a corrective residual R. The recognition
feature is f = G + alpha * R.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint
from .oem import FEATURE_DIM as OCCLUSION_FEATURE_DIM
from .oem import OcclusionEvaluator

EMBED_DIM = 64
HIDDEN_DIM = 256


@dataclass
class EmbeddingRecord:
    """One embedded sequence, ready for retrieval or verification."""

    subject_id: str
    sequence_id: str
    embedding: np.ndarray
    alpha: float = 0.0
    extra: dict = field(default_factory=dict)


class SilhouetteEncoder(nn.Module):
    """Per-frame conv encoder with temporal set pooling (elementwise max)."""

    def __init__(self, input_hw: tuple[int, int] = (64, 64)):
        super().__init__()
        self.input_hw = tuple(input_hw)
        self.trunk = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        h, w = self.input_hw
        self.map_shape = (64, h // 8, w // 8)
        self.flat_dim = 64 * (h // 8) * (w // 8)
        self.fc = nn.Linear(self.flat_dim, HIDDEN_DIM)

    def _check_input(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.dim() == 4:
            clips = clips.unsqueeze(2)
        if clips.dim() != 5 or clips.shape[2] != 1:
            raise ValueError(f"expected clips of shape (B, T, 1, H, W), got {tuple(clips.shape)}")
        if tuple(clips.shape[-2:]) != self.input_hw:
            raise ValueError(f"frame dimensions {tuple(clips.shape[-2:])} do not match configured {self.input_hw}")
        return clips

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """Pooled hidden representation, shape (B, HIDDEN_DIM)."""
        clips = self._check_input(clips)
        b, t = clips.shape[:2]
        maps = self.trunk(clips.reshape(b * t, 1, *self.input_hw))
        maps = maps.reshape(b, t, *self.map_shape)
        pooled = maps.max(dim=1).values  # set pooling: order-invariant over frames
        return F.relu(self.fc(pooled.reshape(b, self.flat_dim)))


class GaitBackbone(nn.Module):
    """Holistic gait signature network: clip -> G in R^EMBED_DIM."""

    def __init__(self, input_hw: tuple[int, int] = (64, 64), embed_dim: int = EMBED_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.encoder = SilhouetteEncoder(input_hw)
        self.head = nn.Linear(HIDDEN_DIM, embed_dim)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(clips))


class ResidualBackbone(nn.Module):
    """Restoration network: (clip, occlusion feature O) -> residual R.

    Identical encoder topology to GaitBackbone; O joins at the last linear
    layer so the residual is conditioned on what was occluded.
    """

    def __init__(
        self,
        input_hw: tuple[int, int] = (64, 64),
        embed_dim: int = EMBED_DIM,
        occlusion_dim: int = OCCLUSION_FEATURE_DIM,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.occlusion_dim = occlusion_dim
        self.encoder = SilhouetteEncoder(input_hw)
        self.head = nn.Linear(HIDDEN_DIM + occlusion_dim, embed_dim)

    def forward(self, clips: torch.Tensor, occlusion_feature: torch.Tensor) -> torch.Tensor:
        if occlusion_feature.dim() != 2 or occlusion_feature.shape[1] != self.occlusion_dim:
            raise ValueError(
                f"expected occlusion features of shape (B, {self.occlusion_dim}), "
                f"got {tuple(occlusion_feature.shape)}"
            )
        hidden = self.encoder(clips)
        if occlusion_feature.shape[0] != hidden.shape[0]:
            raise ValueError("clip batch and occlusion feature batch sizes differ")
        return self.head(torch.cat([hidden, occlusion_feature], dim=1))

    def warm_start_from(self, gait: GaitBackbone) -> None:
        """Copy the encoder and the clip half of the head from a trained GaitBackbone."""
        self.encoder.load_state_dict(gait.encoder.state_dict())
        with torch.no_grad():
            self.head.weight[:, :HIDDEN_DIM].copy_(gait.head.weight)
            self.head.weight[:, HIDDEN_DIM:].zero_()
            self.head.bias.copy_(gait.head.bias)


class BnneckHead(nn.Module):
    """Classifier head for the identity loss: BN (bias frozen) + bias-free linear.

    The cross-entropy loss reads the post-BN logits; retrieval always uses the
    pre-neck embedding.
    """

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least two identity classes")
        self.bottleneck = nn.BatchNorm1d(embed_dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifier = nn.Linear(embed_dim, num_classes, bias=False)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.bottleneck(embeddings))


class InferenceBundle:
    """Frozen models loaded from one checkpoint, ready for embedding clips.

    A stage-3 checkpoint yields the full pipeline (evaluator + gait network +
    restoration network); a stage-2 checkpoint yields the gait network alone,
    in which case f = G and alpha = 0 for every clip.
    """

    def __init__(
        self,
        gait: GaitBackbone,
        oem: OcclusionEvaluator | None = None,
        residual: "ResidualBackbone | None" = None,
        meta: dict | None = None,
    ):
        self.gait = gait
        self.oem = oem
        self.residual = residual
        self.meta = meta or {}
        for module in (self.gait, self.oem, self.residual):
            if module is not None:
                module.eval()
                for p in module.parameters():
                    p.requires_grad_(False)

    @classmethod
    def load(cls, path: str | Path) -> "InferenceBundle":
        ckpt = load_checkpoint(path)
        arch = ckpt.meta["arch"]
        hw = tuple(arch["input_hw"])
        embed_dim = arch["embed_dim"]
        names = ckpt.module_names()
        gait = GaitBackbone(input_hw=hw, embed_dim=embed_dim)
        ckpt.load_into("gait", gait)
        oem = residual = None
        if "oem" in names:
            oem = OcclusionEvaluator(
                class_count=arch["class_count"],
                input_hw=hw,
                max_magnitude=arch["max_magnitude"],
                alpha_mode=arch["alpha_mode"],
            )
            ckpt.load_into("oem", oem)
        if "residual" in names:
            residual = ResidualBackbone(input_hw=hw, embed_dim=embed_dim)
            ckpt.load_into("residual", residual)
        return cls(gait, oem, residual, ckpt.meta)

    @property
    def has_restoration(self) -> bool:
        return self.oem is not None and self.residual is not None

    @property
    def trained_kinds(self) -> list[str]:
        return list(self.meta.get("stage3_kinds", []))

    @property
    def holistic_upper_bound(self):
        return self.meta.get("holistic_upper_bound")

    @torch.no_grad()
    def embed_batch(self, clips: np.ndarray) -> dict[str, np.ndarray]:
        """Embed (B, T, H, W) float clips; returns f, g, r, alpha arrays.

        Rows whose alpha is exactly zero copy G into f bit-for-bit, matching
        the integrate contract.
        """
        x = torch.from_numpy(np.ascontiguousarray(clips, dtype=np.float32))
        g = self.gait(x).numpy()
        if not self.has_restoration:
            zeros = np.zeros(len(g))
            return {"f": g.copy(), "g": g, "r": np.zeros_like(g), "alpha": zeros}
        o, _, raw = self.oem(x)
        alpha = self.oem.alphas(raw).numpy()
        r = self.residual(x, o).numpy()
        f = g + alpha[:, None] * r
        hold = alpha == 0.0
        f[hold] = g[hold]
        return {"f": f, "g": g, "r": r, "alpha": alpha}

    @torch.no_grad()
    def embed_gait_batch(self, clips: np.ndarray) -> np.ndarray:
        """Gait-network-only embeddings (the holistically trained baseline view)."""
        x = torch.from_numpy(np.ascontiguousarray(clips, dtype=np.float32))
        return self.gait(x).numpy()


def integrate(gait_feature, residual, alpha):
    """Adaptive integration f = G + alpha * R.

    When alpha is exactly zero the gait feature is returned as an exact copy,
    so holistic inputs are bit-identical to the gait-only pathway.
    """
    if isinstance(gait_feature, torch.Tensor):
        if isinstance(alpha, torch.Tensor):
            scale = alpha.reshape(-1, 1) if gait_feature.dim() == 2 else alpha
            return gait_feature + scale * residual
        if alpha == 0.0:
            return gait_feature.clone()
        return gait_feature + alpha * residual
    gait_feature = np.asarray(gait_feature)
    residual = np.asarray(residual)
    if gait_feature.shape != residual.shape:
        raise ValueError(f"feature shapes differ: {gait_feature.shape} vs {residual.shape}")
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return gait_feature.copy()
    return gait_feature + alpha * residual
