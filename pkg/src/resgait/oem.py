"""Occlusion evaluation network: occlusion type classification + level regression.

A small per-frame convolutional trunk (1->32->64->128 channels, 3x3 convs,
ReLU, 2x2 max-pools, global average pool) feeds a 64-wide hidden layer; the
per-frame hidden features are mean-pooled over time into the occlusion
feature O, from which two parallel linear heads predict class logits and a
raw occlusion level. The gating score alpha is the clamped normalized level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .occlusion import DEFAULT_MAX_MAGNITUDE, OcclusionLabel

FEATURE_DIM = 64
CLASS_COUNT = 6
ALPHA_MODES = ("severity", "quality")


@dataclass
class OcclusionAssessment:
    """Aggregated occlusion analysis of one clip."""

    feature: np.ndarray  # O, shape (FEATURE_DIM,)
    alpha: float  # gating score in [0, 1]
    class_logits: np.ndarray  # shape (class_count,)
    raw_level: float  # unclamped regression output
    per_frame: np.ndarray | None = None  # (T, FEATURE_DIM) pre-pooling features when retained


def alpha_from_level(raw_level, max_magnitude: float = DEFAULT_MAX_MAGNITUDE, mode: str = "severity"):
    """Map the raw regressed level to the gating score alpha in [0, 1].

    severity: alpha rises with occlusion (0 on holistic input); quality is the
    complementary reading (1 on holistic input).
    """
    if mode not in ALPHA_MODES:
        raise ValueError(f"alpha mode must be one of {ALPHA_MODES}, got {mode!r}")
    if isinstance(raw_level, torch.Tensor):
        severity = torch.clamp(raw_level / max_magnitude, 0.0, 1.0)
        return 1.0 - severity if mode == "quality" else severity
    severity = min(max(raw_level / max_magnitude, 0.0), 1.0)
    return 1.0 - severity if mode == "quality" else severity


class OcclusionEvaluator(nn.Module):
    """Per-frame conv trunk with temporal mean pooling and two linear heads."""

    def __init__(
        self,
        class_count: int = CLASS_COUNT,
        input_hw: tuple[int, int] = (64, 64),
        max_magnitude: float = DEFAULT_MAX_MAGNITUDE,
        alpha_mode: str = "severity",
    ):
        super().__init__()
        if alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha mode must be one of {ALPHA_MODES}, got {alpha_mode!r}")
        self.class_count = class_count
        self.input_hw = tuple(input_hw)
        self.max_magnitude = max_magnitude
        self.alpha_mode = alpha_mode
        self.trunk = nn.Sequential(
            nn.Conv2d(1, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.hidden = nn.Linear(128, FEATURE_DIM)
        self.class_head = nn.Linear(FEATURE_DIM, class_count)
        self.level_head = nn.Linear(FEATURE_DIM, 1)

    def zero_init_heads(self) -> None:
        """Zero both heads: uniform logits and level 0 regardless of input."""
        for head in (self.class_head, self.level_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def _check_input(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.dim() == 4:  # (B, T, H, W) -> add channel
            clips = clips.unsqueeze(2)
        if clips.dim() != 5 or clips.shape[2] != 1:
            raise ValueError(f"expected clips of shape (B, T, 1, H, W), got {tuple(clips.shape)}")
        if tuple(clips.shape[-2:]) != self.input_hw:
            raise ValueError(f"frame dimensions {tuple(clips.shape[-2:])} do not match configured {self.input_hw}")
        return clips

    def frame_features(self, clips: torch.Tensor) -> torch.Tensor:
        """Per-frame hidden features, shape (B, T, FEATURE_DIM)."""
        clips = self._check_input(clips)
        b, t = clips.shape[:2]
        x = clips.reshape(b * t, 1, *self.input_hw)
        feats = self.hidden(self.trunk(x))
        return feats.reshape(b, t, FEATURE_DIM)

    def forward(self, clips: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (O, class_logits, raw_level) with shapes (B, 64), (B, C), (B,)."""
        per_frame = self.frame_features(clips)
        o = per_frame.mean(dim=1)
        return o, self.class_head(o), self.level_head(o).squeeze(-1)

    def alphas(self, raw_level: torch.Tensor) -> torch.Tensor:
        return alpha_from_level(raw_level, self.max_magnitude, self.alpha_mode)

    @torch.no_grad()
    def assess(self, clip_frames: np.ndarray, keep_per_frame: bool = False) -> OcclusionAssessment:
        """Assess one clip given as a (T, H, W) binary array."""
        was_training = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.ascontiguousarray(clip_frames)).float().unsqueeze(0)
            per_frame = self.frame_features(x)
            o = per_frame.mean(dim=1)
            logits = self.class_head(o)
            raw = self.level_head(o).squeeze(-1)
        finally:
            self.train(was_training)
        raw_level = float(raw[0])
        return OcclusionAssessment(
            feature=o[0].numpy().copy(),
            alpha=float(alpha_from_level(raw_level, self.max_magnitude, self.alpha_mode)),
            class_logits=logits[0].numpy().copy(),
            raw_level=raw_level,
            per_frame=per_frame[0].numpy().copy() if keep_per_frame else None,
        )


def oem_batch_loss(
    class_logits: torch.Tensor,
    raw_levels: torch.Tensor,
    target_classes: torch.Tensor,
    target_levels: torch.Tensor,
    lambda1: float,
    lambda2: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined objective: lambda1 * cross-entropy + lambda2 * squared level error.

    Returns (total, cls_term, reg_term); the weighted terms are averaged over
    the batch.
    """
    cls = F.cross_entropy(class_logits, target_classes)
    reg = ((raw_levels - target_levels) ** 2).mean()
    return lambda1 * cls + lambda2 * reg, cls, reg


def oem_loss(assessment: OcclusionAssessment, label: OcclusionLabel, lambda1: float, lambda2: float) -> float:
    """Scalar training objective for one assessed clip against its ground truth."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be nonnegative")
    logits = torch.as_tensor(assessment.class_logits, dtype=torch.float64).unsqueeze(0)
    if not 0 <= label.class_index < logits.shape[1]:
        raise ValueError(f"class index {label.class_index} out of range for {logits.shape[1]} classes")
    total, _, _ = oem_batch_loss(
        logits,
        torch.tensor([assessment.raw_level], dtype=torch.float64),
        torch.tensor([label.class_index]),
        torch.tensor([label.level], dtype=torch.float64),
        lambda1,
        lambda2,
    )
    return float(total)
