"""
The complete multimodal model: vision encoder, visual aligner and looped backbone.
"""

from collections import OrderedDict
from typing import Dict, List, Sequence

import numpy as np

from .backbone import RecurrentBackbone
from .config import RunConfig
from .errors import ConfigError
from .layers import Module
from .tensor import Parameter
from .vision import VisionEncoder, VisualAligner, VisualHierarchy

SECTIONS = ("vision", "aligner", "tok_embed", "prelude", "adapter", "core", "coda")


class MultimodalModel(Module):
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        init_std = cfg.model.init_std
        self.vision = VisionEncoder(cfg.vision, rng, init_std)
        self.aligner = VisualAligner(cfg.vision, cfg.model.hidden, rng, init_std)
        self.backbone = RecurrentBackbone(cfg.model, rng)

    def sections(self) -> "OrderedDict[str, Module]":
        """Checkpoint sections in a fixed order."""
        b = self.backbone
        return OrderedDict([
            ("vision", self.vision),
            ("aligner", self.aligner),
            ("tok_embed", b.tok_embed),
            ("prelude", b.prelude),
            ("adapter", b.adapter),
            ("core", b.core),
            ("coda", b.coda),
        ])

    def trainable_parameters(self, trainable: str) -> List[Parameter]:
        """Parameters updated in a stage: the aligner only, or everything."""
        if trainable == "aligner":
            return self.aligner.parameters()
        if trainable == "all":
            return self.parameters()
        raise ConfigError(f"Unknown trainable set: {trainable}")

    def freeze_except(self, trainable: str) -> None:
        self.set_requires_grad(False)
        for p in self.trainable_parameters(trainable):
            p.requires_grad = True

    def encode_image(self, image: np.ndarray) -> VisualHierarchy:
        """uint8 or [0, 1] float C x H x W image -> visual hierarchy."""
        return self.encode_images([image])

    def encode_images(self, images: Sequence[np.ndarray]) -> VisualHierarchy:
        """Encode a batch of images into one stacked hierarchy (batch = len(images))."""
        pixels = [image.astype(np.float64) / 255.0 if image.dtype == np.uint8 else image for image in images]
        raw_tiers = self.vision.encode_batch_with_tiers(pixels)
        return self.aligner.merge_and_project(raw_tiers, batch=len(pixels))

    def section_checksums(self) -> Dict[str, float]:
        """Cheap per-section fingerprint (sum of absolute values)."""
        return {name: float(sum(np.abs(p.data).sum() for p in module.parameters()))
                for name, module in self.sections().items()}
