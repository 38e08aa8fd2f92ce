"""
Toy vision encoder and the visual aligner.

The encoder is a stack of bidirectional blocks over patch embeddings (no CLS
token). The hidden state after each tier layer is kept; every tier gets its
own patch merger (2x2 spatial grouping then affine into the language width)
and the final tier also feeds the main projector that produces the base
visual embeddings.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .config import VisionConfig
from .errors import ShapeError
from .layers import DecoderBlock, Linear, Module
from .tensor import Array, Parameter


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Split a C x H x W image into row-major flattened patches.

    Returns:
        Array of shape (n_patches, C * patch_size**2), each row in (C, py, px) order

    Raises:
        ShapeError: If H or W is not divisible by patch_size
    """
    if image.ndim != 3:
        raise ShapeError(f"patchify expects C x H x W, got {image.shape}")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image extents {h}x{w} are not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(c, gh, patch_size, gw, patch_size).transpose(1, 3, 0, 2, 4)
    return patches.reshape(gh * gw, c * patch_size * patch_size)


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch_size: int) -> np.ndarray:
    gh, gw = height // patch_size, width // patch_size
    grid = patches.reshape(gh, gw, channels, patch_size, patch_size).transpose(2, 0, 3, 1, 4)
    return grid.reshape(channels, height, width)


def grouping_index(grid: int, batch: int = 1) -> np.ndarray:
    """
    Patch indices for 2x2 merging: four consecutive entries per merged token,
    row-major. With batch > 1 the images' patch rows are stacked and each
    image's indices are offset by its first row.
    """
    if grid % 2:
        raise ShapeError(f"patch grid {grid}x{grid} cannot be grouped 2x2")
    index = []
    for gr in range(grid // 2):
        for gc in range(grid // 2):
            for dr in (0, 1):
                for dc in (0, 1):
                    index.append((2 * gr + dr) * grid + 2 * gc + dc)
    index = np.asarray(index, dtype=np.int64)
    if batch == 1:
        return index
    return np.concatenate([b * grid * grid + index for b in range(batch)])


def group_patches(states: Array, grid: int, batch: int = 1) -> Array:
    """(n_p x d) -> (n_p/4 x 4d), concatenating each 2x2 neighbourhood."""
    if states.shape[0] != batch * grid * grid:
        raise ShapeError(f"{states.shape[0]} patch states do not form {batch} {grid}x{grid} grid(s)")
    gathered = T.gather_rows(states, grouping_index(grid, batch))
    return gathered.reshape(states.shape[0] // 4, 4 * states.shape[1])


class VisionEncoder(Module):
    """Patch embedding, learned positions and D bidirectional blocks."""

    def __init__(self, cfg: VisionConfig, rng: np.random.Generator, init_std: float = 0.02):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.width, rng, init_std)
        self.position = Parameter(T.randn((cfg.n_patches, cfg.width), init_std, rng))
        self.blocks = [DecoderBlock(cfg.width, cfg.heads, rng, init_std=init_std) for _ in range(cfg.depth)]

    def encode_with_tiers(self, image: np.ndarray) -> List[Array]:
        """
        Run the encoder and return the residual stream after each tier layer.

        Args:
            image: C x H x W pixel values

        Returns:
            One (n_p x d_v) state per entry of tier_layers, shallow to deep
        """
        return self.encode_batch_with_tiers([image])

    def encode_batch_with_tiers(self, images: Sequence[np.ndarray]) -> List[Array]:
        """
        Encode several images in one pass; each tier state stacks the images'
        patch rows in order (len(images) * n_p rows).

        Raises:
            ShapeError: If an image does not match the configured input size
        """
        patches = []
        for image in images:
            p = patchify(np.asarray(image, dtype=T.get_default_dtype()), self.cfg.patch_size)
            if p.shape != (self.cfg.n_patches, self.cfg.patch_dim):
                raise ShapeError(f"image {image.shape} does not match the configured {self.cfg.image_size}px input")
            patches.append(p)
        batch = len(patches)
        position = self.position if batch == 1 else T.concat([self.position] * batch, axis=0)
        x = self.patch_embed(Array(np.concatenate(patches))) + position
        tiers = []
        wanted = set(self.cfg.tier_layers)
        for layer, block in enumerate(self.blocks, 1):
            x = block(x, causal=False, identity=self.cfg.isolate_patches, batch=batch)
            if layer in wanted:
                tiers.append(x)
        return tiers


@dataclass
class VisualHierarchy:
    """
    Base visual embeddings plus the four tier cues, all n_v x h.

    For a batch of images every member stacks batch blocks of n_v rows.
    """
    base: Array
    tiers: List[Array]
    batch: int = 1

    def __post_init__(self):
        shapes = {self.base.shape} | {t.shape for t in self.tiers}
        if len(shapes) != 1:
            raise ShapeError(f"visual hierarchy members disagree in shape: {sorted(shapes)}")
        if self.batch < 1 or self.base.shape[0] % self.batch:
            raise ShapeError(f"{self.base.shape[0]} visual rows do not split into {self.batch} images")

    @property
    def n_tokens(self) -> int:
        """Visual tokens per image."""
        return self.base.shape[0] // self.batch

    def tier(self, index: int) -> Array:
        """1-based tier lookup."""
        return self.tiers[index - 1]


class PatchMerger(Module):
    """Affine map from a 2x2 patch group into the language width."""

    def __init__(self, width: int, hidden: int, kind: str, rng: np.random.Generator, init_std: float = 0.02):
        self.kind = kind
        self.proj = Linear(4 * width if kind == "grouped" else width, hidden, rng, init_std)

    def __call__(self, states: Array, grid: int, batch: int = 1) -> Array:
        grouped = group_patches(states, grid, batch)
        if self.kind == "grouped":
            return self.proj(grouped)
        n_v, width = grouped.shape[0], states.shape[1]
        averaging = np.kron(np.eye(n_v), np.full((1, 4), 0.25)).astype(states.dtype)
        pooled = Array(averaging) @ T.gather_rows(states, grouping_index(grid, batch))
        return self.proj(pooled.reshape(n_v, width))


class VisualAligner(Module):
    """The stage-1 trainable bridge: one merger per tier plus the main projector."""

    def __init__(self, vision: VisionConfig, hidden: int, rng: np.random.Generator, init_std: float = 0.02):
        self.grid = vision.grid
        self.mergers = [PatchMerger(vision.width, hidden, vision.merger_kind, rng, init_std)
                        for _ in vision.tier_layers]
        self.projector_in = Linear(4 * vision.width, hidden, rng, init_std)
        self.projector_out = Linear(hidden, hidden, rng, init_std)

    def merge_and_project(self, raw_tiers: List[Array], batch: int = 1) -> VisualHierarchy:
        if len(raw_tiers) != len(self.mergers):
            raise ShapeError(f"expected {len(self.mergers)} tier states, got {len(raw_tiers)}")
        tiers = [merger(state, self.grid, batch) for merger, state in zip(self.mergers, raw_tiers)]
        base = self.projector_out(T.gelu(self.projector_in(group_patches(raw_tiers[-1], self.grid, batch))))
        return VisualHierarchy(base=base, tiers=tiers, batch=batch)
