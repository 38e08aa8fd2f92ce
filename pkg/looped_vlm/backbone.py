"""
Looped language backbone.

Three stacks of decoder blocks: the prelude maps embeddings into latent space
once, the core is applied r times to refine a latent state (its input is the
prelude output concatenated with the state, squeezed back to width h by an
adapter), and the coda decodes a state into logits. During the first few core
steps the visual rows of the core input receive one tier of visual cues per
step, shallow tiers first.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DataError, NumericError, ShapeError
from .layers import DecoderBlock, Embedding, KVSink, Linear, Module, PastKV, RMSNorm
from .tensor import Array, Parameter
from .tokenizer import VOCAB
from .vision import VisualHierarchy

logger = logging.getLogger(__name__)

N_TIERS = 4

# Per-layer (past keys/values, sink) pairs handed to a stack of blocks.
LayerHooks = Sequence[Tuple[Optional[PastKV], Optional[KVSink]]]


@dataclass
class InjectionSchedule:
    """Which visual tier (1-based) each core step receives, or None."""
    r_total: int
    tiers: List[Optional[int]] = field(default_factory=list)

    @property
    def K(self) -> int:
        return min(N_TIERS, self.r_total)

    def tier_for_step(self, step: int) -> Optional[int]:
        if 1 <= step <= len(self.tiers):
            return self.tiers[step - 1]
        return None


def build_schedule(r_total: int, mode: str = "stride", enabled: bool = True) -> InjectionSchedule:
    """
    Assign tiers to the first core steps.

    With four or more steps, steps 1..4 get tiers 1..4. With fewer steps,
    "stride" takes every floor(4/r)-th tier starting at 1 and "prefix" takes
    tiers 1..r. When disabled no step is injected.
    """
    if r_total < 1:
        raise ValueError(f"r_total must be >= 1, got {r_total}")
    if not enabled:
        tiers: List[Optional[int]] = [None] * r_total
    elif r_total >= N_TIERS:
        tiers = list(range(1, N_TIERS + 1)) + [None] * (r_total - N_TIERS)
    elif mode == "prefix":
        tiers = list(range(1, r_total + 1))
    else:
        stride = N_TIERS // r_total
        tiers = [1 + i * stride for i in range(r_total)]
    return InjectionSchedule(r_total=r_total, tiers=tiers)


@dataclass
class LatentState:
    values: Array
    iteration: int = 0


@dataclass
class Embeddings:
    """
    Embedded sequence (visual rows replaced by base visual embeddings).

    A batch stacks batch sequences of equal length; visual_span is per sequence.
    """
    e: Array
    visual_span: Tuple[int, int]
    batch: int = 1


def init_state(n: int, h: int, sigma0: float, seed: int, start: int = 0, batch: int = 1) -> LatentState:
    """
    Draw s0 with i.i.d. N(0, sigma0^2) entries.

    Row i comes from its own stream keyed by (seed, start + i), so an absolute
    position always starts from the same row. A batch repeats the n rows once
    per sequence.
    """
    if sigma0 <= 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    rows = [np.random.default_rng([seed, start + i]).standard_normal(h) for i in range(n)]
    values = (np.stack(rows) * sigma0 if rows else np.zeros((0, h))).astype(T.get_default_dtype())
    if batch > 1:
        values = np.tile(values, (batch, 1))
    return LatentState(values=Array(values), iteration=0)


def inject(e: Array, hierarchy: Optional[VisualHierarchy], schedule: InjectionSchedule, step: int,
           visual_span: Tuple[int, int], row_offset: int = 0, gates: Optional[Parameter] = None) -> Array:
    """
    Add the scheduled visual tier to the visual rows of e.

    Args:
        e: Core input rows, covering absolute positions [row_offset, row_offset + n)
        hierarchy: Visual cues (None injects nothing)
        schedule: Injection schedule
        step: 1-based core step
        visual_span: (start, length) of the visual rows in absolute positions
        row_offset: Absolute position of the first row of e
        gates: Optional per-tier scalar gates

    Returns:
        e itself when nothing is injected, otherwise a copy with updated visual rows
    """
    tier = schedule.tier_for_step(step)
    if tier is None or hierarchy is None:
        return e
    if hierarchy.batch > 1:
        return _inject_batch(e, hierarchy, tier, visual_span, gates)
    start, length = visual_span
    lo = max(start, row_offset)
    hi = min(start + length, row_offset + e.shape[0])
    if lo >= hi:
        return e
    cue = T.slice_rows(hierarchy.tier(tier), lo - start, hi - start)
    if gates is not None:
        cue = cue * T.slice_rows(gates.reshape(N_TIERS, 1), tier - 1, tier)
    rows = T.slice_rows(e, lo - row_offset, hi - row_offset) + cue
    return T.set_rows(e, lo - row_offset, rows)


def _inject_batch(e: Array, hierarchy: VisualHierarchy, tier: int, visual_span: Tuple[int, int],
                  gates: Optional[Parameter]) -> Array:
    """Whole-sequence injection for stacked batches (no row offset)."""
    start, length = visual_span
    if length != hierarchy.n_tokens or e.shape[0] % hierarchy.batch:
        raise ShapeError(f"core input {e.shape} does not fit a batch of {hierarchy.batch} x {length} visual rows")
    seq_len = e.shape[0] // hierarchy.batch
    cues = hierarchy.tier(tier)
    if gates is not None:
        cues = cues * T.slice_rows(gates.reshape(N_TIERS, 1), tier - 1, tier)
    for b in range(hierarchy.batch):
        lo = b * seq_len + start
        rows = T.slice_rows(e, lo, lo + length) + T.slice_rows(cues, b * length, (b + 1) * length)
        e = T.set_rows(e, lo, rows)
    return e


def _visual_span(token_ids: np.ndarray, n_v: int) -> Tuple[int, int]:
    """
    (start, length) of the image placeholders in one sequence.

    Raises:
        DataError: If the placeholder count differs from n_v or they are not contiguous
    """
    image_rows = np.flatnonzero(token_ids == VOCAB.image_id)
    if len(image_rows) != n_v:
        raise DataError(f"Sequence has {len(image_rows)} image placeholders but {n_v} visual tokens")
    if n_v == 0:
        return (0, 0)
    start = int(image_rows[0])
    if image_rows[-1] - start + 1 != n_v:
        raise DataError("Image placeholders are not contiguous")
    return (start, n_v)


def _run_blocks(blocks: Sequence[DecoderBlock], x: Array, hooks: Optional[LayerHooks], batch: int = 1) -> Array:
    for i, block in enumerate(blocks):
        past, sink = hooks[i] if hooks is not None else (None, None)
        x = block(x, past=past, kv_sink=sink, batch=batch)
    return x


class Prelude(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.position = Parameter(T.randn((cfg.max_seq_len, cfg.hidden), cfg.init_std, rng))
        self.blocks = [DecoderBlock(cfg.hidden, cfg.heads, rng, cfg.mlp_ratio, cfg.init_std)
                       for _ in range(cfg.layers_e)]


class Core(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [DecoderBlock(cfg.hidden, cfg.heads, rng, cfg.mlp_ratio, cfg.init_std)
                       for _ in range(cfg.layers_r)]
        self.gates = Parameter(np.ones(N_TIERS)) if cfg.injection_phi == "gated_add" else None


class Coda(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [DecoderBlock(cfg.hidden, cfg.heads, rng, cfg.mlp_ratio, cfg.init_std)
                       for _ in range(cfg.layers_h)]
        self.norm = RMSNorm(cfg.hidden)


class RecurrentBackbone(Module):
    """Token embedding, prelude, adapter, core and coda."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, vocab_size: int = len(VOCAB)):
        self.cfg = cfg
        self.tok_embed = Embedding(vocab_size, cfg.hidden, rng, cfg.init_std)
        self.prelude = Prelude(cfg, rng)
        self.adapter = Linear(2 * cfg.hidden, cfg.hidden, rng, cfg.init_std)
        self.core = Core(cfg, rng)
        self.coda = Coda(cfg, rng)

    def schedule(self, r_total: int, mode: Optional[str] = None) -> InjectionSchedule:
        return build_schedule(r_total, mode or self.cfg.injection_mode, self.cfg.use_hierarchy)

    def embed(self, token_ids: np.ndarray, hierarchy: Optional[VisualHierarchy]) -> Embeddings:
        """
        Embed tokens and substitute image placeholders with the base visual embeddings.

        token_ids is one sequence, or a B x n array embedded as (B * n) x h rows.

        Raises:
            DataError: If the number of image placeholders differs from the visual token count
        """
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if token_ids.ndim == 2:
            return self._embed_batch(token_ids, hierarchy)
        e = self.tok_embed(token_ids)
        start, n_v = _visual_span(token_ids, hierarchy.n_tokens if hierarchy is not None else 0)
        if n_v == 0:
            return Embeddings(e=e, visual_span=(0, 0))
        return Embeddings(e=T.set_rows(e, start, hierarchy.base), visual_span=(start, n_v))

    def _embed_batch(self, token_ids: np.ndarray, hierarchy: Optional[VisualHierarchy]) -> Embeddings:
        """B x n ids -> (B*n) x h rows; every sequence must place its image at the same span."""
        batch, n = token_ids.shape
        if hierarchy is not None and hierarchy.batch != batch:
            raise ShapeError(f"{batch} sequences but {hierarchy.batch} encoded images")
        n_v = hierarchy.n_tokens if hierarchy is not None else 0
        spans = {_visual_span(row, n_v) for row in token_ids}
        if len(spans) != 1:
            raise DataError(f"Image placeholders sit at different positions across the batch: {sorted(spans)}")
        span = spans.pop()
        e = self.tok_embed(token_ids.reshape(-1))
        if n_v:
            start = span[0]
            for b in range(batch):
                e = T.set_rows(e, b * n + start, T.slice_rows(hierarchy.base, b * n_v, (b + 1) * n_v))
        return Embeddings(e=e, visual_span=span if n_v else (0, 0), batch=batch)

    def embed_tokens(self, token_ids: np.ndarray) -> Array:
        """Plain token embedding (no placeholders allowed)."""
        token_ids = np.asarray(token_ids, dtype=np.int64)
        if np.any(token_ids == VOCAB.image_id):
            raise DataError("Image placeholders need a visual hierarchy")
        return self.tok_embed(token_ids)

    def run_prelude(self, e: Array, start: int = 0, hooks: Optional[LayerHooks] = None, batch: int = 1) -> Array:
        """Add learned positions for absolute rows [start, start + n) and run the prelude blocks."""
        n = e.shape[0] // batch
        if start + n > self.cfg.max_seq_len:
            raise ShapeError(f"sequence reaches position {start + n} beyond max_seq_len {self.cfg.max_seq_len}")
        position = T.slice_rows(self.prelude.position, start, start + n)
        if batch > 1:
            position = T.concat([position] * batch, axis=0)
        x = e + position
        return _run_blocks(self.prelude.blocks, x, hooks, batch)

    def recurrent_step(self, state: LatentState, injected: Array, hooks: Optional[LayerHooks] = None,
                       batch: int = 1) -> LatentState:
        """
        One application of the core: adapter over [injected | state], then the core blocks.

        Raises:
            NumericError: If the new state has non-finite entries
        """
        if injected.shape != state.values.shape:
            raise ShapeError(f"core input {injected.shape} does not match state {state.values.shape}")
        z = self.adapter(T.concat_channels(injected, state.values))
        z = _run_blocks(self.core.blocks, z, hooks, batch)
        if not np.all(np.isfinite(z.data)):
            diagnostics = {
                "iteration": state.iteration + 1,
                "state_finite": int(np.isfinite(state.values.data).sum()),
                "input_finite": int(np.isfinite(injected.data).sum()),
                "size": int(z.data.size),
                "max_abs_state": float(np.nanmax(np.abs(state.values.data))) if state.values.size else 0.0,
            }
            logger.error(f"Non-finite core activations: {diagnostics}")
            raise NumericError("Non-finite activations in recurrent step", diagnostics)
        return LatentState(values=z, iteration=state.iteration + 1)

    def head_logits(self, state_values: Array, hooks: Optional[LayerHooks] = None, batch: int = 1) -> Array:
        """Coda blocks, final norm, then the tied unembedding."""
        x = _run_blocks(self.coda.blocks, state_values, hooks, batch)
        return self.coda.norm(x) @ self.unembedding()

    def unembedding(self) -> Array:
        return T.transpose(self.tok_embed.weight)
