"""
Adaptive-depth decoding with a per-step KV cache.

Every position runs its own number of core steps: a token stops iterating
once the relative change of its latent row drops below epsilon. Keys and
values of the core are cached per (step, position); when a later token at
step t attends to an earlier one, it reads the newest valid cached step
congruent to t modulo the cache period (latest-m4 lookup), falling back to
the newest valid step.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .backbone import init_state, inject
from .config import RunConfig
from .errors import ConfigError, DataError
from .model import MultimodalModel
from .tensor import Array
from .tokenizer import VOCAB, EncodedSample
from .training import DepthSample, iterate_forward
from .vision import VisualHierarchy

logger = logging.getLogger(__name__)


@dataclass
class ExitPolicy:
    epsilon: float = 1e-2
    min_steps: int = 2
    r_max: int = 32

    @classmethod
    def from_config(cls, cfg: RunConfig, epsilon: Optional[float] = None) -> "ExitPolicy":
        return cls(
            epsilon=cfg.inference.epsilon if epsilon is None else epsilon,
            min_steps=cfg.inference.min_steps,
            r_max=cfg.inference_r_max,
        )

    @classmethod
    def fixed(cls, r: int) -> "ExitPolicy":
        """Always run exactly r steps."""
        return cls(epsilon=0.0, min_steps=min(2, r), r_max=r)


def norm_diff(h_t: np.ndarray, h_prev: np.ndarray) -> float:
    """||h_t - h_prev|| / ||h_t||; +inf when h_t is zero."""
    h_t = np.asarray(h_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_t.shape != h_prev.shape:
        raise ValueError(f"norm_diff shapes differ: {h_t.shape} vs {h_prev.shape}")
    denom = np.linalg.norm(h_t)
    if denom == 0:
        return math.inf
    return float(np.linalg.norm(h_t - h_prev) / denom)


def latest_m4(r: int, validity_column: Sequence[bool], period: int = 4) -> int:
    """
    Pick the cached step a query at step r reads for one earlier token.

    Args:
        r: Current core step (1-based)
        validity_column: validity_column[j - 1] is True when step j is cached
        period: Congruence period P

    Returns:
        r when r < 2; else the largest valid j <= r with j = r (mod P), or
        the newest valid step if no congruent step is valid

    Raises:
        DataError: If r >= 2 and the column has no valid step
    """
    if r < 2:
        return r
    column = np.asarray(validity_column, dtype=bool)
    for j in range(r, 0, -period):
        if j <= column.size and column[j - 1]:
            return j
    valid = np.flatnonzero(column)
    if valid.size == 0:
        raise DataError("Token has no cached steps")
    return int(valid[-1]) + 1


class CacheStore:
    """
    Keys and values for every layer, indexed by (core step, position) in the
    core and by position in the prelude and coda.
    """

    def __init__(self, n_prelude: int, n_core: int, n_coda: int, r_max: int, capacity: int,
                 hidden: int, period: int = 4, dtype=np.float32):
        self.r_max = r_max
        self.capacity = capacity
        self.period = period
        self.prelude_k = np.zeros((n_prelude, capacity, hidden), dtype=dtype)
        self.prelude_v = np.zeros_like(self.prelude_k)
        self.coda_k = np.zeros((n_coda, capacity, hidden), dtype=dtype)
        self.coda_v = np.zeros_like(self.coda_k)
        self.core_k = np.zeros((n_core, r_max, capacity, hidden), dtype=dtype)
        self.core_v = np.zeros_like(self.core_k)
        self.valid = np.zeros((r_max, capacity), dtype=bool)
        self.length = 0

    def mark_valid(self, step: int, lo: int, hi: int) -> None:
        if step > 1 and not self.valid[step - 2, lo:hi].all():
            raise DataError(f"Cache step {step} appended before step {step - 1}")
        self.valid[step - 1, lo:hi] = True

    def is_monotone(self) -> bool:
        # a valid step implies all earlier steps valid
        return bool(np.all(self.valid[1:] <= self.valid[:-1]))

    def exit_steps(self, hi: Optional[int] = None) -> np.ndarray:
        return self.valid[:, :hi if hi is not None else self.length].sum(axis=0)

    def _stack_hooks(self, keys: np.ndarray, values: np.ndarray, lo: int, hi: int):
        hooks = []
        for layer in range(keys.shape[0]):
            def sink(k, v, layer=layer):
                keys[layer, lo:hi] = k
                values[layer, lo:hi] = v
            past = (keys[layer, :lo], values[layer, :lo]) if lo > 0 else None
            hooks.append((past, sink))
        return hooks

    def prelude_hooks(self, lo: int, hi: int):
        return self._stack_hooks(self.prelude_k, self.prelude_v, lo, hi)

    def coda_hooks(self, lo: int, hi: int):
        return self._stack_hooks(self.coda_k, self.coda_v, lo, hi)

    def core_hooks(self, step: int, lo: int, hi: int, lookup: bool):
        """
        Hooks for core step `step` over rows [lo, hi).

        With lookup, earlier positions are read at latest_m4(step, ...);
        otherwise rows [lo, hi) attend only among themselves.
        """
        past_steps = None
        if lookup and lo > 0:
            past_steps = np.array([latest_m4(step, self.valid[:, i], self.period) for i in range(lo)]) - 1
        positions = np.arange(lo)
        hooks = []
        for layer in range(self.core_k.shape[0]):
            def sink(k, v, layer=layer):
                self.core_k[layer, step - 1, lo:hi] = k
                self.core_v[layer, step - 1, lo:hi] = v
            past = None
            if past_steps is not None:
                past = (self.core_k[layer, past_steps, positions], self.core_v[layer, past_steps, positions])
            hooks.append((past, sink))
        return hooks


@dataclass
class TokenTrace:
    position: int
    token_id: int
    exit_step: int
    norm_diffs: List[float] = field(default_factory=list)
    states: Optional[np.ndarray] = None  # iterations x h, when recorded


@dataclass
class GenerationResult:
    token_ids: List[int]
    text: str
    traces: List[TokenTrace]

    @property
    def exit_steps(self) -> List[int]:
        return [t.exit_step for t in self.traces]

    @property
    def first_exit_step(self) -> int:
        return self.traces[0].exit_step if self.traces else 0

    @property
    def mean_steps(self) -> float:
        return float(np.mean(self.exit_steps)) if self.traces else 0.0


class InferenceSession:
    """
    One decoding context: owns its cache, shares the (frozen) model.

    Args:
        model: Trained model
        policy: Exit policy for adaptive decode steps
        seed: Seed of the initial latent state
        capacity: Maximum sequence length (defaults to the model's max_seq_len)
        record_states: Keep every core state for trace export
    """

    def __init__(self, model: MultimodalModel, policy: ExitPolicy, seed: int = 0,
                 capacity: Optional[int] = None, record_states: bool = False,
                 prefill_steps: Optional[int] = None):
        self.model = model
        self.backbone = model.backbone
        self.policy = policy
        self.seed = seed
        self.record_states = record_states
        cfg = self.backbone.cfg
        self.prefill_steps = prefill_steps if prefill_steps is not None else policy.r_max
        if self.prefill_steps < 1:
            raise ConfigError(f"prefill steps must be >= 1, got {self.prefill_steps}")
        if capacity is not None and capacity < 1:
            raise ConfigError(f"cache capacity must be >= 1, got {capacity}")
        self.cache = CacheStore(
            cfg.layers_e, cfg.layers_r, cfg.layers_h,
            r_max=max(policy.r_max, self.prefill_steps),
            capacity=cfg.max_seq_len if capacity is None else capacity,
            hidden=cfg.hidden,
            period=cfg.cache_period,
            dtype=model.backbone.tok_embed.weight.dtype,
        )
        self.hierarchy: Optional[VisualHierarchy] = None
        self.visual_span: Tuple[int, int] = (0, 0)
        self.prefill_states: Optional[np.ndarray] = None
        self.tokens: List[int] = []

    def _check_room(self, n: int) -> None:
        if self.cache.length + n > self.cache.capacity:
            raise ConfigError(f"sequence length {self.cache.length + n} exceeds cache capacity {self.cache.capacity}")

    def prefill(self, token_ids: Sequence[int], hierarchy: Optional[VisualHierarchy], r_fixed: Optional[int] = None) -> Array:
        """
        Run every prompt position together for r_fixed core steps.

        Returns:
            Logits of all prefilled positions
        """
        if r_fixed is None:
            r_fixed = self.prefill_steps
        if not 1 <= r_fixed <= self.cache.r_max:
            raise ConfigError(f"prefill depth {r_fixed} outside [1, {self.cache.r_max}]")
        token_ids = np.asarray(token_ids, dtype=np.int64)
        n = token_ids.shape[0]
        if self.cache.length:
            raise DataError("prefill must run on an empty session")
        self._check_room(n)
        backbone = self.backbone
        cache = self.cache
        with T.no_grad():
            self.hierarchy = hierarchy
            embeddings = backbone.embed(token_ids, hierarchy)
            self.visual_span = embeddings.visual_span
            prelude_out = backbone.run_prelude(embeddings.e, 0, cache.prelude_hooks(0, n))
            schedule = backbone.schedule(r_fixed)
            state = init_state(n, backbone.cfg.hidden, backbone.cfg.state_std, self.seed, start=0)
            states = []
            for t in range(1, r_fixed + 1):
                injected = inject(prelude_out, hierarchy, schedule, t, self.visual_span, gates=backbone.core.gates)
                state = backbone.recurrent_step(state, injected, cache.core_hooks(t, 0, n, lookup=False))
                cache.mark_valid(t, 0, n)
                if self.record_states:
                    states.append(state.values.data.copy())
            logits = backbone.head_logits(state.values, cache.coda_hooks(0, n))
        if self.record_states:
            self.prefill_states = np.stack(states, axis=1) if states else None
        cache.length = n
        self.tokens.extend(int(i) for i in token_ids)
        return logits

    def decode_token(self, token_id: int) -> Tuple[int, TokenTrace, np.ndarray]:
        """
        Feed one token at the next position with adaptive depth.

        Returns:
            (greedy next token, trace of this position, logits row)
        """
        self._check_room(1)
        policy = self.policy
        backbone = self.backbone
        cache = self.cache
        p = cache.length
        with T.no_grad():
            e = backbone.embed_tokens([token_id])
            prelude_out = backbone.run_prelude(e, p, cache.prelude_hooks(p, p + 1))
            schedule = backbone.schedule(policy.r_max)
            state = init_state(1, backbone.cfg.hidden, backbone.cfg.state_std, self.seed, start=p)
            trace = TokenTrace(position=p, token_id=int(token_id), exit_step=0)
            states = []
            previous = None
            for t in range(1, policy.r_max + 1):
                injected = inject(prelude_out, self.hierarchy, schedule, t, self.visual_span,
                                  row_offset=p, gates=backbone.core.gates)
                state = backbone.recurrent_step(state, injected, cache.core_hooks(t, p, p + 1, lookup=True))
                cache.mark_valid(t, p, p + 1)
                current = state.values.data[0]
                if self.record_states:
                    states.append(current.copy())
                trace.exit_step = t
                if previous is not None:
                    delta = norm_diff(current, previous)
                    trace.norm_diffs.append(delta)
                    if t >= policy.min_steps and delta < policy.epsilon:
                        break
                previous = current.copy()
            logits = backbone.head_logits(state.values, cache.coda_hooks(p, p + 1))
        if self.record_states:
            trace.states = np.stack(states)
        cache.length = p + 1
        self.tokens.append(int(token_id))
        row = logits.data[0]
        return int(np.argmax(row)), trace, row

    def generate(self, prompt_ids: Sequence[int], hierarchy: Optional[VisualHierarchy],
                 max_new_tokens: int = 4) -> GenerationResult:
        """
        Prefill all prompt tokens but the last, then decode adaptively until eos.

        The trace of the last prompt token carries the first answer token's exit step.
        """
        prompt_ids = list(prompt_ids)
        if not prompt_ids:
            raise DataError("Prompt is empty")
        if len(prompt_ids) > 1:
            self.prefill(prompt_ids[:-1], hierarchy)
        else:
            self.hierarchy = hierarchy
        generated: List[int] = []
        traces: List[TokenTrace] = []
        token = prompt_ids[-1]
        for _ in range(max_new_tokens):
            if self.cache.length >= self.cache.capacity:
                break
            token, trace, _ = self.decode_token(token)
            traces.append(trace)
            if token == VOCAB.eos_id:
                break
            generated.append(token)
        return GenerationResult(token_ids=generated, text=VOCAB.decode(generated), traces=traces)


def answer_sample(model: MultimodalModel, sample: EncodedSample, image: np.ndarray, policy: ExitPolicy,
                  seed: int = 0, prefill_steps: Optional[int] = None, max_new_tokens: int = 4) -> GenerationResult:
    """Generate an answer for an encoded sample's prompt."""
    with T.no_grad():
        hierarchy = model.encode_image(image)
    session = InferenceSession(model, policy, seed=seed, prefill_steps=prefill_steps)
    return session.generate(sample.token_ids[:sample.prompt_length], hierarchy, max_new_tokens)


def recompute_logits(model: MultimodalModel, token_ids: Sequence[int], image: Optional[np.ndarray],
                     r: int, seed: int = 0) -> np.ndarray:
    """Uncached full-sequence forward at depth r (reference for cache equivalence)."""
    backbone = model.backbone
    with T.no_grad():
        hierarchy = model.encode_image(image) if image is not None else None
        embeddings = backbone.embed(np.asarray(token_ids), hierarchy)
        prelude_out = backbone.run_prelude(embeddings.e)
        state = iterate_forward(backbone, prelude_out, embeddings, hierarchy,
                                DepthSample(r=r, n_no_grad=r, n_grad=0), seed)
        return backbone.head_logits(state.values).data


@dataclass
class TraceRun:
    """Per-step states of every position: positions x iterations x h."""
    states: np.ndarray
    token_ids: List[int]

    @property
    def depth(self) -> int:
        return self.states.shape[1]


def record_trace(model: MultimodalModel, token_ids: Sequence[int], image: Optional[np.ndarray],
                 depth: int, seed: int = 0) -> TraceRun:
    """Prefill a full sequence for `depth` steps keeping every intermediate state."""
    with T.no_grad():
        hierarchy = model.encode_image(image) if image is not None else None
    session = InferenceSession(model, ExitPolicy(epsilon=0.0, min_steps=2, r_max=depth), seed=seed,
                               record_states=True, prefill_steps=depth)
    session.prefill(token_ids, hierarchy, depth)
    return TraceRun(states=session.prefill_states, token_ids=[int(i) for i in token_ids])


def steady_state_distances(run: TraceRun, steady_step: int) -> np.ndarray:
    """positions x iterations matrix of ||s_t - s_T|| per position."""
    if not 1 <= steady_step <= run.depth:
        raise ConfigError(f"steady step {steady_step} beyond recorded depth {run.depth}")
    reference = run.states[:, steady_step - 1:steady_step, :]
    return np.linalg.norm(run.states.astype(np.float64) - reference, axis=-1)


def norm_diff_curves(run: TraceRun) -> np.ndarray:
    """positions x (iterations - 1) matrix of norm_diff between consecutive steps."""
    n, depth, _ = run.states.shape
    return np.array([[norm_diff(run.states[i, t], run.states[i, t - 1]) for t in range(1, depth)]
                     for i in range(n)]).reshape(n, max(depth - 1, 0))


def export_trace(run: TraceRun, steady_step: int, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write the distance-to-steady-state matrix and the norm_diff curves as CSV.

    Returns:
        Paths of the written files keyed by "distances" and "norm_diff"
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distances = steady_state_distances(run, steady_step)
    curves = norm_diff_curves(run)
    paths = {"distances": out_dir / "trace_distances.csv", "norm_diff": out_dir / "trace_norm_diff.csv"}
    _write_matrix(paths["distances"], distances, first_iteration=1)
    _write_matrix(paths["norm_diff"], curves, first_iteration=2)
    logger.info(f"Trace exported: {distances.shape[0]} positions x {distances.shape[1]} iterations -> {out_dir}")
    return paths


def _write_matrix(path: Path, matrix: np.ndarray, first_iteration: int) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["position"] + [str(first_iteration + j) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            writer.writerow([i] + [f"{v:.8g}" for v in row])


def read_matrix(path: Union[str, Path]) -> Tuple[List[int], np.ndarray]:
    """Read a matrix written by export_trace: (iteration indices, values)."""
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    iterations = [int(c) for c in rows[0][1:]]
    values = np.array([[float(v) for v in row[1:]] for row in rows[1:]]).reshape(len(rows) - 1, len(iterations))
    return iterations, values


def trajectory_projection(run: TraceRun) -> np.ndarray:
    """Project every (position, iteration) state onto the top two principal components."""
    n, depth, h = run.states.shape
    flat = run.states.reshape(n * depth, h).astype(np.float64)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return (centered @ vt[:2].T).reshape(n, depth, -1)


def export_trajectories(run: TraceRun, path: Union[str, Path]) -> Path:
    path = Path(path)
    projected = trajectory_projection(run)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["position", "iteration", "pc1", "pc2"])
        for i in range(projected.shape[0]):
            for t in range(projected.shape[1]):
                pcs = list(projected[i, t]) + [0.0] * (2 - projected.shape[2])
                writer.writerow([i, t + 1, f"{pcs[0]:.8g}", f"{pcs[1]:.8g}"])
    return path


def exit_histogram(benchmark: str, exit_steps: Sequence[int], r_max: int) -> Dict[str, object]:
    """histogram[k] counts tokens that exited at step k + 1."""
    counts = np.bincount(np.asarray(exit_steps, dtype=np.int64) - 1, minlength=r_max)[:r_max]
    return {
        "benchmark": benchmark,
        "mean_steps": float(np.mean(exit_steps)) if len(exit_steps) else 0.0,
        "histogram": [int(c) for c in counts],
    }


def write_exit_histograms(path: Union[str, Path], rows: Sequence[Dict[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path

