"""
Stochastic-depth training.

Each optimizer step samples one recurrence depth for the whole batch, runs
the leading core steps without recording a graph and back-propagates only
through the last k_grad steps.
"""

import json
import logging
import math
import queue
import signal
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import tensor as T
from .backbone import Embeddings, LatentState, RecurrentBackbone, InjectionSchedule, init_state, inject
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .config import NUMERIC, RunConfig, TrainConfig
from .errors import CheckpointError, DataError
from .model import MultimodalModel
from .scenes import SyntheticScene
from .tensor import Array, Parameter
from .tokenizer import VOCAB, EncodedSample, encode
from .vision import VisualHierarchy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DepthSample:
    r: int
    n_no_grad: int
    n_grad: int


@dataclass
class DepthDistribution:
    """Poisson depth with a log-normal rate whose mean is r_bar + 1."""
    r_bar: int = 8
    sigma_lambda: float = 0.5
    r_max: int = 32
    k_grad: int = 4
    fixed: Optional[int] = None

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "DepthDistribution":
        return cls(
            r_bar=cfg.model.r_bar,
            sigma_lambda=cfg.train.sigma_lambda,
            r_max=cfg.model.r_max,
            k_grad=cfg.model.k_grad,
            fixed=cfg.train.fixed_depth,
        )


def sample_depth(dist: DepthDistribution, rng: Union[int, np.random.Generator]) -> DepthSample:
    """
    Draw a recurrence depth.

    lambda = exp(ln(r_bar + 1) - sigma^2/2 + sigma * z) with z ~ N(0, 1), so
    E[lambda] = r_bar + 1; r = clamp(Poisson(lambda), 1, r_max).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if dist.fixed is not None:
        r = dist.fixed
    else:
        sigma = dist.sigma_lambda
        z = rng.standard_normal()
        rate = math.exp(math.log(dist.r_bar + 1) - 0.5 * sigma * sigma + sigma * z)
        r = int(min(max(rng.poisson(rate), 1), dist.r_max))
    n_grad = min(r, dist.k_grad)
    return DepthSample(r=r, n_no_grad=r - n_grad, n_grad=n_grad)


def iterate_forward(
    backbone: RecurrentBackbone,
    prelude_out: Array,
    embeddings: Embeddings,
    hierarchy: Optional[VisualHierarchy],
    depth: DepthSample,
    state_seed: int,
    schedule: Optional[InjectionSchedule] = None
) -> LatentState:
    """
    Roll the core forward depth.r steps from a fresh random state.

    The first n_no_grad steps run under no_grad, so their results enter the
    recorded steps as constants. The injection schedule is indexed by the
    absolute step throughout. A stacked batch starts every sequence from the
    same s0 rows.
    """
    cfg = backbone.cfg
    schedule = schedule or backbone.schedule(depth.r)
    batch = embeddings.batch
    state = init_state(prelude_out.shape[0] // batch, cfg.hidden, cfg.state_std, state_seed, batch=batch)
    gates = backbone.core.gates

    def step(i: int, current: LatentState) -> LatentState:
        injected = inject(prelude_out, hierarchy, schedule, i, embeddings.visual_span, gates=gates)
        return backbone.recurrent_step(current, injected, batch=batch)

    with T.no_grad():
        for i in range(1, depth.n_no_grad + 1):
            state = step(i, state)
    for i in range(depth.n_no_grad + 1, depth.r + 1):
        state = step(i, state)
    return state


def masked_ce_loss(logits: Array, token_ids: np.ndarray, target_mask: np.ndarray) -> Array:
    """
    Mean cross-entropy over masked positions; row i - 1 predicts token i.

    Raises:
        DataError: If no position is masked
    """
    rows = np.flatnonzero(np.asarray(target_mask, dtype=bool))
    rows = rows[rows > 0]
    if rows.size == 0:
        raise DataError("Target mask is empty")
    picked = T.gather_rows(logits, rows - 1)
    return T.cross_entropy(picked, np.asarray(token_ids)[rows])


def sample_loss(model: MultimodalModel, sample: EncodedSample, image: np.ndarray,
                depth: DepthSample, state_seed: int) -> Array:
    """Full forward for one sample at the given depth, returning the masked loss."""
    backbone = model.backbone
    hierarchy = model.encode_image(image)
    embeddings = backbone.embed(sample.token_ids, hierarchy)
    prelude_out = backbone.run_prelude(embeddings.e)
    state = iterate_forward(backbone, prelude_out, embeddings, hierarchy, depth, state_seed)
    logits = backbone.head_logits(state.values)
    return masked_ce_loss(logits, sample.token_ids, sample.target_mask)


def pad_batch(samples: Sequence[EncodedSample]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-pad samples to a B x n rectangle of ids and target masks.

    Padding is appended after each sequence, so under causal attention the
    real positions never see it and it is never a target.
    """
    if not samples:
        raise DataError("Batch is empty")
    n = max(len(s.token_ids) for s in samples)
    ids = np.full((len(samples), n), VOCAB.pad_id, dtype=np.int64)
    mask = np.zeros((len(samples), n), dtype=bool)
    for b, s in enumerate(samples):
        ids[b, :len(s.token_ids)] = s.token_ids
        mask[b, :len(s.target_mask)] = s.target_mask
    return ids, mask


def batch_loss(model: MultimodalModel, samples: Sequence[EncodedSample], images: Sequence[np.ndarray],
               depth: DepthSample, state_seed: int) -> Array:
    """
    One stacked forward over the whole batch; returns the mean of the per-sample losses.

    Equal to averaging sample_loss over the batch, but every layer runs once
    on (B * n) x h rows.
    """
    if len(samples) != len(images):
        raise DataError(f"{len(samples)} samples but {len(images)} images")
    backbone = model.backbone
    batch = len(samples)
    ids, mask = pad_batch(samples)
    n = ids.shape[1]
    hierarchy = model.encode_images(images)
    embeddings = backbone.embed(ids, hierarchy)
    prelude_out = backbone.run_prelude(embeddings.e, batch=batch)
    state = iterate_forward(backbone, prelude_out, embeddings, hierarchy, depth, state_seed)
    logits = backbone.head_logits(state.values, batch=batch)
    total = None
    for b in range(batch):
        loss = masked_ce_loss(T.slice_rows(logits, b * n, (b + 1) * n), ids[b], mask[b])
        total = loss if total is None else total + loss
    return T.scale(total, 1.0 / batch)


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               beta1: float, beta2: float, weight_decay: float, eps: float = NUMERIC.adam_eps) -> None:
    """In-place bias-corrected AdamW update with decoupled weight decay."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)


class AdamW:
    def __init__(self, named_params: Sequence[Tuple[str, Parameter]], beta1: float = 0.9,
                 beta2: float = 0.95, weight_decay: float = 1e-3, eps: float = NUMERIC.adam_eps):
        self.params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> bool:
        """
        Apply one update from the parameters' accumulated gradients.

        Returns:
            False if the step was skipped because a gradient was non-finite
        """
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            logger.warning(f"Non-finite gradients; optimizer step skipped ({self.skipped} so far)")
            return False
        self.t += 1
        for (name, p), g in zip(self.params, grads):
            adamw_step(p.data, g, self.m[name], self.v[name], self.t, lr,
                       self.beta1, self.beta2, self.weight_decay, self.eps)
        return True

    def state_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "skipped": self.skipped, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.t = int(state["t"])
        self.skipped = int(state["skipped"])
        for moment, target in (("m", self.m), ("v", self.v)):
            stored = state.get(moment, {})
            for name in target:
                if name not in stored:
                    raise CheckpointError(f"Optimizer state lacks {moment} for {name}")
                target[name][...] = stored[name]


def cosine_lr(step: int, total_steps: int, peak: float, floor_ratio: float = 0.1) -> float:
    """Cosine decay from peak at step 0 to floor_ratio * peak at total_steps."""
    if total_steps <= 0:
        return peak
    progress = min(max(step / total_steps, 0.0), 1.0)
    floor = floor_ratio * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class PreparedBatch:
    step: int
    samples: List[EncodedSample]
    images: List[np.ndarray]
    depth: DepthSample
    state_seed: int


class BatchPrefetcher:
    """
    Prepare batches on a background thread into a bounded queue.

    Batches come out in step order; an exception raised by make_batch is
    re-raised in the consumer.
    """

    _DONE = object()

    def __init__(self, make_batch: Callable[[int], Any], start: int, stop: int, depth: int = 4):
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=max(1, depth))
        self._stop_event = threading.Event()
        self._thread = threading.Thread(target=self._fill, args=(make_batch, start, stop), daemon=True)
        self._thread.start()

    def _put(self, item: Any) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _fill(self, make_batch: Callable[[int], Any], start: int, stop: int) -> None:
        try:
            for step in range(start, stop):
                if not self._put(make_batch(step)):
                    return
        except Exception as e:
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self) -> Iterator[Any]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self) -> None:
        self._stop_event.set()
        self._thread.join(timeout=5)


@dataclass
class StageResult:
    stage: int
    checkpoint: Path
    metrics: Path
    steps_completed: int
    final_loss: float
    interrupted: bool = False


class Trainer:
    """Runs training stages for one run directory."""

    def __init__(self, cfg: RunConfig, output_dir: Union[str, Path], progress: bool = True):
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.progress = progress
        self.should_stop = False
        self.stats = {"steps": 0, "skipped": 0, "checkpoints": 0}

    def signal_handler(self, signum, frame):
        logger.info("Received shutdown signal. Saving checkpoint and stopping...")
        self.should_stop = True

    def stage_dir(self, stage: int) -> Path:
        return self.output_dir / f"stage{stage}"

    def checkpoint_path(self, stage: int) -> Path:
        return self.stage_dir(stage) / "model.ckpt"

    def _install_signal_handlers(self) -> Dict[int, Any]:
        previous = {}
        if threading.current_thread() is threading.main_thread():
            for sig in (signal.SIGINT, signal.SIGTERM):
                previous[sig] = signal.signal(sig, self.signal_handler)
        return previous

    def _encode(self, scenes: Sequence[SyntheticScene]) -> List[EncodedSample]:
        n_v = self.cfg.vision.n_visual_tokens
        supervise = self.cfg.data.supervise_question
        return [encode(s.question, s.answer, n_v, supervise_question=supervise) for s in scenes]

    def _make_batch_fn(self, stage: int, samples: List[EncodedSample],
                       scenes: Sequence[SyntheticScene]) -> Callable[[int], PreparedBatch]:
        dist = DepthDistribution.from_config(self.cfg)
        batch_size = self.cfg.train.batch_size
        seed = self.cfg.seed

        def make_batch(step: int) -> PreparedBatch:
            rng = np.random.default_rng([seed, stage, step])
            index = rng.choice(len(samples), size=batch_size, replace=len(samples) < batch_size)
            depth = sample_depth(dist, rng)
            return PreparedBatch(
                step=step,
                samples=[samples[i] for i in index],
                images=[scenes[i].image for i in index],
                depth=depth,
                state_seed=int(rng.integers(2 ** 31)),
            )

        return make_batch

    def train_step(self, model: MultimodalModel, optimizer: AdamW, batch: PreparedBatch, lr: float) -> Tuple[float, bool]:
        """One stacked forward and backward over the batch, then one optimizer step."""
        loss = batch_loss(model, batch.samples, batch.images, batch.depth, batch.state_seed)
        loss.backward()
        applied = optimizer.step(lr)
        model.zero_grad()
        return loss.item(), applied

    def run_stage(self, stage: int, train_scenes: Sequence[SyntheticScene],
                  checkpoint_in: Optional[Union[str, Path]] = None, resume: bool = False) -> StageResult:
        """
        Train one stage and write its checkpoint and metrics.

        Args:
            stage: 1, 2 or 3
            train_scenes: Training split
            checkpoint_in: Weights to start from (required for stages after the first)
            resume: Continue from this stage's partial checkpoint if present

        Returns:
            StageResult

        Raises:
            CheckpointError: If a later stage has no input checkpoint
        """
        stage_cfg = self.cfg.train.stage_config(stage)
        if stage > 1 and checkpoint_in is None:
            raise CheckpointError(f"Stage {stage} needs the checkpoint of stage {stage - 1}")
        if not train_scenes:
            raise DataError("Training split is empty")

        stage_dir = self.stage_dir(stage)
        stage_dir.mkdir(parents=True, exist_ok=True)
        partial_path = stage_dir / "partial.ckpt"
        metrics_path = stage_dir / "metrics.jsonl"

        model = MultimodalModel(self.cfg)
        if checkpoint_in is not None:
            load_into(model, read_checkpoint(checkpoint_in))
        model.freeze_except(stage_cfg.trainable)
        trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        tc: TrainConfig = self.cfg.train
        optimizer = AdamW(trainable, tc.beta1, tc.beta2, tc.weight_decay)

        start_step = 0
        if resume and partial_path.exists():
            data = read_checkpoint(partial_path)
            load_into(model, data)
            optimizer.load_state_dict({**data.header["optimizer"], **data.optimizer})
            start_step = data.step
            logger.info(f"Resuming stage {stage} from step {start_step}")
            self._truncate_metrics(metrics_path, start_step)
        elif metrics_path.exists():
            metrics_path.unlink()

        samples = self._encode(train_scenes)
        peak = tc.peak_lr * stage_cfg.lr_scale
        logger.info(f"Stage {stage}: {stage_cfg.steps} steps, trainable={stage_cfg.trainable} "
                    f"({sum(p.size for _, p in trainable):,} of {model.num_parameters():,} parameters), peak lr {peak:g}")

        previous_handlers = self._install_signal_handlers()
        prefetcher = BatchPrefetcher(self._make_batch_fn(stage, samples, train_scenes),
                                     start_step, stage_cfg.steps, tc.prefetch)
        step = start_step
        loss = float("nan")
        try:
            with metrics_path.open("a", encoding="utf-8") as metrics_file:
                bar = tqdm(total=stage_cfg.steps, initial=start_step, desc=f"stage {stage}",
                           disable=not self.progress)
                for batch in prefetcher:
                    t0 = time.perf_counter()
                    lr = cosine_lr(batch.step, stage_cfg.steps, peak)
                    loss, applied = self.train_step(model, optimizer, batch, lr)
                    step = batch.step + 1
                    self.stats["steps"] += 1
                    if not applied:
                        self.stats["skipped"] += 1
                    row = {
                        "stage": stage, "step": step, "loss": loss, "lr": lr,
                        "r": batch.depth.r, "n_grad": batch.depth.n_grad,
                        "skipped": not applied, "wall_ms": (time.perf_counter() - t0) * 1000.0,
                    }
                    metrics_file.write(json.dumps(row) + "\n")
                    bar.update(1)
                    if step % tc.log_every == 0:
                        logger.info(f"stage {stage} step {step}: loss {loss:.4f} lr {lr:.3g} r {batch.depth.r}")
                    if step % tc.checkpoint_every == 0 and step < stage_cfg.steps:
                        metrics_file.flush()
                        self._save_partial(partial_path, model, stage, step, optimizer)
                    if self.should_stop:
                        break
                bar.close()
        finally:
            prefetcher.close()
            for sig, handler in previous_handlers.items():
                signal.signal(sig, handler)

        if self.should_stop and step < stage_cfg.steps:
            self._save_partial(partial_path, model, stage, step, optimizer)
            logger.info(f"Stage {stage} interrupted at step {step}; resume with --resume")
            return StageResult(stage, partial_path, metrics_path, step, loss, interrupted=True)

        final_path = save_checkpoint(self.checkpoint_path(stage), model, stage, step)
        self.stats["checkpoints"] += 1
        if partial_path.exists():
            partial_path.unlink()
        logger.info(f"Stage {stage} complete: {step} steps, final loss {loss:.4f}, "
                    f"{optimizer.skipped} skipped -> {final_path}")
        return StageResult(stage, final_path, metrics_path, step, loss)

    def _save_partial(self, path: Path, model: MultimodalModel, stage: int, step: int, optimizer: AdamW) -> None:
        save_checkpoint(path, model, stage, step, optimizer_state=optimizer.state_dict())
        self.stats["checkpoints"] += 1

    @staticmethod
    def _truncate_metrics(path: Path, steps: int) -> None:
        if not path.exists():
            return
        lines = path.read_text(encoding="utf-8").splitlines()[:steps]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    def run(self, train_scenes: Sequence[SyntheticScene], stages: Optional[Sequence[int]] = None,
            checkpoint_in: Optional[Union[str, Path]] = None, resume: bool = False) -> List[StageResult]:
        """Run stages in order, each starting from the previous stage's checkpoint."""
        stages = list(stages or [s.stage for s in self.cfg.train.stages])
        results = []
        current = checkpoint_in
        for stage in stages:
            if current is None and stage > 1:
                previous = self.checkpoint_path(stage - 1)
                current = previous if previous.exists() else None
            result = self.run_stage(stage, train_scenes, current, resume=resume)
            results.append(result)
            if result.interrupted:
                break
            current = result.checkpoint
        logger.info(f"Training summary: {len(results)} stage(s), {self.stats['steps']} steps, "
                    f"{self.stats['skipped']} skipped, {self.stats['checkpoints']} checkpoints written")
        return results
