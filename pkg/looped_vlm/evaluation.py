"""
Evaluation sweeps: exact-match accuracy against recurrence depth, the variant
comparison table, first-token exit statistics and epsilon calibration.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .config import TASK_KINDS
from .inference import ExitPolicy, GenerationResult, answer_sample
from .model import MultimodalModel
from .scenes import SyntheticScene
from .tokenizer import encode

logger = logging.getLogger(__name__)


def _run_all(model: MultimodalModel, scenes: Sequence[SyntheticScene], policy: ExitPolicy, seed: int,
             prefill_steps: Optional[int], workers: int, progress: bool, desc: str) -> List[GenerationResult]:
    n_v = model.cfg.vision.n_visual_tokens
    max_new = model.cfg.inference.max_new_tokens

    def run(scene: SyntheticScene) -> GenerationResult:
        sample = encode(scene.question, scene.answer, n_v)
        return answer_sample(model, sample, scene.image, policy, seed=seed,
                             prefill_steps=prefill_steps, max_new_tokens=max_new)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        # map keeps results in sample order
        return list(tqdm(executor.map(run, scenes), total=len(scenes), desc=desc, disable=not progress))


def evaluate_accuracy(model: MultimodalModel, scenes: Sequence[SyntheticScene], r_list: Sequence[int],
                      seed: int = 0, workers: int = 4, progress: bool = False) -> List[Dict[str, Any]]:
    """
    Exact-match accuracy at each fixed depth (cache on, early exit off).

    Returns:
        One row per r: {"r", "accuracy", "n", "by_kind": {task_kind: accuracy}}
    """
    rows = []
    for r in r_list:
        results = _run_all(model, scenes, ExitPolicy.fixed(r), seed, r, workers, progress, f"eval r={r}")
        correct = [res.text == scene.answer for res, scene in zip(results, scenes)]
        by_kind = {}
        for kind in TASK_KINDS:
            hits = [c for c, s in zip(correct, scenes) if s.task_kind == kind]
            if hits:
                by_kind[kind] = float(np.mean(hits))
        accuracy = float(np.mean(correct)) if correct else 0.0
        rows.append({"r": r, "accuracy": accuracy, "n": len(scenes), "by_kind": by_kind})
        logger.info(f"r={r}: accuracy {accuracy:.4f} over {len(scenes)} samples")
    return rows


def compare_variants(models: Mapping[str, MultimodalModel], scenes: Sequence[SyntheticScene],
                     r_list: Sequence[int], seed: int = 0, workers: int = 4,
                     progress: bool = False) -> List[Dict[str, Any]]:
    """Accuracy rows for several models, tagged with their label."""
    table = []
    for label, model in models.items():
        for row in evaluate_accuracy(model, scenes, r_list, seed, workers, progress):
            table.append({"variant": label, **row})
    return table


def first_token_exit_steps(model: MultimodalModel, scenes: Sequence[SyntheticScene], policy: ExitPolicy,
                           seed: int = 0, prefill_steps: Optional[int] = None, workers: int = 4,
                           progress: bool = False) -> List[int]:
    """Exit step of the first answer token for each scene."""
    results = _run_all(model, scenes, policy, seed, prefill_steps, workers, progress, "exit steps")
    return [res.first_exit_step for res in results]


def calibrate_epsilon(model: MultimodalModel, calib_scenes: Sequence[SyntheticScene],
                      grid: Sequence[float], r_max: int, min_steps: int = 2, target_fraction: float = 0.5,
                      seed: int = 0, prefill_steps: Optional[int] = None, workers: int = 4) -> float:
    """
    Smallest epsilon in the grid for which at least target_fraction of first
    tokens exit before r_max; the largest grid value if none does.
    """
    grid = sorted(grid)
    for epsilon in grid:
        policy = ExitPolicy(epsilon=epsilon, min_steps=min_steps, r_max=r_max)
        steps = first_token_exit_steps(model, calib_scenes, policy, seed, prefill_steps, workers)
        fraction = float(np.mean([s < r_max for s in steps])) if steps else 0.0
        logger.info(f"calibration: epsilon {epsilon:g} -> {fraction:.2%} early exits")
        if fraction >= target_fraction:
            return epsilon
    logger.warning(f"No epsilon reached {target_fraction:.0%} early exits; using {grid[-1]:g}")
    return grid[-1]


def format_table(rows: Sequence[Mapping[str, Any]]) -> str:
    """Aligned text table of accuracy rows (with an optional variant column)."""
    kinds = sorted({k for row in rows for k in row.get("by_kind", {})})
    headers = (["variant"] if any("variant" in row for row in rows) else []) + ["r", "accuracy"] + kinds
    body = []
    for row in rows:
        cells = [str(row["variant"])] if "variant" in headers else []
        cells += [str(row["r"]), f"{row['accuracy']:.4f}"]
        cells += [f"{row['by_kind'][k]:.4f}" if k in row.get("by_kind", {}) else "-" for k in kinds]
        body.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in body]
    return "\n".join(lines) + "\n"


def write_results(rows: Sequence[Mapping[str, Any]], out_dir: Union[str, Path], name: str = "accuracy") -> Dict[str, Path]:
    """Write rows as <name>.json and <name>.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    text_path = out_dir / f"{name}.txt"
    json_path.write_text(json.dumps(list(rows), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text_path.write_text(format_table(rows), encoding="utf-8")
    return {"json": json_path, "text": text_path}
