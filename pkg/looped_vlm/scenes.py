"""
Synthetic visual question answering scenes.

Each scene is a dark canvas split into a 4x4 grid of cells holding one to six
coloured shapes. Two question kinds are generated: global_count ("how many
red squares?") needs the whole scene, local_attribute ("what color at row 1
col 2?") needs one cell. Everything is a pure function of the seed.
"""

import base64
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from tqdm import tqdm

from .config import TASK_KINDS, DataConfig
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "scenes-1"
GRID_CELLS = 4
MAX_OBJECTS = 6
SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue")
COLOR_CODES = {"red": "r", "green": "g", "blue": "b"}
EMPTY_CODE = "n"
BACKGROUND = (16, 16, 16)
RGB = {"red": (220, 40, 40), "green": (40, 200, 40), "blue": (40, 80, 230)}
SPLITS = ("train", "eval", "calib")

SceneObject = Tuple[str, str, int, int]


@dataclass
class SyntheticScene:
    """A rendered scene with its question and answer."""
    image: np.ndarray  # uint8, C x H x W
    objects: List[SceneObject]
    question: str
    answer: str
    seed: int
    task_kind: str

    def to_record(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "task_kind": self.task_kind,
            "question": self.question,
            "answer": self.answer,
            "objects": [list(o) for o in self.objects],
            "image_shape": list(self.image.shape),
            "image": base64.b64encode(np.ascontiguousarray(self.image).tobytes()).decode("ascii"),
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "SyntheticScene":
        try:
            raw = base64.b64decode(record["image"])
            image = np.frombuffer(raw, dtype=np.uint8).reshape(record["image_shape"]).copy()
            objects = [(str(s), str(c), int(r), int(k)) for s, c, r, k in record["objects"]]
            return cls(image=image, objects=objects, question=record["question"],
                       answer=record["answer"], seed=int(record["seed"]), task_kind=record["task_kind"])
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"Malformed scene record: {e}")

    def pixels(self) -> np.ndarray:
        """Image as float values in [0, 1]."""
        return self.image.astype(np.float32) / 255.0


def _render(objects: Sequence[SceneObject], image_size: int) -> np.ndarray:
    img = Image.new("RGB", (image_size, image_size), BACKGROUND)
    draw = ImageDraw.Draw(img)
    cell = image_size // GRID_CELLS
    margin = max(1, cell // 8)
    for shape, color, row, col in objects:
        x0, y0 = col * cell + margin, row * cell + margin
        x1, y1 = (col + 1) * cell - 1 - margin, (row + 1) * cell - 1 - margin
        fill = RGB[color]
        if shape == "square":
            draw.rectangle([x0, y0, x1, y1], fill=fill)
        elif shape == "circle":
            draw.ellipse([x0, y0, x1, y1], fill=fill)
        else:
            draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=fill)
    return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy()


def generate_scene(seed: int, task_kind: str, image_size: int = 32) -> SyntheticScene:
    """
    Generate one scene and its question.

    Args:
        seed: Scene seed; the result is a pure function of (seed, task_kind, image_size)
        task_kind: "global_count" or "local_attribute"
        image_size: Square canvas size in pixels (multiple of 4)

    Returns:
        SyntheticScene
    """
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"Unknown task kind: {task_kind}")
    rng = np.random.default_rng(seed)
    cells = rng.permutation(GRID_CELLS * GRID_CELLS)
    combos = [(s, c) for s in SHAPES for c in COLORS]

    if task_kind == "global_count":
        target_shape, target_color = combos[rng.integers(len(combos))]
        k = int(rng.integers(0, MAX_OBJECTS + 1))
        total = int(rng.integers(max(1, k), MAX_OBJECTS + 1))
        others = [c for c in combos if c != (target_shape, target_color)]
        objects = []
        for i in range(total):
            shape, color = (target_shape, target_color) if i < k else others[rng.integers(len(others))]
            objects.append((shape, color, int(cells[i] // GRID_CELLS), int(cells[i] % GRID_CELLS)))
        question = f"how many {target_color} {target_shape}s?"
        answer = str(k)
    else:
        total = int(rng.integers(1, MAX_OBJECTS + 1))
        objects = []
        for i in range(total):
            shape, color = combos[rng.integers(len(combos))]
            objects.append((shape, color, int(cells[i] // GRID_CELLS), int(cells[i] % GRID_CELLS)))
        # three in four questions point at an occupied cell
        if rng.random() < 0.75:
            cell = int(cells[rng.integers(total)])
        else:
            cell = int(cells[rng.integers(total, GRID_CELLS * GRID_CELLS)])
        row, col = cell // GRID_CELLS, cell % GRID_CELLS
        found = [c for _, c, r, k in objects if (r, k) == (row, col)]
        question = f"what color at row {row} col {col}?"
        answer = COLOR_CODES[found[0]] if found else EMPTY_CODE

    return SyntheticScene(
        image=_render(objects, image_size),
        objects=objects,
        question=question,
        answer=answer,
        seed=int(seed),
        task_kind=task_kind,
    )


def stratified_kinds(n: int, seed: int, mix: Mapping[str, float]) -> List[str]:
    """Assign task kinds to n samples with exact largest-remainder counts, shuffled by seed."""
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"Mix proportions must sum to 1, got {total}")
    kinds = [k for k in TASK_KINDS if mix.get(k, 0.0) > 0]
    exact = {k: n * mix[k] for k in kinds}
    counts = {k: int(np.floor(exact[k])) for k in kinds}
    leftover = n - sum(counts.values())
    for k in sorted(kinds, key=lambda k: (counts[k] - exact[k], TASK_KINDS.index(k)))[:leftover]:
        counts[k] += 1
    assigned = [k for k in kinds for _ in range(counts[k])]
    order = np.random.default_rng(seed).permutation(n)
    return [assigned[i] for i in order]


def build_split(n: int, seed: int, mix: Mapping[str, float], image_size: int = 32,
                workers: int = 4, progress: bool = False) -> List[SyntheticScene]:
    """
    Generate n scenes with seeds seed..seed+n-1 and an exact task mix.

    Generation fans out over a thread pool; results keep seed order.
    """
    kinds = stratified_kinds(n, seed, mix)
    seeds = range(seed, seed + n)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        scenes = executor.map(lambda args: generate_scene(args[0], args[1], image_size), zip(seeds, kinds))
        return list(tqdm(scenes, total=n, desc=f"scenes@{seed}", disable=not progress))


def check_disjoint(ranges: Mapping[str, Tuple[int, int]]) -> None:
    """Raise DataError if any two non-empty seed ranges overlap."""
    names = sorted(ranges)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            (a0, a1), (b0, b1) = ranges[a], ranges[b]
            if a1 > a0 and b1 > b0 and a0 < b1 and b0 < a1:
                raise DataError(f"Seed ranges overlap: {a}=[{a0},{a1}) and {b}=[{b0},{b1})")


def write_split(scenes: Sequence[SyntheticScene], path: Path) -> str:
    """Write scenes as JSONL and return the file's sha256."""
    lines = [json.dumps(s.to_record(), sort_keys=True) for s in scenes]
    payload = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_split(path: Union[str, Path]) -> List[SyntheticScene]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file not found: {path}")
    scenes = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}")
            scenes.append(SyntheticScene.from_record(record))
    return scenes


def _write_splits(ranges: Mapping[str, Tuple[int, int]], mix: Mapping[str, float], image_size: int,
                  out_dir: Path, workers: int, progress: bool) -> Dict[str, Any]:
    check_disjoint(ranges)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name in SPLITS:
        start, stop = ranges[name]
        scenes = build_split(stop - start, start, mix, image_size, workers, progress)
        file_name = f"{name}.jsonl"
        digest = write_split(scenes, out_dir / file_name)
        counts = {k: sum(1 for s in scenes if s.task_kind == k) for k in TASK_KINDS}
        splits[name] = {"file": file_name, "seed_start": start, "size": stop - start,
                        "counts": counts, "sha256": digest}
        logger.info(f"Wrote {name} split: {stop - start} scenes -> {out_dir / file_name}")
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "image_size": image_size,
        "mix": dict(mix),
        "splits": splits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def build_dataset(data: DataConfig, image_size: int, out_dir: Union[str, Path],
                  force: bool = False, progress: bool = False) -> Dict[str, Any]:
    """
    Build train/eval/calib splits and their manifest under out_dir.

    Raises:
        DataError: If output exists without force, or seed ranges overlap
    """
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise DataError(f"Dataset already exists at {out_dir}; pass --force to overwrite")
    return _write_splits(data.seed_ranges(), data.mix, image_size, out_dir, data.workers, progress)


def load_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read manifest {path}: {e}")


def regenerate_from_manifest(manifest: Mapping[str, Any], out_dir: Union[str, Path],
                             workers: int = 4) -> Dict[str, Any]:
    """Rebuild every split described by a manifest; the files come out byte-identical."""
    if manifest.get("generator_version") != GENERATOR_VERSION:
        raise DataError(f"Manifest generator {manifest.get('generator_version')} != {GENERATOR_VERSION}")
    ranges = {name: (s["seed_start"], s["seed_start"] + s["size"]) for name, s in manifest["splits"].items()}
    return _write_splits(ranges, manifest["mix"], manifest["image_size"], Path(out_dir), workers, False)


def load_image(path: Union[str, Path], image_size: int) -> np.ndarray:
    """
    Read an image file as uint8 C x H x W, resized to image_size.

    Raises:
        DataError: If the file is missing or not an image
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((image_size, image_size))
            return np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy()
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"Cannot read image {path}: {e}")
