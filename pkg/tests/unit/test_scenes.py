"""
Test suite for synthetic scene generation and dataset files
"""

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from looped_vlm.config import DataConfig
from looped_vlm.errors import ConfigError, DataError
from looped_vlm.scenes import (COLOR_CODES, EMPTY_CODE, GRID_CELLS, MAX_OBJECTS, SyntheticScene,
                               build_dataset, build_split, check_disjoint, generate_scene, load_image,
                               load_manifest, load_split, regenerate_from_manifest, stratified_kinds)


@pytest.mark.unit
class TestGenerateScene:
    """Test cases for generate_scene"""

    def test_deterministic(self):
        """Test that a seed always yields the same scene"""
        a = generate_scene(11, "global_count", 16)
        b = generate_scene(11, "global_count", 16)
        assert np.array_equal(a.image, b.image)
        assert (a.question, a.answer, a.objects) == (b.question, b.answer, b.objects)

    def test_image_shape_and_dtype(self):
        """Test the CHW uint8 layout"""
        scene = generate_scene(3, "local_attribute", 32)
        assert scene.image.shape == (3, 32, 32)
        assert scene.image.dtype == np.uint8
        assert 0.0 <= scene.pixels().min() and scene.pixels().max() <= 1.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10 ** 6))
    def test_count_answer_matches_objects(self, seed):
        """Test that the count answer equals the number of matching objects"""
        scene = generate_scene(seed, "global_count", 16)
        words = scene.question.rstrip("?").split()
        color, shape = words[2], words[3][:-1]
        expected = sum(1 for s, c, _, _ in scene.objects if (s, c) == (shape, color))
        assert scene.answer == str(expected)
        assert 1 <= len(scene.objects) <= MAX_OBJECTS
        assert len({(r, k) for _, _, r, k in scene.objects}) == len(scene.objects)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10 ** 6))
    def test_attribute_answer_matches_cell(self, seed):
        """Test that the colour answer names the object in the asked cell or reports empty"""
        scene = generate_scene(seed, "local_attribute", 16)
        words = scene.question.rstrip("?").split()
        row, col = int(words[4]), int(words[6])
        assert 0 <= row < GRID_CELLS and 0 <= col < GRID_CELLS
        found = [c for _, c, r, k in scene.objects if (r, k) == (row, col)]
        assert scene.answer == (COLOR_CODES[found[0]] if found else EMPTY_CODE)

    def test_unknown_kind(self):
        """Test that an unknown task kind is rejected"""
        with pytest.raises(ConfigError):
            generate_scene(0, "ocr", 16)

    def test_record_round_trip_and_malformed(self):
        """Test JSON records and the error on a broken one"""
        scene = generate_scene(5, "global_count", 16)
        back = SyntheticScene.from_record(json.loads(json.dumps(scene.to_record())))
        assert np.array_equal(back.image, scene.image)
        assert back.objects == scene.objects
        with pytest.raises(DataError):
            SyntheticScene.from_record({"seed": 1})


@pytest.mark.unit
class TestSplits:
    """Test cases for stratification and split files"""

    def test_stratified_counts_exact(self):
        """Test largest-remainder counts"""
        kinds = stratified_kinds(7, seed=0, mix={"global_count": 0.5, "local_attribute": 0.5})
        counts = Counter(kinds)
        assert sum(counts.values()) == 7
        assert sorted(counts.values()) == [3, 4]
        skewed = Counter(stratified_kinds(10, 1, {"global_count": 0.7, "local_attribute": 0.3}))
        assert skewed == {"global_count": 7, "local_attribute": 3}

    def test_stratified_rejects_bad_mix(self):
        """Test that proportions must sum to one"""
        with pytest.raises(ConfigError):
            stratified_kinds(4, 0, {"global_count": 0.6, "local_attribute": 0.6})

    def test_build_split_keeps_seed_order(self):
        """Test that parallel generation returns scenes in seed order"""
        scenes = build_split(6, 100, {"global_count": 0.5, "local_attribute": 0.5}, image_size=16, workers=3)
        assert [s.seed for s in scenes] == list(range(100, 106))

    def test_check_disjoint(self):
        """Test overlapping seed ranges are refused"""
        check_disjoint({"train": (0, 10), "eval": (10, 20)})
        with pytest.raises(DataError):
            check_disjoint({"train": (0, 10), "eval": (5, 20)})


@pytest.mark.unit
class TestDataset:
    """Test cases for dataset files and the manifest"""

    def setup_method(self):
        """Set up test fixtures"""
        self.data = DataConfig(train_size=6, eval_size=4, calib_size=2, train_seed_start=0,
                               eval_seed_start=100, calib_seed_start=200, workers=2)

    def test_build_and_load(self, temp_dir):
        """Test the manifest contents and reloading a split"""
        manifest = build_dataset(self.data, 16, temp_dir, progress=False)
        assert set(manifest["splits"]) == {"train", "eval", "calib"}
        assert manifest["splits"]["train"]["size"] == 6
        assert load_manifest(temp_dir / "manifest.json") == manifest
        scenes = load_split(temp_dir / "train.jsonl")
        assert [s.seed for s in scenes] == list(range(6))

    def test_refuses_overwrite_without_force(self, temp_dir):
        """Test that an existing dataset is kept unless forced"""
        build_dataset(self.data, 16, temp_dir, progress=False)
        with pytest.raises(DataError):
            build_dataset(self.data, 16, temp_dir, progress=False)
        build_dataset(self.data, 16, temp_dir, force=True, progress=False)

    def test_regenerate_is_byte_identical(self, temp_dir):
        """Test that the manifest reproduces identical split files"""
        manifest = build_dataset(self.data, 16, temp_dir / "a", progress=False)
        again = regenerate_from_manifest(manifest, temp_dir / "b")
        for name in ("train", "eval", "calib"):
            assert again["splits"][name]["sha256"] == manifest["splits"][name]["sha256"]
            assert (temp_dir / "a" / f"{name}.jsonl").read_bytes() == (temp_dir / "b" / f"{name}.jsonl").read_bytes()

    def test_load_image(self, temp_dir):
        """Test reading and resizing a user image and rejecting a broken one"""
        path = temp_dir / "img.png"
        Image.new("RGB", (40, 20), (255, 0, 0)).save(path)
        pixels = load_image(path, 16)
        assert pixels.shape == (3, 16, 16)
        assert pixels[0].min() == 255
        bad = temp_dir / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(DataError):
            load_image(bad, 16)
