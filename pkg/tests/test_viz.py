#!/usr/bin/env python3
"""
Attention-map post-processing and export.
"""

from dataclasses import replace

import numpy as np
import pytest

from clan.data import Sample, read_image_ppm
from clan.errors import UsageError
from clan.model import build_model
from clan.viz import attention_images, export_attention, normalize_map, overlay, upsample_map


@pytest.fixture
def sample(rng):
    return Sample(image=rng.uniform(0.0, 1.0, size=(3, 8, 8)), label=0, patch_location=(0, 0))


class TestMapProcessing:
    """Test attention-map normalisation, upsampling and blending."""

    def test_normalize_spans_unit_interval(self, rng):
        """Test that min-max normalisation spans [0, 1]."""
        normalised = normalize_map(rng.normal(size=(4, 4)))
        assert normalised.min() == 0.0 and normalised.max() == 1.0, "Map should span [0, 1]"

    def test_constant_map_becomes_zeros(self):
        """Test that a constant map normalises to zeros."""
        assert np.array_equal(normalize_map(np.full((2, 2), 0.3)), np.zeros((2, 2)))

    def test_nearest_upsample(self):
        """Test that each map cell becomes a factor × factor block."""
        grown = upsample_map(np.array([[0.0, 1.0], [0.5, 0.25]]), 4)
        assert grown[:2, :2].tolist() == [[0.0, 0.0], [0.0, 0.0]]
        assert grown[2:, 2:].tolist() == [[0.25, 0.25], [0.25, 0.25]]

    def test_overlay_is_even_blend(self):
        """Test that the overlay is 0.5·image + 0.5·map."""
        blended = overlay(np.ones((3, 2, 2)), np.zeros((2, 2)))
        assert np.all(blended == 0.5)


class TestExport:
    """Test exporting attention maps as PPM files."""

    def test_fresh_model_warns_on_constant_map(self, tiny_model_config, sample, caplog):
        """Test that a zero CLSA kernel logs a constant-map warning."""
        images = attention_images(build_model(tiny_model_config, seed=0), sample)
        assert sorted(images) == [1, 2]
        assert all(m.shape == (8, 8) for m in images.values())
        assert "constant" in caplog.text, "A constant map should be logged as a warning"

    def test_files_decode_back(self, tiny_model_config, sample, tmp_path):
        """Test the exported file names and that the attention PPM spans [0, 1]."""
        model = build_model(tiny_model_config, seed=0)
        model.clsa[1].kernel.data = np.random.default_rng(0).normal(size=model.clsa[1].kernel.shape)
        paths = export_attention(model, sample, 7, tmp_path)
        assert [p.name for p in paths] == [
            'sample0007_image.ppm',
            'sample0007_s1_attention.ppm', 'sample0007_s1_overlay.ppm',
            'sample0007_s2_attention.ppm', 'sample0007_s2_overlay.ppm',
        ]
        attention = read_image_ppm(tmp_path / 'sample0007_s1_attention.ppm')
        assert attention.min() == 0.0 and attention.max() == 1.0

    def test_model_without_clsa(self, tiny_model_config, sample):
        """Test that a model without CLSA has nothing to export."""
        model = build_model(replace(tiny_model_config, clsa=False), seed=0)
        with pytest.raises(UsageError):
            attention_images(model, sample)
