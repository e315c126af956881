#!/usr/bin/env python3
"""
Backbone shapes, parameter and MAC counts against closed forms.
"""

from pathlib import Path

import numpy as np
import pytest

from clan.backbone import (
    BackboneConfig,
    backbone_forward,
    backbone_macs,
    count_parameters,
    init_backbone,
)
from clan.config import load_config
from clan.errors import ConfigurationError, DimensionError
from clan.model import ModelConfig, build_model, model_complexity
from clan.tensor import Tensor

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'


def closed_form_backbone(channels, blocks, c_in=3):
    total = 0
    for c_out, count in zip(channels, blocks):
        for _ in range(count):
            total += c_out * c_in * 9 + c_out
            c_in = c_out
    return total


def closed_form_clca(c_s, c_g, c_int):
    return c_s * c_s + c_s * c_g + 4 * c_int * c_s + 3 * c_int + 3 * c_s


class TestBackboneForward:
    """Test the multi-scale backbone pass."""

    def test_stage_extents(self, tiny_backbone, rng):
        """Test that each stage halves the extent and reports its stage index."""
        weights = init_backbone(tiny_backbone, rng)
        maps = backbone_forward(Tensor(rng.normal(size=(2, 3, 8, 8))), tiny_backbone, weights)
        assert [m.stage for m in maps] == [1, 2, 3], "One map per stage, in order"
        assert [m.tensor.shape for m in maps] == [(2, 2, 4, 4), (2, 3, 2, 2), (2, 4, 1, 1)], (
            "Each stage should halve the spatial extent"
        )
        assert all(m.top_stage == 3 for m in maps)

    def test_rejects_wrong_input_size(self, tiny_backbone, rng):
        """Test that images of another size are refused."""
        weights = init_backbone(tiny_backbone, rng)
        with pytest.raises(ConfigurationError):
            backbone_forward(Tensor(np.zeros((1, 3, 16, 16))), tiny_backbone, weights)

    def test_rejects_wrong_channel_count(self, tiny_backbone, rng):
        """Test that non-RGB input is refused."""
        weights = init_backbone(tiny_backbone, rng)
        with pytest.raises(DimensionError):
            backbone_forward(Tensor(np.zeros((1, 1, 8, 8))), tiny_backbone, weights)

    def test_init_is_seeded(self, tiny_backbone):
        """Test that the same generator seed gives the same weights."""
        a = init_backbone(tiny_backbone, np.random.default_rng(3))
        b = init_backbone(tiny_backbone, np.random.default_rng(3))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestConfigValidation:
    """Test backbone configuration checks."""

    @pytest.mark.parametrize('kwargs', [
        {'stage_channels': [4, 8], 'stage_blocks': [1, 1, 1]},
        {'top_stage': 4},
        {'tap_stages': [2, 1]},
        {'tap_stages': [3]},
        {'input_size': 12},
        {'stage_blocks': [1, 0, 1]},
    ])
    def test_invalid_configs(self, kwargs):
        """Test the structural checks on stage layouts."""
        with pytest.raises(ConfigurationError):
            BackboneConfig(**kwargs).validate()


class TestParameterCounts:
    """Test parameter counts against closed forms."""

    @pytest.mark.parametrize('channels,blocks', [
        ([16, 32, 64], [1, 1, 1]),
        ([16, 32, 64], [2, 2, 2]),
        ([4, 6, 8], [1, 2, 1]),
    ])
    def test_backbone_closed_form(self, channels, blocks):
        """Test the backbone count against Σ c_out·c_in·9 + c_out."""
        cfg = BackboneConfig(stage_channels=channels, stage_blocks=blocks, input_size=32)
        weights = init_backbone(cfg, np.random.default_rng(0))
        assert count_parameters(weights) == closed_form_backbone(channels, blocks), (
            f"Backbone count wrong for {channels} × {blocks}"
        )

    @pytest.mark.parametrize('channels,taps,c_int', [
        ([16, 32, 64], [2], 0),
        ([16, 32, 64], [1, 2], 0),
        ([4, 6, 8], [1, 2], 5),
    ])
    def test_attention_closed_form(self, channels, taps, c_int):
        """Test CLCA and CLSA counts against their closed forms."""
        config = ModelConfig(
            backbone=BackboneConfig(stage_channels=channels, tap_stages=taps, input_size=32),
            c_int=c_int,
        )
        report = model_complexity(build_model(config, seed=0))
        expected = sum(
            closed_form_clca(channels[s - 1], channels[-1], c_int or max(1, channels[s - 1] // 2))
            + 19
            for s in taps
        )
        assert report['attention_params'] == expected, f"Attention count wrong for taps {taps}"

    def test_clsa_single_pooling_has_ten_weights(self):
        """Test that one pooled channel gives a 3×3 kernel plus a bias."""
        config = ModelConfig(middle='gap', pooling='max')
        report = model_complexity(build_model(config, seed=0))
        assert report['attention_params'] == 10

    def test_desk_attention_stays_a_small_fraction(self):
        """Test that desk attention stays under 15% of the backbone."""
        config = load_config(CONFIG_DIR / 'desk.cfg')
        report = model_complexity(build_model(config.model, seed=0))
        assert report['backbone_params'] == 72080
        assert report['attention_params'] == 5283
        ratio = report['attention_params'] / report['backbone_params']
        assert ratio < 0.15, f"Attention is {ratio:.1%} of the backbone"

    def test_totals_add_up(self, tiny_model_config):
        """Test that the complexity report totals match the parts."""
        model = build_model(tiny_model_config, seed=0)
        report = model_complexity(model)
        assert report['total_params'] == count_parameters(model)
        assert report['total_macs'] == (
            report['backbone_macs'] + report['attention_macs'] + report['head_macs']
        )


class TestMacs:
    """Test multiply-accumulate counts."""

    def test_backbone_macs_closed_form(self, tiny_backbone):
        """Test the multiply-accumulate count of the tiny backbone."""
        # 8×8: 3→2, then 4×4: 2→3, then 2×2: 3→4
        expected = 64 * 2 * 3 * 9 + 16 * 3 * 2 * 9 + 4 * 4 * 3 * 9
        assert backbone_macs(tiny_backbone) == expected, "MACs should count every conv tap once"

    def test_baseline_has_no_attention_cost(self, tiny_model_config):
        """Test that the baseline reports zero attention cost."""
        baseline = build_model(tiny_model_config, seed=0).as_baseline()
        report = model_complexity(baseline)
        assert report['attention_params'] == 0 and report['attention_macs'] == 0
