#!/usr/bin/env python3
"""
Desk-scale comparison of CLAN against the GAP baseline on the synthetic
fine-grained task. Three seeds per model; run with `pytest -m slow`.
"""

from pathlib import Path
from statistics import median

import pytest

from clan.config import load_config
from clan.trainer import Trainer

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'config'
SEEDS = (0, 1, 2)


def final_accuracies(config_name, seed, out_dir):
    config = load_config(CONFIG_DIR / config_name)
    config.seed = seed
    return Trainer(config, out_dir / f"{config_name}_{seed}").run()[-1].accuracies


@pytest.mark.slow
class TestDeskScaleWorkflow:
    """Test the desk-scale CLAN versus baseline comparison."""

    def test_clan_beats_baseline_workflow(self, tmp_path):
        """Test that CLAN beats the baseline by 3 points and G+P+A+CLSA ≥ G."""
        clan = [final_accuracies('desk.cfg', s, tmp_path) for s in SEEDS]
        baseline = [final_accuracies('baseline.cfg', s, tmp_path) for s in SEEDS]

        clan_median = median(run['all'] for run in clan)
        baseline_median = median(run['all'] for run in baseline)
        assert clan_median >= baseline_median + 0.03, (
            f"CLAN median {clan_median:.3f} vs baseline median {baseline_median:.3f}"
        )

        median_run = sorted(clan, key=lambda run: run['all'])[len(clan) // 2]
        assert median_run['all'] >= median_run['G'], (
            f"G+P+A+CLSA {median_run['all']:.3f} below G alone {median_run['G']:.3f}"
        )
