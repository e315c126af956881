#!/usr/bin/env python3
"""
CLAN assembly: branches, zero-init reduction to the baseline, loss,
prediction and parameter round trips.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from clan import ops
from clan.attention import RelationMetric
from clan.checkpoint import load_tensors, save_tensors
from clan.errors import ConfigurationError, DimensionError, UsageError
from clan.model import (
    BranchOutputs,
    build_model,
    clan_forward,
    clan_loss,
    clan_predict,
    default_subsets,
    resolve_branch_subset,
)
from clan.tensor import Tensor, backward, no_grad


@pytest.fixture
def images(rng):
    return Tensor(rng.uniform(0.0, 1.0, size=(4, 3, 8, 8)))


def perturbed_model(config, seed=0, scale=0.1):
    """A built model moved off its zero-initialised start."""
    model = build_model(config, seed=seed)
    rng = np.random.default_rng(seed + 5)
    for tensor in model.parameters():
        tensor.data = tensor.data + rng.normal(scale=scale, size=tensor.shape)
    return model


class TestBranches:
    """Test branch naming, shapes and build determinism."""

    def test_branch_order(self, tiny_model_config):
        """Test that branches run A per tapped stage, then G, then CLSA."""
        model = build_model(tiny_model_config, seed=0)
        assert model.branch_names == ['A1', 'A2', 'G', 'CLSA'], "Unexpected branch order"

    def test_baseline_branches(self, tiny_model_config):
        """Test that the GAP baseline drops the CLSA branch."""
        config = replace(tiny_model_config, middle='gap', clsa=False)
        assert build_model(config, seed=0).branch_names == ['A1', 'A2', 'G']

    def test_logit_shapes_and_attention_maps(self, tiny_model_config, images):
        """Test logits per branch and one attention map per tapped stage."""
        outputs = clan_forward(build_model(tiny_model_config, seed=0), images)
        assert [t.shape for t in outputs.logits] == [(4, 3)] * 4, "Every branch should give b×K"
        assert {s: m.shape for s, m in outputs.attention_maps.items()} == {
            1: (4, 1, 4, 4), 2: (4, 1, 2, 2),
        }, "Attention maps should match their middle stage resolution"

    def test_build_is_deterministic(self, tiny_model_config):
        """Test that the same seed builds the same weights."""
        a = build_model(tiny_model_config, seed=7).state_dict()
        b = build_model(tiny_model_config, seed=7).state_dict()
        assert list(a) == list(b), "Parameter order should not depend on the build"
        assert all(np.array_equal(a[k], b[k]) for k in a), "Seeded init should repeat"

    def test_branch_weight_count_is_validated(self, tiny_model_config):
        """Test that one weight per branch is required."""
        config = replace(tiny_model_config, branch_weights=[1.0, 1.0])
        with pytest.raises(ConfigurationError):
            build_model(config, seed=0)

    def test_unknown_branch_lookup(self, tiny_model_config, images):
        """Test that looking up a missing branch is a usage error."""
        outputs = clan_forward(build_model(tiny_model_config, seed=0), images)
        with pytest.raises(UsageError):
            outputs.by_name('B9')

    def test_identical_images_give_identical_rows(self, tiny_model_config, rng):
        """Test that two copies of one image get the same logits in every branch."""
        image = rng.uniform(0.0, 1.0, size=(1, 3, 8, 8))
        model = perturbed_model(tiny_model_config)
        with no_grad():
            outputs = clan_forward(model, Tensor(np.concatenate([image, image])))
        for name, logits in zip(outputs.names, outputs.logits):
            assert np.allclose(logits.data[0], logits.data[1], rtol=0.0, atol=1e-12), (
                f"{name} treats identical images differently"
            )


class TestBaselineReduction:
    """Test that a fresh CLAN starts exactly where the GAP baseline does."""

    def test_zero_init_matches_baseline_identity(self, tiny_model_config, images):
        """Test that fresh CLCA leaves the A and G logits bit-identical to the baseline."""
        model = build_model(tiny_model_config, seed=0)
        ours = clan_forward(model, images)
        baseline = clan_forward(model.as_baseline(), images)
        for name in ('A1', 'A2', 'G'):
            assert ours.by_name(name).data.tobytes() == baseline.by_name(name).data.tobytes(), (
                f"{name} logits differ from the baseline"
            )

    def test_baseline_shares_tensors(self, tiny_model_config):
        """Test that the baseline view reuses the model's tensors."""
        model = build_model(tiny_model_config, seed=0)
        baseline = model.as_baseline()
        assert baseline.backbone is model.backbone, "Backbone should be shared"
        assert baseline.heads['G'] is model.heads['G'], "G head should be shared"
        assert not baseline.clca and not baseline.clsa, "Baseline has no attention"


class TestLoss:
    """Test the summed multi-branch cross-entropy."""

    def test_loss_is_sum_of_branch_cross_entropies(self, tiny_model_config, images):
        """Test that unit weights sum one cross-entropy per branch."""
        outputs = clan_forward(build_model(tiny_model_config, seed=0), images)
        labels = [0, 1, 2, 0]
        expected = sum(ops.cross_entropy(t, labels).item() for t in outputs.logits)
        assert clan_loss(outputs, labels).item() == pytest.approx(expected, abs=1e-12)

    def test_uniform_logits_give_branches_times_log_k(self):
        """Test B·ln K for uniform logits in every branch."""
        outputs = BranchOutputs(
            names=['A1', 'A2', 'G', 'CLSA'],
            logits=[Tensor(np.zeros((2, 3))) for _ in range(4)],
        )
        assert math.isclose(clan_loss(outputs, [0, 2]).item(), 4 * math.log(3), rel_tol=1e-12)

    def test_weighted_loss(self, tiny_model_config, images):
        """Test that zero weights silence their branches."""
        outputs = clan_forward(build_model(tiny_model_config, seed=0), images)
        labels = [0, 1, 2, 0]
        weights = [0.0, 0.0, 1.0, 0.0]
        g_only = ops.cross_entropy(outputs.by_name('G'), labels).item()
        assert clan_loss(outputs, labels, weights).item() == pytest.approx(g_only, abs=1e-12)

    def test_weight_count_mismatch(self, tiny_model_config, images):
        """Test that the weight list must match the branches."""
        outputs = clan_forward(build_model(tiny_model_config, seed=0), images)
        with pytest.raises(UsageError):
            clan_loss(outputs, [0, 1, 2, 0], [1.0])

    def test_loss_ignores_batch_order(self, tiny_model_config, images):
        """Test that permuting the batch leaves the loss unchanged."""
        model = perturbed_model(tiny_model_config)
        labels = np.array([0, 1, 2, 0])
        order = np.array([2, 0, 3, 1])
        with no_grad():
            loss = clan_loss(clan_forward(model, images), labels).item()
            shuffled = clan_loss(
                clan_forward(model, Tensor(images.data[order])), labels[order]
            ).item()
        assert abs(loss - shuffled) <= 1e-9, f"Batch order moved the loss by {abs(loss - shuffled):.2e}"

    def test_backward_reaches_every_used_parameter(self, tiny_model_config, images):
        """Test that every head, backbone, CLCA and CLSA parameter the config reads gets gradient."""
        model = perturbed_model(tiny_model_config)
        backward(clan_loss(clan_forward(model, images), [0, 1, 2, 0]))
        unused = set(model.unused_parameters())
        silent = [
            name for name, tensor in model.named_parameters().items()
            if name not in unused and (tensor.grad is None or not np.any(tensor.grad != 0))
        ]
        assert not silent, f"No gradient reached {silent}"

    def test_gaussian_metric_leaves_embeddings_unused(self, tiny_model_config, images):
        """Test that the Gaussian metric gives gradient everywhere except θ and φ."""
        config = replace(tiny_model_config, metric=RelationMetric.GAUSSIAN)
        model = perturbed_model(config)
        backward(clan_loss(clan_forward(model, images), [0, 1, 2, 0]))
        params = model.named_parameters()
        unused = set(model.unused_parameters())
        assert 'clca.s1.W_theta' in unused and 'clca.s2.b_phi' in unused
        for name in unused:
            assert params[name].grad is None or not np.any(params[name].grad), (
                f"{name} should receive no gradient under the Gaussian metric"
            )
        assert np.any(params['clca.s1.W_l'].grad != 0), "Fusion weights should still learn"


class TestPredict:
    """Test the probability-averaging prediction."""

    @staticmethod
    def outputs(*rows):
        names = [f"B{i}" for i in range(len(rows))]
        return BranchOutputs(names=names, logits=[Tensor(np.array(r, dtype=float)) for r in rows])

    def test_ties_go_to_lowest_index(self):
        """Test that equal probabilities resolve to the first class."""
        outputs = self.outputs([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
        assert clan_predict(outputs, ['B0']).tolist() == [0, 1], "Ties should pick the lowest index"

    def test_averages_probabilities_not_logits(self):
        """Test that branches are combined in probability space."""
        # logit sums favour class 0, mean probabilities favour class 1
        outputs = self.outputs([[10.0, 0.0]], [[-3.0, 0.0]], [[-3.0, 0.0]])
        assert clan_predict(outputs, ['B0', 'B1', 'B2']).tolist() == [1]

    def test_scaling_one_branch_keeps_its_own_prediction(self, rng):
        """Test that a positive scale never moves a single-branch argmax."""
        logits = rng.normal(size=(6, 5))
        for factor in (0.1, 3.0, 50.0):
            scaled = clan_predict(self.outputs(factor * logits), ['B0'])
            assert scaled.tolist() == clan_predict(self.outputs(logits), ['B0']).tolist(), (
                f"Scaling by {factor} changed a single-branch prediction"
            )

    def test_scaling_one_branch_can_move_the_average(self):
        """Test that a sharper branch can outvote the other in the average."""
        assert clan_predict(self.outputs([[1.0, 0.0]], [[0.0, 0.5]]), ['B0', 'B1']).tolist() == [0]
        sharper = self.outputs([[1.0, 0.0]], [[0.0, 5.0]])
        assert clan_predict(sharper, ['B0', 'B1']).tolist() == [1]

    def test_empty_and_unknown_subsets(self):
        """Test that subsets must be non-empty and name real branches."""
        outputs = self.outputs([[1.0, 0.0]])
        with pytest.raises(UsageError):
            clan_predict(outputs, [])
        with pytest.raises(UsageError):
            clan_predict(outputs, ['G'])


class TestBranchSubsets:
    """Test the G / P / A subset expressions."""

    NAMES = ['A1', 'A2', 'G', 'CLSA']

    @pytest.mark.parametrize('expression,expected', [
        ('G', ['G']),
        ('G+P', ['A2', 'G']),
        ('G+P+A', ['A1', 'A2', 'G']),
        ('CLSA+G', ['G', 'CLSA']),
        ('all', ['A1', 'A2', 'G', 'CLSA']),
        (' A1 + G ', ['A1', 'G']),
    ])
    def test_resolve(self, expression, expected):
        """Test that expressions resolve to branches in branch order."""
        assert resolve_branch_subset(self.NAMES, expression) == expected, (
            f"'{expression}' resolved wrongly"
        )

    def test_unknown_token(self):
        """Test that an unknown branch token is rejected."""
        with pytest.raises(UsageError):
            resolve_branch_subset(self.NAMES, 'G+B7')

    def test_single_tap_has_empty_a(self):
        """Test that A has nothing to add when only one stage is tapped."""
        with pytest.raises(UsageError):
            resolve_branch_subset(['A2', 'G', 'CLSA'], 'A')

    def test_default_subsets(self):
        """Test the subsets printed by default for one and two tapped stages."""
        assert default_subsets(self.NAMES) == [
            'A1', 'A2', 'G', 'CLSA', 'G+P', 'G+P+A', 'all',
        ]
        assert default_subsets(['A2', 'G', 'CLSA']) == ['A2', 'G', 'CLSA', 'G+P', 'all']


class TestStateDict:
    """Test saving and restoring model parameters."""

    def test_checkpoint_round_trip_reproduces_logits(self, tiny_model_config, images, tmp_path):
        """Test that a restored model gives bit-identical logits."""
        trained = perturbed_model(tiny_model_config)
        path = save_tensors(tmp_path / 'model.clan', trained.state_dict())

        restored = build_model(tiny_model_config, seed=99)
        restored.load_state_dict(load_tensors(path))
        with no_grad():
            before = clan_forward(trained, images)
            after = clan_forward(restored, images)
        for name, a, b in zip(before.names, before.logits, after.logits):
            assert a.data.tobytes() == b.data.tobytes(), f"{name} changed after the round trip"

    def test_missing_tensor(self, tiny_model_config):
        """Test that a checkpoint missing a tensor does not fit."""
        model = build_model(tiny_model_config, seed=0)
        state = model.state_dict()
        del state['head.G.bias']
        with pytest.raises(DimensionError):
            model.load_state_dict(state)

    def test_wrong_shape(self, tiny_model_config):
        """Test that a tensor of the wrong shape does not fit."""
        model = build_model(tiny_model_config, seed=0)
        state = model.state_dict()
        state['head.G.bias'] = np.zeros(7)
        with pytest.raises(DimensionError):
            model.load_state_dict(state)

    def test_baseline_checkpoint_does_not_fit_clan(self, tiny_model_config):
        """Test that a baseline checkpoint is rejected by a CLAN model."""
        baseline = build_model(replace(tiny_model_config, middle='gap', clsa=False), seed=0)
        with pytest.raises(DimensionError):
            build_model(tiny_model_config, seed=0).load_state_dict(baseline.state_dict())
