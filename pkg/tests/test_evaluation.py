"""Success counting, PGD projection bounds, diff histograms, and reports."""

import csv
import json
import math

import numpy as np
import pytest
import torch

from quietpatch.evaluation import (
    AttackReport,
    CleanMisclassification,
    EvaluationError,
    baseline_patch,
    conspicuousness_comparison,
    diff_distribution,
    pgd_attack,
    sample_patches,
    success_rate,
    transfer_matrix,
)
from quietpatch.imaging import PatchRegion, apply_patch, build_pyramid
from quietpatch.stack import init_stack
from quietpatch.victims import VictimModel, predict
from tests.conftest import rand_image


def tiny_stack(seed=80):
    patch = rand_image(3, 8, 8, seed)
    ctx = rand_image(3, 16, 16, seed + 1)
    pyr = build_pyramid(patch, ctx, K=1, coarse_ratio=0.75)
    s = init_stack(pyr, seed=seed, width=8)
    s.frozen = [True] * len(s.pairs)
    return s


class ThresholdNet(torch.nn.Module):
    """Class 1 iff the mean of the first channel exceeds a threshold."""

    def __init__(self, tau=0.0):
        super().__init__()
        self.tau = tau

    def forward(self, x):
        score = x[:, 0].mean(dim=(1, 2)) - self.tau
        return torch.stack([-score, score], dim=1)


def threshold_model(tau=0.0):
    return VictimModel("thresh", ThresholdNet(tau), (3, 16, 16), 2)


class TestSamplePatches:
    def test_count_shape_determinism(self):
        s = tiny_stack()
        a = sample_patches(s, 5, seed=3)
        b = sample_patches(s, 5, seed=3)
        assert len(a) == 5
        assert all(p.shape == (3, 8, 8) for p in a)
        for pa, pb in zip(a, b):
            assert torch.equal(pa, pb)

    def test_distinct_across_indices(self):
        a = sample_patches(tiny_stack(), 3, seed=3)
        assert not torch.equal(a[0], a[1])

    def test_rejects_zero(self):
        with pytest.raises(EvaluationError):
            sample_patches(tiny_stack(), 0, seed=0)


class TestSuccessRate:
    def test_exact_counting(self):
        # threshold model + hand-built patches make flips enumerable: the
        # 8x8 patch covers a quarter of the image, so channel-0 mean lands at
        # 0.75*(-0.5) + 0.25*p_mean
        model = threshold_model(tau=-0.2)
        x = torch.full((3, 16, 16), -0.5)  # clean mean -0.5 < tau: class 0
        region = PatchRegion(4, 4, 8, 8)
        hot = torch.ones(3, 8, 8)           # mean -0.125 > tau: flip
        cold = torch.full((3, 8, 8), -1.0)  # mean -0.625 < tau: no flip
        patches = [hot] * 7 + [cold] * 3
        rate = success_rate(
            None, model, x, region, n_samples=10, seed=0, patches=patches
        )
        assert rate == 0.7

    def test_identity_patch_never_flips(self):
        model = threshold_model()
        x = torch.full((3, 16, 16), -0.5)
        region = PatchRegion(4, 4, 8, 8)
        same = x[:, region.rows, region.cols].clone()
        rate = success_rate(None, model, x, region, 4, 0, patches=[same] * 4)
        assert rate == 0.0

    def test_clean_misclassification_raised(self):
        model = threshold_model(tau=0.0)
        x = torch.full((3, 16, 16), 0.5)  # model says class 1
        with pytest.raises(CleanMisclassification) as exc:
            success_rate(
                None, model, x, PatchRegion(4, 4, 8, 8), 4, 0,
                true_class=0, patches=[torch.zeros(3, 8, 8)],
            )
        assert exc.value.predicted == 1 and exc.value.expected == 0

    def test_anchors_on_clean_prediction_without_true_class(self):
        # no true_class: flips counted against whatever the model says clean
        model = threshold_model(tau=0.2)
        x = torch.full((3, 16, 16), 0.5)  # clean mean 0.5 > tau: class 1
        region = PatchRegion(4, 4, 8, 8)
        cold = torch.full((3, 8, 8), -1.0)  # mean 0.125 < tau: class 0
        rate = success_rate(None, model, x, region, 2, 0, patches=[cold, cold])
        assert rate == 1.0

    def test_targeted_counts_target_hits(self):
        model = threshold_model(tau=-0.2)
        x = torch.full((3, 16, 16), -0.5)
        region = PatchRegion(4, 4, 8, 8)
        hot = torch.ones(3, 8, 8)
        cold = torch.full((3, 8, 8), -1.0)
        rate = success_rate(
            None, model, x, region, 4, 0,
            targeted=True, target_class=1, patches=[hot, hot, cold, hot],
        )
        assert rate == 0.75


class TestTransferMatrix:
    def test_surrogate_row_matches_success_rate(self, victim_a, victim_b, shape_data):
        x, y = shape_data["test"]
        img, label = x[0], int(y[0])
        stack = tiny_stack()
        region = PatchRegion(12, 12, 8, 8)
        rates = transfer_matrix(
            stack, victim_a, [victim_a, victim_b], img, region,
            n_samples=6, seed=2, true_class=label,
        )
        direct = success_rate(stack, victim_a, img, region, 6, 2, true_class=label)
        assert rates[victim_a.identifier] == direct
        assert set(rates) == {victim_a.identifier, victim_b.identifier}

    def test_empty_model_list(self):
        with pytest.raises(EvaluationError):
            transfer_matrix(tiny_stack(), None, [], torch.zeros(3, 16, 16),
                            PatchRegion(0, 0, 8, 8), 2, 0)


class TestPGD:
    def test_support_bound_exact(self, victim_a, shape_data):
        x, _ = shape_data["test"]
        eps64 = 8.0 * 2.0 / 255.0
        for i in range(3):
            adv = pgd_attack(victim_a, x[i], epsilon=8.0, steps=10)
            d = (adv - x[i]).abs()
            assert float(d.max()) <= eps64
            assert float(adv.min()) >= -1.0 and float(adv.max()) <= 1.0

    def test_zero_steps_is_identity(self, victim_a, shape_data):
        x, _ = shape_data["test"]
        adv = pgd_attack(victim_a, x[0], epsilon=8.0, steps=0)
        assert torch.equal(adv, x[0])

    def test_single_step_linear_model_analytic(self):
        # for a linear model, one signed-gradient step lands exactly at
        # x + alpha * sign(w_other - w_true) elementwise (before clipping)
        torch.manual_seed(81)
        net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(3 * 4 * 4, 2))
        with torch.no_grad():
            net[1].weight.copy_(torch.randn(2, 48))
            net[1].bias.zero_()
        model = VictimModel("lin", net, (3, 4, 4), 2)
        x = torch.zeros(3, 4, 4)  # interior: no [-1,1] clipping active
        _, clean = predict(model, x)
        adv = pgd_attack(model, x, epsilon=8.0, steps=1)
        # cross-entropy ascent moves along sign of (w_other - w_clean)
        w = net[1].weight
        other = 1 - clean
        direction = torch.sign(w[other] - w[clean]).reshape(3, 4, 4)
        eps = 8.0 * 2.0 / 255.0
        expected = (eps / 10.0) * direction
        assert torch.allclose(adv, expected, atol=1e-6)

    def test_gradient_capability_required(self):
        net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(3, 2))
        m = VictimModel("nograd", net, (3, 1, 1), 2, capabilities=frozenset({"logits"}))
        with pytest.raises(EvaluationError, match="gradient"):
            pgd_attack(m, torch.zeros(3, 1, 1))

    def test_flips_some_predictions(self, victim_a, shape_data):
        x, y = shape_data["test"]
        flips = 0
        for i in range(8):
            adv = pgd_attack(victim_a, x[i], epsilon=8.0, steps=40)
            _, pred = predict(victim_a, adv)
            flips += int(pred != int(y[i]))
        assert flips >= 4  # a desk classifier folds well under eps=8 PGD


class TestDiffDistribution:
    def test_pgd_style_whole_image(self):
        x = rand_image(3, 10, 10, 82) * 0.4
        delta = torch.full_like(x, 0.05)
        summary = diff_distribution(x, x + delta, eps=0.06)
        assert summary["max_abs"] == pytest.approx(0.05, abs=1e-6)
        assert summary["frac_exceeding"] == 0.0
        assert summary["max_abs_outside"] is None
        assert sum(summary["counts"]) == x.numel()

    def test_patch_style_region_restricted(self):
        x = torch.zeros(3, 10, 10)
        region = PatchRegion(2, 2, 4, 4)
        attacked = apply_patch(x, torch.ones(3, 4, 4), region)
        summary = diff_distribution(x, attacked, region=region, eps=0.5)
        assert summary["max_abs"] == 1.0
        assert summary["max_abs_outside"] == 0.0
        assert summary["frac_exceeding"] == 1.0
        assert sum(summary["counts"]) == 3 * 16

    def test_exceedance_fraction_arithmetic(self):
        x = torch.zeros(3, 4, 4)
        attacked = x.clone()
        attacked[:, 0, 0] = 1.0  # 3 of 48 values exceed
        summary = diff_distribution(x, attacked, eps=0.5)
        assert summary["frac_exceeding"] == pytest.approx(3 / 48)

    def test_histogram_covers_signed_range(self):
        x = torch.zeros(3, 4, 4)
        attacked = x.clone()
        attacked[0, 0, 0], attacked[0, 0, 1] = 1.5, -1.5
        summary = diff_distribution(x, attacked, bins=4)
        # bins over (-2, 2): the two spikes land in the outer bins
        assert summary["counts"][0] == 1 and summary["counts"][3] == 1

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            diff_distribution(torch.zeros(3, 4, 4), torch.zeros(3, 5, 5))


class TestBaselinePatch:
    def test_saturated_checker(self):
        p = baseline_patch(8, 8, cell=2)
        assert set(p.unique().tolist()) == {-1.0, 1.0}
        # red and cyan cells alternate: channel 0 flips sign across a cell edge
        assert float(p[0, 0, 0]) != float(p[0, 0, 2])
        assert float(p[0, 0, 0]) == float(p[0, 0, 4])
        # red's complement: channels 1, 2 oppose channel 0
        assert torch.equal(p[1], -p[0])
        assert torch.equal(p[2], -p[0])

    def test_comparison_structure(self):
        x = rand_image(3, 24, 24, 83) * 0.3
        region = PatchRegion(8, 8, 8, 8)
        patch = torch.zeros(3, 8, 8)
        out = conspicuousness_comparison(x, patch, region)
        assert set(out) == {
            "patch_ratio", "patch_zero_map", "baseline_ratio", "baseline_zero_map",
        }
        assert out["baseline_ratio"] > 0


class TestAttackReport:
    def _report(self):
        return AttackReport(
            run_id="abc-123",
            config_hash="deadbeef00000000",
            victim_models=["convnet_a-v1", "convnet_b-v1"],
            n_samples=100,
            patch_area_fraction=0.0625,
            success_rates={"convnet_a-v1": 0.97, "convnet_b-v1": 0.31},
            notes={"surrogate": "convnet_a-v1"},
        )

    def test_json_round_trip(self):
        r = self._report()
        data = json.loads(r.to_json())
        assert data["success_rates"]["convnet_b-v1"] == 0.31
        assert data["run_id"] == "abc-123"

    def test_content_hash_is_stable_and_sensitive(self):
        a, b = self._report(), self._report()
        assert a.content_hash() == b.content_hash()
        b.success_rates["convnet_a-v1"] = 0.98
        assert a.content_hash() != b.content_hash()

    def test_save_writes_csv_with_roles(self, tmp_path):
        paths = self._report().save(tmp_path)
        with open(paths["success_csv"]) as f:
            rows = list(csv.DictReader(f))
        by_model = {r["model"]: r for r in rows}
        assert by_model["convnet_a-v1"]["role"] == "white-box"
        assert by_model["convnet_b-v1"]["role"] == "black-box"
        assert float(by_model["convnet_b-v1"]["success_rate"]) == 0.31
        saved = json.loads((tmp_path / "report.json").read_text())
        assert saved["config_hash"] == "deadbeef00000000"
