from __future__ import annotations

import pytest
import torch
import torch.nn.functional as F

from medsegkit import DeepSupervisionLoss, DiceCELoss, classify_logits, deep_supervision_weights
from medsegkit.metrics import soft_dice


def binary_reference_loss(logits: torch.Tensor, target: torch.Tensor) -> float:
    """Independent recomputation: BCE-with-logits plus one minus soft dice."""
    t = target.float().unsqueeze(1)
    bce = F.binary_cross_entropy_with_logits(logits, t)
    p = torch.sigmoid(logits)
    eps = 1e-5
    dice = (2 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)
    return float(bce + (1 - dice))


def multiclass_reference_loss(logits: torch.Tensor, target: torch.Tensor) -> float:
    ce = F.cross_entropy(logits, target)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, logits.shape[1]).movedim(-1, 1).float()
    dice = soft_dice(probs, onehot, class_dim=1)
    return float(ce + (1 - dice))


class TestDiceCELoss:
    def test_binary_variant_selected(self):
        torch.manual_seed(0)
        criterion = DiceCELoss(num_classes=1)
        logits = torch.randn(2, 1, 6, 6)
        target = torch.randint(0, 2, (2, 6, 6))
        assert float(criterion(logits, target)) == pytest.approx(
            binary_reference_loss(logits, target), abs=1e-6
        )

    def test_multiclass_variant_selected(self):
        torch.manual_seed(1)
        criterion = DiceCELoss(num_classes=4)
        logits = torch.randn(2, 4, 5, 5)
        target = torch.randint(0, 4, (2, 5, 5))
        assert float(criterion(logits, target)) == pytest.approx(
            multiclass_reference_loss(logits, target), abs=1e-6
        )

    def test_perfect_logits_drive_loss_to_zero(self):
        target = torch.randint(0, 2, (1, 8, 8))
        previous = None
        for margin in (2.0, 8.0, 32.0):
            logits = (target.float().unsqueeze(1) * 2 - 1) * margin
            loss = float(DiceCELoss(num_classes=1)(logits, target))
            if previous is not None:
                assert loss < previous
            previous = loss
        assert previous < 1e-4

    def test_target_class_out_of_range(self):
        criterion = DiceCELoss(num_classes=3)
        with pytest.raises(ValueError):
            criterion(torch.randn(1, 3, 4, 4), torch.full((1, 4, 4), 3))

    def test_binary_target_validation(self):
        criterion = DiceCELoss(num_classes=1)
        with pytest.raises(ValueError):
            criterion(torch.randn(1, 1, 4, 4), torch.full((1, 4, 4), 2))

    def test_invalid_num_classes(self):
        with pytest.raises(ValueError):
            DiceCELoss(num_classes=0)

    @pytest.mark.parametrize("num_classes", [1, 3])
    def test_gradient_matches_finite_differences(self, num_classes):
        torch.manual_seed(2 + num_classes)
        criterion = DiceCELoss(num_classes=num_classes)
        channels = num_classes
        logits = torch.randn(1, channels, 3, 3, dtype=torch.float64, requires_grad=True)
        target = torch.randint(0, max(num_classes, 2), (1, 3, 3))
        loss = criterion(logits, target)
        loss.backward()
        grad = logits.grad.clone()
        h = 1e-6
        flat = logits.detach().flatten()
        for idx in range(flat.numel()):
            up = flat.clone()
            up[idx] += h
            dn = flat.clone()
            dn[idx] -= h
            f_up = float(criterion(up.reshape(logits.shape), target))
            f_dn = float(criterion(dn.reshape(logits.shape), target))
            numeric = (f_up - f_dn) / (2 * h)
            assert numeric == pytest.approx(float(grad.flatten()[idx]), rel=1e-4, abs=1e-7)


class TestDeepSupervision:
    def test_three_scale_weights_exact(self):
        weights = deep_supervision_weights(3)
        assert weights.tolist() == [4 / 7, 2 / 7, 1 / 7]

    def test_wrapped_equals_hand_computed_weighted_sum(self):
        torch.manual_seed(3)
        base = DiceCELoss(num_classes=2)
        wrapper = DeepSupervisionLoss(base, num_scales=3)
        target = torch.randint(0, 2, (1, 16, 16))
        outs = [torch.randn(1, 2, 16 // 2**i, 16 // 2**i) for i in range(3)]
        expected = 0.0
        for w, out in zip((4 / 7, 2 / 7, 1 / 7), outs):
            scaled = F.interpolate(
                target.unsqueeze(1).float(), size=out.shape[2:], mode="nearest-exact"
            ).squeeze(1).long()
            expected += w * float(base(out, scaled))
        assert float(wrapper(outs, target)) == pytest.approx(expected, abs=1e-6)

    def test_single_scale_identical_to_base(self):
        torch.manual_seed(4)
        base = DiceCELoss(num_classes=3)
        wrapper = DeepSupervisionLoss(base, num_scales=1)
        for _ in range(10):
            logits = torch.randn(2, 3, 8, 8)
            target = torch.randint(0, 3, (2, 8, 8))
            assert float(wrapper([logits], target)) == float(base(logits, target))

    def test_perfect_at_every_scale_equals_base_perfect(self):
        target = torch.randint(0, 2, (1, 8, 8))
        base = DiceCELoss(num_classes=1)
        wrapper = DeepSupervisionLoss(base, num_scales=2)
        outs = []
        for i in range(2):
            scaled = F.interpolate(
                target.unsqueeze(1).float(), scale_factor=1 / 2**i, mode="nearest-exact"
            ).squeeze(1).long()
            outs.append((scaled.float().unsqueeze(1) * 2 - 1) * 50)
        wrapped = float(wrapper(outs, target))
        direct = float(base(outs[0], target))
        assert wrapped == pytest.approx(direct, abs=1e-5)

    def test_weight_scaling_linearity_pre_normalization(self):
        torch.manual_seed(5)
        base = DiceCELoss(num_classes=2)
        outs = [torch.randn(1, 2, 8, 8), torch.randn(1, 2, 4, 4)]
        target = torch.randint(0, 2, (1, 8, 8))
        single = DeepSupervisionLoss(base, weights=[1.0, 0.5], normalize=False)
        doubled = DeepSupervisionLoss(base, weights=[2.0, 1.0], normalize=False)
        assert float(doubled(outs, target)) == pytest.approx(
            2 * float(single(outs, target)), rel=1e-6
        )

    def test_scale_count_mismatch(self):
        wrapper = DeepSupervisionLoss(DiceCELoss(num_classes=1), num_scales=3)
        outs = [torch.randn(1, 1, 8, 8)]
        with pytest.raises(ValueError):
            wrapper(outs, torch.zeros(1, 8, 8).long())

    def test_plain_tensor_accepted(self):
        base = DiceCELoss(num_classes=1)
        wrapper = DeepSupervisionLoss(base)
        logits = torch.randn(1, 1, 8, 8)
        target = torch.randint(0, 2, (1, 8, 8))
        assert float(wrapper(logits, target)) == float(base(logits, target))

    def test_weights_require_positive_scales(self):
        with pytest.raises(ValueError):
            deep_supervision_weights(0)


class TestClassifyLogits:
    def test_binary_threshold(self):
        logits = torch.tensor([[[[-3.0, 3.0]]]])
        labels = classify_logits(logits, num_classes=1)
        assert labels.tolist() == [[[0, 1]]]

    def test_multiclass_argmax(self):
        logits = torch.zeros(1, 3, 1, 2)
        logits[0, 2, 0, 0] = 5.0
        logits[0, 1, 0, 1] = 5.0
        labels = classify_logits(logits, num_classes=3)
        assert labels.tolist() == [[[2, 1]]]
