from __future__ import annotations

import csv
import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.utils.data import DataLoader

from medsegkit import (
    ArrayDataset,
    DiceCELoss,
    EMAModel,
    SegmentationTrainer,
    Trainer,
    ema_update,
)
from medsegkit.frontend import FileFrontend, read_events
from medsegkit.training import SanityCheckError, estimate_macs, format_table
from medsegkit.visualize import PREVIEW_FILENAMES

from conftest import make_blob_dataset


def tiny_loaders(n=8, size=16, batch=4, seed=0):
    ds = make_blob_dataset(n=n, size=size, seed=seed)
    train, val = ds.fold(fold=0, k=4, seed=0)
    return DataLoader(train, batch_size=batch, shuffle=True), DataLoader(val, batch_size=1)


class OneConvTrainer(SegmentationTrainer):
    """Minimal end-to-end-capable trainer: a single 1x1 conv."""

    def build_network(self, example_shape):
        return nn.Conv2d(example_shape[0], self.num_classes, kernel_size=1)


class TestBuildToolbox:
    def test_all_slots_populated(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        toolbox = trainer.build_toolbox()
        assert isinstance(toolbox.model, nn.Conv2d)
        assert isinstance(toolbox.optimizer, torch.optim.SGD)
        assert toolbox.scheduler is not None
        assert isinstance(toolbox.criterion, DiceCELoss)
        assert toolbox.ema_model is None
        assert trainer.padding is not None

    def test_ema_flag_populates_slot(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.ema = True
        toolbox = trainer.build_toolbox()
        assert toolbox.ema_model is not None
        assert toolbox.eval_model is toolbox.ema_model.module

    def test_missing_build_network_raises(self, tmp_path):
        train, val = tiny_loaders()
        trainer = SegmentationTrainer(tmp_path, train, val)
        with pytest.raises(NotImplementedError, match="build_network"):
            trainer.build_toolbox()

    def test_example_shape_forwarded_verbatim(self, tmp_path):
        captured = {}

        class Probe(OneConvTrainer):
            def build_network(self, example_shape):
                captured["shape"] = example_shape
                return super().build_network(example_shape)

        train, val = tiny_loaders(size=16)
        Probe(tmp_path, train, val).build_toolbox()
        assert captured["shape"] == (1, 16, 16)

    def test_num_dims_mismatch_rejected(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.num_dims = 3
        with pytest.raises(ValueError, match="num_dims"):
            trainer.build_toolbox()


class TestSanityCheck:
    def test_param_count_and_shape_ok(self, tmp_path):
        images = [torch.rand(1, 8, 8) for _ in range(4)]
        labels = [torch.randint(0, 2, (8, 8)) for _ in range(4)]
        ds = ArrayDataset(images, labels)
        train, val = ds.fold(fold=0, k=2)
        trainer = OneConvTrainer(tmp_path, DataLoader(train, batch_size=2), DataLoader(val))
        report = trainer.sanity_check()
        assert report["output_shape_ok"]
        assert report["param_count"] == 2  # 1x1 conv, one in, one out, weight+bias

    def test_conv_mac_formula(self):
        net = nn.Conv2d(2, 4, kernel_size=3, padding=1)
        macs = estimate_macs(net, torch.zeros(1, 2, 8, 8))
        assert macs == 8 * 8 * 4 * 2 * 9

    def test_linear_macs(self):
        net = nn.Linear(10, 3)
        assert estimate_macs(net, torch.zeros(1, 10)) == 30

    def test_wrong_spatial_shape_aborts(self, tmp_path):
        class Shrinking(SegmentationTrainer):
            padding_divisor = 1

            def build_network(self, example_shape):
                return nn.Conv2d(example_shape[0], 1, kernel_size=3)  # no padding: shrinks

        train, val = tiny_loaders()
        trainer = Shrinking(tmp_path, train, val)
        with pytest.raises(SanityCheckError, match="does not match"):
            trainer.sanity_check()

    def test_train_aborts_before_epoch_one_on_bad_shape(self, tmp_path):
        class Shrinking(SegmentationTrainer):
            padding_divisor = 1

            def build_network(self, example_shape):
                return nn.Conv2d(example_shape[0], 1, kernel_size=3)

        train, val = tiny_loaders()
        trainer = Shrinking(tmp_path, train, val)
        with pytest.raises(SanityCheckError):
            trainer.train(2)
        assert not (trainer.experiment_folder / "metrics.csv").exists()


class TestEMA:
    def test_beta_zero_tracks_current(self):
        ema = torch.zeros(3)
        param = torch.tensor([1.0, 2.0, 3.0])
        ema_update([ema], [param], beta=0.0)
        assert torch.equal(ema, param)

    def test_beta_one_frozen(self):
        ema = torch.tensor([5.0])
        ema_update([ema], [torch.tensor([1.0])], beta=1.0)
        assert torch.equal(ema, torch.tensor([5.0]))

    def test_geometric_recursion(self):
        beta = 0.9
        steps = 7
        p = torch.tensor([2.0])
        ema = torch.tensor([10.0])
        start = ema.clone()
        for _ in range(steps):
            ema_update([ema], [p], beta=beta)
        expected = p + beta**steps * (start - p)
        assert torch.allclose(ema, expected, atol=1e-6)

    def test_ema_model_buffers_copied(self):
        model = nn.Sequential(nn.Conv2d(1, 2, 1), nn.BatchNorm2d(2))
        shadow = EMAModel(model, decay=0.5)
        model(torch.randn(4, 1, 5, 5))  # updates running stats
        shadow.update(model)
        assert torch.allclose(shadow.module[1].running_mean, model[1].running_mean)


class TestTrainingLoop:
    def test_strict_improvement_keeps_first_best(self, tmp_path):
        class ConstantLoss(OneConvTrainer):
            def build_criterion(self):
                class Zero(nn.Module):
                    def forward(self, outputs, target):
                        out = outputs[0] if isinstance(outputs, list) else outputs
                        return out.sum() * 0.0

                return Zero()

        train, val = tiny_loaders()
        trainer = ConstantLoss(tmp_path, train, val)
        trainer.train(3)
        best = torch.load(trainer.experiment_folder / "best.ckpt", weights_only=False)
        assert best["epoch"] == 1  # never replaced under strict inequality
        assert best["score"] == 0.0

    def test_score_is_negated_loss(self, tmp_path):
        class FixedLoss(OneConvTrainer):
            def build_criterion(self):
                class Fixed(nn.Module):
                    def forward(self, outputs, target):
                        out = outputs[0] if isinstance(outputs, list) else outputs
                        return out.sum() * 0.0 + 0.3

                return Fixed()

        train, val = tiny_loaders()
        trainer = FixedLoss(tmp_path, train, val)
        trainer.train(1)
        with open(trainer.experiment_folder / "metrics.csv") as fh:
            row = list(csv.DictReader(fh))[0]
        assert float(row["val_loss"]) == pytest.approx(0.3)
        assert float(row["val_score"]) == pytest.approx(-0.3)

    def test_csv_row_per_epoch_and_columns(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.train(3)
        with open(trainer.experiment_folder / "metrics.csv") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            columns = reader.fieldnames
        assert [r["epoch"] for r in rows] == ["1", "2", "3"]
        assert columns == ["epoch", "train_loss", "val_loss", "val_score", "lr", "epoch_seconds", "dice"]

    def test_best_ckpt_matches_argmax_of_scores(self, tmp_path):
        train, val = tiny_loaders(n=12, size=16)
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.train(5)
        with open(trainer.experiment_folder / "metrics.csv") as fh:
            scores = [float(r["val_score"]) for r in csv.DictReader(fh)]
        best = torch.load(trainer.experiment_folder / "best.ckpt", weights_only=False)
        assert best["epoch"] == int(np.argmax(scores)) + 1
        assert best["score"] == pytest.approx(max(scores))

    def test_experiment_folder_artifacts(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.train(2)
        folder = trainer.experiment_folder
        assert folder.parent.name == "OneConvTrainer"
        assert len(folder.name.split("-")[0]) == 8  # YYYYMMDD
        for name in ("metrics.csv", "latest.ckpt", "best.ckpt", "state.orb", "log.txt"):
            assert (folder / name).exists(), name
        assert len(list((folder / "plots").glob("*.png"))) >= 4
        for epoch in (1, 2):
            preview = folder / "previews" / f"epoch_{epoch}"
            assert sorted(p.name for p in preview.iterdir()) == sorted(PREVIEW_FILENAMES)

    def test_worst_case_is_argmin_of_scores(self, tmp_path):
        train, val = tiny_loaders(n=12, size=16)
        trainer = OneConvTrainer(tmp_path, train, val)
        recorded = {}
        original = trainer._validate

        def spy():
            result = original()
            recorded["scores"] = [c.score for c in result.cases]
            recorded["worst"] = result.worst.index
            return result

        trainer._validate = spy
        trainer.train(1)
        scores = recorded["scores"]
        assert recorded["worst"] == int(np.argmin(scores))

    def test_non_finite_loss_aborts_with_batch_index(self, tmp_path):
        class Exploding(OneConvTrainer):
            def build_criterion(self):
                class Bad(nn.Module):
                    def forward(self, outputs, target):
                        out = outputs[0] if isinstance(outputs, list) else outputs
                        return out.sum() * float("nan")

                return Bad()

        train, val = tiny_loaders()
        trainer = Exploding(tmp_path, train, val)
        with pytest.raises(RuntimeError, match="batch 0"):
            trainer.train(1)

    def test_early_stop_tolerance(self, tmp_path):
        class ConstantLoss(OneConvTrainer):
            def build_criterion(self):
                class Zero(nn.Module):
                    def forward(self, outputs, target):
                        out = outputs[0] if isinstance(outputs, list) else outputs
                        return out.sum() * 0.0

                return Zero()

        train, val = tiny_loaders()
        trainer = ConstantLoss(tmp_path, train, val)
        trainer.train(50, early_stop_tolerance=3)
        with open(trainer.experiment_folder / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4  # best at 1, stops after 3 stagnant epochs

    def test_throwing_frontend_never_aborts_training(self, tmp_path):
        class Exploding:
            def on_run_start(self, meta):
                raise RuntimeError("boom")

            def on_epoch_end(self, metrics):
                raise RuntimeError("boom")

            def on_run_end(self, summary):
                raise RuntimeError("boom")

        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val, frontend=Exploding())
        trainer.train(2)
        with open(trainer.experiment_folder / "metrics.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_frontend_event_counts_from_real_run(self, tmp_path):
        events_path = tmp_path / "events.jsonl"
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val, frontend=FileFrontend(events_path))
        trainer.train(3)
        kinds = [e["kind"] for e in read_events(events_path)]
        assert kinds == ["run_start"] + ["epoch_end"] * 3 + ["run_end"]

    def test_warmup_gates_score_prediction(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.prediction_warmup = 4
        trainer.train(6)
        gated = {epoch: pred for epoch, pred in trainer.prediction_log}
        assert all(gated[e] is None for e in (1, 2, 3))
        assert set(gated) == {1, 2, 3, 4, 5, 6}

    def test_ema_enabled_run_validates_with_ema_weights(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.ema = True
        trainer.train(2)
        latest = torch.load(trainer.experiment_folder / "latest.ckpt", weights_only=False)
        assert latest["ema_model"] is not None
        best = torch.load(trainer.experiment_folder / "best.ckpt", weights_only=False)
        for key, value in best["model"].items():
            if value.dtype.is_floating_point:
                assert not torch.equal(value, latest["model"][key])


class TestGradientClipping:
    def test_post_clip_norm_bounded(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.clip_norm = 0.01
        trainer.build_toolbox()
        model = trainer.toolbox.model
        loss = 1e6 * model(torch.randn(2, 1, 16, 16)).pow(2).sum()
        trainer.backward(loss)
        total = math.sqrt(sum(float(p.grad.norm()) ** 2 for p in model.parameters()))
        assert total <= trainer.clip_norm + 1e-6

    def test_direction_preserved(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.clip_norm = 0.5
        trainer.build_toolbox()
        model = trainer.toolbox.model
        x = torch.randn(2, 1, 16, 16)

        loss = 1e4 * model(x).pow(2).sum()
        loss.backward()
        reference = torch.cat([p.grad.flatten().clone() for p in model.parameters()])
        for p in model.parameters():
            p.grad = None
        trainer.backward(1e4 * model(x).pow(2).sum())
        clipped = torch.cat([p.grad.flatten() for p in model.parameters()])
        cosine = torch.dot(reference, clipped) / (reference.norm() * clipped.norm())
        assert float(cosine) == pytest.approx(1.0, abs=1e-6)

    def test_small_gradients_unchanged(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        trainer.clip_norm = 1e9
        trainer.build_toolbox()
        model = trainer.toolbox.model
        x = torch.randn(2, 1, 16, 16)
        loss = model(x).pow(2).sum()
        loss.backward()
        reference = torch.cat([p.grad.flatten().clone() for p in model.parameters()])
        for p in model.parameters():
            p.grad = None
        trainer.backward(model(x).pow(2).sum())
        clipped = torch.cat([p.grad.flatten() for p in model.parameters()])
        assert torch.allclose(reference, clipped, atol=1e-9)


class TestPresetDefaults:
    def test_optimizer_readback(self, tmp_path):
        train, val = tiny_loaders()
        trainer = OneConvTrainer(tmp_path, train, val)
        toolbox = trainer.build_toolbox()
        group = toolbox.optimizer.param_groups[0]
        assert group["momentum"] == 0.99
        assert group["nesterov"] is True
        assert group["lr"] == pytest.approx(1e-2)

    def test_sgd_descends_on_quadratic(self):
        w = torch.nn.Parameter(torch.tensor([1.0]))
        opt = torch.optim.SGD([w], lr=0.1, momentum=0.0)
        loss = 0.5 * w.pow(2).sum()
        loss.backward()
        opt.step()
        assert float(w.detach()) < 1.0

    def test_nesterov_two_step_recursion(self):
        # f(w) = w^2/2, grad = w; Nesterov update per torch semantics:
        # b <- mu*b + grad(w); w <- w - lr*(grad(w) + mu*b)
        lr, mu = 0.1, 0.9
        w = torch.nn.Parameter(torch.tensor([1.0]))
        opt = torch.optim.SGD([w], lr=lr, momentum=mu, nesterov=True)
        expected_w = 1.0
        buf = 0.0
        for step in range(2):
            opt.zero_grad()
            loss = 0.5 * w.pow(2).sum()
            loss.backward()
            grad = expected_w
            buf = mu * buf + grad
            expected_w = expected_w - lr * (grad + mu * buf)
            opt.step()
            assert float(w.detach()) == pytest.approx(expected_w, rel=1e-6)

    def test_deep_supervision_flag_flips_exactly_two_things(self, tmp_path):
        from medsegkit.bundles import UNetTrainer
        from medsegkit.losses import DeepSupervisionLoss

        def build(flag):
            ds = make_blob_dataset(n=8, size=16, seed=2)
            train, val = ds.fold(fold=0, k=4)
            trainer = UNetTrainer(
                tmp_path / ("ds" if flag else "plain"),
                DataLoader(train, batch_size=4),
                DataLoader(val),
            )
            trainer.unet_depth = 2
            trainer.unet_base_channels = 4
            trainer.deep_supervision = flag
            trainer.build_toolbox()
            return trainer

        plain = build(False)
        deep = build(True)
        assert isinstance(deep.toolbox.criterion, DeepSupervisionLoss)
        assert not isinstance(plain.toolbox.criterion, DeepSupervisionLoss)
        assert deep.toolbox.model.num_outputs == deep.toolbox.model.depth - 1
        assert plain.toolbox.model.num_outputs == 1
        # everything else identical
        assert type(plain.toolbox.optimizer) is type(deep.toolbox.optimizer)
        assert plain.toolbox.optimizer.param_groups[0]["lr"] == deep.toolbox.optimizer.param_groups[0]["lr"]
        assert type(plain.toolbox.scheduler) is type(deep.toolbox.scheduler)
        assert plain.padding.divisor == deep.padding.divisor


def test_format_table_alignment():
    table = format_table(["a", "bb"], [[1, 22], [333, 4]])
    lines = table.splitlines()
    assert len(lines) == 4
    assert all(len(line) == len(lines[0]) for line in lines)
