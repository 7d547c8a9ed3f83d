import numpy as np
import pytest
import torch
from PIL import Image

from mitodet.classifier import (
    ClassifierInput,
    LabeledPatch,
    MaskInjectedResNet,
    ModelHandle,
    TrainConfig,
    build_model,
    load_models,
    make_scorer,
    make_training_set,
    predict,
    save_models,
    split_ids,
    train,
)
from mitodet.core import Label
from mitodet.errors import ConfigurationError

from conftest import make_record, make_separable_patches


def small_batch(n=4, size=64, seed=0):
    rng = np.random.default_rng(seed)
    rgb = torch.tensor(rng.random((n, 3, size, size)), dtype=torch.float32)
    mask = torch.tensor(rng.random((n, 1, size, size)) < 0.3, dtype=torch.float32)
    return rgb, mask


class TestModel:
    def test_zero_mask_encoder_is_rgb_baseline(self):
        torch.manual_seed(0)
        model = build_model(64).model
        model.eval()
        assert torch.count_nonzero(model.mask_encoder.weight) == 0
        rgb, mask = small_batch()
        with torch.no_grad():
            with_mask = model(rgb, mask)
            rgb_only = model(rgb, None)
        assert torch.equal(with_mask, rgb_only)

    def test_forward_shape(self):
        model = build_model(64).model
        rgb, mask = small_batch(n=5)
        scores = torch.sigmoid(model(rgb, mask))
        assert scores.shape == (5,)
        assert bool(((scores >= 0) & (scores <= 1)).all())

    def test_patch_size_must_match_stride(self):
        with pytest.raises(ConfigurationError):
            build_model(50)

    def test_pretrained_fallback_warns(self, monkeypatch):
        import mitodet.classifier as mod

        real = mod.resnet18

        def fake_resnet18(weights=None):
            if weights is not None:
                raise RuntimeError("no weights available offline")
            return real(weights=None)

        monkeypatch.setattr(mod, "resnet18", fake_resnet18)
        with pytest.warns(UserWarning, match="falling back"):
            handle = build_model(64, pretrained=True)
        assert isinstance(handle.model, MaskInjectedResNet)

    def _fd_check(self, parameter, model, rgb, mask, labels, n_probe=6, eps=1e-6):
        # float64 + tiny step: large steps cross ReLU/maxpool kinks and the
        # finite difference stops being a derivative estimate
        loss_fn = torch.nn.BCEWithLogitsLoss()

        def loss_value():
            return loss_fn(model(rgb, mask), labels)

        model.zero_grad()
        loss_value().backward()
        analytic = parameter.grad.detach().clone()
        rng = np.random.default_rng(0)
        flat = parameter.data.view(-1)
        indices = rng.choice(flat.numel(), size=n_probe, replace=False)
        for index in indices:
            original = flat[index].item()
            flat[index] = original + eps
            with torch.no_grad():
                up = loss_value().item()
            flat[index] = original - eps
            with torch.no_grad():
                down = loss_value().item()
            flat[index] = original
            fd = (up - down) / (2 * eps)
            an = analytic.view(-1)[index].item()
            scale = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / scale < 1e-3, (index, fd, an)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        model = build_model(64).model.double()
        # non-zero mask encoder so its gradient path is non-trivial
        torch.nn.init.normal_(model.mask_encoder.weight, std=0.05)
        model.train(False)
        rgb, mask = small_batch(n=4)
        rgb, mask = rgb.double(), mask.double()
        labels = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        self._fd_check(model.mask_encoder.weight, model, rgb, mask, labels)
        self._fd_check(model.backbone.conv1.weight, model, rgb, mask, labels)


class TestTrainingSet:
    def _manifest_with_image(self, tmp_path, n_mf=2, n_mlf=3, n_other=5):
        from mitodet.core import PixelGrid

        rng = np.random.default_rng(0)
        image = rng.integers(150, 255, size=(128, 128, 3)).astype(np.uint8)
        Image.fromarray(image).save(tmp_path / "img.png")
        grid = PixelGrid(128, 128, 0.25)
        records = []
        labels = [Label.MF] * n_mf + [Label.MLF] * n_mlf + [Label.OTHER] * n_other
        for i, label in enumerate(labels):
            x0 = 2 + (i % 20) * 6
            records.append(
                make_record(
                    record_id=f"rec{i}",
                    image_path="img.png",
                    label=label,
                    grid=grid,
                    bbox=(x0, 8, x0 + 4, 12),
                )
            )
        return records

    def test_class_mapping(self, tmp_path):
        records = self._manifest_with_image(tmp_path)
        patches = make_training_set(records, tmp_path, patch_size=32)
        assert sum(p.label for p in patches) == 2
        assert sum(1 - p.label for p in patches) == 8

    def test_edge_centroid_reflected(self, tmp_path):
        rng = np.random.default_rng(1)
        image = rng.integers(150, 255, size=(128, 128, 3)).astype(np.uint8)
        Image.fromarray(image).save(tmp_path / "edge.png")
        record = make_record(
            record_id="edge",
            image_path="edge.png",
            grid=None,
            bbox=(8, 8, 12, 12),  # centroid ~10 px from the edge
        )
        (patch,) = make_training_set([record], tmp_path, patch_size=64)
        assert patch.input.rgb.shape == (64, 64, 3)
        assert patch.input.mask.shape == (64, 64)
        assert patch.input.mask.any()

    def test_subsampled_counts_mirror_ratios(self, tmp_path):
        # counting harness: label ratios in the patch set equal manifest ratios
        records = self._manifest_with_image(tmp_path, n_mf=4, n_mlf=6, n_other=10)
        patches = make_training_set(records, tmp_path, patch_size=32)
        sub = patches[::2]
        n_pos = sum(p.label for p in sub)
        manifest_ratio = 4 / 20
        assert n_pos / len(sub) == pytest.approx(manifest_ratio, abs=0.1)


class TestSplit:
    def test_membership_deterministic(self):
        ids = [f"id{i}" for i in range(100)]
        a_train, a_val = split_ids(ids, seed=3, val_fraction=0.1)
        b_train, b_val = split_ids(list(reversed(ids)), seed=3, val_fraction=0.1)
        assert a_train == b_train and a_val == b_val
        assert len(a_val) == 10
        c_train, c_val = split_ids(ids, seed=4, val_fraction=0.1)
        assert c_val != a_val

    def test_partition(self):
        ids = {f"x{i}" for i in range(37)}
        train_ids, val_ids = split_ids(ids, seed=0, val_fraction=0.25)
        assert train_ids | val_ids == ids
        assert not (train_ids & val_ids)


def tiny_config(**overrides):
    defaults = dict(
        epochs=2,
        batch_size=16,
        micro_batch_size=16,
        seeds=(0,),
        patch_size_px=64,
        augment=None,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestTrain:
    def test_single_class_rejected(self):
        patches = [p for p in make_separable_patches(8) if p.label == 1]
        with pytest.raises(ConfigurationError):
            train(tiny_config(), patches)

    def test_loss_decreases_over_first_epoch(self):
        patches = make_separable_patches(16, seed=5)
        (handle,) = train(tiny_config(epochs=2, batch_size=8, micro_batch_size=8), patches)
        assert handle.history[1]["train_loss"] < handle.history[0]["train_loss"]

    def test_five_seeds_give_five_handles(self):
        patches = make_separable_patches(8, seed=6)
        config = tiny_config(epochs=1, seeds=(0, 1, 2, 3, 4))
        handles = train(config, patches)
        assert [h.seed for h in handles] == [0, 1, 2, 3, 4]
        weights = [
            h.model.backbone.conv1.weight.detach().numpy().copy() for h in handles
        ]
        for i in range(len(weights)):
            for j in range(i + 1, len(weights)):
                assert not np.array_equal(weights[i], weights[j])

    def test_same_seed_same_split(self):
        patches = make_separable_patches(10, seed=7)
        config = tiny_config(epochs=1, seeds=(3,))
        ids = [p.id for p in patches]
        first = split_ids(ids, 3, config.val_fraction)
        second = split_ids(ids, 3, config.val_fraction)
        assert first == second


class _ConstantModel(torch.nn.Module):
    def __init__(self, p):
        super().__init__()
        self.logit = float(np.log(p / (1 - p)))

    def forward(self, rgb, mask=None):
        return torch.full((rgb.shape[0],), self.logit)


def constant_handle(p):
    return ModelHandle(model=_ConstantModel(p), architecture={"constant": p})


class TestPredict:
    def _inputs(self, n=1):
        rng = np.random.default_rng(0)
        return [
            ClassifierInput(
                rgb=rng.integers(0, 255, size=(64, 64, 3)).astype(np.uint8),
                mask=np.ones((64, 64), dtype=bool),
            )
            for _ in range(n)
        ]

    def test_ensemble_mean(self):
        members = [constant_handle(p) for p in (0.9, 0.8, 0.7, 0.2, 0.1)]
        scores = predict(members, self._inputs(), ensemble=True)
        assert scores[0] == pytest.approx(0.54, abs=1e-6)
        assert scores[0] >= 0.5  # classified MF downstream

    def test_identical_members(self):
        members = [constant_handle(0.7) for _ in range(3)]
        scores = predict(members, self._inputs(2), ensemble=True)
        assert np.allclose(scores, 0.7, atol=1e-6)

    def test_majority_vote_mode(self):
        members = [constant_handle(p) for p in (0.9, 0.8, 0.2)]
        scores = predict(members, self._inputs(), ensemble=True, vote="majority")
        assert scores[0] == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            predict([], self._inputs())
        with pytest.raises(ConfigurationError):
            predict([constant_handle(0.5)], self._inputs(), ensemble=True)
        with pytest.raises(ConfigurationError):
            predict([constant_handle(0.5)] * 2, self._inputs(), ensemble=False)

    def test_ensemble_f1_at_least_min_member(self):
        # empirical check on noisy-informative members, not a theorem
        rng = np.random.default_rng(42)
        labels = rng.integers(0, 2, size=200)

        def f1_of(scores):
            pred = scores >= 0.5
            tp = np.count_nonzero(pred & (labels == 1))
            fp = np.count_nonzero(pred & (labels == 0))
            fn = np.count_nonzero(~pred & (labels == 1))
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            return 2 * p * r / (p + r) if p + r else 0.0

        for _ in range(20):
            members = np.clip(
                labels * 0.5 + 0.25 + rng.normal(0, 0.2, size=(5, 200)), 0, 1
            )
            ensemble = members.mean(axis=0)
            assert f1_of(ensemble) >= min(f1_of(m) for m in members)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path):
        patches = make_separable_patches(8, seed=9)
        config = tiny_config(epochs=1, seeds=(0, 1))
        handles = train(config, patches)
        save_models(handles, tmp_path / "models", config=config)
        loaded = load_models(tmp_path / "models")
        assert [h.seed for h in loaded] == [0, 1]
        inputs = [p.input for p in patches[:4]]
        original = predict(handles, inputs, ensemble=True)
        restored = predict(loaded, inputs, ensemble=True)
        assert np.allclose(original, restored, atol=1e-6)
        assert (tmp_path / "models" / "seed0" / "architecture.json").exists()
        assert (tmp_path / "models" / "seed0" / "train_config.json").exists()
        assert (tmp_path / "models" / "seed0" / "history.json").exists()
        assert (tmp_path / "models" / "seed0" / "weights.pt").exists()

    def test_load_empty_dir_fails(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigurationError):
            load_models(tmp_path / "empty")


class TestScorer:
    def test_make_scorer_shapes(self):
        handles = [constant_handle(0.9), constant_handle(0.7)]
        scorer = make_scorer(handles)
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 255, size=(3, 64, 64, 3)).astype(np.uint8)
        mask = np.ones((3, 64, 64), dtype=bool)
        scores = scorer(rgb, mask)
        assert scores.shape == (3,)
        assert np.allclose(scores, 0.8, atol=1e-6)
