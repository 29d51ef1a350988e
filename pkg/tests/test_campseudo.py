import numpy as np
import pytest

from wsseg.campseudo import (
    ClassifierHp,
    ClassifierNet,
    aggregate_presence,
    compute_cam,
    image_cam,
    make_pseudomask,
    minmax_normalize_channels,
    multilabel_accuracy,
    multiscale_cam,
    train_classifier,
)
from wsseg.synthdata import PatchLabel, SynthConfig, crop_patches, generate_dataset


def separable_patchset(seed=3, side=48, patch=16, stride=8):
    cfg = SynthConfig(train_count=4, test_count=1, side=side, contrast=1.0, seed=seed)
    ds = generate_dataset(cfg)
    patches, labels, per_image = [], [], []
    for image, mask in zip(ds.train_images, ds.train_masks):
        pl = crop_patches(image, mask, patch, stride)
        patches.extend(p for p, _ in pl)
        labels.extend(r.label for _, r in pl)
        per_image.append((image, mask, [r.label for _, r in pl]))
    return patches, labels, per_image


class TestTraining:
    def test_zero_epochs_is_initialized_net(self):
        patches, labels, _ = separable_patchset()
        hp = ClassifierHp(epochs=0, seed=9)
        net, curve = train_classifier(patches, labels, hp)
        fresh = ClassifierNet(seed=9)
        assert curve == []
        assert net.params.allclose(fresh.params)

    def test_same_seed_bit_identical(self):
        patches, labels, _ = separable_patchset()
        hp = ClassifierHp(epochs=2, seed=4)
        net_a, curve_a = train_classifier(patches, labels, hp)
        net_b, curve_b = train_classifier(patches, labels, hp)
        assert curve_a == curve_b
        assert net_a.params.allclose(net_b.params)

    def test_separable_accuracy(self):
        patches, labels, _ = separable_patchset()
        net, curve = train_classifier(patches, labels, ClassifierHp(epochs=20, seed=0))
        assert curve[-1] < curve[0]
        assert multilabel_accuracy(net, patches, labels) >= 0.95

    def test_missing_class_rejected(self):
        patches, labels, _ = separable_patchset()
        only0 = [PatchLabel(presence=np.array([True, False]), n=1) for _ in labels]
        with pytest.raises(ValueError, match="class"):
            train_classifier(patches, only0, ClassifierHp(epochs=1))


class TestEvidence:
    def test_zero_classifier_gives_zero_map(self):
        net = ClassifierNet(seed=1)
        net.params.params["cls.weight"][...] = 0.0
        cam = compute_cam(net, np.random.default_rng(0).random((3, 16, 16)))
        np.testing.assert_array_equal(cam, 0.0)

    def test_constant_features_project_linearly(self):
        net = ClassifierNet(seed=2)
        fused = np.full((56, 4, 4), 2.0)
        weight = net.params.params["cls.weight"]
        out = net.project(fused)
        for cls in range(2):
            np.testing.assert_allclose(out[cls], weight[cls].sum() * 2.0, atol=1e-12)

    def test_scaling_classifier_scales_cam(self):
        net = ClassifierNet(seed=3)
        image = np.random.default_rng(1).random((3, 16, 16))
        base = compute_cam(net, image)
        net.params.params["cls.weight"][...] *= 2.5
        np.testing.assert_allclose(compute_cam(net, image), base * 2.5, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        net = ClassifierNet(seed=4)
        with pytest.raises(ValueError, match="channel"):
            compute_cam(net, np.zeros((1, 16, 16)))

    def test_cam_extent_matches_image(self):
        net = ClassifierNet(seed=5)
        cam = compute_cam(net, np.zeros((3, 21, 17)))
        assert cam.shape == (2, 21, 17)

    def test_trained_cam_separates_classes(self):
        for seed in range(5):
            patches, labels, per_image = separable_patchset(seed=10 + seed)
            net, _ = train_classifier(patches, labels, ClassifierHp(epochs=6, seed=seed))
            image, mask, _ = per_image[0]
            cam = compute_cam(net, image)
            assert cam[1][mask == 1].mean() > cam[1][mask == 0].mean()


class TestMultiscale:
    def test_single_scale_equals_normalized_cam(self):
        net = ClassifierNet(seed=6)
        image = np.random.default_rng(2).random((3, 16, 16))
        expected = minmax_normalize_channels(compute_cam(net, image))
        np.testing.assert_array_equal(multiscale_cam(net, image, [1.0]), expected)

    def test_duplicate_scale_idempotent(self):
        net = ClassifierNet(seed=6)
        image = np.random.default_rng(3).random((3, 16, 16))
        np.testing.assert_array_equal(
            multiscale_cam(net, image, [1.0, 1.0]), multiscale_cam(net, image, [1.0])
        )

    def test_zero_cam_stays_zero_after_normalization(self):
        net = ClassifierNet(seed=7)
        net.params.params["cls.weight"][...] = 0.0
        image = np.random.default_rng(4).random((3, 16, 16))
        np.testing.assert_array_equal(multiscale_cam(net, image, [1.0, 2.0]), 0.0)

    def test_small_scales_skipped_with_warning(self):
        net = ClassifierNet(seed=8)
        image = np.random.default_rng(5).random((3, 16, 16))
        with pytest.warns(UserWarning, match="skipped"):
            out = multiscale_cam(net, image, [0.25, 1.0])
        np.testing.assert_array_equal(out, multiscale_cam(net, image, [1.0]))

    def test_all_scales_skipped_errors(self):
        net = ClassifierNet(seed=8)
        image = np.zeros((3, 16, 16))
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError, match="skipped"):
                multiscale_cam(net, image, [0.1])

    def test_empty_or_negative_scales_rejected(self):
        net = ClassifierNet(seed=8)
        with pytest.raises(ValueError):
            multiscale_cam(net, np.zeros((3, 16, 16)), [])
        with pytest.raises(ValueError):
            multiscale_cam(net, np.zeros((3, 16, 16)), [-1.0])

    def test_output_in_unit_range(self):
        net = ClassifierNet(seed=9)
        image = np.random.default_rng(6).random((3, 24, 24))
        cam = multiscale_cam(net, image, [1.0, 1.25, 1.5])
        assert cam.min() >= 0.0 and cam.max() <= 1.0


class TestPseudoMask:
    def test_argmax_both_present(self):
        cam = np.array([0.3, 0.7]).reshape(2, 1, 1)
        assert make_pseudomask(cam, [True, True])[0, 0] == 1

    def test_absent_channel_suppressed(self):
        cam = np.array([0.3, 0.7]).reshape(2, 1, 1)
        assert make_pseudomask(cam, [True, False])[0, 0] == 0

    def test_tie_breaks_low(self):
        cam = np.array([0.5, 0.5]).reshape(2, 1, 1)
        assert make_pseudomask(cam, [True, True])[0, 0] == 0

    def test_all_suppressed_errors(self):
        with pytest.raises(ValueError, match="suppressed"):
            make_pseudomask(np.zeros((2, 1, 1)), [False, False])

    def test_argmax_invariant_to_joint_scaling(self):
        rng = np.random.default_rng(7)
        cam = rng.random((2, 6, 6))
        base = make_pseudomask(cam, [True, True])
        np.testing.assert_array_equal(make_pseudomask(cam * 3.7, [True, True]), base)

    def test_refinement_guarantee_on_pipeline(self):
        patches, labels, per_image = separable_patchset()
        net, _ = train_classifier(patches, labels, ClassifierHp(epochs=2, seed=11))
        for image, _, img_labels in per_image:
            presence = aggregate_presence(img_labels)
            cam = image_cam(net, image, 16, 8, [1.0])
            pseudo = make_pseudomask(cam, presence)
            for cls in np.unique(pseudo):
                assert presence[cls]

    def test_forced_single_class_refinement(self):
        patches, labels, per_image = separable_patchset()
        net, _ = train_classifier(patches, labels, ClassifierHp(epochs=2, seed=12))
        image, _, _ = per_image[0]
        cam = image_cam(net, image, 16, 8, [1.0])
        pseudo = make_pseudomask(cam, np.array([False, True]))
        np.testing.assert_array_equal(np.unique(pseudo), [1])


class TestPseudoMaskQuality:
    def test_train_miou_on_separable_data_over_seeds(self):
        from wsseg.segpipeline import evaluate
        from wsseg.synthdata import generate_dataset

        for seed in range(5):
            cfg = SynthConfig(
                train_count=3, test_count=1, side=48, contrast=1.0, seed=60 + seed
            )
            ds = generate_dataset(cfg)
            patches, labels, per_image = [], [], []
            for image, mask in zip(ds.train_images, ds.train_masks):
                pl = crop_patches(image, mask, 16, 8)
                patches.extend(p for p, _ in pl)
                labels.extend(r.label for _, r in pl)
                per_image.append((image, [r.label for _, r in pl]))
            net, _ = train_classifier(patches, labels, ClassifierHp(epochs=20, seed=seed))
            pseudos = [
                make_pseudomask(
                    image_cam(net, image, 16, 8, (1.0, 1.5)),
                    aggregate_presence(image_labels),
                )
                for image, image_labels in per_image
            ]
            assert evaluate(pseudos, ds.train_masks).miou >= 0.7


class TestStage1Determinism:
    def test_full_stage_reproducible(self):
        patches, labels, per_image = separable_patchset()
        outputs = []
        for _ in range(2):
            net, _ = train_classifier(patches, labels, ClassifierHp(epochs=2, seed=13))
            image, _, img_labels = per_image[0]
            cam = image_cam(net, image, 16, 8, [1.0, 1.5])
            outputs.append(make_pseudomask(cam, aggregate_presence(img_labels)))
        np.testing.assert_array_equal(outputs[0], outputs[1])
