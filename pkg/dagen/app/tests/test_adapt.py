# -*- coding: utf-8 -*-
import math
import os
import shutil
import tempfile
import unittest

import torch

from dagen.app.adapt import baseline_loss, baseline_terms, build_selection_mask, generate_target_prior, \
    masked_cross_entropy, pseudo_labels, total_uda_loss
from dagen.app.conditions import IGNORE, LabelMap
from dagen.app.datasets import BaseDataset, Sample, save_image, save_label
from dagen.app.segmentor import ToySegmentor, confusion_matrix, evaluate_miou, iou_from_confusion
from dagen.app.tests.helpers import label_map
from dagen.base.errors import AdaptationError

LAMBDAS = (0.0, 0.65, 0.75, 0.85, 0.95, 1.0)


class ThresholdSegmentor(object):
    """class 1 where the mean intensity exceeds 0.5"""

    def predict(self, image):
        gray = image.mean(dim=0)
        classes = (gray > 0.5).long()
        return LabelMap(classes, 2), (gray - 0.5).abs() + 0.5


class PerfectSegmentor(torch.nn.Module):
    """logits of +-50 at the classes of ``truth``"""

    def __init__(self, truth, num_classes):
        super().__init__()
        self.truth = truth
        self.num_classes = num_classes
        self.offset = torch.nn.Parameter(torch.zeros(()))

    def forward(self, images):
        safe = torch.where(self.truth == IGNORE, torch.zeros_like(self.truth), self.truth)
        one_hot = torch.nn.functional.one_hot(safe, self.num_classes).permute(0, 3, 1, 2).float()
        return one_hot * 100 - 50 + self.offset


def brute_force_mask(y_s, y_pred, confidence, lam):
    H, W = y_s.shape
    mask = torch.zeros(H, W, dtype=torch.bool)
    for i in range(H):
        for j in range(W):
            gt = int(y_s[i, j])
            if gt == IGNORE:
                continue
            if int(y_pred[i, j]) == gt:
                mask[i, j] = True
            elif float(confidence[i, j]) < lam:
                mask[i, j] = True
    return mask


class TestTargetPrior(unittest.TestCase):

    def setUp(self):
        self.root = tempfile.mkdtemp(prefix="dagen-prior-")

    def tearDown(self):
        shutil.rmtree(self.root, ignore_errors=True)

    def sample(self, name, image):
        path = os.path.join(self.root, name + ".png")
        save_image(path, image)
        return Sample(name, path, subdomain="night")

    def halves(self):
        image = torch.zeros(3, 8, 8)
        image[:, :, 4:] = 1.0
        return image

    def test_priors_match_threshold_map(self):
        dataset = BaseDataset([self.sample("a", self.halves())], 2)
        priors = generate_target_prior(dataset, ThresholdSegmentor(), "seg-1")
        self.assertEqual(len(priors), 1)
        expected = torch.zeros(8, 8, dtype=torch.long)
        expected[:, 4:] = 1
        self.assertTrue(torch.equal(priors[0].label.classes, expected))
        self.assertEqual(priors[0].checkpoint_id, "seg-1")
        self.assertEqual(priors[0].subdomain, "night")

    def test_rerun_is_identical(self):
        dataset = BaseDataset([self.sample("a", self.halves()), self.sample("b", 1 - self.halves())], 2)
        first = generate_target_prior(dataset, ThresholdSegmentor())
        second = generate_target_prior(dataset, ThresholdSegmentor())
        for a, b in zip(first, second):
            self.assertEqual(a.label, b.label)
            self.assertTrue(torch.equal(a.confidence, b.confidence))

    def test_unreadable_images_are_skipped(self):
        broken = os.path.join(self.root, "broken.png")
        with open(broken, "w") as f:
            f.write("not an image")
        dataset = BaseDataset([self.sample("a", self.halves()), Sample("broken", broken)], 2)
        with self.assertLogs("dagen.app.adapt", level="WARNING"):
            priors = generate_target_prior(dataset, ThresholdSegmentor())
        self.assertEqual([p.sample_id for p in priors], ["a"])

    def test_empty_result(self):
        with self.assertRaises(AdaptationError):
            generate_target_prior(BaseDataset([], 2), ThresholdSegmentor())


class TestSelectionMask(unittest.TestCase):

    def test_worked_example(self):
        y_s = label_map([[1, 2], [3, IGNORE]])
        y_pred = label_map([[1, 0], [0, 0]])
        confidence = torch.tensor([[.9, .9], [.5, .2]])
        selection = build_selection_mask(y_s, y_pred, confidence, 0.85)
        self.assertEqual(selection.mask.tolist(), [[True, False], [True, False]])
        self.assertEqual(selection.stats, {"agree": 1, "low_conf_disagree": 1, "high_conf_disagree": 1, "ignore": 1})

    def test_agreement_everywhere(self):
        y_s = label_map([[1, 2], [3, IGNORE]])
        for lam in LAMBDAS:
            mask = build_selection_mask(y_s, y_s, torch.full((2, 2), 0.99), lam).mask
            self.assertEqual(mask.tolist(), [[True, True], [True, False]])

    def test_matches_brute_force(self):
        generator = torch.Generator().manual_seed(0)
        for n in range(1000):
            lam = LAMBDAS[n % len(LAMBDAS)]
            y_s = torch.randint(0, 4, (8, 8), generator=generator)
            y_s[torch.rand(8, 8, generator=generator) < 0.1] = IGNORE
            y_pred = torch.randint(0, 4, (8, 8), generator=generator)
            confidence = torch.rand(8, 8, generator=generator)
            confidence[torch.rand(8, 8, generator=generator) < 0.05] = 1.0
            selection = build_selection_mask(LabelMap(y_s, 4), LabelMap(y_pred, 4), confidence, lam)
            self.assertTrue(torch.equal(selection.mask, brute_force_mask(y_s, y_pred, confidence, lam)))
            self.assertEqual(sum(selection.stats.values()), 64)
            self.assertFalse(bool((selection.mask & (y_s == IGNORE)).any()))

    def test_monotone_in_lambda(self):
        generator = torch.Generator().manual_seed(1)
        y_s = LabelMap(torch.randint(0, 4, (8, 8), generator=generator), 4)
        y_pred = LabelMap(torch.randint(0, 4, (8, 8), generator=generator), 4)
        confidence = torch.rand(8, 8, generator=generator)
        masks = [build_selection_mask(y_s, y_pred, confidence, lam).mask for lam in LAMBDAS]
        for smaller, larger in zip(masks, masks[1:]):
            self.assertFalse(bool((smaller & ~larger).any()))
        self.assertTrue(torch.equal(masks[0], y_s.classes == y_pred.classes))

    def test_lambda_one_keeps_all_but_certain(self):
        y_s = label_map([[1, 2]])
        y_pred = label_map([[0, 0]])
        mask = build_selection_mask(y_s, y_pred, torch.tensor([[1.0, 0.999]]), 1.0).mask
        self.assertEqual(mask.tolist(), [[False, True]])

    def test_checks(self):
        with self.assertRaises(AdaptationError):
            build_selection_mask(label_map([[1]]), label_map([[1, 1]]), torch.ones(1, 1), 0.5)
        with self.assertRaises(AdaptationError):
            build_selection_mask(label_map([[1]]), label_map([[1]]), torch.ones(1, 1), 1.5)


class TestMaskedCrossEntropy(unittest.TestCase):

    def test_uniform_logits(self):
        logits = torch.zeros(1, 19, 4, 4, dtype=torch.float64)
        target = torch.randint(0, 19, (1, 4, 4), generator=torch.Generator().manual_seed(0))
        loss = masked_cross_entropy(logits, target, torch.ones(1, 4, 4, dtype=torch.bool))
        self.assertAlmostEqual(float(loss), math.log(19), delta=1e-6)

    def test_empty_mask(self):
        logits = torch.randn(1, 3, 2, 2, requires_grad=True)
        loss = masked_cross_entropy(logits, torch.zeros(1, 2, 2, dtype=torch.long), torch.zeros(1, 2, 2))
        self.assertEqual(float(loss), 0.0)
        loss.backward()
        self.assertEqual(float(logits.grad.abs().sum()), 0.0)

    def test_confident_logits(self):
        target = torch.tensor([[[0, 2]]])
        logits = torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).double() * 10
        loss = masked_cross_entropy(logits, target, torch.ones(1, 1, 2, dtype=torch.bool))
        self.assertAlmostEqual(float(loss), math.log(1 + 2 * math.exp(-10)), places=12)

    def test_gradient_vanishes_outside_mask(self):
        generator = torch.Generator().manual_seed(1)
        logits = torch.randn(1, 4, 4, 4, generator=generator, dtype=torch.float64, requires_grad=True)
        target = torch.randint(0, 4, (1, 4, 4), generator=generator)
        mask = torch.rand(1, 4, 4, generator=generator) < 0.5
        masked_cross_entropy(logits, target, mask).backward()
        outside = ~mask[:, None].expand_as(logits)
        self.assertEqual(float(logits.grad[outside].abs().sum()), 0.0)
        self.assertGreater(float(logits.grad[~outside].abs().sum()), 0.0)

    def test_non_finite_logits(self):
        logits = torch.full((1, 3, 1, 1), float("nan"))
        with self.assertRaises(AdaptationError):
            masked_cross_entropy(logits, torch.zeros(1, 1, 1, dtype=torch.long), torch.ones(1, 1, 1))


class TestLosses(unittest.TestCase):

    def test_total_is_unweighted_sum(self):
        self.assertEqual(total_uda_loss(0.0, 3.0), 3.0)
        self.assertEqual(total_uda_loss(3.0, 0.0), 3.0)
        self.assertEqual(total_uda_loss(2.0, 3.0), 5.0)

    def test_perfect_segmentor_has_no_source_loss(self):
        labels = torch.randint(0, 4, (2, 4, 4), generator=torch.Generator().manual_seed(0))
        labels[0, 0, 0] = IGNORE
        segmentor = PerfectSegmentor(labels, 4)
        source, target = baseline_terms(segmentor, (torch.zeros(2, 3, 4, 4), labels), None)
        self.assertLess(float(source), 1e-12)
        self.assertEqual(float(target), 0.0)

    def test_empty_target_batch(self):
        segmentor = ToySegmentor(4, channels=4)
        images = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        labels = torch.randint(0, 4, (2, 8, 8), generator=torch.Generator().manual_seed(1))
        _, target = baseline_terms(segmentor, (images, labels), torch.zeros(0, 3, 8, 8))
        self.assertEqual(float(target), 0.0)

    def test_seeded_baseline(self):
        images = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        labels = torch.randint(0, 4, (2, 8, 8), generator=torch.Generator().manual_seed(1))
        values = []
        for _ in range(2):
            torch.manual_seed(3)
            values.append(float(baseline_loss(ToySegmentor(4, channels=4), (images, labels), images, 0.0)))
        self.assertEqual(values[0], values[1])

    def test_pseudo_labels(self):
        logits = torch.tensor([[[[4.0]], [[0.0]]], [[[0.1]], [[0.0]]]])
        labels, confident = pseudo_labels(logits, 0.9)
        self.assertEqual(labels.flatten().tolist(), [0, 0])
        self.assertEqual(confident.flatten().tolist(), [True, False])


class TestMIoU(unittest.TestCase):

    def test_confusion_and_iou(self):
        target = torch.tensor([[0, 0], [1, IGNORE]])
        prediction = torch.tensor([[0, 1], [1, 1]])
        confusion = confusion_matrix(prediction, target, 3)
        self.assertEqual(confusion.tolist(), [[1, 1, 0], [0, 1, 0], [0, 0, 0]])
        per_class, miou = iou_from_confusion(confusion, ["a", "b", "c"])
        self.assertEqual(per_class, {"a": 0.5, "b": 0.5})
        self.assertEqual(miou, 0.5)

    def test_evaluate_miou(self):
        root = tempfile.mkdtemp(prefix="dagen-miou-")
        self.addCleanup(shutil.rmtree, root, True)
        image = torch.zeros(3, 4, 4)
        image[:, :, :2] = 1.0
        truth = torch.zeros(4, 4, dtype=torch.long)
        truth[:, :2] = 1
        save_image(os.path.join(root, "a.png"), image)
        save_label(os.path.join(root, "a_label.png"), LabelMap(truth, 2))
        truth[0, 0] = 0
        save_image(os.path.join(root, "b.png"), image)
        save_label(os.path.join(root, "b_label.png"), LabelMap(truth, 2))
        dataset = BaseDataset([Sample("a", os.path.join(root, "a.png"), os.path.join(root, "a_label.png")),
                               Sample("b", os.path.join(root, "b.png"), os.path.join(root, "b_label.png"))], 2)
        report = evaluate_miou(ThresholdSegmentor(), dataset, ["dark", "bright"])
        self.assertEqual(report["images"], 2)
        self.assertAlmostEqual(report["per_class"]["bright"], 100.0 * 15 / 16)
        self.assertAlmostEqual(report["per_class"]["dark"], 100.0 * 16 / 17)
        self.assertAlmostEqual(report["miou"], 50.0 * (15 / 16 + 16 / 17))

    def test_evaluate_miou_needs_labels(self):
        dataset = BaseDataset([Sample("a", "a.png")], 2)
        with self.assertRaises(AdaptationError):
            evaluate_miou(ThresholdSegmentor(), dataset, ["dark", "bright"])
