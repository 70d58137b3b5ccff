# -*- coding: utf-8 -*-
import unittest

import torch

from dagen.app.conditions import IGNORE, argmax_decode, one_hot_encode
from dagen.app.prompt import EMPTY_PROMPT, ConstantCaptionProvider, HashedBagOfTokensEncoder, apply_prompt_dropout, \
    canonical_caption, compose_prompt, label_guidance, make_prompt_record
from dagen.app.tests.helpers import label_map, random_label
from dagen.base.errors import PromptError

NAMES = ["road", "building", "vegetation", "sky", "car", "person"]
ROAD, SKY, CAR = 0, 3, 4


class TestLabelGuidance(unittest.TestCase):

    def test_all_ignore(self):
        self.assertEqual(label_guidance(label_map([[IGNORE, IGNORE]]), NAMES), [])

    def test_order_by_count_then_index(self):
        label = label_map([[ROAD, ROAD], [CAR, SKY]])
        self.assertEqual(label_guidance(label, NAMES), ["road", "sky", "car"])

    def test_min_fraction(self):
        label = label_map([[ROAD, ROAD], [CAR, SKY]])
        self.assertEqual(label_guidance(label, NAMES, min_fraction=0.6), [])
        self.assertEqual(label_guidance(label, NAMES, min_fraction=0.5), ["road"])

    def test_ignore_excluded_from_fractions(self):
        label = label_map([[ROAD, IGNORE], [IGNORE, IGNORE]])
        self.assertEqual(label_guidance(label, NAMES, min_fraction=1.0), ["road"])

    def test_name_count_mismatch(self):
        with self.assertRaises(PromptError):
            label_guidance(label_map([[0]]), NAMES[:3])

    def test_invariant_under_one_hot_round_trip(self):
        generator = torch.Generator().manual_seed(3)
        for _ in range(10):
            label = random_label(generator)
            self.assertEqual(label_guidance(argmax_decode(one_hot_encode(label)), NAMES),
                             label_guidance(label, NAMES))


class TestComposePrompt(unittest.TestCase):

    def test_full(self):
        self.assertEqual(compose_prompt("night", "a city street", ["road", "car"]),
                         "night, a city street, with road, car.")

    def test_no_subdomain_no_guidance(self):
        self.assertEqual(compose_prompt("", "a city street", []), "a city street.")

    def test_no_caption(self):
        self.assertEqual(compose_prompt("foggy", "", ["building"]), "foggy, with building.")

    def test_everything_empty(self):
        self.assertEqual(compose_prompt("", "", []), EMPTY_PROMPT)

    def test_commas_are_stripped_from_captions(self):
        self.assertEqual(canonical_caption("a street, at night"), "a street at night")
        self.assertNotEqual(compose_prompt("", "a, b", ["car"]), compose_prompt("", "a", ["b", "car"]))

    def test_subdomain_only_changes_prefix(self):
        night = compose_prompt("night", "a city street", ["road"])
        snowy = compose_prompt("snowy", "a city street", ["road"])
        self.assertEqual(night[len("night"):], snowy[len("snowy"):])

    def test_record_validation(self):
        record = make_prompt_record("night", "a street", ["road"], ["night", "foggy"], NAMES)
        self.assertEqual(record.composed, "night, a street, with road.")
        with self.assertRaises(PromptError):
            make_prompt_record("sunny", "a street", [], ["night"], NAMES)
        with self.assertRaises(PromptError):
            make_prompt_record("night", "a street", ["road", "road"], ["night"], NAMES)
        with self.assertRaises(PromptError):
            make_prompt_record("night", "a street", ["tram"], ["night"], NAMES)


class TestPromptDropout(unittest.TestCase):

    def test_boundaries(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            self.assertEqual(apply_prompt_dropout("night.", 0.0, generator), "night.")
            self.assertEqual(apply_prompt_dropout("night.", 1.0, generator), EMPTY_PROMPT)

    def test_rate(self):
        generator = torch.Generator().manual_seed(1234)
        dropped = sum(1 for _ in range(100000) if apply_prompt_dropout("x.", 0.01, generator) == EMPTY_PROMPT)
        self.assertTrue(800 <= dropped <= 1200, dropped)

    def test_seeded(self):
        a = [apply_prompt_dropout("x.", 0.5, torch.Generator().manual_seed(7)) for _ in range(3)]
        b = [apply_prompt_dropout("x.", 0.5, torch.Generator().manual_seed(7)) for _ in range(3)]
        self.assertEqual(a, b)

    def test_invalid_probability(self):
        with self.assertRaises(PromptError):
            apply_prompt_dropout("x.", 1.5)


class TestCaptionsAndEncoder(unittest.TestCase):

    def test_constant_caption(self):
        provider = ConstantCaptionProvider("a photo of a street scene")
        self.assertEqual(provider(torch.zeros(3, 4, 4)), "a photo of a street scene")
        self.assertEqual(compose_prompt("night", ConstantCaptionProvider("")(None), ["road"]), "night, with road.")

    def test_encoder_width_and_empty_prompt(self):
        encoder = HashedBagOfTokensEncoder(width=16, buckets=64, seed=0)
        self.assertEqual(tuple(encoder.encode("night, a street.").shape), (16,))
        self.assertEqual(float(encoder.encode(EMPTY_PROMPT).abs().sum()), 0.0)
        self.assertEqual(tuple(encoder.encode_batch(["a", "b", ""]).shape), (3, 16))

    def test_distinct_prompts_differ(self):
        encoder = HashedBagOfTokensEncoder(width=16, buckets=1024, seed=0)
        self.assertFalse(torch.equal(encoder.encode("night, a street."), encoder.encode("foggy, a street.")))
        self.assertFalse(torch.equal(encoder.encode("a street"), encoder.encode("astreet")))
        self.assertTrue(torch.equal(encoder.encode("night, a street."), encoder.encode("night, a street.")))
