# -*- coding: utf-8 -*-
import filecmp
import json
import os
import unittest

import mock
import torch
from torch.optim.optimizer import register_optimizer_step_post_hook

from dagen.app import pipeline
from dagen.app.checkpoint import load_checkpoint, save_checkpoint
from dagen.app.config import DM_SECTIONS, config_hash
from dagen.app.diffusion import ddim_sample, training_loss
from dagen.app.manifest import GenerationManifest
from dagen.app.model import Checkpoint, ConditionItem
from dagen.app.tests.base import BaseStoreTest
from dagen.base.errors import AdaptationError, CheckpointError, ConfigError, DiffusionError, \
    ManifestCollisionError, PipelineError, PromptError, StageRefusedError, TrainingDivergedError
from dagen.maintenance.scripts.pipeline import split_vars, summarize


class PipelineTest(BaseStoreTest):

    def prepared(self, config=None):
        config = config or self.config
        pipeline.run_make_dataset(config)
        pipeline.run_train_seg(config)
        return pipeline.run_prepare(config)

    def trained(self, config=None):
        config = config or self.config
        self.prepared(config)
        pipeline.run_pretrain_dm(config)
        return pipeline.run_train_dm(config)

    def read_lines(self, *parts):
        with open(os.path.join(self.out, *parts)) as f:
            return [json.loads(line) for line in f if line.strip()]


class TestPreparation(PipelineTest):

    def test_make_data(self):
        root = pipeline.run_make_dataset(self.config)
        self.assertEqual(pipeline.run_make_dataset(self.config), root)
        self.assertTrue(os.path.exists(os.path.join(root, "dataset.json")))
        with self.assertRaises(StageRefusedError):
            pipeline.run_make_dataset(self.reconfigure({"dataset.seed": "4"}))

    def test_prepare_needs_a_segmentor(self):
        pipeline.run_make_dataset(self.config)
        with self.assertRaises(CheckpointError):
            pipeline.run_prepare(self.config)

    def test_prepare_resumes(self):
        summary = self.prepared()
        self.assertEqual(summary, {"written": 8, "skipped": 0, "failed": 0})
        self.assertEqual(ConditionItem.count("source"), 4)
        self.assertEqual(ConditionItem.count("target"), 4)
        self.assertEqual(pipeline.run_prepare(self.config), {"written": 0, "skipped": 8, "failed": 0})

        row = ConditionItem.all("target")[0]
        with open(os.path.join(self.out, row["sketch_path"]), "ab") as f:
            f.write(b"stale")
        self.assertEqual(pipeline.run_prepare(self.config), {"written": 1, "skipped": 7, "failed": 0})

    def test_prepared_items(self):
        self.prepared()
        source = ConditionItem.all("source")[0]
        self.assertEqual(source["subdomain"], "")
        self.assertTrue(os.path.isabs(source["gt_label_path"]))
        self.assertIsNone(source["confidence_path"])
        self.assertEqual(source["caption"], "a photo of a street scene")
        target = ConditionItem.all("target")[0]
        self.assertIn(target["subdomain"], ("night", "foggy"))
        self.assertIsNone(target["gt_label_path"])
        self.assertTrue(os.path.exists(os.path.join(self.out, target["confidence_path"])))
        records = pipeline.load_condition_records(self.config, "target")
        self.assertEqual(len(records), 4)
        self.assertEqual(records[0].label.height, 64)

    def test_store_refuses_other_config(self):
        with self.assertRaises(PipelineError):
            pipeline.store_rows(self.config, "source")
        self.prepared()
        with self.assertRaises(StageRefusedError):
            pipeline.store_rows(self.reconfigure({"prompt.caption": "a street"}), "source")

    def test_evaluate(self):
        self.prepared()
        report = pipeline.run_evaluate(self.config)
        self.assertEqual(report["name"], "segmentor-baseline")
        self.assertEqual(sorted(report["subdomains"]), ["foggy", "night"])
        self.assertEqual(report["overall"]["images"], 4)
        self.assertEqual(report["source"]["images"], 2)
        self.assertGreaterEqual(report["source"]["miou"], 0.0)
        self.assertLessEqual(report["source"]["miou"], 100.0)
        self.assertTrue(os.path.exists(os.path.join(self.out, "reports", "evaluate-segmentor-baseline.json")))


class TestDiffusionTraining(PipelineTest):

    def test_train_dm(self):
        self.prepared()
        pipeline.run_pretrain_dm(self.config)
        with mock.patch("dagen.app.pipeline.training_loss", wraps=training_loss) as loss:
            result = pipeline.run_train_dm(self.config)
        self.assertEqual(loss.call_count, 4 * 2)
        self.assertEqual(result["initial"]["step"], 1)
        self.assertEqual(result["final"]["step"], 4)
        meta = result["final"]["meta"]
        self.assertEqual(meta["accumulation"], 2)
        self.assertEqual(meta["epoch_steps"], 2)
        self.assertEqual(meta["initial_step"], 1)
        self.assertEqual(meta["prompt_dropout"], 0.01)
        self.assertIsNotNone(meta["base"])
        lines = self.read_lines("logs", "train_log.jsonl")
        self.assertEqual([line["step"] for line in lines], [1, 2, 3, 4])
        self.assertTrue(all(line["loss"] > 0 for line in lines))

    def test_accumulation_steps_the_optimizer_once_per_period(self):
        self.prepared()
        config = self.reconfigure({"dm.accumulation": "4", "dm.steps": "2", "dm.initial_checkpoint": "1"})
        pipeline.run_pretrain_dm(config)
        updates = []
        handle = register_optimizer_step_post_hook(lambda optimizer, args, kwargs: updates.append(optimizer))
        try:
            with mock.patch("dagen.app.pipeline.training_loss", wraps=training_loss) as loss:
                result = pipeline.run_train_dm(config)
        finally:
            handle.remove()
        self.assertEqual(loss.call_count, 2 * 4)
        self.assertEqual(len(updates), 2)
        self.assertEqual(result["final"]["meta"]["accumulation"], 4)

    def test_deterministic(self):
        first = self.trained()
        second = pipeline.run_train_dm(self.config)
        self.assertEqual(first["final"]["content_hash"], second["final"]["content_hash"])
        self.assertEqual(first["initial"]["content_hash"], second["initial"]["content_hash"])

    def test_initial_step_expression(self):
        self.prepared()
        result = pipeline.run_train_dm(self.reconfigure({"dm.initial_checkpoint": "epoch"}))
        self.assertEqual(result["initial"]["step"], 2)
        with self.assertRaises(ConfigError):
            pipeline.run_train_dm(self.reconfigure({"dm.initial_checkpoint": "epochs"}))

    def test_untrained_base(self):
        self.prepared()
        with self.assertLogs("dagen.app.pipeline", level="WARNING"):
            result = pipeline.run_train_dm(self.config)
        self.assertIsNone(result["final"]["meta"]["base"])

    def test_divergence(self):
        self.prepared()
        calls = []

        def diverging(*args, **kwargs):
            calls.append(1)
            if len(calls) == 3:
                raise DiffusionError("non-finite training loss")
            return training_loss(*args, **kwargs)

        with mock.patch("dagen.app.pipeline.training_loss", side_effect=diverging):
            with self.assertRaises(TrainingDivergedError) as ctx:
                pipeline.run_train_dm(self.config)
        row = Checkpoint.get_by_name("dm-last-good")
        self.assertEqual(row["content_hash"], ctx.exception.last_good)
        self.assertEqual(row["step"], 1)
        self.assertEqual(row["meta"]["diverged_at"], 2)
        self.assertIsNone(Checkpoint.get_by_name("dm-final"))


class TestGeneration(PipelineTest):
    overrides = {"sampling.policy": "each"}

    def test_generate_replay_and_collide(self):
        self.trained()
        manifest = pipeline.run_generate(self.config)
        self.assertEqual(len(manifest), 8)
        self.assertEqual(sorted(set(r["subdomain"] for r in manifest)), ["foggy", "night"])
        record = manifest.records[0]
        self.assertEqual(record["status"], "ok")
        self.assertEqual(record["checkpoint"], "final")
        self.assertIn(record["subdomain"], record["prompt"])
        self.assertEqual(record["sampler"], {"kind": "ddim", "steps": 4, "eta": 0, "resolution": [64, 64]})
        self.assertTrue(os.path.exists(manifest.resolve(record["image_path"])))

        again = pipeline.run_generate(self.config)
        self.assertEqual(len(again), 8)
        self.assertEqual(len(GenerationManifest(manifest.path)), 8)

        replayed = pipeline.replay_manifest(self.config, manifest.path, os.path.join(self.out, "replay"))
        self.assertEqual(len(replayed), 8)
        for record, path in zip(manifest.records, replayed):
            self.assertTrue(filecmp.cmp(manifest.resolve(record["image_path"]), path, shallow=False))

        row, archive = load_checkpoint(self.out, "dm-final")
        parameters = {k: v + 0.01 if v.is_floating_point() else v for k, v in archive["parameters"].items()}
        save_checkpoint(self.out, "dm-final", "dm", parameters, config_hash(self.config, DM_SECTIONS), 4,
                        archive["schedule"])
        with self.assertRaises(ManifestCollisionError):
            pipeline.run_generate(self.config)

    def test_target_prior_from_initial(self):
        self.trained()
        manifest = pipeline.run_generate(self.config, checkpoint="initial", condition_source="target_prior")
        self.assertEqual(len(manifest), 8)
        self.assertTrue(manifest.path.endswith("target_prior-initial.jsonl"))
        self.assertTrue(all(r["gt_label_path"] is None for r in manifest))
        self.assertTrue(all(r["checkpoint"] == "initial" for r in manifest))

        final = pipeline.run_generate(self.config, condition_source="target_prior")
        by_key = dict(((r["seed"], r["label_path"], r["subdomain"]), r) for r in final)
        differing = 0
        for record in manifest:
            other = by_key[(record["seed"], record["label_path"], record["subdomain"])]
            self.assertEqual(other["prompt"], record["prompt"])
            if not filecmp.cmp(manifest.resolve(record["image_path"]), final.resolve(other["image_path"]),
                               shallow=False):
                differing += 1
        self.assertGreater(differing, 0)

    def test_decode_failure_is_retried(self):
        self.trained()
        calls = []

        def failing_once(model, zT, *args):
            calls.append(zT)
            if len(calls) == 1:
                return torch.full_like(zT, float("nan"))
            return ddim_sample(model, zT, *args)

        with mock.patch("dagen.app.pipeline.ddim_sample", side_effect=failing_once):
            manifest = pipeline.run_generate(self.config)
        failed = [r for r in manifest if r["status"] == "decode_failed"]
        self.assertEqual(len(failed), 1)
        self.assertEqual(len(manifest.ok_records()), 7)

        again = pipeline.run_generate(self.config)
        self.assertEqual(len(again), 8)
        self.assertEqual(len(again.ok_records()), 8)
        reloaded = GenerationManifest(manifest.path)
        self.assertEqual(len(reloaded.ok_records()), 8)
        retried = reloaded.lookup(failed[0]["seed"], failed[0]["label_path"], "final", failed[0]["subdomain"])
        self.assertEqual(retried["status"], "ok")
        self.assertTrue(os.path.exists(reloaded.resolve(retried["image_path"])))
        with open(manifest.path) as f:
            self.assertEqual(len(f.read().splitlines()), 9)
        self.assertEqual(len(pipeline.run_generate(self.config)), 8)

    def test_sampling_errors_are_not_recorded(self):
        self.trained()
        with mock.patch("dagen.app.pipeline.ddim_sample", side_effect=OSError("device lost")):
            with self.assertRaises(OSError):
                pipeline.run_generate(self.config)
        self.assertEqual(len(GenerationManifest(os.path.join(self.out, "manifests", "source_labels-final.jsonl"))), 0)

    def test_invalid_arguments(self):
        with self.assertRaises(PipelineError):
            pipeline.run_generate(self.config, checkpoint="best")
        with self.assertRaises(PipelineError):
            pipeline.run_generate(self.config, condition_source="target_labels")

    def test_subdomain_policies(self):
        names = ["night", "foggy", "rainy"]
        self.assertEqual(pipeline.choose_subdomains("each", names, 0, 0, 1, 5), names)
        self.assertEqual([pipeline.choose_subdomains("round_robin", names, i, 0, 1, 5)[0] for i in range(4)],
                         ["night", "foggy", "rainy", "night"])
        uniform = pipeline.choose_subdomains("uniform", names, 0, 0, 1, 5)
        self.assertEqual(uniform, pipeline.choose_subdomains("uniform", names, 3, 0, 1, 5))
        self.assertIn(uniform[0], names)


class TestRefinement(PipelineTest):
    overrides = {"sampling.limit": "2"}

    def generated(self):
        self.trained()
        return [
            pipeline.run_generate(self.config).path,
            pipeline.run_generate(self.config, condition_source="target_prior").path,
            pipeline.run_generate(self.config, checkpoint="initial", condition_source="target_prior").path,
        ]

    def test_refine(self):
        manifests = self.generated()
        result = pipeline.run_refine(self.config, manifests)
        self.assertEqual(result["lambda"], 0.85)
        self.assertIsNotNone(result["pre_miou"])
        self.assertIsNotNone(result["post_miou"])
        self.assertEqual(Checkpoint.get_by_name("segmentor-refined")["content_hash"], result["checkpoint"])
        self.assertEqual(len(self.read_lines("logs", "refine_log.jsonl")), 2)
        stats = self.read_lines("logs", "selection_stats.jsonl")
        self.assertEqual([line["step"] for line in stats], [1, 2])
        source_ids = set(r["record_id"] for r in GenerationManifest(manifests[0]))
        for line in stats:
            pixels = line["agree"] + line["low_conf_disagree"] + line["high_conf_disagree"] + line["ignore"]
            self.assertEqual(pixels, 64 * 64)
            self.assertIn(line["record_id"], source_ids)
            self.assertEqual(line["kept"], line["agree"] + line["low_conf_disagree"])
            self.assertAlmostEqual(line["kept_fraction"], line["kept"] / float(64 * 64 - line["ignore"]))
            self.assertEqual(line["lambda"], 0.85)
        evaluated = pipeline.run_evaluate(self.config, "segmentor-refined")
        self.assertEqual(evaluated["name"], "segmentor-refined")

        results = pipeline.sweep_lambda(self.config, manifests)
        self.assertEqual([r["setting"] for r in results], ["none", "0.85"])
        self.assertEqual(results[0]["lambda"], 0.0)
        with open(os.path.join(self.out, "reports", "sweep_lambda.txt")) as f:
            self.assertEqual(len(f.read().splitlines()), 3)

        report = pipeline.run_metrics(self.config, manifests[1])
        self.assertEqual(report["source"], manifests[1])
        self.assertEqual(report["images"], 2)

    def test_selection_stats_per_image(self):
        manifests = self.generated()
        pipeline.run_refine(self.reconfigure({"refine.batch_size": "2"}), manifests)
        stats = self.read_lines("logs", "selection_stats.jsonl")
        self.assertEqual([(line["step"], line["index"]) for line in stats], [(1, 0), (1, 1), (2, 0), (2, 1)])
        for line in stats:
            self.assertGreaterEqual(line["kept_fraction"], 0.0)
            self.assertLessEqual(line["kept_fraction"], 1.0)

    def test_refine_needs_enabled_sets(self):
        self.trained()
        manifests = [pipeline.run_generate(self.config).path]
        with self.assertRaises(AdaptationError):
            pipeline.run_refine(self.config, manifests)
        only_s2t = self.reconfigure({"refine.use_final": "false", "refine.use_init": "false"})
        result = pipeline.run_refine(only_s2t, manifests)
        self.assertEqual(result["name"], "segmentor-refined")

    def test_refine_without_target_data(self):
        self.trained()
        manifests = [pipeline.run_generate(self.config).path]
        source_only = self.reconfigure({"refine.use_target": "false", "refine.use_final": "false",
                                        "refine.use_init": "false"})
        result = pipeline.run_refine(source_only, manifests, name="segmentor-no-target")
        self.assertEqual(Checkpoint.get_by_name("segmentor-no-target")["content_hash"], result["checkpoint"])
        self.assertIsNotNone(result["post_miou"])

    def test_refine_refuses_other_generation_config(self):
        self.trained()
        manifests = [pipeline.run_generate(self.config).path]
        other = self.reconfigure({"sampling.steps": "2", "refine.use_final": "false", "refine.use_init": "false"})
        with self.assertRaises(StageRefusedError):
            pipeline.run_refine(other, manifests)

    def test_metrics_on_the_fly(self):
        self.trained()
        report = pipeline.run_metrics(self.config)
        self.assertEqual(report["images"], 2)
        self.assertEqual(report["source"], "on-the-fly")
        self.assertGreaterEqual(report["ms_ssim"], 0.0)
        self.assertLessEqual(report["ms_ssim"], 1.0)
        self.assertTrue(os.path.exists(os.path.join(self.out, "reports", "metrics.txt")))


class TestPrompts(BaseStoreTest):

    def test_prompt_for(self):
        self.assertEqual(pipeline.prompt_for(self.config, "night", "a street, wet", ["road", "car"]),
                         "night, a street wet, with road, car.")
        self.assertEqual(pipeline.prompt_for(self.config, "", "", []), "")
        plain = self.reconfigure({"prompt.label_guidance": "false"})
        self.assertEqual(pipeline.prompt_for(plain, "foggy", "a street", ["road"]), "foggy, a street.")

    def test_prompt_for_rejects_unknown_names(self):
        with self.assertRaises(PromptError):
            pipeline.prompt_for(self.config, "sunny", "a street", [])
        with self.assertRaises(PromptError):
            pipeline.prompt_for(self.config, "night", "a street", ["tram"])
        with self.assertRaises(PromptError):
            pipeline.prompt_for(self.config, "night", "a street", ["road", "road"])


class TestPipelineEntry(BaseStoreTest):

    def test_unknown_stage(self):
        with self.assertRaises(PipelineError):
            pipeline.Pipeline(self.config).run("train-everything")

    def test_main(self):
        import dagen
        from dagen.app.tests.helpers import make_settings

        with mock.patch.dict(os.environ, {"DAGEN_STORE_URL": "sqlite:///%s" % os.path.join(self.out, "other.sqlite")}):
            runner = dagen.main({}, **make_settings(self.out))
        self.assertIsInstance(runner, pipeline.Pipeline)
        self.assertTrue(runner.config.sqlalchemy.url.endswith("other.sqlite"))
        self.assertTrue(os.path.exists(os.path.join(self.out, "other.sqlite")))

    def test_initialize_resets_the_store(self):
        from dagen.app.tests.helpers import make_settings
        from dagen.maintenance.scripts.initializedb import initialize

        ConditionItem.upsert(item_id="s1", domain="source", subdomain="", image_path="i.png", gt_label_path=None,
                             label_path="l.png", sketch_path="s.png", caption="", guidance=[], input_hash="x",
                             content_hash="y", config_hash="c")
        engine = initialize(make_settings(self.out), {"reset_db": "true"})
        self.assertEqual(ConditionItem.count(), 0)
        engine.dispose()

    def test_quickstart(self):
        from dagen.maintenance.scripts import quickstart

        target = os.path.join(self.out, "project")
        quickstart.main(["dagen_quickstart", target])
        ini_path = os.path.join(target, "production.ini")
        self.assertFalse(os.path.exists(os.path.join(target, "__init__.py")))
        run = os.path.join(os.path.abspath(target), "run")
        with open(ini_path) as f:
            text = f.read()
        self.assertIn("paths.out = %s\n" % run, text)
        self.assertIn("sqlalchemy.url = sqlite:///%s\n" % os.path.join(run, "store.sqlite"), text)
        for name in quickstart.RUN_DIRS:
            self.assertTrue(os.path.isdir(os.path.join(run, name)))
        self.assertTrue(os.path.exists(os.path.join(run, "store.sqlite")))
        self.assertEqual(list(Checkpoint.all()), [])
        self.assertEqual(ConditionItem.count(), 0)

        with mock.patch("dagen.maintenance.scripts.quickstart.create_project") as create:
            quickstart.main(["dagen_quickstart", target])
        self.assertFalse(create.called)


class TestCommandLine(unittest.TestCase):

    def test_split_vars(self):
        overrides, kwargs = split_vars("generate", {"checkpoint": "initial", "dm.steps": "9", "out": "/tmp/x"})
        self.assertEqual(overrides, {"dm.steps": "9", "paths.out": "/tmp/x"})
        self.assertEqual(kwargs, {"checkpoint": "initial"})

    def test_refine_vars(self):
        _, kwargs = split_vars("refine", {"manifests": "a.jsonl,b.jsonl", "lambda": "0.75"})
        self.assertEqual(kwargs, {"manifests": ["a.jsonl", "b.jsonl"], "lam": 0.75})
        with self.assertRaises(PipelineError):
            split_vars("refine", {"lambda": "0.75"})
        with self.assertRaises(PipelineError):
            split_vars("refine", {"manifests": "a.jsonl", "lambda": "high"})
        with self.assertRaises(PipelineError):
            split_vars("replay", {"manifest": "a.jsonl"})

    def test_evaluate_vars(self):
        overrides, kwargs = split_vars("evaluate", {"checkpoint": "segmentor-refined", "seed": "3"})
        self.assertEqual(kwargs, {"reference": "segmentor-refined"})
        self.assertEqual(overrides, {"seed": "3"})

    def test_summarize(self):
        self.assertEqual(summarize({"a": 1}), {"a": 1})
        self.assertIsNone(summarize(None))
        manifest = GenerationManifest(os.path.join("missing-dir", "m.jsonl"))
        manifest.records = [{}, {}, {}]
        self.assertEqual(summarize(manifest), {"manifest": os.path.join("missing-dir", "m.jsonl"), "records": 3})
