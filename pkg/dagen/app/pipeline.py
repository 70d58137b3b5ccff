# -*- coding: utf-8 -*-
"""the pipeline stages.

make-data -> train-seg -> prepare -> pretrain-dm -> train-dm -> generate ->
refine (and sweep-lambda) -> metrics / evaluate. Every stage reads its inputs
from the output directory, refuses artifacts written under another config
hash and can be re-run to resume.
"""
import json
import logging
import math
import os

import torch
from sqlalchemy import create_engine

from dagen.app.adapt import baseline_loss, build_selection_mask, generate_target_prior, masked_cross_entropy, \
    total_uda_loss
from dagen.app.checkpoint import load_checkpoint, save_checkpoint
from dagen.app.conditions import LabelMap, build_multiscale_batch, extract_sketch, fuse_labels, one_hot_encode, \
    resize_image, resize_label
from dagen.app.config import BASE_DM_SECTIONS, DM_SECTIONS, GENERATION_SECTIONS, REFINE_SECTIONS, \
    SEGMENTOR_SECTIONS, STORE_SECTIONS, config_hash
from dagen.app.datasets import BaseDataset, dataset_root, load_image, load_label, load_sketch, open_dataset, \
    save_confidence, save_image, save_label, save_sketch, write_synthetic_dataset
from dagen.app.denoiser import DenoiserFeatureEmbedder, build_base_denoiser, build_controlled_denoiser
from dagen.app.diffusion import autoencoder_from_config, ddim_sample, make_ddim_timesteps, schedule_from_config, \
    training_loss
from dagen.app.formular import FormularEvaluationException, evaluate_step_expression
from dagen.app.manifest import STATUS_DECODE_FAILED, STATUS_OK, GenerationManifest
from dagen.app.metrics import format_report_table, paired_generation_protocol
from dagen.app.model import ConditionItem
from dagen.app.prompt import ConstantCaptionProvider, apply_prompt_dropout, label_guidance, make_prompt_record, \
    text_encoder_from_config
from dagen.app.segmentor import build_segmentor, evaluate_miou
from dagen.base.errors import AdaptationError, CheckpointError, ConditionError, ConfigError, DecodeFailedError, \
    DiffusionError, ManifestCollisionError, PipelineError, StageRefusedError, TrainingDivergedError
from dagen.base.util import derive_seed, sha256_files, sha256_json
from dagen.metadata import DBSession, init_db, init_session

log = logging.getLogger(__name__)

CHECKPOINT_SOURCES = ("final", "initial")
CONDITION_SOURCES = ("source_labels", "target_prior")
EMA_DECAY = 0.98


# plumbing

def store_url(config):
    if "sqlalchemy" in config and "url" in config.sqlalchemy:
        return config.sqlalchemy.url
    return "sqlite:///%s" % os.path.abspath(os.path.join(config.paths.out, "store.sqlite"))


def open_store(config):
    """bind DBSession to the configured store and create missing tables"""
    os.makedirs(config.paths.out, exist_ok=True)
    engine = create_engine(store_url(config))
    init_session()
    DBSession.remove()
    init_db(engine)
    return engine


def out_path(config, *parts):
    return os.path.join(config.paths.out, *parts)


def seeded(config, *parts):
    return torch.Generator().manual_seed(derive_seed(config.seed, *parts))


def seed_torch(config, *parts):
    torch.manual_seed(derive_seed(config.seed, *parts))


def device_of(config):
    return torch.device(config.dm.device)


class JsonLinesLog(object):
    """structured per-step records next to the regular log output"""

    def __init__(self, path, truncate=True):
        self.path = path
        os.makedirs(os.path.dirname(path), exist_ok=True)
        if truncate and os.path.exists(path):
            os.remove(path)

    def write(self, record):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_split(dataset, with_labels=True):
    """(images, labels) stacked tensors of a whole split; labels is None when unlabelled"""
    images, labels = [], []
    for sample in dataset:
        try:
            image = dataset.load_image(sample)
            label = dataset.load_label(sample).classes if with_labels else None
        except ConditionError as e:
            log.warning("skipping %s: %s", sample.sample_id, e.message)
            continue
        images.append(image)
        if with_labels:
            labels.append(label)
    if not images:
        return torch.zeros(0, 3, 1, 1), None
    return torch.stack(images), (torch.stack(labels) if with_labels else None)


def draw(generator, count, size):
    if count == 0 or size == 0:
        return torch.zeros(0, dtype=torch.long)
    return torch.randint(0, size, (count,), generator=generator)


# make-data

def run_make_dataset(config):
    """write the synthetic benchmark once; a marker records the dataset settings"""
    if config.dataset.kind != "synthetic":
        log.info("using the real datasets under %s and %s", config.dataset.cityscapes_root, config.dataset.acdc_root)
        return None
    root = dataset_root(config)
    marker = os.path.join(root, "dataset.json")
    settings_hash = config_hash(config, ("dataset", "classes", "subdomains"))
    if os.path.exists(marker):
        with open(marker) as f:
            if json.load(f).get("config_hash") == settings_hash:
                log.info("synthetic dataset under %s is complete", root)
                return root
        raise StageRefusedError("dataset under %s was written with other settings" % root)
    ds = config.dataset
    counts = {"source": ds.source_count, "source_val": ds.source_val_count,
              "target": ds.target_count, "val": ds.val_count}
    write_synthetic_dataset(root, counts, ds.size, config.subdomains.names, ds.seed, len(config.classes.names))
    with open(marker, "w") as f:
        json.dump({"config_hash": settings_hash, "counts": counts}, f, sort_keys=True)
    return root


# train-seg

def segmentor_reference(config):
    return config.paths.segmentor_checkpoint or "segmentor-baseline"


def load_segmentor(config, reference=None, expected_config_hash=None):
    row, archive = load_checkpoint(config.paths.out, reference or segmentor_reference(config), kind="segmentor",
                                   expected_config_hash=expected_config_hash)
    segmentor = build_segmentor(config)
    segmentor.load_state_dict(archive["parameters"])
    segmentor.eval()
    return row, segmentor


def run_train_seg(config):
    """train the pre-refinement segmentor: source supervision plus target self-training"""
    source_images, source_labels = load_split(open_dataset(config, "source", "train"))
    target_images, _ = load_split(open_dataset(config, "target", "train"), with_labels=False)
    if source_images.shape[0] == 0:
        raise PipelineError("no source training images")
    seed_torch(config, "segmentor", "init")
    segmentor = build_segmentor(config)
    optimizer = torch.optim.AdamW(segmentor.parameters(), lr=config.segmentor.lr, weight_decay=0.01)
    generator = seeded(config, "segmentor", "batches")
    bs = config.segmentor.batch_size
    ema = None
    segmentor.train()
    for step in range(1, config.segmentor.steps + 1):
        si = draw(generator, bs, source_images.shape[0])
        ti = draw(generator, bs, target_images.shape[0])
        loss = baseline_loss(segmentor, (source_images[si], source_labels[si]),
                             target_images[ti] if ti.numel() else None,
                             config.refine.pseudo_threshold, config.classes.ignore)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        ema = float(loss) if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * float(loss)
        if step % config.segmentor.log_every == 0:
            log.info("train-seg step %s loss %.4f", step, ema)
    segmentor.eval()
    report = {}
    val = open_dataset(config, "target", "val")
    if len(val) and val.labelled:
        report = evaluate_miou(segmentor, val, config.classes.names)
        log.info("baseline segmentor target val mIoU %.2f", report["miou"])
    return save_checkpoint(config.paths.out, "segmentor-baseline", "segmentor", segmentor.state_dict(),
                           config_hash(config, SEGMENTOR_SECTIONS), config.segmentor.steps,
                           metadata={"target_val_miou": report.get("miou")})


# prepare

def _store_files(config, domain, sample):
    stem = sample.sample_id.replace("/", "_")
    folder = os.path.join("store", domain)
    files = {"label_path": os.path.join(folder, stem + "_label.png"),
             "sketch_path": os.path.join(folder, stem + "_sketch.png")}
    if domain == "target":
        files["confidence_path"] = os.path.join(folder, stem + "_confidence.png")
    return files


def _is_current(row, input_hash, config):
    if row is None or row["input_hash"] != input_hash:
        return False
    outputs = [row["label_path"], row["sketch_path"]] + ([row["confidence_path"]] if row["confidence_path"] else [])
    return row["content_hash"] == sha256_files([out_path(config, p) for p in outputs])


def run_prepare(config):
    """persist fused source labels, target priors, sketches and captions.

    Items whose inputs and stored outputs still hash to the recorded values are
    skipped, so an interrupted run resumes where it stopped.
    """
    seg_row, segmentor = load_segmentor(config)
    store_hash = config_hash(config, STORE_SECTIONS)
    captions = ConstantCaptionProvider(config.prompt.caption)
    threshold = config.conditions.sketch_threshold
    summary = {"written": 0, "skipped": 0, "failed": 0}

    def input_hash_of(paths):
        return sha256_json({"inputs": sha256_files(paths), "segmentor": seg_row["content_hash"], "config": store_hash})

    source = open_dataset(config, "source", "train")
    for sample in source:
        item_id = "source/%s" % sample.sample_id
        input_hash = input_hash_of([sample.image_path, sample.label_path])
        if _is_current(ConditionItem.get(item_id), input_hash, config):
            summary["skipped"] += 1
            continue
        try:
            image = source.load_image(sample)
            gt = source.load_label(sample)
        except ConditionError as e:
            log.warning("skipping %s: %s", item_id, e.message)
            summary["failed"] += 1
            continue
        predicted, _ = segmentor.predict(image)
        files = _store_files(config, "source", sample)
        save_label(out_path(config, files["label_path"]), fuse_labels(gt, predicted))
        save_sketch(out_path(config, files["sketch_path"]), extract_sketch(image, threshold))
        ConditionItem.upsert(
            item_id=item_id, domain="source", subdomain="",
            image_path=os.path.abspath(sample.image_path), gt_label_path=os.path.abspath(sample.label_path),
            caption=captions(image), guidance=guidance_for(config, gt),
            input_hash=input_hash, config_hash=store_hash, segmentor_checkpoint=seg_row["content_hash"],
            content_hash=sha256_files([out_path(config, files[k]) for k in ("label_path", "sketch_path")]),
            confidence_path=None, **files)
        summary["written"] += 1

    target = open_dataset(config, "target", "train")
    pending = []
    for sample in target:
        input_hash = input_hash_of([sample.image_path])
        if _is_current(ConditionItem.get("target/%s" % sample.sample_id), input_hash, config):
            summary["skipped"] += 1
        else:
            pending.append((sample, input_hash))
    if pending:
        subset = BaseDataset([s for s, _ in pending], target.num_classes, target.ignore)
        priors = {p.sample_id: p for p in generate_target_prior(subset, segmentor, seg_row["content_hash"])}
        for sample, input_hash in pending:
            prior = priors.get(sample.sample_id)
            if prior is None:
                summary["failed"] += 1
                continue
            image = target.load_image(sample)
            files = _store_files(config, "target", sample)
            save_label(out_path(config, files["label_path"]), prior.label)
            save_confidence(out_path(config, files["confidence_path"]), prior.confidence)
            save_sketch(out_path(config, files["sketch_path"]), extract_sketch(image, threshold))
            ConditionItem.upsert(
                item_id="target/%s" % sample.sample_id, domain="target", subdomain=sample.subdomain,
                image_path=os.path.abspath(sample.image_path), gt_label_path=None,
                caption=captions(image), guidance=guidance_for(config, prior.label),
                input_hash=input_hash, config_hash=store_hash, segmentor_checkpoint=seg_row["content_hash"],
                content_hash=sha256_files([out_path(config, files[k])
                                           for k in ("label_path", "sketch_path", "confidence_path")]),
                **files)
            summary["written"] += 1
    log.info("prepare: %(written)s written, %(skipped)s up to date, %(failed)s failed", summary)
    return summary


# conditioning items

class ConditionRecord(object):
    """a store row with its files loaded"""

    def __init__(self, row, image, label, sketch):
        self.row = row
        self.item_id = row["item_id"]
        self.subdomain = row["subdomain"]
        self.caption = row["caption"]
        self.guidance = row["guidance"]
        self.image = image
        self.label = label
        self.sketch = sketch


def store_rows(config, domain):
    rows = ConditionItem.all(domain)
    if not rows:
        raise PipelineError("the condition store holds no %s items; run prepare first" % domain)
    expected = config_hash(config, STORE_SECTIONS)
    stale = [r["item_id"] for r in rows if r["config_hash"] != expected]
    if stale:
        raise StageRefusedError("%s store items were prepared with another config (e.g. %s); run prepare again"
                                % (len(stale), stale[0]))
    return rows


def load_condition_records(config, domain):
    K, ignore = len(config.classes.names), config.classes.ignore
    records = []
    for row in store_rows(config, domain):
        records.append(ConditionRecord(row, load_image(row["image_path"]),
                                       load_label(out_path(config, row["label_path"]), K, ignore),
                                       load_sketch(out_path(config, row["sketch_path"]))))
    return records


def prompt_for(config, subdomain, caption, guidance):
    """the composed prompt; subdomain and guidance must be configured names"""
    record = make_prompt_record(subdomain, caption, guidance if config.prompt.label_guidance else [],
                                config.subdomains.names, config.classes.names)
    return record.composed


def guidance_for(config, label):
    if not config.prompt.label_guidance:
        return []
    return label_guidance(label, config.classes.names, config.prompt.min_fraction)


# pretrain-dm

def run_pretrain_dm(config):
    """train the prompt conditioned base denoiser on real images of both domains.

    Stands in for the pretrained text-to-image model the control branch is
    attached to.
    """
    records = load_condition_records(config, "target") + load_condition_records(config, "source")
    device = device_of(config)
    autoencoder = autoencoder_from_config(config)
    schedule = schedule_from_config(config)
    encoder = text_encoder_from_config(config)
    seed_torch(config, "dm", "base")
    base = build_base_denoiser(config).to(device)
    optimizer = torch.optim.AdamW(base.parameters(), lr=config.dm.pretrain_lr, weight_decay=config.dm.weight_decay)
    generator = seeded(config, "dm", "pretrain")
    tw, th = config.conditions.train_width, config.conditions.train_height
    ema = None
    base.train()
    for step in range(1, config.dm.pretrain_steps + 1):
        batch = [records[int(i)] for i in draw(generator, config.dm.micro_batch, len(records))]
        images = torch.stack([resize_image(r.image, th, tw) for r in batch])
        texts = [apply_prompt_dropout(prompt_for(config, r.subdomain, r.caption, r.guidance),
                                      config.prompt.dropout, generator) for r in batch]
        z0 = autoencoder.encode(images).to(device)
        loss = training_loss(base, z0, encoder.encode_batch(texts).to(device), None, generator, schedule)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        ema = float(loss) if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * float(loss)
        if step % config.dm.log_every == 0:
            log.info("pretrain-dm step %s loss %.4f", step, ema)
    return save_checkpoint(config.paths.out, "dm-base", "dm", base.state_dict(), config_hash(config, BASE_DM_SECTIONS),
                           config.dm.pretrain_steps, schedule,
                           {"autoencoder": autoencoder.autoencoder_id, "text_encoder": encoder.encoder_id,
                            "ema_loss": ema})


# train-dm

def load_base(config):
    try:
        row, archive = load_checkpoint(config.paths.out, "dm-base", kind="dm",
                                       expected_config_hash=config_hash(config, BASE_DM_SECTIONS))
    except CheckpointError:
        log.warning("no dm-base checkpoint, the control branch is attached to an untrained base")
        seed_torch(config, "dm", "base")
        return None, build_base_denoiser(config)
    base = build_base_denoiser(config)
    base.load_state_dict(archive["parameters"])
    return row, base


def _snapshot(model):
    return {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}


def run_train_dm(config):
    """tune the control branch, the fusion module and the base decoder on the
    target images and their priors; emits dm-initial early and dm-final at the end"""
    records = load_condition_records(config, "target")
    dm = config.dm
    device = device_of(config)
    autoencoder = autoencoder_from_config(config)
    schedule = schedule_from_config(config)
    encoder = text_encoder_from_config(config)
    base_row, base = load_base(config)
    seed_torch(config, "dm", "control")
    model = build_controlled_denoiser(config, base).to(device)
    for p in model.base.encoder.parameters():
        p.requires_grad_(False)
    control_params, decoder_params = model.parameter_groups()
    optimizer = torch.optim.AdamW([
        {"params": control_params, "lr": dm.lr_control},
        {"params": decoder_params, "lr": dm.lr_decoder},
    ], weight_decay=dm.weight_decay)

    views_per_frame = 2 if dm.multiscale else 1
    frames_per_micro = max(1, dm.micro_batch // views_per_frame)
    epoch = max(1, int(math.ceil(len(records) / float(frames_per_micro * dm.accumulation))))
    try:
        initial_step = min(evaluate_step_expression(dm.initial_checkpoint, epoch), dm.steps)
    except FormularEvaluationException as e:
        raise ConfigError("dm.initial_checkpoint: %s" % e.message)
    dm_hash = config_hash(config, DM_SECTIONS)
    train_res = (config.conditions.train_width, config.conditions.train_height)
    metadata = {
        "prompt_dropout": config.prompt.dropout,
        "accumulation": dm.accumulation,
        "micro_batch": dm.micro_batch,
        "epoch_steps": epoch,
        "initial_step": initial_step,
        "autoencoder": autoencoder.autoencoder_id,
        "text_encoder": encoder.encoder_id,
        "base": base_row["content_hash"] if base_row else None,
    }
    train_log = JsonLinesLog(out_path(config, "logs", "train_log.jsonl"))
    generator = seeded(config, "dm", "train")
    last_good = _snapshot(model)
    result = {}
    ema = None
    model.train()
    log.info("train-dm: %s target items, %s steps, epoch = %s steps, initial checkpoint at %s",
             len(records), dm.steps, epoch, initial_step)
    for step in range(1, dm.steps + 1):
        total = 0.0
        for _ in range(dm.accumulation):
            frames = [records[int(i)] for i in draw(generator, frames_per_micro, len(records))]
            views, texts = [], []
            for record in frames:
                batch = build_multiscale_batch(record.image, record.label, record.sketch, train_res, generator)
                for view in (batch.views if dm.multiscale else [batch.global_view]):
                    views.append(view)
                    prompt = prompt_for(config, record.subdomain, record.caption, guidance_for(config, view.label))
                    texts.append(apply_prompt_dropout(prompt, config.prompt.dropout, generator))
            z0 = autoencoder.encode(torch.stack([v.image for v in views])).to(device)
            c_f = model.fuse_conditions(torch.stack([v.one_hot for v in views]).to(device),
                                        torch.stack([v.sketch for v in views]).to(device))
            try:
                loss = training_loss(model, z0, encoder.encode_batch(texts).to(device), c_f, generator, schedule)
            except DiffusionError as e:
                model.load_state_dict(last_good)
                row = save_checkpoint(config.paths.out, "dm-last-good", "dm", last_good, dm_hash, step - 1,
                                      schedule, dict(metadata, diverged_at=step))
                raise TrainingDivergedError("training diverged at step %s: %s" % (step, e.message),
                                            last_good=row["content_hash"])
            (loss / dm.accumulation).backward()
            total += float(loss) / dm.accumulation
        optimizer.step()
        optimizer.zero_grad()
        ema = total if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * total
        train_log.write({"step": step, "loss": total, "ema_loss": ema})
        if step % dm.log_every == 0:
            log.info("train-dm step %s loss %.4f", step, ema)
        if step % dm.checkpoint_every == 0:
            last_good = _snapshot(model)
        if step == initial_step:
            result["initial"] = save_checkpoint(config.paths.out, "dm-initial", "dm", model.state_dict(), dm_hash,
                                                step, schedule, dict(metadata, ema_loss=ema))
    result["final"] = save_checkpoint(config.paths.out, "dm-final", "dm", model.state_dict(), dm_hash, dm.steps,
                                      schedule, dict(metadata, ema_loss=ema))
    return result


# generate

def load_dm(config, reference):
    row, archive = load_checkpoint(config.paths.out, reference, kind="dm",
                                   expected_config_hash=config_hash(config, DM_SECTIONS))
    model = build_controlled_denoiser(config)
    model.load_state_dict(archive["parameters"])
    model.to(device_of(config)).eval()
    return row, model, archive["schedule"]


def sample_image(model, autoencoder, encoder, schedule, label, sketch, prompt, seed, steps):
    """decode one DDIM sample conditioned on a label, its sketch and a prompt"""
    device = next(model.parameters()).device
    stride = autoencoder.stride
    with torch.no_grad():
        c_f = model.fuse_conditions(one_hot_encode(label)[None].to(device), sketch.reshape(1, 1, *sketch.shape[-2:]).to(device))
        prompt_emb = encoder.encode_batch([prompt]).to(device)
    noise = torch.Generator().manual_seed(seed)
    zT = torch.randn((1, model.latent_channels, label.height // stride, label.width // stride), generator=noise)
    z0 = ddim_sample(model, zT.to(device), prompt_emb, c_f, make_ddim_timesteps(schedule.T, steps), schedule)
    if not bool(torch.isfinite(z0).all()):
        raise DecodeFailedError("sampled latent is not finite")
    image = autoencoder.decode(z0.cpu())[0]
    if not bool(torch.isfinite(image).all()):
        raise DecodeFailedError("decoded image is not finite")
    return image


def choose_subdomains(policy, names, index, k, per_label, seed):
    if policy == "each":
        return list(names)
    if policy == "round_robin":
        return [names[(index * per_label + k) % len(names)]]
    return [names[derive_seed(seed, "subdomain") % len(names)]]


def condition_files(config, row, resolution):
    """(label, sketch) of a store row at the sampling resolution"""
    K, ignore = len(config.classes.names), config.classes.ignore
    label = load_label(out_path(config, row["label_path"]), K, ignore)
    sketch = load_sketch(out_path(config, row["sketch_path"]))
    if resolution is not None and (label.width, label.height) != tuple(resolution):
        w, h = resolution
        label, sketch = resize_label(label, h, w), resize_image(sketch, h, w)
    return label, sketch


def run_generate(config, checkpoint="final", condition_source="source_labels", manifest_path=None):
    """sample pseudo target images for every condition and append them to the manifest.

    ``source_labels`` conditions on fused source labels (guided by the raw ground
    truth classes), ``target_prior`` on the target priors. Existing records are
    kept, so an interrupted run resumes.
    """
    if checkpoint not in CHECKPOINT_SOURCES:
        raise PipelineError("checkpoint must be one of %s" % ", ".join(CHECKPOINT_SOURCES))
    if condition_source not in CONDITION_SOURCES:
        raise PipelineError("condition source must be one of %s" % ", ".join(CONDITION_SOURCES))
    sampling = config.sampling
    row, model, schedule = load_dm(config, "dm-%s" % checkpoint)
    autoencoder = autoencoder_from_config(config)
    encoder = text_encoder_from_config(config)
    items = store_rows(config, "source" if condition_source == "source_labels" else "target")
    if sampling.limit:
        items = items[:sampling.limit]
    name = "%s-%s" % (condition_source, checkpoint)
    manifest = GenerationManifest(manifest_path or out_path(config, "manifests", name + ".jsonl"))
    image_dir = out_path(config, "generated", name)
    os.makedirs(image_dir, exist_ok=True)
    train_res = (config.conditions.train_width, config.conditions.train_height)
    generation_hash = config_hash(config, GENERATION_SECTIONS)
    names = config.subdomains.names
    written = skipped = failed = 0
    for index, item in enumerate(items):
        label = sketch = None
        label_rel = manifest.relative(out_path(config, item["label_path"]))
        for k in range(sampling.per_label):
            seed = derive_seed(sampling.seed, item["item_id"], k)
            for subdomain in choose_subdomains(sampling.policy, names, index, k, sampling.per_label, seed):
                existing = manifest.lookup(seed, label_rel, checkpoint, subdomain)
                if existing is not None:
                    if existing["checkpoint_hash"] != row["content_hash"]:
                        raise ManifestCollisionError(
                            "manifest %s already binds seed %s of %s (%s) to checkpoint %s"
                            % (manifest.path, seed, item["item_id"], subdomain, existing["checkpoint_hash"][:16]))
                    if existing["status"] == STATUS_OK:
                        skipped += 1
                        continue
                    log.info("retrying %s after %s", existing["record_id"], existing["status"])
                if label is None:
                    label, sketch = condition_files(config, item, train_res if sampling.resolution == "train" else None)
                record_id = "%s-%s-%s-%s" % (item["item_id"].replace("/", "_"), k, checkpoint, subdomain)
                prompt = prompt_for(config, subdomain, item["caption"], item["guidance"])
                record = {
                    "record_id": record_id,
                    "item_id": item["item_id"],
                    "condition_source": condition_source,
                    "label_path": label_rel,
                    "gt_label_path": manifest.relative(item["gt_label_path"]) if item["gt_label_path"] else None,
                    "sketch_path": manifest.relative(out_path(config, item["sketch_path"])),
                    "prompt": prompt,
                    "subdomain": subdomain,
                    "seed": seed,
                    "checkpoint": checkpoint,
                    "checkpoint_hash": row["content_hash"],
                    "config_hash": generation_hash,
                    "sampler": {"kind": "ddim", "steps": sampling.steps, "eta": 0,
                                "resolution": [label.width, label.height]},
                }
                image_path = os.path.join(image_dir, record_id + ".png")
                try:
                    image = sample_image(model, autoencoder, encoder, schedule, label, sketch, prompt, seed,
                                         sampling.steps)
                    save_image(image_path, image)
                    record.update(status=STATUS_OK, image_path=manifest.relative(image_path),
                                  image_hash=sha256_files([image_path]), error=None)
                    written += 1
                except DecodeFailedError as e:
                    log.warning("decoding %s failed: %s", record_id, e)
                    record.update(status=STATUS_DECODE_FAILED, image_path=None, image_hash=None, error=str(e))
                    failed += 1
                manifest.append(record)
    log.info("generate %s: %s written, %s already present, %s failed", name, written, skipped, failed)
    return manifest


def replay_manifest(config, manifest_path, out_dir):
    """regenerate every successful record of a manifest into ``out_dir``"""
    manifest = GenerationManifest(manifest_path)
    expected = config_hash(config, GENERATION_SECTIONS)
    autoencoder = autoencoder_from_config(config)
    encoder = text_encoder_from_config(config)
    K, ignore = len(config.classes.names), config.classes.ignore
    models = {}
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for record in manifest.ok_records():
        if record["config_hash"] != expected:
            raise StageRefusedError("record %s was generated under another config" % record["record_id"])
        if record["checkpoint_hash"] not in models:
            models[record["checkpoint_hash"]] = load_dm(config, record["checkpoint_hash"])
        _, model, schedule = models[record["checkpoint_hash"]]
        label = load_label(manifest.resolve(record["label_path"]), K, ignore)
        sketch = load_sketch(manifest.resolve(record["sketch_path"]))
        w, h = record["sampler"]["resolution"]
        if (label.width, label.height) != (w, h):
            label, sketch = resize_label(label, h, w), resize_image(sketch, h, w)
        image = sample_image(model, autoencoder, encoder, schedule, label, sketch, record["prompt"], record["seed"],
                             record["sampler"]["steps"])
        path = os.path.join(out_dir, os.path.basename(record["image_path"]))
        save_image(path, image)
        paths.append(path)
    return paths


# refine

class GeneratedSets(object):
    """ok records of a set of manifests, split by how they are used in refinement"""

    def __init__(self):
        self.s2t = []
        self.s2t_ids = []
        self.final = []
        self.initial = []

    def add(self, manifest, record):
        image_path = manifest.resolve(record["image_path"])
        if record["condition_source"] == "source_labels":
            if record["gt_label_path"] is None:
                raise AdaptationError("source record %s has no ground truth label" % record["record_id"])
            self.s2t.append((image_path, manifest.resolve(record["gt_label_path"])))
            self.s2t_ids.append(record["record_id"])
        elif record["checkpoint"] == "final":
            self.final.append(image_path)
        else:
            self.initial.append(image_path)


def load_generated_sets(config, manifests):
    expected = config_hash(config, GENERATION_SECTIONS)
    sets = GeneratedSets()
    for path in manifests:
        manifest = GenerationManifest(path)
        for record in manifest.ok_records():
            if record["config_hash"] != expected:
                raise StageRefusedError("manifest %s record %s was generated under another config"
                                        % (path, record["record_id"]))
            sets.add(manifest, record)
    return sets


def _stack_images(paths):
    if not paths:
        return torch.zeros(0, 3, 1, 1)
    return torch.stack([load_image(p) for p in paths])


def _stack_pairs(config, pairs):
    K, ignore = len(config.classes.names), config.classes.ignore
    images, labels = [], []
    for image_path, label_path in pairs:
        image = load_image(image_path)
        label = load_label(label_path, K, ignore)
        if (label.height, label.width) != tuple(image.shape[-2:]):
            label = resize_label(label, image.shape[-2], image.shape[-1])
        images.append(image)
        labels.append(label.classes)
    if not images:
        return torch.zeros(0, 3, 1, 1), torch.zeros(0, 1, 1, dtype=torch.long)
    return torch.stack(images), torch.stack(labels)


def _target_miou(config, segmentor):
    val = open_dataset(config, "target", "val")
    if not len(val) or not val.labelled:
        return None
    segmentor.eval()
    miou = evaluate_miou(segmentor, val, config.classes.names)["miou"]
    segmentor.train()
    return miou


def run_refine(config, manifests, lam=None, name="segmentor-refined", log_suffix=""):
    """fine-tune the baseline segmentor with the generated images.

    Real and generated target images join the self-training term; generated
    source-conditioned images are supervised by their source labels through the
    selection mask with threshold ``lam``.
    """
    rc = config.refine
    lam = rc["lambda"] if lam is None else lam
    ignore, K = config.classes.ignore, len(config.classes.names)
    sets = load_generated_sets(config, manifests)
    if rc.use_s2t and not sets.s2t:
        raise AdaptationError("source-to-target generation is enabled but the manifests hold no such image")
    if rc.use_final and not sets.final:
        raise AdaptationError("final-checkpoint target images are enabled but the manifests hold none")
    if rc.use_init and not sets.initial:
        raise AdaptationError("initial-checkpoint target images are enabled but the manifests hold none")

    _, segmentor = load_segmentor(config, expected_config_hash=config_hash(config, SEGMENTOR_SECTIONS))
    source_images, source_labels = load_split(open_dataset(config, "source", "train"))
    target_parts = []
    if rc.use_target:
        target_parts.append(load_split(open_dataset(config, "target", "train"), with_labels=False)[0])
    if rc.use_final:
        target_parts.append(_stack_images(sets.final))
    if rc.use_init:
        target_parts.append(_stack_images(sets.initial))
    target_parts = [t for t in target_parts if t.shape[0]]
    target_images = torch.cat(target_parts) if target_parts else torch.zeros(0, 3, 1, 1)
    s2t_images, s2t_labels = _stack_pairs(config, sets.s2t if rc.use_s2t else [])
    s2t_ids = sets.s2t_ids if rc.use_s2t else []
    log.info("refine %s: %s source, %s target, %s source-to-target images, lambda %s",
             name, source_images.shape[0], target_images.shape[0], s2t_images.shape[0], lam)

    pre = _target_miou(config, segmentor)
    optimizer = torch.optim.AdamW(segmentor.parameters(), lr=rc.lr, weight_decay=0.01)
    generator = seeded(config, "refine")
    refine_log = JsonLinesLog(out_path(config, "logs", "refine_log%s.jsonl" % log_suffix))
    selection_log = JsonLinesLog(out_path(config, "logs", "selection_stats%s.jsonl" % log_suffix))
    segmentor.train()
    for step in range(1, rc.steps + 1):
        si = draw(generator, rc.batch_size * rc.ratio_source, source_images.shape[0])
        ti = draw(generator, rc.batch_size * rc.ratio_target, target_images.shape[0])
        xi = draw(generator, rc.batch_size * rc.ratio_s2t, s2t_images.shape[0])
        base = baseline_loss(segmentor, (source_images[si], source_labels[si]),
                             target_images[ti] if ti.numel() else None, rc.pseudo_threshold, ignore)
        s2t = base.new_zeros(())
        if xi.numel():
            logits = segmentor(s2t_images[xi])
            confidence, predicted = torch.softmax(logits.detach(), dim=1).max(dim=1)
            masks = []
            for j in range(xi.numel()):
                n = int(xi[j])
                selection = build_selection_mask(LabelMap(s2t_labels[n], K, ignore), predicted[j],
                                                 confidence[j], lam)
                masks.append(selection.mask)
                kept = int(selection.mask.sum())
                labelled = selection.mask.numel() - selection.stats["ignore"]
                entry = dict(selection.stats, step=step, record_id=s2t_ids[n], index=j, kept=kept,
                             kept_fraction=kept / float(labelled) if labelled else 0.0)
                entry["lambda"] = lam
                selection_log.write(entry)
            s2t = masked_cross_entropy(logits, s2t_labels[xi], torch.stack(masks))
        loss = total_uda_loss(base, s2t)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        refine_log.write({"step": step, "loss": float(loss), "base": float(base), "s2t": float(s2t)})
        if step % rc.log_every == 0:
            log.info("refine step %s loss %.4f (s2t %.4f)", step, float(loss), float(s2t))
    post = _target_miou(config, segmentor)
    if pre is not None:
        log.info("%s target val mIoU %.2f -> %.2f", name, pre, post)
    row = save_checkpoint(config.paths.out, name, "segmentor", segmentor.state_dict(),
                          config_hash(config, REFINE_SECTIONS), rc.steps,
                          metadata={"lambda": lam, "pre_miou": pre, "post_miou": post,
                                    "manifests": [os.path.abspath(m) for m in manifests]})
    return {"checkpoint": row["content_hash"], "name": name, "lambda": lam, "pre_miou": pre, "post_miou": post}


def sweep_lambda(config, manifests):
    """refine once per value of refine.sweep, all from the same baseline and batches"""
    results = []
    for value in config.refine.sweep:
        lam = 0.0 if value == "none" else float(value)
        label = str(value)
        result = run_refine(config, manifests, lam=lam, name="segmentor-lambda-%s" % label,
                            log_suffix="-lambda-%s" % label)
        result["setting"] = label
        results.append(result)
    lines = ["%-8s %s" % ("lambda", "mIoU")]
    for r in results:
        lines.append("%-8s %s" % (r["setting"], "-" if r["post_miou"] is None else "%.2f" % r["post_miou"]))
    report_dir = out_path(config, "reports")
    os.makedirs(report_dir, exist_ok=True)
    with open(os.path.join(report_dir, "sweep_lambda.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    sweep_log = JsonLinesLog(os.path.join(report_dir, "sweep_lambda.jsonl"))
    for r in results:
        sweep_log.write(r)
    return results


# metrics

def _write_report(config, name, report, table=None):
    report_dir = out_path(config, "reports")
    os.makedirs(report_dir, exist_ok=True)
    with open(os.path.join(report_dir, name + ".json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    if table is not None:
        with open(os.path.join(report_dir, name + ".txt"), "w") as f:
            f.write(table)


def run_metrics(config, manifest_path=None):
    """image quality of generated target images against real target images.

    Without a manifest, images are sampled on the fly from labels of the target
    validation split; with one, its ok records are scored against the real image
    of their condition item.
    """
    mc = config.metrics
    row, model, schedule = load_dm(config, mc.checkpoint)
    model.cpu()
    autoencoder = autoencoder_from_config(config)
    encoder = text_encoder_from_config(config)
    embedder = DenoiserFeatureEmbedder(model.base, autoencoder)
    reference_set, _ = load_split(open_dataset(config, "target", "train"), with_labels=False)
    if reference_set.shape[0] < 2:
        raise PipelineError("the Frechet distance needs at least two real target images")
    generator = seeded(config, "metrics")
    images_per_label = mc.images_per_label

    if manifest_path is None:
        val = open_dataset(config, "target", "val")
        if not val.labelled:
            raise PipelineError("on-the-fly metrics need a labelled target validation split")
        samples = list(val)
        chosen = [samples[int(i)] for i in torch.randperm(len(samples), generator=generator)[:mc.labels]]
        real_images = [val.load_image(s) for s in chosen]
        sketches = {s.sample_id: extract_sketch(img, config.conditions.sketch_threshold)
                    for s, img in zip(chosen, real_images)}

        def generate(sample, index):
            label = val.load_label(sample)
            prompt = prompt_for(config, sample.subdomain, ConstantCaptionProvider(config.prompt.caption)(sample),
                                guidance_for(config, label))
            seed = derive_seed(config.sampling.seed, "metrics", sample.sample_id, index)
            return sample_image(model, autoencoder, encoder, schedule, label, sketches[sample.sample_id], prompt,
                                seed, config.sampling.steps)
        labels = chosen
    else:
        manifest = GenerationManifest(manifest_path)
        by_item = {}
        for record in manifest.ok_records():
            by_item.setdefault(record["item_id"], []).append(record)
        if not by_item:
            raise PipelineError("manifest %s holds no generated image" % manifest_path)
        item_ids = sorted(by_item)
        labels = [item_ids[int(i)] for i in torch.randperm(len(item_ids), generator=generator)[:mc.labels]]
        real_images = [load_image(ConditionItem.get(item_id)["image_path"]) for item_id in labels]
        images_per_label = min(images_per_label, min(len(by_item[i]) for i in labels))

        def generate(item_id, index):
            return load_image(manifest.resolve(by_item[item_id][index]["image_path"]))

    report = paired_generation_protocol(generate, labels, real_images, embedder, images_per_label,
                                        mc.ms_ssim_levels, reference_set=list(reference_set))
    report["checkpoint"] = row["content_hash"]
    report["source"] = manifest_path or "on-the-fly"
    _write_report(config, "metrics", report, format_report_table(report))
    return report


# evaluate

def run_evaluate(config, reference="segmentor-baseline"):
    """source and target validation mIoU, the target overall and per subdomain"""
    row, segmentor = load_segmentor(config, reference)
    names = config.classes.names
    report = {"checkpoint": row["content_hash"], "name": row["name"]}
    val = open_dataset(config, "target", "val")
    if not len(val) or not val.labelled:
        raise PipelineError("evaluation needs a labelled target validation split")
    report["overall"] = evaluate_miou(segmentor, val, names)
    report["subdomains"] = {}
    for subdomain in config.subdomains.names:
        split = open_dataset(config, "target", "val", subdomains=[subdomain])
        if len(split):
            report["subdomains"][subdomain] = evaluate_miou(segmentor, split, names)["miou"]
    source_val = open_dataset(config, "source", "val")
    if len(source_val) and source_val.labelled:
        report["source"] = evaluate_miou(segmentor, source_val, names)
    else:
        log.warning("no labelled source validation split, source mIoU skipped")
        report["source"] = None
    log.info("%s target val mIoU %.2f %s, source val mIoU %s", row["name"], report["overall"]["miou"],
             report["subdomains"], "%.2f" % report["source"]["miou"] if report["source"] else "-")
    _write_report(config, "evaluate-%s" % row["name"], report)
    return report


class Pipeline(object):
    """the configured stages, addressed by their command line names"""

    def __init__(self, config):
        self.config = config

    def run(self, stage, **kwargs):
        try:
            function = STAGES[stage]
        except KeyError:
            raise PipelineError("unknown stage %s (one of %s)" % (stage, ", ".join(sorted(STAGES))))
        log.info("running stage %s", stage)
        return function(self.config, **kwargs)


STAGES = {
    "make-data": run_make_dataset,
    "train-seg": run_train_seg,
    "prepare": run_prepare,
    "pretrain-dm": run_pretrain_dm,
    "train-dm": run_train_dm,
    "generate": run_generate,
    "replay": replay_manifest,
    "refine": run_refine,
    "sweep-lambda": sweep_lambda,
    "metrics": run_metrics,
    "evaluate": run_evaluate,
}
